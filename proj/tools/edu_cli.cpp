// Command-line entry points: train / eval / generate / ablate / split.
// Exit codes: 0 success, 2 usage or config error, 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "edu/edu.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct SharedFlags {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir = "run";
};

std::uint64_t resolve_seed(const SharedFlags& flags) {
    if (flags.seed_set) return flags.seed;
    if (const char* env = std::getenv("EDU_SEED")) return std::strtoull(env, nullptr, 10);
    return 0;
}

// Config file first, then CLI flags on top; the resolved merge is persisted
// next to the run outputs.
edu::RunConfig resolve_run_config(const SharedFlags& shared, const nlohmann::json& overrides) {
    nlohmann::json merged = edu::run_config_to_json(edu::RunConfig{});
    if (!shared.config_path.empty()) {
        std::ifstream in(shared.config_path);
        if (!in) throw edu::DataError("cannot open config file " + shared.config_path);
        nlohmann::json file_cfg = nlohmann::json::parse(in);
        for (auto it = file_cfg.begin(); it != file_cfg.end(); ++it) merged[it.key()] = *it;
    }
    for (auto it = overrides.begin(); it != overrides.end(); ++it) merged[it.key()] = *it;
    merged["seed"] = resolve_seed(shared);
    merged["out"] = shared.out_dir;
    edu::RunConfig cfg = edu::run_config_from_json(merged);
    cfg.validate();
    return cfg;
}

void write_resolved_config(const edu::RunConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(std::filesystem::path(cfg.out_dir) / "resolved_config.json");
    out << edu::run_config_to_json(cfg).dump(2) << "\n";
}

void apply_scheme_defaults(edu::RunConfig& cfg, bool dropout_given) {
    cfg.model.u_mask = edu::scheme_u_mask(cfg.model.scheme);
    if (!dropout_given) cfg.model.dropout = edu::default_dropout(cfg.model.scheme);
}

int cmd_train(const edu::RunConfig& run) {
    edu::RunLock lock(run.out_dir);
    write_resolved_config(run);
    edu::DatasetBundle data = edu::prepare_data(run);
    std::ofstream log_file(std::filesystem::path(run.out_dir) / "train.log");
    edu::TrainResult result = edu::train_model(
        run, data, [&log_file](const std::string& line) { log_file << line << "\n"; });
    log_file.flush();
    edu::save_checkpoint(result.state, data.vocab,
                         (std::filesystem::path(run.out_dir) / "model.ckpt").string(),
                         /*with_optimizer=*/true);
    std::cout << "trained " << result.state.global_step << " steps; best dev ppl "
              << result.best_dev_ppl << " at epoch " << result.best_epoch << "\n";
    std::cout << "checkpoint: " << run.out_dir << "/model.ckpt\n";
    return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dialogues_path,
             const std::string& nli_path, bool synthetic, std::uint64_t seed,
             const std::string& out_dir) {
    edu::LoadedCheckpoint loaded = edu::load_checkpoint(ckpt_path);
    edu::DatasetBundle data;
    if (synthetic) {
        edu::RunConfig run;
        run.synthetic = true;
        run.seed = seed;
        data = edu::prepare_data(run);
        if (data.vocab.size() != loaded.vocab.size())
            throw edu::DataError("checkpoint vocabulary does not match synthetic grammar");
    } else {
        if (dialogues_path.empty())
            throw edu::DataError("eval needs --dialogues or --synthetic");
        data.vocab = loaded.vocab;
        data.test_dialogues = edu::load_dialogue_jsonl(dialogues_path);
        if (!nli_path.empty()) {
            // Entailed/contradicted tuples for delta-P come from an NLI-shaped
            // file: premise = persona, hypothesis = response.
            for (const auto& ex : edu::load_nli_jsonl(nli_path)) {
                edu::DialogueExample d;
                d.personas = {ex.premise};
                d.query = ex.premise;
                d.response = ex.hypothesis;
                if (ex.label == edu::NliLabel::Entailment) data.eval_entailed.push_back(d);
                else if (ex.label == edu::NliLabel::Contradiction)
                    data.eval_contradicted.push_back(d);
            }
        }
    }
    edu::MetricsReport report = edu::evaluate_model(loaded.state, loaded.vocab, data);
    std::cout << report.to_table();
    std::filesystem::create_directories(out_dir);
    std::ofstream(std::filesystem::path(out_dir) / "metrics.json")
        << report.to_json().dump(2) << "\n";
    return kExitOk;
}

int cmd_generate(const std::string& ckpt_path, const std::string& input_path,
                 std::size_t beam, std::size_t top, bool verbose) {
    edu::LoadedCheckpoint loaded = edu::load_checkpoint(ckpt_path);
    const edu::Vocabulary& vocab = loaded.vocab;

    std::ifstream file_in;
    std::istream* in = &std::cin;
    if (!input_path.empty()) {
        file_in.open(input_path);
        if (!file_in) throw edu::DataError("cannot open " + input_path);
        in = &file_in;
    }

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(*in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            std::vector<std::vector<int>> personas;
            for (const auto& p : j.at("persona"))
                personas.push_back(vocab.encode(p.get<std::string>()));
            std::vector<int> query = vocab.encode(j.at("query").get<std::string>());

            if (beam > 1) {
                auto results = edu::beam_rerank(loaded.state.model, loaded.state.config,
                                                personas, query, beam, top);
                for (std::size_t i = 0; i < results.size(); ++i) {
                    std::cout << "cand[" << i << "] score=" << results[i].score << " "
                              << vocab.decode(results[i].tokens) << "\n";
                }
            } else {
                edu::DecodeOutputs out = edu::greedy_decode(
                    loaded.state.model, loaded.state.config, personas, query);
                std::cout << "D: " << vocab.decode(out.d_stage.tokens) << "\n";
                if (!out.u_stage.tokens.empty() || loaded.state.config.ablation ==
                                                       edu::Ablation::None)
                    std::cout << "U: " << vocab.decode(out.u_stage.tokens) << "\n";
                if (verbose) {
                    std::cout << "D log-probs:";
                    for (edu::Real lp : out.d_stage.log_probs) std::cout << " " << lp;
                    std::cout << "\nU log-probs:";
                    for (edu::Real lp : out.u_stage.log_probs) std::cout << " " << lp;
                    std::cout << "\n";
                }
            }
        } catch (const std::exception& e) {
            std::cerr << "line " << line_no << ": " << e.what() << "\n";
        }
    }
    return kExitOk;
}

int cmd_ablate(const edu::RunConfig& base, const std::vector<std::string>& variants) {
    edu::RunLock lock(base.out_dir);
    write_resolved_config(base);
    edu::DatasetBundle data = edu::prepare_data(base);
    nlohmann::json all;
    for (const auto& name : variants) {
        edu::Ablation v = edu::ablation_from_string(name);
        edu::MetricsReport report = edu::run_ablation(base, v, data);
        std::cout << "== ablation " << name << " ==\n" << report.to_table();
        all[name] = report.to_json();
    }
    std::ofstream(std::filesystem::path(base.out_dir) / "ablations.json")
        << all.dump(2) << "\n";
    return kExitOk;
}

int cmd_split(const std::string& dialogues_path, const std::string& fraction,
              const std::string& out_path) {
    auto examples = edu::load_dialogue_jsonl(dialogues_path);
    auto subset = edu::low_resource_split(examples, edu::parse_fraction(fraction));
    edu::save_dialogue_jsonl(subset, out_path);
    std::cout << "kept " << subset.size() << " of " << examples.size() << " dialogues\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EDU stack-propagation: persona dialogue with an understanding regularizer"};
    app.require_subcommand(1);

    SharedFlags shared;
    nlohmann::json overrides;
    bool dropout_given = false;

    auto add_shared = [&](CLI::App* cmd) {
        cmd->add_option("--config", shared.config_path, "flat JSON config file");
        cmd->add_option("--seed", shared.seed, "rng seed (fallback: EDU_SEED env)")
            ->each([&](const std::string&) { shared.seed_set = true; });
        cmd->add_option("--out", shared.out_dir, "output directory");
    };
    auto add_data_flags = [&](CLI::App* cmd) {
        cmd->add_option_function<std::string>(
            "--dialogues", [&](const std::string& v) { overrides["dialogues"] = v; },
            "dialogue JSONL path");
        cmd->add_option_function<std::string>(
            "--nli", [&](const std::string& v) { overrides["nli"] = v; }, "NLI JSONL path");
        cmd->add_flag_function(
            "--synthetic", [&](std::int64_t) { overrides["synthetic"] = true; },
            "generate synthetic corpora");
        cmd->add_option_function<std::string>(
            "--fraction", [&](const std::string& v) { overrides["fraction"] = v; },
            "low-resource fraction: 1, 1/2, 1/4, 1/8");
    };
    auto add_model_flags = [&](CLI::App* cmd) {
        cmd->add_option_function<std::string>(
            "--scheme", [&](const std::string& v) { overrides["scheme"] = v; },
            "initialization scheme: tot, bob, gog, bgb");
        cmd->add_option_function<std::string>(
            "--u-mask", [&](const std::string& v) { overrides["u_mask"] = v; },
            "regularizer mask: bidirectional, causal");
        cmd->add_option_function<std::string>(
            "--ablation", [&](const std::string& v) { overrides["ablation"] = v; },
            "ablation: none, wo_ul, e_d, e");
        cmd->add_option_function<edu::Real>(
            "--dropout",
            [&](const edu::Real& v) {
                overrides["dropout"] = v;
                dropout_given = true;
            },
            "dropout rate");
        cmd->add_option_function<std::size_t>(
            "--epochs", [&](const std::size_t& v) { overrides["joint_epochs"] = v; },
            "joint training epochs");
        cmd->add_option_function<std::size_t>(
            "--warmup-epochs", [&](const std::size_t& v) { overrides["warmup_epochs"] = v; },
            "warm-up epochs (L_D_NLL only)");
        cmd->add_option_function<std::size_t>(
            "--batch-size", [&](const std::size_t& v) { overrides["batch_size"] = v; },
            "examples per batch");
        cmd->add_option_function<edu::Real>(
            "--lr", [&](const edu::Real& v) { overrides["lr"] = v; }, "learning rate");
        cmd->add_option_function<std::size_t>(
            "--dialogue-count",
            [&](const std::size_t& v) { overrides["synth_dialogues"] = v; },
            "synthetic dialogue count");
        cmd->add_option_function<std::size_t>(
            "--nli-count", [&](const std::size_t& v) { overrides["synth_nli"] = v; },
            "synthetic NLI pair count");
    };

    CLI::App* train = app.add_subcommand("train", "warm-up then joint training");
    add_shared(train);
    add_data_flags(train);
    add_model_flags(train);

    CLI::App* eval = app.add_subcommand("eval", "full metric report for a checkpoint");
    std::string ckpt_path;
    eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    add_shared(eval);
    add_data_flags(eval);

    CLI::App* gen = app.add_subcommand("generate", "decode responses for JSONL inputs");
    std::string gen_input;
    std::size_t gen_beam = 1, gen_top = 1;
    bool gen_verbose = false;
    gen->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
    gen->add_option("--input", gen_input, "input JSONL ({\"persona\": [...], \"query\": ...})");
    gen->add_option("--beam", gen_beam, "beam size (1 = greedy)");
    gen->add_option("--top", gen_top, "candidates to keep after re-ranking");
    gen->add_flag("--verbose", gen_verbose, "print per-token log-probs");
    add_shared(gen);

    CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate ablation variants");
    std::vector<std::string> variants{"none", "wo_ul", "e_d", "e"};
    ablate->add_option("--variants", variants, "subset of: none, wo_ul, e_d, e");
    add_shared(ablate);
    add_data_flags(ablate);
    add_model_flags(ablate);

    CLI::App* split = app.add_subcommand("split", "prefix low-resource split of a corpus");
    std::string split_in, split_fraction = "1/2", split_out;
    split->add_option("--dialogues", split_in, "dialogue JSONL path")->required();
    split->add_option("--fraction", split_fraction, "1, 1/2, 1/4, 1/8");
    split->add_option("--out-file", split_out, "output JSONL path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train->parsed()) {
            edu::RunConfig run = resolve_run_config(shared, overrides);
            apply_scheme_defaults(run, dropout_given || overrides.contains("dropout"));
            return cmd_train(run);
        }
        if (eval->parsed()) {
            return cmd_eval(ckpt_path, overrides.value("dialogues", std::string{}),
                            overrides.value("nli", std::string{}),
                            overrides.value("synthetic", false), resolve_seed(shared),
                            shared.out_dir);
        }
        if (gen->parsed()) {
            if (gen_beam < gen_top) throw edu::DataError("--beam must be >= --top");
            return cmd_generate(ckpt_path, gen_input, gen_beam, gen_top, gen_verbose);
        }
        if (ablate->parsed()) {
            edu::RunConfig run = resolve_run_config(shared, overrides);
            apply_scheme_defaults(run, dropout_given || overrides.contains("dropout"));
            return cmd_ablate(run, variants);
        }
        if (split->parsed()) return cmd_split(split_in, split_fraction, split_out);
    } catch (const edu::TensorError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
