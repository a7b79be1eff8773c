// Experiment orchestration: run configuration, the warm-up + joint training
// loop with interleaved dialogue/NLI batches, dev-set model selection,
// structured logging, evaluation harness, and the ablation runner.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "edu/checkpoint.hpp"
#include "edu/data.hpp"
#include "edu/eval.hpp"
#include "edu/model.hpp"
#include "edu/objectives.hpp"

namespace edu {

struct RunConfig {
    EDUConfig model;

    std::string dialogues_path;  // JSONL; empty with synthetic=true
    std::string nli_path;
    bool synthetic = false;
    std::size_t synth_dialogues = 2000;
    std::size_t synth_nli = 3000;
    std::size_t fraction = 1;  // denominator: 1, 2, 4, 8

    std::size_t warmup_epochs = 3;
    std::size_t joint_epochs = 10;
    std::size_t batch_size = 32;
    Real lr = 5e-5;
    std::uint64_t seed = 0;
    std::string out_dir = "run";

    void validate() const {
        if (fraction != 1 && fraction != 2 && fraction != 4 && fraction != 8)
            throw DataError("fraction must be 1, 1/2, 1/4, or 1/8");
        if (batch_size == 0) throw DataError("batch size must be positive");
        if (lr <= 0.0) throw DataError("learning rate must be positive");
        if (!synthetic && dialogues_path.empty())
            throw DataError("either --synthetic or --dialogues is required");
    }
};

// Table-3 dropout defaults: 0.1 for bidirectional-U schemes, 0.2 for causal.
inline Real default_dropout(Scheme s) {
    return scheme_u_mask(s) == MaskKind::Causal ? 0.2 : 0.1;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j = config_to_json(c.model);
    j["dialogues"] = c.dialogues_path;
    j["nli"] = c.nli_path;
    j["synthetic"] = c.synthetic;
    j["synth_dialogues"] = c.synth_dialogues;
    j["synth_nli"] = c.synth_nli;
    j["fraction"] = c.fraction == 1 ? "1" : "1/" + std::to_string(c.fraction);
    j["warmup_epochs"] = c.warmup_epochs;
    j["joint_epochs"] = c.joint_epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["seed"] = c.seed;
    j["out"] = c.out_dir;
    return j;
}

// Strict parse: unknown keys are rejected so a typo cannot silently change a
// run.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "layers", "d_model", "heads", "d_ff", "dropout", "vocab_size", "max_persona",
        "max_query", "max_response", "alpha", "beta", "u_mask", "scheme", "ablation",
        "dialogues", "nli", "synthetic", "synth_dialogues", "synth_nli", "fraction",
        "warmup_epochs", "joint_epochs", "batch_size", "lr", "seed", "out"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw DataError("unknown config key '" + it.key() + "'");
    RunConfig c;
    c.model = config_from_json(j);
    c.dialogues_path = j.value("dialogues", std::string{});
    c.nli_path = j.value("nli", std::string{});
    c.synthetic = j.value("synthetic", false);
    c.synth_dialogues = j.value("synth_dialogues", std::size_t{2000});
    c.synth_nli = j.value("synth_nli", std::size_t{3000});
    c.fraction = parse_fraction(j.value("fraction", std::string{"1"}));
    c.warmup_epochs = j.value("warmup_epochs", std::size_t{3});
    c.joint_epochs = j.value("joint_epochs", std::size_t{10});
    c.batch_size = j.value("batch_size", std::size_t{32});
    c.lr = j.value("lr", 5e-5);
    c.seed = j.value("seed", std::uint64_t{0});
    c.out_dir = j.value("out", std::string{"run"});
    return c;
}

// ---- run directory lock -------------------------------------------------------

// One process owns a run directory at a time.
class RunLock {
public:
    explicit RunLock(const std::string& dir) : path_(std::filesystem::path(dir) / ".lock") {
        std::filesystem::create_directories(dir);
        if (std::filesystem::exists(path_))
            throw DataError("run directory '" + dir + "' is locked by another process (" +
                            path_.string() + " exists)");
        std::ofstream(path_) << "locked\n";
    }
    ~RunLock() {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

// ---- dataset bundle --------------------------------------------------------------

struct DatasetBundle {
    Vocabulary vocab;
    std::vector<DialogueExample> train_dialogues;
    std::vector<DialogueExample> dev_dialogues;
    std::vector<InferenceExample> nli_train;
    // Held-out evaluation material (synthetic runs only).
    std::vector<DialogueExample> test_dialogues;
    std::vector<DialogueExample> eval_entailed;
    std::vector<DialogueExample> eval_contradicted;
};

// Assembles train/dev/test data. Synthetic runs generate everything from the
// seed; file runs read the JSONL shapes. The low-resource fraction applies
// to the training dialogues only; dev/test stay fixed.
inline DatasetBundle prepare_data(const RunConfig& cfg) {
    DatasetBundle b;
    if (cfg.synthetic) {
        b.vocab = synthetic_vocabulary();
        auto train_src = synth_dialogue_corpus(cfg.seed, cfg.synth_dialogues);
        const std::size_t held = std::max<std::size_t>(cfg.synth_dialogues / 10, 1);
        auto test_src = synth_dialogue_corpus(cfg.seed + 1, held);
        b.train_dialogues = dialogue_examples(train_src);
        b.test_dialogues = dialogue_examples(test_src);
        b.nli_train = synth_nli_corpus(cfg.seed + 2, cfg.synth_nli);
        auto pairs = mirrored_eval_pairs(test_src, cfg.seed + 3);
        for (const auto& p : pairs) {
            b.eval_entailed.push_back(p.entailed);
            b.eval_contradicted.push_back(p.contradicted);
        }
    } else {
        b.train_dialogues = load_dialogue_jsonl(cfg.dialogues_path);
        if (!cfg.nli_path.empty()) b.nli_train = load_nli_jsonl(cfg.nli_path);
        std::vector<std::string> docs;
        for (const auto& d : b.train_dialogues) {
            for (const auto& p : d.personas) docs.push_back(p);
            docs.push_back(d.query);
            docs.push_back(d.response);
        }
        for (const auto& n : b.nli_train) {
            docs.push_back(n.premise);
            docs.push_back(n.hypothesis);
        }
        b.vocab = build_vocab(docs);
    }
    b.train_dialogues = low_resource_split(b.train_dialogues, cfg.fraction);
    const std::size_t dev = std::max<std::size_t>(b.train_dialogues.size() / 10, 1);
    if (b.train_dialogues.size() > dev) {
        b.dev_dialogues.assign(b.train_dialogues.end() - dev, b.train_dialogues.end());
        b.train_dialogues.resize(b.train_dialogues.size() - dev);
    } else {
        b.dev_dialogues = b.train_dialogues;
    }
    if (b.test_dialogues.empty()) b.test_dialogues = b.dev_dialogues;
    return b;
}

// ---- training loop ------------------------------------------------------------------

struct TrainResult {
    TrainState state;              // final parameters
    std::vector<std::string> log;  // one line per step
    Real best_dev_ppl = 0.0;
    std::size_t best_epoch = 0;
};

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    return idx;
}

}  // namespace detail

// Warm-up (L_D_NLL only, 3 epochs by default) then joint training; each
// joint step consumes one dialogue batch and one NLI batch split evenly
// between the entailed and contradicted pools, cycling the smaller set.
// Deterministic given the seed. Returns the dev-selected best parameters.
inline TrainResult train_model(const RunConfig& run, const DatasetBundle& data,
                               const std::function<void(const std::string&)>& log_sink = {}) {
    TrainResult result;
    TrainState& state = result.state;
    state.config = run.model;
    state.config.vocab_size = data.vocab.size();
    state.model = init_model(state.config, run.seed);
    state.rng.seed(run.seed ^ 0x9e3779b97f4a7c15ull);

    std::vector<TokenizedDialogue> dialogues;
    for (const auto& ex : data.train_dialogues)
        dialogues.push_back(tokenize_dialogue(ex, data.vocab));
    std::vector<TokenizedNli> nli_pos, nli_neg;
    for (const auto& ex : data.nli_train) {
        if (ex.label == NliLabel::Entailment) nli_pos.push_back(tokenize_nli(ex, data.vocab));
        else if (ex.label == NliLabel::Contradiction)
            nli_neg.push_back(tokenize_nli(ex, data.vocab));
    }

    const std::size_t steps_per_epoch =
        std::max<std::size_t>(dialogues.size() / run.batch_size, 1);
    AdamHyper hyper;
    hyper.lr = run.lr;
    hyper.total_steps = steps_per_epoch * (run.warmup_epochs + run.joint_epochs);
    state.optimizer = AdamOptimizer(hyper);

    std::mt19937_64 data_rng(run.seed ^ 0xa5a5a5a55a5a5a5aull);
    auto emit = [&](const LossBreakdown& b, Real lr) {
        result.log.push_back(format_log_line(state.global_step, state.epoch, b, lr));
        if (log_sink) log_sink(result.log.back());
    };

    const bool encoder_only = run.model.ablation == Ablation::EncoderOnly;

    for (std::size_t e = 0; e < run.warmup_epochs; ++e) {
        state.epoch = e;
        auto order = detail::shuffled_indices(dialogues.size(), data_rng);
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            std::vector<TokenizedDialogue> batch;
            for (std::size_t k = s * run.batch_size;
                 k < std::min((s + 1) * run.batch_size, order.size()); ++k)
                batch.push_back(dialogues[order[k]]);
            const Real lr = state.optimizer.current_lr();
            LossBreakdown b =
                encoder_only ? encoder_lm_step(state, batch) : warmup_step(state, batch);
            emit(b, lr);
        }
    }

    std::optional<EDUParams> best;
    std::size_t pos_cursor = 0, neg_cursor = 0;
    const std::size_t half = std::max<std::size_t>(run.batch_size / 2, 1);

    for (std::size_t e = 0; e < run.joint_epochs; ++e) {
        state.epoch = run.warmup_epochs + e;
        auto order = detail::shuffled_indices(dialogues.size(), data_rng);
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            std::vector<TokenizedDialogue> batch;
            for (std::size_t k = s * run.batch_size;
                 k < std::min((s + 1) * run.batch_size, order.size()); ++k)
                batch.push_back(dialogues[order[k]]);
            std::vector<TokenizedNli> pos_batch, neg_batch;
            if (run.model.ablation == Ablation::None) {
                for (std::size_t k = 0; k < half && !nli_pos.empty(); ++k)
                    pos_batch.push_back(nli_pos[pos_cursor++ % nli_pos.size()]);
                for (std::size_t k = 0; k < half && !nli_neg.empty(); ++k)
                    neg_batch.push_back(nli_neg[neg_cursor++ % nli_neg.size()]);
            }
            const Real lr = state.optimizer.current_lr();
            LossBreakdown b = encoder_only ? encoder_lm_step(state, batch)
                                           : train_step(state, batch, pos_batch, neg_batch);
            emit(b, lr);
        }
        // dev selection on the final generation path
        TokenScorer scorer = make_model_scorer(state.model, state.config, data.vocab);
        const Real dev_ppl = perplexity(scorer, data.dev_dialogues);
        if (!best || dev_ppl < result.best_dev_ppl) {
            result.best_dev_ppl = dev_ppl;
            result.best_epoch = state.epoch;
            best = clone_params(state.model);
        }
    }
    if (best) state.model = std::move(*best);
    return result;
}

// ---- evaluation harness ---------------------------------------------------------------

// Full MetricsReport: PPL on the test dialogues, distinct-n over greedy
// generations, C.Score via the referee, and delta-P over the mirrored
// entailed/contradicted tuples.
inline MetricsReport evaluate_model(const TrainState& state, const Vocabulary& vocab,
                                    const DatasetBundle& data,
                                    const RefereeFn& referee = rule_referee) {
    MetricsReport report;
    TokenScorer scorer = make_model_scorer(state.model, state.config, vocab);
    report.ppl = perplexity(scorer, data.test_dialogues);

    std::vector<std::string> responses;
    std::vector<std::vector<std::string>> personas;
    const bool u_path = state.config.ablation == Ablation::None ||
                        state.config.ablation == Ablation::WithoutUL;
    for (const auto& ex : data.test_dialogues) {
        std::vector<std::vector<int>> persona_ids;
        for (const auto& p : ex.personas) persona_ids.push_back(vocab.encode(p));
        DecodeOutputs out = greedy_decode(state.model, state.config, persona_ids,
                                          vocab.encode(ex.query), state.config.max_response);
        const GenerationResult& r = u_path ? out.u_stage : out.d_stage;
        responses.push_back(vocab.decode(r.tokens));
        personas.push_back(ex.personas);
    }
    report.dist1 = distinct_n(responses, 1);
    report.dist2 = distinct_n(responses, 2);
    report.d_avg = (report.dist1 + report.dist2) / 2.0;
    report.c_score = c_score(referee, responses, personas);

    if (!data.eval_entailed.empty() && !data.eval_contradicted.empty()) {
        DeltaPReport dp = delta_p(scorer, data.eval_entailed, data.eval_contradicted);
        report.p_ent = dp.p_ent;
        report.p_ctd = dp.p_ctd;
        report.delta_p = dp.delta_p;
    }
    return report;
}

// Trains and evaluates one ablation variant on the given data.
inline MetricsReport run_ablation(RunConfig run, Ablation variant, const DatasetBundle& data) {
    run.model.ablation = variant;
    TrainResult r = train_model(run, data);
    return evaluate_model(r.state, data.vocab, data);
}

}  // namespace edu
