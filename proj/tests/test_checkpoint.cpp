// Checkpoint format: exact round trips for parameters, optimizer state, and
// config; corruption, truncation, and trailing-garbage detection.

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "edu/edu.hpp"

using namespace edu;

namespace {

const std::string kDir = "/tmp/edu_test_ckpt";

TrainState make_state(std::uint64_t seed) {
    TrainState state;
    state.config.layers = 1;
    state.config.d_model = 8;
    state.config.heads = 2;
    state.config.d_ff = 16;
    state.config.dropout = 0.0;
    state.config.max_persona = 8;
    state.config.max_query = 8;
    state.config.max_response = 8;
    state.config.vocab_size = 0;  // set from vocab below
    return state;
}

Vocabulary small_vocab() {
    return build_vocab({"alpha beta gamma delta epsilon zeta"});
}

}  // namespace

TEST_CASE("save/load round trip reproduces logits exactly and restores Adam state") {
    std::filesystem::create_directories(kDir);
    const std::string path = kDir + "/round_trip.ckpt";

    Vocabulary vocab = small_vocab();
    TrainState state = make_state(1);
    state.config.vocab_size = vocab.size();
    state.model = init_model(state.config, 5);
    state.optimizer = AdamOptimizer(AdamHyper{1e-3, 0.9, 0.999, 1e-8, 0.01, 100});

    TokenizedDialogue ex;
    ex.personas = {{4, 5}};
    ex.query = {6};
    ex.response = {7, 8};
    for (int i = 0; i < 3; ++i) train_step(state, {ex}, {}, {});

    ForwardOutputs before = edu_forward(state.model, state.config, ex, Vocabulary::kBos,
                                        Vocabulary::kSep);
    save_checkpoint(state, vocab, path, true);
    LoadedCheckpoint loaded = load_checkpoint(path);

    CHECK(loaded.vocab.size() == vocab.size());
    CHECK(loaded.state.global_step == state.global_step);
    ForwardOutputs after = edu_forward(loaded.state.model, loaded.state.config, ex,
                                       Vocabulary::kBos, Vocabulary::kSep);
    Real max_diff = 0.0;
    for (std::size_t i = 0; i < before.logits_d.size(); ++i)
        max_diff = std::max(max_diff,
                            std::abs(before.logits_d.at(i) - after.logits_d.at(i)));
    for (std::size_t i = 0; i < before.logits_u.size(); ++i)
        max_diff = std::max(max_diff,
                            std::abs(before.logits_u.at(i) - after.logits_u.at(i)));
    CHECK(max_diff == 0.0);

    CHECK(loaded.state.optimizer.steps_taken() == state.optimizer.steps_taken());
    const auto& slots_a = state.optimizer.slots();
    const auto& slots_b = loaded.state.optimizer.slots();
    REQUIRE(slots_a.size() == slots_b.size());
    for (const auto& [name, slot] : slots_a) {
        const auto it = slots_b.find(name);
        REQUIRE(it != slots_b.end());
        CHECK(slot.m == it->second.m);
        CHECK(slot.v == it->second.v);
    }

    // training continues identically from the restored state
    TrainState fork_a = state;
    TrainState fork_b = loaded.state;
    fork_a.rng.seed(9);
    fork_b.rng.seed(9);
    LossBreakdown la = train_step(fork_a, {ex}, {}, {});
    LossBreakdown lb = train_step(fork_b, {ex}, {}, {});
    CHECK(la.total == lb.total);
}

TEST_CASE("a single flipped payload byte is caught by the checksum") {
    std::filesystem::create_directories(kDir);
    const std::string path = kDir + "/corrupt.ckpt";
    Vocabulary vocab = small_vocab();
    TrainState state = make_state(2);
    state.config.vocab_size = vocab.size();
    state.model = init_model(state.config, 6);
    save_checkpoint(state, vocab, path, false);

    auto size = std::filesystem::file_size(path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(-64, std::ios::end);  // inside the payload
    char byte = 0;
    f.read(&byte, 1);
    f.seekp((std::streamoff)size - 64, std::ios::beg);
    byte = (char)(byte ^ 0x01);
    f.write(&byte, 1);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("truncated and padded files are rejected") {
    std::filesystem::create_directories(kDir);
    const std::string path = kDir + "/sized.ckpt";
    Vocabulary vocab = small_vocab();
    TrainState state = make_state(3);
    state.config.vocab_size = vocab.size();
    state.model = init_model(state.config, 7);
    save_checkpoint(state, vocab, path, false);

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 8);
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

    save_checkpoint(state, vocab, path, false);
    std::ofstream(path, std::ios::app | std::ios::binary) << 'x';
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

    CHECK_THROWS_AS(load_checkpoint(kDir + "/does_not_exist.ckpt"), CheckpointError);
}

TEST_CASE("enum string round trips") {
    for (Scheme s : {Scheme::ToT, Scheme::BoB, Scheme::GoG, Scheme::BGB})
        CHECK(scheme_from_string(to_string(s)) == s);
    for (Ablation a : {Ablation::None, Ablation::WithoutUL, Ablation::EncoderDecoder,
                       Ablation::EncoderOnly})
        CHECK(ablation_from_string(to_string(a)) == a);
    for (MaskKind k : {MaskKind::Causal, MaskKind::Bidirectional})
        CHECK(mask_from_string(to_string(k)) == k);
    CHECK_THROWS_AS(scheme_from_string("xox"), DataError);
}

TEST_CASE("config json round trip") {
    EDUConfig cfg;
    cfg.layers = 3;
    cfg.d_model = 32;
    cfg.heads = 4;
    cfg.dropout = 0.2;
    cfg.vocab_size = 40;
    cfg.scheme = Scheme::GoG;
    cfg.u_mask = MaskKind::Causal;
    cfg.ablation = Ablation::WithoutUL;
    EDUConfig back = config_from_json(config_to_json(cfg));
    CHECK(back.layers == cfg.layers);
    CHECK(back.d_model == cfg.d_model);
    CHECK(back.dropout == cfg.dropout);
    CHECK(back.scheme == cfg.scheme);
    CHECK(back.u_mask == cfg.u_mask);
    CHECK(back.ablation == cfg.ablation);
}
