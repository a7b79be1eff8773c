// Model stack behavior: deterministic initialization, decoder causality,
// the regularizer's mask wiring, gradient scoping between the blocks, and
// the encoder-only prefix LM.

#include <doctest.h>

#include <cmath>
#include <random>

#include "edu/edu.hpp"

using namespace edu;

namespace {

EDUConfig tiny_config(std::size_t vocab) {
    EDUConfig cfg;
    cfg.layers = 1;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.dropout = 0.0;
    cfg.vocab_size = vocab;
    cfg.max_persona = 8;
    cfg.max_query = 8;
    cfg.max_response = 8;
    return cfg;
}

TokenizedDialogue tiny_example() {
    TokenizedDialogue ex;
    ex.personas = {{4, 5}, {6}};
    ex.query = {7, 8};
    ex.response = {9, 10, 11};
    return ex;
}

bool any_nonzero(const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t.node()->grad.size() == t.size() && t.node()->grad[i] != 0.0) return true;
    return false;
}

}  // namespace

TEST_CASE("u mask follows the scheme") {
    CHECK(scheme_u_mask(Scheme::ToT) == MaskKind::Bidirectional);
    CHECK(scheme_u_mask(Scheme::BoB) == MaskKind::Bidirectional);
    CHECK(scheme_u_mask(Scheme::BGB) == MaskKind::Bidirectional);
    CHECK(scheme_u_mask(Scheme::GoG) == MaskKind::Causal);
}

TEST_CASE("initialization is deterministic and within the truncation bound") {
    EDUConfig cfg = tiny_config(16);
    EDUParams a = init_model(cfg, 42);
    EDUParams b = init_model(cfg, 42);
    auto pa = gamma_params(a), pb = gamma_params(b);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        REQUIRE(pa[i].tensor.size() == pb[i].tensor.size());
        for (std::size_t k = 0; k < pa[i].tensor.size(); ++k)
            CHECK(pa[i].tensor.at(k) == pb[i].tensor.at(k));
    }
    EDUParams c = init_model(cfg, 43);
    bool differs = false;
    auto pc = gamma_params(c);
    for (std::size_t k = 0; k < pa[0].tensor.size() && !differs; ++k)
        differs = pa[0].tensor.at(k) != pc[0].tensor.at(k);
    CHECK(differs);
    for (const auto& np : pa)
        if (np.name.find("norm") == std::string::npos)
            for (std::size_t k = 0; k < np.tensor.size(); ++k)
                CHECK(std::abs(np.tensor.at(k)) <= 0.04);
}

TEST_CASE("parameter manifests: theta excludes U, gamma includes it") {
    EDUConfig cfg = tiny_config(16);
    EDUParams m = init_model(cfg, 1);
    auto theta = theta_params(m);
    auto gamma = gamma_params(m);
    CHECK(gamma.size() == theta.size() + regularizer_params(m).size());
    for (const auto& np : theta) CHECK(np.name.rfind("reg.", 0) == std::string::npos);
    bool has_reg = false;
    for (const auto& np : gamma) has_reg |= np.name.rfind("reg.", 0) == 0;
    CHECK(has_reg);
}

TEST_CASE("decoder causality: perturbing token j leaves rows < j unchanged") {
    EDUConfig cfg = tiny_config(16);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        EDUParams m = init_model(cfg, seed);
        FormattedInput input = format_input({{4, 5}}, {6, 7}, Vocabulary::kSep);
        Tensor h = encoder_forward(m, cfg, input);
        std::vector<int> dec_input = {Vocabulary::kBos, 8, 9, 10, 11};
        Tensor base = decoder_forward(m, cfg, h, dec_input).logits_d;
        std::mt19937_64 rng(seed * 31 + 7);
        const std::size_t j = 1 + rng() % (dec_input.size() - 1);
        std::vector<int> perturbed = dec_input;
        perturbed[j] = perturbed[j] == 12 ? 13 : 12;
        Tensor other = decoder_forward(m, cfg, h, perturbed).logits_d;
        for (std::size_t i = 0; i < j; ++i)
            for (std::size_t v = 0; v < base.cols(); ++v)
                CHECK(std::abs(base.at(i, v) - other.at(i, v)) <= 1e-9);
        bool changed = false;
        for (std::size_t v = 0; v < base.cols() && !changed; ++v)
            changed = base.at(j, v) != other.at(j, v);
        CHECK(changed);
    }
}

TEST_CASE("causal u mask: last r* row cannot reach the first regularizer row") {
    EDUConfig cfg = tiny_config(16);
    EDUParams m = init_model(cfg, 3);
    cfg.u_mask = MaskKind::Causal;  // init_model resets u_mask from the scheme
    Tensor persona = persona_embedding(m, {4, 5, 6});
    std::mt19937_64 rng(5);
    std::vector<Real> r(4 * cfg.d_model);
    for (auto& x : r) x = std::uniform_real_distribution<Real>(-1, 1)(rng);
    Tensor r_star({4, cfg.d_model}, r);
    Tensor base = regularizer_forward(m, cfg, persona, r_star).logits_u;
    std::vector<Real> r2 = r;
    r2[3 * cfg.d_model + 2] += 0.5;  // perturb last row only
    Tensor other = regularizer_forward(m, cfg, persona, Tensor({4, cfg.d_model}, r2)).logits_u;
    for (std::size_t v = 0; v < base.cols(); ++v)
        CHECK(base.at(0, v) == other.at(0, v));
    // bidirectional mask lets the perturbation reach row 0
    cfg.u_mask = MaskKind::Bidirectional;
    Tensor bi_base = regularizer_forward(m, cfg, persona, r_star).logits_u;
    Tensor bi_other =
        regularizer_forward(m, cfg, persona, Tensor({4, cfg.d_model}, r2)).logits_u;
    bool changed = false;
    for (std::size_t v = 0; v < bi_base.cols() && !changed; ++v)
        changed = bi_base.at(0, v) != bi_other.at(0, v);
    CHECK(changed);
}

TEST_CASE("gradient scope: D loss skips U; U loss reaches E and D; UL skips E and D") {
    EDUConfig cfg = tiny_config(16);
    EDUParams m = init_model(cfg, 9);
    TokenizedDialogue ex = tiny_example();
    std::vector<int> target = {9, 10, 11, Vocabulary::kEos};
    TokenizedDialogue shifted = ex;  // teacher-forced input rows: BOS + response

    auto zero_all = [&] { zero_grads(gamma_params(m)); };

    SUBCASE("d-nll leaves the regularizer untouched") {
        zero_all();
        Tape tape;
        ForwardOutputs out = edu_forward(m, cfg, shifted, Vocabulary::kBos, Vocabulary::kSep);
        tape.reverse(sequence_nll(out.logits_d, target));
        for (const auto& np : regularizer_params(m)) CHECK(!any_nonzero(np.tensor));
        bool enc_touched = false;
        for (const auto& np : encoder_params(m)) enc_touched |= any_nonzero(np.tensor);
        CHECK(enc_touched);
    }
    SUBCASE("u-nll flows through nearly every E and D tensor") {
        zero_all();
        Tape tape;
        ForwardOutputs out = edu_forward(m, cfg, shifted, Vocabulary::kBos, Vocabulary::kSep);
        tape.reverse(sequence_nll(out.logits_u, target));
        std::size_t touched = 0, total = 0;
        for (const auto& np : theta_params(m)) {
            ++total;
            if (any_nonzero(np.tensor)) ++touched;
        }
        CHECK((Real)touched / (Real)total >= 0.95);
    }
    SUBCASE("unlikelihood path never reaches E or D") {
        zero_all();
        Tape tape;
        RegularizerOutputs out = nli_forward(m, cfg, {4, 5}, {Vocabulary::kBos, 9, 10});
        tape.reverse(sequence_unlikelihood(out.logits_u, {9, 10, Vocabulary::kEos}));
        for (const auto& np : encoder_params(m)) CHECK(!any_nonzero(np.tensor));
        for (const auto& np : decoder_params(m)) CHECK(!any_nonzero(np.tensor));
        bool reg_touched = false;
        for (const auto& np : regularizer_params(m)) reg_touched |= any_nonzero(np.tensor);
        CHECK(reg_touched);
    }
}

TEST_CASE("ablations drop the right outputs") {
    EDUConfig cfg = tiny_config(16);
    TokenizedDialogue ex = tiny_example();
    cfg.ablation = Ablation::EncoderDecoder;
    EDUParams m = init_model(cfg, 2);
    ForwardOutputs out = edu_forward(m, cfg, ex, Vocabulary::kBos, Vocabulary::kSep);
    CHECK(out.logits_d.defined());
    CHECK(!out.logits_u.defined());
    cfg.ablation = Ablation::None;
    out = edu_forward(m, cfg, ex, Vocabulary::kBos, Vocabulary::kSep);
    CHECK(out.logits_u.defined());
    CHECK(out.logits_u.rows() == out.logits_d.rows());
    CHECK(out.logits_d.rows() == ex.response.size() + 1);  // BOS + response rows
}

TEST_CASE("encoder prefix LM: response is causal, context cannot see it") {
    EDUConfig cfg = tiny_config(16);
    EDUParams m = init_model(cfg, 4);
    FormattedInput context = format_input({{4, 5}}, {6}, Vocabulary::kSep);
    std::vector<int> dec_input = {Vocabulary::kBos, 9, 10, 11};
    Tensor base = encoder_lm_logits(m, cfg, context, dec_input);
    CHECK(base.rows() == dec_input.size());
    // perturb response position 2: logits rows 0..1 must be unchanged
    std::vector<int> perturbed = dec_input;
    perturbed[2] = 12;
    Tensor other = encoder_lm_logits(m, cfg, context, perturbed);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t v = 0; v < base.cols(); ++v)
            CHECK(std::abs(base.at(i, v) - other.at(i, v)) <= 1e-9);
    bool changed = false;
    for (std::size_t v = 0; v < base.cols() && !changed; ++v)
        changed = base.at(2, v) != other.at(2, v);
    CHECK(changed);
    // perturbing the context changes every response row
    FormattedInput context2 = format_input({{4, 13}}, {6}, Vocabulary::kSep);
    Tensor shifted = encoder_lm_logits(m, cfg, context2, dec_input);
    changed = false;
    for (std::size_t v = 0; v < base.cols() && !changed; ++v)
        changed = base.at(0, v) != shifted.at(0, v);
    CHECK(changed);
}

TEST_CASE("clone_params copies values but not storage") {
    EDUConfig cfg = tiny_config(16);
    EDUParams m = init_model(cfg, 6);
    EDUParams copy = clone_params(m);
    auto pm = gamma_params(m);
    auto pc = gamma_params(copy);
    REQUIRE(pm.size() == pc.size());
    for (std::size_t i = 0; i < pm.size(); ++i)
        for (std::size_t k = 0; k < pm[i].tensor.size(); ++k)
            CHECK(pm[i].tensor.at(k) == pc[i].tensor.at(k));
    pm[0].tensor.at(0) += 1.0;
    CHECK(pm[0].tensor.at(0) != pc[0].tensor.at(0));
}

TEST_CASE("config validation") {
    EDUConfig cfg = tiny_config(16);
    cfg.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), TensorError);
    cfg = tiny_config(0);
    CHECK_THROWS_AS(cfg.validate(), TensorError);
}
