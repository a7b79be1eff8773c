// Training objectives and optimization: the four loss terms, their weighted
// composition, Adam with decoupled weight decay and linear learning-rate
// decay, the warm-up phase, and the interleaved dialogue/NLI train step.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "edu/data.hpp"
#include "edu/model.hpp"
#include "edu/tensor.hpp"

namespace edu {

struct LossBreakdown {
    Real l_d_nll = 0.0;
    Real l_u_nll = 0.0;
    Real l_ul_pos = 0.0;
    Real l_ul_neg = 0.0;
    Real total = 0.0;
};

// L = L_D_NLL + beta * L_U_NLL + L_UL+ + alpha * L_UL-
inline Real total_loss(const LossBreakdown& b, Real alpha, Real beta) {
    for (Real v : {b.l_d_nll, b.l_u_nll, b.l_ul_pos, b.l_ul_neg})
        if (std::isnan(v)) throw TensorError("total_loss: NaN loss component");
    return b.l_d_nll + beta * b.l_u_nll + b.l_ul_pos + alpha * b.l_ul_neg;
}

// Per-token negative log-likelihood, summed over the sequence. logits row i
// scores target[i].
inline Tensor sequence_nll(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rows() != targets.size())
        throw TensorError("sequence_nll: " + std::to_string(logits.rows()) +
                          " logit rows vs " + std::to_string(targets.size()) + " targets");
    Tensor logp = log_softmax_rows(logits);
    return scale(sum(pick_rows(logp, targets)), -1.0);
}

// Unlikelihood over one contradicted hypothesis: -sum log(1 - p(token)),
// with p clamped to [eps, 1-eps].
inline Tensor sequence_unlikelihood(const Tensor& logits, const std::vector<int>& targets,
                                    Real eps = 1e-6) {
    if (logits.rows() != targets.size())
        throw TensorError("sequence_unlikelihood: length mismatch");
    Tensor logp = pick_rows(log_softmax_rows(logits), targets);
    return sum(neg_log_one_minus_prob(logp, eps));
}

// ---- optimizer -------------------------------------------------------------

struct AdamHyper {
    Real lr = 5e-5;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    Real weight_decay = 0.01;
    std::size_t total_steps = 0;  // 0 disables linear decay
};

struct AdamSlot {
    std::vector<Real> m;
    std::vector<Real> v;
};

// Standard Adam with decoupled weight decay; lr decays linearly to 0 over
// hyper.total_steps (computed up front from epochs x batches).
class AdamOptimizer {
public:
    AdamOptimizer() = default;
    explicit AdamOptimizer(AdamHyper hyper) : hyper_(hyper) {
        if (hyper_.lr <= 0.0) throw TensorError("adam: lr must be positive");
    }

    Real current_lr() const {
        if (hyper_.total_steps == 0) return hyper_.lr;
        const Real frac = 1.0 - static_cast<Real>(std::min(step_, hyper_.total_steps)) /
                                    static_cast<Real>(hyper_.total_steps);
        return hyper_.lr * std::max(frac, 0.0);
    }

    // Applies one update to the named parameter set; params carry their own
    // grads. Slots are keyed by name so theta-only warm-up steps and full
    // gamma steps share moments.
    void step(const std::vector<NamedParam>& params) {
        const Real lr = current_lr();
        ++step_;
        const Real t = static_cast<Real>(step_);
        const Real bc1 = 1.0 - std::pow(hyper_.beta1, t);
        const Real bc2 = 1.0 - std::pow(hyper_.beta2, t);
        for (const auto& np : params) {
            auto node = np.tensor.node();
            node->ensure_grad();
            AdamSlot& slot = slots_[np.name];
            if (slot.m.size() != node->value.size()) {
                slot.m.assign(node->value.size(), 0.0);
                slot.v.assign(node->value.size(), 0.0);
            }
            for (std::size_t i = 0; i < node->value.size(); ++i) {
                const Real g = node->grad[i];
                slot.m[i] = hyper_.beta1 * slot.m[i] + (1.0 - hyper_.beta1) * g;
                slot.v[i] = hyper_.beta2 * slot.v[i] + (1.0 - hyper_.beta2) * g * g;
                const Real mhat = slot.m[i] / bc1;
                const Real vhat = slot.v[i] / bc2;
                node->value[i] -= lr * (mhat / (std::sqrt(vhat) + hyper_.eps) +
                                        hyper_.weight_decay * node->value[i]);
            }
        }
    }

    std::size_t steps_taken() const { return step_; }
    const AdamHyper& hyper() const { return hyper_; }
    AdamHyper& hyper() { return hyper_; }

    std::map<std::string, AdamSlot>& slots() { return slots_; }
    const std::map<std::string, AdamSlot>& slots() const { return slots_; }
    void set_steps_taken(std::size_t s) { step_ = s; }

private:
    AdamHyper hyper_;
    std::size_t step_ = 0;
    std::map<std::string, AdamSlot> slots_;
};

// ---- batches ----------------------------------------------------------------

struct TokenizedNli {
    std::vector<int> premise;
    std::vector<int> hypothesis;  // without BOS/EOS
};

inline TokenizedDialogue tokenize_dialogue(const DialogueExample& ex, const Vocabulary& vocab) {
    TokenizedDialogue out;
    for (const auto& p : ex.personas) out.personas.push_back(vocab.encode(p));
    out.query = vocab.encode(ex.query);
    out.response = vocab.encode(ex.response);
    return out;
}

inline TokenizedNli tokenize_nli(const InferenceExample& ex, const Vocabulary& vocab) {
    return {vocab.encode(ex.premise), vocab.encode(ex.hypothesis)};
}

namespace detail {

// Decoder input [BOS] r1..rm and targets r1..rm [EOS], both truncated to the
// model's response budget.
inline std::pair<std::vector<int>, std::vector<int>> shift_pair(const std::vector<int>& response,
                                                                std::size_t max_response) {
    std::vector<int> input{Vocabulary::kBos};
    std::vector<int> target;
    for (int t : response) {
        if (target.size() + 1 >= max_response + 1) break;
        input.push_back(t);
        target.push_back(t);
    }
    target.push_back(Vocabulary::kEos);
    return {input, target};
}

}  // namespace detail

// ---- train state & steps ------------------------------------------------------

struct TrainState {
    EDUConfig config;
    EDUParams model;
    AdamOptimizer optimizer;
    std::mt19937_64 rng{0};
    std::size_t global_step = 0;
    std::size_t epoch = 0;
};

inline void zero_grads(const std::vector<NamedParam>& params) {
    for (const auto& p : params) p.tensor.node()->grad.assign(p.tensor.size(), 0.0);
}

// One combined step: L1 over a dialogue batch (L_D_NLL + beta L_U_NLL) plus
// L2 over an NLI batch (L_UL+ + alpha L_UL-); single backward pass, one Adam
// update over gamma. NLL terms are means over batch examples of per-sequence
// token sums; UL terms likewise over their pools.
inline LossBreakdown train_step(TrainState& state,
                                const std::vector<TokenizedDialogue>& dialogue_batch,
                                const std::vector<TokenizedNli>& nli_pos_batch,
                                const std::vector<TokenizedNli>& nli_neg_batch) {
    const EDUConfig& cfg = state.config;
    // w/o UL keeps the regularizer and its NLL; it only removes the
    // unlikelihood terms. E+D and E drop the regularizer entirely.
    const bool with_u =
        cfg.ablation == Ablation::None || cfg.ablation == Ablation::WithoutUL;
    const bool with_ul = cfg.ablation == Ablation::None;

    auto params = gamma_params(state.model);
    zero_grads(params);

    Tape tape;
    ForwardCtx ctx{true, cfg.dropout, &state.rng};
    LossBreakdown breakdown;

    Tensor l_d = Tensor::scalar(0.0);
    Tensor l_u = Tensor::scalar(0.0);
    for (const auto& ex : dialogue_batch) {
        auto [dec_input, target] = detail::shift_pair(ex.response, cfg.max_response);
        TokenizedDialogue shifted = ex;
        shifted.response = std::vector<int>(dec_input.begin() + 1, dec_input.end());
        ForwardOutputs out = edu_forward(state.model, cfg, shifted, Vocabulary::kBos,
                                         Vocabulary::kSep, ctx);
        l_d = add(l_d, sequence_nll(out.logits_d, target));
        if (with_u) l_u = add(l_u, sequence_nll(out.logits_u, target));
    }
    if (!dialogue_batch.empty()) {
        l_d = scale(l_d, 1.0 / static_cast<Real>(dialogue_batch.size()));
        if (with_u) l_u = scale(l_u, 1.0 / static_cast<Real>(dialogue_batch.size()));
    }

    Tensor l_pos = Tensor::scalar(0.0);
    Tensor l_neg = Tensor::scalar(0.0);
    if (with_ul) {
        for (const auto& ex : nli_pos_batch) {
            auto [input, target] = detail::shift_pair(ex.hypothesis, cfg.max_response);
            RegularizerOutputs out = nli_forward(state.model, cfg, ex.premise, input, ctx);
            l_pos = add(l_pos, sequence_nll(out.logits_u, target));
        }
        if (!nli_pos_batch.empty())
            l_pos = scale(l_pos, 1.0 / static_cast<Real>(nli_pos_batch.size()));
        for (const auto& ex : nli_neg_batch) {
            auto [input, target] = detail::shift_pair(ex.hypothesis, cfg.max_response);
            RegularizerOutputs out = nli_forward(state.model, cfg, ex.premise, input, ctx);
            l_neg = add(l_neg, sequence_unlikelihood(out.logits_u, target));
        }
        if (!nli_neg_batch.empty())
            l_neg = scale(l_neg, 1.0 / static_cast<Real>(nli_neg_batch.size()));
    }

    Tensor total = add(add(l_d, scale(l_u, cfg.beta)), add(l_pos, scale(l_neg, cfg.alpha)));

    breakdown.l_d_nll = l_d.item();
    breakdown.l_u_nll = l_u.item();
    breakdown.l_ul_pos = l_pos.item();
    breakdown.l_ul_neg = l_neg.item();
    breakdown.total = total.item();
    if (std::isnan(breakdown.total))
        throw TensorError("train_step: NaN loss, aborting step " +
                          std::to_string(state.global_step));

    tape.reverse(total);
    state.optimizer.step(params);
    ++state.global_step;
    return breakdown;
}

// Warm-up step: L_D_NLL only, updating theta only; U parameters are not
// touched (no gradient and no weight decay).
inline LossBreakdown warmup_step(TrainState& state,
                                 const std::vector<TokenizedDialogue>& dialogue_batch) {
    const EDUConfig& cfg = state.config;
    auto params = theta_params(state.model);
    zero_grads(params);

    Tape tape;
    ForwardCtx ctx{true, cfg.dropout, &state.rng};
    Tensor l_d = Tensor::scalar(0.0);
    for (const auto& ex : dialogue_batch) {
        auto [dec_input, target] = detail::shift_pair(ex.response, cfg.max_response);
        InputLimits limits{cfg.max_persona, cfg.max_query};
        FormattedInput input = format_input(ex.personas, ex.query, Vocabulary::kSep, limits);
        Tensor h = encoder_forward(state.model, cfg, input, ctx);
        DecoderOutputs dec = decoder_forward(state.model, cfg, h, dec_input, ctx);
        l_d = add(l_d, sequence_nll(dec.logits_d, target));
    }
    if (!dialogue_batch.empty())
        l_d = scale(l_d, 1.0 / static_cast<Real>(dialogue_batch.size()));

    LossBreakdown breakdown;
    breakdown.l_d_nll = l_d.item();
    breakdown.total = breakdown.l_d_nll;
    if (std::isnan(breakdown.total)) throw TensorError("warmup_step: NaN loss");
    tape.reverse(l_d);
    state.optimizer.step(params);
    ++state.global_step;
    return breakdown;
}

// Training step for the encoder-only (E) ablation: the encoder block as a
// prefix language model over [context, response], NLL only. Embeddings and
// encoder parameters update; both decoders stay untouched.
inline LossBreakdown encoder_lm_step(TrainState& state,
                                     const std::vector<TokenizedDialogue>& dialogue_batch) {
    const EDUConfig& cfg = state.config;
    std::vector<NamedParam> params = embedding_params(state.model);
    for (auto& p : encoder_params(state.model)) params.push_back(p);
    zero_grads(params);

    Tape tape;
    ForwardCtx ctx{true, cfg.dropout, &state.rng};
    Tensor loss = Tensor::scalar(0.0);
    for (const auto& ex : dialogue_batch) {
        auto [dec_input, target] = detail::shift_pair(ex.response, cfg.max_response);
        InputLimits limits{cfg.max_persona, cfg.max_query};
        FormattedInput input = format_input(ex.personas, ex.query, Vocabulary::kSep, limits);
        Tensor logits = encoder_lm_logits(state.model, cfg, input, dec_input, ctx);
        loss = add(loss, sequence_nll(logits, target));
    }
    if (!dialogue_batch.empty())
        loss = scale(loss, 1.0 / static_cast<Real>(dialogue_batch.size()));

    LossBreakdown breakdown;
    breakdown.l_d_nll = loss.item();
    breakdown.total = breakdown.l_d_nll;
    if (std::isnan(breakdown.total)) throw TensorError("encoder_lm_step: NaN loss");
    tape.reverse(loss);
    state.optimizer.step(params);
    ++state.global_step;
    return breakdown;
}

// One structured-text log line per step.
inline std::string format_log_line(std::size_t step, std::size_t epoch,
                                   const LossBreakdown& b, Real lr) {
    std::ostringstream os;
    os << "step=" << step << " epoch=" << epoch;
    os << std::setprecision(17);
    os << " l_d_nll=" << b.l_d_nll << " l_u_nll=" << b.l_u_nll << " l_ul_pos=" << b.l_ul_pos
       << " l_ul_neg=" << b.l_ul_neg << " total=" << b.total << " lr=" << lr;
    return os.str();
}

}  // namespace edu
