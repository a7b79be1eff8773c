// Decoding (greedy, beam, re-rank) and the automatic metric suite:
// perplexity, Distinct-1/2, C.Score with a pluggable referee, and delta
// perplexity over entailed vs contradicted tuples.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "edu/data.hpp"
#include "edu/model.hpp"
#include "edu/objectives.hpp"

namespace edu {

struct MetricsReport {
    Real ppl = 0.0;
    Real dist1 = 0.0;
    Real dist2 = 0.0;
    Real d_avg = 0.0;
    Real p_ent = 0.0;
    Real p_ctd = 0.0;
    Real delta_p = 0.0;
    Real c_score = 0.0;

    nlohmann::json to_json() const {
        return {{"ppl", ppl},         {"dist1", dist1},   {"dist2", dist2},
                {"d_avg", d_avg},     {"p_ent", p_ent},   {"p_ctd", p_ctd},
                {"delta_p", delta_p}, {"c_score", c_score}};
    }

    std::string to_table() const {
        std::ostringstream os;
        auto row = [&os](const char* name, Real v) {
            os << name;
            for (std::size_t i = std::string(name).size(); i < 10; ++i) os << ' ';
            os << v << "\n";
        };
        row("ppl", ppl);
        row("dist1", dist1);
        row("dist2", dist2);
        row("d_avg", d_avg);
        row("p_ent", p_ent);
        row("p_ctd", p_ctd);
        row("delta_p", delta_p);
        row("c_score", c_score);
        return os.str();
    }
};

// Per-token log-probabilities of the response of a {persona, query,
// response} tuple under some model path.
using TokenScorer = std::function<std::vector<Real>(const DialogueExample&)>;

// Referee judgment: (response, one persona text) -> {-1, 0, +1}.
using RefereeFn = std::function<int(const std::string&, const std::string&)>;

// ---- metrics ----------------------------------------------------------------

// PPL(R) = exp(-(1/|R|) sum log p(r_i | ...)); arithmetic mean of per-response
// perplexities. corpus_level instead exponentiates the corpus-mean NLL.
inline Real perplexity(const TokenScorer& scorer, const std::vector<DialogueExample>& testset,
                       bool corpus_level = false) {
    if (testset.empty()) throw DataError("perplexity: empty testset");
    Real acc = 0.0;
    Real total_tokens = 0.0, total_nll = 0.0;
    for (const auto& ex : testset) {
        const std::vector<Real> logp = scorer(ex);
        if (logp.empty()) throw DataError("perplexity: empty response scored");
        Real nll = 0.0;
        for (Real lp : logp) nll -= lp;
        acc += std::exp(nll / static_cast<Real>(logp.size()));
        total_nll += nll;
        total_tokens += static_cast<Real>(logp.size());
    }
    if (corpus_level) return std::exp(total_nll / total_tokens);
    return acc / static_cast<Real>(testset.size());
}

// Corpus-level distinct-n: distinct n-grams / total n-grams over all
// responses. Responses shorter than n contribute nothing.
inline Real distinct_n(const std::vector<std::string>& responses, std::size_t n) {
    if (n < 1 || n > 2) throw DataError("distinct_n: n must be 1 or 2");
    std::set<std::vector<std::string>> distinct;
    std::size_t total = 0;
    for (const auto& r : responses) {
        const auto toks = tokenize(r);
        if (toks.size() < n) continue;
        for (std::size_t i = 0; i + n <= toks.size(); ++i) {
            distinct.insert(std::vector<std::string>(toks.begin() + i, toks.begin() + i + n));
            ++total;
        }
    }
    if (total == 0) return 0.0;
    return static_cast<Real>(distinct.size()) / static_cast<Real>(total);
}

struct DeltaPReport {
    Real p_ent = 0.0;
    Real p_ctd = 0.0;
    Real delta_p = 0.0;
};

// delta P = PPL(contradicted tuples) - PPL(entailed tuples).
inline DeltaPReport delta_p(const TokenScorer& scorer,
                            const std::vector<DialogueExample>& entailed,
                            const std::vector<DialogueExample>& contradicted) {
    if (entailed.empty() || contradicted.empty())
        throw DataError("delta_p: both label sets must be nonempty");
    DeltaPReport r;
    r.p_ent = perplexity(scorer, entailed);
    r.p_ctd = perplexity(scorer, contradicted);
    r.delta_p = r.p_ctd - r.p_ent;
    return r;
}

// Mean over responses of sum_i NLI(response, persona_i).
inline Real c_score(const RefereeFn& referee, const std::vector<std::string>& responses,
                    const std::vector<std::vector<std::string>>& personas) {
    if (responses.size() != personas.size())
        throw DataError("c_score: responses/personas length mismatch");
    if (responses.empty()) throw DataError("c_score: empty input");
    Real acc = 0.0;
    for (std::size_t i = 0; i < responses.size(); ++i) {
        int s = 0;
        for (const auto& p : personas[i]) s += referee(responses[i], p);
        acc += static_cast<Real>(s);
    }
    return acc / static_cast<Real>(responses.size());
}

// ---- model scorers ------------------------------------------------------------

namespace detail {

inline std::vector<Real> row_log_probs(const Tensor& logits, const std::vector<int>& targets) {
    Tensor logp = log_softmax_rows(logits);
    std::vector<Real> out(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i)
        out[i] = logp.at(i, static_cast<std::size_t>(targets[i]));
    return out;
}

}  // namespace detail

// Log-probs of the response tokens from the decoder path (proper
// auto-regressive scoring). Dropout is off.
inline TokenScorer make_d_scorer(const EDUParams& model, const EDUConfig& cfg,
                                 const Vocabulary& vocab) {
    return [&model, cfg, &vocab](const DialogueExample& ex) {
        TokenizedDialogue tok = tokenize_dialogue(ex, vocab);
        std::vector<int> targets = tok.response;
        if (targets.size() > cfg.max_response) targets.resize(cfg.max_response);
        tok.response = targets;
        ForwardOutputs out = edu_forward(model, cfg, tok, Vocabulary::kBos, Vocabulary::kSep);
        return detail::row_log_probs(out.logits_d, targets);
    };
}

// Log-probs from the regularizer path (the final response representation
// R2). Under a bidirectional u_mask this is the auto-encoding reading.
inline TokenScorer make_u_scorer(const EDUParams& model, const EDUConfig& cfg,
                                 const Vocabulary& vocab) {
    return [&model, cfg, &vocab](const DialogueExample& ex) {
        TokenizedDialogue tok = tokenize_dialogue(ex, vocab);
        std::vector<int> targets = tok.response;
        if (targets.size() > cfg.max_response) targets.resize(cfg.max_response);
        tok.response = targets;
        ForwardOutputs out = edu_forward(model, cfg, tok, Vocabulary::kBos, Vocabulary::kSep);
        return detail::row_log_probs(out.logits_u, targets);
    };
}

// Encoder-only prefix-LM scorer for the E ablation.
inline TokenScorer make_e_scorer(const EDUParams& model, const EDUConfig& cfg,
                                 const Vocabulary& vocab) {
    return [&model, cfg, &vocab](const DialogueExample& ex) {
        TokenizedDialogue tok = tokenize_dialogue(ex, vocab);
        std::vector<int> targets = tok.response;
        if (targets.empty()) throw DataError("encoder-lm scorer: empty response");
        if (targets.size() > cfg.max_response) targets.resize(cfg.max_response);
        std::vector<int> dec_input{Vocabulary::kBos};
        dec_input.insert(dec_input.end(), targets.begin(), targets.end() - 1);
        InputLimits limits{cfg.max_persona, cfg.max_query};
        FormattedInput input = format_input(tok.personas, tok.query, Vocabulary::kSep, limits);
        Tensor logits = encoder_lm_logits(model, cfg, input, dec_input);
        return detail::row_log_probs(logits, targets);
    };
}

// The scorer matching a config's ablation: final-path probabilities come
// from U when the regularizer exists, from D under E+D, from the encoder LM
// under E.
inline TokenScorer make_model_scorer(const EDUParams& model, const EDUConfig& cfg,
                                     const Vocabulary& vocab) {
    switch (cfg.ablation) {
        case Ablation::EncoderOnly: return make_e_scorer(model, cfg, vocab);
        case Ablation::EncoderDecoder: return make_d_scorer(model, cfg, vocab);
        default: return make_u_scorer(model, cfg, vocab);
    }
}

// ---- decoding -------------------------------------------------------------------

enum class GenerationSource { D, U };

struct GenerationResult {
    std::vector<int> tokens;          // without BOS/EOS
    std::vector<Real> log_probs;      // per emitted token
    GenerationSource source = GenerationSource::D;
    Real score = 0.0;                 // length-normalized log-likelihood
};

struct DecodeOutputs {
    GenerationResult d_stage;
    GenerationResult u_stage;  // empty tokens under E+D / E ablations
};

// Greedy decode: D emits token-by-token until [EOS] or max_len; U then runs
// one pass over (P, R1) under its mask and tokens are re-read position-wise
// from logits_U.
inline DecodeOutputs greedy_decode(const EDUParams& model, const EDUConfig& cfg,
                                   const std::vector<std::vector<int>>& personas,
                                   const std::vector<int>& query, std::size_t max_len = 32) {
    InputLimits limits{cfg.max_persona, cfg.max_query};
    FormattedInput input = format_input(personas, query, Vocabulary::kSep, limits);
    Tensor h = encoder_forward(model, cfg, input);

    DecodeOutputs out;
    max_len = std::min(max_len, cfg.max_response);
    std::vector<int> dec_input{Vocabulary::kBos};
    Tensor r1;
    for (std::size_t step = 0; step < max_len; ++step) {
        DecoderOutputs dec = decoder_forward(model, cfg, h, dec_input);
        r1 = dec.r1;
        Tensor logp = log_softmax_rows(dec.logits_d);
        const std::size_t last = dec.logits_d.rows() - 1;
        // PAD and BOS are never emitted; lowest id wins ties, matching beam.
        int best = Vocabulary::kEos;
        for (std::size_t v = Vocabulary::kEos; v < dec.logits_d.cols(); ++v)
            if (logp.at(last, v) > logp.at(last, static_cast<std::size_t>(best)))
                best = static_cast<int>(v);
        out.d_stage.log_probs.push_back(logp.at(last, static_cast<std::size_t>(best)));
        if (best == Vocabulary::kEos) break;
        out.d_stage.tokens.push_back(best);
        dec_input.push_back(best);
    }
    out.d_stage.source = GenerationSource::D;

    if (cfg.ablation == Ablation::EncoderDecoder || cfg.ablation == Ablation::EncoderOnly)
        return out;

    std::vector<int> persona_tokens;
    for (const auto& p : personas)
        for (int t : p) {
            if (persona_tokens.size() >= cfg.max_persona) break;
            persona_tokens.push_back(t);
        }
    if (persona_tokens.empty()) persona_tokens.push_back(Vocabulary::kSep);
    Tensor p_emb = persona_embedding(model, persona_tokens);
    if (!r1.defined()) {  // max_len == 0
        return out;
    }
    RegularizerOutputs reg = regularizer_forward(model, cfg, p_emb, r1, {});
    Tensor logp = log_softmax_rows(reg.logits_u);
    out.u_stage.source = GenerationSource::U;
    for (std::size_t i = 0; i < logp.rows(); ++i) {
        int best = Vocabulary::kEos;
        for (std::size_t v = Vocabulary::kEos; v < logp.cols(); ++v)
            if (logp.at(i, v) > logp.at(i, static_cast<std::size_t>(best)))
                best = static_cast<int>(v);
        out.u_stage.log_probs.push_back(logp.at(i, static_cast<std::size_t>(best)));
        if (best == Vocabulary::kEos) break;
        out.u_stage.tokens.push_back(best);
    }
    return out;
}

// Candidate scorer for re-ranking: maps a finished generation to a sortable
// score (higher is better).
using CandidateScorer = std::function<Real(const GenerationResult&)>;

// Length-normalized beam search over D; the top candidates are re-scored by
// the supplied scorer with a stable sort. Ties inside the beam break by
// token-id lexicographic order.
inline std::vector<GenerationResult> beam_rerank(const EDUParams& model, const EDUConfig& cfg,
                                                 const std::vector<std::vector<int>>& personas,
                                                 const std::vector<int>& query,
                                                 std::size_t beam, std::size_t top,
                                                 const CandidateScorer& scorer = {},
                                                 std::size_t max_len = 32) {
    if (beam < top) throw TensorError("beam_rerank: beam must be >= top");
    if (beam == 0) throw TensorError("beam_rerank: beam must be >= 1");
    InputLimits limits{cfg.max_persona, cfg.max_query};
    FormattedInput input = format_input(personas, query, Vocabulary::kSep, limits);
    Tensor h = encoder_forward(model, cfg, input);
    max_len = std::min(max_len, cfg.max_response);

    struct Hyp {
        std::vector<int> tokens;  // emitted tokens, no BOS/EOS
        std::vector<Real> log_probs;
        Real sum_logp = 0.0;
        bool done = false;
        Real norm() const {
            const std::size_t n = std::max<std::size_t>(log_probs.size(), 1);
            return sum_logp / static_cast<Real>(n);
        }
    };
    auto better = [](const Hyp& a, const Hyp& b) {
        if (a.norm() != b.norm()) return a.norm() > b.norm();
        return a.tokens < b.tokens;
    };

    std::vector<Hyp> live{Hyp{}};
    std::vector<Hyp> finished;
    for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<Hyp> expanded;
        for (const auto& hyp : live) {
            std::vector<int> dec_input{Vocabulary::kBos};
            dec_input.insert(dec_input.end(), hyp.tokens.begin(), hyp.tokens.end());
            DecoderOutputs dec = decoder_forward(model, cfg, h, dec_input);
            Tensor logp = log_softmax_rows(dec.logits_d);
            const std::size_t last = dec.logits_d.rows() - 1;
            for (std::size_t v = 0; v < logp.cols(); ++v) {
                if (v == Vocabulary::kPad || v == Vocabulary::kBos) continue;
                Hyp next = hyp;
                next.log_probs.push_back(logp.at(last, v));
                next.sum_logp += logp.at(last, v);
                if (static_cast<int>(v) == Vocabulary::kEos) next.done = true;
                else next.tokens.push_back(static_cast<int>(v));
                expanded.push_back(std::move(next));
            }
        }
        std::sort(expanded.begin(), expanded.end(), better);
        if (expanded.size() > beam) expanded.resize(beam);
        live.clear();
        for (auto& hyp : expanded) {
            if (hyp.done) finished.push_back(std::move(hyp));
            else live.push_back(std::move(hyp));
        }
    }
    for (auto& hyp : live) finished.push_back(std::move(hyp));  // hit max_len
    std::sort(finished.begin(), finished.end(), better);
    if (finished.size() > top) finished.resize(top);

    std::vector<GenerationResult> results;
    for (const auto& hyp : finished) {
        GenerationResult g;
        g.tokens = hyp.tokens;
        g.log_probs = hyp.log_probs;
        g.source = GenerationSource::D;
        g.score = hyp.norm();
        results.push_back(std::move(g));
    }
    if (scorer) {
        for (auto& g : results) g.score = scorer(g);
        std::stable_sort(results.begin(), results.end(),
                         [](const GenerationResult& a, const GenerationResult& b) {
                             return a.score > b.score;
                         });
    }
    return results;
}

}  // namespace edu
