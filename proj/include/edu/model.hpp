// The three-block stack: encoder E, auto-regressive response decoder D, and
// the consistency-understanding regularizer U, plus initialization schemes.
//
// Post-norm wiring: every attention and FFN sub-layer is wrapped in
// residual + layer norm. Output head is tied to the token embedding table.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "edu/blocks.hpp"
#include "edu/tensor.hpp"

namespace edu {

enum class Scheme { ToT, BoB, GoG, BGB };
enum class Ablation { None, WithoutUL, EncoderDecoder, EncoderOnly };

inline MaskKind scheme_u_mask(Scheme s) {
    return s == Scheme::GoG ? MaskKind::Causal : MaskKind::Bidirectional;
}

struct EDUConfig {
    std::size_t layers = 2;        // N, per block
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t d_ff = 128;
    Real dropout = 0.1;
    std::size_t vocab_size = 0;    // set from the vocabulary
    std::size_t max_persona = 64;
    std::size_t max_query = 64;
    std::size_t max_response = 32;
    Real alpha = 1e-2;             // UL negative weight
    Real beta = 0.8;               // U-NLL weight
    MaskKind u_mask = MaskKind::Bidirectional;
    Scheme scheme = Scheme::ToT;
    Ablation ablation = Ablation::None;

    std::size_t max_len() const { return max_persona + max_query + max_response + 4; }

    void validate() const {
        if (d_model == 0 || heads == 0 || d_model % heads != 0)
            throw TensorError("config: d_model must be a positive multiple of heads");
        if (beta <= 0.0 || beta > 1.0) throw TensorError("config: beta must be in (0, 1]");
        if (alpha < 0.0) throw TensorError("config: alpha must be >= 0");
        if (vocab_size == 0) throw TensorError("config: vocab_size not set");
    }
};

struct EncoderLayer {
    AttnParams self_attn;
    NormParams norm_attn;
    FfnParams ff;
    NormParams norm_ff;
};

struct DecoderLayer {
    AttnParams self_attn;
    NormParams norm_self;
    AttnParams cross_attn;
    NormParams norm_cross;
    FfnParams ff;
    NormParams norm_ff;
};

// One regularizer layer runs attention twice: first over the persona
// representation, then over r*.
struct RegularizerLayer {
    AttnParams persona_attn;
    NormParams norm_p_attn;
    FfnParams ff_p;
    NormParams norm_p_ff;
    AttnParams rstar_attn;
    NormParams norm_r_attn;
    FfnParams ff_r;
    NormParams norm_r_ff;
};

struct EDUParams {
    EmbeddingTables embeddings;
    std::vector<EncoderLayer> encoder;
    std::vector<DecoderLayer> decoder;
    std::vector<RegularizerLayer> regularizer;
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline void list_attn(std::vector<NamedParam>& out, const std::string& p, const AttnParams& a) {
    out.push_back({p + ".wq", a.wq});
    out.push_back({p + ".wk", a.wk});
    out.push_back({p + ".wv", a.wv});
    out.push_back({p + ".wo", a.wo});
}
inline void list_ffn(std::vector<NamedParam>& out, const std::string& p, const FfnParams& f) {
    out.push_back({p + ".w1", f.w1});
    out.push_back({p + ".b1", f.b1});
    out.push_back({p + ".w2", f.w2});
    out.push_back({p + ".b2", f.b2});
}
inline void list_norm(std::vector<NamedParam>& out, const std::string& p, const NormParams& n) {
    out.push_back({p + ".gain", n.gain});
    out.push_back({p + ".bias", n.bias});
}

}  // namespace detail

// Manifest order: embeddings, encoder layers, decoder layers, regularizer
// layers. The output head is tied to the token table, so it never appears.
inline std::vector<NamedParam> embedding_params(const EDUParams& m) {
    return {{"emb.token", m.embeddings.token},
            {"emb.type", m.embeddings.type},
            {"emb.position", m.embeddings.position}};
}

inline std::vector<NamedParam> encoder_params(const EDUParams& m) {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < m.encoder.size(); ++i) {
        const std::string p = "enc." + std::to_string(i);
        detail::list_attn(out, p + ".self", m.encoder[i].self_attn);
        detail::list_norm(out, p + ".norm_attn", m.encoder[i].norm_attn);
        detail::list_ffn(out, p + ".ff", m.encoder[i].ff);
        detail::list_norm(out, p + ".norm_ff", m.encoder[i].norm_ff);
    }
    return out;
}

inline std::vector<NamedParam> decoder_params(const EDUParams& m) {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < m.decoder.size(); ++i) {
        const std::string p = "dec." + std::to_string(i);
        detail::list_attn(out, p + ".self", m.decoder[i].self_attn);
        detail::list_norm(out, p + ".norm_self", m.decoder[i].norm_self);
        detail::list_attn(out, p + ".cross", m.decoder[i].cross_attn);
        detail::list_norm(out, p + ".norm_cross", m.decoder[i].norm_cross);
        detail::list_ffn(out, p + ".ff", m.decoder[i].ff);
        detail::list_norm(out, p + ".norm_ff", m.decoder[i].norm_ff);
    }
    return out;
}

inline std::vector<NamedParam> regularizer_params(const EDUParams& m) {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < m.regularizer.size(); ++i) {
        const std::string p = "reg." + std::to_string(i);
        detail::list_attn(out, p + ".persona", m.regularizer[i].persona_attn);
        detail::list_norm(out, p + ".norm_p_attn", m.regularizer[i].norm_p_attn);
        detail::list_ffn(out, p + ".ff_p", m.regularizer[i].ff_p);
        detail::list_norm(out, p + ".norm_p_ff", m.regularizer[i].norm_p_ff);
        detail::list_attn(out, p + ".rstar", m.regularizer[i].rstar_attn);
        detail::list_norm(out, p + ".norm_r_attn", m.regularizer[i].norm_r_attn);
        detail::list_ffn(out, p + ".ff_r", m.regularizer[i].ff_r);
        detail::list_norm(out, p + ".norm_r_ff", m.regularizer[i].norm_r_ff);
    }
    return out;
}

// theta = embeddings + E + D; gamma = theta + U.
inline std::vector<NamedParam> theta_params(const EDUParams& m) {
    std::vector<NamedParam> out = embedding_params(m);
    for (auto& p : encoder_params(m)) out.push_back(p);
    for (auto& p : decoder_params(m)) out.push_back(p);
    return out;
}

inline std::vector<NamedParam> gamma_params(const EDUParams& m) {
    std::vector<NamedParam> out = theta_params(m);
    for (auto& p : regularizer_params(m)) out.push_back(p);
    return out;
}

// Deep copy of all parameter tensors (fresh nodes, no grads).
inline EDUParams clone_params(const EDUParams& src) {
    EDUParams dst = src;  // copies the structural layout and shared handles
    auto deep = [](Tensor& t) { t = Tensor(t.shape(), t.data(), true); };
    auto deep_attn = [&](AttnParams& a) { deep(a.wq); deep(a.wk); deep(a.wv); deep(a.wo); };
    auto deep_ffn = [&](FfnParams& f) { deep(f.w1); deep(f.b1); deep(f.w2); deep(f.b2); };
    auto deep_norm = [&](NormParams& n) { deep(n.gain); deep(n.bias); };
    deep(dst.embeddings.token);
    deep(dst.embeddings.type);
    deep(dst.embeddings.position);
    for (auto& l : dst.encoder) {
        deep_attn(l.self_attn); deep_norm(l.norm_attn);
        deep_ffn(l.ff); deep_norm(l.norm_ff);
    }
    for (auto& l : dst.decoder) {
        deep_attn(l.self_attn); deep_norm(l.norm_self);
        deep_attn(l.cross_attn); deep_norm(l.norm_cross);
        deep_ffn(l.ff); deep_norm(l.norm_ff);
    }
    for (auto& l : dst.regularizer) {
        deep_attn(l.persona_attn); deep_norm(l.norm_p_attn);
        deep_ffn(l.ff_p); deep_norm(l.norm_p_ff);
        deep_attn(l.rstar_attn); deep_norm(l.norm_r_attn);
        deep_ffn(l.ff_r); deep_norm(l.norm_r_ff);
    }
    return dst;
}

// ---- initialization ------------------------------------------------------

namespace detail {

inline Tensor init_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, Real sigma) {
    std::vector<Real> data(r * c);
    for (auto& v : data) v = truncated_normal(rng, sigma);
    return Tensor({r, c}, std::move(data), true);
}
inline Tensor init_vector(std::size_t n, Real fill) {
    return Tensor({n}, std::vector<Real>(n, fill), true);
}
inline AttnParams init_attn(std::size_t d, std::mt19937_64& rng, Real sigma) {
    return {init_matrix(d, d, rng, sigma), init_matrix(d, d, rng, sigma),
            init_matrix(d, d, rng, sigma), init_matrix(d, d, rng, sigma)};
}
inline FfnParams init_ffn(std::size_t d, std::size_t d_ff, std::mt19937_64& rng, Real sigma) {
    return {init_matrix(d, d_ff, rng, sigma), init_vector(d_ff, 0.0),
            init_matrix(d_ff, d, rng, sigma), init_vector(d, 0.0)};
}
inline NormParams init_norm(std::size_t d) {
    return {init_vector(d, 1.0), init_vector(d, 0.0)};
}

}  // namespace detail

// All blocks randomly initialized (truncated normal, sigma 0.02); the scheme
// only selects U's mask kind. Cross-attention is always freshly initialized.
inline EDUParams init_model(EDUConfig& cfg, std::uint64_t seed) {
    cfg.u_mask = scheme_u_mask(cfg.scheme);
    cfg.validate();
    const Real sigma = 0.02;
    std::mt19937_64 rng(seed);
    EDUParams m;
    m.embeddings.token = detail::init_matrix(cfg.vocab_size, cfg.d_model, rng, sigma);
    m.embeddings.type = detail::init_matrix(2, cfg.d_model, rng, sigma);
    m.embeddings.position = detail::init_matrix(cfg.max_len(), cfg.d_model, rng, sigma);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        EncoderLayer l;
        l.self_attn = detail::init_attn(cfg.d_model, rng, sigma);
        l.norm_attn = detail::init_norm(cfg.d_model);
        l.ff = detail::init_ffn(cfg.d_model, cfg.d_ff, rng, sigma);
        l.norm_ff = detail::init_norm(cfg.d_model);
        m.encoder.push_back(std::move(l));
    }
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        DecoderLayer l;
        l.self_attn = detail::init_attn(cfg.d_model, rng, sigma);
        l.norm_self = detail::init_norm(cfg.d_model);
        l.cross_attn = detail::init_attn(cfg.d_model, rng, sigma);
        l.norm_cross = detail::init_norm(cfg.d_model);
        l.ff = detail::init_ffn(cfg.d_model, cfg.d_ff, rng, sigma);
        l.norm_ff = detail::init_norm(cfg.d_model);
        m.decoder.push_back(std::move(l));
    }
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        RegularizerLayer l;
        l.persona_attn = detail::init_attn(cfg.d_model, rng, sigma);
        l.norm_p_attn = detail::init_norm(cfg.d_model);
        l.ff_p = detail::init_ffn(cfg.d_model, cfg.d_ff, rng, sigma);
        l.norm_p_ff = detail::init_norm(cfg.d_model);
        l.rstar_attn = detail::init_attn(cfg.d_model, rng, sigma);
        l.norm_r_attn = detail::init_norm(cfg.d_model);
        l.ff_r = detail::init_ffn(cfg.d_model, cfg.d_ff, rng, sigma);
        l.norm_r_ff = detail::init_norm(cfg.d_model);
        m.regularizer.push_back(std::move(l));
    }
    return m;
}

// ---- forward passes ------------------------------------------------------

// Per-call forward context: dropout state. Default is evaluation (identity
// dropout), which keeps inference deterministic.
struct ForwardCtx {
    bool training = false;
    Real dropout_rate = 0.0;
    std::mt19937_64* rng = nullptr;

    Tensor drop(const Tensor& x) const {
        if (!training || dropout_rate <= 0.0 || rng == nullptr) return x;
        return dropout(x, dropout_rate, *rng, true);
    }
};

namespace detail {

inline Tensor sublayer(const Tensor& x, const Tensor& out, const NormParams& norm,
                       const ForwardCtx& ctx) {
    return layer_norm(add(x, ctx.drop(out)), norm);
}

}  // namespace detail

// E: N bidirectional self-attention layers over the formatted embeddings.
inline Tensor encoder_forward(const EDUParams& m, const EDUConfig& cfg,
                              const FormattedInput& input, const ForwardCtx& ctx = {}) {
    if (input.tokens.size() > cfg.max_len())
        throw TensorError("encoder input length " + std::to_string(input.tokens.size()) +
                          " exceeds model max " + std::to_string(cfg.max_len()));
    Tensor h = ctx.drop(embed(input.tokens, input.types, m.embeddings));
    AttentionMask mask = build_mask(MaskKind::Bidirectional, input.tokens.size(),
                                    input.tokens.size());
    for (const auto& layer : m.encoder) {
        h = detail::sublayer(h, multi_head(h, h, mask, layer.self_attn, cfg.heads),
                             layer.norm_attn, ctx);
        h = detail::sublayer(h, ffn(h, layer.ff), layer.norm_ff, ctx);
    }
    return h;
}

// Logits through the tied output head: states x token-table^T.
inline Tensor output_logits(const EDUParams& m, const Tensor& states) {
    return matmul_nt(states, m.embeddings.token);
}

struct DecoderOutputs {
    Tensor r1;        // m x d_model
    Tensor logits_d;  // m x V
};

// D: teacher-forced causal decoder over H. decoder_input is [BOS] r_1 ...
// (one row per logits row); logits row i predicts the target at position i.
inline DecoderOutputs decoder_forward(const EDUParams& m, const EDUConfig& cfg, const Tensor& h,
                                      const std::vector<int>& decoder_input,
                                      const ForwardCtx& ctx = {}) {
    if (!h.defined()) throw TensorError("decoder_forward: missing encoder states H");
    if (decoder_input.empty()) throw TensorError("decoder_forward: empty decoder input");
    if (decoder_input.size() > cfg.max_response + 1)
        throw TensorError("decoder input exceeds max response length");
    const std::size_t len = decoder_input.size();
    std::vector<int> types(len, 1);
    Tensor x = ctx.drop(embed(decoder_input, types, m.embeddings));
    AttentionMask causal = build_mask(MaskKind::Causal, len, len);
    AttentionMask cross = build_mask(MaskKind::Bidirectional, len, h.rows());
    for (const auto& layer : m.decoder) {
        x = detail::sublayer(x, multi_head(x, x, causal, layer.self_attn, cfg.heads),
                             layer.norm_self, ctx);
        x = detail::sublayer(x, multi_head(x, h, cross, layer.cross_attn, cfg.heads),
                             layer.norm_cross, ctx);
        x = detail::sublayer(x, ffn(x, layer.ff), layer.norm_ff, ctx);
    }
    return {x, output_logits(m, x)};
}

struct RegularizerOutputs {
    Tensor r2;        // m x d_model
    Tensor logits_u;  // m x V
};

// U: per layer, attention over the persona representation P then attention
// over r*, each followed by an FFN. h2^1 := r*. The configured u_mask
// governs the r* attention; persona attention is always bidirectional.
inline RegularizerOutputs regularizer_forward(const EDUParams& m, const EDUConfig& cfg,
                                              const Tensor& persona, const Tensor& r_star,
                                              const ForwardCtx& ctx = {}) {
    if (!persona.defined() || !r_star.defined())
        throw TensorError("regularizer_forward: missing persona or r* input");
    const std::size_t len = r_star.rows();
    AttentionMask p_mask = build_mask(MaskKind::Bidirectional, len, persona.rows());
    AttentionMask r_mask = build_mask(cfg.u_mask, len, len);
    Tensor h2 = r_star;
    for (const auto& layer : m.regularizer) {
        Tensor p = detail::sublayer(
            h2, multi_head(h2, persona, p_mask, layer.persona_attn, cfg.heads),
            layer.norm_p_attn, ctx);
        p = detail::sublayer(p, ffn(p, layer.ff_p), layer.norm_p_ff, ctx);
        h2 = detail::sublayer(p, multi_head(p, r_star, r_mask, layer.rstar_attn, cfg.heads),
                              layer.norm_r_attn, ctx);
        h2 = detail::sublayer(h2, ffn(h2, layer.ff_r), layer.norm_r_ff, ctx);
    }
    return {h2, output_logits(m, h2)};
}

// Persona representation for U's first attention: type-0 embeddings of the
// persona tokens alone (Eq.-12 reading: P is an embedding, not H).
inline Tensor persona_embedding(const EDUParams& m, const std::vector<int>& persona_tokens,
                                const ForwardCtx& ctx = {}) {
    std::vector<int> types(persona_tokens.size(), 0);
    return ctx.drop(embed(persona_tokens, types, m.embeddings));
}

struct ForwardOutputs {
    Tensor h;         // encoder states, l x d_model
    Tensor r1;        // decoder states
    Tensor r2;        // regularizer states (absent under E+D / E ablation)
    Tensor logits_d;  // m x V
    Tensor logits_u;  // m x V (absent under E+D / E ablation)
};

struct TokenizedDialogue {
    std::vector<std::vector<int>> personas;
    std::vector<int> query;
    std::vector<int> response;  // without BOS/EOS
};

// Full stack on one dialogue example: E -> D -> U (dialogue mode, r* = R1).
// decoder input = [BOS] + response, targets = response + [EOS] (built by the
// objectives layer). The E+D and E ablations skip U.
inline ForwardOutputs edu_forward(const EDUParams& m, const EDUConfig& cfg,
                                  const TokenizedDialogue& ex, int bos_id, int sep_id,
                                  const ForwardCtx& ctx = {}) {
    InputLimits limits{cfg.max_persona, cfg.max_query};
    FormattedInput input = format_input(ex.personas, ex.query, sep_id, limits);
    ForwardOutputs out;
    out.h = encoder_forward(m, cfg, input, ctx);

    std::vector<int> dec_input;
    dec_input.push_back(bos_id);
    for (int t : ex.response) {
        if (dec_input.size() > cfg.max_response) break;
        dec_input.push_back(t);
    }
    DecoderOutputs dec = decoder_forward(m, cfg, out.h, dec_input, ctx);
    out.r1 = dec.r1;
    out.logits_d = dec.logits_d;

    if (cfg.ablation == Ablation::EncoderDecoder || cfg.ablation == Ablation::EncoderOnly)
        return out;

    std::vector<int> persona_tokens;
    for (const auto& p : ex.personas) {
        for (int t : p) {
            if (persona_tokens.size() >= cfg.max_persona) break;
            persona_tokens.push_back(t);
        }
        if (persona_tokens.size() >= cfg.max_persona) break;
    }
    if (persona_tokens.empty()) persona_tokens.push_back(sep_id);
    Tensor p_emb = persona_embedding(m, persona_tokens, ctx);
    RegularizerOutputs reg = regularizer_forward(m, cfg, p_emb, out.r1, ctx);
    out.r2 = reg.r2;
    out.logits_u = reg.logits_u;
    return out;
}

// Encoder-only language model, used by the E ablation: the encoder block
// alone reads [context, BOS, response] under a prefix-LM mask (context fully
// visible to itself, response causal) and scores response tokens through the
// tied head. Logits row i corresponds to response position i.
inline Tensor encoder_lm_logits(const EDUParams& m, const EDUConfig& cfg,
                                const FormattedInput& context,
                                const std::vector<int>& decoder_input,
                                const ForwardCtx& ctx = {}) {
    std::vector<int> tokens = context.tokens;
    std::vector<int> types = context.types;
    const std::size_t ctx_len = tokens.size();
    for (int t : decoder_input) {
        tokens.push_back(t);
        types.push_back(1);
    }
    const std::size_t len = tokens.size();
    if (len > cfg.max_len()) throw TensorError("encoder_lm: input exceeds model max length");
    Tensor h = ctx.drop(embed(tokens, types, m.embeddings));
    AttentionMask mask = build_mask(MaskKind::Bidirectional, len, len);
    for (std::size_t i = 0; i < ctx_len; ++i)
        for (std::size_t j = ctx_len; j < len; ++j) mask.allow[i * len + j] = 0;
    for (std::size_t i = ctx_len; i < len; ++i)
        for (std::size_t j = ctx_len; j < len; ++j)
            if (j > i) mask.allow[i * len + j] = 0;
    for (const auto& layer : m.encoder) {
        h = detail::sublayer(h, multi_head(h, h, mask, layer.self_attn, cfg.heads),
                             layer.norm_attn, ctx);
        h = detail::sublayer(h, ffn(h, layer.ff), layer.norm_ff, ctx);
    }
    return output_logits(m, slice_rows(h, ctx_len, len - ctx_len));
}

// NLI-mode forward for the unlikelihood path: premise plays the persona,
// hypothesis embeddings play r*. Data bypasses E and D entirely.
inline RegularizerOutputs nli_forward(const EDUParams& m, const EDUConfig& cfg,
                                      const std::vector<int>& premise,
                                      const std::vector<int>& hypothesis_input,
                                      const ForwardCtx& ctx = {}) {
    Tensor p_emb = persona_embedding(m, premise, ctx);
    std::vector<int> types(hypothesis_input.size(), 1);
    Tensor r_emb = ctx.drop(embed(hypothesis_input, types, m.embeddings));
    return regularizer_forward(m, cfg, p_emb, r_emb, ctx);
}

}  // namespace edu
