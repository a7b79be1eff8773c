// Transformer building blocks: attention masks, scaled dot-product and
// multi-head attention, position-wise FFN, embeddings, and the
// persona/query input formatter.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "edu/tensor.hpp"

namespace edu {

enum class MaskKind { Causal, Bidirectional };

struct AttentionMask {
    MaskKind kind = MaskKind::Bidirectional;
    std::size_t q_len = 0;
    std::size_t kv_len = 0;
    std::vector<std::uint8_t> allow;  // row-major [q_len x kv_len]

    bool allowed(std::size_t i, std::size_t j) const { return allow[i * kv_len + j] != 0; }
};

// Causal: row i may attend to columns <= i. Bidirectional: everything but
// padding. pad_columns are forbidden in every row; a fully forbidden row is
// an error.
inline AttentionMask build_mask(MaskKind kind, std::size_t q_len, std::size_t kv_len,
                                const std::vector<std::size_t>& pad_columns = {}) {
    if (q_len < 1 || kv_len < 1) throw TensorError("build_mask: lengths must be >= 1");
    AttentionMask m;
    m.kind = kind;
    m.q_len = q_len;
    m.kv_len = kv_len;
    m.allow.assign(q_len * kv_len, 1);
    if (kind == MaskKind::Causal) {
        for (std::size_t i = 0; i < q_len; ++i)
            for (std::size_t j = 0; j < kv_len; ++j)
                if (j > i) m.allow[i * kv_len + j] = 0;
    }
    for (std::size_t c : pad_columns) {
        if (c >= kv_len) throw TensorError("build_mask: pad column out of range");
        for (std::size_t i = 0; i < q_len; ++i) m.allow[i * kv_len + c] = 0;
    }
    for (std::size_t i = 0; i < q_len; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < kv_len && !any; ++j) any = m.allowed(i, j);
        if (!any) throw TensorError("build_mask: row " + std::to_string(i) + " fully forbidden");
    }
    return m;
}

// softmax(q k^T / sqrt(d_k) + M) v
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionMask& mask) {
    if (q.cols() != k.cols()) throw TensorError("attention: d_k mismatch");
    if (mask.q_len != q.rows() || mask.kv_len != k.rows())
        throw TensorError("attention: mask dims do not match q/k");
    Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<Real>(q.cols())));
    Tensor w = masked_softmax(scores, mask.allow);
    return matmul(w, v);
}

struct AttnParams {
    Tensor wq, wk, wv, wo;  // each d_model x d_model
};

struct FfnParams {
    Tensor w1, b1, w2, b2;  // d_model x d_ff, d_ff, d_ff x d_model, d_model
};

struct NormParams {
    Tensor gain, bias;  // d_model each
};

// Concat(A^1..A^h) W^O with per-head width d_model / h.
inline Tensor multi_head(const Tensor& x_q, const Tensor& x_kv, const AttentionMask& mask,
                         const AttnParams& p, std::size_t heads) {
    const std::size_t d_model = x_q.cols();
    if (heads == 0 || d_model % heads != 0)
        throw TensorError("multi_head: d_model " + std::to_string(d_model) +
                          " not divisible by h " + std::to_string(heads));
    const std::size_t d_head = d_model / heads;
    Tensor q = matmul(x_q, p.wq);
    Tensor k = matmul(x_kv, p.wk);
    Tensor v = matmul(x_kv, p.wv);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * d_head, d_head);
        Tensor kh = slice_cols(k, h * d_head, d_head);
        Tensor vh = slice_cols(v, h * d_head, d_head);
        outs.push_back(attention(qh, kh, vh, mask));
    }
    return matmul(concat_cols(outs), p.wo);
}

// max(0, x W1 + b1) W2 + b2, per position.
inline Tensor ffn(const Tensor& x, const FfnParams& p) {
    Tensor hidden = relu(add_rowwise(matmul(x, p.w1), p.b1));
    return add_rowwise(matmul(hidden, p.w2), p.b2);
}

inline Tensor layer_norm(const Tensor& x, const NormParams& p) {
    return layer_norm_rows(x, p.gain, p.bias);
}

struct EmbeddingTables {
    Tensor token;     // V x d_model
    Tensor type;      // 2 x d_model
    Tensor position;  // max_len x d_model
};

// Sum of token, type, and position lookups.
inline Tensor embed(const std::vector<int>& tokens, const std::vector<int>& types,
                    const std::vector<int>& positions, const EmbeddingTables& tables) {
    if (tokens.size() != types.size() || tokens.size() != positions.size())
        throw TensorError("embed: tokens/types/positions length mismatch");
    if (tokens.size() > tables.position.rows())
        throw TensorError("embed: input length " + std::to_string(tokens.size()) +
                          " exceeds max position " + std::to_string(tables.position.rows()));
    Tensor e = embedding_rows(tables.token, tokens);
    e = add(e, embedding_rows(tables.type, types));
    return add(e, embedding_rows(tables.position, positions));
}

inline Tensor embed(const std::vector<int>& tokens, const std::vector<int>& types,
                    const EmbeddingTables& tables) {
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    return embed(tokens, types, positions, tables);
}

struct FormattedInput {
    std::vector<int> tokens;
    std::vector<int> types;          // 0 persona span and [s], 1 query span
    std::size_t persona_len = 0;     // tokens before [s]
};

struct InputLimits {
    std::size_t max_persona = 64;
    std::size_t max_query = 64;
};

// p(0)_1 ... p(t)_{u_t} [s] q_1 ... q_n
// Personas over the budget are truncated from the right (later sentences
// dropped first); queries keep their rightmost tokens.
inline FormattedInput format_input(const std::vector<std::vector<int>>& personas,
                                   const std::vector<int>& query, int sep_id,
                                   const InputLimits& limits = {}) {
    if (query.empty()) throw TensorError("format_input: empty query");
    FormattedInput out;
    for (const auto& p : personas) {
        for (int tok : p) {
            if (out.tokens.size() >= limits.max_persona) break;
            out.tokens.push_back(tok);
        }
        if (out.tokens.size() >= limits.max_persona) break;
    }
    out.persona_len = out.tokens.size();
    out.tokens.push_back(sep_id);
    std::size_t q_start = query.size() > limits.max_query ? query.size() - limits.max_query : 0;
    for (std::size_t i = q_start; i < query.size(); ++i) out.tokens.push_back(query[i]);
    out.types.assign(out.tokens.size(), 1);
    for (std::size_t i = 0; i <= out.persona_len; ++i) out.types[i] = 0;
    return out;
}

}  // namespace edu
