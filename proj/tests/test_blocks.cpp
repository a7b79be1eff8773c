// Attention blocks against brute-force oracles: mask construction, single
// and multi-head attention, the FFN, embeddings, and input formatting.

#include <doctest.h>

#include <cmath>
#include <random>

#include "edu/edu.hpp"

using namespace edu;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, Real scale = 1.0) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    std::vector<Real> v(n);
    std::uniform_real_distribution<Real> dist(-scale, scale);
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

// Brute-force single-query attention: softmax over allowed keys, weighted
// value sum, computed row by row without any tensor machinery.
std::vector<Real> attention_row(const Tensor& q, const Tensor& k, const Tensor& v,
                                const AttentionMask& mask, std::size_t i) {
    const std::size_t dk = q.cols();
    std::vector<Real> scores(k.rows(), 0.0);
    Real mx = -1e30;
    for (std::size_t j = 0; j < k.rows(); ++j) {
        if (!mask.allowed(i, j)) continue;
        Real s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) s += q.at(i, c) * k.at(j, c);
        scores[j] = s / std::sqrt((Real)dk);
        mx = std::max(mx, scores[j]);
    }
    Real norm = 0.0;
    for (std::size_t j = 0; j < k.rows(); ++j)
        if (mask.allowed(i, j)) norm += std::exp(scores[j] - mx);
    std::vector<Real> out(v.cols(), 0.0);
    for (std::size_t j = 0; j < k.rows(); ++j) {
        if (!mask.allowed(i, j)) continue;
        const Real w = std::exp(scores[j] - mx) / norm;
        for (std::size_t c = 0; c < v.cols(); ++c) out[c] += w * v.at(j, c);
    }
    return out;
}

}  // namespace

TEST_CASE("causal mask allows exactly j <= i") {
    AttentionMask m = build_mask(MaskKind::Causal, 4, 4);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(m.allowed(i, j) == (j <= i));
}

TEST_CASE("pad columns are forbidden everywhere; fully forbidden rows throw") {
    AttentionMask m = build_mask(MaskKind::Bidirectional, 3, 4, {1, 3});
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(!m.allowed(i, 1));
        CHECK(!m.allowed(i, 3));
        CHECK(m.allowed(i, 0));
    }
    CHECK_THROWS_AS(build_mask(MaskKind::Causal, 2, 2, {0}), TensorError);
    CHECK_THROWS_AS(build_mask(MaskKind::Bidirectional, 2, 2, {0, 1}), TensorError);
}

TEST_CASE("attention matches the brute-force oracle") {
    std::mt19937_64 rng(11);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({5, 4}, rng);
    Tensor v = random_tensor({5, 4}, rng);
    AttentionMask m = build_mask(MaskKind::Bidirectional, 3, 5, {2});
    Tensor out = attention(q, k, v, m);
    for (std::size_t i = 0; i < 3; ++i) {
        auto want = attention_row(q, k, v, m, i);
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(out.at(i, c) == doctest::Approx(want[c]).epsilon(1e-10));
    }
}

TEST_CASE("multi-head equals per-head slicing done by hand (h=2)") {
    std::mt19937_64 rng(12);
    const std::size_t d = 6, heads = 2, dh = d / heads;
    Tensor x = random_tensor({4, d}, rng);
    AttnParams p{random_tensor({d, d}, rng), random_tensor({d, d}, rng),
                 random_tensor({d, d}, rng), random_tensor({d, d}, rng)};
    AttentionMask m = build_mask(MaskKind::Causal, 4, 4);
    Tensor got = multi_head(x, x, m, p, heads);

    Tensor q = matmul(x, p.wq), k = matmul(x, p.wk), v = matmul(x, p.wv);
    Tensor concat = Tensor::zeros({4, d});
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        for (std::size_t i = 0; i < 4; ++i) {
            auto row = attention_row(qh, kh, vh, m, i);
            for (std::size_t c = 0; c < dh; ++c) concat.at(i, h * dh + c) = row[c];
        }
    }
    Tensor want = matmul(concat, p.wo);
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got.at(i) == doctest::Approx(want.at(i)).epsilon(1e-10));
}

TEST_CASE("multi-head rejects indivisible widths") {
    std::mt19937_64 rng(13);
    Tensor x = random_tensor({2, 6}, rng);
    AttnParams p{random_tensor({6, 6}, rng), random_tensor({6, 6}, rng),
                 random_tensor({6, 6}, rng), random_tensor({6, 6}, rng)};
    AttentionMask m = build_mask(MaskKind::Bidirectional, 2, 2);
    CHECK_THROWS_AS(multi_head(x, x, m, p, 4), TensorError);
}

TEST_CASE("ffn equals the explicit two-matmul form") {
    std::mt19937_64 rng(14);
    Tensor x = random_tensor({3, 4}, rng);
    FfnParams p{random_tensor({4, 8}, rng), random_tensor({8}, rng),
                random_tensor({8, 4}, rng), random_tensor({4}, rng)};
    Tensor got = ffn(x, p);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
            Real acc = p.b2.at(c);
            for (std::size_t hcol = 0; hcol < 8; ++hcol) {
                Real hidden = p.b1.at(hcol);
                for (std::size_t a = 0; a < 4; ++a) hidden += x.at(i, a) * p.w1.at(a, hcol);
                acc += std::max(hidden, 0.0) * p.w2.at(hcol, c);
            }
            CHECK(got.at(i, c) == doctest::Approx(acc).epsilon(1e-10));
        }
}

TEST_CASE("embed sums token, type, and position lookups") {
    EmbeddingTables t;
    t.token = Tensor({3, 2}, {1, 2, 10, 20, 100, 200});
    t.type = Tensor({2, 2}, {0.1, 0.2, 0.3, 0.4});
    t.position = Tensor({4, 2}, {0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08});
    Tensor e = embed({2, 0}, {1, 0}, t);
    CHECK(e.at(0, 0) == doctest::Approx(100 + 0.3 + 0.01));
    CHECK(e.at(1, 1) == doctest::Approx(2 + 0.2 + 0.04));
    CHECK_THROWS_AS(embed({0, 1, 2, 0, 1}, {0, 0, 0, 0, 0}, t), TensorError);
}

TEST_CASE("format_input layout, types, and truncation") {
    const int sep = 99;
    FormattedInput f = format_input({{1, 2}, {3}}, {7, 8}, sep);
    CHECK(f.tokens == std::vector<int>{1, 2, 3, sep, 7, 8});
    CHECK(f.persona_len == 3);
    CHECK(f.types == std::vector<int>{0, 0, 0, 0, 1, 1});

    InputLimits tight{3, 2};
    FormattedInput g = format_input({{1, 2}, {3, 4, 5}}, {7, 8, 9}, sep, tight);
    CHECK(g.tokens == std::vector<int>{1, 2, 3, sep, 8, 9});  // persona cut right, query keeps tail
    CHECK_THROWS_AS(format_input({{1}}, {}, sep), TensorError);
}
