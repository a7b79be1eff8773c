// Dense tensor arithmetic with reverse-mode automatic differentiation.
//
// Tensors are 1-D or 2-D dense arrays of doubles. Every differentiable
// operation optionally records a node on the active Tape; Tape::reverse
// replays the chain rule from a scalar loss back to the leaves.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace edu {

using Real = double;

struct TensorError : std::runtime_error {
    explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Raw row-major GEMM kernels, accumulate into c.
// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const Real* a, const Real* b, Real* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        Real* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = ai[p];
            if (av == 0.0) continue;
            const Real* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const Real* a, const Real* b, Real* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        Real* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const Real* bj = b + j * k;
            Real acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const Real* a, const Real* b, Real* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        const Real* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = ai[p];
            if (av == 0.0) continue;
            Real* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<Real> value;
    std::vector<Real> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    // Accumulates this node's grad into its parents' grads; parents are
    // captured by shared_ptr inside the closure.
    std::function<void()> backprop;

    std::size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<Real> data, bool requires_grad = false) {
        std::size_t expect = 1;
        for (auto d : shape) expect *= d;
        if (shape.empty() || expect != data.size())
            throw TensorError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + detail::shape_str(shape));
        node_ = std::make_shared<TensorNode>();
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return Tensor(std::move(shape), std::vector<Real>(n, 0.0), requires_grad);
    }
    static Tensor scalar(Real v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape[0]; }
    std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }
    bool is_scalar() const { return size() == 1; }

    std::vector<Real>& data() { return node_->value; }
    const std::vector<Real>& data() const { return node_->value; }
    Real item() const {
        if (!is_scalar()) throw TensorError("item() on non-scalar tensor");
        return node_->value[0];
    }
    Real& at(std::size_t i) { return node_->value[i]; }
    Real at(std::size_t i) const { return node_->value[i]; }
    Real& at(std::size_t i, std::size_t j) { return node_->value[i * cols() + j]; }
    Real at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    // Zero-filled if reverse never reached this tensor.
    const std::vector<Real>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::vector<Real>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Ordered record of executed operations. Constructing a Tape makes it the
// active recording target for the current thread; destruction restores the
// previous one. reverse() walks the record backwards from the loss node.
class Tape {
public:
    Tape() : prev_(active_ref()) { active_ref() = this; }
    ~Tape() {
        active_ref() = prev_;
        // Backprop closures capture their own node's shared_ptr; reset them
        // so the recorded graph does not keep itself alive.
        for (auto& n : nodes_) n->backprop = nullptr;
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    void record(std::shared_ptr<TensorNode> n) { nodes_.push_back(std::move(n)); }
    std::size_t size() const { return nodes_.size(); }

    void reverse(const Tensor& loss) {
        if (!loss.is_scalar())
            throw TensorError("reverse() requires a scalar loss, got shape " +
                              detail::shape_str(loss.shape()));
        std::size_t start = nodes_.size();
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i] == loss.node()) { start = i + 1; break; }
        }
        loss.node()->ensure_grad();
        loss.node()->grad[0] = 1.0;
        for (std::size_t i = start; i-- > 0;) {
            auto& n = nodes_[i];
            if (n->backprop && !n->grad.empty()) n->backprop();
        }
    }

private:
    static Tape*& active_ref() {
        thread_local Tape* active = nullptr;
        return active;
    }
    std::vector<std::shared_ptr<TensorNode>> nodes_;
    Tape* prev_;
};

inline void reverse(Tape& tape, const Tensor& loss) { tape.reverse(loss); }

namespace detail {

inline bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_result(std::vector<std::size_t> shape, std::vector<Real> value, bool track) {
    Tensor out(std::move(shape), std::move(value), track);
    if (track) Tape::active()->record(out.node());
    return out;
}

}  // namespace detail

// ---- primitives --------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw TensorError("matmul shape mismatch: " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<Real> out(m * n, 0.0);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    bool track = detail::want_grad({&a, &b});
    Tensor r = detail::make_result({m, n}, std::move(out), track);
    if (track) {
        auto an = a.node(), bn = b.node(), rn = r.node();
        rn->backprop = [an, bn, rn, m, k, n] {
            if (an->requires_grad || an->backprop) {
                an->ensure_grad();
                detail::gemm_nt(rn->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad || bn->backprop) {
                bn->ensure_grad();
                detail::gemm_tn(an->value.data(), rn->grad.data(), bn->grad.data(), m, k, n);
            }
        };
    }
    return r;
}

// a * b^T, with b given row-major [n x k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
        throw TensorError("matmul_nt shape mismatch: " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<Real> out(m * n, 0.0);
    detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
    bool track = detail::want_grad({&a, &b});
    Tensor r = detail::make_result({m, n}, std::move(out), track);
    if (track) {
        auto an = a.node(), bn = b.node(), rn = r.node();
        rn->backprop = [an, bn, rn, m, k, n] {
            if (an->requires_grad || an->backprop) {
                an->ensure_grad();
                detail::gemm_nn(rn->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad || bn->backprop) {
                bn->ensure_grad();
                detail::gemm_tn(rn->grad.data(), an->value.data(), bn->grad.data(), m, n, k);
            }
        };
    }
    return r;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw TensorError("add shape mismatch: " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    bool track = detail::want_grad({&a, &b});
    Tensor r = detail::make_result(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.node(), bn = b.node(), rn = r.node();
        rn->backprop = [an, bn, rn] {
            for (auto* p : {an.get(), bn.get()}) {
                if (!(p->requires_grad || p->backprop)) continue;
                p->ensure_grad();
                for (std::size_t i = 0; i < rn->grad.size(); ++i) p->grad[i] += rn->grad[i];
            }
        };
    }
    return r;
}

// x [m x n] + bias broadcast over rows; bias is [n] or [1 x n].
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    const std::size_t m = x.rows(), n = x.cols();
    if (bias.size() != n)
        throw TensorError("add_rowwise bias length " + std::to_string(bias.size()) +
                          " vs row width " + std::to_string(n));
    std::vector<Real> out(x.data());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
    bool track = detail::want_grad({&x, &bias});
    Tensor r = detail::make_result(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.node(), bn = bias.node(), rn = r.node();
        rn->backprop = [xn, bn, rn, m, n] {
            if (xn->requires_grad || xn->backprop) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += rn->grad[i];
            }
            if (bn->requires_grad || bn->backprop) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) bn->grad[j] += rn->grad[i * n + j];
            }
        };
    }
    return r;
}

inline Tensor scale(const Tensor& a, Real c) {
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    bool track = detail::want_grad({&a});
    Tensor r = detail::make_result(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.node(), rn = r.node();
        rn->backprop = [an, rn, c] {
            an->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i) an->grad[i] += rn->grad[i] * c;
        };
    }
    return r;
}

// Subgradient at 0 is 0.
inline Tensor relu(const Tensor& a) {
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    bool track = detail::want_grad({&a});
    Tensor r = detail::make_result(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.node(), rn = r.node();
        rn->backprop = [an, rn] {
            an->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i)
                if (an->value[i] > 0.0) an->grad[i] += rn->grad[i];
        };
    }
    return r;
}

inline Tensor sum(const Tensor& a) {
    Real s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    bool track = detail::want_grad({&a});
    Tensor r = detail::make_result({1}, {s}, track);
    if (track) {
        auto an = a.node(), rn = r.node();
        rn->backprop = [an, rn] {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += rn->grad[0];
        };
    }
    return r;
}

// Row-wise softmax over allowed positions only; forbidden positions are
// exactly zero. `allow` is row-major [m x n] over {0,1}.
inline Tensor masked_softmax(const Tensor& logits, const std::vector<std::uint8_t>& allow) {
    const std::size_t m = logits.rows(), n = logits.cols();
    if (allow.size() != m * n)
        throw TensorError("masked_softmax mask size " + std::to_string(allow.size()) +
                          " vs logits " + detail::shape_str(logits.shape()));
    std::vector<Real> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const Real* li = logits.data().data() + i * n;
        const std::uint8_t* ai = allow.data() + i * n;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (ai[j] && li[j] > mx) mx = li[j];
        if (!std::isfinite(mx))
            throw TensorError("masked_softmax: fully forbidden row " + std::to_string(i));
        Real z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (ai[j]) z += std::exp(li[j] - mx);
        for (std::size_t j = 0; j < n; ++j)
            if (ai[j]) out[i * n + j] = std::exp(li[j] - mx) / z;
    }
    bool track = detail::want_grad({&logits});
    Tensor r = detail::make_result(logits.shape(), std::move(out), track);
    if (track) {
        auto ln = logits.node(), rn = r.node();
        rn->backprop = [ln, rn, m, n] {
            ln->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const Real* y = rn->value.data() + i * n;
                const Real* g = rn->grad.data() + i * n;
                Real dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < n; ++j)
                    ln->grad[i * n + j] += y[j] * (g[j] - dot);
            }
        };
    }
    return r;
}

inline Tensor log_softmax_rows(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<Real> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const Real* xi = x.data().data() + i * n;
        Real mx = xi[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        Real z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
        const Real lz = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xi[j] - lz;
    }
    bool track = detail::want_grad({&x});
    Tensor r = detail::make_result(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.node(), rn = r.node();
        rn->backprop = [xn, rn, m, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const Real* y = rn->value.data() + i * n;
                const Real* g = rn->grad.data() + i * n;
                Real gsum = 0.0;
                for (std::size_t j = 0; j < n; ++j) gsum += g[j];
                for (std::size_t j = 0; j < n; ++j)
                    xn->grad[i * n + j] += g[j] - std::exp(y[j]) * gsum;
            }
        };
    }
    return r;
}

// Gathers x(i, ids[i]) into a length-m vector.
inline Tensor pick_rows(const Tensor& x, const std::vector<int>& ids) {
    const std::size_t m = x.rows(), n = x.cols();
    if (ids.size() != m)
        throw TensorError("pick_rows: " + std::to_string(ids.size()) + " ids for " +
                          std::to_string(m) + " rows");
    std::vector<Real> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n)
            throw TensorError("pick_rows: id " + std::to_string(ids[i]) + " out of range " +
                              std::to_string(n));
        out[i] = x.at(i, static_cast<std::size_t>(ids[i]));
    }
    bool track = detail::want_grad({&x});
    Tensor r = detail::make_result({m}, std::move(out), track);
    if (track) {
        auto xn = x.node(), rn = r.node();
        auto ids_copy = ids;
        rn->backprop = [xn, rn, ids_copy, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < ids_copy.size(); ++i)
                xn->grad[i * n + static_cast<std::size_t>(ids_copy[i])] += rn->grad[i];
        };
    }
    return r;
}

// y_i = -log(1 - p_i) where p_i = exp(logp_i) clamped to [eps, 1-eps].
// Outside the clamp region the gradient is zero.
inline Tensor neg_log_one_minus_prob(const Tensor& logp, Real eps = 1e-6) {
    std::vector<Real> out(logp.size());
    std::vector<std::uint8_t> live(logp.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        Real p = std::exp(logp.data()[i]);
        live[i] = (p > eps && p < 1.0 - eps) ? 1 : 0;
        p = std::min(std::max(p, eps), 1.0 - eps);
        out[i] = -std::log(1.0 - p);
    }
    bool track = detail::want_grad({&logp});
    Tensor r = detail::make_result(logp.shape(), std::move(out), track);
    if (track) {
        auto ln = logp.node(), rn = r.node();
        rn->backprop = [ln, rn, live] {
            ln->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i) {
                if (!live[i]) continue;
                const Real p = std::exp(ln->value[i]);
                ln->grad[i] += rn->grad[i] * p / (1.0 - p);
            }
        };
    }
    return r;
}

// Gathers rows of an embedding table; gradient scatter-adds back.
inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    const std::size_t v = table.rows(), d = table.cols();
    std::vector<Real> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
            throw TensorError("embedding id " + std::to_string(ids[i]) +
                              " out of vocabulary range " + std::to_string(v));
        const Real* row = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(row, row + d, out.begin() + i * d);
    }
    bool track = detail::want_grad({&table});
    Tensor r = detail::make_result({ids.size(), d}, std::move(out), track);
    if (track) {
        auto tn = table.node(), rn = r.node();
        auto ids_copy = ids;
        rn->backprop = [tn, rn, ids_copy, d] {
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                Real* dst = tn->grad.data() + static_cast<std::size_t>(ids_copy[i]) * d;
                const Real* src = rn->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return r;
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
    const std::size_t m = x.rows(), n = x.cols();
    if (start + len > n)
        throw TensorError("slice_cols [" + std::to_string(start) + ", " +
                          std::to_string(start + len) + ") out of width " + std::to_string(n));
    std::vector<Real> out(m * len);
    for (std::size_t i = 0; i < m; ++i)
        std::copy(x.data().begin() + i * n + start, x.data().begin() + i * n + start + len,
                  out.begin() + i * len);
    bool track = detail::want_grad({&x});
    Tensor r = detail::make_result({m, len}, std::move(out), track);
    if (track) {
        auto xn = x.node(), rn = r.node();
        rn->backprop = [xn, rn, start, len, m, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < len; ++j)
                    xn->grad[i * n + start + j] += rn->grad[i * len + j];
        };
    }
    return r;
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t len) {
    const std::size_t m = x.rows(), n = x.cols();
    if (start + len > m)
        throw TensorError("slice_rows [" + std::to_string(start) + ", " +
                          std::to_string(start + len) + ") out of height " + std::to_string(m));
    std::vector<Real> out(x.data().begin() + start * n, x.data().begin() + (start + len) * n);
    bool track = detail::want_grad({&x});
    Tensor r = detail::make_result({len, n}, std::move(out), track);
    if (track) {
        auto xn = x.node(), rn = r.node();
        rn->backprop = [xn, rn, start, n] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i)
                xn->grad[start * n + i] += rn->grad[i];
        };
    }
    return r;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw TensorError("concat_cols: no parts");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) throw TensorError("concat_cols: row count mismatch");
        n += p.cols();
    }
    std::vector<Real> out(m * n);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            std::copy(p.data().begin() + i * w, p.data().begin() + (i + 1) * w,
                      out.begin() + i * n + off);
        off += w;
    }
    bool track = false;
    for (const auto& p : parts) track = track || detail::want_grad({&p});
    Tensor r = detail::make_result({m, n}, std::move(out), track);
    if (track) {
        std::vector<std::shared_ptr<TensorNode>> pn;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) { pn.push_back(p.node()); widths.push_back(p.cols()); }
        auto rn = r.node();
        rn->backprop = [pn, widths, rn, m, n] {
            std::size_t off = 0;
            for (std::size_t k = 0; k < pn.size(); ++k) {
                const std::size_t w = widths[k];
                if (pn[k]->requires_grad || pn[k]->backprop) {
                    pn[k]->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            pn[k]->grad[i * w + j] += rn->grad[i * n + off + j];
                }
                off += w;
            }
        };
    }
    return r;
}

inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                              Real eps = 1e-5) {
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n)
        throw TensorError("layer_norm: gain/bias width mismatch");
    std::vector<Real> out(m * n), xhat(m * n), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const Real* xi = x.data().data() + i * n;
        Real mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xi[j];
        mean /= static_cast<Real>(n);
        Real var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<Real>(n);
        const Real is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const Real h = (xi[j] - mean) * is;
            xhat[i * n + j] = h;
            out[i * n + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    bool track = detail::want_grad({&x, &gain, &bias});
    Tensor r = detail::make_result(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), rn = r.node();
        rn->backprop = [xn, gn, bn, rn, xhat, inv_std, m, n] {
            if (gn->requires_grad || gn->backprop) {
                gn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        gn->grad[j] += rn->grad[i * n + j] * xhat[i * n + j];
            }
            if (bn->requires_grad || bn->backprop) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) bn->grad[j] += rn->grad[i * n + j];
            }
            if (xn->requires_grad || xn->backprop) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    // dL/dxhat_j = g_j * gain_j; standard layer-norm backward.
                    Real s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const Real dh = rn->grad[i * n + j] * gn->value[j];
                        s1 += dh;
                        s2 += dh * xhat[i * n + j];
                    }
                    const Real inv_n = 1.0 / static_cast<Real>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const Real dh = rn->grad[i * n + j] * gn->value[j];
                        xn->grad[i * n + j] +=
                            inv_std[i] * (dh - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
                    }
                }
            }
        };
    }
    return r;
}

// Inverted dropout: kept entries scaled by 1/(1-rate). Identity when not
// training or rate == 0.
inline Tensor dropout(const Tensor& x, Real rate, std::mt19937_64& rng, bool training) {
    if (!training || rate <= 0.0) return x;
    if (rate >= 1.0) throw TensorError("dropout rate must be < 1");
    const Real keep = 1.0 - rate;
    std::vector<Real> out(x.size());
    std::vector<std::uint8_t> mask(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        // 53-bit uniform in [0,1); same bit stream on every platform.
        const Real u = static_cast<Real>(rng() >> 11) * 0x1.0p-53;
        mask[i] = u < keep ? 1 : 0;
        out[i] = mask[i] ? x.data()[i] / keep : 0.0;
    }
    bool track = detail::want_grad({&x});
    Tensor r = detail::make_result(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.node(), rn = r.node();
        rn->backprop = [xn, rn, mask, keep] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i)
                if (mask[i]) xn->grad[i] += rn->grad[i] / keep;
        };
    }
    return r;
}

// ---- gradient verification ---------------------------------------------

// Max relative error between analytic gradients of f at x and central finite
// differences. Returns Inf if the analytic gradient is missing.
inline Real grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                       Real eps = 1e-5) {
    x.set_requires_grad(true);
    std::vector<Real> analytic;
    {
        Tape tape;
        x.zero_grad();
        Tensor loss = f(x);
        tape.reverse(loss);
        analytic = x.grad();
    }
    if (analytic.size() != x.size()) return std::numeric_limits<Real>::infinity();
    Real worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Real keep = x.at(i);
        x.at(i) = keep + eps;
        const Real fp = f(x).item();
        x.at(i) = keep - eps;
        const Real fm = f(x).item();
        x.at(i) = keep;
        const Real numeric = (fp - fm) / (2.0 * eps);
        const Real err = std::abs(analytic[i] - numeric) /
                         (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

// Truncated normal (resample beyond two sigma), built from raw mt19937_64
// uniforms so parameter init is identical across platforms.
inline Real truncated_normal(std::mt19937_64& rng, Real sigma) {
    for (;;) {
        const Real u1 = (static_cast<Real>(rng() >> 11) + 0.5) * 0x1.0p-53;
        const Real u2 = static_cast<Real>(rng() >> 11) * 0x1.0p-53;
        const Real z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        if (std::abs(z) <= 2.0) return z * sigma;
    }
}

}  // namespace edu
