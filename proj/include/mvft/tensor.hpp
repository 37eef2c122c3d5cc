#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvft/rng.hpp"

namespace mvft {

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // same size as data when requires_grad
    bool requires_grad = false;
};

inline std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

}  // namespace detail

// Dense row-major f64 tensor handle. Copies share storage; ops produce
// fresh nodes, so a tensor written by an op is never mutated afterwards.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<detail::TensorNode>();
        t.n_->shape = std::move(shape);
        t.n_->data.assign(detail::numel_of(t.n_->shape), 0.0);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values) {
        Tensor t;
        t.n_ = std::make_shared<detail::TensorNode>();
        t.n_->shape = std::move(shape);
        if (values.size() != detail::numel_of(t.n_->shape))
            throw std::invalid_argument("Tensor::from: data size does not match shape " +
                                        detail::shape_str(t.n_->shape));
        t.n_->data = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    bool defined() const { return n_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return n_->shape; }
    std::size_t ndim() const { return n_->shape.size(); }
    std::size_t numel() const { return n_->data.size(); }
    std::size_t rows() const { return n_->shape.at(0); }
    std::size_t cols() const { return n_->shape.size() > 1 ? n_->shape[1] : 1; }

    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }

    double& at(std::size_t i) { return n_->data[i]; }
    double at(std::size_t i) const { return n_->data[i]; }
    double& at(std::size_t r, std::size_t c) { return n_->data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return n_->data[r * cols() + c]; }

    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        if (rg && n_->grad.size() != n_->data.size()) n_->grad.assign(n_->data.size(), 0.0);
        if (!rg) n_->grad.clear();
    }

    std::vector<double>& grad() {
        if (!requires_grad()) throw std::logic_error("grad(): tensor does not track gradients");
        return n_->grad;
    }
    const std::vector<double>& grad() const {
        if (!requires_grad()) throw std::logic_error("grad(): tensor does not track gradients");
        return n_->grad;
    }
    void zero_grad() {
        if (requires_grad()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }

    detail::TensorNode* node() const { return n_.get(); }
    bool same_storage(const Tensor& other) const { return n_ == other.n_; }

private:
    std::shared_ptr<detail::TensorNode> n_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// One recorded op: the tensors it touched plus the rule that pushes the
// output gradient back into the inputs. Records are appended in execution
// order, so inputs always precede their consumers.
struct OpRecord {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
};

class Tape {
public:
    static Tape& active() {
        thread_local Tape tape;
        return tape;
    }

    bool enabled() const { return enabled_; }
    void set_enabled(bool e) { enabled_ = e; }

    void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
        records_.push_back({std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    // Single reverse sweep; each record visited exactly once.
    void run_backward() {
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
        clear();
    }

private:
    std::vector<OpRecord> records_;
    bool enabled_ = true;
};

struct NoGradGuard {
    NoGradGuard() : prev_(Tape::active().enabled()) { Tape::active().set_enabled(false); }
    ~NoGradGuard() { Tape::active().set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

inline bool track(const Tensor& t) { return Tape::active().enabled() && t.requires_grad(); }

inline void debug_check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
    for (double v : t.data()) {
        if (!std::isfinite(v))
            throw std::runtime_error(std::string(op) + ": non-finite value in forward output");
    }
#else
    (void)t;
    (void)op;
#endif
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2)
        throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got shape " +
                                    shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    const bool rg = detail::track(a) || detail::track(b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    detail::debug_check_finite(out, "add");
    if (rg) {
        Tape::active().record({a, b}, out, [a, b, out]() {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = const_cast<Tensor&>(a).grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = const_cast<Tensor&>(b).grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    const bool rg = detail::track(a) || detail::track(b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    detail::debug_check_finite(out, "sub");
    if (rg) {
        Tape::active().record({a, b}, out, [a, b, out]() {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = const_cast<Tensor&>(a).grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = const_cast<Tensor&>(b).grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    const bool rg = detail::track(a) || detail::track(b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    detail::debug_check_finite(out, "mul");
    if (rg) {
        Tape::active().record({a, b}, out, [a, b, out]() {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = const_cast<Tensor&>(a).grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(i);
            }
            if (b.requires_grad()) {
                auto& gb = const_cast<Tensor&>(b).grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(i);
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    const bool rg = detail::track(a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * s;
    detail::debug_check_finite(out, "scale");
    if (rg) {
        Tape::active().record({a}, out, [a, out, s]() {
            const auto& g = out.grad();
            auto& ga = const_cast<Tensor&>(a).grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    const bool rg = detail::track(a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
    if (rg) {
        Tape::active().record({a}, out, [a, out]() {
            const auto& g = out.grad();
            auto& ga = const_cast<Tensor&>(a).grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (a.at(i) > 0.0) ga[i] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace detail {

// C (m x n) += A (m x k) * B (k x n), row-major, ikj order.
inline void matmul_accum(const double* a, const double* b, double* c, std::size_t m,
                         std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m x n) += A (k x m)^T * B (k x n)
inline void matmul_at_b_accum(const double* a, const double* b, double* c, std::size_t k,
                              std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m x n) += A (m x k) * B (n x k)^T
inline void matmul_a_bt_accum(const double* a, const double* b, double* c, std::size_t m,
                              std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner extents differ, " +
                                    detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    const bool rg = detail::track(a) || detail::track(b);
    Tensor out = Tensor::zeros({m, n}, rg);
    detail::matmul_accum(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    detail::debug_check_finite(out, "matmul");
    if (rg) {
        Tape::active().record({a, b}, out, [a, b, out, m, k, n]() {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                // dA += dC * B^T
                detail::matmul_a_bt_accum(g, b.data().data(),
                                          const_cast<Tensor&>(a).grad().data(), m, n, k);
            }
            if (b.requires_grad()) {
                // dB += A^T * dC
                detail::matmul_at_b_accum(a.data().data(), g,
                                          const_cast<Tensor&>(b).grad().data(), m, k, n);
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    const bool rg = detail::track(a);
    Tensor out = Tensor::zeros({c, r}, rg);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    if (rg) {
        Tape::active().record({a}, out, [a, out, r, c]() {
            auto& ga = const_cast<Tensor&>(a).grad();
            const auto& g = out.grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row/concat ops
// ---------------------------------------------------------------------------

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
        total += p.rows();
        rg = rg || detail::track(p);
    }
    Tensor out = Tensor::zeros({total, c}, rg);
    std::size_t r0 = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + r0 * c);
        r0 += p.rows();
    }
    if (rg) {
        Tape::active().record(parts, out, [parts, out, c]() {
            const auto& g = out.grad();
            std::size_t r0 = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    auto& gp = const_cast<Tensor&>(p).grad();
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[r0 * c + i];
                }
                r0 += p.rows();
            }
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        total += p.cols();
        rg = rg || detail::track(p);
    }
    Tensor out = Tensor::zeros({r, total}, rg);
    std::size_t c0 = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) out.at(i, c0 + j) = p.at(i, j);
        c0 += pc;
    }
    if (rg) {
        Tape::active().record(parts, out, [parts, out, r, total]() {
            const auto& g = out.grad();
            std::size_t c0 = 0;
            for (const auto& p : parts) {
                const std::size_t pc = p.cols();
                if (p.requires_grad()) {
                    auto& gp = const_cast<Tensor&>(p).grad();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * total + c0 + j];
                }
                c0 += pc;
            }
        });
    }
    return out;
}

// out[i] = table[idx[i]]; duplicate indices accumulate gradient.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
    detail::require_2d(table, "gather_rows");
    const std::size_t c = table.cols();
    for (auto i : idx)
        if (i >= table.rows())
            throw std::out_of_range("gather_rows: index " + std::to_string(i) +
                                    " out of range for " + detail::shape_str(table.shape()));
    const bool rg = detail::track(table);
    Tensor out = Tensor::zeros({idx.size(), c}, rg);
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = table.at(idx[i], j);
    if (rg) {
        Tape::active().record({table}, out, [table, out, idx, c]() {
            auto& gt = const_cast<Tensor&>(table).grad();
            const auto& g = out.grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j) gt[idx[i] * c + j] += g[i * c + j];
        });
    }
    return out;
}

// Broadcast a (1 x c) row vector over every row of x.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    detail::require_2d(x, "add_rowvec");
    if (v.numel() != x.cols())
        throw std::invalid_argument("add_rowvec: vector size " + std::to_string(v.numel()) +
                                    " does not match columns of " + detail::shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols();
    const bool rg = detail::track(x) || detail::track(v);
    Tensor out = Tensor::zeros({r, c}, rg);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + v.at(j);
    detail::debug_check_finite(out, "add_rowvec");
    if (rg) {
        Tape::active().record({x, v}, out, [x, v, out, r, c]() {
            const auto& g = out.grad();
            if (x.requires_grad()) {
                auto& gx = const_cast<Tensor&>(x).grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (v.requires_grad()) {
                auto& gv = const_cast<Tensor&>(v).grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and reductions
// ---------------------------------------------------------------------------

// Row-wise softmax with max-subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_2d(x, "softmax_rows");
    const std::size_t r = x.rows(), c = x.cols();
    if (c < 1) throw std::invalid_argument("softmax_rows: empty rows");
    const bool rg = detail::track(x);
    Tensor out = Tensor::zeros({r, c}, rg);
    for (std::size_t i = 0; i < r; ++i) {
        double m = x.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, x.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double e = std::exp(x.at(i, j) - m);
            out.at(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= z;
    }
    detail::debug_check_finite(out, "softmax_rows");
    if (rg) {
        Tape::active().record({x}, out, [x, out, r, c]() {
            auto& gx = const_cast<Tensor&>(x).grad();
            const auto& g = out.grad();
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * out.at(i, j);
                for (std::size_t j = 0; j < c; ++j)
                    gx[i * c + j] += out.at(i, j) * (g[i * c + j] - dot);
            }
        });
    }
    return out;
}

// Normalize the last axis to zero mean and unit population variance, then
// scale by gamma and shift by beta (both length d).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    detail::require_2d(x, "layer_norm");
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t r = x.rows(), d = x.cols();
    if (gamma.numel() != d || beta.numel() != d)
        throw std::invalid_argument("layer_norm: gamma/beta size must match last axis");
    const bool rg = detail::track(x) || detail::track(gamma) || detail::track(beta);
    Tensor out = Tensor::zeros({r, d}, rg);
    std::vector<double> mean(r), istd(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x.at(i, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dv = x.at(i, j) - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        mean[i] = mu;
        istd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j)
            out.at(i, j) = (x.at(i, j) - mu) * istd[i] * gamma.at(j) + beta.at(j);
    }
    detail::debug_check_finite(out, "layer_norm");
    if (rg) {
        Tape::active().record({x, gamma, beta}, out,
                              [x, gamma, beta, out, r, d, mean, istd]() {
            const auto& g = out.grad();
            const double dn = static_cast<double>(d);
            for (std::size_t i = 0; i < r; ++i) {
                // per-row: xhat_j = (x_j - mu) * istd
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double xhat = (x.at(i, j) - mean[i]) * istd[i];
                    const double dxhat = g[i * d + j] * gamma.at(j);
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if (x.requires_grad()) {
                    auto& gx = const_cast<Tensor&>(x).grad();
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = (x.at(i, j) - mean[i]) * istd[i];
                        const double dxhat = g[i * d + j] * gamma.at(j);
                        gx[i * d + j] +=
                            istd[i] * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                    }
                }
                if (gamma.requires_grad()) {
                    auto& gg = const_cast<Tensor&>(gamma).grad();
                    for (std::size_t j = 0; j < d; ++j)
                        gg[j] += g[i * d + j] * (x.at(i, j) - mean[i]) * istd[i];
                }
                if (beta.requires_grad()) {
                    auto& gb = const_cast<Tensor&>(beta).grad();
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                }
            }
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    const bool rg = detail::track(x);
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::from({1}, {s});
    if (rg) {
        out.set_requires_grad(true);
        Tape::active().record({x}, out, [x, out]() {
            auto& gx = const_cast<Tensor&>(x).grad();
            const double g = out.grad()[0];
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    return scale(sum_all(x), inv);
}

// Mean over the batch of -log softmax(logits)[label]. Gradient uses the
// closed form softmax(logits) - onehot(label), divided by the batch size.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    detail::require_2d(logits, "cross_entropy");
    const std::size_t b = logits.rows(), k = logits.cols();
    if (labels.size() != b)
        throw std::invalid_argument("cross_entropy: expected " + std::to_string(b) + " labels, got " +
                                    std::to_string(labels.size()));
    for (auto y : labels)
        if (y >= k)
            throw std::out_of_range("cross_entropy: label " + std::to_string(y) +
                                    " out of range [0, " + std::to_string(k) + ")");
    const bool rg = detail::track(logits);
    std::vector<double> probs(b * k);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double m = logits.at(i, 0);
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, logits.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double e = std::exp(logits.at(i, j) - m);
            probs[i * k + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
        loss += (m + std::log(z)) - logits.at(i, labels[i]);
    }
    loss /= static_cast<double>(b);
    Tensor out = Tensor::from({1}, {loss});
    if (rg) {
        out.set_requires_grad(true);
        Tape::active().record({logits}, out, [logits, out, probs, labels, b, k]() {
            auto& gl = const_cast<Tensor&>(logits).grad();
            const double g = out.grad()[0] / static_cast<double>(b);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < k; ++j)
                    gl[i * k + j] += g * (probs[i * k + j] - (labels[i] == j ? 1.0 : 0.0));
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
// into every tracked leaf. The tape is cleared afterwards.
inline void backward(Tensor& loss) {
    if (loss.numel() != 1)
        throw std::logic_error("backward: loss must be a scalar, got shape " +
                               detail::shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw std::logic_error("backward: loss is not connected to any tracked leaf");
    std::fill(loss.grad().begin(), loss.grad().end(), 0.0);
    loss.grad()[0] = 1.0;
    Tape::active().run_backward();
}

inline void zero_grads(const std::vector<Tensor>& params) {
    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
}

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
inline Tensor make_param(std::vector<std::size_t> shape, std::size_t fan_in, SeededRng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace mvft
