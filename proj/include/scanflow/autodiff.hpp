#pragma once

// Small reverse-mode automatic differentiation over dense row-major matrices.
// A Tape records values and backward closures; Vars are indices into it.

#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "scanflow/error.hpp"

namespace scanflow::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

// A trainable tensor. The gradient buffer is scratch space filled by
// Tape::backward, so it stays writable through const access.
struct Parameter {
    Matrix value;
    mutable Matrix grad;
    bool frozen = false;

    void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
};

class Tape {
public:
    // With `record == false` no backward closures are kept (inference only).
    explicit Tape(bool record = true) : record_(record) { nodes_.reserve(1024); }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Matrix v) {
        nodes_.push_back({std::move(v), nullptr, {}, {}, nullptr, false});
        return {this, nodes_.size() - 1};
    }

    Var constant(double v) {
        Matrix m(1, 1);
        m(0, 0) = v;
        return constant(std::move(m));
    }

    // Leaf referencing `p` (not copied; `p` must outlive the tape). Frozen
    // parameters and non-recording tapes yield constant leaves.
    Var param(const Parameter& p) {
        const bool rg = record_ && !p.frozen;
        nodes_.push_back({Matrix(), &p.value, {}, {}, rg ? &p : nullptr, rg});
        return {this, nodes_.size() - 1};
    }

    const Matrix& value(std::size_t id) const {
        const auto& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Gradient buffer of node `id`, zero-initialized on first use.
    Matrix& grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.size() == 0) {
            const Matrix& v = value(id);
            n.grad.setZero(v.rows(), v.cols());
        }
        return n.grad;
    }

    // Records an op result. `backward` runs only if some input needs a gradient.
    template <class Backward>
    Var push(Matrix value, std::initializer_list<std::size_t> inputs, Backward&& backward) {
        bool rg = false;
        if (record_)
            for (auto i : inputs) rg = rg || nodes_[i].requires_grad;
        nodes_.push_back({std::move(value), nullptr, {}, {}, nullptr, rg});
        if (rg) nodes_.back().backward = std::forward<Backward>(backward);
        return {this, nodes_.size() - 1};
    }

    Var push_n(Matrix value, const std::vector<Var>& inputs, std::function<void()> backward) {
        bool rg = false;
        if (record_)
            for (const auto& v : inputs) rg = rg || nodes_[v.id].requires_grad;
        nodes_.push_back({std::move(value), nullptr, {}, {}, nullptr, rg});
        if (rg) nodes_.back().backward = std::move(backward);
        return {this, nodes_.size() - 1};
    }

    // Backpropagates from a 1x1 output, accumulating into Parameter::grad.
    void backward(Var out, double seed = 1.0) {
        if (!record_) throw Error("backward on a non-recording tape");
        if (out.value().size() != 1) throw Error("backward needs a scalar output");
        if (!nodes_[out.id].requires_grad) return;
        grad(out.id)(0, 0) += seed;
        for (std::size_t i = out.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward();
            if (n.param) {
                if (n.param->grad.size() == 0) n.param->zero_grad();
                n.param->grad += n.grad;
            }
        }
    }

private:
    struct Node {
        Matrix value;
        const Matrix* external;
        Matrix grad;
        std::function<void()> backward;
        const Parameter* param;
        bool requires_grad;
    };

    bool record_;
    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

namespace detail {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw Error(std::string("shape mismatch in ") + op);
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30 ? x : (x < -30 ? std::exp(x) : std::log1p(std::exp(x))); }

inline double log_sigmoid(double x) { return -softplus(-x); }

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and shape ops. Every closure captures the output id `o`,
// which is the tape size at the moment of the push.

inline Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) throw Error("shape mismatch in matmul");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value() * b.value(), {a.id, b.id}, [&t, a = a.id, b = b.id, o] {
        const Matrix& g = t.grad(o);
        if (t.requires_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
        if (t.requires_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
    });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
    if (a.cols() != b.cols()) throw Error("shape mismatch in matmul_nt");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value() * b.value().transpose(), {a.id, b.id}, [&t, a = a.id, b = b.id, o] {
        const Matrix& g = t.grad(o);
        if (t.requires_grad(a)) t.grad(a).noalias() += g * t.value(b);
        if (t.requires_grad(b)) t.grad(b).noalias() += g.transpose() * t.value(a);
    });
}

inline Var transpose(Var a) {
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value().transpose(), {a.id}, [&t, a = a.id, o] { t.grad(a) += t.grad(o).transpose(); });
}

inline Var add(Var a, Var b) {
    detail::check_same_shape(a, b, "add");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value() + b.value(), {a.id, b.id}, [&t, a = a.id, b = b.id, o] {
        if (t.requires_grad(a)) t.grad(a) += t.grad(o);
        if (t.requires_grad(b)) t.grad(b) += t.grad(o);
    });
}

inline Var sub(Var a, Var b) {
    detail::check_same_shape(a, b, "sub");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value() - b.value(), {a.id, b.id}, [&t, a = a.id, b = b.id, o] {
        if (t.requires_grad(a)) t.grad(a) += t.grad(o);
        if (t.requires_grad(b)) t.grad(b) -= t.grad(o);
    });
}

// Elementwise product.
inline Var cmul(Var a, Var b) {
    detail::check_same_shape(a, b, "cmul");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value().cwiseProduct(b.value()), {a.id, b.id}, [&t, a = a.id, b = b.id, o] {
        if (t.requires_grad(a)) t.grad(a) += t.grad(o).cwiseProduct(t.value(b));
        if (t.requires_grad(b)) t.grad(b) += t.grad(o).cwiseProduct(t.value(a));
    });
}

// Elementwise quotient.
inline Var cdiv(Var a, Var b) {
    detail::check_same_shape(a, b, "cdiv");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value().cwiseQuotient(b.value()), {a.id, b.id}, [&t, a = a.id, b = b.id, o] {
        const Matrix& g = t.grad(o);
        if (t.requires_grad(a)) t.grad(a) += g.cwiseQuotient(t.value(b));
        if (t.requires_grad(b))
            t.grad(b).array() -= g.array() * t.value(o).array() / t.value(b).array();
    });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value() * s, {a.id}, [&t, a = a.id, o, s] { t.grad(a) += t.grad(o) * s; });
}

inline Var add_scalar(Var a, double s) {
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    Matrix v = a.value().array() + s;
    return t.push(std::move(v), {a.id}, [&t, a = a.id, o] { t.grad(a) += t.grad(o); });
}

// a (n x m) + row (1 x m) broadcast over rows.
inline Var add_row(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw Error("shape mismatch in add_row");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    Matrix v = a.value().rowwise() + row.value().row(0);
    return t.push(std::move(v), {a.id, row.id}, [&t, a = a.id, r = row.id, o] {
        const Matrix& g = t.grad(o);
        if (t.requires_grad(a)) t.grad(a) += g;
        if (t.requires_grad(r)) t.grad(r) += g.colwise().sum();
    });
}

// x W + b with W (in x out) and b (1 x out).
inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

inline Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n) {
    if (r0 < 0 || n < 0 || r0 + n > a.rows()) throw Error("slice_rows out of range");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value().middleRows(r0, n), {a.id},
                  [&t, a = a.id, o, r0, n] { t.grad(a).middleRows(r0, n) += t.grad(o); });
}

inline Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n) {
    if (c0 < 0 || n < 0 || c0 + n > a.cols()) throw Error("slice_cols out of range");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value().middleCols(c0, n), {a.id},
                  [&t, a = a.id, o, c0, n] { t.grad(a).middleCols(c0, n) += t.grad(o); });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error("concat_rows of nothing");
    Tape& t = *parts.front().tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw Error("shape mismatch in concat_rows");
        rows += p.rows();
    }
    Matrix v(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        v.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    const std::size_t o = t.size();
    std::vector<std::size_t> ids;
    for (const auto& p : parts) ids.push_back(p.id);
    return t.push_n(std::move(v), parts, [&t, ids, o] {
        Eigen::Index r = 0;
        for (auto id : ids) {
            const auto n = t.value(id).rows();
            if (t.requires_grad(id)) t.grad(id) += t.grad(o).middleRows(r, n);
            r += n;
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error("concat_cols of nothing");
    Tape& t = *parts.front().tape;
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    for (const auto& p : parts) {
        if (p.rows() != rows) throw Error("shape mismatch in concat_cols");
        cols += p.cols();
    }
    Matrix v(rows, cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        v.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    const std::size_t o = t.size();
    std::vector<std::size_t> ids;
    for (const auto& p : parts) ids.push_back(p.id);
    return t.push_n(std::move(v), parts, [&t, ids, o] {
        Eigen::Index c = 0;
        for (auto id : ids) {
            const auto n = t.value(id).cols();
            if (t.requires_grad(id)) t.grad(id) += t.grad(o).middleCols(c, n);
            c += n;
        }
    });
}

// Row-major reshape.
inline Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != a.value().size()) throw Error("reshape size mismatch");
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    Matrix v = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
    return t.push(std::move(v), {a.id}, [&t, a = a.id, o] {
        auto& ga = t.grad(a);
        ga += Eigen::Map<const Matrix>(t.grad(o).data(), ga.rows(), ga.cols());
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    return t.push(std::move(v), {a.id}, [&t, a = a.id, o] { t.grad(a).array() += t.grad(o)(0, 0); });
}

// n x m -> n x 1
inline Var row_sum(Var a) {
    Tape& t = *a.tape;
    const std::size_t o = t.size();
    return t.push(a.value().rowwise().sum(), {a.id},
                  [&t, a = a.id, o] { t.grad(a).colwise() += t.grad(o).col(0); });
}

// Stable log(sum(exp(row))) per row: n x m -> n x 1
inline Var logsumexp_rows(Var a) {
    Tape& t = *a.tape;
    const auto& x = a.value();
    Matrix v(x.rows(), 1);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        v(r, 0) = std::isinf(m) ? m : m + std::log((x.row(r).array() - m).exp().sum());
    }
    const std::size_t o = t.size();
    return t.push(std::move(v), {a.id}, [&t, a = a.id, o] {
        const auto& x = t.value(a);
        const auto& y = t.value(o);
        const auto& g = t.grad(o);
        auto& ga = t.grad(a);
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            ga.row(r).array() += g(r, 0) * (x.row(r).array() - y(r, 0)).exp();
    });
}

// Row-wise softmax; -inf entries get probability 0.
inline Var softmax_rows(Var a) {
    Tape& t = *a.tape;
    const auto& x = a.value();
    Matrix v(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        v.row(r) = (x.row(r).array() - m).exp();
        v.row(r) /= v.row(r).sum();
    }
    const std::size_t o = t.size();
    return t.push(std::move(v), {a.id}, [&t, a = a.id, o] {
        const auto& y = t.value(o);
        const auto& g = t.grad(o);
        auto& ga = t.grad(a);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const double dot = g.row(r).dot(y.row(r));
            ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
        }
    });
}

inline Var log_softmax_rows(Var a) {
    Tape& t = *a.tape;
    const auto& x = a.value();
    Matrix v(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        const double lse = m + std::log((x.row(r).array() - m).exp().sum());
        v.row(r).array() = x.row(r).array() - lse;
    }
    const std::size_t o = t.size();
    return t.push(std::move(v), {a.id}, [&t, a = a.id, o] {
        const auto& y = t.value(o);
        const auto& g = t.grad(o);
        auto& ga = t.grad(a);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const double gs = g.row(r).sum();
            ga.row(r).array() += g.row(r).array() - y.row(r).array().exp() * gs;
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

namespace detail {

template <class F, class DF>
Var unary(Var a, F f, DF df) {
    Tape& t = *a.tape;
    Matrix v = a.value().unaryExpr(f);
    const std::size_t o = t.size();
    return t.push(std::move(v), {a.id}, [&t, a = a.id, o, df] {
        const auto& x = t.value(a);
        const auto& y = t.value(o);
        const auto& g = t.grad(o);
        auto& ga = t.grad(a);
        for (Eigen::Index i = 0; i < x.size(); ++i) ga.data()[i] += g.data()[i] * df(x.data()[i], y.data()[i]);
    });
}

} // namespace detail

inline Var exp(Var a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(Var a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var tanh(Var a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var a) {
    return detail::unary(a, detail::sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(Var a) {
    return detail::unary(a, detail::softplus, [](double x, double) { return detail::sigmoid(x); });
}

inline Var log_sigmoid(Var a) {
    return detail::unary(a, detail::log_sigmoid, [](double x, double) { return detail::sigmoid(-x); });
}

// GELU, tanh approximation.
inline Var gelu(Var a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return detail::unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
        [](double x, double) {
            const double u = c * (x + 0.044715 * x * x * x);
            const double th = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
}

// Per-row layer normalization followed by gamma/beta (both 1 x m).
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 || beta.cols() != x.cols())
        throw Error("shape mismatch in layer_norm");
    Tape& t = *x.tape;
    const auto& xv = x.value();
    const Eigen::Index n = xv.rows(), m = xv.cols();
    Matrix xhat(n, m);
    std::vector<double> inv_std(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mu = xv.row(r).mean();
        const double var = (xv.row(r).array() - mu).square().mean();
        inv_std[static_cast<std::size_t>(r)] = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mu) * inv_std[static_cast<std::size_t>(r)];
    }
    Matrix v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    const std::size_t o = t.size();
    return t.push(std::move(v), {x.id, gamma.id, beta.id},
                  [&t, xi = x.id, gi = gamma.id, bi = beta.id, o, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)] {
                      const auto& g = t.grad(o);
                      if (t.requires_grad(gi)) t.grad(gi) += g.cwiseProduct(xhat).colwise().sum();
                      if (t.requires_grad(bi)) t.grad(bi) += g.colwise().sum();
                      if (t.requires_grad(xi)) {
                          const auto& gamma_v = t.value(gi);
                          auto& gx = t.grad(xi);
                          const double m = static_cast<double>(xhat.cols());
                          for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                              const RowVector dxhat = g.row(r).cwiseProduct(gamma_v.row(0));
                              const double s1 = dxhat.sum();
                              const double s2 = dxhat.dot(xhat.row(r));
                              gx.row(r).array() += inv_std[static_cast<std::size_t>(r)] / m *
                                                   (m * dxhat.array() - s1 - xhat.row(r).array() * s2);
                          }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Parameter collections

// Named parameters in sorted order (the order checkpoints are written in).
class ParameterSet {
public:
    Parameter& add(const std::string& name, Matrix init) {
        auto [it, inserted] = params_.emplace(name, Parameter{std::move(init), Matrix(), false});
        if (!inserted) throw Error("duplicate parameter '" + name + "'");
        it->second.zero_grad();
        return it->second;
    }

    Parameter& operator[](const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
        return it->second;
    }
    const Parameter& operator[](const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    void erase(const std::string& name) { params_.erase(name); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    void zero_grad() const {
        for (const auto& [_, p] : params_) p.zero_grad();
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
        return n;
    }

private:
    std::map<std::string, Parameter> params_;
};

} // namespace scanflow::ad
