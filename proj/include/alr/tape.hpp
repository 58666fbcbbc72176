#pragma once

// Reverse-mode differentiation tape over 2-D tensors.
//
// Every backward rule is written in terms of recorded ops, so adjoints can
// themselves be recorded (grad_graph) and differentiated again. This is what
// the gradient-norm penalties need.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "alr/error.hpp"
#include "alr/tensor.hpp"

namespace alr {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] Tape* tape() const noexcept { return tape_; }
    [[nodiscard]] std::size_t id() const noexcept { return id_; }
    [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }
    [[nodiscard]] bool requires_grad() const;
    [[nodiscard]] std::size_t rows() const { return value().rows(); }
    [[nodiscard]] std::size_t cols() const { return value().cols(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Receives the adjoint of a node's output and returns one adjoint per parent
/// (an invalid Var where the parent is not wanted).
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out, const std::vector<bool>& want)>;

struct TapeNode {
    Tensor value;
    const char* kind = "leaf";
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value) { return push_leaf(std::move(value), false); }
    Var variable(Tensor value) { return push_leaf(std::move(value), true); }

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
    [[nodiscard]] const TapeNode& node(std::size_t id) const { return nodes_.at(id); }

    /// Drop every node recorded after `mark`. Vars past the mark become dangling.
    void rewind(std::size_t mark)
    {
        if (mark < nodes_.size()) nodes_.resize(mark);
    }

    void clear() { nodes_.clear(); }

    [[nodiscard]] bool recording() const noexcept { return recording_; }

    /// True when an op over these parents must record a backward rule.
    [[nodiscard]] bool tracks(std::initializer_list<Var> parents) const
    {
        if (!recording_) return false;
        return std::any_of(parents.begin(), parents.end(),
                           [this](const Var& p) { return nodes_[p.id()].requires_grad; });
    }

    Var push(const char* kind, Tensor value, std::vector<std::size_t> parents, BackwardFn backward)
    {
        TapeNode node;
        node.value = std::move(value);
        node.kind = kind;
        if (backward) {
            node.parents = std::move(parents);
            node.backward = std::move(backward);
            node.requires_grad = true;
        }
        nodes_.push_back(std::move(node));
        return Var(this, nodes_.size() - 1);
    }

    void check(const Var& v, const char* op) const
    {
        if (v.tape() != this || v.id() >= nodes_.size()) {
            throw Error(ErrorKind::not_on_tape, std::string(op) + ": variable is not on this tape");
        }
    }

    /// Gradients of scalar `output` with respect to `wrt`, as plain tensors.
    /// Nodes created while differentiating are discarded afterwards.
    std::vector<Tensor> grad(const Var& output, std::span<const Var> wrt)
    {
        const std::size_t mark = nodes_.size();
        const bool saved = recording_;
        recording_ = false;
        std::vector<Tensor> out;
        try {
            std::vector<Var> adj = backprop(output, wrt);
            out.reserve(adj.size());
            for (const Var& a : adj) out.push_back(a.value());
        } catch (...) {
            recording_ = saved;
            rewind(mark);
            throw;
        }
        recording_ = saved;
        rewind(mark);
        return out;
    }

    std::vector<Tensor> grad(const Var& output, std::initializer_list<Var> wrt)
    {
        return grad(output, std::span<const Var>(wrt.begin(), wrt.size()));
    }

    /// Gradients recorded on the tape, so they can be differentiated again.
    std::vector<Var> grad_graph(const Var& output, std::span<const Var> wrt) { return backprop(output, wrt); }

    std::vector<Var> grad_graph(const Var& output, std::initializer_list<Var> wrt)
    {
        return grad_graph(output, std::span<const Var>(wrt.begin(), wrt.size()));
    }

    /// Suspends recording of backward rules for its lifetime.
    class NoGrad {
    public:
        explicit NoGrad(Tape& tape) : tape_(tape), saved_(tape.recording_) { tape.recording_ = false; }
        ~NoGrad() { tape_.recording_ = saved_; }
        NoGrad(const NoGrad&) = delete;
        NoGrad& operator=(const NoGrad&) = delete;

    private:
        Tape& tape_;
        bool saved_;
    };

    /// Re-enables recording for its lifetime, e.g. inside a NoGrad region.
    class ForceGrad {
    public:
        explicit ForceGrad(Tape& tape) : tape_(tape), saved_(tape.recording_) { tape.recording_ = true; }
        ~ForceGrad() { tape_.recording_ = saved_; }
        ForceGrad(const ForceGrad&) = delete;
        ForceGrad& operator=(const ForceGrad&) = delete;

    private:
        Tape& tape_;
        bool saved_;
    };

private:
    Var push_leaf(Tensor value, bool requires_grad)
    {
        TapeNode node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return Var(this, nodes_.size() - 1);
    }

    std::vector<Var> backprop(const Var& output, std::span<const Var> wrt);

    std::deque<TapeNode> nodes_;
    bool recording_ = true;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

// ---------------------------------------------------------------------------
// Value-level kernels.

namespace detail {

inline void require_same_tape(const Var& a, const Var& b, const char* op)
{
    if (a.tape() != b.tape() || a.tape() == nullptr) {
        throw Error(ErrorKind::not_on_tape, std::string(op) + ": operands live on different tapes");
    }
}

inline std::string shapes(const Tensor& a, const Tensor& b) { return a.shape_str() + " and " + b.shape_str(); }

inline std::size_t broadcast_extent(std::size_t a, std::size_t b, const char* op, const Tensor& x, const Tensor& y)
{
    if (a == b || b == 1) return a;
    if (a == 1) return b;
    throw Error(ErrorKind::shape, std::string(op) + ": cannot broadcast " + shapes(x, y));
}

template <typename F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* op, F&& f)
{
    const std::size_t r = broadcast_extent(a.rows(), b.rows(), op, a, b);
    const std::size_t c = broadcast_extent(a.cols(), b.cols(), op, a, b);
    Tensor out = Tensor::zeros(r, c);
    auto o = out.mutable_data();
    const auto ad = a.data();
    const auto bd = b.data();
    if (a.rows() == r && a.cols() == c && b.rows() == r && b.cols() == c) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(ad[i], bd[i]);
        return out;
    }
    const std::size_t ars = a.rows() == 1 ? 0 : a.cols();
    const std::size_t acs = a.cols() == 1 ? 0 : 1;
    const std::size_t brs = b.rows() == 1 ? 0 : b.cols();
    const std::size_t bcs = b.cols() == 1 ? 0 : 1;
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            o[i * c + j] = f(ad[i * ars + j * acs], bd[i * brs + j * bcs]);
        }
    }
    return out;
}

template <typename F>
Tensor map(const Tensor& a, F&& f)
{
    Tensor out({a.rows(), a.cols()}, a.values());
    for (double& v : out.mutable_data()) v = f(v);
    return out;
}

/// C = op(A) op(B) where op transposes when the flag is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb)
{
    const std::size_t m = ta ? a.cols() : a.rows();
    const std::size_t ka = ta ? a.rows() : a.cols();
    const std::size_t kb = tb ? b.cols() : b.rows();
    const std::size_t n = tb ? b.rows() : b.cols();
    if (ka != kb) {
        throw Error(ErrorKind::shape, std::string("matmul: inner dimensions differ for ") + shapes(a, b) +
                                          (ta ? " (lhs transposed)" : "") + (tb ? " (rhs transposed)" : ""));
    }
    Tensor out = Tensor::zeros(m, n);
    if (m == 0 || n == 0 || ka == 0) return out;
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMajor> A(a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    Eigen::Map<const RowMajor> B(b.data().data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    Eigen::Map<RowMajor> C(out.mutable_data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
    return out;
}

/// Sum `x` down to (rows, cols), each of which is either x's extent or 1.
inline Tensor sum_to(const Tensor& x, std::size_t rows, std::size_t cols)
{
    if ((rows != x.rows() && rows != 1) || (cols != x.cols() && cols != 1)) {
        throw Error(ErrorKind::shape, "sum_to: cannot reduce " + x.shape_str() + " to (" + std::to_string(rows) +
                                          "," + std::to_string(cols) + ")");
    }
    if (rows == x.rows() && cols == x.cols()) return Tensor({rows, cols}, x.values());
    Tensor out = Tensor::zeros(rows, cols);
    auto o = out.mutable_data();
    const auto d = x.data();
    const std::size_t C = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < C; ++j) {
            o[(rows == 1 ? 0 : i) * cols + (cols == 1 ? 0 : j)] += d[i * C + j];
        }
    }
    return out;
}

inline Tensor broadcast_to(const Tensor& x, std::size_t rows, std::size_t cols)
{
    if ((x.rows() != rows && x.rows() != 1) || (x.cols() != cols && x.cols() != 1)) {
        throw Error(ErrorKind::shape, "broadcast_to: cannot expand " + x.shape_str() + " to (" +
                                          std::to_string(rows) + "," + std::to_string(cols) + ")");
    }
    return broadcast_binary(x, Tensor::zeros(rows, cols), "broadcast_to", [](double a, double) { return a; });
}

inline Tensor log_softmax_rows(const Tensor& x)
{
    Tensor out({x.rows(), x.cols()}, x.values());
    auto d = out.mutable_data();
    const std::size_t C = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double* row = d.data() + i * C;
        const double mx = *std::max_element(row, row + C);
        double s = 0.0;
        for (std::size_t j = 0; j < C; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < C; ++j) row[j] -= lse;
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Recorded ops. Binary elementwise ops broadcast rows and/or columns of
// extent 1.

Var sum_to(const Var& x, std::size_t rows, std::size_t cols);
Var broadcast_to(const Var& x, std::size_t rows, std::size_t cols);

inline Var reduce_like(const Var& g, const Tensor& like) { return sum_to(g, like.rows(), like.cols()); }

inline Var scale(const Var& x, double s)
{
    Tape& t = *x.tape();
    Tensor v = detail::map(x.value(), [s](double a) { return a * s; });
    if (!t.tracks({x})) return t.push("scale", std::move(v), {}, {});
    return t.push("scale", std::move(v), {x.id()},
                  [s](const Var& g, const std::vector<bool>&) { return std::vector<Var>{scale(g, s)}; });
}

inline Var shift(const Var& x, double s)
{
    Tape& t = *x.tape();
    Tensor v = detail::map(x.value(), [s](double a) { return a + s; });
    if (!t.tracks({x})) return t.push("shift", std::move(v), {}, {});
    return t.push("shift", std::move(v), {x.id()},
                  [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{g}; });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

inline Var add(const Var& a, const Var& b)
{
    detail::require_same_tape(a, b, "add");
    Tape& t = *a.tape();
    Tensor v = detail::broadcast_binary(a.value(), b.value(), "add", [](double x, double y) { return x + y; });
    if (!t.tracks({a, b})) return t.push("add", std::move(v), {}, {});
    return t.push("add", std::move(v), {a.id(), b.id()}, [a, b](const Var& g, const std::vector<bool>& want) {
        return std::vector<Var>{want[0] ? reduce_like(g, a.value()) : Var{},
                                want[1] ? reduce_like(g, b.value()) : Var{}};
    });
}

inline Var sub(const Var& a, const Var& b)
{
    detail::require_same_tape(a, b, "sub");
    Tape& t = *a.tape();
    Tensor v = detail::broadcast_binary(a.value(), b.value(), "sub", [](double x, double y) { return x - y; });
    if (!t.tracks({a, b})) return t.push("sub", std::move(v), {}, {});
    return t.push("sub", std::move(v), {a.id(), b.id()}, [a, b](const Var& g, const std::vector<bool>& want) {
        return std::vector<Var>{want[0] ? reduce_like(g, a.value()) : Var{},
                                want[1] ? reduce_like(neg(g), b.value()) : Var{}};
    });
}

inline Var mul(const Var& a, const Var& b)
{
    detail::require_same_tape(a, b, "mul");
    Tape& t = *a.tape();
    Tensor v = detail::broadcast_binary(a.value(), b.value(), "mul", [](double x, double y) { return x * y; });
    if (!t.tracks({a, b})) return t.push("mul", std::move(v), {}, {});
    return t.push("mul", std::move(v), {a.id(), b.id()}, [a, b](const Var& g, const std::vector<bool>& want) {
        return std::vector<Var>{want[0] ? reduce_like(mul(g, b), a.value()) : Var{},
                                want[1] ? reduce_like(mul(g, a), b.value()) : Var{}};
    });
}

/// Elementwise quotient. A zero denominator yields 0 (also in the backward
/// rules), which makes norms and ratios safe at their degenerate points.
inline Var div(const Var& a, const Var& b)
{
    detail::require_same_tape(a, b, "div");
    Tape& t = *a.tape();
    Tensor v = detail::broadcast_binary(a.value(), b.value(), "div",
                                        [](double x, double y) { return y == 0.0 ? 0.0 : x / y; });
    if (!t.tracks({a, b})) return t.push("div", std::move(v), {}, {});
    const std::size_t self = t.size();
    return t.push("div", std::move(v), {a.id(), b.id()},
                  [a, b, self](const Var& g, const std::vector<bool>& want) {
                      Var gb = div(g, b);
                      Var y(a.tape(), self);
                      return std::vector<Var>{want[0] ? reduce_like(gb, a.value()) : Var{},
                                              want[1] ? reduce_like(neg(mul(gb, y)), b.value()) : Var{}};
                  });
}

/// Multiplication by a recorded constant mask; used by piecewise-linear ops.
inline Var mul_const(const Var& x, Tensor mask, const char* kind)
{
    Tape& t = *x.tape();
    Tensor v = detail::broadcast_binary(x.value(), mask, kind, [](double a, double m) { return a * m; });
    if (!t.tracks({x})) return t.push(kind, std::move(v), {}, {});
    return t.push(kind, std::move(v), {x.id()}, [m = std::move(mask), kind](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul_const(g, m, kind)};
    });
}

inline Var relu(const Var& x)
{
    Tape& t = *x.tape();
    Tensor v = detail::map(x.value(), [](double a) { return a > 0.0 ? a : 0.0; });
    if (!t.tracks({x})) return t.push("relu", std::move(v), {}, {});
    // Subgradient at 0 is 0.
#ifdef ALR_INJECT_RELU_SIGN_BUG
    Tensor mask = detail::map(x.value(), [](double a) { return a > 0.0 ? -1.0 : 0.0; });
#else
    Tensor mask = detail::map(x.value(), [](double a) { return a > 0.0 ? 1.0 : 0.0; });
#endif
    return t.push("relu", std::move(v), {x.id()}, [m = std::move(mask)](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul_const(g, m, "relu_grad")};
    });
}

inline Var abs(const Var& x)
{
    Tape& t = *x.tape();
    Tensor v = detail::map(x.value(), [](double a) { return std::fabs(a); });
    if (!t.tracks({x})) return t.push("abs", std::move(v), {}, {});
    Tensor sign = detail::map(x.value(), [](double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); });
    return t.push("abs", std::move(v), {x.id()}, [m = std::move(sign)](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul_const(g, m, "abs_grad")};
    });
}

inline Var clamp(const Var& x, double lo, double hi)
{
    Tape& t = *x.tape();
    Tensor v = detail::map(x.value(), [lo, hi](double a) { return std::clamp(a, lo, hi); });
    if (!t.tracks({x})) return t.push("clamp", std::move(v), {}, {});
    Tensor mask = detail::map(x.value(), [lo, hi](double a) { return (a >= lo && a <= hi) ? 1.0 : 0.0; });
    return t.push("clamp", std::move(v), {x.id()}, [m = std::move(mask)](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul_const(g, m, "clamp_grad")};
    });
}

inline Var exp(const Var& x)
{
    Tape& t = *x.tape();
    Tensor v = detail::map(x.value(), [](double a) { return std::exp(a); });
    if (!t.tracks({x})) return t.push("exp", std::move(v), {}, {});
    const std::size_t self = t.size();
    return t.push("exp", std::move(v), {x.id()}, [x, self](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, Var(x.tape(), self))};
    });
}

inline Var log(const Var& x)
{
    Tape& t = *x.tape();
    for (double a : x.value().data()) {
        if (!(a > 0.0)) throw Error(ErrorKind::domain, "log of nonpositive value " + std::to_string(a));
    }
    Tensor v = detail::map(x.value(), [](double a) { return std::log(a); });
    if (!t.tracks({x})) return t.push("log", std::move(v), {}, {});
    return t.push("log", std::move(v), {x.id()},
                  [x](const Var& g, const std::vector<bool>&) { return std::vector<Var>{div(g, x)}; });
}

inline Var square(const Var& x)
{
    Tape& t = *x.tape();
    Tensor v = detail::map(x.value(), [](double a) { return a * a; });
    if (!t.tracks({x})) return t.push("square", std::move(v), {}, {});
    return t.push("square", std::move(v), {x.id()}, [x](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, scale(x, 2.0))};
    });
}

inline Var sqrt(const Var& x)
{
    Tape& t = *x.tape();
    for (double a : x.value().data()) {
        if (a < 0.0) throw Error(ErrorKind::domain, "sqrt of negative value " + std::to_string(a));
    }
    Tensor v = detail::map(x.value(), [](double a) { return std::sqrt(a); });
    if (!t.tracks({x})) return t.push("sqrt", std::move(v), {}, {});
    const std::size_t self = t.size();
    return t.push("sqrt", std::move(v), {x.id()}, [x, self](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{div(g, scale(Var(x.tape(), self), 2.0))};
    });
}

inline Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false)
{
    detail::require_same_tape(a, b, "matmul");
    Tape& t = *a.tape();
    Tensor v = detail::matmul(a.value(), b.value(), ta, tb);
    if (!t.tracks({a, b})) return t.push("matmul", std::move(v), {}, {});
    return t.push("matmul", std::move(v), {a.id(), b.id()},
                  [a, b, ta, tb](const Var& g, const std::vector<bool>& want) {
                      Var ga, gb;
                      if (!ta && !tb) {
                          if (want[0]) ga = matmul(g, b, false, true);
                          if (want[1]) gb = matmul(a, g, true, false);
                      } else if (!ta && tb) {
                          if (want[0]) ga = matmul(g, b, false, false);
                          if (want[1]) gb = matmul(g, a, true, false);
                      } else if (ta && !tb) {
                          if (want[0]) ga = matmul(b, g, false, true);
                          if (want[1]) gb = matmul(a, g, false, false);
                      } else {
                          if (want[0]) ga = matmul(b, g, true, true);
                          if (want[1]) gb = matmul(g, a, true, true);
                      }
                      return std::vector<Var>{ga, gb};
                  });
}

inline Var sum_to(const Var& x, std::size_t rows, std::size_t cols)
{
    Tape& t = *x.tape();
    if (rows == x.rows() && cols == x.cols()) return x;
    Tensor v = detail::sum_to(x.value(), rows, cols);
    if (!t.tracks({x})) return t.push("sum", std::move(v), {}, {});
    const std::size_t r = x.rows(), c = x.cols();
    return t.push("sum", std::move(v), {x.id()}, [r, c](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{broadcast_to(g, r, c)};
    });
}

inline Var broadcast_to(const Var& x, std::size_t rows, std::size_t cols)
{
    Tape& t = *x.tape();
    if (rows == x.rows() && cols == x.cols()) return x;
    Tensor v = detail::broadcast_to(x.value(), rows, cols);
    if (!t.tracks({x})) return t.push("broadcast", std::move(v), {}, {});
    const std::size_t r = x.rows(), c = x.cols();
    return t.push("broadcast", std::move(v), {x.id()}, [r, c](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{sum_to(g, r, c)};
    });
}

/// Sum of all entries, as a 1x1 value.
inline Var sum(const Var& x) { return sum_to(x, 1, 1); }

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Per-row sums (B x 1).
inline Var row_sum(const Var& x) { return sum_to(x, x.rows(), 1); }

/// Column means over the batch (1 x C).
inline Var col_mean(const Var& x) { return scale(sum_to(x, 1, x.cols()), 1.0 / static_cast<double>(x.rows())); }

/// Euclidean norm of each row (B x 1). The gradient at a zero row is zero.
inline Var l2norm(const Var& x)
{
    Tape& t = *x.tape();
    Tensor v = Tensor::column(row_norms(x.value()));
    if (!t.tracks({x})) return t.push("l2norm", std::move(v), {}, {});
    const std::size_t self = t.size();
    return t.push("l2norm", std::move(v), {x.id()}, [x, self](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, div(x, Var(x.tape(), self)))};
    });
}

inline Var log_softmax(const Var& x)
{
    Tape& t = *x.tape();
    Tensor v = detail::log_softmax_rows(x.value());
    if (!t.tracks({x})) return t.push("log_softmax", std::move(v), {}, {});
    const std::size_t self = t.size();
    return t.push("log_softmax", std::move(v), {x.id()}, [x, self](const Var& g, const std::vector<bool>&) {
        Var y(x.tape(), self);
        return std::vector<Var>{sub(g, mul(exp(y), row_sum(g)))};
    });
}

inline Var softmax(const Var& x) { return exp(log_softmax(x)); }

Var slice_rows(const Var& x, std::size_t begin, std::size_t count);

/// Embed `x` at row offset `begin` of a zero matrix with `total` rows.
inline Var pad_rows(const Var& x, std::size_t begin, std::size_t total)
{
    Tape& t = *x.tape();
    if (begin + x.rows() > total) {
        throw Error(ErrorKind::shape, "pad_rows: " + x.value().shape_str() + " at row " + std::to_string(begin) +
                                          " exceeds " + std::to_string(total) + " rows");
    }
    Tensor v = Tensor::zeros(total, x.cols());
    std::copy(x.value().data().begin(), x.value().data().end(), v.mutable_data().begin() + begin * x.cols());
    if (!t.tracks({x})) return t.push("pad_rows", std::move(v), {}, {});
    const std::size_t n = x.rows();
    return t.push("pad_rows", std::move(v), {x.id()}, [begin, n](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{slice_rows(g, begin, n)};
    });
}

inline Var slice_rows(const Var& x, std::size_t begin, std::size_t count)
{
    Tape& t = *x.tape();
    if (count == 0 || begin + count > x.rows()) {
        throw Error(ErrorKind::shape, "slice_rows: rows [" + std::to_string(begin) + "," +
                                          std::to_string(begin + count) + ") of " + x.value().shape_str());
    }
    const std::size_t c = x.cols();
    std::vector<double> data(x.value().data().begin() + begin * c, x.value().data().begin() + (begin + count) * c);
    Tensor v({count, c}, std::move(data));
    if (!t.tracks({x})) return t.push("slice_rows", std::move(v), {}, {});
    const std::size_t total = x.rows();
    return t.push("slice_rows", std::move(v), {x.id()}, [begin, total](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{pad_rows(g, begin, total)};
    });
}

inline Var concat_rows(const Var& a, const Var& b)
{
    detail::require_same_tape(a, b, "concat_rows");
    Tape& t = *a.tape();
    Tensor v = concat_rows(a.value(), b.value());
    if (!t.tracks({a, b})) return t.push("concat_rows", std::move(v), {}, {});
    const std::size_t na = a.rows(), nb = b.rows();
    return t.push("concat_rows", std::move(v), {a.id(), b.id()},
                  [na, nb](const Var& g, const std::vector<bool>& want) {
                      return std::vector<Var>{want[0] ? slice_rows(g, 0, na) : Var{},
                                              want[1] ? slice_rows(g, na, nb) : Var{}};
                  });
}

/// Same value, no gradient path.
inline Var stop_gradient(const Var& x) { return x.tape()->constant(x.value()); }

/// x W + b with W of shape (in, out) and b of shape (1, out).
inline Var affine(const Var& x, const Var& w, const Var& b) { return add(matmul(x, w), b); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator+(const Var& a, double s) { return shift(a, s); }
inline Var operator-(const Var& a, double s) { return shift(a, -s); }

// ---------------------------------------------------------------------------

inline std::vector<Var> Tape::backprop(const Var& output, std::span<const Var> wrt)
{
    check(output, "grad");
    if (output.value().size() != 1) {
        throw Error(ErrorKind::shape, "grad: output must be scalar, got " + output.value().shape_str());
    }
    const std::size_t out_id = output.id();
    std::size_t lowest = out_id;
    std::vector<char> is_target(out_id + 1, 0);
    for (const Var& w : wrt) {
        check(w, "grad");
        if (w.id() <= out_id) {
            is_target[w.id()] = 1;
            lowest = std::min(lowest, w.id());
        }
    }

    // Nodes on some path from a target to the output.
    std::vector<char> needed(out_id + 1, 0);
    for (std::size_t i = lowest; i <= out_id; ++i) {
        if (is_target[i]) {
            needed[i] = 1;
            continue;
        }
        const TapeNode& n = nodes_[i];
        for (std::size_t p : n.parents) {
            if (p >= lowest && needed[p]) {
                needed[i] = 1;
                break;
            }
        }
    }

    std::vector<std::optional<Var>> adjoint(out_id + 1);
    if (needed[out_id]) {
        const Tensor& ov = output.value();
        adjoint[out_id] = constant(Tensor::full(ov.rows(), ov.cols(), 1.0));
    }

    for (std::size_t i = out_id + 1; i-- > lowest;) {
        if (!adjoint[i]) continue;
        const TapeNode& n = nodes_[i];
        if (!n.backward) continue;
        std::vector<bool> want(n.parents.size());
        bool any = false;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
            want[k] = n.parents[k] >= lowest && needed[n.parents[k]];
            any = any || want[k];
        }
        if (!any) continue;
        // Deque references survive the pushes made by the rule.
        const std::vector<std::size_t>& parents = n.parents;
        std::vector<Var> grads = n.backward(*adjoint[i], want);
        for (std::size_t k = 0; k < parents.size(); ++k) {
            if (!want[k] || !grads[k].valid()) continue;
            auto& slot = adjoint[parents[k]];
            slot = slot ? add(*slot, grads[k]) : grads[k];
        }
    }

    std::vector<Var> result;
    result.reserve(wrt.size());
    for (const Var& w : wrt) {
        if (w.id() <= out_id && adjoint[w.id()]) {
            result.push_back(*adjoint[w.id()]);
        } else {
            const Tensor& wv = w.value();
            result.push_back(constant(Tensor::zeros(wv.rows(), wv.cols())));
        }
    }
    return result;
}

} // namespace alr
