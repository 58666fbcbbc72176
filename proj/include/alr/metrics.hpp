#pragma once

#include <cmath>
#include <string>

#include "alr/error.hpp"
#include "alr/tape.hpp"

namespace alr {

enum class InputMetric { euclidean };

enum class OutputMetric {
    abs_diff,           // |a - b| for scalar outputs
    euclidean,          // ||a - b||_2
    kl,                 // KL(a || b) for probability rows
    mean_squared_logit, // mean_j (a_j - b_j)^2
};

inline const char* to_string(OutputMetric m)
{
    switch (m) {
    case OutputMetric::abs_diff: return "abs-diff";
    case OutputMetric::euclidean: return "euclidean";
    case OutputMetric::kl: return "kl";
    case OutputMetric::mean_squared_logit: return "msq-logit";
    }
    return "?";
}

inline OutputMetric output_metric_from_string(const std::string& s)
{
    if (s == "abs-diff" || s == "abs") return OutputMetric::abs_diff;
    if (s == "euclidean") return OutputMetric::euclidean;
    if (s == "kl") return OutputMetric::kl;
    if (s == "msq-logit" || s == "mean-squared-logit") return OutputMetric::mean_squared_logit;
    throw Error(ErrorKind::config, "unknown output metric '" + s + "'");
}

struct MetricPair {
    InputMetric dx = InputMetric::euclidean;
    OutputMetric dy = OutputMetric::abs_diff;
};

inline constexpr double kKlFloor = 1e-12;

namespace detail {

inline void check_pair_shapes(const Var& a, const Var& b, const char* op)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorKind::shape, std::string(op) + ": " + detail::shapes(a.value(), b.value()));
    }
}

inline void check_simplex(const Tensor& p)
{
    for (std::size_t r = 0; r < p.rows(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) {
            const double v = p(r, j);
            if (!(v > 0.0)) throw Error(ErrorKind::domain, "kl: nonpositive probability " + std::to_string(v));
            s += v;
        }
        if (std::fabs(s - 1.0) > 1e-9) throw Error(ErrorKind::domain, "kl: row does not sum to 1");
    }
}

/// Clamp to [1e-12, 1] and renormalize each row.
inline Var clamp_renormalize(const Var& p)
{
    Var c = clamp(p, kKlFloor, 1.0);
    return div(c, row_sum(c));
}

} // namespace detail

/// d_X between rows of two point batches.
inline Var input_distance(const MetricPair&, const Var& x, const Var& y)
{
    detail::check_pair_shapes(x, y, "input_distance");
    return l2norm(sub(x, y));
}

/// d_Y between rows of `a` and `b`, one value per row (B x 1).
inline Var dist(const MetricPair& pair, const Var& a, const Var& b)
{
    detail::require_same_tape(a, b, "dist");
    detail::check_pair_shapes(a, b, "dist");
    switch (pair.dy) {
    case OutputMetric::abs_diff:
        if (a.cols() != 1) throw Error(ErrorKind::shape, "dist(abs-diff) needs scalar outputs, got " + a.value().shape_str());
        return abs(sub(a, b));
    case OutputMetric::euclidean:
        return l2norm(sub(a, b));
    case OutputMetric::kl: {
        detail::check_simplex(a.value());
        detail::check_simplex(b.value());
        Var p = detail::clamp_renormalize(a);
        Var q = detail::clamp_renormalize(b);
        return row_sum(mul(p, sub(log(p), log(q))));
    }
    case OutputMetric::mean_squared_logit:
        return scale(row_sum(square(sub(a, b))), 1.0 / static_cast<double>(a.cols()));
    }
    throw Error(ErrorKind::config, "dist: unknown metric");
}

/// d_Y applied to raw model outputs. For kl the outputs are logits and the
/// divergence is taken between their softmax distributions.
inline Var output_distance(const MetricPair& pair, const Var& fa, const Var& fb)
{
    if (pair.dy != OutputMetric::kl) return dist(pair, fa, fb);
    detail::require_same_tape(fa, fb, "output_distance");
    detail::check_pair_shapes(fa, fb, "output_distance");
    Var lp = log_softmax(fa);
    Var lq = log_softmax(fb);
    return row_sum(mul(exp(lp), sub(lp, lq)));
}

/// Objective used for direction finding. abs-diff is not twice
/// differentiable at zero, so squared difference stands in for it.
inline Var proxy_distance(const MetricPair& pair, const Var& fa, const Var& fb)
{
    if (pair.dy == OutputMetric::abs_diff) {
        detail::check_pair_shapes(fa, fb, "proxy_distance");
        return row_sum(square(sub(fa, fb)));
    }
    return output_distance(pair, fa, fb);
}

} // namespace alr
