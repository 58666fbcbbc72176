#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "alr/error.hpp"
#include "alr/metrics.hpp"
#include "alr/nn.hpp"
#include "alr/perturb.hpp"
#include "alr/tape.hpp"

namespace alr {

enum class Sidedness { one, two };
enum class PenaltyForm { squared, linear, both };

/// How per-example terms become the loss: the mean of the penalized terms
/// (expected squared hinge), or the penalty applied to the mean hinge.
enum class Aggregation { mean_of_terms, term_of_mean };

struct AlrConfig {
    double K = 1.0;
    double lambda = 100.0;
    double xi = 10.0;
    std::size_t k = 1;
    EpsilonDist eps = EpsilonDist::uniform(0.1, 10.0);
    Sidedness sided = Sidedness::one;
    PenaltyForm form = PenaltyForm::squared;
    bool fix_reference = false;
    Aggregation aggregation = Aggregation::mean_of_terms;

    void validate() const
    {
        if (!(K >= 0.0)) throw Error(ErrorKind::config, "K must be >= 0");
        if (!(lambda >= 0.0)) throw Error(ErrorKind::config, "lambda must be >= 0");
        if (xi == 0.0) throw Error(ErrorKind::config, "xi must be nonzero");
        eps.validate();
    }

    [[nodiscard]] PerturbConfig perturb_config() const { return {xi, k, eps}; }
};

struct PenaltyReport {
    double value = 0.0;
    std::size_t violations = 0; // examples whose quotient (or gradient norm) exceeds K
    std::size_t batch = 0;
    std::size_t dropped = 0; // degenerate pairs excluded (explicit penalty)
    double mean_quotient = 0.0;
    double max_quotient = 0.0;
};

struct PenaltyResult {
    Var loss;
    PenaltyReport report;
    Var quotient; // B x 1, the per-example Lipschitz quotient or gradient norm
    Var terms;    // B x 1, per-example penalty before lambda and averaging
};

namespace detail {

inline void summarize(PenaltyReport& rep, const Tensor& q, double K)
{
    rep.batch = q.rows();
    rep.violations = 0;
    double s = 0.0, mx = 0.0;
    for (std::size_t b = 0; b < q.rows(); ++b) {
        const double v = q(b, 0);
        if (v - K > 0.0) ++rep.violations;
        s += v;
        mx = std::max(mx, v);
    }
    rep.mean_quotient = q.rows() ? s / static_cast<double>(q.rows()) : 0.0;
    rep.max_quotient = mx;
}

/// Per-example term for a hinge value h.
inline Var penalty_terms(const Var& h, Sidedness sided, PenaltyForm form)
{
    Var lin = sided == Sidedness::one ? h : abs(h);
    switch (form) {
    case PenaltyForm::squared: return square(h);
    case PenaltyForm::linear: return lin;
    case PenaltyForm::both: return add(square(h), lin);
    }
    return square(h);
}

} // namespace detail

/// Adversarial Lipschitz penalty on a batch: perturb each example in its
/// adversarial direction and hinge the resulting quotient at K.
inline PenaltyResult alp(const Model& f, const Var& x, const MetricPair& pair, const AlrConfig& cfg, Rng& rng)
{
    cfg.validate();
    if (x.rows() == 0) throw Error(ErrorKind::shape, "alp: empty batch");
    Tape& tape = *x.tape();
    PerturbationResult pr = perturb(f, x, pair, cfg.perturb_config(), rng);

    Var fx = f(x);
    if (cfg.fix_reference) fx = stop_gradient(fx);
    Var fxr = f(add(x, tape.constant(pr.r_adv)));
    Var d = output_distance(pair, fx, fxr);
    Var q = div(d, tape.constant(Tensor::column(row_norms(pr.r_adv))));
    Var h = shift(q, -cfg.K);
    if (cfg.sided == Sidedness::one) h = relu(h);

    PenaltyResult out;
    out.quotient = q;
    out.terms = detail::penalty_terms(h, cfg.sided, cfg.form);
    if (cfg.aggregation == Aggregation::mean_of_terms) {
        out.loss = scale(mean(out.terms), cfg.lambda);
    } else {
        out.loss = scale(detail::penalty_terms(mean(h), cfg.sided, cfg.form), cfg.lambda);
    }
    detail::summarize(out.report, q.value(), cfg.K);
    out.report.value = out.loss.value().item();
    return out;
}

namespace detail {

/// Per-example input-gradient norms of a scalar-output model, recorded for
/// double backprop.
inline Var input_gradient_norms(const Model& f, const Var& x)
{
    Tape& tape = *x.tape();
    // The norms are values even under NoGrad, so the inner gradient is always recorded.
    Tape::ForceGrad recording(tape);
    Var xin = tape.variable(x.value());
    Var y = f(xin);
    if (y.cols() != 1) throw Error(ErrorKind::shape, "gradient penalty needs scalar outputs, got " + y.value().shape_str());
    Var g = tape.grad_graph(sum(y), {xin})[0];
    return l2norm(g);
}

} // namespace detail

/// One-sided gradient-norm penalty: lambda * mean((||grad f|| - K)_+^2).
inline PenaltyResult lp(const Model& f, const Var& x, double lambda, double K = 1.0)
{
    Var n = detail::input_gradient_norms(f, x);
    PenaltyResult out;
    out.quotient = n;
    out.terms = square(relu(shift(n, -K)));
    out.loss = scale(mean(out.terms), lambda);
    detail::summarize(out.report, n.value(), K);
    out.report.value = out.loss.value().item();
    return out;
}

/// Two-sided gradient penalty: lambda * mean((||grad f|| - 1)^2).
inline PenaltyResult gp(const Model& f, const Var& x, double lambda)
{
    Var n = detail::input_gradient_norms(f, x);
    PenaltyResult out;
    out.quotient = n;
    out.terms = square(shift(n, -1.0));
    out.loss = scale(mean(out.terms), lambda);
    detail::summarize(out.report, n.value(), 1.0);
    out.report.value = out.loss.value().item();
    return out;
}

inline constexpr double kDegeneratePairDistance = 1e-12;

/// Lipschitz quotient hinge at given pairs (x_i, y_i). Pairs closer than
/// 1e-12 are excluded from the average and counted in report.dropped.
inline PenaltyResult explicit_random_pair(const Model& f, const Var& x, const Var& y, double lambda, double K = 1.0)
{
    detail::require_same_tape(x, y, "explicit_random_pair");
    if (x.rows() != y.rows() || x.cols() != y.cols()) {
        throw Error(ErrorKind::shape, "explicit_random_pair: " + detail::shapes(x.value(), y.value()));
    }
    Tape& tape = *x.tape();
    const std::vector<double> dx = row_norms(detail::broadcast_binary(x.value(), y.value(), "explicit_random_pair",
                                                                      [](double a, double b) { return a - b; }));
    std::vector<double> keep(dx.size());
    std::size_t kept = 0;
    for (std::size_t b = 0; b < dx.size(); ++b) {
        keep[b] = dx[b] >= kDegeneratePairDistance ? 1.0 : 0.0;
        kept += keep[b] > 0.0;
    }
    if (kept == 0) throw Error(ErrorKind::degenerate, "explicit_random_pair: every pair is degenerate");

    Var fx = f(x);
    Var fy = f(y);
    if (fx.cols() != 1) throw Error(ErrorKind::shape, "explicit_random_pair needs scalar outputs");
    Var q = mul(div(abs(sub(fx, fy)), tape.constant(Tensor::column(dx))), tape.constant(Tensor::column(keep)));
    PenaltyResult out;
    out.quotient = q;
    out.terms = mul(square(relu(shift(q, -K))), tape.constant(Tensor::column(keep)));
    out.loss = scale(sum(out.terms), lambda / static_cast<double>(kept));

    detail::summarize(out.report, q.value(), K);
    out.report.dropped = dx.size() - kept;
    // Mean over the valid pairs only.
    double s = 0.0;
    for (std::size_t b = 0; b < dx.size(); ++b) s += q.value()(b, 0);
    out.report.mean_quotient = s / static_cast<double>(kept);
    out.report.value = out.loss.value().item();
    return out;
}

/// t * xr + (1 - t) * xg with the given per-row t.
inline Tensor interpolate_pairs(const Tensor& xr, const Tensor& xg, const std::vector<double>& t)
{
    if (xr.rows() != xg.rows() || xr.cols() != xg.cols() || t.size() != xr.rows()) {
        throw Error(ErrorKind::shape, "interpolate_pairs: " + xr.shape_str() + " and " + xg.shape_str());
    }
    Tensor out = Tensor::zeros(xr.rows(), xr.cols());
    auto o = out.mutable_data();
    for (std::size_t b = 0; b < xr.rows(); ++b) {
        for (std::size_t j = 0; j < xr.cols(); ++j) {
            o[b * xr.cols() + j] = t[b] * xr(b, j) + (1.0 - t[b]) * xg(b, j);
        }
    }
    return out;
}

/// Interpolation with t ~ U[0, 1] drawn per pair.
inline Tensor interpolate_pairs(const Tensor& xr, const Tensor& xg, Rng& rng)
{
    std::vector<double> t(xr.rows());
    for (double& v : t) v = rng.uniform();
    return interpolate_pairs(xr, xg, t);
}

/// VAT's local distributional smoothness: mean KL between softmax(f(x)),
/// held fixed, and softmax(f(x + r_vadv)) with ||r_vadv|| = eps.
inline PenaltyResult lds_vat(const Model& f, const Var& x, double eps, double xi, std::size_t k, Rng& rng)
{
    const MetricPair kl{InputMetric::euclidean, OutputMetric::kl};
    Tape& tape = *x.tape();
    PerturbationResult pr = perturb(f, x, kl, PerturbConfig{xi, k, EpsilonDist::fixed(eps)}, rng);
    Var fx = stop_gradient(f(x));
    Var d = output_distance(kl, fx, f(add(x, tape.constant(pr.r_adv))));
    PenaltyResult out;
    out.quotient = d;
    out.terms = d;
    out.loss = mean(d);
    detail::summarize(out.report, d.value(), 0.0);
    out.report.value = out.loss.value().item();
    return out;
}

/// Mean Shannon entropy of softmax(f(x)).
inline Var entropy_min(const Model& f, const Var& x)
{
    Var lp = log_softmax(f(x));
    return scale(sum(mul(exp(lp), lp)), -1.0 / static_cast<double>(x.rows()));
}

/// Mean cross-entropy of logits against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels)
{
    if (labels.size() != logits.rows()) throw Error(ErrorKind::shape, "cross_entropy: label count mismatch");
    Tensor onehot = Tensor::zeros(logits.rows(), logits.cols());
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (labels[b] >= logits.cols()) throw Error(ErrorKind::shape, "cross_entropy: label out of range");
        onehot.at(b, labels[b]) = 1.0;
    }
    Tape& tape = *logits.tape();
    return scale(sum(mul(log_softmax(logits), tape.constant(std::move(onehot)))),
                 -1.0 / static_cast<double>(labels.size()));
}

} // namespace alr
