#pragma once

// Adversarial perturbations via power iteration on the output distance.
//
// Starting from a random unit vector r_0, each step evaluates the gradient of
// d(r) = d_Y(f(x), f(x + r)) at r = xi * r_i and normalizes it per example.
// The final direction is scaled by a radius eps drawn per example.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "alr/error.hpp"
#include "alr/metrics.hpp"
#include "alr/nn.hpp"
#include "alr/tape.hpp"

namespace alr {

struct EpsilonDist {
    enum class Kind { fixed, uniform };
    Kind kind = Kind::uniform;
    double lo = 0.1;
    double hi = 10.0;

    static EpsilonDist fixed(double eps) { return {Kind::fixed, eps, eps}; }
    static EpsilonDist uniform(double lo, double hi) { return {Kind::uniform, lo, hi}; }

    void validate() const
    {
        if (!(lo > 0.0) || !std::isfinite(hi)) throw Error(ErrorKind::config, "epsilon must be positive and finite");
        if (kind == Kind::uniform && !(lo < hi)) {
            throw Error(ErrorKind::config, "uniform epsilon needs lo < hi, got [" + std::to_string(lo) + ", " +
                                               std::to_string(hi) + "]");
        }
    }

    /// Fixed radii consume no randomness.
    double sample(Rng& rng) const { return kind == Kind::fixed ? lo : rng.uniform(lo, hi); }
};

struct DirectionResult {
    Tensor direction;             // B x D, unit rows
    std::vector<bool> degenerate; // a zero gradient was met at some iterate
};

struct PerturbConfig {
    double xi = 10.0;
    std::size_t k = 1;
    EpsilonDist eps = EpsilonDist::uniform(0.1, 10.0);
};

struct PerturbationResult {
    Tensor direction;
    std::vector<double> epsilon;
    Tensor r_adv;
    std::vector<double> quotient;
    std::vector<bool> degenerate;
};

/// Power iteration from explicit starting directions (rows of r0, unit norm).
inline DirectionResult adversarial_direction_from(const Model& f, const Var& x, const MetricPair& pair, double xi,
                                                  std::size_t k, Tensor r0)
{
    if (xi == 0.0 || !std::isfinite(xi)) throw Error(ErrorKind::config, "xi must be nonzero and finite");
    if (r0.rows() != x.rows() || r0.cols() != x.cols()) {
        throw Error(ErrorKind::shape, "adversarial_direction: r0 " + r0.shape_str() + " vs x " + x.value().shape_str());
    }
    Tape& tape = *x.tape();
    DirectionResult out{std::move(r0), std::vector<bool>(x.rows(), false)};
    if (k == 0) return out;

    const std::size_t mark = tape.size();
    Tape::ForceGrad recording(tape);
    Var base = tape.constant(x.value());
    Var reference;
    {
        Tape::NoGrad frozen(tape);
        reference = tape.constant(f(base).value());
    }
    const std::size_t cols = x.cols();
    for (std::size_t it = 0; it < k; ++it) {
        const std::size_t iter_mark = tape.size();
        Var r = tape.variable(detail::map(out.direction, [xi](double v) { return xi * v; }));
        Var d = sum(proxy_distance(pair, reference, f(add(base, r))));
        Tensor g = tape.grad(d, {r})[0];
        tape.rewind(iter_mark);

        auto dir = out.direction.mutable_data();
        const std::vector<double> norms = row_norms(g);
        for (std::size_t b = 0; b < g.rows(); ++b) {
            if (!(norms[b] > 0.0) || !std::isfinite(norms[b])) {
                out.degenerate[b] = true;
                continue;
            }
            for (std::size_t j = 0; j < cols; ++j) dir[b * cols + j] = g(b, j) / norms[b];
        }
    }
    tape.rewind(mark);
    return out;
}

inline DirectionResult adversarial_direction(const Model& f, const Var& x, const MetricPair& pair, double xi,
                                             std::size_t k, Rng& rng)
{
    return adversarial_direction_from(f, x, pair, xi, k, random_unit_rows(x.rows(), x.cols(), rng));
}

/// VAT's direction: the same iteration with d_Y = KL between softmax outputs.
inline DirectionResult virtual_adversarial_direction(const Model& f, const Var& x, double xi, std::size_t k,
                                                     Rng& rng)
{
    return adversarial_direction(f, x, MetricPair{InputMetric::euclidean, OutputMetric::kl}, xi, k, rng);
}

/// Adversarial perturbation r_adv = eps * direction with eps drawn per
/// example, and the Lipschitz quotient it realizes under the true d_Y.
inline PerturbationResult perturb(const Model& f, const Var& x, const MetricPair& pair, const PerturbConfig& cfg,
                                  Rng& rng)
{
    cfg.eps.validate();
    DirectionResult dir = adversarial_direction(f, x, pair, cfg.xi, cfg.k, rng);
    PerturbationResult out;
    out.direction = std::move(dir.direction);
    out.degenerate = std::move(dir.degenerate);
    out.epsilon.resize(x.rows());
    for (double& e : out.epsilon) e = cfg.eps.sample(rng);

    out.r_adv = out.direction;
    auto r = out.r_adv.mutable_data();
    const std::size_t cols = x.cols();
    for (std::size_t b = 0; b < x.rows(); ++b) {
        for (std::size_t j = 0; j < cols; ++j) r[b * cols + j] *= out.epsilon[b];
    }

    Tape& tape = *x.tape();
    const std::size_t mark = tape.size();
    {
        Tape::NoGrad frozen(tape);
        Var base = tape.constant(x.value());
        Var shifted = tape.constant(out.r_adv);
        Var d = output_distance(pair, f(base), f(add(base, shifted)));
        const std::vector<double> dx = row_norms(out.r_adv);
        out.quotient.resize(x.rows());
        for (std::size_t b = 0; b < x.rows(); ++b) out.quotient[b] = d.value()(b, 0) / dx[b];
    }
    tape.rewind(mark);
    return out;
}

} // namespace alr
