#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "alr/error.hpp"
#include "alr/tensor.hpp"

namespace alr {

namespace detail {

inline void check_toy_domain(double x, double y, const char* who)
{
    if (!(x >= -4.0 && x <= 4.0 && y >= -4.0 && y <= 4.0)) {
        throw Error(ErrorKind::domain, std::string(who) + ": point (" + std::to_string(x) + ", " + std::to_string(y) +
                                           ") outside [-4, 4]^2");
    }
}

} // namespace detail

/// Annulus indicator: 0 on 1 <= r <= 2, 1 elsewhere in [-4, 4]^2.
inline double f_target(double x, double y)
{
    detail::check_toy_domain(x, y, "f_target");
    const double r = std::sqrt(x * x + y * y);
    return (r >= 1.0 && r <= 2.0) ? 0.0 : 1.0;
}

/// Best 1-Lipschitz approximation of f_target in mean squared error.
inline double f_opt(double x, double y)
{
    detail::check_toy_domain(x, y, "f_opt");
    const double r = std::sqrt(x * x + y * y);
    if (r <= 0.5) return 1.0;
    if (r <= 1.5) return 1.5 - r;
    if (r <= 2.5) return r - 1.5;
    return 1.0;
}

/// Analytic gradient of f_opt (zero on the flat parts and at the kinks' flat side).
inline std::array<double, 2> f_opt_gradient(double x, double y)
{
    detail::check_toy_domain(x, y, "f_opt_gradient");
    const double r = std::sqrt(x * x + y * y);
    if (r <= 0.5 || r > 2.5) return {0.0, 0.0};
    const double s = r <= 1.5 ? -1.0 : 1.0;
    return {s * x / r, s * y / r};
}

enum class Dataset { toy_a4, eight_gaussians, two_moons };

inline Dataset dataset_from_string(const std::string& s)
{
    if (s == "toy-A4" || s == "toy") return Dataset::toy_a4;
    if (s == "eight-gaussians" || s == "8gaussians") return Dataset::eight_gaussians;
    if (s == "two-moons" || s == "moons") return Dataset::two_moons;
    throw Error(ErrorKind::config, "unknown dataset '" + s + "'");
}

inline constexpr double kEightGaussiansRadius = 2.0;
inline constexpr double kEightGaussiansStd = 0.02;
inline constexpr double kTwoMoonsNoise = 0.1;

inline std::vector<std::array<double, 2>> eight_gaussian_modes()
{
    std::vector<std::array<double, 2>> modes;
    for (int i = 0; i < 8; ++i) {
        const double a = 2.0 * std::numbers::pi * i / 8.0;
        modes.push_back({kEightGaussiansRadius * std::cos(a), kEightGaussiansRadius * std::sin(a)});
    }
    return modes;
}

struct LabeledBatch {
    Tensor x;
    std::vector<std::size_t> labels;
};

class DataSampler {
public:
    DataSampler(Dataset kind, std::uint64_t seed) : kind_(kind), rng_(seed) {}

    [[nodiscard]] Dataset kind() const { return kind_; }

    Tensor sample(std::size_t n) { return sample_labeled(n).x; }

    /// Points with class labels (two-moons: moon index; otherwise mode / 0).
    LabeledBatch sample_labeled(std::size_t n)
    {
        LabeledBatch out{Tensor::zeros(n, 2), std::vector<std::size_t>(n, 0)};
        switch (kind_) {
        case Dataset::toy_a4:
            for (std::size_t i = 0; i < n; ++i) {
                out.x.at(i, 0) = rng_.uniform(-4.0, 4.0);
                out.x.at(i, 1) = rng_.uniform(-4.0, 4.0);
            }
            break;
        case Dataset::eight_gaussians: {
            const auto modes = eight_gaussian_modes();
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t m = rng_.index(8);
                out.x.at(i, 0) = modes[m][0] + kEightGaussiansStd * rng_.normal();
                out.x.at(i, 1) = modes[m][1] + kEightGaussiansStd * rng_.normal();
                out.labels[i] = m;
            }
            break;
        }
        case Dataset::two_moons:
            for (std::size_t i = 0; i < n; ++i) fill_moon(out, i, rng_.index(2));
            break;
        }
        return out;
    }

    /// Two-moons with exactly n/2 points per moon (the remainder goes to moon 0).
    LabeledBatch sample_balanced_moons(std::size_t n)
    {
        LabeledBatch out{Tensor::zeros(n, 2), std::vector<std::size_t>(n, 0)};
        for (std::size_t i = 0; i < n; ++i) fill_moon(out, i, i < (n + 1) / 2 ? 0 : 1);
        return out;
    }

private:
    void fill_moon(LabeledBatch& out, std::size_t i, std::size_t moon)
    {
        const double t = rng_.uniform(0.0, std::numbers::pi);
        double x = std::cos(t), y = std::sin(t);
        if (moon == 1) {
            x = 1.0 - x;
            y = 0.5 - y;
        }
        out.x.at(i, 0) = x + kTwoMoonsNoise * rng_.normal();
        out.x.at(i, 1) = y + kTwoMoonsNoise * rng_.normal();
        out.labels[i] = moon;
    }

    Dataset kind_;
    Rng rng_;
};

/// Number of the eight modes holding at least `min_fraction` of the samples
/// within 3 standard deviations of the mode.
inline std::size_t mode_coverage(const Tensor& samples, double min_fraction = 0.01)
{
    const auto modes = eight_gaussian_modes();
    std::vector<std::size_t> hits(modes.size(), 0);
    const double radius = 3.0 * kEightGaussiansStd;
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        std::size_t best = 0;
        double bd = 1e300;
        for (std::size_t m = 0; m < modes.size(); ++m) {
            const double d = std::hypot(samples(i, 0) - modes[m][0], samples(i, 1) - modes[m][1]);
            if (d < bd) {
                bd = d;
                best = m;
            }
        }
        if (bd <= radius) ++hits[best];
    }
    std::size_t covered = 0;
    for (std::size_t h : hits) {
        if (static_cast<double>(h) >= min_fraction * static_cast<double>(samples.rows())) ++covered;
    }
    return covered;
}

} // namespace alr
