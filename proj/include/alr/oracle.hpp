#pragma once

// Brute-force reference computations. Everything here treats the function
// under test as a black box over std::vector<double> and shares no code with
// the tape, so it can check the tape and the power iteration independently.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "alr/error.hpp"
#include "alr/metrics.hpp"
#include "alr/tensor.hpp"

namespace alr::oracle {

using ScalarFn = std::function<double(std::span<const double>)>;
using VectorFn = std::function<std::vector<double>(std::span<const double>)>;

/// Batched function over 2-D points, flattened as x0,y0,x1,y1,...
/// Returns one value per point.
using GridFn = std::function<std::vector<double>(const std::vector<double>& points)>;
/// Batched gradient: returns gx0,gy0,gx1,gy1,...
using GridGradFn = std::function<std::vector<double>(const std::vector<double>& points)>;

inline std::vector<double> fd_gradient(const ScalarFn& f, std::span<const double> x, double h = 1e-4)
{
    std::vector<double> g(x.size());
    std::vector<double> p(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double fp = f(p);
        p[i] = orig - h;
        const double fm = f(p);
        p[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw Error(ErrorKind::non_finite, "fd_gradient: non-finite evaluation at coordinate " + std::to_string(i));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Output distance matching alr::output_distance semantics (kl acts on logits).
inline double output_distance(OutputMetric dy, std::span<const double> a, std::span<const double> b)
{
    switch (dy) {
    case OutputMetric::abs_diff: return std::fabs(a[0] - b[0]);
    case OutputMetric::euclidean: {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(s);
    }
    case OutputMetric::kl: {
        auto lse = [](std::span<const double> v) {
            const double m = *std::max_element(v.begin(), v.end());
            double s = 0.0;
            for (double e : v) s += std::exp(e - m);
            return m + std::log(s);
        };
        const double la = lse(a), lb = lse(b);
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double lp = a[i] - la, lq = b[i] - lb;
            s += std::exp(lp) * (lp - lq);
        }
        return s;
    }
    case OutputMetric::mean_squared_logit: {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return s / static_cast<double>(a.size());
    }
    }
    return 0.0;
}

struct SearchOptions {
    std::size_t directions = 2000; // M
    std::size_t restarts = 8;      // R best candidates refined
    double min_step = 1e-9;
};

/// max over unit directions u and radii eps of d_Y(f(x), f(x + eps u)) / eps.
/// Candidates come from a dense direction sweep over each eps (a uniform angle
/// grid in 2-D, Gaussian draws otherwise); the best R are refined by coordinate
/// ascent on u and on eps within [min eps, max eps].
inline double brute_force_max_quotient(const VectorFn& f, std::span<const double> x, OutputMetric dy,
                                       const std::vector<double>& eps_set, const SearchOptions& opt = {},
                                       std::uint64_t seed = 12345)
{
    if (eps_set.empty()) throw Error(ErrorKind::config, "brute_force_max_quotient: empty eps set");
    const std::size_t D = x.size();
    const std::vector<double> fx = f(x);
    const double eps_lo = *std::min_element(eps_set.begin(), eps_set.end());
    const double eps_hi = *std::max_element(eps_set.begin(), eps_set.end());

    std::vector<double> probe(D);
    auto quotient = [&](const std::vector<double>& u, double eps) {
        for (std::size_t i = 0; i < D; ++i) probe[i] = x[i] + eps * u[i];
        const std::vector<double> fy = f(probe);
        return output_distance(dy, fx, fy) / eps;
    };
    auto normalize = [](std::vector<double>& u) {
        double s = 0.0;
        for (double v : u) s += v * v;
        s = std::sqrt(s);
        if (s > 0.0) {
            for (double& v : u) v /= s;
        }
        return s > 0.0;
    };

    struct Candidate {
        double q;
        std::vector<double> u;
        double eps;
    };
    std::vector<Candidate> cands;
    Rng rng(seed);
    for (std::size_t m = 0; m < opt.directions; ++m) {
        std::vector<double> u(D);
        if (D == 2) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(opt.directions);
            u = {std::cos(a), std::sin(a)};
        } else {
            do {
                for (double& v : u) v = rng.normal();
            } while (!normalize(u));
        }
        for (double e : eps_set) cands.push_back({quotient(u, e), u, e});
    }
    const std::size_t keep = std::min(opt.restarts, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) { return a.q > b.q; });

    double best = cands.front().q;
    for (std::size_t c = 0; c < keep; ++c) {
        Candidate cur = cands[c];
        double step = 0.05;
        double estep = (eps_hi - eps_lo) * 0.1;
        while (step > opt.min_step) {
            bool improved = false;
            for (std::size_t i = 0; i < D; ++i) {
                for (double sgn : {1.0, -1.0}) {
                    std::vector<double> u = cur.u;
                    u[i] += sgn * step;
                    if (!normalize(u)) continue;
                    const double q = quotient(u, cur.eps);
                    if (q > cur.q) {
                        cur = {q, std::move(u), cur.eps};
                        improved = true;
                    }
                }
            }
            if (estep > 0.0) {
                for (double sgn : {1.0, -1.0}) {
                    const double e = std::clamp(cur.eps + sgn * estep, eps_lo, eps_hi);
                    const double q = quotient(cur.u, e);
                    if (q > cur.q) {
                        cur = {q, cur.u, e};
                        improved = true;
                    }
                }
            }
            if (!improved) {
                step *= 0.5;
                estep *= 0.5;
            }
        }
        best = std::max(best, cur.q);
    }
    return best;
}

struct GridSpec {
    std::array<double, 2> lo{-4.0, -4.0};
    std::array<double, 2> hi{4.0, 4.0};
    std::array<std::size_t, 2> resolution{256, 256};

    void validate() const
    {
        for (int d = 0; d < 2; ++d) {
            if (resolution[d] < 2) throw Error(ErrorKind::config, "grid resolution must be >= 2");
            if (!std::isfinite(lo[d]) || !std::isfinite(hi[d]) || !(lo[d] < hi[d])) {
                throw Error(ErrorKind::config, "grid bounds must be finite with lo < hi");
            }
        }
    }

    [[nodiscard]] double step(int d) const
    {
        return (hi[d] - lo[d]) / static_cast<double>(resolution[d] - 1);
    }

    /// Column j spans the first coordinate left to right; row i runs from the
    /// top of the domain (largest second coordinate) downwards.
    [[nodiscard]] std::array<double, 2> point(std::size_t row, std::size_t col) const
    {
        return {lo[0] + static_cast<double>(col) * step(0), hi[1] - static_cast<double>(row) * step(1)};
    }

    [[nodiscard]] std::vector<double> points() const
    {
        std::vector<double> out;
        out.reserve(resolution[0] * resolution[1] * 2);
        for (std::size_t i = 0; i < resolution[1]; ++i) {
            for (std::size_t j = 0; j < resolution[0]; ++j) {
                const auto p = point(i, j);
                out.push_back(p[0]);
                out.push_back(p[1]);
            }
        }
        return out;
    }
};

enum class GridMode { grad_norm, pairwise_quotient };

struct GridResult {
    double max = 0.0;
    Tensor cells; // rows = resolution[1], cols = resolution[0]
};

/// Gradient-norm mode: ||grad f|| at every grid point, from `grad` if given,
/// else central differences with step h.
inline GridResult grid_lipschitz_gradnorm(const GridFn& f, const GridSpec& grid, const GridGradFn& grad = {},
                                          double h = 1e-4)
{
    grid.validate();
    const std::vector<double> pts = grid.points();
    const std::size_t n = pts.size() / 2;
    std::vector<double> g;
    if (grad) {
        g = grad(pts);
    } else {
        g.assign(2 * n, 0.0);
        for (int d = 0; d < 2; ++d) {
            std::vector<double> plus = pts, minus = pts;
            for (std::size_t p = 0; p < n; ++p) {
                plus[2 * p + d] += h;
                minus[2 * p + d] -= h;
            }
            const std::vector<double> fp = f(plus), fm = f(minus);
            for (std::size_t p = 0; p < n; ++p) g[2 * p + d] = (fp[p] - fm[p]) / (2.0 * h);
        }
    }
    if (g.size() != 2 * n) throw Error(ErrorKind::shape, "grid gradient returned the wrong number of values");
    GridResult out;
    out.cells = Tensor::zeros(grid.resolution[1], grid.resolution[0]);
    auto c = out.cells.mutable_data();
    for (std::size_t p = 0; p < n; ++p) {
        c[p] = std::sqrt(g[2 * p] * g[2 * p] + g[2 * p + 1] * g[2 * p + 1]);
        out.max = std::max(out.max, c[p]);
    }
    return out;
}

/// Pairwise mode: |f(a) - f(b)| / ||a - b|| over neighbouring grid points.
/// Neighbours cover 8 directions (axis, diagonal and knight moves) so the
/// estimate tracks the gradient norm regardless of its orientation. Each cell
/// holds the largest quotient with the neighbours it reaches.
inline GridResult grid_lipschitz_pairwise(const GridFn& f, const GridSpec& grid)
{
    grid.validate();
    const std::size_t rows = grid.resolution[1], cols = grid.resolution[0];
    const std::vector<double> v = f(grid.points());
    if (v.size() != rows * cols) throw Error(ErrorKind::shape, "grid function returned the wrong number of values");
    static constexpr std::array<std::array<int, 2>, 8> offsets{
        {{0, 1}, {1, 0}, {1, 1}, {1, -1}, {1, 2}, {2, 1}, {1, -2}, {2, -1}}};
    const double sx = grid.step(0), sy = grid.step(1);
    GridResult out;
    out.cells = Tensor::zeros(rows, cols);
    auto c = out.cells.mutable_data();
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            double best = 0.0;
            for (const auto& [di, dj] : offsets) {
                const long ni = static_cast<long>(i) + di, nj = static_cast<long>(j) + dj;
                if (ni < 0 || nj < 0 || ni >= static_cast<long>(rows) || nj >= static_cast<long>(cols)) continue;
                const double dist = std::hypot(dj * sx, di * sy);
                const double q = std::fabs(v[i * cols + j] - v[static_cast<std::size_t>(ni) * cols +
                                                                 static_cast<std::size_t>(nj)]) / dist;
                best = std::max(best, q);
            }
            c[i * cols + j] = best;
            out.max = std::max(out.max, best);
        }
    }
    return out;
}

inline GridResult grid_lipschitz(const GridFn& f, const GridSpec& grid, GridMode mode, const GridGradFn& grad = {})
{
    return mode == GridMode::grad_norm ? grid_lipschitz_gradnorm(f, grid, grad) : grid_lipschitz_pairwise(f, grid);
}

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& t)
{
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.rows(); ++i) {
        for (std::size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t(i, j);
    }
    return m;
}

} // namespace detail

inline constexpr std::size_t kMaxOracleDim = 64;

/// Largest singular value via a full SVD.
inline double exact_spectral_norm(const Tensor& w)
{
    if (w.rows() > kMaxOracleDim || w.cols() > kMaxOracleDim) {
        throw Error(ErrorKind::config, "exact_spectral_norm: matrix larger than 64 in some dimension");
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(detail::to_eigen(w));
    return svd.singularValues()(0);
}

struct TopEigen {
    std::vector<double> vector; // unit norm, first nonzero component positive
    double eigenvalue = 0.0;
    bool degenerate = false; // |lambda_1| - |lambda_2| < 1e-9
};

/// Eigenvector of the eigenvalue with the largest magnitude.
inline TopEigen exact_top_eigvec(const Tensor& a)
{
    if (a.rows() != a.cols() || a.rows() > kMaxOracleDim) {
        throw Error(ErrorKind::shape, "exact_top_eigvec: needs a square matrix of size <= 64, got " + a.shape_str());
    }
    const std::size_t n = a.rows();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (std::fabs(a(i, j) - a(j, i)) > 1e-12 * (1.0 + std::fabs(a(i, j)))) {
                throw Error(ErrorKind::domain, "exact_top_eigvec: matrix is not symmetric");
            }
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(detail::to_eigen(a));
    const Eigen::VectorXd& ev = es.eigenvalues();
    Eigen::Index top = 0;
    for (Eigen::Index i = 1; i < ev.size(); ++i) {
        if (std::fabs(ev(i)) > std::fabs(ev(top))) top = i;
    }
    double second = 0.0;
    bool has_second = false;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (i == top) continue;
        second = has_second ? std::max(second, std::fabs(ev(i))) : std::fabs(ev(i));
        has_second = true;
    }
    TopEigen out;
    out.eigenvalue = ev(top);
    out.degenerate = has_second && std::fabs(ev(top)) - second < 1e-9;
    Eigen::VectorXd v = es.eigenvectors().col(top).normalized();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (std::fabs(v(i)) > 1e-12) {
            if (v(i) < 0.0) v = -v;
            break;
        }
    }
    out.vector.assign(v.data(), v.data() + v.size());
    return out;
}

} // namespace alr::oracle
