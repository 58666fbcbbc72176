#pragma once

// Finite-difference audit of every differentiable op, the MLP and the
// double-backprop penalties.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "alr/nn.hpp"
#include "alr/oracle.hpp"
#include "alr/penalty.hpp"
#include "alr/tape.hpp"

namespace alr {
namespace gradcheck {

/// Scalar function of one input tensor, built on whatever tape it is given.
using TapeFn = std::function<Var(const Var&)>;

inline double eval_scalar(const TapeFn& f, const Tensor& x)
{
    Tape tape;
    Tape::NoGrad guard(tape);
    return f(tape.constant(x)).value().item();
}

inline Tensor tape_gradient(const TapeFn& f, const Tensor& x)
{
    Tape tape;
    Var xv = tape.variable(x);
    return tape.grad(f(xv), {xv})[0];
}

inline std::vector<double> fd_gradient(const TapeFn& f, const Tensor& x, double h = 1e-4)
{
    auto scalar = [&](std::span<const double> p) {
        return eval_scalar(f, Tensor(x.shape(), std::vector<double>(p.begin(), p.end())));
    };
    return oracle::fd_gradient(scalar, x.data(), h);
}

/// ||a - b|| / max(||b||, floor)
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6)
{
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

/// Random entries kept at least `margin` away from zero.
inline Tensor random_away_from_zero(std::size_t r, std::size_t c, Rng& rng, double margin = 1e-2)
{
    Tensor t = Tensor::zeros(r, c);
    for (double& v : t.mutable_data()) {
        do {
            v = rng.normal();
        } while (std::fabs(v) < margin);
    }
    return t;
}

struct OpCase {
    std::size_t rows, cols;
    TapeFn build; // input -> tensor-valued op output
    bool positive_input = false;
};

inline std::map<std::string, OpCase> op_cases()
{
    std::map<std::string, OpCase> m;
    m["add"] = {3, 4, [](const Var& x) { return add(x, square(x)); }};
    m["sub"] = {3, 4, [](const Var& x) { return sub(square(x), x); }};
    m["mul"] = {3, 4, [](const Var& x) { return mul(x, exp(scale(x, 0.3))); }};
    m["div"] = {3, 4, [](const Var& x) { return div(x, shift(square(x), 1.0)); }};
    m["broadcast"] = {3, 4, [](const Var& x) { return mul(add(x, row_sum(x)), col_mean(x)); }};
    m["matmul"] = {3, 4, [](const Var& x) { return matmul(x, x, true, false); }};
    m["matmul_nt"] = {3, 4, [](const Var& x) { return matmul(x, x, false, true); }};
    m["matmul_tt"] = {4, 4, [](const Var& x) { return matmul(x, scale(x, 0.5), true, true); }};
    m["relu"] = {3, 4, [](const Var& x) { return relu(x); }};
    m["abs"] = {3, 4, [](const Var& x) { return abs(x); }};
    m["exp"] = {3, 4, [](const Var& x) { return exp(x); }};
    m["log"] = {3, 4, [](const Var& x) { return log(x); }, true};
    m["sqrt"] = {3, 4, [](const Var& x) { return sqrt(x); }, true};
    m["square"] = {3, 4, [](const Var& x) { return square(x); }};
    m["sum"] = {3, 4, [](const Var& x) { return mul(x, sum(x)); }};
    m["mean"] = {3, 4, [](const Var& x) { return mul(x, mean(x)); }};
    m["l2norm"] = {3, 4, [](const Var& x) { return l2norm(x); }};
    m["log_softmax"] = {3, 4, [](const Var& x) { return log_softmax(x); }};
    m["softmax"] = {3, 4, [](const Var& x) { return softmax(x); }};
    m["affine"] = {3, 2, [](const Var& x) {
        Var w = x.tape()->constant(Tensor::matrix({{0.3, -1.2, 0.5}, {0.7, 0.1, -0.4}}));
        Var b = x.tape()->constant(Tensor::row({0.1, 0.2, -0.3}));
        return affine(x, w, b);
    }};
    m["batchnorm"] = {5, 3, [](const Var& x) {
        Var mu = col_mean(x);
        Var c = sub(x, mu);
        return div(c, sqrt(shift(col_mean(square(c)), 1e-5)));
    }};
    m["concat"] = {3, 4, [](const Var& x) { return concat_rows(x, square(x)); }};
    m["slice"] = {4, 3, [](const Var& x) { return slice_rows(square(x), 1, 2); }};
    m["clamp"] = {3, 4, [](const Var& x) { return clamp(x, -0.5, 0.5); }};
    return m;
}

} // namespace gradcheck

struct GradCheckEntry {
    std::string op;
    std::size_t trials = 0;
    double max_rel_error = 0.0;
    double tolerance = 0.0;

    [[nodiscard]] bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    [[nodiscard]] bool passed() const
    {
        return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.passed(); });
    }
};

inline constexpr double kFirstOrderTolerance = 1e-5;
inline constexpr double kSecondOrderTolerance = 1e-4;

/// Tape gradients against central differences: every op (composed with a
/// random probe into a scalar), random MLPs with respect to inputs and
/// weights, and the lp/gp losses whose parameter gradients need double
/// backprop. `trials` random cases per entry.
inline GradCheckReport run_gradcheck(std::uint64_t seed, std::size_t trials = 100)
{
    using namespace gradcheck;
    Rng rng(seed);
    GradCheckReport report;

    for (const auto& [name, c] : op_cases()) {
        GradCheckEntry e{name, trials, 0.0, kFirstOrderTolerance};
        for (std::size_t trial = 0; trial < trials; ++trial) {
            Tensor x = random_away_from_zero(c.rows, c.cols, rng);
            if (c.positive_input) {
                for (double& v : x.mutable_data()) v = std::fabs(v) + 0.1;
            }
            if (name == "clamp") {
                for (double& v : x.mutable_data()) {
                    if (std::fabs(std::fabs(v) - 0.5) < 1e-2) v += 0.05;
                }
            }
            Tensor probe;
            {
                Tape tmp;
                Tape::NoGrad g(tmp);
                const Tensor& out = c.build(tmp.constant(x)).value();
                probe = normal_tensor(out.rows(), out.cols(), rng);
            }
            TapeFn f = [&](const Var& v) { return sum(mul(c.build(v), v.tape()->constant(probe))); };
            e.max_rel_error = std::max(e.max_rel_error, relative_error(tape_gradient(f, x).data(), fd_gradient(f, x)));
        }
        report.entries.push_back(e);
    }

    // Weights drawn at unit scale so that every ReLU region is exercised.
    auto random_net = [&rng](std::initializer_list<std::size_t> widths) {
        Mlp net = Mlp::create(MlpSpec::from_widths(widths), rng);
        for (auto& l : net.params.layers) l.weight = normal_tensor(l.weight.rows(), l.weight.cols(), rng);
        return net;
    };

    GradCheckEntry in{"mlp_input", trials, 0.0, kFirstOrderTolerance};
    GradCheckEntry wt{"mlp_weight", trials, 0.0, kFirstOrderTolerance};
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Mlp net = random_net({2, 8, 8, 8, 1});
        const Tensor x = normal_tensor(4, 2, rng);
        TapeFn by_input = [&](const Var& v) {
            Tape& t = *v.tape();
            BoundParams b = bind(t, net.params, false);
            return sum(forward(net.spec, net.params, b, v, Mode::eval));
        };
        in.max_rel_error =
            std::max(in.max_rel_error, relative_error(tape_gradient(by_input, x).data(), fd_gradient(by_input, x, 1e-6)));
        TapeFn by_weight = [&](const Var& w0) {
            Tape& t = *w0.tape();
            BoundParams b = bind(t, net.params, false);
            b.layers[0].weight = w0;
            return sum(forward(net.spec, net.params, b, t.constant(x), Mode::eval));
        };
        const Tensor& w0 = net.params.layers[0].weight;
        wt.max_rel_error =
            std::max(wt.max_rel_error, relative_error(tape_gradient(by_weight, w0).data(), fd_gradient(by_weight, w0, 1e-6)));
    }
    report.entries.push_back(in);
    report.entries.push_back(wt);

    GradCheckEntry lp_e{"lp_double_backprop", trials, 0.0, kSecondOrderTolerance};
    GradCheckEntry gp_e{"gp_double_backprop", trials, 0.0, kSecondOrderTolerance};
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Mlp net = random_net({2, 6, 5, 1});
        const Tensor x = normal_tensor(6, 2, rng);
        for (GradCheckEntry* e : {&lp_e, &gp_e}) {
            const bool use_gp = e == &gp_e;
            TapeFn loss = [&](const Var& w0) {
                Tape& t = *w0.tape();
                BoundParams b = bind(t, net.params, false);
                b.layers[0].weight = w0;
                Model f = as_model(net, b, Mode::eval);
                return use_gp ? gp(f, t.constant(x), 1.0).loss : lp(f, t.constant(x), 1.0, 0.5).loss;
            };
            const Tensor& w0 = net.params.layers[0].weight;
            e->max_rel_error =
                std::max(e->max_rel_error, relative_error(tape_gradient(loss, w0).data(), fd_gradient(loss, w0, 1e-6)));
        }
    }
    report.entries.push_back(lp_e);
    report.entries.push_back(gp_e);
    return report;
}

} // namespace alr
