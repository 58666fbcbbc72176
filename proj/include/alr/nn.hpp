#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "alr/error.hpp"
#include "alr/tape.hpp"
#include "alr/tensor.hpp"

namespace alr {

enum class Activation { relu };
enum class Mode { train, eval };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

struct MlpSpec {
    std::size_t input_dim = 2;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 1;
    Activation activation = Activation::relu;
    /// One flag per hidden layer; empty means no batch norm anywhere.
    std::vector<bool> batchnorm;
    bool spectral_norm = false;

    [[nodiscard]] bool has_batchnorm(std::size_t layer) const
    {
        return layer < batchnorm.size() && batchnorm[layer];
    }

    [[nodiscard]] std::size_t num_layers() const { return hidden.size() + 1; }

    void validate() const
    {
        if (hidden.empty()) throw Error(ErrorKind::config, "mlp needs at least one hidden layer");
        if (input_dim == 0 || output_dim == 0) throw Error(ErrorKind::config, "mlp dims must be positive");
        for (std::size_t w : hidden) {
            if (w == 0) throw Error(ErrorKind::config, "mlp hidden width must be positive");
        }
        if (!batchnorm.empty() && batchnorm.size() != hidden.size()) {
            throw Error(ErrorKind::config, "batchnorm flags must match the number of hidden layers");
        }
    }

    /// input -> hidden... -> output, e.g. {2, 20, 40, 20, 1}.
    static MlpSpec from_widths(const std::vector<std::size_t>& widths, bool with_batchnorm = false)
    {
        if (widths.size() < 3) throw Error(ErrorKind::config, "mlp widths need input, hidden and output");
        MlpSpec spec;
        spec.input_dim = widths.front();
        spec.output_dim = widths.back();
        spec.hidden.assign(widths.begin() + 1, widths.end() - 1);
        if (with_batchnorm) spec.batchnorm.assign(spec.hidden.size(), true);
        spec.validate();
        return spec;
    }

    friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

struct BatchNormParams {
    Tensor scale;
    Tensor shift;
    Tensor running_mean;
    Tensor running_var;
};

/// Persistent power-iteration vectors for one weight matrix.
struct SpectralState {
    Tensor left;  // 1 x in
    Tensor right; // 1 x out
};

struct LayerParams {
    Tensor weight; // in x out
    Tensor bias;   // 1 x out
    std::optional<BatchNormParams> bn;
    std::optional<SpectralState> sn;
};

struct ParamSet {
    std::vector<LayerParams> layers;

    /// Trainable tensors in a fixed order: per layer weight, bias, [bn scale, bn shift].
    std::vector<Tensor*> trainable()
    {
        std::vector<Tensor*> out;
        for (auto& l : layers) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
            if (l.bn) {
                out.push_back(&l.bn->scale);
                out.push_back(&l.bn->shift);
            }
        }
        return out;
    }

    [[nodiscard]] std::vector<Tensor> trainable_values() const
    {
        std::vector<Tensor> out;
        for (const auto& l : layers) {
            out.push_back(l.weight);
            out.push_back(l.bias);
            if (l.bn) {
                out.push_back(l.bn->scale);
                out.push_back(l.bn->shift);
            }
        }
        return out;
    }
};

struct SpectralResult {
    Tensor normalized;
    double sigma = 0.0;
    bool zero_matrix = false;
};

/// Divide W by the power-iteration estimate of its largest singular value.
/// The state vectors carry over between calls, so one iteration per training
/// step tracks a slowly changing matrix.
inline SpectralResult spectral_normalize(const Tensor& w, std::size_t iters, SpectralState& state)
{
    if (w.shape().size() != 2) throw Error(ErrorKind::shape, "spectral_normalize needs a 2-D matrix");
    if (iters == 0) throw Error(ErrorKind::config, "spectral_normalize needs at least one iteration");
    const std::size_t in = w.rows(), out = w.cols();
    bool zero = true;
    for (double v : w.data()) zero = zero && v == 0.0;
    if (zero) return {w, 0.0, true};

    auto reset = [](std::size_t n) { return Tensor::full(1, n, 1.0 / std::sqrt(static_cast<double>(n))); };
    if (state.left.cols() != in || state.left.rows() != 1) state.left = reset(in);
    if (state.right.cols() != out || state.right.rows() != 1) state.right = reset(out);

    for (std::size_t it = 0; it < iters; ++it) {
        Tensor r = normalize_rows(detail::matmul(state.left, w, false, false)); // 1 x out
        if (row_norms(r)[0] == 0.0) r = reset(out);
        Tensor l = normalize_rows(detail::matmul(r, w, false, true)); // 1 x in
        if (row_norms(l)[0] == 0.0) l = reset(in);
        state.right = std::move(r);
        state.left = std::move(l);
    }
    const double sigma = detail::matmul(detail::matmul(state.left, w, false, false), state.right, false, true).item();
    if (sigma == 0.0) return {w, 0.0, true};
    Tensor normalized = detail::map(w, [sigma](double v) { return v / sigma; });
    return {std::move(normalized), sigma, false};
}

/// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline ParamSet init_params(const MlpSpec& spec, Rng& rng)
{
    spec.validate();
    ParamSet ps;
    std::size_t in = spec.input_dim;
    for (std::size_t i = 0; i < spec.num_layers(); ++i) {
        const std::size_t out = i < spec.hidden.size() ? spec.hidden[i] : spec.output_dim;
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        LayerParams l;
        l.weight = uniform_tensor(in, out, rng, -bound, bound);
        l.bias = uniform_tensor(1, out, rng, -bound, bound);
        if (i < spec.hidden.size() && spec.has_batchnorm(i)) {
            l.bn = BatchNormParams{Tensor::full(1, out, 1.0), Tensor::zeros(1, out), Tensor::zeros(1, out),
                                   Tensor::full(1, out, 1.0)};
        }
        if (spec.spectral_norm) {
            l.sn = SpectralState{random_unit_rows(1, in, rng), random_unit_rows(1, out, rng)};
        }
        ps.layers.push_back(std::move(l));
        in = out;
    }
    return ps;
}

/// Parameters of one network placed on a tape as differentiable leaves.
struct BoundParams {
    std::vector<Var> leaves; // same order as ParamSet::trainable()

    struct Layer {
        Var weight, bias, scale, shift;
    };
    std::vector<Layer> layers;
};

inline BoundParams bind(Tape& tape, const ParamSet& params, bool trainable = true)
{
    BoundParams b;
    auto leaf = [&](const Tensor& t) {
        Var v = trainable ? tape.variable(t) : tape.constant(t);
        b.leaves.push_back(v);
        return v;
    };
    for (const auto& l : params.layers) {
        BoundParams::Layer bl;
        bl.weight = leaf(l.weight);
        bl.bias = leaf(l.bias);
        if (l.bn) {
            bl.scale = leaf(l.bn->scale);
            bl.shift = leaf(l.bn->shift);
        }
        b.layers.push_back(bl);
    }
    return b;
}

/// Batch statistics observed by a train-mode forward, per hidden layer.
struct BatchStats {
    std::vector<std::optional<std::pair<Tensor, Tensor>>> mean_var;
};

/// Run the MLP on a batch (rows are examples). Does not mutate the params;
/// running statistics are updated separately via update_running_stats.
inline Var forward(const MlpSpec& spec, const ParamSet& params, const BoundParams& bound, const Var& x, Mode mode,
                   BatchStats* stats = nullptr)
{
    if (x.cols() != spec.input_dim) {
        throw Error(ErrorKind::shape, "forward: input " + x.value().shape_str() + " but network expects " +
                                          std::to_string(spec.input_dim) + " features");
    }
    if (bound.layers.size() != spec.num_layers() || params.layers.size() != spec.num_layers()) {
        throw Error(ErrorKind::shape, "forward: parameter set does not match the network spec");
    }
    Tape& tape = *x.tape();
    if (stats) stats->mean_var.assign(spec.hidden.size(), std::nullopt);
    Var h = x;
    for (std::size_t i = 0; i < spec.num_layers(); ++i) {
        const auto& bl = bound.layers[i];
        const auto& pl = params.layers[i];
        Var w = bl.weight;
        if (spec.spectral_norm && pl.sn) {
            Tensor outer = detail::matmul(pl.sn->left, pl.sn->right, true, false);
            Var sigma = sum(mul(w, tape.constant(std::move(outer))));
            w = div(w, sigma);
        }
        h = affine(h, w, bl.bias);
        if (i == spec.hidden.size()) break;
        if (spec.has_batchnorm(i)) {
            if (!pl.bn) throw Error(ErrorKind::shape, "forward: missing batchnorm params for layer " + std::to_string(i));
            if (mode == Mode::train) {
                Var mu = col_mean(h);
                Var centered = sub(h, mu);
                Var var = col_mean(square(centered));
                if (stats) stats->mean_var[i] = std::make_pair(mu.value(), var.value());
                h = div(centered, sqrt(shift(var, kBatchNormEpsilon)));
            } else {
                Var mu = tape.constant(pl.bn->running_mean);
                Var sd = tape.constant(detail::map(pl.bn->running_var, [](double v) {
                    return std::sqrt(v + kBatchNormEpsilon);
                }));
                h = div(sub(h, mu), sd);
            }
            h = add(mul(h, bl.scale), bl.shift);
        }
        h = relu(h);
    }
    return h;
}

inline void update_running_stats(ParamSet& params, const BatchStats& stats)
{
    for (std::size_t i = 0; i < stats.mean_var.size() && i < params.layers.size(); ++i) {
        auto& bn = params.layers[i].bn;
        if (!bn || !stats.mean_var[i]) continue;
        const auto& [mu, var] = *stats.mean_var[i];
        auto rm = bn->running_mean.mutable_data();
        auto rv = bn->running_var.mutable_data();
        for (std::size_t j = 0; j < rm.size(); ++j) {
            rm[j] = kBatchNormMomentum * rm[j] + (1.0 - kBatchNormMomentum) * mu[j];
            rv[j] = kBatchNormMomentum * rv[j] + (1.0 - kBatchNormMomentum) * var[j];
        }
    }
}

/// Advance every layer's spectral state by `iters` power iterations.
inline void refresh_spectral(ParamSet& params, std::size_t iters)
{
    for (auto& l : params.layers) {
        if (l.sn) spectral_normalize(l.weight, iters, *l.sn);
    }
}

/// A network bundled with its spec.
struct Mlp {
    MlpSpec spec;
    ParamSet params;

    static Mlp create(const MlpSpec& spec, Rng& rng) { return {spec, init_params(spec, rng)}; }
};

/// Differentiable closure over a network bound on some tape.
using Model = std::function<Var(const Var&)>;

inline Model as_model(const Mlp& net, const BoundParams& bound, Mode mode)
{
    return [&net, bound, mode](const Var& x) { return forward(net.spec, net.params, bound, x, mode); };
}

/// Outputs for a batch of points, no gradients recorded.
inline Tensor evaluate(const Mlp& net, const Tensor& x, Mode mode = Mode::eval)
{
    Tape tape;
    Tape::NoGrad guard(tape);
    BoundParams b = bind(tape, net.params, false);
    return forward(net.spec, net.params, b, tape.constant(x), mode).value();
}

/// Gradient of the (scalar) network output with respect to each input row.
inline Tensor input_gradients(const Mlp& net, const Tensor& x, Mode mode = Mode::eval)
{
    if (net.spec.output_dim != 1) throw Error(ErrorKind::shape, "input_gradients needs a scalar-output network");
    Tape tape;
    BoundParams b = bind(tape, net.params, false);
    Var xv = tape.variable(x);
    Var y = forward(net.spec, net.params, b, xv, mode);
    return tape.grad(sum(y), {xv})[0];
}

// ---------------------------------------------------------------------------

struct AdamState {
    double lr = 2e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double epsilon = 1e-8;
    std::size_t step = 0;
    std::vector<Tensor> first;
    std::vector<Tensor> second;
};

/// One bias-corrected Adam update. Throws on non-finite gradients before
/// touching any parameter.
inline void adam_step(AdamState& state, const std::vector<Tensor*>& params, const std::vector<Tensor>& grads)
{
    if (params.size() != grads.size()) {
        throw Error(ErrorKind::shape, "adam_step: " + std::to_string(grads.size()) + " gradients for " +
                                          std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i]->size()) {
            throw Error(ErrorKind::shape, "adam_step: gradient " + grads[i].shape_str() + " for parameter " +
                                              params[i]->shape_str());
        }
        if (!grads[i].all_finite()) {
            throw Error(ErrorKind::non_finite, "adam_step: non-finite gradient for parameter " + std::to_string(i));
        }
    }
    if (state.first.size() != params.size()) {
        state.first.clear();
        state.second.clear();
        for (const Tensor* p : params) {
            state.first.push_back(Tensor::zeros(p->rows(), p->cols()));
            state.second.push_back(Tensor::zeros(p->rows(), p->cols()));
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->mutable_data();
        auto m = state.first[i].mutable_data();
        auto v = state.second[i].mutable_data();
        const auto g = grads[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

} // namespace alr
