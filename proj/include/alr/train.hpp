#pragma once

// Training harnesses: the radial toy regression, a 2-D WGAN, and 2-D
// semi-supervised classification, each with a selectable Lipschitz penalty.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "alr/data.hpp"
#include "alr/error.hpp"
#include "alr/io.hpp"
#include "alr/metrics.hpp"
#include "alr/nn.hpp"
#include "alr/oracle.hpp"
#include "alr/penalty.hpp"
#include "alr/tape.hpp"

namespace alr {

enum class PenaltyKind { none, alp, lp, gp, explicit_random };

inline PenaltyKind penalty_from_string(const std::string& s)
{
    if (s == "none") return PenaltyKind::none;
    if (s == "alp" || s == "alr") return PenaltyKind::alp;
    if (s == "lp") return PenaltyKind::lp;
    if (s == "gp") return PenaltyKind::gp;
    if (s == "explicit-random" || s == "explicit") return PenaltyKind::explicit_random;
    throw Error(ErrorKind::config, "unknown penalty '" + s + "'");
}

inline const char* to_string(PenaltyKind p)
{
    switch (p) {
    case PenaltyKind::none: return "none";
    case PenaltyKind::alp: return "alp";
    case PenaltyKind::lp: return "lp";
    case PenaltyKind::gp: return "gp";
    case PenaltyKind::explicit_random: return "explicit-random";
    }
    return "?";
}

struct TrainConfig {
    std::size_t iterations = 1u << 14;
    std::size_t batch_size = 64;
    std::size_t reg_batch_size = 1024;
    std::size_t critic_steps = 5;
    double lr = 2e-4;
    bool lr_decay = true;
    double beta1 = 0.0;
    double beta2 = 0.9;
    std::uint64_t seed = 0;
    PenaltyKind penalty = PenaltyKind::alp;
    AlrConfig alr;
    MetricPair pair;
    std::size_t log_every = 100;
    std::size_t grid_every = 0; // 0 disables the periodic grid estimate
    oracle::GridSpec monitor_grid{{-4.0, -4.0}, {4.0, 4.0}, {64, 64}};
    bool record_timing = false;

    void validate() const
    {
        if (iterations == 0 || batch_size == 0 || reg_batch_size == 0 || critic_steps == 0 || log_every == 0) {
            throw Error(ErrorKind::config, "iteration and batch counts must be positive");
        }
        if (!(lr >= 0.0)) throw Error(ErrorKind::config, "learning rate must be >= 0");
        alr.validate();
        monitor_grid.validate();
    }
};

/// lr(t) = lr0 * (1 - t / T) with linear decay, lr0 otherwise.
inline double learning_rate(double lr0, std::size_t t, std::size_t total, bool decay)
{
    if (!decay) return lr0;
    if (t >= total) return 0.0;
    return lr0 * (1.0 - static_cast<double>(t) / static_cast<double>(total));
}

// ---------------------------------------------------------------------------
// Adapters from networks to the black-box closures the oracles take.

inline oracle::GridFn network_grid_fn(const Mlp& net, std::size_t output = 0)
{
    return [&net, output](const std::vector<double>& pts) {
        Tensor x({pts.size() / 2, 2}, pts);
        Tensor y = evaluate(net, x, Mode::eval);
        std::vector<double> out(y.rows());
        for (std::size_t i = 0; i < y.rows(); ++i) out[i] = y(i, output);
        return out;
    };
}

inline oracle::GridGradFn network_grid_grad(const Mlp& net)
{
    return [&net](const std::vector<double>& pts) {
        Tensor x({pts.size() / 2, 2}, pts);
        return input_gradients(net, x, Mode::eval).values();
    };
}

inline oracle::VectorFn network_point_fn(const Mlp& net)
{
    return [&net](std::span<const double> p) {
        Tensor x({1, p.size()}, std::vector<double>(p.begin(), p.end()));
        return evaluate(net, x, Mode::eval).values();
    };
}

/// Gradient-norm grid of a scalar network in eval mode.
inline oracle::GridResult network_grid_lipschitz(const Mlp& net, const oracle::GridSpec& grid,
                                                 oracle::GridMode mode = oracle::GridMode::grad_norm)
{
    if (mode == oracle::GridMode::grad_norm) {
        return oracle::grid_lipschitz_gradnorm(network_grid_fn(net), grid, network_grid_grad(net));
    }
    return oracle::grid_lipschitz_pairwise(network_grid_fn(net), grid);
}

inline oracle::GridResult f_opt_gradnorm_grid(const oracle::GridSpec& grid)
{
    auto f = [](const std::vector<double>& p) {
        std::vector<double> out(p.size() / 2);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f_opt(p[2 * i], p[2 * i + 1]);
        return out;
    };
    auto g = [](const std::vector<double>& p) {
        std::vector<double> out(p.size());
        for (std::size_t i = 0; i < p.size() / 2; ++i) {
            const auto d = f_opt_gradient(p[2 * i], p[2 * i + 1]);
            out[2 * i] = d[0];
            out[2 * i + 1] = d[1];
        }
        return out;
    };
    return oracle::grid_lipschitz_gradnorm(f, grid, g);
}

inline Tensor f_target_grid(const oracle::GridSpec& grid)
{
    Tensor out = Tensor::zeros(grid.resolution[1], grid.resolution[0]);
    for (std::size_t i = 0; i < grid.resolution[1]; ++i) {
        for (std::size_t j = 0; j < grid.resolution[0]; ++j) {
            const auto p = grid.point(i, j);
            out.at(i, j) = f_target(p[0], p[1]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace detail {

class Stopwatch {
public:
    explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}

    [[nodiscard]] std::int64_t ms() const
    {
        if (!enabled_) return 0;
        return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start_)
            .count();
    }

private:
    bool enabled_;
    std::chrono::steady_clock::time_point start_;
};

inline bool finite(double v) { return std::isfinite(v); }

} // namespace detail

/// Penalty of the configured kind on a regularization batch. `partner` is
/// the second point of each pair for the explicit random-pair penalty and
/// the interpolation partner for lp/gp (ignored when empty).
inline std::optional<PenaltyResult> apply_penalty(const TrainConfig& cfg, const Model& f, const Var& x,
                                                  const Tensor* partner, Rng& rng)
{
    Tape& tape = *x.tape();
    switch (cfg.penalty) {
    case PenaltyKind::none: return std::nullopt;
    case PenaltyKind::alp: return alp(f, x, cfg.pair, cfg.alr, rng);
    case PenaltyKind::lp:
    case PenaltyKind::gp: {
        Var at = x;
        if (partner) at = tape.constant(interpolate_pairs(x.value(), *partner, rng));
        return cfg.penalty == PenaltyKind::lp ? lp(f, at, cfg.alr.lambda, cfg.alr.K) : gp(f, at, cfg.alr.lambda);
    }
    case PenaltyKind::explicit_random: {
        if (!partner) throw Error(ErrorKind::config, "explicit-random penalty needs a partner batch");
        return explicit_random_pair(f, x, tape.constant(*partner), cfg.alr.lambda, cfg.alr.K);
    }
    }
    return std::nullopt;
}

inline void fill_report(MetricsRow& row, const std::optional<PenaltyResult>& p)
{
    if (!p) return;
    row.penalty = p->report.value;
    row.violations = p->report.violations;
    row.mean_q = p->report.mean_quotient;
    row.max_q = p->report.max_quotient;
}

// ---------------------------------------------------------------------------
// Toy regression on [-4, 4]^2.

struct ToyResult {
    Mlp net;
    std::vector<MetricsRow> rows;
    double final_mse = 0.0;
    oracle::GridResult gradnorm;
    bool diverged = false;
    std::string divergence;
};

inline constexpr std::size_t kToyEvalPoints = 4096;

inline MlpSpec toy_network(bool batchnorm = false, bool spectral_norm = false)
{
    MlpSpec s = MlpSpec::from_widths({2, 20, 40, 20, 1}, batchnorm);
    s.spectral_norm = spectral_norm;
    return s;
}

inline TrainConfig toy_defaults()
{
    TrainConfig c;
    c.iterations = 1u << 14;
    c.batch_size = 64;
    c.reg_batch_size = 1024;
    c.lr = 1e-3;
    c.lr_decay = true;
    c.beta1 = 0.9;
    c.beta2 = 0.999;
    c.penalty = PenaltyKind::alp;
    c.alr.lambda = 1.0;
    c.alr.k = 5;
    c.alr.eps = EpsilonDist::uniform(1e-6, 1e-5);
    c.alr.K = 1.0;
    c.pair = MetricPair{InputMetric::euclidean, OutputMetric::abs_diff};
    c.log_every = 256;
    return c;
}

/// Mean squared error of a network against f_target on a fixed point set.
inline double toy_mse(const Mlp& net, std::uint64_t seed = 777)
{
    DataSampler s(Dataset::toy_a4, seed);
    Tensor x = s.sample(kToyEvalPoints);
    Tensor y = evaluate(net, x, Mode::eval);
    double e = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double d = y(i, 0) - f_target(x(i, 0), x(i, 1));
        e += d * d;
    }
    return e / static_cast<double>(x.rows());
}

inline ToyResult train_toy(const TrainConfig& cfg, const MlpSpec& spec,
                           const oracle::GridSpec& heatmap = oracle::GridSpec{})
{
    cfg.validate();
    if (spec.input_dim != 2 || spec.output_dim != 1) throw Error(ErrorKind::config, "toy network must map R^2 -> R");
    Rng master(cfg.seed);
    Rng init_rng = master.split();
    DataSampler data(Dataset::toy_a4, master.next_u64());
    DataSampler reg_data(Dataset::toy_a4, master.next_u64());
    Rng penalty_rng = master.split();

    ToyResult res{Mlp::create(spec, init_rng), {}, 0.0, {}, false, {}};
    Mlp& net = res.net;
    AdamState adam;
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    detail::Stopwatch clock(cfg.record_timing);

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        if (spec.spectral_norm) refresh_spectral(net.params, 1);
        Tape tape;
        BoundParams bound = bind(tape, net.params);
        Model f = as_model(net, bound, Mode::train);

        Tensor x = data.sample(cfg.batch_size);
        Tensor y = Tensor::zeros(x.rows(), 1);
        for (std::size_t i = 0; i < x.rows(); ++i) y.at(i, 0) = f_target(x(i, 0), x(i, 1));
        BatchStats stats;
        Var pred = forward(spec, net.params, bound, tape.constant(x), Mode::train, &stats);
        Var mse = mean(square(sub(pred, tape.constant(y))));
        Var loss = mse;

        std::optional<PenaltyResult> pen;
        if (cfg.penalty != PenaltyKind::none) {
            Tensor xr = reg_data.sample(cfg.reg_batch_size);
            std::optional<Tensor> partner;
            if (cfg.penalty == PenaltyKind::explicit_random) partner = reg_data.sample(cfg.reg_batch_size);
            pen = apply_penalty(cfg, f, tape.constant(xr), partner ? &*partner : nullptr, penalty_rng);
            loss = add(loss, pen->loss);
        }

        const double lv = loss.value().item();
        if (!detail::finite(lv)) {
            res.diverged = true;
            res.divergence = "non-finite loss at iteration " + std::to_string(it);
            break;
        }
        std::vector<Tensor> grads = tape.grad(loss, bound.leaves);
        adam.lr = learning_rate(cfg.lr, it, cfg.iterations, cfg.lr_decay);
        try {
            adam_step(adam, net.params.trainable(), grads);
        } catch (const Error& e) {
            res.diverged = true;
            res.divergence = e.what();
            break;
        }
        update_running_stats(net.params, stats);

        const bool last = it + 1 == cfg.iterations;
        if (it % cfg.log_every == 0 || last) {
            MetricsRow row;
            row.iter = it;
            row.critic_loss = mse.value().item();
            fill_report(row, pen);
            if (cfg.grid_every && (it % cfg.grid_every == 0 || last)) {
                row.grid_lip = network_grid_lipschitz(net, cfg.monitor_grid).max;
            }
            row.wall_ms = clock.ms();
            res.rows.push_back(row);
        }
    }
    res.final_mse = toy_mse(net);
    res.gradnorm = network_grid_lipschitz(net, heatmap);
    return res;
}

// ---------------------------------------------------------------------------
// 2-D WGAN.

struct WganSpec {
    MlpSpec critic = MlpSpec::from_widths({2, 64, 64, 64, 1});
    MlpSpec generator = MlpSpec::from_widths({2, 64, 64, 64, 2});
    Dataset data = Dataset::eight_gaussians;
    std::size_t sample_every = 0; // 0: only the final sample dump
    std::size_t sample_count = 10000;
};

inline TrainConfig wgan_defaults()
{
    TrainConfig c;
    c.iterations = 2000;
    c.batch_size = 64;
    c.critic_steps = 5;
    c.lr = 2e-4;
    c.lr_decay = true;
    c.beta1 = 0.0;
    c.beta2 = 0.9;
    c.penalty = PenaltyKind::alp;
    c.alr = AlrConfig{};
    c.alr.lambda = 100.0;
    c.alr.K = 1.0;
    c.alr.xi = 10.0;
    c.alr.k = 1;
    c.alr.eps = EpsilonDist::uniform(0.1, 10.0);
    c.pair = MetricPair{InputMetric::euclidean, OutputMetric::abs_diff};
    c.log_every = 50;
    c.grid_every = 20;
    c.monitor_grid = oracle::GridSpec{{-3.0, -3.0}, {3.0, 3.0}, {64, 64}};
    return c;
}

struct WganLosses {
    Var critic_loss;
    Var gen_loss;
    std::optional<PenaltyResult> penalty;
};

/// Critic loss E f(g(z)) - E f(x) + penalty, generator loss -E f(g(z)).
/// The penalty acts on the real and generated batches stacked together
/// (alp), on their interpolations (lp/gp), or on real/generated pairs
/// (explicit-random).
inline WganLosses wgan_losses(const Model& f, const Model& g, const Var& xr, const Var& z, const TrainConfig& cfg,
                              Rng& rng, bool with_penalty = true)
{
    Tape& tape = *xr.tape();
    Var xg = g(z);
    Var fg = f(xg);
    WganLosses out;
    out.gen_loss = neg(mean(fg));
    out.critic_loss = sub(mean(fg), mean(f(xr)));
    if (with_penalty && cfg.penalty != PenaltyKind::none) {
        const Tensor gen = xg.value();
        if (cfg.penalty == PenaltyKind::alp) {
            out.penalty = apply_penalty(cfg, f, tape.constant(concat_rows(xr.value(), gen)), nullptr, rng);
        } else {
            if (gen.rows() != xr.rows()) throw Error(ErrorKind::shape, "wgan_losses: real and fake batch sizes differ");
            out.penalty = apply_penalty(cfg, f, tape.constant(xr.value()), &gen, rng);
        }
        out.critic_loss = add(out.critic_loss, out.penalty->loss);
    }
    return out;
}

struct WganResult {
    Mlp critic;
    Mlp generator;
    std::vector<MetricsRow> rows;
    std::vector<std::pair<std::size_t, Tensor>> samples;
    std::size_t coverage = 0;
    bool diverged = false;
    std::string divergence;
};

inline Tensor generate(const Mlp& generator, std::size_t n, Rng& rng)
{
    return evaluate(generator, normal_tensor(n, generator.spec.input_dim, rng), Mode::eval);
}

inline WganResult train_wgan2d(const TrainConfig& cfg, const WganSpec& spec = {})
{
    cfg.validate();
    if (spec.critic.output_dim != 1 || spec.generator.output_dim != spec.critic.input_dim) {
        throw Error(ErrorKind::config, "generator output must match critic input; critic must be scalar");
    }
    Rng master(cfg.seed);
    Rng init_rng = master.split();
    DataSampler data(spec.data, master.next_u64());
    Rng latent_rng = master.split();
    Rng penalty_rng = master.split();
    Rng sample_rng = master.split();

    WganResult res;
    res.critic = Mlp::create(spec.critic, init_rng);
    res.generator = Mlp::create(spec.generator, init_rng);
    AdamState critic_opt, gen_opt;
    for (AdamState* s : {&critic_opt, &gen_opt}) {
        s->beta1 = cfg.beta1;
        s->beta2 = cfg.beta2;
    }
    detail::Stopwatch clock(cfg.record_timing);
    const std::size_t zdim = spec.generator.input_dim;

    auto fail = [&res](const std::string& why) {
        res.diverged = true;
        res.divergence = why;
    };

    for (std::size_t it = 0; it < cfg.iterations && !res.diverged; ++it) {
        const double lr = learning_rate(cfg.lr, it, cfg.iterations, cfg.lr_decay);
        MetricsRow row;
        row.iter = it;
        std::optional<PenaltyResult> last_penalty;

        for (std::size_t c = 0; c < cfg.critic_steps; ++c) {
            if (spec.critic.spectral_norm) refresh_spectral(res.critic.params, 1);
            Tape tape;
            BoundParams cb = bind(tape, res.critic.params);
            BoundParams gb = bind(tape, res.generator.params, false);
            Model f = as_model(res.critic, cb, Mode::train);
            Model g = as_model(res.generator, gb, Mode::train);
            Var xr = tape.constant(data.sample(cfg.batch_size));
            Var z = tape.constant(normal_tensor(cfg.batch_size, zdim, latent_rng));
            WganLosses l = wgan_losses(f, g, xr, z, cfg, penalty_rng);
            const double lv = l.critic_loss.value().item();
            if (!detail::finite(lv)) {
                fail("non-finite critic loss at iteration " + std::to_string(it));
                break;
            }
            critic_opt.lr = lr;
            try {
                adam_step(critic_opt, res.critic.params.trainable(), tape.grad(l.critic_loss, cb.leaves));
            } catch (const Error& e) {
                fail(e.what());
                break;
            }
            row.critic_loss = lv;
            last_penalty = l.penalty;
        }
        if (res.diverged) break;

        {
            Tape tape;
            BoundParams cb = bind(tape, res.critic.params, false);
            BoundParams gb = bind(tape, res.generator.params);
            Model f = as_model(res.critic, cb, Mode::train);
            Model g = as_model(res.generator, gb, Mode::train);
            Var z = tape.constant(normal_tensor(2 * cfg.batch_size, zdim, latent_rng));
            Var gen_loss = neg(mean(f(g(z))));
            const double gv = gen_loss.value().item();
            if (!detail::finite(gv)) {
                fail("non-finite generator loss at iteration " + std::to_string(it));
                break;
            }
            gen_opt.lr = lr;
            try {
                adam_step(gen_opt, res.generator.params.trainable(), tape.grad(gen_loss, gb.leaves));
            } catch (const Error& e) {
                fail(e.what());
                break;
            }
            row.gen_loss = gv;
        }

        const bool last = it + 1 == cfg.iterations;
        const bool grid_now = cfg.grid_every && (it % cfg.grid_every == 0 || last);
        if (it % cfg.log_every == 0 || last || grid_now) {
            fill_report(row, last_penalty);
            if (grid_now) row.grid_lip = network_grid_lipschitz(res.critic, cfg.monitor_grid).max;
            row.wall_ms = clock.ms();
            res.rows.push_back(row);
        }
        if (spec.sample_every && it % spec.sample_every == 0 && !last) {
            res.samples.emplace_back(it, generate(res.generator, 1000, sample_rng));
        }
    }
    Tensor final_samples = generate(res.generator, spec.sample_count, sample_rng);
    if (spec.data == Dataset::eight_gaussians) res.coverage = mode_coverage(final_samples);
    res.samples.emplace_back(cfg.iterations, std::move(final_samples));
    return res;
}

// ---------------------------------------------------------------------------
// Semi-supervised two-moons.

struct SemisupSpec {
    MlpSpec classifier = MlpSpec::from_widths({2, 64, 64, 2});
    std::size_t labeled = 8;
    std::size_t unlabeled = 992;
    std::size_t test = 200;
};

inline TrainConfig semisup_defaults()
{
    TrainConfig c;
    c.iterations = 2000;
    c.batch_size = 128;
    c.lr = 3e-3;
    c.lr_decay = false;
    c.beta1 = 0.9;
    c.beta2 = 0.999;
    c.penalty = PenaltyKind::alp;
    c.alr.K = 0.0;
    c.alr.lambda = 1.0;
    c.alr.xi = 1e-3;
    c.alr.k = 1;
    c.alr.eps = EpsilonDist::uniform(0.05, 0.5);
    c.alr.form = PenaltyForm::linear;
    c.alr.fix_reference = true;
    c.pair = MetricPair{InputMetric::euclidean, OutputMetric::mean_squared_logit};
    c.log_every = 100;
    return c;
}

struct SemisupData {
    LabeledBatch labeled;
    Tensor unlabeled;
    LabeledBatch test;
};

inline SemisupData make_semisup_data(const SemisupSpec& spec, std::uint64_t seed)
{
    DataSampler s(Dataset::two_moons, seed);
    SemisupData d;
    d.labeled = s.sample_balanced_moons(spec.labeled);
    d.unlabeled = s.sample(spec.unlabeled);
    d.test = s.sample_balanced_moons(spec.test);
    return d;
}

inline double accuracy(const Mlp& net, const LabeledBatch& batch)
{
    Tensor logits = evaluate(net, batch.x, Mode::eval);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits(i, j) > logits(i, best)) best = j;
        }
        correct += best == batch.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

struct SemisupResult {
    Mlp net;
    std::vector<MetricsRow> rows;
    std::vector<double> losses; // total loss per iteration
    double test_accuracy = 0.0;
    bool diverged = false;
    std::string divergence;
};

/// Consistency term on an unlabeled batch. With d_Y = kl and a fixed radius
/// this is VAT's smoothness loss; otherwise the adversarial Lipschitz penalty
/// with the reference output held fixed.
inline PenaltyResult semisup_consistency(const TrainConfig& cfg, const Model& f, const Var& x, Rng& rng)
{
    if (cfg.pair.dy == OutputMetric::kl && cfg.alr.eps.kind == EpsilonDist::Kind::fixed) {
        PenaltyResult r = lds_vat(f, x, cfg.alr.eps.lo, cfg.alr.xi, cfg.alr.k, rng);
        r.loss = scale(r.loss, cfg.alr.lambda);
        r.report.value = r.loss.value().item();
        return r;
    }
    AlrConfig a = cfg.alr;
    a.fix_reference = true;
    return alp(f, x, cfg.pair, a, rng);
}

/// Cross-entropy on the labeled points plus lambda * (consistency + entropy)
/// on an unlabeled batch; lambda = 0 is plain supervised training.
inline SemisupResult train_semisup2d(const TrainConfig& cfg, const SemisupSpec& spec = {})
{
    cfg.validate();
    if (spec.classifier.input_dim != 2 || spec.classifier.output_dim < 2) {
        throw Error(ErrorKind::config, "classifier must map R^2 to >= 2 logits");
    }
    Rng master(cfg.seed);
    Rng init_rng = master.split();
    const SemisupData data = make_semisup_data(spec, master.next_u64());
    Rng batch_rng = master.split();
    Rng penalty_rng = master.split();

    SemisupResult res{Mlp::create(spec.classifier, init_rng), {}, {}, 0.0, false, {}};
    Mlp& net = res.net;
    AdamState adam;
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    detail::Stopwatch clock(cfg.record_timing);
    const bool regularize = cfg.alr.lambda > 0.0 && cfg.penalty != PenaltyKind::none;

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        Tape tape;
        BoundParams bound = bind(tape, net.params);
        Model f = as_model(net, bound, Mode::train);
        Var ce = cross_entropy(f(tape.constant(data.labeled.x)), data.labeled.labels);
        Var loss = ce;
        std::optional<PenaltyResult> pen;
        if (regularize) {
            const std::size_t n = std::min(cfg.batch_size, data.unlabeled.rows());
            Tensor xu = Tensor::zeros(n, 2);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = batch_rng.index(data.unlabeled.rows());
                xu.at(i, 0) = data.unlabeled(k, 0);
                xu.at(i, 1) = data.unlabeled(k, 1);
            }
            Var xv = tape.constant(xu);
            pen = semisup_consistency(cfg, f, xv, penalty_rng);
            loss = add(loss, add(pen->loss, scale(entropy_min(f, xv), cfg.alr.lambda)));
        }
        const double lv = loss.value().item();
        res.losses.push_back(lv);
        if (!detail::finite(lv)) {
            res.diverged = true;
            res.divergence = "non-finite loss at iteration " + std::to_string(it);
            break;
        }
        adam.lr = learning_rate(cfg.lr, it, cfg.iterations, cfg.lr_decay);
        try {
            adam_step(adam, net.params.trainable(), tape.grad(loss, bound.leaves));
        } catch (const Error& e) {
            res.diverged = true;
            res.divergence = e.what();
            break;
        }
        const bool last = it + 1 == cfg.iterations;
        if (it % cfg.log_every == 0 || last) {
            MetricsRow row;
            row.iter = it;
            row.critic_loss = lv;
            fill_report(row, pen);
            row.test_acc = accuracy(net, data.test);
            row.wall_ms = clock.ms();
            res.rows.push_back(row);
        }
    }
    res.test_accuracy = accuracy(net, data.test);
    return res;
}

} // namespace alr
