#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "alr/checkpoint.hpp"
#include "alr/train.hpp"
#include "test_util.hpp"

namespace alr {
namespace {

TEST(LearningRate, LinearDecayToZero)
{
    EXPECT_EQ(learning_rate(2e-4, 0, 100, true), 2e-4);
    EXPECT_DOUBLE_EQ(learning_rate(2e-4, 50, 100, true), 1e-4);
    EXPECT_DOUBLE_EQ(learning_rate(2e-4, 75, 100, true), 5e-5);
    EXPECT_EQ(learning_rate(2e-4, 100, 100, true), 0.0);
    EXPECT_EQ(learning_rate(2e-4, 150, 100, true), 0.0);
    EXPECT_EQ(learning_rate(2e-4, 75, 100, false), 2e-4);
}

TEST(TrainConfig, PenaltyNamesAndValidation)
{
    for (PenaltyKind p : {PenaltyKind::none, PenaltyKind::alp, PenaltyKind::lp, PenaltyKind::gp,
                          PenaltyKind::explicit_random}) {
        EXPECT_EQ(penalty_from_string(to_string(p)), p);
    }
    EXPECT_EQ(penalty_from_string("alr"), PenaltyKind::alp);
    EXPECT_THROW((void)penalty_from_string("wc"), Error);

    TrainConfig c;
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), Error);
    c = TrainConfig{};
    c.alr.eps = EpsilonDist::uniform(1.0, 0.5);
    EXPECT_THROW(c.validate(), Error);
}

// ---------------------------------------------------------------------------

Model linear_critic(double w0, double w1)
{
    return [w0, w1](const Var& x) { return matmul(x, x.tape()->constant(Tensor::column({w0, w1}))); };
}

const Model kIdentity = [](const Var& z) { return z; };

TEST(WganLosses, ZeroCriticGivesZeroLosses)
{
    Rng rng(1);
    Tape t;
    TrainConfig cfg = wgan_defaults();
    Model zero = [](const Var& x) { return mul(x.tape()->constant(Tensor::zeros(1, 1)), linear_critic(1, 1)(x)); };
    WganLosses l = wgan_losses(zero, kIdentity, t.constant(normal_tensor(4, 2, rng)),
                               t.constant(normal_tensor(4, 2, rng)), cfg, rng);
    EXPECT_EQ(l.critic_loss.value().item(), 0.0);
    EXPECT_EQ(l.gen_loss.value().item(), 0.0);
    ASSERT_TRUE(l.penalty.has_value());
    EXPECT_EQ(l.penalty->loss.value().item(), 0.0);
}

TEST(WganLosses, LinearCriticByHand)
{
    Rng rng(2);
    Tape t;
    TrainConfig cfg = wgan_defaults();
    cfg.alr.lambda = 1.0;
    const Tensor xr = Tensor::matrix({{1, 0}, {0, 1}, {1, 1}, {-1, 2}});
    const Tensor z = Tensor::matrix({{2, 0}, {0, 0}, {0, -1}, {1, 1}});
    // f(x) = 3 x0 + 4 x1: mean f(xr) = (3 + 4 + 7 + 5) / 4, mean f(z) = (6 + 0 - 4 + 7) / 4.
    const double base = 9.0 / 4.0 - 19.0 / 4.0;
    WganLosses l = wgan_losses(linear_critic(3, 4), kIdentity, t.constant(xr), t.constant(z), cfg, rng);
    EXPECT_NEAR(l.gen_loss.value().item(), -9.0 / 4.0, 1e-12);
    // Every quotient is |w| = 5, so each term is (5 - 1)^2.
    ASSERT_TRUE(l.penalty.has_value());
    EXPECT_NEAR(l.penalty->loss.value().item(), 16.0, 1e-9);
    EXPECT_EQ(l.penalty->report.violations, 8u);
    EXPECT_NEAR(l.critic_loss.value().item(), base + 16.0, 1e-9);

    cfg.alr.lambda = 0.0;
    WganLosses plain = wgan_losses(linear_critic(3, 4), kIdentity, t.constant(xr), t.constant(z), cfg, rng);
    EXPECT_NEAR(plain.critic_loss.value().item(), base, 1e-12);

    cfg.penalty = PenaltyKind::none;
    WganLosses none = wgan_losses(linear_critic(3, 4), kIdentity, t.constant(xr), t.constant(z), cfg, rng);
    EXPECT_FALSE(none.penalty.has_value());
    EXPECT_NEAR(none.critic_loss.value().item(), base, 1e-12);
}

TEST(WganLosses, GradientPenaltyOnInterpolatesOfALinearCritic)
{
    Rng rng(3);
    Tape t;
    TrainConfig cfg = wgan_defaults();
    cfg.penalty = PenaltyKind::gp;
    cfg.alr.lambda = 2.0;
    WganLosses l = wgan_losses(linear_critic(3, 4), kIdentity, t.constant(normal_tensor(6, 2, rng)),
                               t.constant(normal_tensor(6, 2, rng)), cfg, rng);
    EXPECT_NEAR(l.penalty->loss.value().item(), 2.0 * 16.0, 1e-9);
}

// ---------------------------------------------------------------------------

TrainConfig quick_toy(PenaltyKind p)
{
    TrainConfig c = toy_defaults();
    c.iterations = 40;
    c.reg_batch_size = 128;
    c.log_every = 8;
    c.grid_every = 16;
    c.monitor_grid.resolution = {16, 16};
    c.penalty = p;
    c.seed = 11;
    return c;
}

const oracle::GridSpec kSmallHeatmap{{-4, -4}, {4, 4}, {16, 16}};

std::string csv(const std::vector<MetricsRow>& rows)
{
    std::ostringstream os;
    write_metrics_csv(os, rows);
    return os.str();
}

TEST(ToyTraining, SameSeedGivesIdenticalMetrics)
{
    for (PenaltyKind p : {PenaltyKind::none, PenaltyKind::alp, PenaltyKind::lp, PenaltyKind::explicit_random}) {
        ToyResult a = train_toy(quick_toy(p), toy_network(), kSmallHeatmap);
        ToyResult b = train_toy(quick_toy(p), toy_network(), kSmallHeatmap);
        EXPECT_EQ(a.rows, b.rows) << to_string(p);
        EXPECT_EQ(csv(a.rows), csv(b.rows));
        EXPECT_EQ(a.final_mse, b.final_mse);
        EXPECT_EQ(checkpoint_to_json(a.net, 11).dump(), checkpoint_to_json(b.net, 11).dump());
    }
}

TEST(ToyTraining, RowsCarryTheMonitoredFields)
{
    TrainConfig cfg = quick_toy(PenaltyKind::alp);
    ToyResult r = train_toy(cfg, toy_network(), kSmallHeatmap);
    ASSERT_FALSE(r.diverged);
    std::vector<std::size_t> iters;
    for (const MetricsRow& row : r.rows) {
        iters.push_back(row.iter);
        EXPECT_LE(row.violations, cfg.reg_batch_size);
        EXPECT_LE(row.mean_q, row.max_q);
        EXPECT_EQ(row.grid_lip.has_value(), row.iter % 16 == 0 || row.iter == 39);
        EXPECT_EQ(row.wall_ms, 0);
    }
    EXPECT_EQ(iters, (std::vector<std::size_t>{0, 8, 16, 24, 32, 39}));
    EXPECT_EQ(r.gradnorm.cells.rows(), 16u);
}

TEST(ToyTraining, UnregularizedFitReachesLowError)
{
    TrainConfig cfg = toy_defaults();
    cfg.penalty = PenaltyKind::none;
    cfg.seed = 0;
    ToyResult r = train_toy(cfg, toy_network(), kSmallHeatmap);
    ASSERT_FALSE(r.diverged);
    EXPECT_LT(r.final_mse, 0.01);
}

TEST(ToyTraining, OverflowingPenaltyWeightIsReportedAsDivergence)
{
    TrainConfig cfg = quick_toy(PenaltyKind::alp);
    cfg.alr.lambda = 1e308;
    cfg.alr.K = 0.0;
    ToyResult r = train_toy(cfg, toy_network(), kSmallHeatmap);
    EXPECT_TRUE(r.diverged);
    EXPECT_FALSE(r.divergence.empty());
    EXPECT_LT(r.rows.size(), 6u);
}

// ---------------------------------------------------------------------------

WganSpec small_wgan()
{
    WganSpec s;
    s.critic = MlpSpec::from_widths({2, 16, 16, 1});
    s.generator = MlpSpec::from_widths({2, 16, 16, 2});
    s.sample_every = 4;
    s.sample_count = 500;
    return s;
}

TrainConfig quick_wgan(PenaltyKind p)
{
    TrainConfig c = wgan_defaults();
    c.iterations = 12;
    c.batch_size = 16;
    c.log_every = 5;
    c.grid_every = 6;
    c.monitor_grid.resolution = {8, 8};
    c.penalty = p;
    c.seed = 21;
    return c;
}

TEST(WganTraining, SameSeedGivesIdenticalMetricsAndSamples)
{
    for (PenaltyKind p : {PenaltyKind::alp, PenaltyKind::gp, PenaltyKind::explicit_random}) {
        WganResult a = train_wgan2d(quick_wgan(p), small_wgan());
        WganResult b = train_wgan2d(quick_wgan(p), small_wgan());
        ASSERT_FALSE(a.diverged) << a.divergence;
        EXPECT_EQ(a.rows, b.rows) << to_string(p);
        ASSERT_EQ(a.samples.size(), b.samples.size());
        for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_EQ(a.samples[i], b.samples[i]);
    }
}

TEST(WganTraining, LoggingSchedule)
{
    TrainConfig cfg = quick_wgan(PenaltyKind::alp);
    WganResult r = train_wgan2d(cfg, small_wgan());
    std::vector<std::size_t> iters;
    for (const MetricsRow& row : r.rows) {
        iters.push_back(row.iter);
        EXPECT_TRUE(row.gen_loss.has_value());
        EXPECT_LE(row.violations, 2 * cfg.batch_size);
    }
    EXPECT_EQ(iters, (std::vector<std::size_t>{0, 5, 6, 10, 11}));
    std::vector<std::size_t> dumps;
    for (const auto& s : r.samples) dumps.push_back(s.first);
    EXPECT_EQ(dumps, (std::vector<std::size_t>{0, 4, 8, 12}));
    EXPECT_EQ(r.samples.back().second.rows(), 500u);
}

TEST(WganTraining, ExplodingUpdatesAreReportedAsDivergence)
{
    TrainConfig cfg = quick_wgan(PenaltyKind::alp);
    cfg.lr = 1e200;
    WganResult r = train_wgan2d(cfg, small_wgan());
    EXPECT_TRUE(r.diverged);
    EXPECT_NE(r.divergence.find("iteration"), std::string::npos);
}

double violation_fraction(const WganResult& r, std::size_t per_step)
{
    double v = 0.0;
    for (const MetricsRow& row : r.rows) v += static_cast<double>(row.violations) / static_cast<double>(per_step);
    return v / static_cast<double>(r.rows.size());
}

// A weak gradient penalty leaves most of its sample points above K, while
// the adversarial penalty at its default weight keeps violations rare.
TEST(WganTraining, WeakGradientPenaltyViolatesMoreThanAdversarialPenalty)
{
    WganSpec spec;
    spec.critic = MlpSpec::from_widths({2, 32, 32, 32, 1});
    spec.generator = MlpSpec::from_widths({2, 32, 32, 32, 2});
    TrainConfig cfg = wgan_defaults();
    cfg.iterations = 200;
    cfg.lr = 1e-3;
    cfg.log_every = 10;
    cfg.grid_every = 0;
    WganResult alp = train_wgan2d(cfg, spec);
    cfg.penalty = PenaltyKind::lp;
    cfg.alr.lambda = 0.1;
    WganResult lp = train_wgan2d(cfg, spec);
    ASSERT_FALSE(alp.diverged) << alp.divergence;
    ASSERT_FALSE(lp.diverged) << lp.divergence;
    // alp penalizes the stacked real and generated batches, lp one interpolate per pair.
    EXPECT_GT(violation_fraction(lp, cfg.batch_size), violation_fraction(alp, 2 * cfg.batch_size));
}

// ---------------------------------------------------------------------------

TrainConfig quick_semisup()
{
    TrainConfig c = semisup_defaults();
    c.iterations = 60;
    c.log_every = 20;
    c.seed = 31;
    return c;
}

TEST(SemisupTraining, ZeroWeightIsPlainSupervisedTraining)
{
    TrainConfig cfg = quick_semisup();
    cfg.alr.lambda = 0.0;
    SemisupResult zero = train_semisup2d(cfg);
    cfg.penalty = PenaltyKind::none;
    cfg.alr.lambda = 1.0;
    SemisupResult none = train_semisup2d(cfg);
    EXPECT_EQ(zero.losses, none.losses);
    EXPECT_EQ(zero.test_accuracy, none.test_accuracy);
}

// The kl / fixed-radius configuration must reproduce a hand-written loop
// around the VAT smoothness loss bit for bit.
TEST(SemisupTraining, KlWithFixedRadiusIsTheVatLoss)
{
    TrainConfig cfg = quick_semisup();
    cfg.pair.dy = OutputMetric::kl;
    cfg.alr.eps = EpsilonDist::fixed(0.3);
    cfg.alr.xi = 1e-2;
    const SemisupSpec spec;
    SemisupResult trained = train_semisup2d(cfg, spec);

    Rng master(cfg.seed);
    Rng init_rng = master.split();
    const SemisupData data = make_semisup_data(spec, master.next_u64());
    Rng batch_rng = master.split();
    Rng penalty_rng = master.split();
    Mlp net = Mlp::create(spec.classifier, init_rng);
    AdamState adam;
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.lr = cfg.lr;
    std::vector<double> losses;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        Tape tape;
        BoundParams bound = bind(tape, net.params);
        Model f = as_model(net, bound, Mode::train);
        Var loss = cross_entropy(f(tape.constant(data.labeled.x)), data.labeled.labels);
        Tensor xu = Tensor::zeros(cfg.batch_size, 2);
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
            const std::size_t k = batch_rng.index(data.unlabeled.rows());
            xu.at(i, 0) = data.unlabeled(k, 0);
            xu.at(i, 1) = data.unlabeled(k, 1);
        }
        Var xv = tape.constant(xu);
        Var vat = lds_vat(f, xv, 0.3, cfg.alr.xi, cfg.alr.k, penalty_rng).loss;
        loss = add(loss, add(scale(vat, cfg.alr.lambda), scale(entropy_min(f, xv), cfg.alr.lambda)));
        losses.push_back(loss.value().item());
        adam_step(adam, net.params.trainable(), tape.grad(loss, bound.leaves));
    }
    EXPECT_EQ(trained.losses, losses);
}

TEST(SemisupTraining, SameSeedGivesIdenticalMetrics)
{
    SemisupResult a = train_semisup2d(quick_semisup());
    SemisupResult b = train_semisup2d(quick_semisup());
    EXPECT_EQ(a.rows, b.rows);
    ASSERT_EQ(a.rows.size(), 4u);
    EXPECT_TRUE(a.rows.front().test_acc.has_value());
}

TEST(SemisupTraining, RegularizationBeatsSupervisedTrainingOnMedian)
{
    std::vector<double> supervised, regularized;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TrainConfig cfg = semisup_defaults();
        cfg.iterations = 1000;
        cfg.seed = seed;
        regularized.push_back(train_semisup2d(cfg).test_accuracy);
        cfg.alr.lambda = 0.0;
        supervised.push_back(train_semisup2d(cfg).test_accuracy);
    }
    EXPECT_LT(testing::median(supervised), testing::median(regularized));
}

} // namespace
} // namespace alr
