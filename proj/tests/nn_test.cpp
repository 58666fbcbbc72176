#include <gtest/gtest.h>

#include <cmath>

#include "alr/checkpoint.hpp"
#include "alr/nn.hpp"
#include "alr/oracle.hpp"
#include "alr/train.hpp"
#include "test_util.hpp"

namespace alr {
namespace {

Mlp one_unit_net(double w, double b)
{
    Mlp net{MlpSpec::from_widths({1, 1, 1}), {}};
    LayerParams first{Tensor::matrix({{w}}), Tensor::row({b}), std::nullopt, std::nullopt};
    LayerParams second{Tensor::matrix({{1.0}}), Tensor::row({0.0}), std::nullopt, std::nullopt};
    net.params.layers = {first, second};
    return net;
}

TEST(Forward, ZeroParametersGiveZeroOutput)
{
    Rng rng(1);
    Mlp net = Mlp::create(MlpSpec::from_widths({3, 5, 4, 2}), rng);
    for (auto& l : net.params.layers) {
        l.weight = Tensor::zeros(l.weight.rows(), l.weight.cols());
        l.bias = Tensor::zeros(1, l.bias.cols());
    }
    EXPECT_EQ(evaluate(net, normal_tensor(7, 3, rng)), Tensor::zeros(7, 2));
}

TEST(Forward, SingleAffineUnit)
{
    Tape t;
    Var y = affine(t.constant(Tensor::matrix({{3.0}})), t.constant(Tensor::matrix({{2.0}})),
                   t.constant(Tensor::row({1.0})));
    EXPECT_EQ(y.value().item(), 7.0);
    // The same layer inside a network whose second layer is the identity.
    EXPECT_EQ(evaluate(one_unit_net(2.0, 1.0), Tensor::matrix({{3.0}})).item(), 7.0);
}

TEST(Forward, ToyNetworkShapes)
{
    Rng rng(2);
    Mlp net = Mlp::create(toy_network(), rng);
    EXPECT_EQ(net.spec.hidden, (std::vector<std::size_t>{20, 40, 20}));
    Tensor y = evaluate(net, uniform_tensor(64, 2, rng, -4.0, 4.0));
    EXPECT_EQ(y.rows(), 64u);
    EXPECT_EQ(y.cols(), 1u);
}

TEST(Forward, WrongInputWidthIsAShapeError)
{
    Rng rng(3);
    Mlp net = Mlp::create(toy_network(), rng);
    try {
        (void)evaluate(net, Tensor::zeros(4, 3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
    }
}

TEST(Forward, BatchNormUsesBatchStatisticsInTrainingAndRunningInEval)
{
    Rng rng(4);
    Mlp net = Mlp::create(MlpSpec::from_widths({2, 6, 1}, true), rng);
    Tensor x = normal_tensor(32, 2, rng, 3.0);

    Tape t;
    BoundParams b = bind(t, net.params, false);
    BatchStats stats;
    (void)forward(net.spec, net.params, b, t.constant(x), Mode::train, &stats);
    ASSERT_TRUE(stats.mean_var[0].has_value());
    // Batch mean of the pre-activation equals the mean of x W + b.
    Tensor pre = detail::matmul(x, net.params.layers[0].weight, false, false);
    for (std::size_t j = 0; j < 6; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < 32; ++i) m += pre(i, j) + net.params.layers[0].bias[j];
        EXPECT_NEAR(stats.mean_var[0]->first[j], m / 32.0, 1e-12);
    }

    // Fresh running stats (mean 0, var 1) make eval mode a plain affine map.
    Tensor before = evaluate(net, x, Mode::eval);
    update_running_stats(net.params, stats);
    const auto& bn = *net.params.layers[0].bn;
    for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_NEAR(bn.running_mean[j], 0.1 * stats.mean_var[0]->first[j], 1e-15);
        EXPECT_NEAR(bn.running_var[j], 0.9 + 0.1 * stats.mean_var[0]->second[j], 1e-15);
    }
    EXPECT_NE(evaluate(net, x, Mode::eval), before);
}

TEST(ForwardProperty, ParameterGradientsMatchFiniteDifferences)
{
    Rng rng(5);
    for (bool bn : {false, true}) {
        for (int trial = 0; trial < 10; ++trial) {
            Mlp net = Mlp::create(MlpSpec::from_widths({2, 5, 4, 1}, bn), rng);
            Tensor x = normal_tensor(8, 2, rng);
            const std::size_t np = net.params.trainable().size();
            for (std::size_t p = 0; p < np; ++p) {
                auto loss = [&](const Var& leaf) {
                    Tape& t = *leaf.tape();
                    BoundParams b = bind(t, net.params, false);
                    b.leaves[p] = leaf;
                    // Re-point the layer slot at the probed leaf.
                    std::size_t k = 0;
                    for (auto& l : b.layers) {
                        for (Var* slot : {&l.weight, &l.bias, &l.scale, &l.shift}) {
                            if (slot->tape() == nullptr) continue;
                            if (k++ == p) *slot = leaf;
                        }
                    }
                    return sum(square(forward(net.spec, net.params, b, t.constant(x), Mode::train)));
                };
                const Tensor& value = *net.params.trainable()[p];
                Tensor g = testing::tape_gradient(loss, value);
                // Batch norm over 8 rows puts many units next to a ReLU kink;
                // a smaller step keeps the differences on one side. The bias
                // feeding a batch-norm layer has an exactly zero gradient, hence
                // the absolute floor.
                std::vector<double> fd = testing::fd_gradient(loss, value, bn ? 1e-7 : 1e-4);
                EXPECT_LT(testing::relative_error(g.data(), fd, bn ? 1e-3 : 1e-6), 1e-5) << "bn=" << bn << " param " << p;
            }
        }
    }
}

// ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParametersUnchanged)
{
    Tensor p = Tensor::row({1.0, -2.0, 3.0});
    AdamState s;
    adam_step(s, {&p}, {Tensor::zeros(1, 3)});
    EXPECT_EQ(p, Tensor::row({1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepMovesByLearningRateAgainstTheGradientSign)
{
    Tensor p = Tensor::row({0.5, 0.5, 0.5, 0.5});
    const Tensor g = Tensor::row({3.0, -0.01, 200.0, -7.5});
    AdamState s;
    s.lr = 1e-3;
    adam_step(s, {&p}, {g});
    for (std::size_t i = 0; i < 4; ++i) {
        const double update = p[i] - 0.5;
        EXPECT_LT(std::fabs(std::fabs(update) - s.lr), 1e-6);
        EXPECT_EQ(std::signbit(update), !std::signbit(g[i]));
    }
}

TEST(Adam, ConstantGradientMovesMonotonically)
{
    Tensor p = Tensor::row({0.0, 0.0});
    const Tensor g = Tensor::row({0.4, -2.0});
    AdamState s;
    adam_step(s, {&p}, {g});
    const Tensor after_one = p;
    adam_step(s, {&p}, {g});
    EXPECT_LT(after_one[0], 0.0);
    EXPECT_LT(p[0], after_one[0]);
    EXPECT_GT(after_one[1], 0.0);
    EXPECT_GT(p[1], after_one[1]);
}

TEST(Adam, FlippingGradientSignsFlipsTheUpdate)
{
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor g = normal_tensor(3, 4, rng);
        Tensor neg_g = detail::map(g, [](double v) { return -v; });
        Tensor a = Tensor::zeros(3, 4), b = Tensor::zeros(3, 4);
        AdamState sa, sb;
        for (int step = 0; step < 3; ++step) {
            adam_step(sa, {&a}, {g});
            adam_step(sb, {&b}, {neg_g});
        }
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], -b[i]);
    }
}

TEST(Adam, NonFiniteGradientIsRejectedBeforeAnyUpdate)
{
    Tensor p = Tensor::row({1.0, 2.0});
    Tensor q = Tensor::row({3.0});
    AdamState s;
    try {
        adam_step(s, {&p, &q}, {Tensor::row({0.1, 0.2}), Tensor::row({std::nan("")})});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::non_finite);
    }
    EXPECT_EQ(p, Tensor::row({1.0, 2.0}));
    EXPECT_EQ(s.step, 0u);
}

// ---------------------------------------------------------------------------

TEST(SpectralNorm, DiagonalMatrix)
{
    SpectralState st;
    SpectralResult r = spectral_normalize(Tensor::matrix({{3.0, 0.0}, {0.0, 1.0}}), 50, st);
    EXPECT_NEAR(r.sigma, 3.0, 1e-12);
    EXPECT_NEAR(r.normalized(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(r.normalized(1, 1), 1.0 / 3.0, 1e-12);
    EXPECT_EQ(r.normalized(0, 1), 0.0);
}

TEST(SpectralNorm, IdentityIsAFixedPoint)
{
    SpectralState st;
    SpectralResult r = spectral_normalize(Tensor::matrix({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}), 1, st);
    EXPECT_NEAR(r.sigma, 1.0, 1e-15);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(r.normalized(i, j), i == j ? 1.0 : 0.0, 1e-15);
    }
}

TEST(SpectralNorm, ZeroMatrixIsReturnedUnchangedAndFlagged)
{
    SpectralState st;
    SpectralResult r = spectral_normalize(Tensor::zeros(3, 2), 5, st);
    EXPECT_TRUE(r.zero_matrix);
    EXPECT_EQ(r.normalized, Tensor::zeros(3, 2));
}

TEST(SpectralNorm, RandomMatricesMatchExactNormAfterFiftyIterations)
{
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor w = normal_tensor(8, 8, rng);
        SpectralState st;
        SpectralResult r = spectral_normalize(w, 50, st);
        EXPECT_NEAR(r.sigma, oracle::exact_spectral_norm(w), 1e-3) << "trial " << trial;
    }
}

TEST(SpectralNorm, StatePersistsAcrossCalls)
{
    Rng rng(8);
    Tensor w = normal_tensor(6, 4, rng);
    SpectralState a, b;
    for (int i = 0; i < 30; ++i) (void)spectral_normalize(w, 1, a);
    (void)spectral_normalize(w, 30, b);
    EXPECT_EQ(a.left, b.left);
    EXPECT_EQ(a.right, b.right);
}

TEST(SpectralNorm, NormalizedReluNetworkIsOneLipschitzOnTheGrid)
{
    Rng rng(9);
    for (int trial = 0; trial < 3; ++trial) {
        MlpSpec spec = toy_network(false, true);
        Mlp net = Mlp::create(spec, rng);
        for (auto& l : net.params.layers) l.weight = normal_tensor(l.weight.rows(), l.weight.cols(), rng);
        refresh_spectral(net.params, 500);
        const auto grid = oracle::GridSpec{{-4.0, -4.0}, {4.0, 4.0}, {64, 64}};
        EXPECT_LE(network_grid_lipschitz(net, grid).max, 1.0 + 1e-6);
        EXPECT_LE(network_grid_lipschitz(net, grid, oracle::GridMode::pairwise_quotient).max, 1.0 + 1e-6);
    }
}

// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact)
{
    Rng rng(10);
    for (bool bn : {false, true}) {
        MlpSpec spec = toy_network(bn, !bn);
        Mlp net = Mlp::create(spec, rng);
        if (bn) {
            BatchStats stats;
            Tape t;
            BoundParams b = bind(t, net.params, false);
            (void)forward(spec, net.params, b, t.constant(normal_tensor(16, 2, rng)), Mode::train, &stats);
            update_running_stats(net.params, stats);
        }
        const std::string text = checkpoint_to_json(net, 42).dump(1);
        Checkpoint back = checkpoint_from_json(json::parse(text));
        EXPECT_EQ(back.rng_seed, 42u);
        EXPECT_EQ(back.net.spec, spec);
        ASSERT_EQ(back.net.params.layers.size(), net.params.layers.size());
        for (std::size_t i = 0; i < net.params.layers.size(); ++i) {
            const auto& a = net.params.layers[i];
            const auto& c = back.net.params.layers[i];
            EXPECT_EQ(a.weight, c.weight);
            EXPECT_EQ(a.bias, c.bias);
            EXPECT_EQ(a.bn.has_value(), c.bn.has_value());
            if (a.bn) {
                EXPECT_EQ(a.bn->running_mean, c.bn->running_mean);
                EXPECT_EQ(a.bn->running_var, c.bn->running_var);
            }
            if (a.sn) EXPECT_EQ(a.sn->left, c.sn->left);
        }
        EXPECT_EQ(checkpoint_to_json(back.net, 42).dump(1), text);
    }
}

TEST(Checkpoint, ShapeMismatchIsAnIoError)
{
    Rng rng(11);
    Mlp net = Mlp::create(toy_network(), rng);
    json j = checkpoint_to_json(net, 0);
    j["params"][1]["weight"] = json::array({json::array({1.0})});
    try {
        (void)checkpoint_from_json(j);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::io);
    }
}

} // namespace
} // namespace alr
