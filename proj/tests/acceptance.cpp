// Acceptance run: one PASS/FAIL line per criterion, followed by the numbers
// behind it. Exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "alr/cli.hpp"
#include "alr/gradcheck.hpp"
#include "alr/oracle.hpp"
#include "alr/penalty.hpp"
#include "alr/perturb.hpp"
#include "alr/train.hpp"

namespace {

using namespace alr;
namespace fs = std::filesystem;

struct Verdict {
    bool pass = false;
    std::string detail;
};

class Stopwatch {
public:
    [[nodiscard]] double seconds() const
    {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

double median(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double cosine(std::span<const double> a, std::span<const double> b)
{
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string read_file(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------

Verdict gradient_correctness()
{
    Stopwatch clock;
    const GradCheckReport r = run_gradcheck(2024, 100);
    const double t = clock.seconds();
    double first = 0.0, second = 0.0;
    for (const auto& e : r.entries) {
        (e.tolerance == kFirstOrderTolerance ? first : second) = std::max(
            e.tolerance == kFirstOrderTolerance ? first : second, e.max_rel_error);
    }
    return {r.passed() && t < 60.0,
            fmt("%zu entries x 100 trials, worst first-order %.2e, worst double-backprop %.2e, %.1f s",
                r.entries.size(), first, second, t)};
}

// Linear map x -> x L^T; its top input direction is the top eigenvector of L^T L.
Model linear_map(const Tensor& l)
{
    return [l](const Var& x) { return matmul(x, x.tape()->constant(l), false, true); };
}

std::vector<double> direction_cosines(const Tensor& l, std::size_t k, std::size_t starts, Rng& rng)
{
    const Tensor gram = detail::matmul(l, l, true, false);
    const oracle::TopEigen top = oracle::exact_top_eigvec(gram);
    Tape t;
    const MetricPair pair{InputMetric::euclidean, OutputMetric::euclidean};
    DirectionResult d = adversarial_direction(linear_map(l), t.constant(normal_tensor(starts, l.cols(), rng)), pair,
                                              1e-3, k, rng);
    std::vector<double> out;
    for (std::size_t b = 0; b < starts; ++b) out.push_back(std::fabs(cosine(d.direction.row_values(b), top.vector)));
    return out;
}

Verdict power_iteration_fidelity()
{
    Rng rng(31);
    std::vector<Tensor> maps{Tensor::matrix({{std::sqrt(5.0), 0.0}, {0.0, 1.0}})};
    while (maps.size() < 21) {
        Tensor l = normal_tensor(8, 8, rng);
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(oracle::detail::to_eigen(l));
        const auto& s = svd.singularValues();
        if (s(0) >= 2.0 * s(1)) maps.push_back(std::move(l));
    }
    constexpr std::size_t kStarts = 50;
    double worst20 = 1.0;
    std::vector<double> one;
    for (const Tensor& l : maps) {
        for (double c : direction_cosines(l, 20, kStarts, rng)) worst20 = std::min(worst20, c);
        for (double c : direction_cosines(l, 1, kStarts, rng)) one.push_back(c);
    }
    const double med1 = median(one);
    return {worst20 >= 0.99 && med1 >= 0.9,
            fmt("21 maps x %zu starts (8-D maps with sigma1 >= 2 sigma2), k=20 min cosine %.6f, k=1 median cosine %.4f",
                kStarts, worst20, med1)};
}

Verdict vat_reduction_identity()
{
    Rng data(41);
    double worst = 0.0;
    const MetricPair kl{InputMetric::euclidean, OutputMetric::kl};
    for (int trial = 0; trial < 100; ++trial) {
        Mlp net = Mlp::create(MlpSpec::from_widths({2, 16, 16, 3}), data);
        const Tensor x = normal_tensor(32, 2, data);
        const double eps = data.uniform(0.1, 5.0);
        Tape t;
        BoundParams b = bind(t, net.params, false);
        Model f = as_model(net, b, Mode::eval);
        Rng r1(1000 + trial), r2(1000 + trial);
        const double lds = lds_vat(f, t.constant(x), eps, 1e-6, 1, r1).loss.value().item();
        AlrConfig c;
        c.K = 0.0;
        c.lambda = 1.0;
        c.xi = 1e-6;
        c.k = 1;
        c.eps = EpsilonDist::fixed(eps);
        c.form = PenaltyForm::linear;
        c.fix_reference = true;
        const double a = alp(f, t.constant(x), kl, c, r2).loss.value().item();
        worst = std::max(worst, std::fabs(lds - eps * a));
    }
    return {worst <= 1e-12, fmt("100 classifiers, max |LDS - eps * ALP| = %.3e", worst)};
}

Verdict sampling_superiority()
{
    TrainConfig cfg = toy_defaults();
    cfg.penalty = PenaltyKind::none;
    cfg.iterations = 2048;
    const Mlp net = train_toy(cfg, toy_network()).net;

    constexpr std::size_t n = 2000;
    DataSampler sampler(Dataset::toy_a4, 51);
    const Tensor x = sampler.sample(n);
    Rng rng(52);
    Tape t;
    BoundParams b = bind(t, net.params, false);
    Model f = as_model(net, b, Mode::eval);
    const PerturbationResult adv =
        perturb(f, t.constant(x), MetricPair{InputMetric::euclidean, OutputMetric::abs_diff},
                PerturbConfig{0.1, 1, EpsilonDist::uniform(0.1, 1.0)}, rng);

    Tensor r = random_unit_rows(n, 2, rng);
    Tensor shifted = x;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 2; ++j) shifted.at(i, j) += adv.epsilon[i] * r(i, j);
    }
    const Tensor fx = evaluate(net, x), fr = evaluate(net, shifted);
    std::vector<double> diff(n);
    double qa = 0.0, qr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double q_random = std::fabs(fr(i, 0) - fx(i, 0)) / adv.epsilon[i];
        diff[i] = adv.quotient[i] - q_random;
        qa += adv.quotient[i];
        qr += q_random;
    }
    const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / n;
    double var = 0.0;
    for (double d : diff) var += (d - mean) * (d - mean);
    var /= static_cast<double>(n - 1);
    const double tstat = mean / std::sqrt(var / n);
    const double p = 0.5 * std::erfc(tstat / std::sqrt(2.0)); // normal approximation, n - 1 dof
    return {p < 0.01, fmt("n=%zu, mean quotient adversarial %.4f vs random %.4f, paired t=%.2f, one-sided p=%.3g", n,
                          qa / n, qr / n, tstat, p)};
}

Verdict toy_replication()
{
    Stopwatch clock;
    const oracle::GridSpec heat{};
    auto regularized = [](PenaltyKind kind, double lambda, std::uint64_t seed) {
        TrainConfig c = toy_defaults();
        c.seed = seed;
        c.iterations = 2048;
        c.lr = 3e-3;
        c.penalty = kind;
        c.alr.lambda = lambda;
        return c;
    };
    int mse_ok = 0, alr_below_none = 0, alr_below_lp = 0;
    std::string rows;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TrainConfig none = toy_defaults();
        none.seed = seed;
        none.penalty = PenaltyKind::none;
        const ToyResult base = train_toy(none, toy_network(), heat);
        const ToyResult alr = train_toy(regularized(PenaltyKind::alp, 1.0, seed), toy_network(), heat);
        const ToyResult alr_bn = train_toy(regularized(PenaltyKind::alp, 1.0, seed), toy_network(true), heat);
        const ToyResult lp_bn = train_toy(regularized(PenaltyKind::lp, 10.0, seed), toy_network(true), heat);
        mse_ok += base.final_mse < 0.01;
        alr_below_none += alr.gradnorm.max < base.gradnorm.max;
        alr_below_lp += alr_bn.gradnorm.max < lp_bn.gradnorm.max;
        rows += fmt("\n    seed %llu: none mse %.4f grid %.3f | alp grid %.3f | bn: alp %.3f lp %.3f",
                    static_cast<unsigned long long>(seed), base.final_mse, base.gradnorm.max, alr.gradnorm.max,
                    alr_bn.gradnorm.max, lp_bn.gradnorm.max);
    }
    const double t = clock.seconds();
    return {mse_ok == 5 && alr_below_none >= 4 && alr_below_lp >= 3 && t <= 900.0,
            fmt("(a) mse < 0.01 on %d/5, (b) alp below none on %d/5, (c) bn alp below lp on %d/5, %.0f s", mse_ok,
                alr_below_none, alr_below_lp, t) +
                rows};
}

Verdict wgan_desk_analogue()
{
    Stopwatch clock;
    std::vector<double> coverage;
    int stable = 0;
    std::string rows;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TrainConfig c = wgan_defaults();
        c.seed = seed;
        c.lr = 1e-3;
        const WganResult r = train_wgan2d(c);
        std::vector<double> tail;
        for (const auto& row : r.rows) {
            if (row.grid_lip && row.iter >= c.iterations - c.iterations / 10) tail.push_back(*row.grid_lip);
        }
        const auto [lo, hi] = std::minmax_element(tail.begin(), tail.end());
        const double mean = std::accumulate(tail.begin(), tail.end(), 0.0) / tail.size();
        const bool ok = !r.diverged && !tail.empty() && (*hi - *lo) < 0.25 * mean;
        stable += ok;
        coverage.push_back(static_cast<double>(r.coverage));
        rows += fmt("\n    seed %llu: coverage %zu/8, last-decile grid lipschitz mean %.3f range %.3f (%zu points)",
                    static_cast<unsigned long long>(seed), r.coverage, mean, *hi - *lo, tail.size());
    }
    const double t = clock.seconds();
    const double med = median(coverage);
    return {med >= 7.0 && stable == 5 && t <= 1800.0,
            fmt("median coverage %.0f/8, trace stable on %d/5, %.0f s", med, stable, t) + rows};
}

Verdict unit_suites()
{
    Stopwatch clock;
    int failed = 0;
    std::string names;
    for (const char* suite : {"penalty_test", "metrics_test", "train_test", "oracle_test"}) {
        const std::string cmd = (fs::path(ALR_TEST_DIR) / suite).string() + " --gtest_brief=1 > /dev/null 2>&1";
        const int rc = std::system(cmd.c_str());
        if (rc != 0) {
            ++failed;
            names += std::string(" ") + suite;
        }
    }
    const double t = clock.seconds();
    return {failed == 0 && t < 60.0,
            fmt("penalty, metrics, train and oracle suites, %d failing, %.1f s", failed, t) + names};
}

Verdict spectral_normalization()
{
    Rng rng(81);
    double worst = 0.0, worst_ratio = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor w = normal_tensor(8, 8, rng);
        SpectralState st;
        const double err = std::fabs(spectral_normalize(w, 50, st).sigma - oracle::exact_spectral_norm(w));
        if (err > worst) {
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(oracle::detail::to_eigen(w));
            worst = err;
            worst_ratio = svd.singularValues()(1) / svd.singularValues()(0);
        }
    }
    double lip = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
        Mlp net = Mlp::create(toy_network(false, true), rng);
        for (auto& l : net.params.layers) l.weight = normal_tensor(l.weight.rows(), l.weight.cols(), rng);
        refresh_spectral(net.params, 500);
        lip = std::max(lip, network_grid_lipschitz(net, oracle::GridSpec{}).max);
    }
    return {worst <= 1e-3 && lip <= 1.0 + 1e-6,
            fmt("max |sigma - exact| = %.2e over 20 matrices (that matrix has sigma2/sigma1 = %.4f), normalized MLP "
                "grid lipschitz %.9f",
                worst, worst_ratio, lip)};
}

Verdict determinism()
{
    const fs::path root = fs::temp_directory_path() / "alr_acceptance_determinism";
    fs::remove_all(root);
    std::vector<cli::RunConfig> runs;
    {
        cli::RunConfig c = cli::default_run_config(cli::Command::toy);
        c.train.iterations = 64;
        c.train.log_every = 8;
        c.train.grid_every = 16;
        c.train.reg_batch_size = 256;
        runs.push_back(c);
    }
    {
        cli::RunConfig c = cli::default_run_config(cli::Command::wgan2d);
        c.train.iterations = 30;
        c.train.log_every = 5;
        c.train.grid_every = 10;
        c.wgan.critic = MlpSpec::from_widths({2, 16, 16, 1});
        c.wgan.generator = MlpSpec::from_widths({2, 16, 16, 2});
        c.wgan.sample_every = 10;
        runs.push_back(c);
    }
    {
        cli::RunConfig c = cli::default_run_config(cli::Command::semisup);
        c.train.iterations = 200;
        c.train.log_every = 10;
        runs.push_back(c);
    }
    std::size_t compared = 0, differing = 0;
    std::ostringstream sink;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        for (const char* pass : {"a", "b"}) {
            cli::RunConfig c = runs[i];
            c.seed = 9;
            c.output_dir = (root / pass / std::to_string(i)).string();
            if (cli::run(c, sink, sink) != 0) return {false, "run " + std::to_string(i) + " failed"};
        }
    }
    cli::LipestOptions lip;
    for (const char* pass : {"a", "b"}) {
        lip.checkpoint = (root / "a" / "0" / "checkpoint.json").string();
        lip.output_dir = (root / pass / "lipest").string();
        cli::run_lipest(lip, sink);
    }
    for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
        if (e.path().extension() != ".csv") continue;
        const fs::path twin = root / "b" / fs::relative(e.path(), root / "a");
        ++compared;
        differing += read_file(e.path()) != read_file(twin);
    }
    fs::remove_all(root);
    return {compared > 0 && differing == 0,
            fmt("toy, wgan2d, semisup and lipest rerun with seed 9: %zu CSV files compared, %zu differ", compared,
                differing)};
}

} // namespace

/// With arguments, only the listed criteria run (e.g. `acceptance 2 8`).
int main(int argc, char** argv)
{
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"gradient correctness", gradient_correctness},
        {"power-iteration fidelity", power_iteration_fidelity},
        {"VAT reduction identity", vat_reduction_identity},
        {"adversarial sampling beats random sampling", sampling_superiority},
        {"toy replication", toy_replication},
        {"WGAN eight-gaussians", wgan_desk_analogue},
        {"penalty algebra unit suites", unit_suites},
        {"spectral normalization", spectral_normalization},
        {"determinism", determinism},
    };
    int failures = 0;
    std::vector<bool> selected(criteria.size(), argc == 1);
    for (int a = 1; a < argc; ++a) {
        const int n = std::atoi(argv[a]);
        if (n < 1 || n > static_cast<int>(criteria.size())) {
            std::cerr << "unknown criterion '" << argv[a] << "'\n";
            return 2;
        }
        selected[n - 1] = true;
    }
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected[i]) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        failures += !v.pass;
        std::cout << "criterion " << i + 1 << " " << (v.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": "
                  << v.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
