// alr: training runs, Lipschitz estimates and gradient checks from the command line.

#include <spawn.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "alr/cli.hpp"

extern char** environ;

namespace {

using namespace alr;
using namespace alr::cli;

/// Flag values layered over the JSON config; each applies only when given.
struct RunFlags {
    std::string config;
    std::uint64_t seed = 0;
    std::string seeds;
    std::string out;
    std::size_t iterations = 0, batch_size = 0, reg_batch_size = 0, critic_steps = 0, log_every = 0, grid_every = 0;
    double lr = 0.0;
    bool lr_decay = true, timing = false;
    std::string penalty, dy, form, aggregation, dataset;
    double lambda = 0.0, K = 0.0, xi = 0.0;
    std::size_t k = 0;
    double eps_fixed = 0.0;
    std::vector<double> eps_uniform;
    bool two_sided = false, fix_reference = false, bn = false, sn = false;
    bool print_config = false;
};

CLI::App* add_run_command(CLI::App& app, const char* name, const char* help, RunFlags& f)
{
    CLI::App* c = app.add_subcommand(name, help);
    c->add_option("--config", f.config, "JSON run config (unknown keys are rejected)")->check(CLI::ExistingFile);
    c->add_option("--seed", f.seed, "Master seed");
    c->add_option("--seeds", f.seeds, "Seed range a..b, one process per seed")->excludes("--seed");
    c->add_option("--out", f.out, std::string("Output directory (overrides ") + kOutDirEnv + ")");
    c->add_option("--iterations", f.iterations)->check(CLI::PositiveNumber);
    c->add_option("--batch-size", f.batch_size)->check(CLI::PositiveNumber);
    c->add_option("--reg-batch-size", f.reg_batch_size)->check(CLI::PositiveNumber);
    c->add_option("--critic-steps", f.critic_steps)->check(CLI::PositiveNumber);
    c->add_option("--log-every", f.log_every)->check(CLI::PositiveNumber);
    c->add_option("--grid-every", f.grid_every, "Grid Lipschitz estimate period (0: off)");
    c->add_option("--lr", f.lr, "Initial learning rate");
    c->add_flag("--lr-decay,!--no-lr-decay", f.lr_decay, "Linear decay of the learning rate to 0");
    c->add_flag("--timing", f.timing, "Record wall time in metrics.csv (breaks byte-identical reruns)");
    c->add_option("--penalty", f.penalty, "none | alp | lp | gp | explicit-random");
    c->add_option("--lambda", f.lambda, "Penalty weight");
    c->add_option("--K", f.K, "Target Lipschitz constant");
    c->add_option("--xi", f.xi, "Power-iteration probe scale");
    c->add_option("--k", f.k, "Power iterations");
    c->add_option("--eps-fixed", f.eps_fixed, "Fixed perturbation radius");
    c->add_option("--eps-uniform", f.eps_uniform, "Uniform perturbation radius range LO HI")
        ->expected(2)
        ->excludes("--eps-fixed");
    c->add_option("--dy", f.dy, "Output metric: abs-diff | euclidean | kl | msq-logit");
    c->add_flag("--two-sided", f.two_sided, "Two-sided hinge");
    c->add_option("--form", f.form, "squared | linear | both");
    c->add_option("--aggregation", f.aggregation, "mean-of-terms | term-of-mean");
    c->add_flag("--fix-reference", f.fix_reference, "Hold f(x) fixed in the penalty");
    c->add_flag("--bn", f.bn, "Batch norm before every hidden activation");
    c->add_flag("--sn", f.sn, "Spectral normalization");
    c->add_flag("--print-config", f.print_config, "Print the resolved config as JSON and exit");
    return c;
}

bool given(const CLI::App* c, const char* name) { return c->count(name) > 0; }

RunConfig resolve(Command cmd, const CLI::App* c, const RunFlags& f)
{
    RunConfig cfg = default_run_config(cmd);
    if (!f.config.empty()) apply_config_json(cfg, read_json_file(f.config));
    if (const char* env = std::getenv(kOutDirEnv); env && *env) cfg.output_dir = env;
    if (given(c, "--out")) cfg.output_dir = f.out;
    if (given(c, "--seed")) cfg.seed = f.seed;

    TrainConfig& t = cfg.train;
    if (given(c, "--iterations")) t.iterations = f.iterations;
    if (given(c, "--batch-size")) t.batch_size = f.batch_size;
    if (given(c, "--reg-batch-size")) t.reg_batch_size = f.reg_batch_size;
    if (given(c, "--critic-steps")) t.critic_steps = f.critic_steps;
    if (given(c, "--log-every")) t.log_every = f.log_every;
    if (given(c, "--grid-every")) t.grid_every = f.grid_every;
    if (given(c, "--lr")) t.lr = f.lr;
    if (given(c, "--lr-decay") || given(c, "--no-lr-decay")) t.lr_decay = f.lr_decay;
    if (f.timing) t.record_timing = true;
    if (given(c, "--penalty")) t.penalty = penalty_from_string(f.penalty);
    if (given(c, "--lambda")) t.alr.lambda = f.lambda;
    if (given(c, "--K")) t.alr.K = f.K;
    if (given(c, "--xi")) t.alr.xi = f.xi;
    if (given(c, "--k")) t.alr.k = f.k;
    if (given(c, "--eps-fixed")) t.alr.eps = EpsilonDist::fixed(f.eps_fixed);
    if (given(c, "--eps-uniform")) t.alr.eps = EpsilonDist::uniform(f.eps_uniform[0], f.eps_uniform[1]);
    if (given(c, "--dy")) t.pair.dy = output_metric_from_string(f.dy);
    if (f.two_sided) t.alr.sided = Sidedness::two;
    if (given(c, "--form")) t.alr.form = penalty_form_from_string(f.form);
    if (given(c, "--aggregation")) t.alr.aggregation = aggregation_from_string(f.aggregation);
    if (f.fix_reference) t.alr.fix_reference = true;

    MlpSpec& net = cmd == Command::wgan2d ? cfg.wgan.critic : cfg.model;
    if (f.bn) net.batchnorm.assign(net.hidden.size(), true);
    if (f.sn) net.spectral_norm = true;
    t.validate();
    return cfg;
}

std::pair<std::uint64_t, std::uint64_t> parse_seed_range(const std::string& s)
{
    const auto dots = s.find("..");
    try {
        if (dots != std::string::npos) {
            std::size_t used = 0;
            const std::string a = s.substr(0, dots), b = s.substr(dots + 2);
            const std::uint64_t lo = std::stoull(a, &used);
            if (used != a.size()) throw std::invalid_argument(s);
            const std::uint64_t hi = std::stoull(b, &used);
            if (used != b.size() || hi < lo) throw std::invalid_argument(s);
            return {lo, hi};
        }
    } catch (const std::logic_error&) {
    }
    throw Error(ErrorKind::config, "--seeds expects a..b with a <= b, got '" + s + "'");
}

/// Re-runs this executable once per seed, each into <out>/seed_<s>, and
/// waits for all of them. Returns the first nonzero child status.
int spawn_seed_sweep(int argc, char** argv, const std::string& seeds, const std::string& out_dir)
{
    const auto [lo, hi] = parse_seed_range(seeds);
    std::vector<std::string> base;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--seeds" || a == "--out") {
            ++i;
            continue;
        }
        if (a.rfind("--seeds=", 0) == 0 || a.rfind("--out=", 0) == 0) continue;
        base.push_back(a);
    }
    std::vector<pid_t> children;
    for (std::uint64_t s = lo; s <= hi; ++s) {
        std::vector<std::string> args{"/proc/self/exe"};
        args.insert(args.end(), base.begin(), base.end());
        args.insert(args.end(), {"--seed", std::to_string(s), "--out",
                                 (std::filesystem::path(out_dir) / ("seed_" + std::to_string(s))).string()});
        std::vector<char*> cargs;
        for (auto& a : args) cargs.push_back(a.data());
        cargs.push_back(nullptr);
        pid_t pid = 0;
        if (posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, cargs.data(), environ) != 0) {
            throw Error(ErrorKind::io, "cannot spawn run for seed " + std::to_string(s));
        }
        children.push_back(pid);
    }
    int result = kOk;
    for (pid_t pid : children) {
        int status = 0;
        waitpid(pid, &status, 0);
        const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kCheckFailed;
        if (result == kOk) result = code;
    }
    return result;
}

int exit_code_for(const Error& e)
{
    switch (e.kind()) {
    case ErrorKind::config:
    case ErrorKind::io: return kConfigError;
    case ErrorKind::divergence:
    case ErrorKind::non_finite: return kDiverged;
    default: return kCheckFailed;
    }
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Adversarial Lipschitz regularization experiments"};
    app.require_subcommand(1);

    RunFlags toy_f, wgan_f, semi_f;
    CLI::App* toy = add_run_command(app, "toy", "Regression on the annulus target with a gradient-norm heatmap", toy_f);
    CLI::App* wgan = add_run_command(app, "wgan2d", "WGAN on 2-D data (eight Gaussians by default)", wgan_f);
    wgan->add_option("--dataset", wgan_f.dataset, "eight-gaussians | two-moons | toy-A4");
    CLI::App* semi = add_run_command(app, "semisup", "Semi-supervised two-moons classification", semi_f);

    LipestOptions lip;
    std::string lip_mode = "grad-norm";
    std::vector<double> lip_lo, lip_hi;
    std::vector<std::size_t> lip_res;
    CLI::App* lipest = app.add_subcommand("lipest", "Grid Lipschitz estimate of a checkpoint");
    lipest->add_option("checkpoint", lip.checkpoint, "Checkpoint JSON")->required();
    lipest->add_option("--mode", lip_mode, "grad-norm | pairwise");
    lipest->add_option("--lo", lip_lo, "Grid lower corner X Y")->expected(2);
    lipest->add_option("--hi", lip_hi, "Grid upper corner X Y")->expected(2);
    lipest->add_option("--resolution", lip_res, "Grid points NX NY")->expected(2);
    lipest->add_option("--output", lip.output, "Output unit of a vector-valued network");
    lipest->add_option("--out", lip.output_dir, "Output directory");

    std::uint64_t gc_seed = 0;
    std::size_t gc_trials = 100;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    gradcheck->add_option("--seed", gc_seed);
    gradcheck->add_option("--trials", gc_trials, "Random cases per op")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (gradcheck->parsed()) return cli::run_gradcheck(gc_seed, gc_trials);
        if (lipest->parsed()) {
            lip.mode = grid_mode_from_string(lip_mode);
            if (!lip_lo.empty()) lip.grid.lo = {lip_lo[0], lip_lo[1]};
            if (!lip_hi.empty()) lip.grid.hi = {lip_hi[0], lip_hi[1]};
            if (!lip_res.empty()) lip.grid.resolution = {lip_res[0], lip_res[1]};
            if (const char* env = std::getenv(kOutDirEnv); env && *env && !lipest->count("--out")) {
                lip.output_dir = env;
            }
            return run_lipest(lip);
        }

        Command cmd = Command::toy;
        const CLI::App* sub = toy;
        const RunFlags* f = &toy_f;
        if (wgan->parsed()) {
            cmd = Command::wgan2d;
            sub = wgan;
            f = &wgan_f;
        } else if (semi->parsed()) {
            cmd = Command::semisup;
            sub = semi;
            f = &semi_f;
        }
        RunConfig cfg = resolve(cmd, sub, *f);
        if (cmd == Command::wgan2d && given(sub, "--dataset")) cfg.wgan.data = dataset_from_string(f->dataset);
        if (f->print_config) {
            std::cout << run_config_to_json(cfg).dump(2) << '\n';
            return kOk;
        }
        if (!f->seeds.empty()) return spawn_seed_sweep(argc, argv, f->seeds, cfg.output_dir);
        return run(cfg);
    } catch (const Error& e) {
        std::cerr << "alr: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "alr: internal error: " << e.what() << '\n';
        return kCheckFailed;
    }
}
