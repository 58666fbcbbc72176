#pragma once

// Run configuration (strict JSON), output rendering and the commands behind
// the `alr` executable.

#include <array>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "alr/checkpoint.hpp"
#include "alr/gradcheck.hpp"
#include "alr/io.hpp"
#include "alr/train.hpp"

namespace alr::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kDiverged = 3, kCheckFailed = 4 };

inline constexpr const char* kOutDirEnv = "ALR_OUT_DIR";

enum class Command { toy, wgan2d, semisup };

inline const char* to_string(Command c)
{
    switch (c) {
    case Command::toy: return "toy";
    case Command::wgan2d: return "wgan2d";
    case Command::semisup: return "semisup";
    }
    return "?";
}

struct RunConfig {
    Command command = Command::toy;
    std::uint64_t seed = 0;
    std::string output_dir;
    TrainConfig train;
    MlpSpec model;  // toy regressor or semisup classifier
    WganSpec wgan;  // critic, generator, data and sample dumps
    SemisupSpec semisup;
    oracle::GridSpec heatmap;
};

inline RunConfig default_run_config(Command c)
{
    RunConfig r;
    r.command = c;
    r.output_dir = std::string("alr-out/") + to_string(c);
    switch (c) {
    case Command::toy:
        r.train = toy_defaults();
        r.model = toy_network();
        break;
    case Command::wgan2d:
        r.train = wgan_defaults();
        r.heatmap = oracle::GridSpec{{-3.0, -3.0}, {3.0, 3.0}, {256, 256}};
        break;
    case Command::semisup:
        r.train = semisup_defaults();
        r.model = r.semisup.classifier;
        break;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Strict JSON reading: every key must be consumed, and type errors name the key.

class JsonSection {
public:
    JsonSection(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw Error(ErrorKind::config, "'" + where() + "' must be an object");
    }

    [[nodiscard]] bool has(const char* key) const { return j_.contains(key); }

    [[nodiscard]] std::string key_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void read(const char* key, double& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_number()) throw type_error(key, "a number");
            out = v->get<double>();
        }
    }

    template <std::unsigned_integral T>
    void read(const char* key, T& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_number_unsigned()) throw type_error(key, "a nonnegative integer");
            out = v->get<T>();
        }
    }

    void read(const char* key, bool& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_boolean()) throw type_error(key, "a boolean");
            out = v->get<bool>();
        }
    }

    void read(const char* key, std::string& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_string()) throw type_error(key, "a string");
            out = v->get<std::string>();
        }
    }

    /// Parses a string value with `parse`, re-raising failures with the key.
    template <class T, class Parse>
    void read_enum(const char* key, T& out, Parse parse)
    {
        std::string s;
        read(key, s);
        if (s.empty()) return;
        try {
            out = parse(s);
        } catch (const Error& e) {
            std::string msg = e.what();
            if (msg.rfind("config: ", 0) == 0) msg.erase(0, 8);
            throw Error(ErrorKind::config, "'" + key_path(key) + "': " + msg);
        }
    }

    void read_pair(const char* key, std::array<double, 2>& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number()) {
                throw type_error(key, "an array of two numbers");
            }
            out = {(*v)[0].get<double>(), (*v)[1].get<double>()};
        }
    }

    void read_pair(const char* key, std::array<std::size_t, 2>& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number_unsigned() || !(*v)[1].is_number_unsigned()) {
                throw type_error(key, "an array of two nonnegative integers");
            }
            out = {(*v)[0].get<std::size_t>(), (*v)[1].get<std::size_t>()};
        }
    }

    void read_widths(const char* key, std::vector<std::size_t>& out)
    {
        if (const json* v = take(key)) {
            if (!v->is_array() || v->empty()) throw type_error(key, "a nonempty array of widths");
            out.clear();
            for (const json& w : *v) {
                if (!w.is_number_unsigned()) throw type_error(key, "a nonempty array of widths");
                out.push_back(w.get<std::size_t>());
            }
        }
    }

    /// Nested object, or nullopt when absent.
    std::optional<JsonSection> section(const char* key)
    {
        const json* v = take(key);
        if (!v) return std::nullopt;
        return JsonSection(*v, key_path(key));
    }

    /// Rejects any key that no reader asked for.
    void finish() const
    {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw Error(ErrorKind::config, "unknown key '" + key_path(k.c_str()) + "'");
        }
    }

private:
    const json* take(const char* key)
    {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    [[nodiscard]] std::string where() const { return path_.empty() ? "<root>" : path_; }

    [[nodiscard]] Error type_error(const char* key, const char* expected) const
    {
        return Error(ErrorKind::config, "'" + key_path(key) + "' must be " + expected);
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline PenaltyForm penalty_form_from_string(const std::string& s)
{
    if (s == "squared") return PenaltyForm::squared;
    if (s == "linear") return PenaltyForm::linear;
    if (s == "both") return PenaltyForm::both;
    throw Error(ErrorKind::config, "unknown penalty form '" + s + "'");
}

inline const char* to_string(PenaltyForm f)
{
    switch (f) {
    case PenaltyForm::squared: return "squared";
    case PenaltyForm::linear: return "linear";
    case PenaltyForm::both: return "both";
    }
    return "?";
}

inline Aggregation aggregation_from_string(const std::string& s)
{
    if (s == "mean-of-terms") return Aggregation::mean_of_terms;
    if (s == "term-of-mean") return Aggregation::term_of_mean;
    throw Error(ErrorKind::config, "unknown aggregation '" + s + "'");
}

inline const char* to_string(Aggregation a)
{
    return a == Aggregation::mean_of_terms ? "mean-of-terms" : "term-of-mean";
}

inline const char* to_string(Dataset d)
{
    switch (d) {
    case Dataset::toy_a4: return "toy-A4";
    case Dataset::eight_gaussians: return "eight-gaussians";
    case Dataset::two_moons: return "two-moons";
    }
    return "?";
}

namespace detail {

inline void read_mlp(JsonSection& s, MlpSpec& spec)
{
    std::vector<std::size_t> hidden = spec.hidden;
    bool bn = !spec.batchnorm.empty() && spec.batchnorm.front();
    s.read_widths("hidden", hidden);
    s.read("batchnorm", bn);
    s.read("spectral_norm", spec.spectral_norm);
    s.finish();
    spec.hidden = hidden;
    spec.batchnorm.assign(bn ? hidden.size() : 0, true);
    spec.validate();
}

inline json mlp_to_json(const MlpSpec& spec)
{
    return json{{"hidden", spec.hidden},
                {"batchnorm", !spec.batchnorm.empty() && spec.batchnorm.front()},
                {"spectral_norm", spec.spectral_norm}};
}

inline void read_grid(JsonSection& s, oracle::GridSpec& g)
{
    s.read_pair("lo", g.lo);
    s.read_pair("hi", g.hi);
    s.read_pair("resolution", g.resolution);
    s.finish();
    g.validate();
}

inline json grid_to_json(const oracle::GridSpec& g)
{
    return json{{"lo", g.lo}, {"hi", g.hi}, {"resolution", g.resolution}};
}

inline void read_eps(JsonSection& s, EpsilonDist& eps)
{
    const bool fixed = s.has("fixed"), uniform = s.has("uniform");
    if (fixed == uniform) throw Error(ErrorKind::config, "'" + s.key_path("fixed") + "' or '" +
                                                             s.key_path("uniform") + "' must be given (exactly one)");
    if (fixed) {
        double v = 0.0;
        s.read("fixed", v);
        eps = EpsilonDist::fixed(v);
    } else {
        std::array<double, 2> r{};
        s.read_pair("uniform", r);
        eps = EpsilonDist::uniform(r[0], r[1]);
    }
    s.finish();
}

} // namespace detail

/// Overlays a JSON document onto `cfg`. Unknown keys and sections that do
/// not apply to the command are config errors naming the key.
inline void apply_config_json(RunConfig& cfg, const json& doc)
{
    JsonSection root(doc, "");
    root.read("seed", cfg.seed);
    root.read("output_dir", cfg.output_dir);

    if (auto t = root.section("train")) {
        TrainConfig& c = cfg.train;
        t->read("iterations", c.iterations);
        t->read("batch_size", c.batch_size);
        t->read("reg_batch_size", c.reg_batch_size);
        t->read("critic_steps", c.critic_steps);
        t->read("lr", c.lr);
        t->read("lr_decay", c.lr_decay);
        t->read("beta1", c.beta1);
        t->read("beta2", c.beta2);
        t->read("log_every", c.log_every);
        t->read("grid_every", c.grid_every);
        t->read("record_timing", c.record_timing);
        t->finish();
    }
    if (auto p = root.section("penalty")) {
        TrainConfig& c = cfg.train;
        p->read_enum("kind", c.penalty, penalty_from_string);
        p->read("lambda", c.alr.lambda);
        p->read("K", c.alr.K);
        p->read("xi", c.alr.xi);
        p->read("k", c.alr.k);
        if (auto e = p->section("eps")) detail::read_eps(*e, c.alr.eps);
        bool two_sided = c.alr.sided == Sidedness::two;
        p->read("two_sided", two_sided);
        c.alr.sided = two_sided ? Sidedness::two : Sidedness::one;
        p->read_enum("form", c.alr.form, penalty_form_from_string);
        p->read("fix_reference", c.alr.fix_reference);
        p->read_enum("aggregation", c.alr.aggregation, aggregation_from_string);
        p->read_enum("dy", c.pair.dy, output_metric_from_string);
        p->finish();
    }
    if (auto g = root.section("monitor_grid")) detail::read_grid(*g, cfg.train.monitor_grid);

    if (cfg.command == Command::wgan2d) {
        if (auto m = root.section("critic")) detail::read_mlp(*m, cfg.wgan.critic);
        if (auto m = root.section("generator")) detail::read_mlp(*m, cfg.wgan.generator);
        if (auto d = root.section("data")) {
            d->read_enum("dataset", cfg.wgan.data, dataset_from_string);
            d->finish();
        }
        if (auto s = root.section("samples")) {
            s->read("every", cfg.wgan.sample_every);
            s->read("count", cfg.wgan.sample_count);
            s->finish();
        }
    } else if (auto m = root.section("model")) {
        detail::read_mlp(*m, cfg.model);
    }
    if (cfg.command == Command::semisup) {
        if (auto d = root.section("data")) {
            d->read("labeled", cfg.semisup.labeled);
            d->read("unlabeled", cfg.semisup.unlabeled);
            d->read("test", cfg.semisup.test);
            d->finish();
        }
    } else if (auto h = root.section("heatmap_grid")) {
        detail::read_grid(*h, cfg.heatmap);
    }
    root.finish();
    cfg.train.validate();
}

/// The fully resolved configuration, in the same schema apply_config_json reads.
inline json run_config_to_json(const RunConfig& cfg)
{
    const TrainConfig& c = cfg.train;
    json eps = c.alr.eps.kind == EpsilonDist::Kind::fixed ? json{{"fixed", c.alr.eps.lo}}
                                                          : json{{"uniform", {c.alr.eps.lo, c.alr.eps.hi}}};
    json doc{
        {"seed", cfg.seed},
        {"output_dir", cfg.output_dir},
        {"train",
         {{"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"reg_batch_size", c.reg_batch_size},
          {"critic_steps", c.critic_steps},
          {"lr", c.lr},
          {"lr_decay", c.lr_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"log_every", c.log_every},
          {"grid_every", c.grid_every},
          {"record_timing", c.record_timing}}},
        {"penalty",
         {{"kind", to_string(c.penalty)},
          {"lambda", c.alr.lambda},
          {"K", c.alr.K},
          {"xi", c.alr.xi},
          {"k", c.alr.k},
          {"eps", eps},
          {"two_sided", c.alr.sided == Sidedness::two},
          {"form", to_string(c.alr.form)},
          {"fix_reference", c.alr.fix_reference},
          {"aggregation", to_string(c.alr.aggregation)},
          {"dy", to_string(c.pair.dy)}}},
        {"monitor_grid", detail::grid_to_json(c.monitor_grid)},
    };
    if (cfg.command == Command::wgan2d) {
        doc["critic"] = detail::mlp_to_json(cfg.wgan.critic);
        doc["generator"] = detail::mlp_to_json(cfg.wgan.generator);
        doc["data"] = json{{"dataset", to_string(cfg.wgan.data)}};
        doc["samples"] = json{{"every", cfg.wgan.sample_every}, {"count", cfg.wgan.sample_count}};
    } else {
        doc["model"] = detail::mlp_to_json(cfg.model);
    }
    if (cfg.command == Command::semisup) {
        doc["data"] = json{{"labeled", cfg.semisup.labeled}, {"unlabeled", cfg.semisup.unlabeled},
                           {"test", cfg.semisup.test}};
    } else {
        doc["heatmap_grid"] = detail::grid_to_json(cfg.heatmap);
    }
    return doc;
}

inline json read_json_file(const std::string& path)
{
    std::ifstream is(path);
    if (!is) throw Error(ErrorKind::config, "cannot read config " + path);
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Commands. Each returns an exit code and writes into cfg.output_dir.

namespace detail {

inline std::string out_path(const RunConfig& cfg, const std::string& name)
{
    return (std::filesystem::path(cfg.output_dir) / name).string();
}

inline void make_output_dir(const std::string& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir + ": " + ec.message());
}

inline int report_divergence(const std::string& what, std::ostream& err)
{
    err << "diverged: " << what << '\n';
    return kDiverged;
}

} // namespace detail

/// metrics.csv, checkpoint.json, gradnorm.pgm, target.pgm, fopt.pgm.
inline int run_toy(RunConfig cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    cfg.train.seed = cfg.seed;
    detail::make_output_dir(cfg.output_dir);
    ToyResult r = train_toy(cfg.train, cfg.model, cfg.heatmap);
    write_metrics_csv(detail::out_path(cfg, "metrics.csv"), r.rows);
    if (r.diverged) return detail::report_divergence(r.divergence, err);
    save_checkpoint(detail::out_path(cfg, "checkpoint.json"), r.net, cfg.seed);
    write_pgm(detail::out_path(cfg, "gradnorm.pgm"), r.gradnorm.cells);
    write_pgm(detail::out_path(cfg, "target.pgm"), f_target_grid(cfg.heatmap));
    write_pgm(detail::out_path(cfg, "fopt.pgm"), f_opt_gradnorm_grid(cfg.heatmap).cells);
    out << "toy seed " << cfg.seed << ": mse " << format_double(r.final_mse) << ", grid lipschitz "
        << format_double(r.gradnorm.max) << '\n';
    return kOk;
}

/// metrics.csv, samples_<iter>.csv, critic_gradnorm.pgm, critic.json, generator.json.
inline int run_wgan2d(RunConfig cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    cfg.train.seed = cfg.seed;
    detail::make_output_dir(cfg.output_dir);
    WganResult r = train_wgan2d(cfg.train, cfg.wgan);
    write_metrics_csv(detail::out_path(cfg, "metrics.csv"), r.rows);
    if (r.diverged) return detail::report_divergence(r.divergence, err);
    for (const auto& [iter, pts] : r.samples) {
        write_points_csv(detail::out_path(cfg, "samples_" + std::to_string(iter) + ".csv"), pts);
    }
    write_pgm(detail::out_path(cfg, "critic_gradnorm.pgm"), network_grid_lipschitz(r.critic, cfg.heatmap).cells);
    save_checkpoint(detail::out_path(cfg, "critic.json"), r.critic, cfg.seed);
    save_checkpoint(detail::out_path(cfg, "generator.json"), r.generator, cfg.seed);
    out << "wgan2d seed " << cfg.seed << ": mode coverage " << r.coverage << "/8\n";
    return kOk;
}

/// metrics.csv (with test_acc) and checkpoint.json.
inline int run_semisup(RunConfig cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    cfg.train.seed = cfg.seed;
    cfg.semisup.classifier = cfg.model;
    detail::make_output_dir(cfg.output_dir);
    SemisupResult r = train_semisup2d(cfg.train, cfg.semisup);
    write_metrics_csv(detail::out_path(cfg, "metrics.csv"), r.rows, true);
    if (r.diverged) return detail::report_divergence(r.divergence, err);
    save_checkpoint(detail::out_path(cfg, "checkpoint.json"), r.net, cfg.seed);
    out << "semisup seed " << cfg.seed << ": test accuracy " << format_double(r.test_accuracy) << '\n';
    return kOk;
}

inline int run(const RunConfig& cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    switch (cfg.command) {
    case Command::toy: return run_toy(cfg, out, err);
    case Command::wgan2d: return run_wgan2d(cfg, out, err);
    case Command::semisup: return run_semisup(cfg, out, err);
    }
    return kConfigError;
}

struct LipestOptions {
    std::string checkpoint;
    oracle::GridSpec grid;
    oracle::GridMode mode = oracle::GridMode::grad_norm;
    std::string output_dir = "alr-out/lipest";
    std::size_t output = 0; // output unit for vector-valued networks
};

inline oracle::GridMode grid_mode_from_string(const std::string& s)
{
    if (s == "grad-norm") return oracle::GridMode::grad_norm;
    if (s == "pairwise") return oracle::GridMode::pairwise_quotient;
    throw Error(ErrorKind::config, "unknown grid mode '" + s + "'");
}

/// Prints the maximum and writes lipest.csv (one grid row per line) and lipest.pgm.
inline int run_lipest(const LipestOptions& opt, std::ostream& out = std::cout)
{
    const Checkpoint ck = load_checkpoint(opt.checkpoint);
    if (ck.net.spec.input_dim != 2) throw Error(ErrorKind::config, "lipest needs a network on R^2");
    if (opt.output >= ck.net.spec.output_dim) throw Error(ErrorKind::config, "lipest: output index out of range");
    opt.grid.validate();
    oracle::GridResult g;
    if (opt.mode == oracle::GridMode::grad_norm && opt.output == 0 && ck.net.spec.output_dim == 1) {
        g = network_grid_lipschitz(ck.net, opt.grid);
    } else {
        g = oracle::grid_lipschitz(network_grid_fn(ck.net, opt.output), opt.grid, opt.mode);
    }
    detail::make_output_dir(opt.output_dir);
    const std::string csv = (std::filesystem::path(opt.output_dir) / "lipest.csv").string();
    std::ofstream os(csv);
    if (!os) throw Error(ErrorKind::io, "cannot write " + csv);
    for (std::size_t i = 0; i < g.cells.rows(); ++i) {
        for (std::size_t j = 0; j < g.cells.cols(); ++j) os << (j ? "," : "") << format_double(g.cells(i, j));
        os << '\n';
    }
    write_pgm((std::filesystem::path(opt.output_dir) / "lipest.pgm").string(), g.cells);
    out << "max " << format_double(g.max) << '\n';
    return kOk;
}

/// Per-op finite-difference report; exit 0 iff every entry is within tolerance.
inline int run_gradcheck(std::uint64_t seed, std::size_t trials, std::ostream& out = std::cout)
{
    const GradCheckReport report = alr::run_gradcheck(seed, trials);
    out << "op,trials,max_rel_error,tolerance,status\n";
    for (const GradCheckEntry& e : report.entries) {
        out << e.op << ',' << e.trials << ',' << format_double(e.max_rel_error) << ','
            << format_double(e.tolerance) << ',' << (e.passed() ? "PASS" : "FAIL") << '\n';
    }
    out << (report.passed() ? "gradcheck passed" : "gradcheck FAILED") << '\n';
    return report.passed() ? kOk : kCheckFailed;
}

} // namespace alr::cli
