#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "alr/error.hpp"
#include "alr/tensor.hpp"

namespace alr {

/// Shortest round-trip decimal form.
inline std::string format_double(double v)
{
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

struct MetricsRow {
    std::size_t iter = 0;
    double critic_loss = 0.0;
    std::optional<double> gen_loss;
    double penalty = 0.0;
    std::size_t violations = 0;
    double mean_q = 0.0;
    double max_q = 0.0;
    std::optional<double> grid_lip;
    std::int64_t wall_ms = 0;
    std::optional<double> test_acc;

    friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

inline constexpr const char* kMetricsHeader = "iter,critic_loss,gen_loss,penalty,violations,mean_q,max_q,grid_lip,wall_ms";

/// Metrics CSV. Optional fields are left empty; `with_test_acc` appends a
/// test_acc column.
inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, bool with_test_acc = false)
{
    os << kMetricsHeader << (with_test_acc ? ",test_acc" : "") << '\n';
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    for (const auto& r : rows) {
        os << r.iter << ',' << format_double(r.critic_loss) << ',' << opt(r.gen_loss) << ','
           << format_double(r.penalty) << ',' << r.violations << ',' << format_double(r.mean_q) << ','
           << format_double(r.max_q) << ',' << opt(r.grid_lip) << ',' << r.wall_ms;
        if (with_test_acc) os << ',' << opt(r.test_acc);
        os << '\n';
    }
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows, bool with_test_acc = false)
{
    std::ofstream os(path);
    if (!os) throw Error(ErrorKind::io, "cannot write " + path);
    write_metrics_csv(os, rows, with_test_acc);
}

/// 2-D points as "x,y" rows.
inline void write_points_csv(const std::string& path, const Tensor& points)
{
    std::ofstream os(path);
    if (!os) throw Error(ErrorKind::io, "cannot write " + path);
    os << "x,y\n";
    for (std::size_t i = 0; i < points.rows(); ++i) {
        os << format_double(points(i, 0)) << ',' << format_double(points(i, 1)) << '\n';
    }
}

/// Binary PGM (P5, maxval 255). Pixel = round(clamp(v, 0, 1) * 255); grid row
/// 0 is the top image row.
inline std::vector<std::uint8_t> encode_pgm(const Tensor& grid)
{
    const std::string header =
        "P5\n" + std::to_string(grid.cols()) + " " + std::to_string(grid.rows()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + grid.size());
    for (double v : grid.data()) {
        const double c = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
        out.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0)));
    }
    return out;
}

inline void write_pgm(const std::string& path, const Tensor& grid)
{
    const auto bytes = encode_pgm(grid);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::io, "cannot write " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct PgmImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};

inline PgmImage read_pgm(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::io, "cannot read " + path);
    std::string magic;
    PgmImage img;
    int maxval = 0;
    is >> magic >> img.width >> img.height >> maxval;
    if (magic != "P5" || maxval != 255) throw Error(ErrorKind::io, path + ": not an 8-bit P5 image");
    is.get();
    img.pixels.resize(img.width * img.height);
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw Error(ErrorKind::io, path + ": truncated pixel data");
    return img;
}

} // namespace alr
