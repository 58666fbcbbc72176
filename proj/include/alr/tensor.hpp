#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "alr/error.hpp"

namespace alr {

/// Dense row-major array of doubles. Ranks 0..2 are supported; rank 0 and 1
/// tensors are viewed as a single row by the matrix accessors.
class Tensor {
public:
    Tensor() : shape_{1, 1}, data_(1, 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data))
    {
        if (shape_.size() > 2) {
            throw Error(ErrorKind::shape, "tensor rank " + std::to_string(shape_.size()) + " > 2");
        }
        std::size_t n = 1;
        for (std::size_t e : shape_) {
            if (e == 0) {
                throw Error(ErrorKind::shape, "tensor extent must be positive: " + shape_string(shape_));
            }
            n *= e;
        }
        if (n != data_.size()) {
            throw Error(ErrorKind::shape,
                        "shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                            " values");
        }
    }

    static Tensor zeros(std::size_t rows, std::size_t cols) { return full(rows, cols, 0.0); }

    static Tensor full(std::size_t rows, std::size_t cols, double value)
    {
        return Tensor({rows, cols}, std::vector<double>(rows * cols, value));
    }

    static Tensor scalar(double value) { return Tensor({1, 1}, {value}); }

    /// Matrix from nested rows; all rows must have equal length.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows)
    {
        std::vector<double> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& row : rows) {
            if (row.size() != cols) {
                throw Error(ErrorKind::shape, "ragged matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({rows.size(), cols}, std::move(data));
    }

    static Tensor row(std::vector<double> values)
    {
        std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    static Tensor column(std::vector<double> values)
    {
        std::size_t n = values.size();
        return Tensor({n, 1}, std::move(values));
    }

    [[nodiscard]] const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

    [[nodiscard]] std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }

    [[nodiscard]] std::size_t cols() const noexcept
    {
        if (shape_.size() == 2) return shape_[1];
        if (shape_.size() == 1) return shape_[0];
        return 1;
    }

    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] std::span<double> mutable_data() noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

    [[nodiscard]] double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    [[nodiscard]] double operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] double item() const
    {
        if (data_.size() != 1) {
            throw Error(ErrorKind::shape, "item() on tensor of shape " + shape_string(shape_));
        }
        return data_[0];
    }

    [[nodiscard]] std::vector<double> row_values(std::size_t r) const
    {
        const std::size_t c = cols();
        return {data_.begin() + static_cast<std::ptrdiff_t>(r * c),
                data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
    }

    [[nodiscard]] bool all_finite() const noexcept
    {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    [[nodiscard]] std::string shape_str() const { return shape_string(shape_); }

    static std::string shape_string(const std::vector<std::size_t>& shape)
    {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            os << (i ? "," : "") << shape[i];
        }
        os << ')';
        return os.str();
    }

    friend bool operator==(const Tensor& a, const Tensor& b)
    {
        return a.rows() == b.rows() && a.cols() == b.cols() && a.data_ == b.data_;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Seedable generator with platform-independent uniform and normal draws.
/// mt19937_64's output sequence is fixed by the standard; the distributions
/// are implemented here because std::*_distribution are not.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    /// Independent child stream, for handing work to another worker.
    Rng split() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline Tensor normal_tensor(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0)
{
    Tensor t = Tensor::zeros(rows, cols);
    for (double& v : t.mutable_data()) v = stddev * rng.normal();
    return t;
}

inline Tensor uniform_tensor(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi)
{
    Tensor t = Tensor::zeros(rows, cols);
    for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
    return t;
}

/// Rows rescaled to unit Euclidean norm. Zero rows are left at zero.
inline Tensor normalize_rows(const Tensor& t)
{
    Tensor out = t;
    const std::size_t c = t.cols();
    auto d = out.mutable_data();
    for (std::size_t r = 0; r < t.rows(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += d[r * c + j] * d[r * c + j];
        const double n = std::sqrt(s);
        if (n > 0.0) {
            for (std::size_t j = 0; j < c; ++j) d[r * c + j] /= n;
        }
    }
    return out;
}

/// Uniformly distributed unit vectors, one per row (normalized Gaussian draws).
inline Tensor random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng)
{
    return normalize_rows(normal_tensor(rows, cols, rng));
}

inline std::vector<double> row_norms(const Tensor& t)
{
    std::vector<double> out(t.rows(), 0.0);
    for (std::size_t r = 0; r < t.rows(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < t.cols(); ++j) s += t(r, j) * t(r, j);
        out[r] = std::sqrt(s);
    }
    return out;
}

/// Stack rows of `a` on top of rows of `b`.
inline Tensor concat_rows(const Tensor& a, const Tensor& b)
{
    if (a.cols() != b.cols()) {
        throw Error(ErrorKind::shape, "concat_rows " + a.shape_str() + " with " + b.shape_str());
    }
    std::vector<double> data(a.values());
    data.insert(data.end(), b.values().begin(), b.values().end());
    return Tensor({a.rows() + b.rows(), a.cols()}, std::move(data));
}

} // namespace alr
