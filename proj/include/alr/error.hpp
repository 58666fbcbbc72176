#pragma once

#include <stdexcept>
#include <string>

namespace alr {

enum class ErrorKind {
    shape,
    domain,
    not_on_tape,
    non_finite,
    degenerate,
    config,
    divergence,
    io,
};

inline const char* to_string(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::domain: return "domain";
    case ErrorKind::not_on_tape: return "not_on_tape";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::config: return "config";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::io: return "io";
    }
    return "unknown";
}

/// Exception carrying a machine-checkable kind alongside the message.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind)
    {
    }

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

} // namespace alr
