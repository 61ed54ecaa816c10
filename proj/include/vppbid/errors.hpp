#pragma once

#include <stdexcept>
#include <string>

namespace vppbid {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (network, DER tables, scenario, config).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A numerical routine failed to produce an answer (non-convergence, collapse).
class SolverError : public Error {
public:
    using Error::Error;
};

/// A requested operating point violates a physical bound.
class InfeasibleError : public Error {
public:
    using Error::Error;
};

/// An episode had to be aborted; carries the step that failed.
class EpisodeAborted : public Error {
public:
    EpisodeAborted(int hour, const std::string& cause)
        : Error("episode aborted at hour " + std::to_string(hour) + ": " + cause), hour_(hour) {}
    [[nodiscard]] int hour() const noexcept { return hour_; }

private:
    int hour_;
};

}  // namespace vppbid
