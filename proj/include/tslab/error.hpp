#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tslab {

/// Invalid shapes, ranges or option combinations supplied by the caller.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dataset file could not be turned into a SeriesTensor.
class IngestionError : public std::runtime_error {
public:
    IngestionError(const std::string& what, std::size_t row, std::size_t col)
        : std::runtime_error(what), row_(row), col_(col) {}

    /// 1-based line number in the source file (header is line 1).
    std::size_t row() const noexcept { return row_; }
    /// 0-based column index, or npos when the whole row is at fault.
    std::size_t col() const noexcept { return col_; }

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

private:
    std::size_t row_;
    std::size_t col_;
};

/// Checkpoint archive missing, unreadable or shape-incompatible.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A statistic is undefined for the given input (e.g. all-zero residuals).
class StatisticError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

}  // namespace tslab
