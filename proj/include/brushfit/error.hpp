#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace brushfit {

/// Invalid user configuration (bad counts, unknown keys, missing inputs).
/// The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Unreadable, corrupt, or unsupported file.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A loss or gradient evaluated to NaN/Inf. Carries where it was first seen.
class NumericalError : public std::runtime_error {
public:
    enum class Where { Pixel, Stroke, Parameter };

    NumericalError(const std::string& what, Where where, std::size_t index, long step = -1)
        : std::runtime_error(what), where_(where), index_(index), step_(step) {}

    Where where() const noexcept { return where_; }
    std::size_t index() const noexcept { return index_; }
    long step() const noexcept { return step_; }

private:
    Where where_;
    std::size_t index_;
    long step_;
};

} // namespace brushfit
