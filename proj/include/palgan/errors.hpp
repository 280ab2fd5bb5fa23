#pragma once

#include <stdexcept>
#include <string>

namespace palgan {

/// Bad input: wrong shape, out-of-range value, grid mismatch.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed file: checkpoint, palette JSON, config.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A loss or parameter went non-finite. `term()` names the offender.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string term, const std::string& what)
        : std::runtime_error(what), term_(std::move(term)) {}
    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

}  // namespace palgan
