#pragma once

#include <stdexcept>
#include <string>

namespace fus {

// Exception hierarchy. The CLI maps each family onto a process exit code:
// InvalidArgument / FormatError -> 1, IoError -> 2, DivergenceError -> 3.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Rotation matrix sits at (or within tolerance of) the Euler singularity.
class DegenerateRotation : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

/// Malformed container contents. `field()` names the header field or
/// payload section that failed to parse.
class FormatError : public Error {
public:
    FormatError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class IoError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace fus
