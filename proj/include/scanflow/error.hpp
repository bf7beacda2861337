#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace scanflow {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad input. `field()` names the offending field when one applies, so CLI and
// HTTP front ends can point at it.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& message, std::string field = {})
        : Error(message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace scanflow
