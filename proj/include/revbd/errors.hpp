#pragma once

#include <stdexcept>
#include <string>

namespace revbd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid hyperparameter, unknown name, or malformed config text.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Tensor or feature-map shapes that do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Corrupt, truncated, or version-mismatched archive.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Missing files or directories on disk.
class DataError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

/// Trigger fine-tuning weakened the attack beyond the allowed slack.
class AttackDegradedError : public Error {
public:
    AttackDegradedError(const std::string& what, double before, double after)
        : Error(what), before_(before), after_(after) {}
    double poison_acc_before() const noexcept { return before_; }
    double poison_acc_after() const noexcept { return after_; }

private:
    double before_;
    double after_;
};

}  // namespace revbd
