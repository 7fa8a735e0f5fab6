#pragma once

#include <stdexcept>
#include <string>

namespace chebcam {

/// Bad arguments or malformed inputs. The CLI maps this to exit status 1.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation called in a state that does not satisfy its preconditions.
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Singular matrices, non-finite values and other arithmetic failures.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged; carries the optimizer step at which it happened.
class TrainingError : public NumericalError {
 public:
  TrainingError(const std::string& what, long step)
      : NumericalError(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Dataset and model file problems. Each kind is reported with its location.
class DataError : public InvalidInput {
 public:
  enum class Kind { MissingFile, Parse, DimensionMismatch, NonFinite, UnknownLabel, Version, Invariant };

  DataError(Kind kind, const std::string& what) : InvalidInput(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace chebcam
