#pragma once

#include <stdexcept>
#include <string>

namespace tapt {

// Malformed shapes or incompatible model/bundle/prompt configurations.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad caller-supplied data (non-finite pixels, out-of-range indices, empty sets).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A training-side invariant the caller asked to violate.
struct ConsistencyError : std::logic_error {
  using std::logic_error::logic_error;
};

// Non-finite value during an iterative procedure; `step` is where it appeared.
struct NumericalError : std::runtime_error {
  NumericalError(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step(step) {}
  long step;
};

struct TrainingError : NumericalError {
  using NumericalError::NumericalError;
};
struct AttackError : NumericalError {
  using NumericalError::NumericalError;
};
struct DefenseError : NumericalError {
  using NumericalError::NumericalError;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A pipeline input is absent; `producer` names the command that builds it.
struct MissingArtifactError : std::runtime_error {
  MissingArtifactError(const std::string& what, std::string producer)
      : std::runtime_error(what + " (produce it with `tapt " + producer + "`)"),
        producer(std::move(producer)) {}
  std::string producer;
};

// Records that cannot share one report grid.
struct ReportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace tapt
