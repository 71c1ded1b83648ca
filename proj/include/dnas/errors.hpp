#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dnas {

// Each error kind maps to a distinct failure class in the engine; the CLI
// translates ConfigError/DivergenceError/IoError into exit codes.

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RankError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct EmptyAxisError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ScaleError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TopologyError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace dnas
