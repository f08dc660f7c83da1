#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace qtorhc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Raised when a state component becomes non-finite during integration.
class IntegrationDiverged : public Error {
 public:
  IntegrationDiverged(double time, const std::string& what)
      : Error(what), time_(time) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

class SynthesisError : public Error {
 public:
  using Error::Error;
};

class SolverError : public Error {
 public:
  using Error::Error;
};

/// Terminal penalty escalation gave up: the plant could not be steered into
/// the terminal set within the allowed number of penalty increases.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

}  // namespace qtorhc
