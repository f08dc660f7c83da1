#include "qtorhc/errors.hpp"

namespace qtorhc {
namespace {

std::string join(const std::vector<std::string>& problems) {
  std::string out = "invalid configuration";
  for (const auto& p : problems) {
    out += "\n  - ";
    out += p;
  }
  return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : Error(join(problems)), problems_(std::move(problems)) {}

}  // namespace qtorhc
