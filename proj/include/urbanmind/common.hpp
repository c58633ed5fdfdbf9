#pragma once

#include <stdexcept>
#include <string>

namespace urbanmind {

// Bad on-disk data: corrupt headers, shape/length mismatches, tampering.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Optimization blew up (non-finite loss). The owning object keeps the last
// good parameters so callers can fall back.
struct TrainingFailure : std::runtime_error {
  explicit TrainingFailure(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace urbanmind
