#pragma once

#include <stdexcept>
#include <string>

namespace ivit {

/// Raised for every contract violation in the library (shape mismatch,
/// invalid argument, divergence, malformed files).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw Error(message);
}

}  // namespace ivit
