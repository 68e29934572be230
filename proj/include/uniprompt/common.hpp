#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace uniprompt {

/// Row-major dense matrix of 64-bit floats. Every tensor in the library uses it.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

/// Bad input: shapes, ranges, malformed files. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure during a computation (non-finite loss, NaN gradient). Maps to CLI exit code 2.
class RuntimeAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

}  // namespace uniprompt
