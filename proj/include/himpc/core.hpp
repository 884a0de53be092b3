#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace himpc {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: malformed files, shape mismatches, unsupported configurations.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite losses or gradients, degenerate training states.
class NumericalError : public Error {
 public:
  using Error::Error;
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace himpc
