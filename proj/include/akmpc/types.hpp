#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace akmpc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Wrong vector or matrix size handed to an operation.
struct DimensionError : std::invalid_argument
{
  using std::invalid_argument::invalid_argument;
};

/// Invalid or incomplete configuration.
struct ConfigError : std::invalid_argument
{
  using std::invalid_argument::invalid_argument;
};

/// Model/dataset file does not match the expected schema.
struct SchemaError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

/// Numerical fault during simulation or training (non-finite values, singular matrices).
struct FaultError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

inline void require_size(const Vector & v, Eigen::Index n, const char * what)
{
  if (v.size() != n) {
    throw DimensionError(
      std::string(what) + ": expected length " + std::to_string(n) + ", got "
      + std::to_string(v.size()));
  }
}

inline bool all_finite(const Vector & v) { return v.allFinite(); }

}  // namespace akmpc
