#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace coral {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Matrix<float>;
using MatD = Matrix<double>;

/// Invalid user input: bad config values, malformed files, shape mismatches.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unrecoverable runtime failure (NaN loss, corrupt checkpoint mid-run).
struct RuntimeAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace coral
