#pragma once

#include <stdexcept>
#include <string>

namespace ctfuse {

/// File/stream failure (missing file, bad magic, truncated payload, unwritable path).
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical failure that survives internal safeguards (non-finite cost,
/// SVD breakdown, singular system after regularization).
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed experiment configuration (reported with a line number).
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
/// Throws std::invalid_argument when `cond` is false. Used for API contract
/// checks (dimension agreement, ranges); violations are caller bugs.
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}
}  // namespace detail

}  // namespace ctfuse
