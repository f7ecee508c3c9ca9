#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace alws {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// All recoverable failures in the library throw this. The CLI maps it to
// exit code 1; usage mistakes are reported as exit code 2 before any work
// starts.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] void fail(const std::string& msg);

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// True when every entry is finite.
bool all_finite(const Mat& m);

void check_finite(const Mat& m, const std::string& context);

// Worker-thread cap: the ALWS_THREADS environment variable, clamped to
// [1, 256]; 1 when unset or unparsable. Also applied to the BLAS backend
// at CLI startup.
int thread_cap();

// Applies thread_cap() to the linked BLAS (no-op for non-OpenBLAS backends).
void configure_blas_threads();

}  // namespace alws
