#include "alws/common.hpp"

#include <cmath>
#include <cstdlib>

#if defined(ALWS_HAVE_OPENBLAS)
extern "C" void openblas_set_num_threads(int);
#endif

namespace alws {

void fail(const std::string& msg) { throw Error(msg); }

bool all_finite(const Mat& m) { return m.allFinite(); }

void check_finite(const Mat& m, const std::string& context) {
  if (!m.allFinite()) fail("non-finite value in " + context);
}

int thread_cap() {
  const char* env = std::getenv("ALWS_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || v < 1) return 1;
  if (v > 256) return 256;
  return static_cast<int>(v);
}

void configure_blas_threads() {
#if defined(ALWS_HAVE_OPENBLAS)
  openblas_set_num_threads(thread_cap());
#endif
}

}  // namespace alws
