#pragma once

#include <cmath>
#include <functional>

#include "alws/common.hpp"

namespace alws::testing {

// Central finite differences, the reference every backward pass is held to.
inline Vec fd_grad(const std::function<double(const Vec&)>& f, const Vec& x,
                   double h = 1e-5) {
  Vec g(x.size());
  Vec xp = x;
  for (int i = 0; i < x.size(); ++i) {
    double orig = xp[i];
    xp[i] = orig + h;
    double fp = f(xp);
    xp[i] = orig - h;
    double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double max_rel_err(const Vec& got, const Vec& want) {
  double worst = 0.0;
  for (int i = 0; i < got.size(); ++i) {
    double e = std::abs(got[i] - want[i]) / (1.0 + std::abs(want[i]));
    worst = std::max(worst, e);
  }
  return worst;
}

}  // namespace alws::testing
