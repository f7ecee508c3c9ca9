#include "alws/rng.hpp"

#include <cmath>

namespace alws {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t Rng::derive(std::uint64_t salt) {
  std::uint64_t base = gen_();
  return splitmix64(base ^ splitmix64(salt));
}

double Rng::u01() {
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::u01_open() {
  return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::uniform(double a, double b) { return a + (b - a) * u01(); }

double Rng::normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  double u1 = u01_open();
  double u2 = u01();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = kTwoPi * u2;
  cached_ = r * std::sin(theta);
  have_cached_ = true;
  return r * std::cos(theta);
}

double Rng::laplace(double mu, double b) {
  double u = u01() - 0.5;
  double mag = -std::log(1.0 - 2.0 * std::abs(u));  // Exp(1)
  return mu + (u < 0 ? -b : b) * mag;
}

double Rng::gamma(double shape, double scale) {
  check(shape > 0 && scale > 0, "gamma: shape and scale must be positive");
  if (shape < 1.0) {
    // Boost the shape, then correct with a power of a uniform.
    double g = gamma(shape + 1.0, scale);
    return g * std::pow(u01_open(), 1.0 / shape);
  }
  // Marsaglia-Tsang squeeze method.
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal();
    double v = 1.0 + c * x;
    if (v <= 0) continue;
    v = v * v * v;
    double u = u01_open();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
      return d * v * scale;
    }
  }
}

int Rng::categorical(const Vec& probs) {
  check(probs.size() > 0, "categorical: empty probability vector");
  double u = u01();
  double acc = 0.0;
  for (int i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return static_cast<int>(probs.size()) - 1;
}

int Rng::uniform_int(int n) {
  check(n > 0, "uniform_int: n must be positive");
  int v = static_cast<int>(u01() * n);
  return v >= n ? n - 1 : v;
}

Vec Rng::normal_vec(int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = normal();
  return v;
}

double log_normal_pdf(double x, double mean, double stddev) {
  double z = (x - mean) / stddev;
  return -0.5 * z * z - std::log(stddev) - 0.5 * std::log(kTwoPi);
}

double log_gamma_pdf(double x, double shape, double scale) {
  if (x <= 0) return -std::numeric_limits<double>::infinity();
  return (shape - 1.0) * std::log(x) - x / scale - std::lgamma(shape) -
         shape * std::log(scale);
}

}  // namespace alws
