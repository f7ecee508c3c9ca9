#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "alws/common.hpp"

namespace alws {

// Deterministic random source. The raw stream is std::mt19937_64 (stable
// across platforms by the standard); every distribution on top of it is
// implemented here rather than delegated to <random>, whose distribution
// algorithms are implementation-defined and would break same-seed
// reproducibility across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Derives an independent seed for a substream; advancing the derived
  // stream leaves this one untouched.
  std::uint64_t derive(std::uint64_t salt);

  // Uniform on [0, 1).
  double u01();
  // Uniform on (0, 1); safe as a log() argument.
  double u01_open();
  double uniform(double a, double b);
  // Standard normal via Box-Muller (second draw cached).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  double exponential() { return -std::log(u01_open()); }
  // Density 0.5/b * exp(-|x-mu|/b).
  double laplace(double mu, double b);
  // Shape/scale parameterization, mean = shape * scale.
  double gamma(double shape, double scale);
  double lognormal(double log_mean, double sigma) {
    return std::exp(normal(log_mean, sigma));
  }
  // Index in [0, probs.size()) with the given (normalized) probabilities.
  int categorical(const Vec& probs);
  int uniform_int(int n);  // [0, n)

  Vec normal_vec(int n);

 private:
  std::mt19937_64 gen_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

// Log-density helpers shared by models and oracles.
double log_normal_pdf(double x, double mean, double stddev);
double log_gamma_pdf(double x, double shape, double scale);

}  // namespace alws
