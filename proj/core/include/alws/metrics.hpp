#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "alws/common.hpp"
#include "alws/kernels.hpp"
#include "alws/models.hpp"

namespace alws {

// Unbiased two-sample MMD^2. Being a U-statistic it can dip below zero when
// the two samples come from the same distribution.
struct MMDResult {
  double mmd2 = 0.0;
  int n_x = 0;
  int n_y = 0;
  KernelParams kernel;
  // Filled by callers that ran a resampling comparison; plain two-sample
  // evaluations leave it empty.
  std::optional<double> bootstrap_p;
};

using KernelFn = std::function<double(const Vec&, const Vec&)>;

// Equal sample sizes use the paired h-statistic, which cancels exactly on
// identical inputs; unequal sizes fall back to the three-term estimator.
// Both exclude diagonal terms. Needs at least two points per set.
double mmd2_unbiased_stat(const Mat& X, const Mat& Y, const KernelFn& k);
MMDResult mmd2_unbiased(const Mat& X, const Mat& Y, const KernelParams& kp);

// Default MMD kernel: identity features with the median heuristic bandwidth
// on the pooled columns of both samples.
KernelParams mmd_median_kernel(const Mat& X, const Mat& Y);

// Which of two candidate samples sits closer to the data in MMD^2?
// delta = mmd2(data, candidate_b) - mmd2(data, candidate_a), so positive
// delta favors candidate A. bootstrap_p is the resampling probability of
// delta <= 0 (add-one smoothed); small values mean A is reliably closer.
// The comparison resamples all three sets with replacement and uses the
// three-term estimator throughout, independent of sample sizes.
struct MMDComparison {
  MMDResult versus_a;
  MMDResult versus_b;
  double delta = 0.0;
  double bootstrap_p = 1.0;
  int resamples = 0;
};

MMDComparison mmd_compare(const Mat& data, const Mat& A, const Mat& B,
                          const KernelParams& kp, int resamples,
                          std::uint64_t seed);

// a . b / (|a| |b|); errors on a zero vector.
double cosine(const Vec& a, const Vec& b);

// Greedy assignment of estimated basis columns to true columns by largest
// absolute Pearson correlation, without replacement. Signs flip estimated
// columns so the matched correlation is positive.
struct BasisMatch {
  double mean_abs_corr = 0.0;
  std::vector<int> permutation;  // estimated column matched to true column i
  std::vector<int> signs;        // +1 or -1 per true column
};

BasisMatch basis_match(const Mat& W_true, const Mat& W_est);

// Mean squared error between the observation tracks of two trajectories.
double traj_mse(const Trajectory& pred, const Trajectory& ref);

}  // namespace alws
