#pragma once

#include <string>

#include "alws/common.hpp"
#include "alws/rng.hpp"

namespace alws {

// Observations are stored one per column throughout the kernel code.

// Squared Euclidean distances between columns of A and columns of B.
Mat pairwise_sqdist(const Mat& A, const Mat& B);
// Symmetric variant with an exactly zero diagonal.
Mat pairwise_sqdist(const Mat& X);

// Maps raw observations into the space the kernel operates on.
struct FeatureMap {
  enum class Kind { identity, projection, projection_batchnorm };

  Kind kind = Kind::identity;
  Mat weights;       // d_out x d_x
  Vec running_mean;  // d_out
  Vec running_var;   // d_out, entries stay positive
  double epsilon = 1e-5;
  double momentum = 0.1;

  static FeatureMap identity();
  // Weights drawn from N(0, 1/d_x).
  static FeatureMap projection(int d_out, int d_x, Rng& rng, bool batchnorm = false);

  int out_dim(int d_x) const;
  Mat apply(const Mat& X) const;
  // Folds the batch statistics of X into the running statistics.
  // Only meaningful for the batchnorm variant; no-op otherwise.
  void update_stats(const Mat& X);
};

struct KernelParams {
  double log_bandwidth = 0.0;
  FeatureMap feature_map;

  double bandwidth() const;
};

double kernel_eval(const KernelParams& kp, const Vec& x, const Vec& y);
// N x N matrix of kernel values over the columns of X.
Mat kernel_gram(const KernelParams& kp, const Mat& X);
// N x M matrix k(x_i, x*_j) for training columns X and query columns Xs.
Mat kernel_cross(const KernelParams& kp, const Mat& X, const Mat& Xs);
Vec kernel_cross(const KernelParams& kp, const Mat& X, const Vec& xs);

// Median of the N(N-1)/2 pairwise feature-space distances.
// Errors when fewer than two points are given or the median is zero.
double median_heuristic(const KernelParams& kp, const Mat& X);

std::string kernel_params_to_json(const KernelParams& kp);
KernelParams kernel_params_from_json(const std::string& text);

}  // namespace alws
