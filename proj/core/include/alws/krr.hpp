#pragma once

#include <memory>

#include "alws/common.hpp"
#include "alws/kernels.hpp"

namespace alws {

// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
// Returns false when the factorization breaks down.
bool try_cholesky(const Mat& A, Mat& L);

struct CholFactor {
  std::shared_ptr<const Mat> L;
  double jitter = 0.0;
};

// Factorizes A, escalating a diagonal jitter (relative to trace(A)/N, from
// 1e-10 up to 1e-4 in decades) when A is numerically singular. Errors after
// the escalation limit, reporting the last jitter tried.
CholFactor cholesky_with_jitter(const Mat& A);

// Solves (L L^T) X = B.
Mat cholesky_solve(const Mat& L, Mat B);

enum class TargetKind { scalar, exp_fam };

struct Hyperparams {
  KernelParams kernel;
  double lambda = 0.01;
  bool lambda_fixed = false;
};

// Fitted ridge-regression state. alpha has one row per target dimension;
// for exp_fam targets the first eta_dim rows regress the natural parameters
// and the last row the log-normalizer.
struct GradientModelFit {
  Mat train_inputs;  // d_x x N
  KernelParams kernel;
  double lambda = 0.0;
  double jitter = 0.0;
  std::shared_ptr<const Mat> chol;  // lower factor of K + (lambda N + jitter) I
  Mat alpha;                        // d_t x N
  Mat targets;                      // d_t x N, retained for adaptation
  TargetKind target_kind = TargetKind::scalar;
  int eta_dim = 0;

  int n() const { return static_cast<int>(train_inputs.cols()); }
};

GradientModelFit krr_fit(const Mat& X, const Mat& Y, const Hyperparams& hp,
                         TargetKind kind = TargetKind::scalar, int eta_dim = 0);

// Prediction weights (K + lambda N I)^{-1} k*, one column per query.
Vec krr_weights(const GradientModelFit& fit, const Vec& xstar);
Mat krr_weights(const GradientModelFit& fit, const Mat& Xstar);

Vec krr_predict(const GradientModelFit& fit, const Vec& xstar);
Mat krr_predict(const GradientModelFit& fit, const Mat& Xstar);  // d_t x M

// grad_targets carries one column per training sample; returns
// grad_targets * (K + lambda N I)^{-1} k*(x*).
Vec krr_predict_grad_targets(const GradientModelFit& fit, const Mat& grad_targets,
                             const Vec& xstar);

struct AdaptOptions {
  int steps = 1;
  double lr = 0.05;
  bool adapt_projection = false;
};

struct AdaptResult {
  Hyperparams hp;
  // Validation MSE at the incoming hyperparameters, then after each step.
  // Empty when steps == 0.
  Vec mse_trace;
  bool aborted = false;
};

// Gradient descent on log bandwidth (and log lambda unless fixed, and
// projection weights when enabled), refitting alpha on the fit set at every
// step and scoring mean squared prediction error on the validation set.
// Gradients are exact, computed by differentiating through the refit.
AdaptResult krr_adapt(const Hyperparams& hp, const Mat& Xfit, const Mat& Yfit,
                      const Mat& Xval, const Mat& Yval, const AdaptOptions& opt);

}  // namespace alws
