#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "alws/common.hpp"
#include "alws/krr.hpp"
#include "alws/models.hpp"
#include "alws/param_vector.hpp"
#include "alws/rng.hpp"

namespace alws {

// First/second-moment state for the generative-parameter optimizer.
struct AdamState {
  Vec m;
  Vec v;
  long step = 0;
};

// One bias-corrected Adam descent step, in place (beta1 = 0.9, beta2 = 0.999,
// epsilon = 1e-8). Returns false and leaves theta and state untouched when
// the gradient has a non-finite component.
bool adam_update(Vec& theta, const Vec& grad, AdamState& state, double lr);

struct TrainConfig {
  int n_sleep = 2000;    // samples behind each gradient-model fit
  int n_val = 200;       // fresh samples scoring the hyperparameter step
  int batch_size = 100;  // observations per wake update
  int epochs = 1;
  double gen_lr = 0.001;   // Adam rate on the generative parameters
  double grad_lr = 0.001;  // descent rate on the gradient-model hyperparameters
  double lambda_init = 0.01;
  bool lambda_fixed = false;
  bool exp_fam_mode = false;
  // "adapt" descends the validation objective (lambda too, unless fixed);
  // "median" re-applies the median heuristic to every sleep batch; "fixed"
  // freezes the starting value. The starting value is bandwidth_init when
  // positive, otherwise the median heuristic on the first sleep batch.
  std::string bandwidth_policy = "adapt";
  double bandwidth_init = 0.0;
  int median_cap = 512;  // in-loop median heuristic runs on at most this many
  int adapt_steps = 1;
  int adapt_every = 1;   // iterations between hyperparameter steps
  int adapt_warmup = 0;  // iterations before hyperparameter steps begin
  bool adapt_projection = false;
  int proj_warmup = 0;   // iterations before projection weights join in
  int n_projections = 0; // 0 keeps the identity feature map
  bool batchnorm = false;
  // Weight on the model's parameter penalty in the wake objective;
  // 0 means 1/dataset-size (train) or 1/batch-size (bare steps).
  double penalty_scale = 0.0;
  std::uint64_t seed = 1;
  // Stop when the relative change of a 10-iteration moving average of the
  // wake objective falls below this; non-positive disables the check.
  double convergence_tol = 1e-5;
};

struct TrainRecord {
  long iteration = 0;
  int epoch = 0;
  double j_bar = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  double val_mse = std::numeric_limits<double>::quiet_NaN();
  double bandwidth = std::numeric_limits<double>::quiet_NaN();
  double lambda = std::numeric_limits<double>::quiet_NaN();
  double jitter = 0.0;
  bool aborted = false;
  std::string note;     // error text for aborted or skipped updates
  double wall_ms = 0.0; // excluded from reproducibility comparisons
};

struct TrainLog {
  std::vector<TrainRecord> records;
  // "max_epochs", "converged", or a diagnostic after repeated aborts.
  std::string termination;
};

struct TrainResult {
  ParamVector theta;
  TrainLog log;
};

// Sleep phase: joint samples drawn at theta plus the gradient model fitted
// on them.
struct SleepFit {
  Mat Z;  // dim_z x N
  Mat X;  // dim_x x N
  GradientModelFit fit;
};

// Regression targets at theta: the per-sample log joint as one row, or, in
// exponential-family mode, the natural parameters stacked over one
// log-normalizer row.
Mat sleep_targets(const GenerativeModel& model, const ParamVector& theta,
                  const Mat& Z, const Mat& X, bool exp_fam_mode);

SleepFit sleep_fit(const GenerativeModel& model, const ParamVector& theta,
                   const Hyperparams& hp, int n_sleep, bool exp_fam_mode,
                   std::uint64_t seed);

// Wake objective over a batch of observations (mean predicted log marginal
// plus the scaled parameter penalty) and its gradient with respect to theta,
// taken through the fitted prediction's dependence on the targets.
struct WakeGradient {
  double j_bar = 0.0;
  ParamVector grad;
};

WakeGradient wake_gradient(const GenerativeModel& model,
                           const ParamVector& theta, const SleepFit& sf,
                           const Mat& Xstar, double penalty_scale);

// One full iteration: sleep fit at theta, hyperparameter step on fresh
// validation samples, then an Adam ascent step on the wake batch. theta, hp,
// and adam are updated in place on success and left untouched when the
// returned record is marked aborted.
TrainRecord wake_sleep_step(const GenerativeModel& model, ParamVector& theta,
                            Hyperparams& hp, AdamState& adam,
                            const Mat& data_batch, const TrainConfig& cfg,
                            Rng& rng, long iteration = 0);

using IterationCallback =
    std::function<void(const TrainRecord&, const ParamVector&)>;

// Full run: epochs x ceil(dataset/batch) iterations over shuffled batches,
// deterministic given cfg.seed. Stops early on convergence or after three
// consecutive aborted iterations (recorded in log.termination).
TrainResult train(const GenerativeModel& model, const Mat& dataset,
                  const TrainConfig& cfg, const IterationCallback& callback = {});
TrainResult train(const GenerativeModel& model, const Mat& dataset,
                  const TrainConfig& cfg, const ParamVector& theta_init,
                  const IterationCallback& callback = {});

}  // namespace alws
