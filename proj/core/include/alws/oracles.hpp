#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "alws/common.hpp"
#include "alws/models.hpp"
#include "alws/param_vector.hpp"
#include "alws/rng.hpp"

namespace alws {

// Ground-truth estimators used to cross-check the learned gradient model:
// importance sampling against the latent prior, the closed-form
// linear-Gaussian marginal, posterior-mode search, and a regression sanity
// check on a discrete joint where the conditional mean is enumerable.

// Self-normalized importance-sampling estimate of the posterior expectation
// E_{p(z|x*)}[grad_theta log p_theta(z, x*)].
struct ISEstimate {
  ParamVector gradient;
  Vec weights;                         // normalized, sums to 1
  double effective_sample_size = 0.0;  // 1 / sum(w_i^2), in [1, n_proposals]
  int n_proposals = 0;
};

// Proposes n latents from the model prior and reweights by the density
// ratio p(z, x*) / p(z) = p(x* | z), normalized through log-sum-exp.
// Requires the model to expose its latent prior density. Errors when every
// weight underflows, reporting the largest log-weight seen.
ISEstimate is_gradient(const GenerativeModel& model, const ParamVector& theta,
                       const Vec& x_star, int n_proposals, std::uint64_t seed);

// Closed-form marginal likelihood of the linear-Gaussian model:
// x ~ N(c, W W^T + diag(sigma_x^2)) once the standard-normal latent is
// integrated out, with the exact parameter gradient.
struct ExactMarginal {
  double loglik = 0.0;
  ParamVector gradient;
};

ExactMarginal lin_gauss_exact(const GenerativeModel& model,
                              const ParamVector& theta, const Vec& x_star);

// Gradient ascent on log p(z, x*) over z, run in the model's unconstrained
// search space with halving backtracking on each step.
struct MapResult {
  Vec z_map;
  double objective = 0.0;  // log joint at z_map
  bool hit_backtrack_floor = false;
};

MapResult map_latent(const GenerativeModel& model, const ParamVector& theta,
                     const Vec& x_star, const Vec& init_z, int steps,
                     double lr);

// Smoothing-based forecast error for dynamical models: infers the latent
// path of one flattened sequence by posterior-mode search (from a zero
// start), pushes each smoothed state through the model's noise-free step,
// and scores the predicted next observations. Returns the mean squared
// error per observation coordinate over steps 2..T.
double one_step_mse(const GenerativeModel& model, const ParamVector& theta,
                    const Vec& x_flat, int map_steps, double map_lr);

// A finite joint over (x, y): x ranges over a few atom columns, y over a
// few outcome columns per atom, so E[y | x] is exactly enumerable.
struct DiscreteJoint {
  Mat x_atoms;                  // d_x x K
  Vec atom_probs;               // K, sums to 1
  std::vector<Mat> y_outcomes;  // per atom: d_y x m_k
  std::vector<Vec> y_probs;     // per atom: m_k, sums to 1

  Vec conditional_mean(int atom) const;
  // Draws (atom index, y outcome) from the joint.
  std::pair<int, Vec> draw(Rng& rng) const;
};

struct MseComparison {
  double mse_predictor = 0.0;
  double mse_conditional_mean = 0.0;
};

using Predictor = std::function<Vec(const Vec&)>;

// Empirical mean squared error of a predictor on draws from the joint, next
// to the error of the exact conditional mean on the same draws. Any
// regressor of y on x should land at or above the conditional-mean column.
MseComparison conditional_mean_check(const DiscreteJoint& joint,
                                     const Predictor& predictor, int n_samples,
                                     std::uint64_t seed);

}  // namespace alws
