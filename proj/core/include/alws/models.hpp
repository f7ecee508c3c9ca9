#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "alws/common.hpp"
#include "alws/options.hpp"
#include "alws/param_vector.hpp"
#include "alws/rng.hpp"
#include "alws/tape.hpp"

namespace alws {

// A batch of draws from the model; one sample per column.
struct SampleBatch {
  Mat Z;  // dim_z x n latents
  Mat X;  // dim_x x n observations
};

// Likelihood in natural form: log p(x|z) = eta . s(x) - log Z(theta, z).
// log_norm folds the prior in as well (log Z - log p(z)) so that
// eta . s(x) - log_norm reconstructs the full log-joint.
struct ExpFamParts {
  Vec natural_params;
  double log_norm;
};

// Time series with time as the leading axis.
struct Trajectory {
  Mat latents;       // T x per-step latent dim
  Mat observations;  // T x per-step observation dim
  Mat controls;      // T x control dim, or empty when the model has none
};

// A latent-variable generative model: seeded joint sampling plus a log-joint
// that the tape can differentiate with respect to the parameter vector.
// Models are immutable descriptions; every operation takes theta explicitly
// and sampling is pure given its seed.
class GenerativeModel {
 public:
  virtual ~GenerativeModel() = default;

  const std::string& name() const { return name_; }
  int dim_z() const { return dim_z_; }
  int dim_x() const { return dim_x_; }
  std::shared_ptr<const ParamLayout> layout() const { return layout_; }

  // Starting parameters for training, seeded. Observation-noise scales are
  // widened by the model's overdispersion factor.
  virtual ParamVector initial_theta(std::uint64_t seed) const = 0;

  virtual void validate_theta(const ParamVector& theta) const;

  virtual SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                             int n) const = 0;

  // Per-sample log p_theta(z_i, x_i) as a 1 x n node. Every column of (Z, X)
  // must be in the model's support; callers screen with in_support first.
  virtual Var log_joint_batch(Tape& tape, Var theta, const Mat& Z,
                              const Mat& X) const = 0;

  virtual bool in_support(const Vec& z, const Vec& x) const;

  // Plain log-joint value; -infinity when (z, x) is out of support.
  double log_joint_value(const ParamVector& theta, const Vec& z,
                         const Vec& x) const;
  Vec log_joint_values(const ParamVector& theta, const Mat& Z,
                       const Mat& X) const;

  // Marginal latent density log p_theta(z_i) per column, evaluated in plain
  // arithmetic (no tape). Importance-sampling references divide the joint by
  // this to get likelihood weights. Sequential models do not expose it.
  virtual bool has_prior_density() const { return false; }
  virtual Vec log_prior_values(const ParamVector& theta, const Mat& Z) const;

  // --- exponential-family structure --------------------------------------
  bool has_exp_fam() const { return suff_dim_ > 0; }
  int suff_dim() const { return suff_dim_; }
  virtual Vec suff_stats(const Vec& x) const;
  Mat suff_stats_batch(const Mat& X) const;
  ExpFamParts exp_fam_parts(const ParamVector& theta, const Vec& z) const;
  // eta for each latent column as a suff_dim x n node.
  virtual Var exp_fam_eta_batch(Tape& tape, Var theta, const Mat& Z) const;
  // Psi = log Z - log p(z) for each latent column as a 1 x n node.
  virtual Var exp_fam_psi_batch(Tape& tape, Var theta, const Mat& Z) const;

  // --- parameter penalty --------------------------------------------------
  // Log-prior over theta added to the wake objective (scaled by the caller);
  // zero when has_penalty() is false.
  virtual bool has_penalty() const { return false; }
  virtual Var log_penalty(Tape& tape, Var theta) const;

  // --- dynamical models ----------------------------------------------------
  virtual bool is_dynamical() const { return false; }
  int steps() const { return steps_; }
  // Roll the model forward for T steps with injected noise. controls may be
  // empty for models without an input signal.
  virtual Trajectory simulate(const ParamVector& theta, std::uint64_t seed,
                              int T, const Mat& controls) const;
  // Flatten a trajectory into the (z, x) columns used by sample/log_joint.
  virtual Vec flatten_latents(const Trajectory& traj) const;
  virtual Vec flatten_observations(const Trajectory& traj) const;

  // Noise-free one-step prediction: conditional means of z_t and x_t given
  // z_{t-1}, one column per sample. Only dynamical models whose transition
  // mean is a function of the previous latent alone can offer this.
  virtual bool has_predict_step() const { return false; }
  virtual void predict_step(const ParamVector& theta, const Mat& z_prev,
                            const Mat& controls, Mat& z_next,
                            Mat& x_next) const;

  // --- latent-space objective (posterior-mode search) ----------------------
  virtual bool has_latent_objective() const { return false; }
  // log p(z(u), x) as a scalar node with the search point u as the leaf;
  // theta is fixed. u lives in an unconstrained space; latent_from_search
  // maps it back to the model's latent domain.
  virtual Var log_joint_latent(Tape& tape, Var u, const ParamVector& theta,
                               const Vec& x) const;
  virtual Vec latent_from_search(const Vec& u) const;
  virtual Vec search_from_latent(const Vec& z) const;

 protected:
  GenerativeModel(std::string name, int dim_z, int dim_x)
      : name_(std::move(name)), dim_z_(dim_z), dim_x_(dim_x) {}

  std::string name_;
  int dim_z_ = 0;
  int dim_x_ = 0;
  int suff_dim_ = 0;  // 0 means no exponential-family structure
  int steps_ = 0;     // trajectory length for dynamical models
  std::shared_ptr<const ParamLayout> layout_;
};

// Builds a model from its registry name. Unknown names list the registry.
std::unique_ptr<GenerativeModel> make_model(const std::string& name,
                                            const Options& opts);

// Registry names, comma separated (for error messages and --help).
std::string model_names();

// Constructors (used directly by tests; make_model dispatches to these).
std::unique_ptr<GenerativeModel> make_toy_softplus(const Options& opts);
std::unique_ptr<GenerativeModel> make_linear_gaussian(const Options& opts);
std::unique_ptr<GenerativeModel> make_circular(const Options& opts);
std::unique_ptr<GenerativeModel> make_pinwheel_hier(const Options& opts);
std::unique_ptr<GenerativeModel> make_ica_laplace(const Options& opts);
std::unique_ptr<GenerativeModel> make_mat_fact(const Options& opts);
std::unique_ptr<GenerativeModel> make_oscillator(const Options& opts);
std::unique_ptr<GenerativeModel> make_hodgkin_huxley(const Options& opts);
std::unique_ptr<GenerativeModel> make_blowfly(const Options& opts);

}  // namespace alws
