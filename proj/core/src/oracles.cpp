#include "alws/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "alws/tape.hpp"

namespace alws {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::string fmt(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

}  // namespace

ISEstimate is_gradient(const GenerativeModel& model, const ParamVector& theta,
                       const Vec& x_star, int n_proposals,
                       std::uint64_t seed) {
  check(n_proposals >= 1, "is_gradient needs at least one proposal");
  check(x_star.size() == model.dim_x(),
        "is_gradient: x_star has size " + std::to_string(x_star.size()) +
            ", expected " + std::to_string(model.dim_x()));
  if (!model.has_prior_density()) {
    fail(model.name() + " does not expose a latent prior density");
  }

  // Latent columns of a joint draw are prior draws; the paired observations
  // are discarded.
  const Mat Z = model.sample(theta, seed, n_proposals).Z;
  Mat X_rep(model.dim_x(), n_proposals);
  X_rep.colwise() = x_star;

  // log w_i = log p(z_i, x*) - log p(z_i) = log p(x* | z_i)
  const Vec log_joint = model.log_joint_values(theta, Z, X_rep);
  const Vec log_prior = model.log_prior_values(theta, Z);
  Vec log_w(n_proposals);
  double max_lw = kNegInf;
  for (int i = 0; i < n_proposals; ++i) {
    log_w[i] = std::isfinite(log_joint[i]) ? log_joint[i] - log_prior[i]
                                           : kNegInf;
    max_lw = std::max(max_lw, log_w[i]);
  }
  if (!std::isfinite(max_lw)) {
    fail("importance weights all vanished; max log-weight = " + fmt(max_lw));
  }

  Vec w = (log_w.array() - max_lw).exp().matrix();
  const double total = w.sum();
  w /= total;

  ISEstimate est;
  est.weights = w;
  est.effective_sample_size = 1.0 / w.squaredNorm();
  est.n_proposals = n_proposals;

  // Weighted gradient in one backward pass: sum_i w_i log p(z_i, x*) has
  // exactly the estimator's gradient. Zero-weight columns are dropped so the
  // batched log-joint never sees an out-of-support pair.
  std::vector<int> keep;
  keep.reserve(n_proposals);
  for (int i = 0; i < n_proposals; ++i) {
    if (w[i] > 0.0) keep.push_back(i);
  }
  Mat Zk(Z.rows(), static_cast<int>(keep.size()));
  Mat Wk(1, static_cast<int>(keep.size()));
  for (int j = 0; j < static_cast<int>(keep.size()); ++j) {
    Zk.col(j) = Z.col(keep[j]);
    Wk(0, j) = w[keep[j]];
  }
  Mat Xk(model.dim_x(), static_cast<int>(keep.size()));
  Xk.colwise() = x_star;

  Tape tape;
  Var th = tape.param(theta.data());
  Var ll = model.log_joint_batch(tape, th, Zk, Xk);
  Var objective = tape.vsum(tape.mul(ll, tape.constant(Wk)));
  Vec grad = tape.backward(objective);

  est.gradient = ParamVector(model.layout());
  est.gradient.data() = grad;
  return est;
}

ExactMarginal lin_gauss_exact(const GenerativeModel& model,
                              const ParamVector& theta, const Vec& x_star) {
  check(model.name() == "linear_gaussian",
        "lin_gauss_exact only applies to the linear_gaussian model, got " +
            model.name());
  check(x_star.size() == model.dim_x(),
        "lin_gauss_exact: x_star has size " + std::to_string(x_star.size()) +
            ", expected " + std::to_string(model.dim_x()));

  const Mat W = theta.matrix("W");
  const Vec c = theta.vector("c");
  const Vec log_sigma = theta.vector("log_sigma_x");
  const int dx = model.dim_x();

  const Vec var_x = (2.0 * log_sigma.array()).exp();
  Mat Sigma = W * W.transpose();
  Sigma.diagonal() += var_x;

  Eigen::LLT<Mat> llt(Sigma);
  if (llt.info() != Eigen::Success) {
    fail("lin_gauss_exact: marginal covariance is singular");
  }
  const Mat L = llt.matrixL();
  double log_det = 0.0;
  for (int i = 0; i < dx; ++i) {
    if (!(L(i, i) > 0.0) || !std::isfinite(L(i, i))) {
      fail("lin_gauss_exact: marginal covariance is singular");
    }
    log_det += 2.0 * std::log(L(i, i));
  }

  const Vec resid = x_star - c;
  const Vec q = llt.solve(resid);
  const Mat Sigma_inv = llt.solve(Mat::Identity(dx, dx));

  ExactMarginal out;
  out.loglik = -0.5 * (dx * std::log(2.0 * M_PI) + log_det + resid.dot(q));

  // d/dSigma of the log-density is (q q^T - Sigma^{-1}) / 2; chaining
  // through Sigma = W W^T + diag(exp(2 log_sigma)) gives the slices below.
  const Mat G = q * q.transpose() - Sigma_inv;
  out.gradient = ParamVector(model.layout());
  out.gradient.set("W", Mat(G * W));
  out.gradient.set("c", Mat(q));
  Vec g_ls(dx);
  for (int j = 0; j < dx; ++j) {
    g_ls[j] = var_x[j] * (q[j] * q[j] - Sigma_inv(j, j));
  }
  out.gradient.set("log_sigma_x", Mat(g_ls));
  return out;
}

MapResult map_latent(const GenerativeModel& model, const ParamVector& theta,
                     const Vec& x_star, const Vec& init_z, int steps,
                     double lr) {
  check(model.has_latent_objective(),
        model.name() + " does not expose a latent-space objective");
  check(init_z.size() == model.dim_z(),
        "map_latent: init_z has size " + std::to_string(init_z.size()) +
            ", expected " + std::to_string(model.dim_z()));
  check(steps >= 0, "map_latent: steps must be non-negative");
  check(lr > 0.0, "map_latent: lr must be positive");

  const auto objective_and_grad = [&](const Vec& u, Vec* grad) {
    Tape tape;
    Var uv = tape.param(u);
    Var node = model.log_joint_latent(tape, uv, theta, x_star);
    const double value = tape.value_scalar(node);
    if (grad != nullptr && std::isfinite(value)) *grad = tape.backward(node);
    return value;
  };
  // A trial step that overflows the model's arithmetic is just a failed
  // step; backtracking shortens it instead of surfacing the error.
  const auto try_objective = [&](const Vec& u_try) {
    try {
      return objective_and_grad(u_try, nullptr);
    } catch (const Error&) {
      return kNegInf;
    }
  };

  MapResult out;
  out.z_map = init_z;
  Vec u = model.search_from_latent(init_z);
  out.objective = objective_and_grad(u, nullptr);
  check(std::isfinite(out.objective),
        "map_latent: log joint is not finite at init_z");
  if (steps == 0) return out;

  const double step_floor = lr * 1e-12;
  for (int it = 0; it < steps; ++it) {
    Vec grad;
    objective_and_grad(u, &grad);
    double step = lr;
    bool accepted = false;
    while (step >= step_floor) {
      const Vec u_try = u + step * grad;
      const double f_try = try_objective(u_try);
      if (std::isfinite(f_try) && f_try > out.objective) {
        u = u_try;
        out.objective = f_try;
        out.z_map = model.latent_from_search(u);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      out.hit_backtrack_floor = true;
      break;
    }
  }
  return out;
}

double one_step_mse(const GenerativeModel& model, const ParamVector& theta,
                    const Vec& x_flat, int map_steps, double map_lr) {
  check(model.is_dynamical(), model.name() + " is not a dynamical model");
  check(model.has_predict_step(),
        model.name() + " does not support one-step prediction");
  check(x_flat.size() == model.dim_x(),
        "one_step_mse: observation has the wrong length");
  const int T = model.steps();
  check(T >= 2, "one_step_mse: needs at least two steps");
  const int dz = model.dim_z() / T;
  const int dx = model.dim_x() / T;

  MapResult smooth = map_latent(model, theta, x_flat,
                                Vec::Zero(model.dim_z()), map_steps, map_lr);
  Mat z_path(dz, T);
  for (int s = 0; s < T; ++s)
    z_path.col(s) = smooth.z_map.segment(dz * s, dz);

  Mat z_next, x_next;
  model.predict_step(theta, z_path.leftCols(T - 1), Mat(), z_next, x_next);
  double err = 0.0;
  for (int s = 1; s < T; ++s)
    err += (x_next.col(s - 1) - x_flat.segment(dx * s, dx)).squaredNorm();
  return err / (static_cast<double>(T - 1) * dx);
}

Vec DiscreteJoint::conditional_mean(int atom) const {
  check(atom >= 0 && atom < static_cast<int>(y_outcomes.size()),
        "DiscreteJoint: atom index out of range");
  return y_outcomes[atom] * y_probs[atom];
}

std::pair<int, Vec> DiscreteJoint::draw(Rng& rng) const {
  const int k = rng.categorical(atom_probs);
  const int j = rng.categorical(y_probs[k]);
  return {k, Vec(y_outcomes[k].col(j))};
}

MseComparison conditional_mean_check(const DiscreteJoint& joint,
                                     const Predictor& predictor, int n_samples,
                                     std::uint64_t seed) {
  const int n_atoms = static_cast<int>(joint.x_atoms.cols());
  check(n_atoms >= 1, "conditional_mean_check: joint has no atoms");
  check(static_cast<int>(joint.atom_probs.size()) == n_atoms &&
            static_cast<int>(joint.y_outcomes.size()) == n_atoms &&
            static_cast<int>(joint.y_probs.size()) == n_atoms,
        "conditional_mean_check: joint fields disagree on the atom count");
  check(n_samples >= 1, "conditional_mean_check: n_samples must be positive");

  // x only takes atom values, so both the predictor and the exact
  // conditional mean are evaluated once per atom.
  std::vector<Vec> predicted(n_atoms), cond_mean(n_atoms);
  for (int k = 0; k < n_atoms; ++k) {
    predicted[k] = predictor(Vec(joint.x_atoms.col(k)));
    cond_mean[k] = joint.conditional_mean(k);
    check(predicted[k].size() == cond_mean[k].size(),
          "conditional_mean_check: predictor output size mismatch");
  }

  Rng rng(seed);
  MseComparison out;
  for (int i = 0; i < n_samples; ++i) {
    const auto [k, y] = joint.draw(rng);
    out.mse_predictor += (predicted[k] - y).squaredNorm();
    out.mse_conditional_mean += (cond_mean[k] - y).squaredNorm();
  }
  out.mse_predictor /= n_samples;
  out.mse_conditional_mean /= n_samples;
  return out;
}

}  // namespace alws
