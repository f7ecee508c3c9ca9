#include "alws/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <utility>

#include "alws/kernels.hpp"
#include "alws/tape.hpp"

namespace alws {

namespace {

void validate_config(const GenerativeModel& model, const TrainConfig& cfg) {
  check(cfg.n_sleep >= 2, "train config: n_sleep must be at least 2");
  check(cfg.n_val == 0 || cfg.n_val >= 2,
        "train config: n_val must be 0 or at least 2");
  check(cfg.batch_size >= 1, "train config: batch_size must be positive");
  check(cfg.epochs >= 0, "train config: epochs must be nonnegative");
  check(cfg.gen_lr >= 0.0, "train config: gen_lr must be nonnegative");
  check(cfg.grad_lr >= 0.0, "train config: grad_lr must be nonnegative");
  check(cfg.lambda_init > 0.0, "train config: lambda_init must be positive");
  check(cfg.bandwidth_policy == "adapt" || cfg.bandwidth_policy == "median" ||
            cfg.bandwidth_policy == "fixed",
        "train config: bandwidth_policy must be adapt, median, or fixed");
  check(cfg.bandwidth_init >= 0.0,
        "train config: bandwidth_init must be nonnegative");
  check(cfg.median_cap >= 2, "train config: median_cap must be at least 2");
  check(cfg.adapt_steps >= 0 && cfg.adapt_warmup >= 0 && cfg.proj_warmup >= 0,
        "train config: adaptation counts must be nonnegative");
  check(cfg.adapt_every >= 1, "train config: adapt_every must be positive");
  check(cfg.n_projections >= 0,
        "train config: n_projections must be nonnegative");
  if (cfg.batchnorm)
    check(cfg.n_projections > 0,
          "train config: batchnorm needs projection features");
  if (cfg.exp_fam_mode)
    check(model.has_exp_fam(),
          model.name() + " has no exponential-family form for exp_fam_mode");
  check(cfg.penalty_scale >= 0.0,
        "train config: penalty_scale must be nonnegative");
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  const auto dt = std::chrono::steady_clock::now() - t0;
  return std::chrono::duration<double, std::milli>(dt).count();
}

}  // namespace

bool adam_update(Vec& theta, const Vec& grad, AdamState& state, double lr) {
  check(grad.size() == theta.size(), "adam_update: gradient size mismatch");
  if (!all_finite(grad)) return false;
  if (state.step == 0) {
    state.m = Vec::Zero(theta.size());
    state.v = Vec::Zero(theta.size());
  }
  check(state.m.size() == theta.size() && state.v.size() == theta.size(),
        "adam_update: state does not match the parameter size");
  const double b1 = 0.9;
  const double b2 = 0.999;
  const double eps = 1e-8;
  ++state.step;
  state.m = b1 * state.m + (1.0 - b1) * grad;
  state.v = b2 * state.v + (1.0 - b2) * grad.cwiseProduct(grad).eval();
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
  return true;
}

Mat sleep_targets(const GenerativeModel& model, const ParamVector& theta,
                  const Mat& Z, const Mat& X, bool exp_fam_mode) {
  check(Z.cols() == X.cols(), "sleep_targets: sample counts differ");
  check(Z.rows() == model.dim_z() && X.rows() == model.dim_x(),
        "sleep_targets: sample dimensions do not match the model");
  if (!exp_fam_mode) {
    Vec y = model.log_joint_values(theta, Z, X);
    check(all_finite(y), "sleep targets are not finite");
    Mat Y = y.transpose();
    return Y;
  }
  check(model.has_exp_fam(),
        model.name() + " has no exponential-family form");
  Tape t;
  Var th = t.param(theta.data());
  Var eta = model.exp_fam_eta_batch(t, th, Z);
  Var psi = model.exp_fam_psi_batch(t, th, Z);
  Mat Y(model.suff_dim() + 1, Z.cols());
  Y.topRows(model.suff_dim()) = t.value(eta);
  Y.bottomRows(1) = t.value(psi);
  check(all_finite(Y), "sleep targets are not finite");
  return Y;
}

SleepFit sleep_fit(const GenerativeModel& model, const ParamVector& theta,
                   const Hyperparams& hp, int n_sleep, bool exp_fam_mode,
                   std::uint64_t seed) {
  check(n_sleep >= 2, "sleep_fit: needs at least two sleep samples");
  SampleBatch sb = model.sample(theta, seed, n_sleep);
  Mat Y = sleep_targets(model, theta, sb.Z, sb.X, exp_fam_mode);
  const TargetKind kind =
      exp_fam_mode ? TargetKind::exp_fam : TargetKind::scalar;
  GradientModelFit fit =
      krr_fit(sb.X, Y, hp, kind, exp_fam_mode ? model.suff_dim() : 0);
  return SleepFit{std::move(sb.Z), std::move(sb.X), std::move(fit)};
}

WakeGradient wake_gradient(const GenerativeModel& model,
                           const ParamVector& theta, const SleepFit& sf,
                           const Mat& Xstar, double penalty_scale) {
  model.validate_theta(theta);
  check(Xstar.rows() == model.dim_x(),
        "wake_gradient: observation dimension mismatch");
  const int m = static_cast<int>(Xstar.cols());
  check(m >= 1, "wake_gradient: empty wake batch");
  Mat W = krr_weights(sf.fit, Xstar);  // N x m
  Mat urow = W.rowwise().sum().transpose() / static_cast<double>(m);

  Tape t;
  Var th = t.param(theta.data());
  Var obj;
  if (sf.fit.target_kind == TargetKind::scalar) {
    Var h = model.log_joint_batch(t, th, sf.Z, sf.X);
    obj = t.dot(h, t.constant(urow));
  } else {
    Mat S = model.suff_stats_batch(Xstar);
    Mat T = S * W.transpose() / static_cast<double>(m);  // suff_dim x N
    Var eta = model.exp_fam_eta_batch(t, th, sf.Z);
    Var psi = model.exp_fam_psi_batch(t, th, sf.Z);
    obj = t.sub(t.dot(eta, t.constant(T)), t.dot(psi, t.constant(urow)));
  }
  if (model.has_penalty() && penalty_scale != 0.0)
    obj = t.add(obj, t.scale_c(penalty_scale, model.log_penalty(t, th)));

  WakeGradient out{t.value_scalar(obj), ParamVector(model.layout())};
  out.grad.data() = t.backward(obj);
  return out;
}

TrainRecord wake_sleep_step(const GenerativeModel& model, ParamVector& theta,
                            Hyperparams& hp, AdamState& adam,
                            const Mat& data_batch, const TrainConfig& cfg,
                            Rng& rng, long iteration) {
  validate_config(model, cfg);
  check(data_batch.rows() == model.dim_x(),
        "wake_sleep_step: batch dimension does not match the model");
  check(data_batch.cols() >= 1, "wake_sleep_step: empty batch");
  model.validate_theta(theta);

  TrainRecord rec;
  rec.iteration = iteration;
  // Both seeds are derived up front so the stream advances the same way on
  // aborted iterations.
  const std::uint64_t sleep_seed =
      rng.derive(2 * static_cast<std::uint64_t>(iteration));
  const std::uint64_t val_seed =
      rng.derive(2 * static_cast<std::uint64_t>(iteration) + 1);
  const auto t0 = std::chrono::steady_clock::now();

  Hyperparams work = hp;
  try {
    SampleBatch sb = model.sample(theta, sleep_seed, cfg.n_sleep);
    work.kernel.feature_map.update_stats(sb.X);
    const bool median_now =
        cfg.bandwidth_policy == "median" ||
        (iteration == 0 && cfg.bandwidth_init <= 0.0);
    if (median_now) {
      const int cap = std::min<int>(cfg.median_cap,
                                    static_cast<int>(sb.X.cols()));
      work.kernel.log_bandwidth =
          std::log(median_heuristic(work.kernel, sb.X.leftCols(cap)));
    }
    Mat Y = sleep_targets(model, theta, sb.Z, sb.X, cfg.exp_fam_mode);
    const TargetKind kind =
        cfg.exp_fam_mode ? TargetKind::exp_fam : TargetKind::scalar;
    const int eta_dim = cfg.exp_fam_mode ? model.suff_dim() : 0;
    GradientModelFit fit = krr_fit(sb.X, Y, work, kind, eta_dim);

    if (cfg.n_val > 0) {
      SampleBatch vb = model.sample(theta, val_seed, cfg.n_val);
      Mat Yval = sleep_targets(model, theta, vb.Z, vb.X, cfg.exp_fam_mode);
      const bool adapting =
          cfg.bandwidth_policy == "adapt" && cfg.adapt_steps > 0 &&
          iteration >= cfg.adapt_warmup &&
          (iteration - cfg.adapt_warmup) % cfg.adapt_every == 0;
      if (adapting) {
        AdaptOptions opt;
        opt.steps = cfg.adapt_steps;
        opt.lr = cfg.grad_lr;
        opt.adapt_projection =
            cfg.adapt_projection && iteration >= cfg.proj_warmup;
        AdaptResult ar = krr_adapt(work, sb.X, Y, vb.X, Yval, opt);
        work = ar.hp;
        if (ar.aborted)
          rec.note = "hyperparameter step aborted; keeping the last "
                     "good values";
        if (ar.mse_trace.size() > 0)
          rec.val_mse = ar.mse_trace[ar.mse_trace.size() - 1];
        fit = krr_fit(sb.X, Y, work, kind, eta_dim);
      } else {
        rec.val_mse = (krr_predict(fit, vb.X) - Yval).squaredNorm() /
                      static_cast<double>(vb.X.cols());
      }
    }

    SleepFit sf{std::move(sb.Z), std::move(sb.X), std::move(fit)};
    const double scale = cfg.penalty_scale > 0.0
                             ? cfg.penalty_scale
                             : 1.0 / static_cast<double>(data_batch.cols());
    WakeGradient wg = wake_gradient(model, theta, sf, data_batch, scale);
    rec.j_bar = wg.j_bar;
    rec.grad_norm = wg.grad.data().norm();
    rec.bandwidth = work.kernel.bandwidth();
    rec.lambda = work.lambda;
    rec.jitter = sf.fit.jitter;
    hp = work;
    Vec ascent = -wg.grad.data();
    if (!adam_update(theta.data(), ascent, adam, cfg.gen_lr))
      rec.note = "wake gradient has non-finite entries; parameter update "
                 "skipped";
  } catch (const Error& e) {
    rec.aborted = true;
    rec.note = e.what();
  }
  rec.wall_ms = elapsed_ms(t0);
  return rec;
}

namespace {

TrainResult train_impl(const GenerativeModel& model, const Mat& dataset,
                       const TrainConfig& cfg, const ParamVector* theta_init,
                       const IterationCallback& callback) {
  validate_config(model, cfg);
  check(dataset.rows() == model.dim_x(),
        "train: dataset rows must match the model observation dimension");
  const int n_data = static_cast<int>(dataset.cols());
  check(n_data >= 1, "train: empty dataset");
  check(cfg.batch_size <= n_data, "train: batch_size exceeds the dataset");

  ParamVector theta =
      theta_init ? *theta_init : model.initial_theta(cfg.seed);
  model.validate_theta(theta);

  TrainConfig local = cfg;
  if (local.penalty_scale <= 0.0)
    local.penalty_scale = 1.0 / static_cast<double>(n_data);

  Rng root(cfg.seed);
  Hyperparams hp;
  hp.lambda = cfg.lambda_init;
  hp.lambda_fixed = cfg.lambda_fixed;
  if (cfg.n_projections > 0) {
    Rng proj_rng(root.derive(0));
    hp.kernel.feature_map = FeatureMap::projection(
        cfg.n_projections, model.dim_x(), proj_rng, cfg.batchnorm);
  }
  if (cfg.bandwidth_init > 0.0)
    hp.kernel.log_bandwidth = std::log(cfg.bandwidth_init);

  AdamState adam;
  TrainLog log;
  std::vector<double> jhist;
  int consecutive_aborts = 0;
  long iteration = 0;
  const int n_batches = (n_data + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<int> order(n_data);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(root.derive(1));
    for (int i = n_data - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
    for (int b = 0; b < n_batches; ++b) {
      const int lo = b * cfg.batch_size;
      const int hi = std::min(n_data, lo + cfg.batch_size);
      Mat batch(dataset.rows(), hi - lo);
      for (int j = lo; j < hi; ++j) batch.col(j - lo) = dataset.col(order[j]);

      TrainRecord rec = wake_sleep_step(model, theta, hp, adam, batch, local,
                                        root, iteration);
      rec.epoch = epoch;
      log.records.push_back(rec);
      if (callback) callback(log.records.back(), theta);
      ++iteration;

      if (rec.aborted) {
        if (++consecutive_aborts >= 3) {
          log.termination =
              "stopped after three consecutive aborted iterations: " +
              rec.note;
          return TrainResult{std::move(theta), std::move(log)};
        }
        continue;
      }
      consecutive_aborts = 0;
      jhist.push_back(rec.j_bar);
      const std::size_t h = jhist.size();
      if (cfg.convergence_tol > 0.0 && h >= 11) {
        double now = 0.0;
        double prev = 0.0;
        for (std::size_t k = h - 10; k < h; ++k) now += jhist[k];
        for (std::size_t k = h - 11; k < h - 1; ++k) prev += jhist[k];
        now /= 10.0;
        prev /= 10.0;
        const double rel =
            std::abs(now - prev) / std::max(std::abs(prev), 1e-12);
        if (rel < cfg.convergence_tol) {
          log.termination = "converged";
          return TrainResult{std::move(theta), std::move(log)};
        }
      }
    }
  }
  log.termination = "max_epochs";
  return TrainResult{std::move(theta), std::move(log)};
}

}  // namespace

TrainResult train(const GenerativeModel& model, const Mat& dataset,
                  const TrainConfig& cfg, const IterationCallback& callback) {
  return train_impl(model, dataset, cfg, nullptr, callback);
}

TrainResult train(const GenerativeModel& model, const Mat& dataset,
                  const TrainConfig& cfg, const ParamVector& theta_init,
                  const IterationCallback& callback) {
  return train_impl(model, dataset, cfg, &theta_init, callback);
}

}  // namespace alws
