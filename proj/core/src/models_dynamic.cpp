#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "alws/models.hpp"
#include "model_helpers.hpp"

namespace alws {

using detail::broadcast_col;
using detail::broadcast_row;
using detail::colsum;
using detail::kLog2Pi;
using detail::slice_param;

namespace {

Mat normal_mat(Rng& rng, int rows, int cols) {
  Mat M(rows, cols);
  for (int i = 0; i < M.size(); ++i) M.data()[i] = rng.normal();
  return M;
}

// Gamma draw that never returns exactly zero (tiny shapes can underflow),
// which would land the sample outside the model's support.
double positive_gamma(Rng& rng, double shape, double scale) {
  for (int k = 0; k < 64; ++k) {
    double v = rng.gamma(shape, scale);
    if (v > 0.0) return v;
  }
  return std::numeric_limits<double>::min();
}

// Scalar twin of the tape's x/(e^x - 1) primitive, for the sampling path.
double expm1_ratio(double x) {
  if (std::abs(x) < 1e-5) return 1.0 - 0.5 * x + x * x / 12.0;
  if (x > 700.0) return 0.0;
  return x / std::expm1(x);
}

// --- nonlinear latent oscillation -------------------------------------------
//
// First-order Markov latents in the plane driven by a small tanh network,
// with a second network mapping each latent to the observation frame. A
// whole sequence is one sample; columns flatten time step-major.

class Oscillator final : public GenerativeModel {
 public:
  explicit Oscillator(const Options& opts)
      : GenerativeModel("oscillator",
                        2 * opts.get_int("steps", 30),
                        opts.get_int("obs_dim", 20) * opts.get_int("steps", 30)),
        obs_dim_(opts.get_int("obs_dim", 20)),
        hidden_(opts.get_int("hidden", 20)),
        init_sigma_z_(opts.get_double("sigma_z", 0.1)),
        init_sigma_x_(opts.get_double("sigma_x", 0.1)),
        overdispersion_(opts.get_double("overdispersion", 3.0)) {
    steps_ = opts.get_int("steps", 30);
    check(steps_ >= 1, "oscillator: steps must be positive");
    check(obs_dim_ >= 1 && hidden_ >= 1, "oscillator: dims must be positive");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("Wz1", hidden_, 2);
    lay->add("bz1", hidden_);
    lay->add("Wz2", 2, hidden_);
    lay->add("bz2", 2);
    lay->add("Wx1", hidden_, 2);
    lay->add("bx1", hidden_);
    lay->add("Wx2", obs_dim_, hidden_);
    lay->add("bx2", obs_dim_);
    lay->add("log_sigma_z", 2);
    lay->add("log_sigma_x", obs_dim_);
    layout_ = lay;
  }

  bool is_dynamical() const override { return true; }

  ParamVector initial_theta(std::uint64_t seed) const override {
    Rng rng(seed);
    ParamVector th(layout_);
    th.set("Wz1", random_weights(rng, hidden_, 2));
    th.set("bz1", Vec::Zero(hidden_));
    th.set("Wz2", random_weights(rng, 2, hidden_));
    th.set("bz2", Vec::Zero(2));
    th.set("Wx1", random_weights(rng, hidden_, 2));
    th.set("bx1", Vec::Zero(hidden_));
    th.set("Wx2", random_weights(rng, obs_dim_, hidden_));
    th.set("bx2", Vec::Zero(obs_dim_));
    th.set("log_sigma_z", Vec::Constant(2, std::log(init_sigma_z_)));
    th.set("log_sigma_x",
           Vec::Constant(obs_dim_, std::log(init_sigma_x_ * overdispersion_)));
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    Mat Wz1 = theta.matrix("Wz1"), Wz2 = theta.matrix("Wz2");
    Vec bz1 = theta.vector("bz1"), bz2 = theta.vector("bz2");
    Mat Wx1 = theta.matrix("Wx1"), Wx2 = theta.matrix("Wx2");
    Vec bx1 = theta.vector("bx1"), bx2 = theta.vector("bx2");
    Vec sz = theta.vector("log_sigma_z").array().exp();
    Vec sx = theta.vector("log_sigma_x").array().exp();
    SampleBatch out;
    out.Z.resize(dim_z_, n);
    out.X.resize(dim_x_, n);
    Mat prev(2, n);
    prev.row(0).setOnes();
    prev.row(1).setZero();
    for (int s = 0; s < steps_; ++s) {
      Mat zt = detail::mlp_tanh(Wz1, bz1, Wz2, bz2, prev) +
               sz.asDiagonal() * normal_mat(rng, 2, n);
      Mat xt = detail::mlp_tanh(Wx1, bx1, Wx2, bx2, zt) +
               sx.asDiagonal() * normal_mat(rng, obs_dim_, n);
      out.Z.block(2 * s, 0, 2, n) = zt;
      out.X.block(obs_dim_ * s, 0, obs_dim_, n) = xt;
      prev = zt;
    }
    return out;
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    const int n = static_cast<int>(Z.cols());
    const int T = steps_;
    // Pack all transitions into one wide batch: column t*n+i carries sample
    // i's step t, so one network pass covers the whole sequence.
    Mat P(2, T * n), Znext(2, T * n), Xflat(obs_dim_, T * n);
    for (int s = 0; s < T; ++s) {
      if (s == 0) {
        P.block(0, 0, 1, n).setOnes();
        P.block(1, 0, 1, n).setZero();
      } else {
        P.block(0, s * n, 2, n) = Z.block(2 * (s - 1), 0, 2, n);
      }
      Znext.block(0, s * n, 2, n) = Z.block(2 * s, 0, 2, n);
      Xflat.block(0, s * n, obs_dim_, n) = X.block(obs_dim_ * s, 0, obs_dim_, n);
    }
    Var mean_z = mlp(t, theta, "Wz1", "bz1", "Wz2", "bz2", t.constant(P));
    Var ll_z = detail::gaussian_ll_rows_diag(
        t, t.sub(t.constant(Znext), mean_z), log_sigma(t, theta, "log_sigma_z"));
    Var mean_x = mlp(t, theta, "Wx1", "bx1", "Wx2", "bx2", t.constant(Znext));
    Var ll_x = detail::gaussian_ll_rows_diag(
        t, t.sub(t.constant(Xflat), mean_x), log_sigma(t, theta, "log_sigma_x"));
    Var ll = t.add(ll_z, ll_x);  // 1 x (T n)
    // Column t*n+i lands at entry (i, t) after the reshape; row sums then
    // give the per-sample totals.
    Var per_sample = t.matmul(t.reshape(ll, n, T), t.constant(Mat::Ones(T, 1)));
    return t.reshape(per_sample, 1, n);
  }

  Trajectory simulate(const ParamVector& theta, std::uint64_t seed, int T,
                      const Mat& controls) const override {
    validate_theta(theta);
    check(T >= 1, name_ + ": trajectory length must be positive");
    check(controls.size() == 0, name_ + " takes no control signal");
    Rng rng(seed);
    Mat Wz1 = theta.matrix("Wz1"), Wz2 = theta.matrix("Wz2");
    Vec bz1 = theta.vector("bz1"), bz2 = theta.vector("bz2");
    Mat Wx1 = theta.matrix("Wx1"), Wx2 = theta.matrix("Wx2");
    Vec bx1 = theta.vector("bx1"), bx2 = theta.vector("bx2");
    Vec sz = theta.vector("log_sigma_z").array().exp();
    Vec sx = theta.vector("log_sigma_x").array().exp();
    Trajectory traj;
    traj.latents.resize(T, 2);
    traj.observations.resize(T, obs_dim_);
    Vec prev(2);
    prev << 1.0, 0.0;
    for (int s = 0; s < T; ++s) {
      Mat zmean = detail::mlp_tanh(Wz1, bz1, Wz2, bz2, prev);
      Vec zt = zmean.col(0) + Vec(sz.cwiseProduct(rng.normal_vec(2)));
      Mat xmean = detail::mlp_tanh(Wx1, bx1, Wx2, bx2, zt);
      Vec xt = xmean.col(0) + Vec(sx.cwiseProduct(rng.normal_vec(obs_dim_)));
      traj.latents.row(s) = zt.transpose();
      traj.observations.row(s) = xt.transpose();
      prev = zt;
    }
    return traj;
  }

  Vec flatten_latents(const Trajectory& traj) const override {
    check(traj.latents.rows() == steps_ && traj.latents.cols() == 2,
          name_ + ": trajectory latents have the wrong shape");
    Vec z(dim_z_);
    for (int s = 0; s < steps_; ++s)
      z.segment(2 * s, 2) = traj.latents.row(s).transpose();
    return z;
  }

  Vec flatten_observations(const Trajectory& traj) const override {
    check(traj.observations.rows() == steps_ &&
              traj.observations.cols() == obs_dim_,
          name_ + ": trajectory observations have the wrong shape");
    Vec x(dim_x_);
    for (int s = 0; s < steps_; ++s)
      x.segment(obs_dim_ * s, obs_dim_) = traj.observations.row(s).transpose();
    return x;
  }

  bool has_latent_objective() const override { return true; }

  Var log_joint_latent(Tape& t, Var u, const ParamVector& theta,
                       const Vec& x) const override {
    check(x.size() == dim_x_, name_ + ": observation has the wrong length");
    check(t.value(u).rows() == dim_z_ && t.value(u).cols() == 1,
          name_ + ": search point has the wrong shape");
    validate_theta(theta);
    Var th = t.constant(theta.data());
    const int T = steps_;
    Vec start(2);
    start << 1.0, 0.0;
    // Same packing as log_joint_batch with one sample: column s of prev is
    // z_{s-1} (or the fixed start), column s of znext is z_s.
    Var znext = t.reshape(u, 2, T);
    Var prev = (T == 1)
                   ? t.constant(Mat(start))
                   : t.reshape(t.concat({t.constant(Mat(start)),
                                         t.slice(u, 0, 2 * (T - 1))}),
                               2, T);
    Var mean_z = mlp(t, th, "Wz1", "bz1", "Wz2", "bz2", prev);
    Var ll_z = detail::gaussian_ll_rows_diag(
        t, t.sub(znext, mean_z), log_sigma(t, th, "log_sigma_z"));
    Mat xmat(obs_dim_, T);
    for (int s = 0; s < T; ++s) xmat.col(s) = x.segment(obs_dim_ * s, obs_dim_);
    Var mean_x = mlp(t, th, "Wx1", "bx1", "Wx2", "bx2", znext);
    Var ll_x = detail::gaussian_ll_rows_diag(
        t, t.sub(t.constant(xmat), mean_x), log_sigma(t, th, "log_sigma_x"));
    return t.vsum(t.add(ll_z, ll_x));
  }

  bool has_predict_step() const override { return true; }

  void predict_step(const ParamVector& theta, const Mat& z_prev,
                    const Mat& controls, Mat& z_next,
                    Mat& x_next) const override {
    validate_theta(theta);
    check(z_prev.rows() == 2, name_ + ": previous latents must have two rows");
    check(controls.size() == 0, name_ + " takes no control signal");
    z_next = detail::mlp_tanh(theta.matrix("Wz1"), theta.vector("bz1"),
                              theta.matrix("Wz2"), theta.vector("bz2"), z_prev);
    x_next = detail::mlp_tanh(theta.matrix("Wx1"), theta.vector("bx1"),
                              theta.matrix("Wx2"), theta.vector("bx2"), z_next);
  }

 private:
  static Mat random_weights(Rng& rng, int rows, int cols) {
    Mat W(rows, cols);
    for (int i = 0; i < W.size(); ++i)
      W.data()[i] = rng.normal() / std::sqrt(static_cast<double>(cols));
    return W;
  }

  Var log_sigma(Tape& t, Var theta, const char* name) const {
    const auto& s = layout_->slice(name);
    return t.slice(theta, s.offset, s.size());
  }

  Var mlp(Tape& t, Var theta, const char* w1, const char* b1, const char* w2,
          const char* b2, Var input) const {
    Var W1 = slice_param(t, theta, layout_->slice(w1));
    const auto& s1 = layout_->slice(b1);
    Var B1 = t.slice(theta, s1.offset, s1.size());
    Var W2 = slice_param(t, theta, layout_->slice(w2));
    const auto& s2 = layout_->slice(b2);
    Var B2 = t.slice(theta, s2.offset, s2.size());
    return detail::tape_mlp_tanh(t, W1, B1, W2, B2, input);
  }

  int obs_dim_;
  int hidden_;
  double init_sigma_z_;
  double init_sigma_x_;
  double overdispersion_;
};

// --- conductance-based membrane model ---------------------------------------
//
// Forward-Euler discretization of the classic sodium/potassium/leak membrane
// equations with Traub-style V_T-shifted gate kinetics. The latent vector is
// the membrane-potential path; gate states are deterministic functions of
// that path, so the joint density is an explicit Gaussian product. Process
// noise perturbs V each step; measurement noise is not propagated.

struct HhTheta {
  double C_m, g_l, E_l, g_Na, E_Na, g_K, E_K, V_T, sigma_z, sigma_x;
};

class HodgkinHuxley final : public GenerativeModel {
 public:
  explicit HodgkinHuxley(const Options& opts)
      : GenerativeModel("hodgkin_huxley", opts.get_int("steps", 100),
                        opts.get_int("steps", 100)),
        dt_(opts.get_double("dt", 0.05)),
        init_jitter_(opts.get_double("init_jitter", 0.1)),
        overdispersion_(opts.get_double("overdispersion", 3.0)) {
    steps_ = opts.get_int("steps", 100);
    check(steps_ >= 1, "hodgkin_huxley: steps must be positive");
    check(dt_ > 0.0, "hodgkin_huxley: dt must be positive");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("log_C_m", 1);
    lay->add("log_g_l", 1);
    lay->add("E_l", 1);
    lay->add("log_g_Na", 1);
    lay->add("E_Na", 1);
    lay->add("log_g_K", 1);
    lay->add("E_K", 1);
    lay->add("V_T", 1);
    lay->add("log_sigma_z", 1);
    lay->add("log_sigma_x", 1);
    layout_ = lay;
    // training input current: flat, then a sustained step
    current_ = Vec::Zero(steps_);
    double amp = opts.get_double("current_amplitude", 10.0);
    int start = opts.get_int("current_start", steps_ / 10);
    for (int s = start; s < steps_; ++s) current_[s] = amp;
  }

  bool is_dynamical() const override { return true; }

  const Vec& input_current() const { return current_; }

  // Reference parameter point used to synthesize data.
  static ParamVector true_theta(std::shared_ptr<const ParamLayout> lay) {
    ParamVector th(lay);
    th.set_scalar("log_C_m", std::log(1.0));
    th.set_scalar("log_g_l", std::log(0.1));
    th.set_scalar("E_l", -70.0);
    th.set_scalar("log_g_Na", std::log(50.0));
    th.set_scalar("E_Na", 50.0);
    th.set_scalar("log_g_K", std::log(5.0));
    th.set_scalar("E_K", -90.0);
    th.set_scalar("V_T", -60.0);
    th.set_scalar("log_sigma_z", std::log(0.1));
    th.set_scalar("log_sigma_x", std::log(1.0));
    return th;
  }

  ParamVector initial_theta(std::uint64_t seed) const override {
    Rng rng(seed);
    ParamVector th = true_theta(layout_);
    for (int i = 0; i < th.size(); ++i)
      th.data()[i] += init_jitter_ * rng.normal();
    th.set_scalar("log_sigma_x",
                  th.scalar("log_sigma_x") + std::log(overdispersion_));
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    HhTheta p = unpack(theta);
    SampleBatch out;
    out.Z.resize(dim_z_, n);
    out.X.resize(dim_x_, n);
    Vec V = Vec::Constant(n, p.E_l);
    Vec m(n), h(n), nn(n);
    init_gates(p, V, m, h, nn);
    for (int s = 0; s < steps_; ++s) {
      for (int i = 0; i < n; ++i) {
        double f = drift(p, V[i], m[i], h[i], nn[i], current_[s]);
        step_gates(p, V[i], m[i], h[i], nn[i]);
        V[i] += dt_ * f + p.sigma_z * rng.normal();
        check(std::abs(V[i]) <= 1e3,
              name_ + ": membrane potential blew up at step " +
                  std::to_string(s));
        out.Z(s, i) = V[i];
      }
      for (int i = 0; i < n; ++i)
        out.X(s, i) = V[i] + p.sigma_x * rng.normal();
    }
    return out;
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    const int n = static_cast<int>(Z.cols());
    const int T = steps_;
    Var log_Cm = scalar(t, theta, "log_C_m");
    Var g_l = t.vexp(scalar(t, theta, "log_g_l"));
    Var E_l = scalar(t, theta, "E_l");
    Var g_Na = t.vexp(scalar(t, theta, "log_g_Na"));
    Var E_Na = scalar(t, theta, "E_Na");
    Var g_K = t.vexp(scalar(t, theta, "log_g_K"));
    Var E_K = scalar(t, theta, "E_K");
    Var V_T = scalar(t, theta, "V_T");
    Var ls_z = scalar(t, theta, "log_sigma_z");
    Var ls_x = scalar(t, theta, "log_sigma_x");
    Var inv_Cm = t.vexp(t.neg(log_Cm));
    Var VT_row = broadcast_row(t, V_T, n);
    Var El_row = broadcast_row(t, E_l, n);
    Var ENa_row = broadcast_row(t, E_Na, n);
    Var EK_row = broadcast_row(t, E_K, n);

    // V_0 = E_l with gates at their V_0 steady state
    Var V_prev = El_row;
    Var am = rate_alpha_m(t, V_prev, VT_row);
    Var bm = rate_beta_m(t, V_prev, VT_row);
    Var ah = rate_alpha_h(t, V_prev, VT_row);
    Var bh = rate_beta_h(t, V_prev, VT_row);
    Var an = rate_alpha_n(t, V_prev, VT_row);
    Var bn = rate_beta_n(t, V_prev, VT_row);
    Var gm = steady(t, am, bm);
    Var gh = steady(t, ah, bh);
    Var gn = steady(t, an, bn);

    Var quad_z{nullptr, -1};
    for (int s = 0; s < T; ++s) {
      // drift at (V_{s-1}, gates): conductance currents plus the input
      Var leak = t.mul(g_l_row(t, g_l, n), t.sub(V_prev, El_row));
      Var m3 = t.mul(t.square(gm), gm);
      Var na = t.scale(g_Na, t.mul(t.mul(m3, gh), t.sub(V_prev, ENa_row)));
      Var k4 = t.square(t.square(gn));
      Var kk = t.scale(g_K, t.mul(k4, t.sub(V_prev, EK_row)));
      Var isum = t.add_c(current_[s], t.neg(t.add(t.add(leak, na), kk)));
      Var f = t.scale(inv_Cm, isum);
      Var mean = t.add(V_prev, t.scale_c(dt_, f));
      Var Vrow = t.constant(Mat(Z.row(s)));
      Var sq = t.square(t.sub(Vrow, mean));
      quad_z = (quad_z.id < 0) ? sq : t.add(quad_z, sq);

      // advance the gates along the V path, then move to the next step
      if (s + 1 < T) {
        gm = gate_step(t, gm, am, bm);
        gh = gate_step(t, gh, ah, bh);
        gn = gate_step(t, gn, an, bn);
        am = rate_alpha_m(t, Vrow, VT_row);
        bm = rate_beta_m(t, Vrow, VT_row);
        ah = rate_alpha_h(t, Vrow, VT_row);
        bh = rate_beta_h(t, Vrow, VT_row);
        an = rate_alpha_n(t, Vrow, VT_row);
        bn = rate_beta_n(t, Vrow, VT_row);
      }
      V_prev = Vrow;
    }
    Var inv_var_z = t.vexp(t.scale_c(-2.0, ls_z));
    Var ll_z = t.scale_c(-0.5, t.scale(inv_var_z, quad_z));
    Var norm_z = broadcast_row(
        t, t.scale_c(static_cast<double>(T), t.add_c(0.5 * kLog2Pi, ls_z)), n);
    ll_z = t.sub(ll_z, norm_z);

    // measurement term: residuals are parameter-free, so only sigma_x is live
    Mat sq_obs = Mat::Zero(1, n);
    for (int s = 0; s < T; ++s)
      sq_obs += (X.row(s) - Z.row(s)).array().square().matrix();
    Var inv_var_x = t.vexp(t.scale_c(-2.0, ls_x));
    Var ll_x = t.scale_c(-0.5, t.scale(inv_var_x, t.constant(sq_obs)));
    Var norm_x = broadcast_row(
        t, t.scale_c(static_cast<double>(T), t.add_c(0.5 * kLog2Pi, ls_x)), n);
    ll_x = t.sub(ll_x, norm_x);
    return t.add(ll_z, ll_x);
  }

  Trajectory simulate(const ParamVector& theta, std::uint64_t seed, int T,
                      const Mat& controls) const override {
    validate_theta(theta);
    check(T >= 1, name_ + ": trajectory length must be positive");
    Vec I;
    if (controls.size() == 0) {
      check(T == steps_,
            name_ + ": pass a control column when T differs from the "
                    "configured step count");
      I = current_;
    } else {
      check(controls.rows() == T && controls.cols() == 1,
            name_ + ": controls must be a T x 1 column of input currents");
      I = controls.col(0);
    }
    Rng rng(seed);
    HhTheta p = unpack(theta);
    Trajectory traj;
    traj.latents.resize(T, 1);
    traj.observations.resize(T, 1);
    traj.controls = I;
    Vec V1(1);
    V1[0] = p.E_l;
    Vec m(1), h(1), nn(1);
    init_gates(p, V1, m, h, nn);
    double V = V1[0];
    for (int s = 0; s < T; ++s) {
      double f = drift(p, V, m[0], h[0], nn[0], I[s]);
      step_gates(p, V, m[0], h[0], nn[0]);
      V += dt_ * f + p.sigma_z * rng.normal();
      check(std::abs(V) <= 1e3, name_ + ": membrane potential blew up at step " +
                                    std::to_string(s));
      traj.latents(s, 0) = V;
      traj.observations(s, 0) = V + p.sigma_x * rng.normal();
    }
    return traj;
  }

  Vec flatten_latents(const Trajectory& traj) const override {
    check(traj.latents.rows() == steps_ && traj.latents.cols() == 1,
          name_ + ": trajectory latents have the wrong shape");
    return traj.latents.col(0);
  }

  Vec flatten_observations(const Trajectory& traj) const override {
    check(traj.observations.rows() == steps_ && traj.observations.cols() == 1,
          name_ + ": trajectory observations have the wrong shape");
    return traj.observations.col(0);
  }

 private:
  HhTheta unpack(const ParamVector& th) const {
    HhTheta p;
    p.C_m = std::exp(th.scalar("log_C_m"));
    p.g_l = std::exp(th.scalar("log_g_l"));
    p.E_l = th.scalar("E_l");
    p.g_Na = std::exp(th.scalar("log_g_Na"));
    p.E_Na = th.scalar("E_Na");
    p.g_K = std::exp(th.scalar("log_g_K"));
    p.E_K = th.scalar("E_K");
    p.V_T = th.scalar("V_T");
    p.sigma_z = std::exp(th.scalar("log_sigma_z"));
    p.sigma_x = std::exp(th.scalar("log_sigma_x"));
    return p;
  }

  // --- plain-value kinetics (sampling path) ---
  static double a_m(const HhTheta& p, double V) {
    return 1.28 * expm1_ratio(-(V - p.V_T - 13.0) / 4.0);
  }
  static double b_m(const HhTheta& p, double V) {
    return 1.4 * expm1_ratio((V - p.V_T - 40.0) / 5.0);
  }
  static double a_h(const HhTheta& p, double V) {
    return 0.128 * std::exp(-(V - p.V_T - 17.0) / 18.0);
  }
  static double b_h(const HhTheta& p, double V) {
    return 4.0 * detail::sigmoid((V - p.V_T - 40.0) / 5.0);
  }
  static double a_n(const HhTheta& p, double V) {
    return 0.16 * expm1_ratio(-(V - p.V_T - 15.0) / 5.0);
  }
  static double b_n(const HhTheta& p, double V) {
    return 0.5 * std::exp(-(V - p.V_T - 10.0) / 40.0);
  }

  void init_gates(const HhTheta& p, const Vec& V, Vec& m, Vec& h,
                  Vec& n) const {
    for (int i = 0; i < V.size(); ++i) {
      m[i] = a_m(p, V[i]) / (a_m(p, V[i]) + b_m(p, V[i]));
      h[i] = a_h(p, V[i]) / (a_h(p, V[i]) + b_h(p, V[i]));
      n[i] = a_n(p, V[i]) / (a_n(p, V[i]) + b_n(p, V[i]));
    }
  }

  double drift(const HhTheta& p, double V, double m, double h, double n,
               double I) const {
    double na = p.g_Na * m * m * m * h * (V - p.E_Na);
    double kk = p.g_K * n * n * n * n * (V - p.E_K);
    double leak = p.g_l * (V - p.E_l);
    return (I - leak - na - kk) / p.C_m;
  }

  // Advances gates from the pre-step V (rates must match the V used for the
  // drift at the same step).
  void step_gates(const HhTheta& p, double V, double& m, double& h,
                  double& n) const {
    double am = a_m(p, V), bm = b_m(p, V);
    double ah = a_h(p, V), bh = b_h(p, V);
    double an = a_n(p, V), bn = b_n(p, V);
    m += dt_ * (am * (1.0 - m) - bm * m);
    h += dt_ * (ah * (1.0 - h) - bh * h);
    n += dt_ * (an * (1.0 - n) - bn * n);
  }

  // --- tape kinetics (V may be a node or a constant row) ---
  Var rate_alpha_m(Tape& t, Var V, Var VT_row) const {
    Var u = t.sub(t.add_c(-13.0, V), VT_row);
    return t.scale_c(1.28, t.vexpm1_ratio(t.scale_c(-0.25, u)));
  }
  Var rate_beta_m(Tape& t, Var V, Var VT_row) const {
    Var u = t.sub(t.add_c(-40.0, V), VT_row);
    return t.scale_c(1.4, t.vexpm1_ratio(t.scale_c(0.2, u)));
  }
  Var rate_alpha_h(Tape& t, Var V, Var VT_row) const {
    Var u = t.sub(t.add_c(-17.0, V), VT_row);
    return t.scale_c(0.128, t.vexp(t.scale_c(-1.0 / 18.0, u)));
  }
  Var rate_beta_h(Tape& t, Var V, Var VT_row) const {
    Var u = t.sub(t.add_c(-40.0, V), VT_row);
    return t.scale_c(4.0, t.vsigmoid(t.scale_c(0.2, u)));
  }
  Var rate_alpha_n(Tape& t, Var V, Var VT_row) const {
    Var u = t.sub(t.add_c(-15.0, V), VT_row);
    return t.scale_c(0.16, t.vexpm1_ratio(t.scale_c(-0.2, u)));
  }
  Var rate_beta_n(Tape& t, Var V, Var VT_row) const {
    Var u = t.sub(t.add_c(-10.0, V), VT_row);
    return t.scale_c(0.5, t.vexp(t.scale_c(-1.0 / 40.0, u)));
  }

  static Var steady(Tape& t, Var a, Var b) {
    // a / (a + b); both rates are strictly positive
    return t.mul(a, t.vexp(t.neg(t.vlog(t.add(a, b)))));
  }

  Var gate_step(Tape& t, Var e, Var a, Var b) const {
    Var decay = t.mul(e, t.add(a, b));
    return t.add(e, t.scale_c(dt_, t.sub(a, decay)));
  }

  Var scalar(Tape& t, Var theta, const char* name) const {
    return t.slice(theta, layout_->slice(name).offset, 1);
  }

  static Var g_l_row(Tape& t, Var g_l, int n) { return broadcast_row(t, g_l, n); }

  double dt_;
  double init_jitter_;
  double overdispersion_;
  Vec current_;
};

// --- delayed-feedback population model ---------------------------------------
//
// Population counts evolve through a delayed birth term and an exponential
// survival term, each modulated by unit-mean Gamma noise; observations are
// log-normal. The latent column is [tau, e_1..e_T, eps_1..eps_T]; the first
// 20 values of the series' history are learned parameters squashed to (0,1).

class Blowfly final : public GenerativeModel {
 public:
  static constexpr int kMaxDelay = 20;

  explicit Blowfly(const Options& opts)
      : GenerativeModel("blowfly", 1 + 2 * opts.get_int("steps", 50),
                        opts.get_int("steps", 50)),
        init_jitter_(opts.get_double("init_jitter", 0.1)),
        overdispersion_(opts.get_double("overdispersion", 3.0)) {
    steps_ = opts.get_int("steps", 50);
    check(steps_ >= 1, "blowfly: steps must be positive");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("logits_tau", kMaxDelay);
    lay->add("log_sigma_p", 1);
    lay->add("log_sigma_d", 1);
    lay->add("log_P", 1);
    lay->add("log_N0", 1);
    lay->add("log_delta", 1);
    lay->add("log_sigma_n", 1);
    lay->add("past_raw", kMaxDelay);
    layout_ = lay;
  }

  bool is_dynamical() const override { return true; }

  // Reference parameter point used to synthesize data.
  static ParamVector true_theta(std::shared_ptr<const ParamLayout> lay) {
    ParamVector th(lay);
    Vec logits = Vec::Zero(kMaxDelay);
    logits[7] = 4.0;  // delays concentrate around 8 steps
    th.set("logits_tau", logits);
    th.set_scalar("log_sigma_p", std::log(0.5));
    th.set_scalar("log_sigma_d", std::log(0.5));
    th.set_scalar("log_P", std::log(8.0));
    th.set_scalar("log_N0", std::log(0.25));
    th.set_scalar("log_delta", std::log(0.6));
    th.set_scalar("log_sigma_n", std::log(0.1));
    // history hovers near 0.2 in the normalized units
    th.set("past_raw", Vec::Constant(kMaxDelay, std::log(0.2 / 0.8)));
    return th;
  }

  ParamVector initial_theta(std::uint64_t seed) const override {
    Rng rng(seed);
    ParamVector th = true_theta(layout_);
    for (int i = 0; i < th.size(); ++i)
      th.data()[i] += init_jitter_ * rng.normal();
    th.set_scalar("log_sigma_n",
                  th.scalar("log_sigma_n") + std::log(overdispersion_));
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    const int T = steps_;
    Vec probs = detail::softmax(theta.vector("logits_tau"));
    double sp2 = std::exp(2.0 * theta.scalar("log_sigma_p"));
    double sd2 = std::exp(2.0 * theta.scalar("log_sigma_d"));
    double P = std::exp(theta.scalar("log_P"));
    double N0 = std::exp(theta.scalar("log_N0"));
    double delta = std::exp(theta.scalar("log_delta"));
    double sn = std::exp(theta.scalar("log_sigma_n"));
    Vec past(kMaxDelay);
    Vec raw = theta.vector("past_raw");
    for (int j = 0; j < kMaxDelay; ++j) past[j] = detail::sigmoid(raw[j]);
    SampleBatch out;
    out.Z.resize(dim_z_, n);
    out.X.resize(dim_x_, n);
    for (int i = 0; i < n; ++i) {
      int tau = 1 + rng.categorical(probs);
      out.Z(0, i) = static_cast<double>(tau);
      // hist[j] holds x_{t} for t = j - kMaxDelay relative to the series
      std::vector<double> hist(past.data(), past.data() + kMaxDelay);
      for (int s = 0; s < T; ++s) {
        double e = positive_gamma(rng, 1.0 / sp2, sp2);
        double eps = positive_gamma(rng, 1.0 / sd2, sd2);
        out.Z(1 + s, i) = e;
        out.Z(1 + T + s, i) = eps;
        double x_delay = hist[hist.size() - tau];
        double x_prev = hist.back();
        double z = P * x_delay * std::exp(-x_delay / N0) * e +
                   x_prev * std::exp(-delta * eps);
        double x = rng.lognormal(std::log(z), sn);
        out.X(s, i) = x;
        hist.push_back(x);
      }
    }
    return out;
  }

  bool in_support(const Vec& z, const Vec& x) const override {
    if (!GenerativeModel::in_support(z, x)) return false;
    double tau = z[0];
    if (tau != std::floor(tau) || tau < 1.0 || tau > kMaxDelay) return false;
    for (int j = 1; j < dim_z_; ++j)
      if (!(z[j] > 0.0)) return false;
    for (int j = 0; j < dim_x_; ++j)
      if (!(x[j] > 0.0)) return false;
    return true;
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    const int n = static_cast<int>(Z.cols());
    const int T = steps_;

    // delay masks: row d-1 marks the samples with tau == d
    Mat masks = Mat::Zero(kMaxDelay, n);
    for (int i = 0; i < n; ++i)
      masks(static_cast<int>(Z(0, i)) - 1, i) = 1.0;

    const auto& slt = layout_->slice("logits_tau");
    Var m = t.slice(theta, slt.offset, slt.size());
    Var lse = t.logsumexp(m);
    Var m_shift = t.sub(m, t.matmul(t.constant(Mat::Ones(kMaxDelay, 1)), lse));
    Var ll = t.matmul(t.reshape(m_shift, 1, kMaxDelay), t.constant(masks));

    Var lsp = scalar(t, theta, "log_sigma_p");
    Var lsd = scalar(t, theta, "log_sigma_d");
    Var log_P = scalar(t, theta, "log_P");
    Var log_N0 = scalar(t, theta, "log_N0");
    Var log_delta = scalar(t, theta, "log_delta");
    Var lsn = scalar(t, theta, "log_sigma_n");

    // Gamma noise terms collapse per sample: with shape k = 1/sigma^2 and
    // scale sigma^2 (so 1/scale = k), the density sum needs only the
    // sample's log-sum and plain sum of the noise values.
    ll = t.add(ll, gamma_rows(t, lsp, Z.middleRows(1, T), T, n));
    ll = t.add(ll, gamma_rows(t, lsd, Z.middleRows(1 + T, T), T, n));

    // squashed history parameters broadcast over the batch
    const auto& spr = layout_->slice("past_raw");
    std::vector<Var> past_row(kMaxDelay);
    for (int j = 0; j < kMaxDelay; ++j) {
      Var pj = t.vsigmoid(t.slice(theta, spr.offset + j, 1));
      past_row[j] = broadcast_row(t, pj, n);
    }

    Var P_row = broadcast_row(t, t.vexp(log_P), n);
    Var invN0_row = broadcast_row(t, t.vexp(t.neg(log_N0)), n);
    Var delta_s = t.vexp(log_delta);

    Var quad{nullptr, -1};
    Mat log_x_sum = Mat::Zero(1, n);
    for (int s = 0; s < T; ++s) {
      // delayed population value per sample: observed part by mask lookup,
      // pre-series part from the history parameters
      Mat xd_const = Mat::Zero(1, n);
      for (int d = 1; d <= std::min(s, kMaxDelay); ++d)
        xd_const += masks.row(d - 1).cwiseProduct(X.row(s - d));
      Var xd = t.constant(xd_const);
      for (int d = s + 1; d <= kMaxDelay; ++d) {
        Var masked = t.mul(t.constant(Mat(masks.row(d - 1))),
                           past_row[s - d + kMaxDelay]);
        xd = t.add(xd, masked);
      }
      Var birth = t.mul(t.mul(P_row, xd),
                        t.vexp(t.neg(t.mul(xd, invN0_row))));
      birth = t.mul(birth, t.constant(Mat(Z.row(1 + s))));
      Var x_prev = (s == 0) ? past_row[kMaxDelay - 1]
                            : t.constant(Mat(X.row(s - 1)));
      Var surv = t.mul(
          x_prev, t.vexp(t.neg(t.scale(delta_s, t.constant(Mat(Z.row(1 + T + s)))))));
      Var log_z = t.vlog(t.add(birth, surv));
      Var resid = t.sub(t.constant(Mat(X.row(s).array().log().matrix())), log_z);
      Var sq = t.square(resid);
      quad = (quad.id < 0) ? sq : t.add(quad, sq);
      log_x_sum += X.row(s).array().log().matrix();
    }
    Var inv_var_n = t.vexp(t.scale_c(-2.0, lsn));
    Var obs = t.scale_c(-0.5, t.scale(inv_var_n, quad));
    obs = t.sub(obs, broadcast_row(
                         t, t.scale_c(static_cast<double>(T),
                                      t.add_c(0.5 * kLog2Pi, lsn)),
                         n));
    obs = t.sub(obs, t.constant(log_x_sum));
    return t.add(ll, obs);
  }

  Trajectory simulate(const ParamVector& theta, std::uint64_t seed, int T,
                      const Mat& controls) const override {
    validate_theta(theta);
    check(T >= 1, name_ + ": trajectory length must be positive");
    check(controls.size() == 0, name_ + " takes no control signal");
    Rng rng(seed);
    Vec probs = detail::softmax(theta.vector("logits_tau"));
    double sp2 = std::exp(2.0 * theta.scalar("log_sigma_p"));
    double sd2 = std::exp(2.0 * theta.scalar("log_sigma_d"));
    double P = std::exp(theta.scalar("log_P"));
    double N0 = std::exp(theta.scalar("log_N0"));
    double delta = std::exp(theta.scalar("log_delta"));
    double sn = std::exp(theta.scalar("log_sigma_n"));
    Vec raw = theta.vector("past_raw");
    std::vector<double> hist;
    for (int j = 0; j < kMaxDelay; ++j) hist.push_back(detail::sigmoid(raw[j]));
    int tau = 1 + rng.categorical(probs);
    Trajectory traj;
    traj.latents.resize(T, 3);
    traj.observations.resize(T, 1);
    for (int s = 0; s < T; ++s) {
      double e = positive_gamma(rng, 1.0 / sp2, sp2);
      double eps = positive_gamma(rng, 1.0 / sd2, sd2);
      double x_delay = hist[hist.size() - tau];
      double x_prev = hist.back();
      double z = P * x_delay * std::exp(-x_delay / N0) * e +
                 x_prev * std::exp(-delta * eps);
      double x = rng.lognormal(std::log(z), sn);
      traj.latents(s, 0) = e;
      traj.latents(s, 1) = eps;
      traj.latents(s, 2) = static_cast<double>(tau);
      traj.observations(s, 0) = x;
      hist.push_back(x);
    }
    return traj;
  }

  Vec flatten_latents(const Trajectory& traj) const override {
    check(traj.latents.rows() == steps_ && traj.latents.cols() == 3,
          name_ + ": trajectory latents have the wrong shape");
    Vec z(dim_z_);
    z[0] = traj.latents(0, 2);
    z.segment(1, steps_) = traj.latents.col(0);
    z.segment(1 + steps_, steps_) = traj.latents.col(1);
    return z;
  }

  Vec flatten_observations(const Trajectory& traj) const override {
    check(traj.observations.rows() == steps_ && traj.observations.cols() == 1,
          name_ + ": trajectory observations have the wrong shape");
    return traj.observations.col(0);
  }

 private:
  Var scalar(Tape& t, Var theta, const char* name) const {
    return t.slice(theta, layout_->slice(name).offset, 1);
  }

  // Per-sample sum of T unit-mean Gamma log-densities with log-std log_s:
  // (k-1) sum log v - k sum v - T (2 k log_s + lgamma(k)), k = exp(-2 log_s).
  Var gamma_rows(Tape& t, Var log_s, const Mat& V, int T, int n) const {
    Mat log_sum(1, n), plain_sum(1, n);
    for (int i = 0; i < n; ++i) {
      log_sum(0, i) = V.col(i).array().log().sum();
      plain_sum(0, i) = V.col(i).sum();
    }
    Var k = t.vexp(t.scale_c(-2.0, log_s));
    Var out = t.scale(t.add_c(-1.0, k), t.constant(log_sum));
    out = t.sub(out, t.scale(k, t.constant(plain_sum)));
    Var norm = t.add(t.scale(k, t.scale_c(2.0, log_s)), t.vlgamma(k));
    return t.sub(out, broadcast_row(t, t.scale_c(static_cast<double>(T), norm), n));
  }

  double init_jitter_;
  double overdispersion_;
};

}  // namespace

std::unique_ptr<GenerativeModel> make_oscillator(const Options& opts) {
  return std::make_unique<Oscillator>(opts);
}

std::unique_ptr<GenerativeModel> make_hodgkin_huxley(const Options& opts) {
  return std::make_unique<HodgkinHuxley>(opts);
}

std::unique_ptr<GenerativeModel> make_blowfly(const Options& opts) {
  return std::make_unique<Blowfly>(opts);
}

}  // namespace alws
