#include <cmath>
#include <limits>

#include "alws/models.hpp"
#include "model_helpers.hpp"

namespace alws {

using detail::broadcast_col;
using detail::broadcast_row;
using detail::colsum;
using detail::kLog2Pi;
using detail::slice_param;
using detail::vstack;

namespace {

// Laplace(0,1) factors, linear map, fixed isotropic Gaussian noise. Only the
// mixing matrix is learned; the noise scale is part of the model definition.
class IcaLaplace final : public GenerativeModel {
 public:
  explicit IcaLaplace(const Options& opts)
      : GenerativeModel("ica_laplace", opts.get_int("dim_z", 8),
                        opts.get_int("dim_x", 16)),
        sigma_x_(opts.get_double("sigma_x", 0.1)) {
    check(dim_z_ >= 1 && dim_x_ >= 1, "ica_laplace: dims must be positive");
    check(sigma_x_ > 0.0, "ica_laplace: sigma_x must be positive");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("W", dim_x_, dim_z_);
    layout_ = lay;
    suff_dim_ = 2 * dim_x_;
  }

  ParamVector initial_theta(std::uint64_t seed) const override {
    Rng rng(seed);
    ParamVector th(layout_);
    Mat W(dim_x_, dim_z_);
    for (int i = 0; i < W.size(); ++i)
      W.data()[i] = rng.normal() / std::sqrt(static_cast<double>(dim_z_));
    th.set("W", W);
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    Mat W = theta.matrix("W");
    SampleBatch out;
    out.Z.resize(dim_z_, n);
    out.X.resize(dim_x_, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < dim_z_; ++j) out.Z(j, i) = rng.laplace(0.0, 1.0);
      out.X.col(i) = W * out.Z.col(i) + sigma_x_ * rng.normal_vec(dim_x_);
    }
    return out;
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    int n = static_cast<int>(Z.cols());
    Var resid = t.sub(t.constant(X), mean_cols(t, theta, Z));
    double inv_var = 1.0 / (sigma_x_ * sigma_x_);
    Var quad = t.scale_c(-0.5 * inv_var, colsum(t, t.square(resid)));
    double norm = dim_x_ * std::log(sigma_x_) + 0.5 * dim_x_ * kLog2Pi;
    Mat prior(1, n);
    for (int i = 0; i < n; ++i)
      prior(0, i) = -Z.col(i).lpNorm<1>() - dim_z_ * std::log(2.0) - norm;
    return t.add(quad, t.constant(prior));
  }

  Vec suff_stats(const Vec& x) const override {
    Vec s(2 * dim_x_);
    s.head(dim_x_) = x;
    s.tail(dim_x_) = x.array().square();
    return s;
  }

  bool has_prior_density() const override { return true; }

  Vec log_prior_values(const ParamVector&, const Mat& Z) const override {
    check(Z.rows() == dim_z_, name_ + ": latent rows mismatch");
    Vec out(Z.cols());
    for (int i = 0; i < Z.cols(); ++i)
      out[i] = -Z.col(i).lpNorm<1>() - dim_z_ * std::log(2.0);
    return out;
  }

  Var exp_fam_eta_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    double inv_var = 1.0 / (sigma_x_ * sigma_x_);
    Var top = t.scale_c(inv_var, mean_cols(t, theta, Z));
    Var bot = t.constant(Mat::Constant(dim_x_, n, -0.5 * inv_var));
    return vstack(t, {top, bot});
  }

  Var exp_fam_psi_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    double inv_var = 1.0 / (sigma_x_ * sigma_x_);
    Var mu = mean_cols(t, theta, Z);
    Var quad = t.scale_c(0.5 * inv_var, colsum(t, t.square(mu)));
    Mat shift(1, n);
    double norm = dim_x_ * std::log(sigma_x_) + 0.5 * dim_x_ * kLog2Pi;
    for (int i = 0; i < n; ++i)
      shift(0, i) = norm + Z.col(i).lpNorm<1>() + dim_z_ * std::log(2.0);
    return t.add(quad, t.constant(shift));
  }

 private:
  Var mean_cols(Tape& t, Var theta, const Mat& Z) const {
    Var W = slice_param(t, theta, layout_->slice("W"));
    return t.matmul(W, t.constant(Z));
  }

  double sigma_x_;
};

// Uniform latents pushed through a positive linear map in logit space, with
// Bernoulli outputs. The weight matrix is stored in log space so the
// Gamma-shaped penalty's positivity constraint holds structurally.
class MatFact final : public GenerativeModel {
 public:
  explicit MatFact(const Options& opts)
      : GenerativeModel("mat_fact", opts.get_int("dim_z", 4),
                        opts.get_int("dim_x", 16)),
        penalty_shape_(opts.get_double("penalty_shape", 0.9)),
        penalty_rate_(opts.get_double("penalty_rate", 0.3)),
        init_w_(opts.get_double("init_weight", 0.3)) {
    check(dim_z_ >= 1 && dim_x_ >= 1, "mat_fact: dims must be positive");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("log_W", dim_x_, dim_z_);
    lay->add("b", dim_x_);
    layout_ = lay;
    suff_dim_ = dim_x_;
  }

  ParamVector initial_theta(std::uint64_t seed) const override {
    Rng rng(seed);
    ParamVector th(layout_);
    Mat lw(dim_x_, dim_z_);
    for (int i = 0; i < lw.size(); ++i)
      lw.data()[i] = std::log(init_w_) + 0.5 * rng.normal();
    th.set("log_W", lw);
    th.set("b", Vec::Zero(dim_x_));
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    Mat W = theta.matrix("log_W").array().exp();
    Vec b = theta.vector("b");
    SampleBatch out;
    out.Z.resize(dim_z_, n);
    out.X.resize(dim_x_, n);
    for (int i = 0; i < n; ++i) {
      Vec u(dim_z_);
      for (int j = 0; j < dim_z_; ++j) {
        double z = rng.u01_open();
        out.Z(j, i) = z;
        u[j] = std::log(z) - std::log1p(-z);
      }
      Vec a = W * u + b;
      for (int j = 0; j < dim_x_; ++j)
        out.X(j, i) = rng.u01() < detail::sigmoid(a[j]) ? 1.0 : 0.0;
    }
    return out;
  }

  bool in_support(const Vec& z, const Vec& x) const override {
    if (!GenerativeModel::in_support(z, x)) return false;
    for (int j = 0; j < dim_z_; ++j)
      if (!(z[j] > 0.0 && z[j] < 1.0)) return false;
    for (int j = 0; j < dim_x_; ++j)
      if (x[j] != 0.0 && x[j] != 1.0) return false;
    return true;
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    Var a = logits_cols(t, theta, Z);
    // Bernoulli: -x softplus(-a) - (1-x) softplus(a); uniform prior adds 0
    Var pos = t.mul(t.constant(X), t.vsoftplus(t.neg(a)));
    Var neg = t.mul(t.constant(Mat(Mat::Ones(X.rows(), X.cols()) - X)),
                    t.vsoftplus(a));
    return t.neg(colsum(t, t.add(pos, neg)));
  }

  Vec suff_stats(const Vec& x) const override { return x; }

  bool has_prior_density() const override { return true; }

  Vec log_prior_values(const ParamVector&, const Mat& Z) const override {
    check(Z.rows() == dim_z_, name_ + ": latent rows mismatch");
    Vec out = Vec::Zero(Z.cols());  // uniform over the open unit cube
    for (int i = 0; i < Z.cols(); ++i)
      for (int j = 0; j < dim_z_; ++j)
        if (!(Z(j, i) > 0.0 && Z(j, i) < 1.0))
          out[i] = -std::numeric_limits<double>::infinity();
    return out;
  }

  Var exp_fam_eta_batch(Tape& t, Var theta, const Mat& Z) const override {
    return logits_cols(t, theta, Z);
  }

  Var exp_fam_psi_batch(Tape& t, Var theta, const Mat& Z) const override {
    return colsum(t, t.vsoftplus(logits_cols(t, theta, Z)));
  }

  bool has_penalty() const override { return true; }

  // Gamma-shaped log-prior on every weight: (shape-1) log w - rate * w.
  Var log_penalty(Tape& t, Var theta) const override {
    const auto& s = layout_->slice("log_W");
    Var lw = t.slice(theta, s.offset, s.size());
    Var term = t.scale_c(penalty_shape_ - 1.0, t.vsum(lw));
    return t.sub(term, t.scale_c(penalty_rate_, t.vsum(t.vexp(lw))));
  }

  bool has_latent_objective() const override { return true; }

  // In the unconstrained search space u = logit(z), the objective is the
  // Bernoulli log-likelihood with logits W u + b (the uniform prior is 0).
  Var log_joint_latent(Tape& t, Var u, const ParamVector& theta,
                       const Vec& x) const override {
    check(t.value(u).rows() == dim_z_ && t.value(u).cols() == 1,
          name_ + ": latent search point has wrong shape");
    Mat W = theta.matrix("log_W").array().exp();
    Vec b = theta.vector("b");
    Var a = t.add(t.matmul(t.constant(W), u), t.constant(b));
    Var pos = t.mul(t.constant(x), t.vsoftplus(t.neg(a)));
    Var neg = t.mul(t.constant(Vec(Vec::Ones(dim_x_) - x)), t.vsoftplus(a));
    return t.neg(t.vsum(t.add(pos, neg)));
  }

  Vec latent_from_search(const Vec& u) const override {
    Vec z(u.size());
    for (int i = 0; i < u.size(); ++i) z[i] = detail::sigmoid(u[i]);
    return z;
  }

  Vec search_from_latent(const Vec& z) const override {
    Vec u(z.size());
    for (int i = 0; i < z.size(); ++i) {
      check(z[i] > 0.0 && z[i] < 1.0,
            name_ + ": latent outside the open unit interval");
      u[i] = std::log(z[i]) - std::log1p(-z[i]);
    }
    return u;
  }

 private:
  Var logits_cols(Tape& t, Var theta, const Mat& Z) const {
    int n = static_cast<int>(Z.cols());
    Mat U(dim_z_, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < dim_z_; ++j)
        U(j, i) = std::log(Z(j, i)) - std::log1p(-Z(j, i));
    Var W = t.vexp(slice_param(t, theta, layout_->slice("log_W")));
    const auto& sb = layout_->slice("b");
    Var b = t.slice(theta, sb.offset, sb.size());
    return t.add(t.matmul(W, t.constant(U)), broadcast_col(t, b, n));
  }

  double penalty_shape_;
  double penalty_rate_;
  double init_w_;
};

}  // namespace

std::unique_ptr<GenerativeModel> make_ica_laplace(const Options& opts) {
  return std::make_unique<IcaLaplace>(opts);
}

std::unique_ptr<GenerativeModel> make_mat_fact(const Options& opts) {
  return std::make_unique<MatFact>(opts);
}

}  // namespace alws
