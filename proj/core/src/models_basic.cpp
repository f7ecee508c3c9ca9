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

// --- GenerativeModel shared machinery --------------------------------------

void GenerativeModel::validate_theta(const ParamVector& theta) const {
  check(theta.size() == layout_->total_size(),
        name_ + ": parameter vector has " + std::to_string(theta.size()) +
            " entries, layout expects " +
            std::to_string(layout_->total_size()));
  check(all_finite(theta.data()), name_ + ": parameters are not finite");
}

bool GenerativeModel::in_support(const Vec& z, const Vec& x) const {
  return z.size() == dim_z_ && x.size() == dim_x_ && all_finite(z) &&
         all_finite(x);
}

Vec GenerativeModel::log_joint_values(const ParamVector& theta, const Mat& Z,
                                      const Mat& X) const {
  detail::check_batch(*this, Z, X);
  validate_theta(theta);
  const int n = static_cast<int>(Z.cols());
  Vec out = Vec::Constant(n, -std::numeric_limits<double>::infinity());
  std::vector<int> keep;
  keep.reserve(n);
  for (int i = 0; i < n; ++i)
    if (in_support(Z.col(i), X.col(i))) keep.push_back(i);
  if (keep.empty()) return out;
  Mat Zs(dim_z_, static_cast<int>(keep.size()));
  Mat Xs(dim_x_, static_cast<int>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) {
    Zs.col(j) = Z.col(keep[j]);
    Xs.col(j) = X.col(keep[j]);
  }
  Tape t;
  Var th = t.param(theta.data());
  const Mat& ll = t.value(log_joint_batch(t, th, Zs, Xs));
  for (std::size_t j = 0; j < keep.size(); ++j) out[keep[j]] = ll(0, j);
  return out;
}

double GenerativeModel::log_joint_value(const ParamVector& theta, const Vec& z,
                                        const Vec& x) const {
  return log_joint_values(theta, z, x)[0];
}

Vec GenerativeModel::suff_stats(const Vec&) const {
  fail(name_ + " has no exponential-family form");
}

Mat GenerativeModel::suff_stats_batch(const Mat& X) const {
  check(has_exp_fam(), name_ + " has no exponential-family form");
  check(X.rows() == dim_x_, name_ + ": observation batch has wrong row count");
  Mat S(suff_dim_, X.cols());
  for (int i = 0; i < X.cols(); ++i) S.col(i) = suff_stats(X.col(i));
  return S;
}

ExpFamParts GenerativeModel::exp_fam_parts(const ParamVector& theta,
                                           const Vec& z) const {
  check(has_exp_fam(), name_ + " has no exponential-family form");
  validate_theta(theta);
  Tape t;
  Var th = t.param(theta.data());
  Var eta = exp_fam_eta_batch(t, th, z);
  Var psi = exp_fam_psi_batch(t, th, z);
  ExpFamParts parts;
  parts.natural_params = t.value(eta).col(0);
  parts.log_norm = t.value_scalar(psi);
  return parts;
}

Var GenerativeModel::exp_fam_eta_batch(Tape&, Var, const Mat&) const {
  fail(name_ + " has no exponential-family form");
}

Var GenerativeModel::exp_fam_psi_batch(Tape&, Var, const Mat&) const {
  fail(name_ + " has no exponential-family form");
}

Var GenerativeModel::log_penalty(Tape& tape, Var) const {
  return tape.constant_scalar(0.0);
}

Trajectory GenerativeModel::simulate(const ParamVector&, std::uint64_t, int,
                                     const Mat&) const {
  fail(name_ + " is not a dynamical model");
}

Vec GenerativeModel::flatten_latents(const Trajectory&) const {
  fail(name_ + " is not a dynamical model");
}

Vec GenerativeModel::flatten_observations(const Trajectory&) const {
  fail(name_ + " is not a dynamical model");
}

void GenerativeModel::predict_step(const ParamVector&, const Mat&, const Mat&,
                                   Mat&, Mat&) const {
  fail(name_ + " does not support one-step prediction");
}

Var GenerativeModel::log_joint_latent(Tape&, Var, const ParamVector&,
                                      const Vec&) const {
  fail(name_ + " has no latent-space objective");
}

Vec GenerativeModel::latent_from_search(const Vec& u) const { return u; }

Vec GenerativeModel::search_from_latent(const Vec& z) const { return z; }

Vec GenerativeModel::log_prior_values(const ParamVector&, const Mat&) const {
  fail(name_ + " does not expose a latent prior density");
}

// --- toy model: standard-normal latents, softplus-mean scalar output -------

namespace {

// Row of theta-free latent prior values for a standard-normal prior.
Mat std_normal_prior_row(const Mat& Z) {
  Mat prior(1, Z.cols());
  for (int i = 0; i < Z.cols(); ++i)
    prior(0, i) = -0.5 * Z.rows() * kLog2Pi - 0.5 * Z.col(i).squaredNorm();
  return prior;
}

class ToySoftplus final : public GenerativeModel {
 public:
  explicit ToySoftplus(const Options& opts)
      : GenerativeModel("toy_softplus", opts.get_int("dim_z", 2), 1),
        init_sigma_x_(opts.get_double("sigma_x", 0.1)),
        overdispersion_(opts.get_double("overdispersion", 3.0)) {
    check(dim_z_ >= 1, "toy_softplus: dim_z must be positive");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("b", dim_z_);
    lay->add("log_sigma_x", 1);
    layout_ = lay;
    suff_dim_ = 2;
  }

  ParamVector initial_theta(std::uint64_t seed) const override {
    Rng rng(seed);
    ParamVector th(layout_);
    th.set("b", rng.normal_vec(dim_z_));
    th.set_scalar("log_sigma_x", std::log(init_sigma_x_ * overdispersion_));
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    Vec b = theta.vector("b");
    double sigma = std::exp(theta.scalar("log_sigma_x"));
    SampleBatch out;
    out.Z.resize(dim_z_, n);
    out.X.resize(1, n);
    for (int i = 0; i < n; ++i) {
      Vec z = rng.normal_vec(dim_z_);
      out.Z.col(i) = z;
      double mu = detail::softplus(b.dot(z)) - b.squaredNorm();
      out.X(0, i) = rng.normal(mu, sigma);
    }
    return out;
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    Var mu = mean_row(t, theta, Z);
    Var resid = t.sub(t.constant(X), mu);
    Var ll = detail::gaussian_ll_rows_iso(t, resid, log_sigma(t, theta));
    return t.add(ll, t.constant(std_normal_prior_row(Z)));
  }

  Vec suff_stats(const Vec& x) const override {
    Vec s(2);
    s << x[0], x[0] * x[0];
    return s;
  }

  bool has_prior_density() const override { return true; }

  Vec log_prior_values(const ParamVector&, const Mat& Z) const override {
    check(Z.rows() == dim_z_, name_ + ": latent rows mismatch");
    return Vec(std_normal_prior_row(Z).transpose());
  }

  Var exp_fam_eta_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    Var inv_var = t.vexp(t.scale_c(-2.0, log_sigma(t, theta)));
    Var top = t.scale(inv_var, mean_row(t, theta, Z));
    Var bot = broadcast_row(t, t.scale_c(-0.5, inv_var), n);
    return vstack(t, {top, bot});
  }

  Var exp_fam_psi_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    Var ls = log_sigma(t, theta);
    Var inv_var = t.vexp(t.scale_c(-2.0, ls));
    Var mu = mean_row(t, theta, Z);
    Var quad = t.scale(t.scale_c(0.5, inv_var), t.square(mu));
    Var norm = broadcast_row(t, t.add_c(0.5 * kLog2Pi, ls), n);
    return t.sub(t.add(quad, norm), t.constant(std_normal_prior_row(Z)));
  }

 private:
  Var log_sigma(Tape& t, Var theta) const {
    return t.slice(theta, layout_->slice("log_sigma_x").offset, 1);
  }

  // softplus(b . z) - |b|^2 for every column, as a 1 x n node.
  Var mean_row(Tape& t, Var theta, const Mat& Z) const {
    const auto& sb = layout_->slice("b");
    Var bcol = t.slice(theta, sb.offset, sb.size());
    Var brow = t.reshape(bcol, 1, dim_z_);
    Var sp = t.vsoftplus(t.matmul(brow, t.constant(Z)));
    Var bb = t.sqnorm(bcol);
    return t.sub(sp, broadcast_row(t, bb, static_cast<int>(Z.cols())));
  }

  double init_sigma_x_;
  double overdispersion_;
};

// --- linear-Gaussian model: exact-oracle companion --------------------------

class LinearGaussian final : public GenerativeModel {
 public:
  explicit LinearGaussian(const Options& opts)
      : GenerativeModel("linear_gaussian", opts.get_int("dim_z", 2),
                        opts.get_int("dim_x", 3)),
        init_sigma_x_(opts.get_double("sigma_x", 1.0)),
        overdispersion_(opts.get_double("overdispersion", 3.0)) {
    check(dim_z_ >= 1 && dim_x_ >= 1, "linear_gaussian: dims must be positive");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("W", dim_x_, dim_z_);
    lay->add("c", dim_x_);
    lay->add("log_sigma_x", dim_x_);
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
    th.set("c", Vec::Zero(dim_x_));
    th.set("log_sigma_x",
           Vec::Constant(dim_x_, std::log(init_sigma_x_ * overdispersion_)));
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    Mat W = theta.matrix("W");
    Vec c = theta.vector("c");
    Vec sigma = theta.vector("log_sigma_x").array().exp();
    SampleBatch out;
    out.Z.resize(dim_z_, n);
    out.X.resize(dim_x_, n);
    for (int i = 0; i < n; ++i) {
      Vec z = rng.normal_vec(dim_z_);
      out.Z.col(i) = z;
      out.X.col(i) = W * z + c + sigma.cwiseProduct(rng.normal_vec(dim_x_));
    }
    return out;
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    Var resid = t.sub(t.constant(X), mean_cols(t, theta, Z));
    Var ll = detail::gaussian_ll_rows_diag(t, resid, log_sigma(t, theta));
    return t.add(ll, t.constant(std_normal_prior_row(Z)));
  }

  Vec suff_stats(const Vec& x) const override {
    Vec s(2 * dim_x_);
    s.head(dim_x_) = x;
    s.tail(dim_x_) = x.array().square();
    return s;
  }

  Var exp_fam_eta_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    Var inv_var = t.vexp(t.scale_c(-2.0, log_sigma(t, theta)));
    Var mu = mean_cols(t, theta, Z);
    Var top = t.mul(broadcast_col(t, inv_var, n), mu);
    Var bot = broadcast_col(t, t.scale_c(-0.5, inv_var), n);
    return vstack(t, {top, bot});
  }

  Var exp_fam_psi_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    Var ls = log_sigma(t, theta);
    Var inv_var = t.vexp(t.scale_c(-2.0, ls));
    Var mu = mean_cols(t, theta, Z);
    Var quad =
        t.scale_c(0.5, colsum(t, t.mul(t.square(mu), broadcast_col(t, inv_var, n))));
    Var norm =
        broadcast_row(t, t.add_c(0.5 * dim_x_ * kLog2Pi, t.vsum(ls)), n);
    return t.sub(t.add(quad, norm), t.constant(std_normal_prior_row(Z)));
  }

  bool has_prior_density() const override { return true; }

  Vec log_prior_values(const ParamVector&, const Mat& Z) const override {
    check(Z.rows() == dim_z_, name_ + ": latent rows mismatch");
    return Vec(std_normal_prior_row(Z).transpose());
  }

  bool has_latent_objective() const override { return true; }

  Var log_joint_latent(Tape& t, Var u, const ParamVector& theta,
                       const Vec& x) const override {
    check(t.value(u).rows() == dim_z_ && t.value(u).cols() == 1,
          name_ + ": latent search point has wrong shape");
    Mat W = theta.matrix("W");
    Vec c = theta.vector("c");
    Vec ls = theta.vector("log_sigma_x");
    Vec inv_var = (-2.0 * ls.array()).exp();
    Var resid = t.sub(t.constant(x - c), t.matmul(t.constant(W), u));
    Var quad = t.vsum(t.mul(t.constant(inv_var), t.square(resid)));
    double norm = ls.sum() + 0.5 * dim_x_ * kLog2Pi +
                  0.5 * dim_z_ * kLog2Pi;
    Var ll = t.scale_c(-0.5, t.add(quad, t.sqnorm(u)));
    return t.add_c(-norm, ll);
  }

 private:
  Var log_sigma(Tape& t, Var theta) const {
    const auto& s = layout_->slice("log_sigma_x");
    return t.slice(theta, s.offset, s.size());
  }

  Var mean_cols(Tape& t, Var theta, const Mat& Z) const {
    int n = static_cast<int>(Z.cols());
    Var W = slice_param(t, theta, layout_->slice("W"));
    const auto& sc = layout_->slice("c");
    Var c = t.slice(theta, sc.offset, sc.size());
    return t.add(t.matmul(W, t.constant(Z)), broadcast_col(t, c, n));
  }

  double init_sigma_x_;
  double overdispersion_;
};

// --- circular model: uniform latent on the unit circle ----------------------

class Circular final : public GenerativeModel {
 public:
  explicit Circular(const Options& opts)
      : GenerativeModel("circular", 2, opts.get_int("dim_x", 8)),
        hidden_(opts.get_int("hidden", 20)),
        init_sigma_x_(opts.get_double("sigma_x", 0.5)),
        overdispersion_(opts.get_double("overdispersion", 3.0)) {
    check(dim_x_ >= 1 && hidden_ >= 1, "circular: dims must be positive");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("W1", hidden_, 2);
    lay->add("b1", hidden_);
    lay->add("W2", dim_x_, hidden_);
    lay->add("b2", dim_x_);
    lay->add("log_sigma_x", 1);
    layout_ = lay;
    suff_dim_ = 2 * dim_x_;
  }

  ParamVector initial_theta(std::uint64_t seed) const override {
    Rng rng(seed);
    ParamVector th(layout_);
    th.set("W1", random_weights(rng, hidden_, 2));
    th.set("b1", Vec::Zero(hidden_));
    th.set("W2", random_weights(rng, dim_x_, hidden_));
    th.set("b2", Vec::Zero(dim_x_));
    th.set_scalar("log_sigma_x", std::log(init_sigma_x_ * overdispersion_));
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    Mat W1 = theta.matrix("W1");
    Vec b1 = theta.vector("b1");
    Mat W2 = theta.matrix("W2");
    Vec b2 = theta.vector("b2");
    double sigma = std::exp(theta.scalar("log_sigma_x"));
    SampleBatch out;
    out.Z.resize(2, n);
    out.X.resize(dim_x_, n);
    for (int i = 0; i < n; ++i) {
      double a = rng.uniform(-M_PI, M_PI);
      out.Z(0, i) = std::cos(a);
      out.Z(1, i) = std::sin(a);
    }
    Mat mu = detail::mlp_tanh(W1, b1, W2, b2, out.Z);
    for (int i = 0; i < n; ++i)
      out.X.col(i) = mu.col(i) + sigma * rng.normal_vec(dim_x_);
    return out;
  }

  bool in_support(const Vec& z, const Vec& x) const override {
    return GenerativeModel::in_support(z, x) &&
           std::abs(z.squaredNorm() - 1.0) <= 1e-6;
  }

  bool has_prior_density() const override { return true; }

  // Density of the uniform angle, per unit arc length on the circle.
  Vec log_prior_values(const ParamVector&, const Mat& Z) const override {
    check(Z.rows() == dim_z_, name_ + ": latent rows mismatch");
    Vec out(Z.cols());
    for (int i = 0; i < Z.cols(); ++i)
      out[i] = std::abs(Z.col(i).squaredNorm() - 1.0) <= 1e-6
                   ? -std::log(2.0 * M_PI)
                   : -std::numeric_limits<double>::infinity();
    return out;
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    int n = static_cast<int>(Z.cols());
    Var resid = t.sub(t.constant(X), mean_cols(t, theta, Z));
    Var ll = detail::gaussian_ll_rows_iso(t, resid, log_sigma(t, theta));
    // uniform angle prior
    return t.add(ll, t.constant(Mat::Constant(1, n, -std::log(2.0 * M_PI))));
  }

  Vec suff_stats(const Vec& x) const override {
    Vec s(2 * dim_x_);
    s.head(dim_x_) = x;
    s.tail(dim_x_) = x.array().square();
    return s;
  }

  Var exp_fam_eta_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    Var inv_var = t.vexp(t.scale_c(-2.0, log_sigma(t, theta)));
    Var top = t.scale(inv_var, mean_cols(t, theta, Z));
    Var bot = detail::broadcast_full(t, t.scale_c(-0.5, inv_var), dim_x_, n);
    return vstack(t, {top, bot});
  }

  Var exp_fam_psi_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    Var ls = log_sigma(t, theta);
    Var inv_var = t.vexp(t.scale_c(-2.0, ls));
    Var mu = mean_cols(t, theta, Z);
    Var quad = t.scale_c(0.5, colsum(t, t.scale(inv_var, t.square(mu))));
    Var norm_scalar =
        t.add_c(0.5 * dim_x_ * kLog2Pi, t.scale_c(static_cast<double>(dim_x_), ls));
    Var norm = broadcast_row(t, norm_scalar, n);
    Var out = t.add(quad, norm);
    return t.add(out, t.constant(Mat::Constant(1, n, std::log(2.0 * M_PI))));
  }

 private:
  static Mat random_weights(Rng& rng, int rows, int cols) {
    Mat W(rows, cols);
    for (int i = 0; i < W.size(); ++i)
      W.data()[i] = rng.normal() / std::sqrt(static_cast<double>(cols));
    return W;
  }

  Var log_sigma(Tape& t, Var theta) const {
    return t.slice(theta, layout_->slice("log_sigma_x").offset, 1);
  }

  Var mean_cols(Tape& t, Var theta, const Mat& Z) const {
    Var W1 = slice_param(t, theta, layout_->slice("W1"));
    const auto& s1 = layout_->slice("b1");
    Var b1 = t.slice(theta, s1.offset, s1.size());
    Var W2 = slice_param(t, theta, layout_->slice("W2"));
    const auto& s2 = layout_->slice("b2");
    Var b2 = t.slice(theta, s2.offset, s2.size());
    return detail::tape_mlp_tanh(t, W1, b1, W2, b2, t.constant(Z));
  }

  int hidden_;
  double init_sigma_x_;
  double overdispersion_;
};

}  // namespace

std::unique_ptr<GenerativeModel> make_toy_softplus(const Options& opts) {
  return std::make_unique<ToySoftplus>(opts);
}

std::unique_ptr<GenerativeModel> make_linear_gaussian(const Options& opts) {
  return std::make_unique<LinearGaussian>(opts);
}

std::unique_ptr<GenerativeModel> make_circular(const Options& opts) {
  return std::make_unique<Circular>(opts);
}

std::string model_names() {
  return "toy_softplus, linear_gaussian, circular, pinwheel_hier, "
         "ica_laplace, mat_fact, oscillator, hodgkin_huxley, blowfly";
}

std::unique_ptr<GenerativeModel> make_model(const std::string& name,
                                            const Options& opts) {
  if (name == "toy_softplus") return make_toy_softplus(opts);
  if (name == "linear_gaussian") return make_linear_gaussian(opts);
  if (name == "circular") return make_circular(opts);
  if (name == "pinwheel_hier") return make_pinwheel_hier(opts);
  if (name == "ica_laplace") return make_ica_laplace(opts);
  if (name == "mat_fact") return make_mat_fact(opts);
  if (name == "oscillator") return make_oscillator(opts);
  if (name == "hodgkin_huxley") return make_hodgkin_huxley(opts);
  if (name == "blowfly") return make_blowfly(opts);
  fail("unknown model '" + name + "'; available: " + model_names());
}

}  // namespace alws
