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

// Categorical first layer, per-component full-covariance Gaussian second
// layer, tanh-network Gaussian likelihood. Component covariances are stored
// through their Cholesky factors [[exp(d0), 0], [off, exp(d1)]].
class PinwheelHier final : public GenerativeModel {
 public:
  explicit PinwheelHier(const Options& opts)
      : GenerativeModel("pinwheel_hier", 3, 2),
        K_(opts.get_int("components", 10)),
        hidden_(opts.get_int("hidden", 20)),
        init_sigma_x_(opts.get_double("sigma_x", 0.3)),
        overdispersion_(opts.get_double("overdispersion", 3.0)),
        dirichlet_alpha_(opts.get_double("dirichlet_alpha", 0.999)),
        penalty_strength_(opts.get_double("penalty_strength", 1e-4)) {
    check(K_ >= 2, "pinwheel_hier: needs at least two components");
    auto lay = std::make_shared<ParamLayout>();
    lay->add("logits", K_);
    lay->add("mu", 2, K_);
    lay->add("chol_log_diag", 2, K_);
    lay->add("chol_off", 1, K_);
    lay->add("W1", hidden_, 2);
    lay->add("b1", hidden_);
    lay->add("W2", 2, hidden_);
    lay->add("b2", 2);
    lay->add("log_sigma_x", 2);
    layout_ = lay;
    suff_dim_ = 4;
  }

  ParamVector initial_theta(std::uint64_t seed) const override {
    Rng rng(seed);
    ParamVector th(layout_);
    th.set("logits", Vec::Zero(K_));
    Mat mu(2, K_);
    for (int i = 0; i < mu.size(); ++i) mu.data()[i] = rng.normal();
    th.set("mu", mu);
    th.set("chol_log_diag", Mat::Zero(2, K_));
    th.set("chol_off", Mat::Zero(1, K_));
    th.set("W1", random_weights(rng, hidden_, 2));
    th.set("b1", Vec::Zero(hidden_));
    th.set("W2", random_weights(rng, 2, hidden_));
    th.set("b2", Vec::Zero(2));
    th.set("log_sigma_x",
           Vec::Constant(2, std::log(init_sigma_x_ * overdispersion_)));
    return th;
  }

  SampleBatch sample(const ParamVector& theta, std::uint64_t seed,
                     int n) const override {
    validate_theta(theta);
    check(n >= 1, name_ + ": sample count must be positive");
    Rng rng(seed);
    Vec probs = detail::softmax(theta.vector("logits"));
    Mat mu = theta.matrix("mu");
    Mat d = theta.matrix("chol_log_diag");
    Mat off = theta.matrix("chol_off");
    Mat W1 = theta.matrix("W1");
    Vec b1 = theta.vector("b1");
    Mat W2 = theta.matrix("W2");
    Vec b2 = theta.vector("b2");
    Vec sx = theta.vector("log_sigma_x").array().exp();
    SampleBatch out;
    out.Z.resize(3, n);
    out.X.resize(2, n);
    for (int i = 0; i < n; ++i) {
      int k = rng.categorical(probs);
      double e0 = rng.normal();
      double e1 = rng.normal();
      double z0 = mu(0, k) + std::exp(d(0, k)) * e0;
      double z1 = mu(1, k) + off(0, k) * e0 + std::exp(d(1, k)) * e1;
      out.Z(0, i) = static_cast<double>(k);
      out.Z(1, i) = z0;
      out.Z(2, i) = z1;
    }
    Mat m = detail::mlp_tanh(W1, b1, W2, b2, out.Z.bottomRows(2));
    for (int i = 0; i < n; ++i)
      out.X.col(i) = m.col(i) + sx.cwiseProduct(rng.normal_vec(2));
    return out;
  }

  bool in_support(const Vec& z, const Vec& x) const override {
    if (!GenerativeModel::in_support(z, x)) return false;
    double k = z[0];
    return k == std::floor(k) && k >= 0.0 && k < static_cast<double>(K_);
  }

  Var log_joint_batch(Tape& t, Var theta, const Mat& Z,
                      const Mat& X) const override {
    detail::check_batch(*this, Z, X);
    Var prior = log_prior_rows(t, theta, Z);
    Var resid = t.sub(t.constant(X), mean_cols(t, theta, Z.bottomRows(2)));
    Var ll = detail::gaussian_ll_rows_diag(t, resid, log_sigma(t, theta));
    return t.add(prior, ll);
  }

  Vec suff_stats(const Vec& x) const override {
    Vec s(4);
    s << x[0], x[1], x[0] * x[0], x[1] * x[1];
    return s;
  }

  bool has_prior_density() const override { return true; }

  Vec log_prior_values(const ParamVector& theta, const Mat& Z) const override {
    check(Z.rows() == dim_z_, name_ + ": latent rows mismatch");
    Vec logits = theta.vector("logits");
    double mx = logits.maxCoeff();
    double lse = mx + std::log((logits.array() - mx).exp().sum());
    Mat mu = theta.matrix("mu");
    Mat d = theta.matrix("chol_log_diag");
    Mat off = theta.matrix("chol_off");
    Vec out(Z.cols());
    for (int i = 0; i < Z.cols(); ++i) {
      double kf = Z(0, i);
      if (kf != std::floor(kf) || kf < 0.0 || kf >= K_) {
        out[i] = -std::numeric_limits<double>::infinity();
        continue;
      }
      int k = static_cast<int>(kf);
      double w0 = (Z(1, i) - mu(0, k)) * std::exp(-d(0, k));
      double w1 = (Z(2, i) - mu(1, k) - off(0, k) * w0) * std::exp(-d(1, k));
      out[i] = logits[k] - lse - 0.5 * (w0 * w0 + w1 * w1) - d(0, k) -
               d(1, k) - detail::kLog2Pi;
    }
    return out;
  }

  Var exp_fam_eta_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    Var inv_var = t.vexp(t.scale_c(-2.0, log_sigma(t, theta)));
    Var mu = mean_cols(t, theta, Z.bottomRows(2));
    Var top = t.mul(broadcast_col(t, inv_var, n), mu);
    Var bot = broadcast_col(t, t.scale_c(-0.5, inv_var), n);
    return vstack(t, {top, bot});
  }

  Var exp_fam_psi_batch(Tape& t, Var theta, const Mat& Z) const override {
    int n = static_cast<int>(Z.cols());
    Var ls = log_sigma(t, theta);
    Var inv_var = t.vexp(t.scale_c(-2.0, ls));
    Var mu = mean_cols(t, theta, Z.bottomRows(2));
    Var quad =
        t.scale_c(0.5, colsum(t, t.mul(t.square(mu), broadcast_col(t, inv_var, n))));
    Var norm = broadcast_row(t, t.add_c(kLog2Pi, t.vsum(ls)), n);
    return t.sub(t.add(quad, norm), log_prior_rows(t, theta, Z));
  }

  bool has_penalty() const override { return true; }

  // Dirichlet log-prior on the mixture weights plus small quadratic-style
  // penalties on the component parameters and network weights.
  Var log_penalty(Tape& t, Var theta) const override {
    const auto& sl = layout_->slice("logits");
    Var m = t.slice(theta, sl.offset, sl.size());
    Var lse = t.logsumexp(m);
    Var dir = t.scale_c(dirichlet_alpha_ - 1.0,
                        t.sub(t.vsum(m), t.scale_c(static_cast<double>(K_), lse)));

    const auto& sd = layout_->slice("chol_log_diag");
    Var dvec = t.slice(theta, sd.offset, sd.size());
    Var logdet_sum = t.scale_c(2.0, t.vsum(dvec));

    const auto& smu = layout_->slice("mu");
    Var muvec = t.slice(theta, smu.offset, smu.size());
    Var mu_sq = t.sqnorm(muvec);

    // Tr(Sigma_k^-1) = e^{-2 d0} + e^{-2 d1} + off^2 e^{-2(d0 + d1)}
    Var diag_terms = t.vsum(t.vexp(t.scale_c(-2.0, dvec)));
    Var D = t.reshape(dvec, 2, K_);
    Var dsum = t.matmul(t.constant(Mat::Ones(1, 2)), D);  // 1 x K
    const auto& soff = layout_->slice("chol_off");
    Var offv = t.reshape(t.slice(theta, soff.offset, soff.size()), 1, K_);
    Var cross = t.vsum(t.mul(t.square(offv), t.vexp(t.scale_c(-2.0, dsum))));
    Var trace_sum = t.add(diag_terms, cross);

    const auto& w1 = layout_->slice("W1");
    const auto& w2 = layout_->slice("W2");
    Var wsq = t.add(t.sqnorm(t.slice(theta, w1.offset, w1.size())),
                    t.sqnorm(t.slice(theta, w2.offset, w2.size())));

    Var comps = t.add(t.add(mu_sq, logdet_sum), t.add(trace_sum, wsq));
    return t.add(dir, t.scale_c(-penalty_strength_, comps));
  }

 private:
  static Mat random_weights(Rng& rng, int rows, int cols) {
    Mat W(rows, cols);
    for (int i = 0; i < W.size(); ++i)
      W.data()[i] = rng.normal() / std::sqrt(static_cast<double>(cols));
    return W;
  }

  Var log_sigma(Tape& t, Var theta) const {
    const auto& s = layout_->slice("log_sigma_x");
    return t.slice(theta, s.offset, s.size());
  }

  Var mean_cols(Tape& t, Var theta, const Mat& Z2) const {
    Var W1 = slice_param(t, theta, layout_->slice("W1"));
    const auto& s1 = layout_->slice("b1");
    Var b1 = t.slice(theta, s1.offset, s1.size());
    Var W2 = slice_param(t, theta, layout_->slice("W2"));
    const auto& s2 = layout_->slice("b2");
    Var b2 = t.slice(theta, s2.offset, s2.size());
    return detail::tape_mlp_tanh(t, W1, b1, W2, b2, t.constant(Z2));
  }

  // log Cat(z1) + log N(z2; mu_k, Sigma_k) per column, via component masks.
  Var log_prior_rows(Tape& t, Var theta, const Mat& Z) const {
    int n = static_cast<int>(Z.cols());
    Mat masks = Mat::Zero(K_, n);
    for (int i = 0; i < n; ++i)
      masks(static_cast<int>(Z(0, i)), i) = 1.0;
    const Mat Z2 = Z.bottomRows(2);

    const auto& sl = layout_->slice("logits");
    Var m = t.slice(theta, sl.offset, sl.size());
    Var lse = t.logsumexp(m);
    Var m_shift = t.sub(m, t.matmul(t.constant(Mat::Ones(K_, 1)), lse));
    Var cat = t.matmul(t.reshape(m_shift, 1, K_), t.constant(masks));

    const auto& smu = layout_->slice("mu");
    const auto& sd = layout_->slice("chol_log_diag");
    const auto& soff = layout_->slice("chol_off");
    Mat e0 = Mat::Zero(1, 2), e1 = Mat::Zero(1, 2);
    e0(0, 0) = 1.0;
    e1(0, 1) = 1.0;
    Var total = cat;
    for (int k = 0; k < K_; ++k) {
      Var mu_k = t.slice(theta, smu.offset + 2 * k, 2);
      Var d0 = t.slice(theta, sd.offset + 2 * k, 1);
      Var d1 = t.slice(theta, sd.offset + 2 * k + 1, 1);
      Var off = t.slice(theta, soff.offset + k, 1);
      Var v = t.sub(t.constant(Z2), broadcast_col(t, mu_k, n));
      Var v0 = t.matmul(t.constant(e0), v);
      Var v1 = t.matmul(t.constant(e1), v);
      Var w0 = t.scale(t.vexp(t.neg(d0)), v0);
      Var w1 = t.scale(t.vexp(t.neg(d1)), t.sub(v1, t.scale(off, w0)));
      Var quad = t.add(t.square(w0), t.square(w1));
      Var ll_k = t.scale_c(-0.5, quad);
      ll_k = t.sub(ll_k, broadcast_row(t, t.add(d0, d1), n));
      ll_k = t.add(ll_k, t.constant(Mat::Constant(1, n, -kLog2Pi)));
      total = t.add(total, t.mul(t.constant(Mat(masks.row(k))), ll_k));
    }
    return total;
  }

  int K_;
  int hidden_;
  double init_sigma_x_;
  double overdispersion_;
  double dirichlet_alpha_;
  double penalty_strength_;
};

}  // namespace

std::unique_ptr<GenerativeModel> make_pinwheel_hier(const Options& opts) {
  return std::make_unique<PinwheelHier>(opts);
}

}  // namespace alws
