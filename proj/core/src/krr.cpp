#include "alws/krr.hpp"

#include <cmath>
#include <cstdio>
#include <vector>

#include "alws/tape.hpp"

#ifdef ALWS_HAVE_LAPACK
extern "C" {
void dpotrf_(const char* uplo, const int* n, double* a, const int* lda, int* info);
void dpotrs_(const char* uplo, const int* n, const int* nrhs, const double* a,
             const int* lda, double* b, const int* ldb, int* info);
}
#endif

namespace alws {

bool try_cholesky(const Mat& A, Mat& L) {
  check(A.rows() == A.cols(), "cholesky: matrix must be square");
  check(A.size() > 0, "cholesky: empty matrix");
#ifdef ALWS_HAVE_LAPACK
  L = A;
  int n = static_cast<int>(A.rows());
  int info = 0;
  dpotrf_("L", &n, L.data(), &n, &info);
  if (info != 0) return false;
  L.triangularView<Eigen::StrictlyUpper>().setZero();
  return true;
#else
  Eigen::LLT<Mat> llt(A);
  if (llt.info() != Eigen::Success) return false;
  L = llt.matrixL();
  return true;
#endif
}

CholFactor cholesky_with_jitter(const Mat& A) {
  auto L = std::make_shared<Mat>();
  if (try_cholesky(A, *L)) return {L, 0.0};
  double unit = A.trace() / static_cast<double>(A.rows());
  if (!(unit > 0.0)) unit = 1.0;
  double jitter = 0.0;
  for (double rel = 1e-10; rel < 1.5e-4; rel *= 10.0) {
    jitter = rel * unit;
    Mat Aj = A;
    Aj.diagonal().array() += jitter;
    if (try_cholesky(Aj, *L)) return {L, jitter};
  }
  char msg[128];
  std::snprintf(msg, sizeof(msg), "cholesky failed with jitter up to %.3e", jitter);
  fail(msg);
}

Mat cholesky_solve(const Mat& L, Mat B) {
  check(L.rows() == B.rows(), "cholesky_solve: dimension mismatch");
#ifdef ALWS_HAVE_LAPACK
  int n = static_cast<int>(L.rows());
  int nrhs = static_cast<int>(B.cols());
  int info = 0;
  dpotrs_("L", &n, &nrhs, L.data(), &n, B.data(), &n, &info);
  check(info == 0, "cholesky_solve: bad arguments");
  return B;
#else
  L.triangularView<Eigen::Lower>().solveInPlace(B);
  L.transpose().triangularView<Eigen::Upper>().solveInPlace(B);
  return B;
#endif
}

GradientModelFit krr_fit(const Mat& X, const Mat& Y, const Hyperparams& hp,
                         TargetKind kind, int eta_dim) {
  const int n = static_cast<int>(X.cols());
  check(n >= 1, "krr_fit: need at least one sample");
  check(Y.cols() == n, "krr_fit: one target column per input required");
  check(hp.lambda > 0.0, "krr_fit: lambda must be positive");
  check_finite(Y, "krr_fit targets");
  if (kind == TargetKind::exp_fam)
    check(eta_dim >= 1 && eta_dim + 1 == Y.rows(),
          "krr_fit: exp_fam targets must be eta rows plus one log-normalizer row");

  GradientModelFit fit;
  fit.train_inputs = X;
  fit.kernel = hp.kernel;
  fit.lambda = hp.lambda;
  fit.target_kind = kind;
  fit.eta_dim = eta_dim;
  fit.targets = Y;

  Mat A = kernel_gram(hp.kernel, X);
  A.diagonal().array() += hp.lambda * n;
  CholFactor cf = cholesky_with_jitter(A);
  fit.chol = cf.L;
  fit.jitter = cf.jitter;
  fit.alpha = cholesky_solve(*cf.L, Y.transpose()).transpose();
  return fit;
}

Vec krr_weights(const GradientModelFit& fit, const Vec& xstar) {
  return cholesky_solve(*fit.chol, kernel_cross(fit.kernel, fit.train_inputs, xstar));
}

Mat krr_weights(const GradientModelFit& fit, const Mat& Xstar) {
  return cholesky_solve(*fit.chol, kernel_cross(fit.kernel, fit.train_inputs, Xstar));
}

Vec krr_predict(const GradientModelFit& fit, const Vec& xstar) {
  check(xstar.size() == fit.train_inputs.rows(), "krr_predict: dimension mismatch");
  return fit.alpha * kernel_cross(fit.kernel, fit.train_inputs, xstar);
}

Mat krr_predict(const GradientModelFit& fit, const Mat& Xstar) {
  check(Xstar.rows() == fit.train_inputs.rows(), "krr_predict: dimension mismatch");
  return fit.alpha * kernel_cross(fit.kernel, fit.train_inputs, Xstar);
}

Vec krr_predict_grad_targets(const GradientModelFit& fit, const Mat& grad_targets,
                             const Vec& xstar) {
  check(grad_targets.cols() == fit.n(),
        "krr_predict_grad_targets: one column per training sample required");
  return grad_targets * krr_weights(fit, xstar);
}

namespace {

// Row- and column-oriented batchnorm wrappers with frozen running statistics.
Var bn_cols(Tape& t, Var F, const FeatureMap& fm, int n) {
  if (fm.kind != FeatureMap::Kind::projection_batchnorm) return F;
  Vec inv_sd = (fm.running_var.array() + fm.epsilon).sqrt().inverse();
  Mat mean_rep = fm.running_mean * Mat::Ones(1, n);
  Mat sd_rep = inv_sd * Mat::Ones(1, n);
  return t.mul(t.sub(F, t.constant(mean_rep)), t.constant(sd_rep));
}

Var bn_rows(Tape& t, Var F, const FeatureMap& fm, int n) {
  if (fm.kind != FeatureMap::Kind::projection_batchnorm) return F;
  Vec inv_sd = (fm.running_var.array() + fm.epsilon).sqrt().inverse();
  Mat mean_rep = Mat::Ones(n, 1) * fm.running_mean.transpose();
  Mat sd_rep = Mat::Ones(n, 1) * inv_sd.transpose();
  return t.mul(t.sub(F, t.constant(mean_rep)), t.constant(sd_rep));
}

}  // namespace

AdaptResult krr_adapt(const Hyperparams& hp0, const Mat& Xfit, const Mat& Yfit,
                      const Mat& Xval, const Mat& Yval, const AdaptOptions& opt) {
  AdaptResult res;
  res.hp = hp0;
  if (opt.steps <= 0) return res;

  const int nf = static_cast<int>(Xfit.cols());
  const int nv = static_cast<int>(Xval.cols());
  check(nf >= 1, "krr_adapt: empty fit set");
  check(nv >= 2, "krr_adapt: need at least two validation points");
  check(Yfit.cols() == nf && Yval.cols() == nv, "krr_adapt: target counts");
  check(Yfit.rows() == Yval.rows(), "krr_adapt: target dimension mismatch");
  check(hp0.lambda > 0.0, "krr_adapt: lambda must be positive");

  const bool free_lambda = !hp0.lambda_fixed;
  const bool adapt_proj = opt.adapt_projection &&
                          hp0.kernel.feature_map.kind != FeatureMap::Kind::identity;
  const FeatureMap& fm0 = hp0.kernel.feature_map;
  const int dout = adapt_proj ? static_cast<int>(fm0.weights.rows()) : 0;
  const int dx = adapt_proj ? static_cast<int>(fm0.weights.cols()) : 0;
  const int np = dout * dx;
  const int off_lam = 1;
  const int off_p = free_lambda ? 2 : 1;
  const int gdim = off_p + (adapt_proj ? 2 * np : 0);

  // Feature-space distances are constant unless the projection itself moves.
  std::shared_ptr<const Mat> Dfit, Dcross;
  if (!adapt_proj) {
    Mat Ff = hp0.kernel.feature_map.apply(Xfit);
    Mat Fv = hp0.kernel.feature_map.apply(Xval);
    Dfit = std::make_shared<Mat>(pairwise_sqdist(Ff));
    Dcross = std::make_shared<Mat>(pairwise_sqdist(Fv, Ff));
  }

  KernelParams kp = hp0.kernel;
  double ll = std::log(hp0.lambda);
  KernelParams kp_ok = kp;
  double ll_ok = ll;
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(opt.steps) + 1);

  for (int step = 0; step < opt.steps; ++step) {
    double e = 0.0;
    Vec g;
    try {
      Vec gamma(gdim);
      gamma[0] = kp.log_bandwidth;
      if (free_lambda) gamma[off_lam] = ll;
      if (adapt_proj) {
        Eigen::Map<Mat>(gamma.data() + off_p, dx, dout) =
            kp.feature_map.weights.transpose();
        Eigen::Map<Mat>(gamma.data() + off_p + np, dout, dx) = kp.feature_map.weights;
      }

      Tape t;
      Var gv = t.param(gamma);
      Var factor = t.scale_c(-0.5, t.vexp(t.scale_c(-2.0, t.slice(gv, 0, 1))));

      Var Dfit_node, Dcross_node;
      if (!adapt_proj) {
        Dfit_node = t.constant_ref(Dfit);
        Dcross_node = t.constant_ref(Dcross);
      } else {
        // The projection enters twice, once per orientation, because the
        // engine has no transpose. P holds V^T and Q holds V; the two
        // gradient blocks are tied back together after backward.
        Var P = t.reshape(t.slice(gv, off_p, np), dx, dout);
        Var Q = t.reshape(t.slice(gv, off_p + np, np), dout, dx);
        Var Ft = bn_rows(t, t.matmul(t.constant(Xfit.transpose()), P), kp.feature_map, nf);
        Var F = bn_cols(t, t.matmul(Q, t.constant(Xfit)), kp.feature_map, nf);
        Var Vt = bn_rows(t, t.matmul(t.constant(Xval.transpose()), P), kp.feature_map, nv);
        Var ones_col = t.constant(Mat::Ones(dout, 1));
        Var sf_col = t.matmul(t.mul(Ft, Ft), ones_col);  // nf x 1
        Var sf_row = t.reshape(sf_col, 1, nf);
        Var sv_col = t.matmul(t.mul(Vt, Vt), ones_col);  // nv x 1
        Dfit_node = t.add(t.add(t.matmul(sf_col, t.constant(Mat::Ones(1, nf))),
                                t.matmul(t.constant(Mat::Ones(nf, 1)), sf_row)),
                          t.scale_c(-2.0, t.matmul(Ft, F)));
        Dcross_node = t.add(t.add(t.matmul(sv_col, t.constant(Mat::Ones(1, nf))),
                                  t.matmul(t.constant(Mat::Ones(nv, 1)), sf_row)),
                            t.scale_c(-2.0, t.matmul(Vt, F)));
      }

      Var K = t.vexp(t.scale(factor, Dfit_node));
      Var A = free_lambda
                  ? t.add(K, t.scale(t.vexp(t.slice(gv, off_lam, 1)),
                                     t.constant(static_cast<double>(nf) *
                                                Mat::Identity(nf, nf))))
                  : t.add(K, t.constant(hp0.lambda * nf * Mat::Identity(nf, nf)));

      Mat A0 = t.value(A);
      CholFactor cf = cholesky_with_jitter(A0);
      Mat alpha0t = cholesky_solve(*cf.L, Yfit.transpose());

      // One-step correction around the frozen factor: the value at the
      // current hyperparameters is alpha exactly, and so is the gradient.
      Var rhs = t.sub(t.constant(Yfit.transpose()),
                      t.matmul(t.sub(A, t.constant(A0)), t.constant(alpha0t)));
      Var G = t.chol_solve(cf.L, rhs);
      Var Kst = t.vexp(t.scale(factor, Dcross_node));
      Var R = t.sub(t.matmul(Kst, G), t.constant(Yval.transpose()));
      Var E = t.scale_c(1.0 / nv, t.vsum(t.mul(R, R)));

      e = t.value_scalar(E);
      g = t.backward(E);
    } catch (const Error&) {
      res.aborted = true;
      break;
    }
    if (!std::isfinite(e)) {
      res.aborted = true;
      break;
    }
    trace.push_back(e);
    kp_ok = kp;
    ll_ok = ll;

    kp.log_bandwidth -= opt.lr * g[0];
    if (free_lambda) ll -= opt.lr * g[off_lam];
    if (adapt_proj) {
      Eigen::Map<const Mat> gP(g.data() + off_p, dx, dout);
      Eigen::Map<const Mat> gQ(g.data() + off_p + np, dout, dx);
      kp.feature_map.weights -= opt.lr * (gQ + gP.transpose());
    }
  }

  if (!res.aborted) {
    try {
      Hyperparams hp = hp0;
      hp.kernel = kp;
      hp.lambda = std::exp(ll);
      GradientModelFit fit = krr_fit(Xfit, Yfit, hp);
      double e = (krr_predict(fit, Xval) - Yval).squaredNorm() / nv;
      check(std::isfinite(e), "krr_adapt: non-finite validation error");
      trace.push_back(e);
      kp_ok = kp;
      ll_ok = ll;
    } catch (const Error&) {
      res.aborted = true;
    }
  }

  res.hp.kernel = kp_ok;
  res.hp.lambda = std::exp(ll_ok);
  res.mse_trace = Eigen::Map<const Vec>(trace.data(), static_cast<Eigen::Index>(trace.size()));
  return res;
}

}  // namespace alws
