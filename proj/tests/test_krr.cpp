#include <doctest.h>

#include <cmath>

#include "alws/krr.hpp"
#include "alws/rng.hpp"
#include "alws/tape.hpp"
#include "test_helpers.hpp"

using namespace alws;
using alws::testing::max_rel_err;

namespace reference {

// Regularized system matrix assembled entry by entry.
Mat system_matrix(const KernelParams& kp, const Mat& X, double lambda, double jitter) {
  int n = static_cast<int>(X.cols());
  Mat A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = kernel_eval(kp, X.col(i), X.col(j));
  A.diagonal().array() += lambda * n + jitter;
  return A;
}

double val_mse(const Hyperparams& hp, const Mat& Xf, const Mat& Yf, const Mat& Xv,
               const Mat& Yv) {
  GradientModelFit fit = krr_fit(Xf, Yf, hp);
  return (krr_predict(fit, Xv) - Yv).squaredNorm() / Xv.cols();
}

}  // namespace reference

static Mat random_mat(Rng& rng, int r, int c) {
  Mat M(r, c);
  for (int i = 0; i < M.size(); ++i) M.data()[i] = rng.normal();
  return M;
}

TEST_CASE("cholesky helpers") {
  Rng rng(1);

  SUBCASE("solves match a dense factorization") {
    Mat B = random_mat(rng, 6, 6);
    Mat A = B * B.transpose() + 6.0 * Mat::Identity(6, 6);
    Mat L;
    REQUIRE(try_cholesky(A, L));
    CHECK((L * L.transpose() - A).norm() / A.norm() < 1e-14);
    Mat rhs = random_mat(rng, 6, 2);
    Mat X = cholesky_solve(L, rhs);
    CHECK((A * X - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("well-conditioned input needs no jitter") {
    Mat A = 3.0 * Mat::Identity(4, 4);
    CholFactor cf = cholesky_with_jitter(A);
    CHECK(cf.jitter == 0.0);
  }
  SUBCASE("singular input succeeds with positive jitter") {
    Mat A = Mat::Ones(5, 5);  // rank one
    CholFactor cf = cholesky_with_jitter(A);
    CHECK(cf.jitter > 0.0);
    CHECK(((*cf.L) * cf.L->transpose() -
           (A + cf.jitter * Mat::Identity(5, 5))).norm() < 1e-8 * A.norm());
  }
  SUBCASE("indefinite input fails with the jitter in the message") {
    Mat A = -Mat::Identity(3, 3);
    CHECK_THROWS_WITH_AS(cholesky_with_jitter(A), doctest::Contains("jitter"), Error);
  }
}

TEST_CASE("krr fit: pinned small systems") {
  Hyperparams hp;

  SUBCASE("one sample, lambda one half") {
    Mat X = Mat::Zero(1, 1);
    Mat Y = Mat::Constant(1, 1, 2.0);
    hp.lambda = 0.5;
    GradientModelFit fit = krr_fit(X, Y, hp);
    CHECK(fit.alpha(0, 0) == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(krr_predict(fit, Vec(X.col(0)))[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("zero targets give zero weights and predictions") {
    Rng rng(2);
    Mat X = random_mat(rng, 3, 8);
    Mat Y = Mat::Zero(2, 8);
    GradientModelFit fit = krr_fit(X, Y, hp);
    CHECK(fit.alpha.cwiseAbs().maxCoeff() == 0.0);
    CHECK(krr_predict(fit, Vec(rng.normal_vec(3))).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("tiny ridge interpolates") {
    Mat X(1, 2);
    X << 0.0, 1.0;
    Mat Y(1, 2);
    Y << -0.4, 1.7;
    hp.lambda = 1e-12;
    GradientModelFit fit = krr_fit(X, Y, hp);
    CHECK(krr_predict(fit, Vec(X.col(0)))[0] == doctest::Approx(-0.4).epsilon(1e-6));
    CHECK(krr_predict(fit, Vec(X.col(1)))[0] == doctest::Approx(1.7).epsilon(1e-6));
  }
}

TEST_CASE("krr fit: invariants against the dense oracle") {
  Rng rng(7);
  Hyperparams hp;
  hp.lambda = 0.05;
  hp.kernel.log_bandwidth = std::log(1.4);
  Mat X = random_mat(rng, 3, 24);
  Mat Y = random_mat(rng, 2, 24);
  GradientModelFit fit = krr_fit(X, Y, hp);

  SUBCASE("factor reconstructs the system matrix") {
    Mat A = reference::system_matrix(hp.kernel, X, hp.lambda, fit.jitter);
    CHECK(((*fit.chol) * fit.chol->transpose() - A).norm() / A.norm() < 1e-8);
  }
  SUBCASE("alpha agrees with a direct dense solve") {
    Mat A = reference::system_matrix(hp.kernel, X, hp.lambda, fit.jitter);
    Mat alpha_direct = A.ldlt().solve(Y.transpose()).transpose();
    CHECK(max_rel_err(Vec(fit.alpha.reshaped()), Vec(alpha_direct.reshaped())) < 1e-8);
  }
  SUBCASE("constant targets predict through the weight sum") {
    Mat Yc = Mat::Constant(1, 24, 3.3);
    GradientModelFit cf = krr_fit(X, Yc, hp);
    Vec q = rng.normal_vec(3);
    Mat A = reference::system_matrix(hp.kernel, X, hp.lambda, cf.jitter);
    Vec w = A.ldlt().solve(kernel_cross(hp.kernel, X, q));
    CHECK(krr_predict(cf, q)[0] == doctest::Approx(3.3 * w.sum()).epsilon(1e-10));
  }
  SUBCASE("prediction is linear in the targets") {
    Mat Y2 = random_mat(rng, 2, 24);
    GradientModelFit f2 = krr_fit(X, Y2, hp);
    GradientModelFit fsum = krr_fit(X, Mat(Y + Y2), hp);
    Vec q = rng.normal_vec(3);
    Vec lhs = krr_predict(fsum, q);
    Vec rhs = krr_predict(fit, q) + krr_predict(f2, q);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("far query prediction vanishes") {
    Vec far = Vec::Constant(3, 80.0);
    CHECK(krr_predict(fit, far).norm() < 1e-9 * fit.alpha.norm());
  }
}

TEST_CASE("ridge shrinkage: larger lambda never grows the weights") {
  Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    Mat X = random_mat(rng, 2, 12);
    Mat Y = random_mat(rng, 1, 12);
    Hyperparams a, b;
    a.lambda = rng.uniform(1e-4, 0.1);
    b.lambda = a.lambda * rng.uniform(1.5, 20.0);
    CHECK(krr_fit(X, Y, a).alpha.norm() >= krr_fit(X, Y, b).alpha.norm());
  }
}

TEST_CASE("gradient targets pathway") {
  Rng rng(23);
  Hyperparams hp;
  hp.lambda = 0.03;

  SUBCASE("zero gradient targets give a zero gradient") {
    Mat X = random_mat(rng, 2, 6);
    Mat Y = random_mat(rng, 1, 6);
    GradientModelFit fit = krr_fit(X, Y, hp);
    Vec g = krr_predict_grad_targets(fit, Mat::Zero(4, 6), Vec(rng.normal_vec(2)));
    CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("single sample scales the target gradient") {
    Mat X = Mat::Zero(1, 1);
    Mat Y = Mat::Constant(1, 1, 1.0);
    hp.lambda = 0.25;
    GradientModelFit fit = krr_fit(X, Y, hp);
    Vec gy(3);
    gy << 1.0, -2.0, 0.5;
    Vec q(1);
    q << 0.7;
    double ks = kernel_eval(hp.kernel, X.col(0), q);
    Vec g = krr_predict_grad_targets(fit, gy, q);
    CHECK((g - gy * (ks / 1.25)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("matches differentiating through the fitted prediction") {
    // Targets y_n(theta) = 0.5 theta^T Q_n theta. Differentiating J(x*) =
    // sum_n w_n y_n(theta) at fixed weights w must equal the direct
    // regression on the columns grad y_n.
    const int d = 7, n = 30;
    Vec theta = rng.normal_vec(d);
    std::vector<Mat> Qs;
    for (int k = 0; k < n; ++k) Qs.push_back(random_mat(rng, d, d));
    Mat X = random_mat(rng, 3, n);
    Mat Y(1, n);
    Mat Gt(d, n);
    for (int k = 0; k < n; ++k) {
      Y(0, k) = 0.5 * theta.dot(Qs[k] * theta);
      Gt.col(k) = 0.5 * (Qs[k] + Qs[k].transpose()) * theta;
    }
    GradientModelFit fit = krr_fit(X, Y, hp);
    Vec q = rng.normal_vec(3);
    Vec direct = krr_predict_grad_targets(fit, Gt, q);

    Vec w = krr_weights(fit, q);
    Tape t;
    Var th = t.param(theta);
    std::vector<Var> ys;
    for (int k = 0; k < n; ++k)
      ys.push_back(t.scale_c(0.5, t.dot(th, t.matmul(t.constant(Qs[k]), th))));
    Vec autodiff = t.backward(t.dot(t.concat(ys), t.constant(w)));
    CHECK(max_rel_err(autodiff, direct) < 1e-6);
  }
}

TEST_CASE("hyperparameter adaptation") {
  Rng rng(41);

  SUBCASE("zero steps is a no-op") {
    Mat X = random_mat(rng, 1, 10), Y = random_mat(rng, 1, 10);
    Hyperparams hp;
    hp.kernel.log_bandwidth = 0.9;
    AdaptOptions opt;
    opt.steps = 0;
    AdaptResult r = krr_adapt(hp, X, Y, X, Y, opt);
    CHECK(r.hp.kernel.log_bandwidth == 0.9);
    CHECK(r.hp.lambda == hp.lambda);
    CHECK(r.mse_trace.size() == 0);
    CHECK_FALSE(r.aborted);
  }
  SUBCASE("zero targets keep hyperparameters still") {
    Mat Xf = random_mat(rng, 1, 8), Xv = random_mat(rng, 1, 5);
    Mat Yf = Mat::Zero(1, 8), Yv = Mat::Zero(1, 5);
    Hyperparams hp;
    hp.kernel.log_bandwidth = 0.3;
    AdaptOptions opt;
    opt.steps = 3;
    opt.lr = 0.1;
    AdaptResult r = krr_adapt(hp, Xf, Yf, Xv, Yv, opt);
    REQUIRE(r.mse_trace.size() == 4);
    CHECK(r.mse_trace.cwiseAbs().maxCoeff() == 0.0);
    CHECK(r.hp.kernel.log_bandwidth == 0.3);
    CHECK(r.hp.lambda == doctest::Approx(hp.lambda).epsilon(1e-15));
  }
  SUBCASE("badly scaled start improves on a smooth 1-D problem") {
    Mat Xf(1, 60), Xv(1, 30);
    Mat Yf(1, 60), Yv(1, 30);
    for (int i = 0; i < 60; ++i) {
      Xf(0, i) = rng.uniform(-3.0, 3.0);
      Yf(0, i) = std::sin(2.0 * Xf(0, i));
    }
    for (int i = 0; i < 30; ++i) {
      Xv(0, i) = rng.uniform(-3.0, 3.0);
      Yv(0, i) = std::sin(2.0 * Xv(0, i));
    }
    Hyperparams hp;
    hp.kernel.log_bandwidth = std::log(10.0);
    hp.lambda = 0.01;
    AdaptOptions opt;
    opt.steps = 50;
    opt.lr = 0.2;
    AdaptResult r = krr_adapt(hp, Xf, Yf, Xv, Yv, opt);
    REQUIRE_FALSE(r.aborted);
    REQUIRE(r.mse_trace.size() == 51);
    CHECK(r.mse_trace[50] < r.mse_trace[0]);
  }
  SUBCASE("fixed lambda stays fixed") {
    Mat Xf = random_mat(rng, 2, 20), Xv = random_mat(rng, 2, 10);
    Mat Yf = random_mat(rng, 1, 20), Yv = random_mat(rng, 1, 10);
    Hyperparams hp;
    hp.lambda = 0.02;
    hp.lambda_fixed = true;
    AdaptOptions opt;
    opt.steps = 5;
    opt.lr = 0.05;
    AdaptResult r = krr_adapt(hp, Xf, Yf, Xv, Yv, opt);
    CHECK(r.hp.lambda == 0.02);
    CHECK(r.hp.kernel.log_bandwidth != hp.kernel.log_bandwidth);
  }
  SUBCASE("non-finite validation targets abort with the incoming state") {
    Mat Xf = random_mat(rng, 1, 6), Xv = random_mat(rng, 1, 4);
    Mat Yf = random_mat(rng, 1, 6), Yv = random_mat(rng, 1, 4);
    Yv(0, 2) = std::numeric_limits<double>::infinity();
    Hyperparams hp;
    AdaptOptions opt;
    opt.steps = 3;
    AdaptResult r = krr_adapt(hp, Xf, Yf, Xv, Yv, opt);
    CHECK(r.aborted);
    CHECK(r.hp.kernel.log_bandwidth == hp.kernel.log_bandwidth);
    CHECK(r.mse_trace.size() == 0);
  }
}

TEST_CASE("adaptation gradients match finite differences") {
  Rng rng(59);
  const double h = 1e-5;

  SUBCASE("bandwidth and ridge") {
    Mat Xf = random_mat(rng, 2, 25), Xv = random_mat(rng, 2, 12);
    Mat Yf(1, 25), Yv(1, 12);
    for (int i = 0; i < 25; ++i) Yf(0, i) = std::tanh(Xf.col(i).sum());
    for (int i = 0; i < 12; ++i) Yv(0, i) = std::tanh(Xv.col(i).sum());
    Hyperparams hp;
    hp.kernel.log_bandwidth = 0.4;
    hp.lambda = 0.08;

    AdaptOptions opt;
    opt.steps = 1;
    opt.lr = 1e-3;
    AdaptResult r = krr_adapt(hp, Xf, Yf, Xv, Yv, opt);
    double g_sig = (hp.kernel.log_bandwidth - r.hp.kernel.log_bandwidth) / opt.lr;
    double g_lam = (std::log(hp.lambda) - std::log(r.hp.lambda)) / opt.lr;

    auto at = [&](double ls, double llam) {
      Hyperparams p = hp;
      p.kernel.log_bandwidth = ls;
      p.lambda = std::exp(llam);
      return reference::val_mse(p, Xf, Yf, Xv, Yv);
    };
    double ll0 = std::log(hp.lambda);
    double fd_sig = (at(0.4 + h, ll0) - at(0.4 - h, ll0)) / (2 * h);
    double fd_lam = (at(0.4, ll0 + h) - at(0.4, ll0 - h)) / (2 * h);
    CHECK(g_sig == doctest::Approx(fd_sig).epsilon(1e-5));
    CHECK(g_lam == doctest::Approx(fd_lam).epsilon(1e-5));
  }
  SUBCASE("projection weights, with batchnorm") {
    Mat Xf = random_mat(rng, 3, 20), Xv = random_mat(rng, 3, 10);
    Mat Yf(1, 20), Yv(1, 10);
    for (int i = 0; i < 20; ++i) Yf(0, i) = Xf(0, i) * Xf(1, i);
    for (int i = 0; i < 10; ++i) Yv(0, i) = Xv(0, i) * Xv(1, i);
    Hyperparams hp;
    hp.kernel.feature_map = FeatureMap::projection(2, 3, rng, true);
    hp.kernel.feature_map.update_stats(Xf);
    hp.lambda = 0.05;

    AdaptOptions opt;
    opt.steps = 1;
    opt.lr = 1e-3;
    opt.adapt_projection = true;
    AdaptResult r = krr_adapt(hp, Xf, Yf, Xv, Yv, opt);
    Mat gV = (hp.kernel.feature_map.weights - r.hp.kernel.feature_map.weights) / opt.lr;

    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 3; ++j) {
        auto at = [&](double delta) {
          Hyperparams p = hp;
          p.kernel.feature_map.weights(i, j) += delta;
          return reference::val_mse(p, Xf, Yf, Xv, Yv);
        };
        double fd = (at(h) - at(-h)) / (2 * h);
        CHECK(gV(i, j) == doctest::Approx(fd).epsilon(1e-4));
      }
    }
  }
}
