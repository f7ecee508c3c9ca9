#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "alws/models.hpp"
#include "alws/tape.hpp"
#include "doctest.h"
#include "test_helpers.hpp"

using namespace alws;

// Plain-loop density implementations, written directly from the generative
// definitions. Every model's batched tape version is held to these.
namespace reference {
namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double log_normal(double x, double mean, double sd) {
  double r = (x - mean) / sd;
  return -0.5 * r * r - std::log(sd) - 0.5 * kLog2Pi;
}

double softplus(double a) {
  return a > 30.0 ? a : std::log1p(std::exp(a));
}

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

double logsumexp(const Vec& v) {
  double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

Vec mlp(const Mat& W1, const Vec& b1, const Mat& W2, const Vec& b2,
        const Vec& in) {
  Vec h = ((W1 * in + b1).array().tanh()).matrix();
  return W2 * h + b2;
}

double toy_log_joint(const ParamVector& th, const Vec& z, const Vec& x) {
  Vec b = th.vector("b");
  double sd = std::exp(th.scalar("log_sigma_x"));
  double ll = -0.5 * z.squaredNorm() - 0.5 * z.size() * kLog2Pi;
  double mean = softplus(b.dot(z)) - b.squaredNorm();
  return ll + log_normal(x[0], mean, sd);
}

double lin_gauss_log_joint(const ParamVector& th, const Vec& z, const Vec& x) {
  Mat W = th.matrix("W");
  Vec c = th.vector("c");
  Vec ls = th.vector("log_sigma_x");
  double ll = -0.5 * z.squaredNorm() - 0.5 * z.size() * kLog2Pi;
  Vec mean = W * z + c;
  for (int j = 0; j < x.size(); ++j)
    ll += log_normal(x[j], mean[j], std::exp(ls[j]));
  return ll;
}

double circular_log_joint(const ParamVector& th, const Vec& z, const Vec& x) {
  double ll = -kLog2Pi;  // uniform angle on the unit circle
  Vec mean = mlp(th.matrix("W1"), th.vector("b1"), th.matrix("W2"),
                 th.vector("b2"), z);
  double sd = std::exp(th.scalar("log_sigma_x"));
  for (int j = 0; j < x.size(); ++j) ll += log_normal(x[j], mean[j], sd);
  return ll;
}

double pinwheel_log_joint(const ParamVector& th, const Vec& z, const Vec& x) {
  int k = static_cast<int>(z[0]);
  Vec z2 = z.segment(1, 2);
  Vec logits = th.vector("logits");
  double ll = logits[k] - logsumexp(logits);
  Mat mu = th.matrix("mu");
  Mat d = th.matrix("chol_log_diag");
  Mat off = th.matrix("chol_off");
  double w0 = (z2[0] - mu(0, k)) * std::exp(-d(0, k));
  double w1 = (z2[1] - mu(1, k) - off(0, k) * w0) * std::exp(-d(1, k));
  ll += -0.5 * (w0 * w0 + w1 * w1) - d(0, k) - d(1, k) - kLog2Pi;
  Vec mean = mlp(th.matrix("W1"), th.vector("b1"), th.matrix("W2"),
                 th.vector("b2"), z2);
  Vec ls = th.vector("log_sigma_x");
  for (int j = 0; j < 2; ++j)
    ll += log_normal(x[j], mean[j], std::exp(ls[j]));
  return ll;
}

double ica_log_joint(const ParamVector& th, const Vec& z, const Vec& x,
                     double sigma_x) {
  double ll = -z.lpNorm<1>() - z.size() * std::log(2.0);
  Vec mean = th.matrix("W") * z;
  for (int j = 0; j < x.size(); ++j)
    ll += log_normal(x[j], mean[j], sigma_x);
  return ll;
}

double mat_fact_log_joint(const ParamVector& th, const Vec& z, const Vec& x) {
  Mat W = th.matrix("log_W").array().exp().matrix();
  Vec b = th.vector("b");
  Vec u(z.size());
  for (int j = 0; j < z.size(); ++j)
    u[j] = std::log(z[j]) - std::log1p(-z[j]);
  Vec a = W * u + b;
  double ll = 0.0;  // uniform latent prior
  for (int j = 0; j < x.size(); ++j)
    ll += x[j] > 0.5 ? -softplus(-a[j]) : -softplus(a[j]);
  return ll;
}

double oscillator_log_joint(const ParamVector& th, const Vec& z, const Vec& x,
                            int T, int dx) {
  Mat Wz1 = th.matrix("Wz1"), Wz2 = th.matrix("Wz2");
  Vec bz1 = th.vector("bz1"), bz2 = th.vector("bz2");
  Mat Wx1 = th.matrix("Wx1"), Wx2 = th.matrix("Wx2");
  Vec bx1 = th.vector("bx1"), bx2 = th.vector("bx2");
  Vec lsz = th.vector("log_sigma_z"), lsx = th.vector("log_sigma_x");
  Vec prev(2);
  prev << 1.0, 0.0;
  double ll = 0.0;
  for (int s = 0; s < T; ++s) {
    Vec zt = z.segment(2 * s, 2);
    Vec zmean = mlp(Wz1, bz1, Wz2, bz2, prev);
    for (int j = 0; j < 2; ++j)
      ll += log_normal(zt[j], zmean[j], std::exp(lsz[j]));
    Vec xmean = mlp(Wx1, bx1, Wx2, bx2, zt);
    for (int j = 0; j < dx; ++j)
      ll += log_normal(x[dx * s + j], xmean[j], std::exp(lsx[j]));
    prev = zt;
  }
  return ll;
}

struct HhRates {
  double V_T;
  double ratio(double u) const {
    if (std::abs(u) < 1e-12) return 1.0;
    return u / std::expm1(u);
  }
  double am(double V) const { return 1.28 * ratio(-(V - V_T - 13.0) / 4.0); }
  double bm(double V) const { return 1.4 * ratio((V - V_T - 40.0) / 5.0); }
  double ah(double V) const { return 0.128 * std::exp(-(V - V_T - 17.0) / 18.0); }
  double bh(double V) const { return 4.0 * sigmoid((V - V_T - 40.0) / 5.0); }
  double an(double V) const { return 0.16 * ratio(-(V - V_T - 15.0) / 5.0); }
  double bn(double V) const { return 0.5 * std::exp(-(V - V_T - 10.0) / 40.0); }
};

double hh_log_joint(const ParamVector& th, const Vec& z, const Vec& x,
                    const Vec& I, double dt) {
  double C = std::exp(th.scalar("log_C_m"));
  double gl = std::exp(th.scalar("log_g_l"));
  double El = th.scalar("E_l");
  double gNa = std::exp(th.scalar("log_g_Na"));
  double ENa = th.scalar("E_Na");
  double gK = std::exp(th.scalar("log_g_K"));
  double EK = th.scalar("E_K");
  HhRates r{th.scalar("V_T")};
  double sz = std::exp(th.scalar("log_sigma_z"));
  double sx = std::exp(th.scalar("log_sigma_x"));
  double V = El;
  double m = r.am(V) / (r.am(V) + r.bm(V));
  double h = r.ah(V) / (r.ah(V) + r.bh(V));
  double n = r.an(V) / (r.an(V) + r.bn(V));
  double ll = 0.0;
  for (int s = 0; s < z.size(); ++s) {
    double f = (I[s] - gl * (V - El) - gNa * m * m * m * h * (V - ENa) -
                gK * n * n * n * n * (V - EK)) /
               C;
    double mean = V + dt * f;
    ll += log_normal(z[s], mean, sz);
    m += dt * (r.am(V) * (1.0 - m) - r.bm(V) * m);
    h += dt * (r.ah(V) * (1.0 - h) - r.bh(V) * h);
    n += dt * (r.an(V) * (1.0 - n) - r.bn(V) * n);
    V = z[s];
    ll += log_normal(x[s], V, sx);
  }
  return ll;
}

double blowfly_log_joint(const ParamVector& th, const Vec& z, const Vec& x) {
  const int T = static_cast<int>(x.size());
  Vec logits = th.vector("logits_tau");
  int tau = static_cast<int>(z[0]);
  double ll = logits[tau - 1] - logsumexp(logits);
  double sp2 = std::exp(2.0 * th.scalar("log_sigma_p"));
  double sd2 = std::exp(2.0 * th.scalar("log_sigma_d"));
  double P = std::exp(th.scalar("log_P"));
  double N0 = std::exp(th.scalar("log_N0"));
  double delta = std::exp(th.scalar("log_delta"));
  double sn = std::exp(th.scalar("log_sigma_n"));
  auto gamma_ld = [](double v, double shape, double scale) {
    return (shape - 1.0) * std::log(v) - v / scale -
           shape * std::log(scale) - std::lgamma(shape);
  };
  std::vector<double> hist;
  Vec raw = th.vector("past_raw");
  for (int j = 0; j < raw.size(); ++j) hist.push_back(sigmoid(raw[j]));
  for (int s = 0; s < T; ++s) {
    double e = z[1 + s];
    double eps = z[1 + T + s];
    ll += gamma_ld(e, 1.0 / sp2, sp2) + gamma_ld(eps, 1.0 / sd2, sd2);
    double xd = hist[hist.size() - tau];
    double xp = hist.back();
    double zt = P * xd * std::exp(-xd / N0) * e + xp * std::exp(-delta * eps);
    ll += log_normal(std::log(x[s]), std::log(zt), sn) - std::log(x[s]);
    hist.push_back(x[s]);
  }
  return ll;
}

// Expectation of softplus(s u) under u ~ N(0,1), by trapezoid quadrature.
double softplus_gauss_mean(double s) {
  double acc = 0.0;
  const double h = 1e-3;
  for (double u = -10.0; u <= 10.0; u += h) {
    acc += softplus(s * u) * std::exp(-0.5 * u * u) * h;
  }
  return acc / std::sqrt(2.0 * 3.14159265358979323846);
}

}  // namespace
}  // namespace reference

namespace {

Options small_opts(const std::string& name) {
  Options o;
  if (name == "circular") {
    o.set("dim_x", "4");
    o.set("hidden", "6");
  } else if (name == "pinwheel_hier") {
    o.set("components", "3");
    o.set("hidden", "4");
  } else if (name == "ica_laplace") {
    o.set("dim_z", "3");
    o.set("dim_x", "5");
  } else if (name == "mat_fact") {
    o.set("dim_z", "3");
    o.set("dim_x", "5");
  } else if (name == "oscillator") {
    o.set("steps", "4");
    o.set("obs_dim", "3");
    o.set("hidden", "4");
  } else if (name == "hodgkin_huxley") {
    o.set("steps", "6");
  } else if (name == "blowfly") {
    o.set("steps", "5");
  }
  return o;
}

const std::vector<std::string> kAllModels = {
    "toy_softplus", "linear_gaussian", "circular",  "pinwheel_hier",
    "ica_laplace",  "mat_fact",        "oscillator", "hodgkin_huxley",
    "blowfly"};

double batch_log_joint_sum(const GenerativeModel& m, const ParamVector& th,
                           const Mat& Z, const Mat& X) {
  return m.log_joint_values(th, Z, X).sum();
}

}  // namespace

TEST_CASE("model registry: every listed model constructs with sane shapes") {
  for (const auto& name : kAllModels) {
    CAPTURE(name);
    auto m = make_model(name, small_opts(name));
    CHECK(m->name() == name);
    CHECK(m->dim_z() >= 1);
    CHECK(m->dim_x() >= 1);
    ParamVector th = m->initial_theta(3);
    CHECK(th.size() == m->layout()->total_size());
    m->validate_theta(th);
  }
  CHECK_THROWS_WITH_AS(make_model("no_such_model", Options()),
                       doctest::Contains("unknown model"), Error);
  CHECK(model_names().find("blowfly") != std::string::npos);
}

TEST_CASE("sampling: shapes, support membership, and seed determinism") {
  for (const auto& name : kAllModels) {
    CAPTURE(name);
    auto m = make_model(name, small_opts(name));
    ParamVector th = m->initial_theta(11);
    SampleBatch s1 = m->sample(th, 99, 5);
    CHECK(s1.Z.rows() == m->dim_z());
    CHECK(s1.Z.cols() == 5);
    CHECK(s1.X.rows() == m->dim_x());
    CHECK(s1.X.cols() == 5);
    for (int i = 0; i < 5; ++i) {
      CAPTURE(i);
      CHECK(m->in_support(s1.Z.col(i), s1.X.col(i)));
    }
    SampleBatch s2 = m->sample(th, 99, 5);
    CHECK(s1.Z == s2.Z);
    CHECK(s1.X == s2.X);
    SampleBatch s3 = m->sample(th, 100, 5);
    CHECK(s1.Z != s3.Z);
  }
}

TEST_CASE("log joint matches a plain-loop reference implementation") {
  const double tol = 1e-9;
  for (const auto& name : kAllModels) {
    CAPTURE(name);
    Options opts = small_opts(name);
    auto m = make_model(name, opts);
    ParamVector th = m->initial_theta(5);
    SampleBatch s = m->sample(th, 17, 6);
    Vec got = m->log_joint_values(th, s.Z, s.X);
    for (int i = 0; i < 6; ++i) {
      CAPTURE(i);
      Vec z = s.Z.col(i), x = s.X.col(i);
      double want = 0.0;
      if (name == "toy_softplus")
        want = reference::toy_log_joint(th, z, x);
      else if (name == "linear_gaussian")
        want = reference::lin_gauss_log_joint(th, z, x);
      else if (name == "circular")
        want = reference::circular_log_joint(th, z, x);
      else if (name == "pinwheel_hier")
        want = reference::pinwheel_log_joint(th, z, x);
      else if (name == "ica_laplace")
        want = reference::ica_log_joint(th, z, x, 0.1);
      else if (name == "mat_fact")
        want = reference::mat_fact_log_joint(th, z, x);
      else if (name == "oscillator")
        want = reference::oscillator_log_joint(th, z, x, 4, 3);
      else if (name == "hodgkin_huxley") {
        // default input: a 10-unit step from floor(steps/10) = 0 onward
        Vec I = Vec::Constant(6, 10.0);
        want = reference::hh_log_joint(th, z, x, I, 0.05);
      } else if (name == "blowfly")
        want = reference::blowfly_log_joint(th, z, x);
      CHECK(std::abs(got[i] - want) <= tol * std::max(1.0, std::abs(want)));
    }
  }
}

TEST_CASE("log joint gradients agree with finite differences on every model") {
  for (const auto& name : kAllModels) {
    CAPTURE(name);
    auto m = make_model(name, small_opts(name));
    ParamVector th = m->initial_theta(21);
    SampleBatch s = m->sample(th, 23, 3);

    Tape t;
    Var theta = t.param(th.data());
    Var ll = m->log_joint_batch(t, theta, s.Z, s.X);
    Var total = t.vsum(ll);
    Vec grad = t.backward(total);

    auto f = [&](const Vec& v) {
      ParamVector tv(th.layout_ptr());
      tv.data() = v;
      return batch_log_joint_sum(*m, tv, s.Z, s.X);
    };
    Vec fd = testing::fd_grad(f, th.data(), 1e-5);
    CHECK(testing::max_rel_err(grad, fd) <= 1e-4);
  }
}

TEST_CASE("exponential-family split reconstructs the log joint") {
  for (const auto& name : kAllModels) {
    CAPTURE(name);
    auto m = make_model(name, small_opts(name));
    bool static_model = !m->is_dynamical();
    CHECK(m->has_exp_fam() == static_model);
    if (!m->has_exp_fam()) continue;
    ParamVector th = m->initial_theta(31);
    SampleBatch s = m->sample(th, 37, 20);
    Mat S = m->suff_stats_batch(s.X);
    CHECK(S.rows() == m->suff_dim());
    Tape t;
    Var theta = t.param(th.data());
    Mat eta = t.value(m->exp_fam_eta_batch(t, theta, s.Z));
    Mat psi = t.value(m->exp_fam_psi_batch(t, theta, s.Z));
    Vec ll = m->log_joint_values(th, s.Z, s.X);
    for (int i = 0; i < 20; ++i) {
      CAPTURE(i);
      double recon = eta.col(i).dot(S.col(i)) - psi(0, i);
      CHECK(std::abs(recon - ll[i]) <= 1e-10 * std::max(1.0, std::abs(ll[i])));
    }
    // single-draw API agrees with the batched one
    ExpFamParts parts = m->exp_fam_parts(th, s.Z.col(0));
    CHECK((parts.natural_params - Vec(eta.col(0))).cwiseAbs().maxCoeff() <=
          1e-12);
    CHECK(std::abs(parts.log_norm - psi(0, 0)) <= 1e-12);
  }
}

TEST_CASE("gaussian natural parameters: mean 2 and variance 4 map to "
          "[0.5, -0.125]") {
  Options o;
  o.set("dim_z", "1");
  o.set("dim_x", "1");
  auto m = make_model("linear_gaussian", o);
  ParamVector th(m->layout());
  th.set("W", Mat::Ones(1, 1));
  th.set("c", Vec::Zero(1));
  th.set_scalar("log_sigma_x", std::log(2.0));  // variance 4
  Mat Z = 2.0 * Mat::Ones(1, 1);                // mean = W z + c = 2
  Tape t;
  Var theta = t.param(th.data());
  Mat eta = t.value(m->exp_fam_eta_batch(t, theta, Z));
  CHECK(eta(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(eta(1, 0) == doctest::Approx(-0.125).epsilon(1e-12));
}

TEST_CASE("support screening returns -inf outside the support") {
  auto inf_check = [](double v) {
    CHECK(std::isinf(v));
    CHECK(v < 0.0);
  };
  {
    auto m = make_model("circular", small_opts("circular"));
    ParamVector th = m->initial_theta(1);
    Vec z(2), x = Vec::Zero(4);
    z << 0.5, 0.5;  // not on the unit circle
    inf_check(m->log_joint_value(th, z, x));
  }
  {
    auto m = make_model("pinwheel_hier", small_opts("pinwheel_hier"));
    ParamVector th = m->initial_theta(1);
    Vec z(3), x = Vec::Zero(2);
    z << 2.5, 0.0, 0.0;  // fractional component index
    inf_check(m->log_joint_value(th, z, x));
    z << 7.0, 0.0, 0.0;  // out of range
    inf_check(m->log_joint_value(th, z, x));
  }
  {
    auto m = make_model("mat_fact", small_opts("mat_fact"));
    ParamVector th = m->initial_theta(1);
    Vec z = Vec::Constant(3, 0.5), x = Vec::Zero(5);
    Vec bad = z;
    bad[0] = 1.0;  // latent must stay inside the open unit interval
    inf_check(m->log_joint_value(th, bad, x));
    Vec badx = x;
    badx[2] = 0.25;  // observations are binary
    inf_check(m->log_joint_value(th, z, badx));
  }
  {
    auto m = make_model("blowfly", small_opts("blowfly"));
    ParamVector th = m->initial_theta(1);
    SampleBatch s = m->sample(th, 3, 1);
    Vec z = s.Z.col(0), x = s.X.col(0);
    Vec bad = z;
    bad[0] = 0.5;  // delay must be a whole number of steps
    inf_check(m->log_joint_value(th, bad, x));
    bad = z;
    bad[2] = -0.1;  // noise multipliers are positive
    inf_check(m->log_joint_value(th, bad, x));
  }
}

TEST_CASE("pinned joint: standard bivariate latent at the origin with the "
          "observation on the mean") {
  auto m = make_model("toy_softplus", Options());
  ParamVector th(m->layout());
  Vec b(2);
  b << 1.0, 1.0;
  th.set("b", b);
  th.set_scalar("log_sigma_x", std::log(0.1));
  Vec z = Vec::Zero(2);
  Vec x(1);
  x[0] = std::log(2.0) - 2.0;  // softplus(0) - |b|^2
  double want = -1.5 * reference::kLog2Pi - std::log(0.1);
  CHECK(m->log_joint_value(th, z, x) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("pinned joint: indifferent binary model scores 4 log(1/2)") {
  Options o;
  o.set("dim_z", "2");
  o.set("dim_x", "4");
  auto m = make_model("mat_fact", o);
  ParamVector th(m->layout());
  th.set("log_W", Mat::Zero(4, 2));  // weights are exp(0) = 1
  th.set("b", Vec::Zero(4));
  Vec z = Vec::Constant(2, 0.5);  // logit(0.5) = 0 kills the weights
  Vec x(4);
  x << 0.0, 1.0, 1.0, 0.0;
  double want = 4.0 * std::log(0.5);
  CHECK(m->log_joint_value(th, z, x) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("penalties: values and gradients") {
  auto pin = make_model("pinwheel_hier", small_opts("pinwheel_hier"));
  auto mf = make_model("mat_fact", small_opts("mat_fact"));
  auto toy = make_model("toy_softplus", Options());
  CHECK(pin->has_penalty());
  CHECK(mf->has_penalty());
  CHECK_FALSE(toy->has_penalty());

  // pinned: unit weights make the shape/rate penalty -(0.9-1)*0 - 0.3*15
  {
    ParamVector th(mf->layout());
    th.set("log_W", Mat::Zero(5, 3));
    th.set("b", Vec::Zero(5));
    Tape t;
    Var theta = t.param(th.data());
    double got = t.value_scalar(mf->log_penalty(t, theta));
    CHECK(got == doctest::Approx(-0.3 * 15.0).epsilon(1e-12));
  }

  for (GenerativeModel* m : {pin.get(), mf.get()}) {
    CAPTURE(m->name());
    ParamVector th = m->initial_theta(47);
    Tape t;
    Var theta = t.param(th.data());
    Var p = m->log_penalty(t, theta);
    Vec grad = t.backward(p);
    auto f = [&](const Vec& v) {
      ParamVector tv(th.layout_ptr());
      tv.data() = v;
      Tape tt;
      Var tth = tt.param(tv.data());
      return tt.value_scalar(m->log_penalty(tt, tth));
    };
    Vec fd = testing::fd_grad(f, th.data(), 1e-5);
    CHECK(testing::max_rel_err(grad, fd) <= 1e-4);
  }
}

TEST_CASE("latent-space objective matches the joint on its parameterization") {
  {
    auto m = make_model("linear_gaussian", Options());
    CHECK(m->has_latent_objective());
    ParamVector th = m->initial_theta(3);
    SampleBatch s = m->sample(th, 5, 1);
    Vec u(2);
    u << 0.3, -0.8;
    Tape t;
    Var uv = t.param(u);
    double got = t.value_scalar(m->log_joint_latent(t, uv, th, s.X.col(0)));
    double want = m->log_joint_value(th, u, s.X.col(0));
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
    CHECK((m->latent_from_search(u) - u).norm() == 0.0);
  }
  {
    auto m = make_model("mat_fact", small_opts("mat_fact"));
    CHECK(m->has_latent_objective());
    ParamVector th = m->initial_theta(3);
    SampleBatch s = m->sample(th, 5, 1);
    Vec u(3);
    u << 0.4, -1.2, 2.0;
    Vec z = m->latent_from_search(u);
    for (int j = 0; j < 3; ++j) {
      CHECK(z[j] > 0.0);
      CHECK(z[j] < 1.0);
    }
    CHECK((m->search_from_latent(z) - u).cwiseAbs().maxCoeff() <= 1e-9);
    Tape t;
    Var uv = t.param(u);
    double got = t.value_scalar(m->log_joint_latent(t, uv, th, s.X.col(0)));
    double want = m->log_joint_value(th, z, s.X.col(0));
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("moment check: linear-gaussian sample mean and spread") {
  auto m = make_model("linear_gaussian", Options());
  ParamVector th = m->initial_theta(9);
  Mat W = th.matrix("W");
  Vec c = th.vector("c");
  Vec ls = th.vector("log_sigma_x");
  const int n = 100000;
  SampleBatch s = m->sample(th, 101, n);
  for (int j = 0; j < m->dim_x(); ++j) {
    double var = std::exp(2.0 * ls[j]) + W.row(j).squaredNorm();
    double mean = s.X.row(j).mean();
    double se = std::sqrt(var / n);
    CHECK(std::abs(mean - c[j]) <= 5.0 * se);
    double v = (s.X.row(j).array() - mean).square().sum() / (n - 1);
    CHECK(std::abs(v - var) <= 5.0 * var * std::sqrt(2.0 / (n - 1)));
  }
}

TEST_CASE("moment check: softplus observation mean against quadrature") {
  auto m = make_model("toy_softplus", Options());
  ParamVector th(m->layout());
  Vec b(2);
  b << 1.0, 1.0;
  th.set("b", b);
  th.set_scalar("log_sigma_x", std::log(0.1));
  const int n = 200000;
  SampleBatch s = m->sample(th, 51, n);
  // b.z is Normal(0, |b|), so E[x] = E[softplus(|b| u)] - |b|^2
  double want = reference::softplus_gauss_mean(b.norm()) - b.squaredNorm();
  double got = s.X.row(0).mean();
  CHECK(std::abs(got - want) <= 0.02);
}

TEST_CASE("pinwheel: a dominant logit routes every draw to that component") {
  auto m = make_model("pinwheel_hier", small_opts("pinwheel_hier"));
  ParamVector th = m->initial_theta(13);
  Vec logits = Vec::Zero(3);
  logits[1] = 30.0;
  th.set("logits", logits);
  SampleBatch s = m->sample(th, 7, 200);
  for (int i = 0; i < 200; ++i) CHECK(s.Z(0, i) == 1.0);
}

TEST_CASE("delay model: delays stay in range and follow the logits") {
  auto m = make_model("blowfly", small_opts("blowfly"));
  ParamVector th = m->initial_theta(29);
  SampleBatch s = m->sample(th, 43, 400);
  std::map<int, int> counts;
  for (int i = 0; i < 400; ++i) {
    int tau = static_cast<int>(s.Z(0, i));
    CHECK(tau >= 1);
    CHECK(tau <= 20);
    counts[tau]++;
  }
  // the canonical starting point concentrates delay mass at 8 steps
  int best = 0, best_tau = 0;
  for (auto& [tau, cnt] : counts)
    if (cnt > best) best = cnt, best_tau = tau;
  CHECK(best_tau == 8);
}

TEST_CASE("oscillator: zero noise reduces to the deterministic recursion") {
  Options o = small_opts("oscillator");
  auto m = make_model("oscillator", o);
  ParamVector th = m->initial_theta(3);
  th.set("log_sigma_z", Vec::Constant(2, -400.0));
  th.set("log_sigma_x", Vec::Constant(3, -400.0));
  Trajectory traj = m->simulate(th, 77, 4, Mat());
  Vec prev(2);
  prev << 1.0, 0.0;
  for (int s = 0; s < 4; ++s) {
    Vec want = reference::mlp(th.matrix("Wz1"), th.vector("bz1"),
                              th.matrix("Wz2"), th.vector("bz2"), prev);
    CHECK((Vec(traj.latents.row(s).transpose()) - want).norm() <= 1e-12);
    prev = traj.latents.row(s).transpose();
  }
}

TEST_CASE("membrane model: resting potential stays near the leak reversal") {
  Options o;
  o.set("steps", "200");
  o.set("current_amplitude", "0");
  o.set("init_jitter", "0");
  auto m = make_model("hodgkin_huxley", o);
  ParamVector th = m->initial_theta(1);
  Trajectory traj = m->simulate(th, 5, 200, Mat());
  double El = th.scalar("E_l");
  for (int s = 0; s < 200; ++s) {
    CHECK(traj.latents(s, 0) >= El - 10.0);
    CHECK(traj.latents(s, 0) <= El + 10.0);
  }
}

TEST_CASE("membrane model: runaway voltage raises an error naming the step") {
  Options o;
  o.set("steps", "10");
  o.set("current_amplitude", "1e7");
  o.set("current_start", "0");
  auto m = make_model("hodgkin_huxley", o);
  ParamVector th = m->initial_theta(2);
  CHECK_THROWS_WITH_AS(m->simulate(th, 3, 10, Mat()),
                       doctest::Contains("blew up at step"), Error);
}

TEST_CASE("trajectory flattening matches the sampling layout") {
  for (const auto& name : {std::string("oscillator"),
                           std::string("hodgkin_huxley"),
                           std::string("blowfly")}) {
    CAPTURE(name);
    auto m = make_model(name, small_opts(name));
    CHECK(m->is_dynamical());
    ParamVector th = m->initial_theta(61);
    Trajectory traj = m->simulate(th, 67, m->steps(), Mat());
    Vec z = m->flatten_latents(traj);
    Vec x = m->flatten_observations(traj);
    CHECK(z.size() == m->dim_z());
    CHECK(x.size() == m->dim_x());
    CHECK(m->in_support(z, x));
    CHECK(std::isfinite(m->log_joint_value(th, z, x)));
  }
}

TEST_CASE("oscillator: latent objective agrees with the plain-loop density") {
  auto m = make_model("oscillator", small_opts("oscillator"));
  CHECK(m->has_latent_objective());
  ParamVector th = m->initial_theta(9);
  SampleBatch sb = m->sample(th, 21, 1);
  Vec z = sb.Z.col(0), x = sb.X.col(0);

  Tape t;
  Var u = t.param(z);
  Var obj = m->log_joint_latent(t, u, th, x);
  CHECK(t.value_scalar(obj) ==
        doctest::Approx(reference::oscillator_log_joint(th, z, x, 4, 3))
            .epsilon(1e-10));

  Vec g = t.backward(obj);
  auto f = [&](const Vec& zz) { return m->log_joint_value(th, zz, x); };
  CHECK(testing::max_rel_err(g, testing::fd_grad(f, z)) <= 1e-6);
}

TEST_CASE("oscillator: one-step prediction matches a hand recursion") {
  auto m = make_model("oscillator", small_opts("oscillator"));
  CHECK(m->has_predict_step());
  ParamVector th = m->initial_theta(13);
  Mat z_prev(2, 3);
  z_prev << 1.0, 0.0, -0.4, 0.0, 1.0, 0.7;
  Mat z_next, x_next;
  m->predict_step(th, z_prev, Mat(), z_next, x_next);
  REQUIRE(z_next.rows() == 2);
  REQUIRE(z_next.cols() == 3);
  REQUIRE(x_next.rows() == 3);
  for (int i = 0; i < 3; ++i) {
    Vec zw = reference::mlp(th.matrix("Wz1"), th.vector("bz1"),
                            th.matrix("Wz2"), th.vector("bz2"),
                            Vec(z_prev.col(i)));
    Vec xw = reference::mlp(th.matrix("Wx1"), th.vector("bx1"),
                            th.matrix("Wx2"), th.vector("bx2"), zw);
    CHECK((Vec(z_next.col(i)) - zw).norm() <= 1e-12);
    CHECK((Vec(x_next.col(i)) - xw).norm() <= 1e-12);
  }

  auto lg = make_model("linear_gaussian", Options());
  CHECK_FALSE(lg->has_predict_step());
  Mat zn, xn;
  CHECK_THROWS_WITH_AS(lg->predict_step(lg->initial_theta(1), z_prev, Mat(),
                                        zn, xn),
                       doctest::Contains("one-step prediction"), Error);
}
