#include "alws/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <json.hpp>

namespace alws {

Mat pairwise_sqdist(const Mat& A, const Mat& B) {
  check(A.rows() == B.rows(), "pairwise_sqdist: dimension mismatch");
  Vec sa = A.colwise().squaredNorm();
  Vec sb = B.colwise().squaredNorm();
  Mat D = -2.0 * (A.transpose() * B);
  D.colwise() += sa;
  D.rowwise() += sb.transpose();
  return D.cwiseMax(0.0);
}

Mat pairwise_sqdist(const Mat& X) {
  Mat G = X.transpose() * X;
  G = 0.5 * (G + G.transpose()).eval();
  Vec s = G.diagonal();
  Mat D = -2.0 * G;
  D.colwise() += s;
  D.rowwise() += s.transpose();
  D.diagonal().setZero();
  return D.cwiseMax(0.0);
}

FeatureMap FeatureMap::identity() { return FeatureMap{}; }

FeatureMap FeatureMap::projection(int d_out, int d_x, Rng& rng, bool batchnorm) {
  check(d_out >= 1 && d_x >= 1, "projection: dimensions must be positive");
  FeatureMap fm;
  fm.kind = batchnorm ? Kind::projection_batchnorm : Kind::projection;
  fm.weights = Mat(d_out, d_x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_x));
  for (int i = 0; i < fm.weights.size(); ++i) fm.weights.data()[i] = scale * rng.normal();
  fm.running_mean = Vec::Zero(d_out);
  fm.running_var = Vec::Ones(d_out);
  return fm;
}

int FeatureMap::out_dim(int d_x) const {
  return kind == Kind::identity ? d_x : static_cast<int>(weights.rows());
}

Mat FeatureMap::apply(const Mat& X) const {
  switch (kind) {
    case Kind::identity:
      return X;
    case Kind::projection:
      check(weights.cols() == X.rows(), "feature map: input dimension mismatch");
      return weights * X;
    case Kind::projection_batchnorm: {
      check(weights.cols() == X.rows(), "feature map: input dimension mismatch");
      Mat P = weights * X;
      Vec inv_sd = (running_var.array() + epsilon).sqrt().inverse();
      P.colwise() -= running_mean;
      P.array().colwise() *= inv_sd.array();
      return P;
    }
  }
  fail("feature map: unknown variant");
}

void FeatureMap::update_stats(const Mat& X) {
  if (kind != Kind::projection_batchnorm) return;
  check(X.cols() >= 2, "batchnorm update needs at least 2 samples");
  Mat P = weights * X;
  Vec mean = P.rowwise().mean();
  Mat centered = P.colwise() - mean;
  Vec var = centered.array().square().rowwise().mean();
  running_mean = (1.0 - momentum) * running_mean + momentum * mean;
  running_var = (1.0 - momentum) * running_var + momentum * var;
  check((running_var.array() > 0).all(), "batchnorm variance collapsed to zero");
}

double KernelParams::bandwidth() const { return std::exp(log_bandwidth); }

double kernel_eval(const KernelParams& kp, const Vec& x, const Vec& y) {
  check(x.size() == y.size(), "kernel_eval: dimension mismatch");
  Vec fx = kp.feature_map.apply(x);
  Vec fy = kp.feature_map.apply(y);
  double s2 = kp.bandwidth() * kp.bandwidth();
  return std::exp(-0.5 * (fx - fy).squaredNorm() / s2);
}

Mat kernel_gram(const KernelParams& kp, const Mat& X) {
  check(X.cols() >= 1, "kernel_gram: need at least one observation");
  Mat F = kp.feature_map.apply(X);
  double s2 = kp.bandwidth() * kp.bandwidth();
  return (pairwise_sqdist(F) * (-0.5 / s2)).array().exp();
}

Mat kernel_cross(const KernelParams& kp, const Mat& X, const Mat& Xs) {
  Mat F = kp.feature_map.apply(X);
  Mat Fs = kp.feature_map.apply(Xs);
  double s2 = kp.bandwidth() * kp.bandwidth();
  return (pairwise_sqdist(F, Fs) * (-0.5 / s2)).array().exp();
}

Vec kernel_cross(const KernelParams& kp, const Mat& X, const Vec& xs) {
  return kernel_cross(kp, X, Mat(xs)).col(0);
}

double median_heuristic(const KernelParams& kp, const Mat& X) {
  const int n = static_cast<int>(X.cols());
  check(n >= 2, "median_heuristic: need at least two points");
  Mat D = pairwise_sqdist(kp.feature_map.apply(X));
  std::vector<double> d;
  d.reserve(static_cast<size_t>(n) * (n - 1) / 2);
  for (int j = 1; j < n; ++j)
    for (int i = 0; i < j; ++i) d.push_back(std::sqrt(D(i, j)));
  std::sort(d.begin(), d.end());
  const size_t m = d.size();
  double med = (m % 2 == 1) ? d[m / 2] : 0.5 * (d[m / 2 - 1] + d[m / 2]);
  check(med > 0.0, "median_heuristic: median distance is zero");
  return med;
}

std::string kernel_params_to_json(const KernelParams& kp) {
  nlohmann::json j;
  j["log_bandwidth"] = kp.log_bandwidth;
  const FeatureMap& fm = kp.feature_map;
  switch (fm.kind) {
    case FeatureMap::Kind::identity:
      j["feature_map"]["kind"] = "identity";
      break;
    case FeatureMap::Kind::projection:
      j["feature_map"]["kind"] = "projection";
      break;
    case FeatureMap::Kind::projection_batchnorm:
      j["feature_map"]["kind"] = "projection_batchnorm";
      break;
  }
  if (fm.kind != FeatureMap::Kind::identity) {
    j["feature_map"]["rows"] = fm.weights.rows();
    j["feature_map"]["cols"] = fm.weights.cols();
    j["feature_map"]["weights"] =
        std::vector<double>(fm.weights.data(), fm.weights.data() + fm.weights.size());
  }
  if (fm.kind == FeatureMap::Kind::projection_batchnorm) {
    j["feature_map"]["running_mean"] = std::vector<double>(
        fm.running_mean.data(), fm.running_mean.data() + fm.running_mean.size());
    j["feature_map"]["running_var"] = std::vector<double>(
        fm.running_var.data(), fm.running_var.data() + fm.running_var.size());
    j["feature_map"]["epsilon"] = fm.epsilon;
    j["feature_map"]["momentum"] = fm.momentum;
  }
  return j.dump();
}

KernelParams kernel_params_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  KernelParams kp;
  kp.log_bandwidth = j.at("log_bandwidth").get<double>();
  const auto& f = j.at("feature_map");
  std::string kind = f.at("kind").get<std::string>();
  if (kind == "identity") {
    kp.feature_map.kind = FeatureMap::Kind::identity;
    return kp;
  }
  kp.feature_map.kind = kind == "projection" ? FeatureMap::Kind::projection
                                             : FeatureMap::Kind::projection_batchnorm;
  int rows = f.at("rows").get<int>();
  int cols = f.at("cols").get<int>();
  auto w = f.at("weights").get<std::vector<double>>();
  check(static_cast<int>(w.size()) == rows * cols, "kernel json: weight size mismatch");
  kp.feature_map.weights = Eigen::Map<const Mat>(w.data(), rows, cols);
  kp.feature_map.running_mean = Vec::Zero(rows);
  kp.feature_map.running_var = Vec::Ones(rows);
  if (kp.feature_map.kind == FeatureMap::Kind::projection_batchnorm) {
    auto rm = f.at("running_mean").get<std::vector<double>>();
    auto rv = f.at("running_var").get<std::vector<double>>();
    kp.feature_map.running_mean = Eigen::Map<const Vec>(rm.data(), rm.size());
    kp.feature_map.running_var = Eigen::Map<const Vec>(rv.data(), rv.size());
    kp.feature_map.epsilon = f.at("epsilon").get<double>();
    kp.feature_map.momentum = f.at("momentum").get<double>();
  }
  return kp;
}

}  // namespace alws
