#include "alws/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "alws/rng.hpp"

namespace alws {

namespace {

// Paired h-statistic over precomputed Gram blocks. Summing each h term
// before accumulating keeps mmd2(X, X) at exactly zero.
double paired_stat(const Mat& Kxx, const Mat& Kyy, const Mat& Kxy) {
  const int n = static_cast<int>(Kxx.rows());
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      acc += Kxx(i, j) + Kyy(i, j) - Kxy(i, j) - Kxy(j, i);
    }
  return acc / (static_cast<double>(n) * (n - 1));
}

double off_diagonal_mean(const Mat& K) {
  const int n = static_cast<int>(K.rows());
  return (K.sum() - K.trace()) / (static_cast<double>(n) * (n - 1));
}

double three_term_stat(const Mat& Kxx, const Mat& Kyy, const Mat& Kxy) {
  return off_diagonal_mean(Kxx) + off_diagonal_mean(Kyy) -
         2.0 * Kxy.mean();
}

Mat gram_from_fn(const Mat& A, const Mat& B, const KernelFn& k) {
  Mat K(A.cols(), B.cols());
  for (int j = 0; j < B.cols(); ++j)
    for (int i = 0; i < A.cols(); ++i) K(i, j) = k(A.col(i), B.col(j));
  return K;
}

void check_sizes(const Mat& X, const Mat& Y) {
  check(X.rows() == Y.rows(), "mmd2: sample dimensions differ");
  check(X.cols() >= 2 && Y.cols() >= 2,
        "mmd2: need at least two points per set");
}

double stat_from_grams(const Mat& Kxx, const Mat& Kyy, const Mat& Kxy) {
  if (Kxx.rows() == Kyy.rows()) return paired_stat(Kxx, Kyy, Kxy);
  return three_term_stat(Kxx, Kyy, Kxy);
}

// Gram lookup under bootstrap index vectors.
Mat index_gram(const Mat& K, const std::vector<int>& I,
               const std::vector<int>& J) {
  Mat out(I.size(), J.size());
  for (size_t j = 0; j < J.size(); ++j)
    for (size_t i = 0; i < I.size(); ++i) out(i, j) = K(I[i], J[j]);
  return out;
}

std::vector<int> resample_indices(Rng& rng, int n) {
  std::vector<int> idx(n);
  for (int& v : idx) v = rng.uniform_int(n);
  return idx;
}

}  // namespace

double mmd2_unbiased_stat(const Mat& X, const Mat& Y, const KernelFn& k) {
  check_sizes(X, Y);
  return stat_from_grams(gram_from_fn(X, X, k), gram_from_fn(Y, Y, k),
                         gram_from_fn(X, Y, k));
}

MMDResult mmd2_unbiased(const Mat& X, const Mat& Y, const KernelParams& kp) {
  check_sizes(X, Y);
  const int n = static_cast<int>(X.cols());
  const int m = static_cast<int>(Y.cols());
  // One pooled Gram keeps every block on the same floating-point path, so
  // identical samples cancel exactly in the paired statistic.
  Mat pooled(X.rows(), n + m);
  pooled << X, Y;
  const Mat K = kernel_gram(kp, pooled);
  MMDResult out;
  out.mmd2 = stat_from_grams(K.topLeftCorner(n, n),
                             K.bottomRightCorner(m, m), K.block(0, n, n, m));
  out.n_x = n;
  out.n_y = m;
  out.kernel = kp;
  return out;
}

KernelParams mmd_median_kernel(const Mat& X, const Mat& Y) {
  check(X.rows() == Y.rows(), "mmd2: sample dimensions differ");
  Mat pooled(X.rows(), X.cols() + Y.cols());
  pooled << X, Y;
  KernelParams kp;
  kp.log_bandwidth = std::log(median_heuristic(kp, pooled));
  return kp;
}

MMDComparison mmd_compare(const Mat& data, const Mat& A, const Mat& B,
                          const KernelParams& kp, int resamples,
                          std::uint64_t seed) {
  check(resamples >= 1, "mmd_compare: resamples must be positive");
  MMDComparison out;
  out.versus_a = mmd2_unbiased(data, A, kp);
  out.versus_b = mmd2_unbiased(data, B, kp);
  out.resamples = resamples;

  const Mat Kdd = kernel_gram(kp, data);
  const Mat Kaa = kernel_gram(kp, A);
  const Mat Kbb = kernel_gram(kp, B);
  const Mat Kda = kernel_cross(kp, data, A);
  const Mat Kdb = kernel_cross(kp, data, B);

  const auto delta_for =
      [&](const std::vector<int>& id, const std::vector<int>& ia,
          const std::vector<int>& ib) {
        const Mat Kdd_s = index_gram(Kdd, id, id);
        const double vs_a =
            three_term_stat(Kdd_s, index_gram(Kaa, ia, ia),
                            index_gram(Kda, id, ia));
        const double vs_b =
            three_term_stat(Kdd_s, index_gram(Kbb, ib, ib),
                            index_gram(Kdb, id, ib));
        return vs_b - vs_a;
      };

  std::vector<int> all_d(data.cols()), all_a(A.cols()), all_b(B.cols());
  for (int i = 0; i < data.cols(); ++i) all_d[i] = i;
  for (int i = 0; i < A.cols(); ++i) all_a[i] = i;
  for (int i = 0; i < B.cols(); ++i) all_b[i] = i;
  out.delta = delta_for(all_d, all_a, all_b);

  Rng rng(seed);
  int at_or_below_zero = 0;
  for (int r = 0; r < resamples; ++r) {
    const auto id = resample_indices(rng, static_cast<int>(data.cols()));
    const auto ia = resample_indices(rng, static_cast<int>(A.cols()));
    const auto ib = resample_indices(rng, static_cast<int>(B.cols()));
    if (delta_for(id, ia, ib) <= 0.0) ++at_or_below_zero;
  }
  out.bootstrap_p = (1.0 + at_or_below_zero) / (resamples + 1.0);
  return out;
}

double cosine(const Vec& a, const Vec& b) {
  check(a.size() == b.size(), "cosine: vectors differ in size");
  const double na = a.norm();
  const double nb = b.norm();
  check(na > 0.0 && nb > 0.0, "cosine: zero vector");
  return a.dot(b) / (na * nb);
}

namespace {

double pearson(const Vec& u, const Vec& v) {
  const double mu = u.mean();
  const double mv = v.mean();
  const Vec du = u.array() - mu;
  const Vec dv = v.array() - mv;
  const double su = du.norm();
  const double sv = dv.norm();
  check(su > 0.0 && sv > 0.0, "basis_match: constant column");
  return du.dot(dv) / (su * sv);
}

}  // namespace

BasisMatch basis_match(const Mat& W_true, const Mat& W_est) {
  check(W_true.rows() == W_est.rows() && W_true.cols() == W_est.cols(),
        "basis_match: bases differ in shape");
  const int k = static_cast<int>(W_true.cols());
  check(k >= 1, "basis_match: empty basis");

  Mat C(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      C(i, j) = pearson(W_true.col(i), W_est.col(j));

  struct Pair {
    double abs_corr;
    int i, j;
  };
  std::vector<Pair> pairs;
  pairs.reserve(k * k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) pairs.push_back({std::abs(C(i, j)), i, j});
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const Pair& a, const Pair& b) {
                     return a.abs_corr > b.abs_corr;
                   });

  BasisMatch out;
  out.permutation.assign(k, -1);
  out.signs.assign(k, 0);
  std::vector<bool> est_used(k, false);
  int assigned = 0;
  for (const Pair& p : pairs) {
    if (out.permutation[p.i] != -1 || est_used[p.j]) continue;
    out.permutation[p.i] = p.j;
    out.signs[p.i] = C(p.i, p.j) < 0.0 ? -1 : 1;
    est_used[p.j] = true;
    out.mean_abs_corr += p.abs_corr;
    if (++assigned == k) break;
  }
  out.mean_abs_corr /= k;
  return out;
}

double traj_mse(const Trajectory& pred, const Trajectory& ref) {
  check(pred.observations.rows() == ref.observations.rows() &&
            pred.observations.cols() == ref.observations.cols(),
        "traj_mse: trajectories differ in shape");
  check(pred.observations.size() > 0, "traj_mse: empty trajectories");
  return (pred.observations - ref.observations).squaredNorm() /
         pred.observations.size();
}

}  // namespace alws
