#pragma once

// Tape-building utilities shared by the model implementations. Everything
// here assumes the columns-as-samples layout.

#include <cmath>

#include "alws/models.hpp"
#include "alws/tape.hpp"

namespace alws {
namespace detail {

constexpr double kLog2Pi = 1.8378770664093453;

// Named slice of the parameter leaf, reshaped to its declared rows x cols.
inline Var slice_param(Tape& t, Var theta, const ParamLayout::Slice& s) {
  Var v = t.slice(theta, s.offset, s.size());
  if (s.cols != 1) v = t.reshape(v, s.rows, s.cols);
  return v;
}

// 1x1 node -> 1xn row.
inline Var broadcast_row(Tape& t, Var scalar, int n) {
  return t.matmul(scalar, t.constant(Mat::Ones(1, n)));
}

// dx1 node -> dxn (every column equal).
inline Var broadcast_col(Tape& t, Var col, int n) {
  return t.matmul(col, t.constant(Mat::Ones(1, n)));
}

// 1x1 node -> dxn.
inline Var broadcast_full(Tape& t, Var scalar, int d, int n) {
  return t.matmul(t.matmul(t.constant(Mat::Ones(d, 1)), scalar),
                  t.constant(Mat::Ones(1, n)));
}

// dxn -> 1xn column sums.
inline Var colsum(Tape& t, Var a) {
  int d = static_cast<int>(t.value(a).rows());
  return t.matmul(t.constant(Mat::Ones(1, d)), a);
}

// Stacks a list of equal-width blocks vertically via selector matmuls
// (the tape's concat is vector-only).
inline Var vstack(Tape& t, const std::vector<Var>& blocks) {
  int total = 0;
  for (Var b : blocks) total += static_cast<int>(t.value(b).rows());
  Var acc{nullptr, -1};
  int at = 0;
  for (Var b : blocks) {
    int r = static_cast<int>(t.value(b).rows());
    Mat sel = Mat::Zero(total, r);
    sel.block(at, 0, r, r) = Mat::Identity(r, r);
    Var piece = t.matmul(t.constant(sel), b);
    acc = (acc.id < 0) ? piece : t.add(acc, piece);
    at += r;
  }
  return acc;
}

// Per-column Gaussian log-density with one variance per row:
// resid is dxn, log_sigma is dx1. Returns 1xn.
inline Var gaussian_ll_rows_diag(Tape& t, Var resid, Var log_sigma) {
  int d = static_cast<int>(t.value(resid).rows());
  int n = static_cast<int>(t.value(resid).cols());
  Var inv_var = t.vexp(t.scale_c(-2.0, log_sigma));  // dx1
  Var quad = colsum(t, t.mul(t.square(resid), broadcast_col(t, inv_var, n)));
  Var sum_log_sigma = t.vsum(log_sigma);
  Var norm = broadcast_row(t, sum_log_sigma, n);
  Var out = t.scale_c(-0.5, quad);
  out = t.sub(out, norm);
  return t.add(out, t.constant(Mat::Constant(1, n, -0.5 * d * kLog2Pi)));
}

// Same with a single shared variance: log_sigma is 1x1.
inline Var gaussian_ll_rows_iso(Tape& t, Var resid, Var log_sigma) {
  int d = static_cast<int>(t.value(resid).rows());
  int n = static_cast<int>(t.value(resid).cols());
  Var inv_var = t.vexp(t.scale_c(-2.0, log_sigma));  // 1x1
  Var quad = colsum(t, t.scale(inv_var, t.square(resid)));
  Var norm = broadcast_row(t, t.scale_c(static_cast<double>(d), log_sigma), n);
  Var out = t.scale_c(-0.5, quad);
  out = t.sub(out, norm);
  return t.add(out, t.constant(Mat::Constant(1, n, -0.5 * d * kLog2Pi)));
}

// One-hidden-layer tanh network on the tape; input is a dxn node or const.
inline Var tape_mlp_tanh(Tape& t, Var W1, Var b1, Var W2, Var b2, Var input) {
  int n = static_cast<int>(t.value(input).cols());
  Var h = t.vtanh(t.add(t.matmul(W1, input), broadcast_col(t, b1, n)));
  return t.add(t.matmul(W2, h), broadcast_col(t, b2, n));
}

// Plain-value twin of tape_mlp_tanh, for the sampling path.
inline Mat mlp_tanh(const Mat& W1, const Vec& b1, const Mat& W2, const Vec& b2,
                    const Mat& in) {
  Mat h = (((W1 * in).colwise() + b1).array().tanh()).matrix();
  return (W2 * h).colwise() + b2;
}

inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Vec softmax(const Vec& logits) {
  Vec s = (logits.array() - logits.maxCoeff()).exp();
  return s / s.sum();
}

// Shape checks shared by every log_joint_batch implementation.
inline void check_batch(const GenerativeModel& m, const Mat& Z, const Mat& X) {
  check(Z.rows() == m.dim_z(),
        m.name() + ": latent batch has " + std::to_string(Z.rows()) +
            " rows, expected " + std::to_string(m.dim_z()));
  check(X.rows() == m.dim_x(),
        m.name() + ": observation batch has " + std::to_string(X.rows()) +
            " rows, expected " + std::to_string(m.dim_x()));
  check(Z.cols() == X.cols() && Z.cols() >= 1,
        m.name() + ": latent/observation counts differ");
}

}  // namespace detail
}  // namespace alws
