#pragma once

#include <memory>
#include <vector>

#include "alws/common.hpp"

namespace alws {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

// Reverse-mode tape over dense real arrays (scalars are 1x1, vectors n x 1).
// One differentiation leaf per tape (param); everything else is constant.
// Backward consumes the graph: a second backward on the same tape is an
// error, as is adding nodes afterwards.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // The single differentiation leaf. Must be created before use, once.
  Var param(const Vec& values);
  Var constant(const Mat& values);
  // Shares the storage instead of copying; useful for large fixed matrices.
  Var constant_ref(std::shared_ptr<const Mat> values);
  Var constant_scalar(double v);

  const Mat& value(Var v) const;
  double value_scalar(Var v) const;

  // Gradient of a scalar output w.r.t. the param leaf. Accumulation order
  // is fixed by descending topological index.
  Vec backward(Var output);

  int node_count() const { return static_cast<int>(nodes_.size()); }
  bool consumed() const { return consumed_; }

  // --- primitives -------------------------------------------------------
  Var add(Var a, Var b);       // same shape
  Var sub(Var a, Var b);       // same shape
  Var mul(Var a, Var b);       // elementwise, same shape
  Var scale(Var s, Var a);     // scalar node times array node
  Var scale_c(double c, Var a);
  Var add_c(double c, Var a);  // c added to every element
  Var matmul(Var a, Var b);
  Var vexp(Var a);
  Var vlog(Var a);
  Var vtanh(Var a);
  Var vsigmoid(Var a);
  Var vsoftplus(Var a);
  Var vrelu(Var a);
  // x / (e^x - 1) elementwise; the removable singularity at 0 is filled in.
  Var vexpm1_ratio(Var a);
  // log Gamma(x) elementwise; requires x > 0.
  Var vlgamma(Var a);
  Var vsum(Var a);                       // -> scalar
  Var slice(Var a, int offset, int n);   // vector nodes only
  Var reshape(Var a, int rows, int cols);
  Var concat(const std::vector<Var>& parts);  // vector nodes only
  // x = (L L^T)^{-1} b for a fixed lower-triangular factor L; gradients
  // flow through b only (L is frozen at its factorization).
  Var chol_solve(std::shared_ptr<const Mat> lower, Var b);

  // --- composites -------------------------------------------------------
  Var neg(Var a) { return scale_c(-1.0, a); }
  Var dot(Var a, Var b) { return vsum(mul(a, b)); }
  Var square(Var a) { return mul(a, a); }
  Var sqnorm(Var a) { return vsum(mul(a, a)); }
  Var mean(Var a);
  // log(sum(exp(a))) with a detached max shift; a must be a vector.
  Var logsumexp(Var a);

 private:
  enum class Op {
    kConst,
    kParam,
    kAdd,
    kSub,
    kMul,
    kScale,
    kScaleC,
    kAddC,
    kMatmul,
    kExp,
    kLog,
    kTanh,
    kSigmoid,
    kSoftplus,
    kRelu,
    kExpm1Ratio,
    kLgamma,
    kSum,
    kSlice,
    kReshape,
    kConcat,
    kCholSolve,
  };

  struct Node {
    Op op;
    Mat value;
    std::shared_ptr<const Mat> ref;      // kConst via constant_ref: aliased value
    std::shared_ptr<const Mat> factor;   // kCholSolve: frozen lower factor
    std::vector<int> parents;
    double c = 0.0;                      // kScaleC / kAddC payload
    int i0 = 0, i1 = 0;                  // kSlice offset/len, kReshape rows/cols
    Mat grad;
    bool has_grad = false;
  };

  static const char* op_name(Op op);
  const Mat& node_value(int id) const;
  int push(Node&& n, const char* what);
  void check_alive(const char* what) const;
  bool needs_grad(int id) const;
  void accumulate(int id, const Mat& g);

  std::vector<Node> nodes_;
  int param_id_ = -1;
  bool consumed_ = false;
};

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(double c, Var a);

// Gradient of (vector_output . cotangent) w.r.t. params. The builder gets a
// fresh tape and the param leaf and must return a vector-shaped node.
template <class Fn>
Vec jvp_dot(Fn&& build_vector_output, const Vec& params, const Vec& cotangent) {
  Tape tape;
  Var theta = tape.param(params);
  Var out = build_vector_output(tape, theta);
  const Mat& v = tape.value(out);
  check(v.cols() == 1 && v.rows() == cotangent.size(),
        "jvp_dot: output length does not match cotangent length");
  Var c = tape.constant(cotangent);
  return tape.backward(tape.dot(out, c));
}

}  // namespace alws
