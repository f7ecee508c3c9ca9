#include "alws/tape.hpp"

#include <cmath>
#include <string>

namespace alws {

namespace {

std::string shape_of(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// x / (e^x - 1); near zero the series 1 - x/2 + x^2/12 avoids 0/0.
double expm1_ratio(double x) {
  if (std::abs(x) < 1e-5) return 1.0 - 0.5 * x + x * x / 12.0;
  if (x > 700.0) return 0.0;
  return x / std::expm1(x);
}

double expm1_ratio_deriv(double x) {
  if (std::abs(x) < 1e-5) return -0.5 + x / 6.0;
  if (x > 700.0) return 0.0;
  const double em = std::expm1(x);
  return (em - x * (em + 1.0)) / (em * em);
}

// Recurrence lifts the argument to >= 10, then the asymptotic series in
// 1/x^2 (terms through x^-8) is accurate to ~1e-13.
double digamma(double x) {
  double acc = 0.0;
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  const double tail =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)));
  return acc + std::log(x) - 0.5 * inv - tail;
}

}  // namespace

const char* Tape::op_name(Op op) {
  switch (op) {
    case Op::kConst: return "const";
    case Op::kParam: return "param";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kScaleC: return "scale_c";
    case Op::kAddC: return "add_c";
    case Op::kMatmul: return "matmul";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftplus: return "softplus";
    case Op::kRelu: return "relu";
    case Op::kExpm1Ratio: return "expm1_ratio";
    case Op::kLgamma: return "lgamma";
    case Op::kSum: return "sum";
    case Op::kSlice: return "slice";
    case Op::kReshape: return "reshape";
    case Op::kConcat: return "concat";
    case Op::kCholSolve: return "chol_solve";
  }
  return "?";
}

void Tape::check_alive(const char* what) const {
  check(!consumed_, std::string(what) + ": tape already consumed by backward");
}

const Mat& Tape::node_value(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return n.ref ? *n.ref : n.value;
}

int Tape::push(Node&& n, const char* what) {
  const Mat& v = n.ref ? *n.ref : n.value;
  if (!v.allFinite()) {
    std::string shapes;
    for (int p : n.parents) shapes += " " + shape_of(node_value(p));
    fail(std::string("non-finite value produced by '") + what +
         "' with operand shapes:" + (shapes.empty() ? " (leaf)" : shapes));
  }
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::param(const Vec& values) {
  check_alive("param");
  check(param_id_ < 0, "param: tape already has a differentiation leaf");
  Node n;
  n.op = Op::kParam;
  n.value = values;
  param_id_ = push(std::move(n), "param");
  return {this, param_id_};
}

Var Tape::constant(const Mat& values) {
  check_alive("constant");
  Node n;
  n.op = Op::kConst;
  n.value = values;
  return {this, push(std::move(n), "const")};
}

Var Tape::constant_ref(std::shared_ptr<const Mat> values) {
  check_alive("constant_ref");
  check(values != nullptr, "constant_ref: null matrix");
  Node n;
  n.op = Op::kConst;
  n.ref = std::move(values);
  return {this, push(std::move(n), "const")};
}

Var Tape::constant_scalar(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return constant(m);
}

const Mat& Tape::value(Var v) const {
  check(v.tape == this && v.id >= 0 && v.id < node_count(), "value: bad handle");
  return node_value(v.id);
}

double Tape::value_scalar(Var v) const {
  const Mat& m = value(v);
  check(m.size() == 1, "value_scalar: node is not scalar");
  return m(0, 0);
}

namespace {
void check_same_tape(const Tape* t, Var a, const char* what) {
  check(a.tape == t, std::string(what) + ": operands from different tapes");
}
}  // namespace

Var Tape::add(Var a, Var b) {
  check_alive("add");
  check_same_tape(this, a, "add");
  check_same_tape(this, b, "add");
  const Mat& va = node_value(a.id);
  const Mat& vb = node_value(b.id);
  check(va.rows() == vb.rows() && va.cols() == vb.cols(),
        "add: shape mismatch " + shape_of(va) + " vs " + shape_of(vb));
  Node n;
  n.op = Op::kAdd;
  n.parents = {a.id, b.id};
  n.value = va + vb;
  return {this, push(std::move(n), "add")};
}

Var Tape::sub(Var a, Var b) {
  check_alive("sub");
  const Mat& va = node_value(a.id);
  const Mat& vb = node_value(b.id);
  check(va.rows() == vb.rows() && va.cols() == vb.cols(),
        "sub: shape mismatch " + shape_of(va) + " vs " + shape_of(vb));
  Node n;
  n.op = Op::kSub;
  n.parents = {a.id, b.id};
  n.value = va - vb;
  return {this, push(std::move(n), "sub")};
}

Var Tape::mul(Var a, Var b) {
  check_alive("mul");
  const Mat& va = node_value(a.id);
  const Mat& vb = node_value(b.id);
  check(va.rows() == vb.rows() && va.cols() == vb.cols(),
        "mul: shape mismatch " + shape_of(va) + " vs " + shape_of(vb));
  Node n;
  n.op = Op::kMul;
  n.parents = {a.id, b.id};
  n.value = va.cwiseProduct(vb);
  return {this, push(std::move(n), "mul")};
}

Var Tape::scale(Var s, Var a) {
  check_alive("scale");
  const Mat& vs = node_value(s.id);
  check(vs.size() == 1, "scale: first operand must be scalar, got " + shape_of(vs));
  Node n;
  n.op = Op::kScale;
  n.parents = {s.id, a.id};
  n.value = vs(0, 0) * node_value(a.id);
  return {this, push(std::move(n), "scale")};
}

Var Tape::scale_c(double c, Var a) {
  check_alive("scale_c");
  Node n;
  n.op = Op::kScaleC;
  n.parents = {a.id};
  n.c = c;
  n.value = c * node_value(a.id);
  return {this, push(std::move(n), "scale_c")};
}

Var Tape::add_c(double c, Var a) {
  check_alive("add_c");
  Node n;
  n.op = Op::kAddC;
  n.parents = {a.id};
  n.c = c;
  n.value = node_value(a.id).array() + c;
  return {this, push(std::move(n), "add_c")};
}

Var Tape::matmul(Var a, Var b) {
  check_alive("matmul");
  const Mat& va = node_value(a.id);
  const Mat& vb = node_value(b.id);
  check(va.cols() == vb.rows(),
        "matmul: inner dimension mismatch " + shape_of(va) + " * " + shape_of(vb));
  Node n;
  n.op = Op::kMatmul;
  n.parents = {a.id, b.id};
  n.value = va * vb;
  return {this, push(std::move(n), "matmul")};
}

#define ALWS_ELEMENTWISE(name, opk, fwd)                  \
  Var Tape::name(Var a) {                                 \
    check_alive(#name);                                   \
    Node n;                                               \
    n.op = opk;                                           \
    n.parents = {a.id};                                   \
    n.value = fwd;                                        \
    return {this, push(std::move(n), #name)};             \
  }

ALWS_ELEMENTWISE(vexp, Op::kExp, node_value(a.id).array().exp().matrix())
ALWS_ELEMENTWISE(vlog, Op::kLog, node_value(a.id).array().log().matrix())
ALWS_ELEMENTWISE(vtanh, Op::kTanh, node_value(a.id).array().tanh().matrix())
ALWS_ELEMENTWISE(vsigmoid, Op::kSigmoid,
                 node_value(a.id).unaryExpr([](double x) { return stable_sigmoid(x); }))
ALWS_ELEMENTWISE(vsoftplus, Op::kSoftplus,
                 node_value(a.id).unaryExpr([](double x) { return stable_softplus(x); }))
ALWS_ELEMENTWISE(vrelu, Op::kRelu, node_value(a.id).cwiseMax(0.0))
ALWS_ELEMENTWISE(vexpm1_ratio, Op::kExpm1Ratio,
                 node_value(a.id).unaryExpr([](double x) { return expm1_ratio(x); }))

#undef ALWS_ELEMENTWISE

Var Tape::vlgamma(Var a) {
  check_alive("lgamma");
  const Mat& va = node_value(a.id);
  check(va.size() == 0 || va.minCoeff() > 0.0,
        "lgamma: arguments must be positive");
  Node n;
  n.op = Op::kLgamma;
  n.parents = {a.id};
  n.value = va.unaryExpr([](double x) { return std::lgamma(x); });
  return {this, push(std::move(n), "lgamma")};
}

Var Tape::vsum(Var a) {
  check_alive("sum");
  Node n;
  n.op = Op::kSum;
  n.parents = {a.id};
  n.value = Mat::Constant(1, 1, node_value(a.id).sum());
  return {this, push(std::move(n), "sum")};
}

Var Tape::slice(Var a, int offset, int len) {
  check_alive("slice");
  const Mat& va = node_value(a.id);
  check(va.cols() == 1, "slice: only vector nodes can be sliced, got " + shape_of(va));
  check(offset >= 0 && len >= 1 && offset + len <= va.rows(),
        "slice: range [" + std::to_string(offset) + ", " +
            std::to_string(offset + len) + ") out of bounds for " + shape_of(va));
  Node n;
  n.op = Op::kSlice;
  n.parents = {a.id};
  n.i0 = offset;
  n.i1 = len;
  n.value = va.block(offset, 0, len, 1);
  return {this, push(std::move(n), "slice")};
}

Var Tape::reshape(Var a, int rows, int cols) {
  check_alive("reshape");
  const Mat& va = node_value(a.id);
  check(rows * cols == va.size(),
        "reshape: element count mismatch " + shape_of(va) + " -> " +
            std::to_string(rows) + "x" + std::to_string(cols));
  Node n;
  n.op = Op::kReshape;
  n.parents = {a.id};
  n.i0 = rows;
  n.i1 = cols;
  n.value = Eigen::Map<const Mat>(va.data(), rows, cols);
  return {this, push(std::move(n), "reshape")};
}

Var Tape::concat(const std::vector<Var>& parts) {
  check_alive("concat");
  check(!parts.empty(), "concat: no operands");
  int total = 0;
  for (Var p : parts) {
    const Mat& v = node_value(p.id);
    check(v.cols() == 1, "concat: only vector nodes, got " + shape_of(v));
    total += static_cast<int>(v.rows());
  }
  Node n;
  n.op = Op::kConcat;
  n.value = Mat(total, 1);
  int at = 0;
  for (Var p : parts) {
    const Mat& v = node_value(p.id);
    n.value.block(at, 0, v.rows(), 1) = v;
    at += static_cast<int>(v.rows());
    n.parents.push_back(p.id);
  }
  return {this, push(std::move(n), "concat")};
}

Var Tape::chol_solve(std::shared_ptr<const Mat> lower, Var b) {
  check_alive("chol_solve");
  check(lower != nullptr, "chol_solve: null factor");
  const Mat& vb = node_value(b.id);
  check(lower->rows() == lower->cols() && lower->rows() == vb.rows(),
        "chol_solve: factor " + shape_of(*lower) + " incompatible with rhs " +
            shape_of(vb));
  Node n;
  n.op = Op::kCholSolve;
  n.parents = {b.id};
  n.factor = lower;
  Mat y = lower->triangularView<Eigen::Lower>().solve(vb);
  n.value = lower->transpose().triangularView<Eigen::Upper>().solve(y);
  return {this, push(std::move(n), "chol_solve")};
}

Var Tape::mean(Var a) {
  const Mat& v = node_value(a.id);
  return scale_c(1.0 / static_cast<double>(v.size()), vsum(a));
}

Var Tape::logsumexp(Var a) {
  const Mat& v = node_value(a.id);
  check(v.cols() == 1, "logsumexp: vector nodes only");
  double m = v.maxCoeff();  // detached shift; does not affect the derivative
  Var shifted = add_c(-m, a);
  return add_c(m, vlog(vsum(vexp(shifted))));
}

bool Tape::needs_grad(int id) const {
  return nodes_[static_cast<size_t>(id)].op != Op::kConst;
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.op == Op::kConst) return;  // only the leaf's gradient is ever read
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

Vec Tape::backward(Var output) {
  check(output.tape == this, "backward: output from a different tape");
  check(!consumed_, "backward: graph already consumed; rebuild the tape");
  check(param_id_ >= 0, "backward: tape has no differentiation leaf");
  const Mat& out_val = node_value(output.id);
  check(out_val.size() == 1, "backward: output must be scalar, got " + shape_of(out_val));
  consumed_ = true;

  accumulate(output.id, Mat::Constant(1, 1, 1.0));

  for (int id = output.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad) continue;
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
        break;
      case Op::kAdd:
        accumulate(n.parents[0], g);
        accumulate(n.parents[1], g);
        break;
      case Op::kSub:
        accumulate(n.parents[0], g);
        accumulate(n.parents[1], -g);
        break;
      case Op::kMul:
        if (needs_grad(n.parents[0]))
          accumulate(n.parents[0], g.cwiseProduct(node_value(n.parents[1])));
        if (needs_grad(n.parents[1]))
          accumulate(n.parents[1], g.cwiseProduct(node_value(n.parents[0])));
        break;
      case Op::kScale: {
        const Mat& s = node_value(n.parents[0]);
        const Mat& a = node_value(n.parents[1]);
        if (needs_grad(n.parents[0]))
          accumulate(n.parents[0], Mat::Constant(1, 1, g.cwiseProduct(a).sum()));
        if (needs_grad(n.parents[1])) accumulate(n.parents[1], s(0, 0) * g);
        break;
      }
      case Op::kScaleC:
        accumulate(n.parents[0], n.c * g);
        break;
      case Op::kAddC:
        accumulate(n.parents[0], g);
        break;
      case Op::kMatmul: {
        const Mat& a = node_value(n.parents[0]);
        const Mat& b = node_value(n.parents[1]);
        if (needs_grad(n.parents[0])) accumulate(n.parents[0], g * b.transpose());
        if (needs_grad(n.parents[1])) accumulate(n.parents[1], a.transpose() * g);
        break;
      }
      case Op::kExp:
        accumulate(n.parents[0], g.cwiseProduct(n.value));
        break;
      case Op::kLog:
        accumulate(n.parents[0], g.cwiseQuotient(node_value(n.parents[0])));
        break;
      case Op::kTanh:
        accumulate(n.parents[0],
                   g.cwiseProduct((1.0 - n.value.array().square()).matrix()));
        break;
      case Op::kSigmoid:
        accumulate(n.parents[0],
                   g.cwiseProduct(n.value.cwiseProduct(
                       (1.0 - n.value.array()).matrix())));
        break;
      case Op::kSoftplus:
        accumulate(n.parents[0],
                   g.cwiseProduct(node_value(n.parents[0])
                                      .unaryExpr([](double x) {
                                        return stable_sigmoid(x);
                                      })));
        break;
      case Op::kRelu:
        accumulate(
            n.parents[0],
            g.cwiseProduct(node_value(n.parents[0]).unaryExpr([](double x) {
              return x > 0 ? 1.0 : 0.0;
            })));
        break;
      case Op::kExpm1Ratio:
        accumulate(
            n.parents[0],
            g.cwiseProduct(node_value(n.parents[0]).unaryExpr([](double x) {
              return expm1_ratio_deriv(x);
            })));
        break;
      case Op::kLgamma:
        accumulate(
            n.parents[0],
            g.cwiseProduct(node_value(n.parents[0]).unaryExpr([](double x) {
              return digamma(x);
            })));
        break;
      case Op::kSum:
        accumulate(n.parents[0],
                   Mat::Constant(node_value(n.parents[0]).rows(),
                                 node_value(n.parents[0]).cols(), g(0, 0)));
        break;
      case Op::kSlice: {
        Mat gp = Mat::Zero(node_value(n.parents[0]).rows(), 1);
        gp.block(n.i0, 0, n.i1, 1) = g;
        accumulate(n.parents[0], gp);
        break;
      }
      case Op::kReshape: {
        const Mat& pv = node_value(n.parents[0]);
        accumulate(n.parents[0],
                   Eigen::Map<const Mat>(g.data(), pv.rows(), pv.cols()));
        break;
      }
      case Op::kConcat: {
        int at = 0;
        for (int p : n.parents) {
          int len = static_cast<int>(node_value(p).rows());
          accumulate(p, g.block(at, 0, len, 1));
          at += len;
        }
        break;
      }
      case Op::kCholSolve: {
        if (!needs_grad(n.parents[0])) break;
        const Mat& lower = *n.factor;
        Mat y = lower.triangularView<Eigen::Lower>().solve(g);
        accumulate(n.parents[0],
                   lower.transpose().triangularView<Eigen::Upper>().solve(y));
        break;
      }
    }
    if (id != param_id_) {
      n.grad.resize(0, 0);  // free as we go; param grad survives
      n.has_grad = false;
    }
  }

  Node& leaf = nodes_[static_cast<size_t>(param_id_)];
  if (!leaf.has_grad) return Vec::Zero(leaf.value.rows());
  Vec g = leaf.grad.col(0);
  return g;
}

Var operator+(Var a, Var b) { return a.tape->add(a, b); }
Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
Var operator*(double c, Var a) { return a.tape->scale_c(c, a); }

}  // namespace alws
