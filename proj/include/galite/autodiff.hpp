#pragma once

#include "galite/numerics.hpp"
#include "galite/scan.hpp"

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

// Reverse-mode differentiation over a fixed set of matrix primitives.
//
// A Tape is an append-only list of nodes. Every node stores its value; inputs
// always reference strictly earlier nodes, so the tape is a topologically
// ordered DAG and a single reverse sweep computes all adjoints. Vectors are
// 1 x n rows so that a sequence of T steps is simply a T x n matrix.
namespace galite::ad {

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  MatMulNT,
  Transpose,
  Add,
  Sub,
  Mul,
  Div,
  Affine,
  Relu,
  Elu,
  Sigmoid,
  Tanh,
  Exp,
  Log,
  Sum,
  SumCols,
  Dot,
  Outer,
  Flatten,
  RowOuter,
  RowMatVec,
  RowDot,
  MulCol,
  DivCol,
  AddRow,
  MulRow,
  LayerNormRows,
  SoftmaxRows,
  LogSoftmaxRows,
  LinearScan,
  ConcatRows,
  ConcatCols,
  SliceCols,
};

class Tape;

// Scalar and index attributes of a node (scale/shift, slice bounds, ...).
struct NodeAux {
  double s0 = 0.0;
  double s1 = 0.0;
  Index k0 = 0;
  Index k1 = 0;
};

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Mat> adjoints) : adj_(std::move(adjoints)) {}

  // Adjoint of `v`; a zero matrix of the right shape if v does not reach the loss.
  Mat wrt(const Var& v) const;

 private:
  std::vector<Mat> adj_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  Var param(Mat value);

  const Mat& value(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  // Forward/backward scan implementation used by LinearScan nodes.
  void set_scan(scan::Mode mode, int threads = 1) {
    scan_mode_ = mode;
    scan_threads_ = threads;
  }

  // Recompute every non-leaf value from the leaves.
  void replay();

  // Overwrite a leaf value (for replay experiments).
  void set_leaf(const Var& v, Mat value);

  // Reverse sweep from a 1x1 node.
  Gradients grad(const Var& loss) const;

  using Aux = NodeAux;
  Var record(Op op, std::vector<int> inputs, Aux aux = {});

 private:
  struct Node {
    Op op = Op::Leaf;
    bool needs_grad = false;
    std::vector<int> in;
    Aux aux;
    Mat value;
    Mat saved;  // per-op cache (e.g. inverse std of layer norm)
  };

  void forward(Node& node);
  void backward(const Node& node, const Mat& g, std::vector<Mat>& adj,
                std::vector<char>& touched) const;
  const Mat& in_value(const Node& node, std::size_t i) const {
    return nodes_[static_cast<std::size_t>(node.in[i])].value;
  }

  std::vector<Node> nodes_;
  scan::Mode scan_mode_ = scan::Mode::Sequential;
  int scan_threads_ = 1;
};

// Primitive set. Shapes follow Eigen conventions; vectors are 1 x n.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var affine(Var a, double scale, double shift);  // scale * a + shift
Var scale(Var a, double c);
Var relu(Var a);
Var elu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var sum(Var a);
Var sum_cols(Var a);  // T x n -> T x 1
Var dot(Var a, Var b);
Var outer(Var u, Var v);
Var flatten(Var a);
Var row_outer(Var a, Var b);                 // out[t, i*n + j] = a[t,i] b[t,j]
Var row_matvec(Var c, Var q, Index out_dim);  // out[t, i] = sum_j c[t, i*n + j] q[t, j]
Var row_dot(Var a, Var b);                   // T x 1
Var mul_col(Var a, Var c);                   // a[t, j] * c[t]
Var div_col(Var a, Var c);                   // a[t, j] / c[t]
Var add_row(Var a, Var b);                   // a[t, j] + b[j]
Var mul_row(Var a, Var b);                   // a[t, j] * b[j]
Var layernorm_rows(Var a, double eps = 1e-5);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var linear_scan(Var decay, Var input, Var h0);  // h_t = decay_t * h_{t-1} + input_t
Var concat_rows(Var a, Var b);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, Index start, Index len);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

// Worst relative error between analytic and central-difference gradients.
// The denominator is max(|analytic|, |numeric|, 1e-8).
struct GradCheckResult {
  double max_rel_error = 0.0;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ValueAndGrad = std::function<std::pair<double, Vec>(const Vec&)>;

GradCheckResult finite_diff_check(const ValueAndGrad& f, const Vec& theta, double h = 1e-5);

}  // namespace galite::ad
