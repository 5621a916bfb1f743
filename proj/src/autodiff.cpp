#include "galite/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace galite::ad {

const Mat& Var::value() const { return tape->value(*this); }

Mat Gradients::wrt(const Var& v) const {
  const auto& a = adj_[static_cast<std::size_t>(v.id)];
  if (a.size() == 0) return Mat::Zero(v.rows(), v.cols());
  return a;
}

Var Tape::constant(Mat value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Mat value) {
  Var v = constant(std::move(value));
  nodes_.back().needs_grad = true;
  return v;
}

void Tape::set_leaf(const Var& v, Mat value) {
  auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.op != Op::Leaf) throw ContractError("set_leaf: node is not a leaf");
  n.value = std::move(value);
}

Var Tape::record(Op op, std::vector<int> inputs, Aux aux) {
  Node n;
  n.op = op;
  n.aux = aux;
  n.in = std::move(inputs);
  const int self = static_cast<int>(nodes_.size());
  for (int i : n.in) {
    if (i < 0 || i >= self) throw ContractError("tape: input does not reference an earlier node");
    n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(i)].needs_grad;
  }
  forward(n);
  nodes_.push_back(std::move(n));
  return {this, self};
}

void Tape::replay() {
  for (auto& n : nodes_)
    if (n.op != Op::Leaf) forward(n);
}

namespace {

void same_shape(const Mat& a, const Mat& b, const char* what) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(),
                std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                    std::to_string(b.cols()) + ")");
}

}  // namespace

void Tape::forward(Node& n) {
  auto in = [&](std::size_t i) -> const Mat& { return in_value(n, i); };
  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::MatMul:
      require_shape(in(0).cols() == in(1).rows(), "matmul: inner dimensions differ");
      n.value = in(0) * in(1);
      return;
    case Op::MatMulNT:
      require_shape(in(0).cols() == in(1).cols(), "matmul_nt: inner dimensions differ");
      n.value = in(0) * in(1).transpose();
      return;
    case Op::Transpose:
      n.value = in(0).transpose();
      return;
    case Op::Add:
      same_shape(in(0), in(1), "add");
      n.value = in(0) + in(1);
      return;
    case Op::Sub:
      same_shape(in(0), in(1), "sub");
      n.value = in(0) - in(1);
      return;
    case Op::Mul:
      same_shape(in(0), in(1), "mul");
      n.value = in(0).cwiseProduct(in(1));
      return;
    case Op::Div:
      same_shape(in(0), in(1), "div");
      n.value = in(0).cwiseQuotient(in(1));
      return;
    case Op::Affine:
      n.value = (in(0).array() * n.aux.s0 + n.aux.s1).matrix();
      return;
    case Op::Relu:
      n.value = in(0).cwiseMax(0.0);
      return;
    case Op::Elu:
      n.value = in(0).unaryExpr([](double x) { return galite::elu(x); });
      return;
    case Op::Sigmoid:
      n.value = in(0).unaryExpr([](double x) { return galite::sigmoid(x); });
      return;
    case Op::Tanh:
      n.value = in(0).array().tanh().matrix();
      return;
    case Op::Exp:
      n.value = in(0).array().exp().matrix();
      return;
    case Op::Log:
      n.value = in(0).array().log().matrix();
      return;
    case Op::Sum: {
      double acc = 0.0;
      const Mat& a = in(0);
      for (Index i = 0; i < a.size(); ++i) acc += a.data()[i];
      n.value = Mat::Constant(1, 1, acc);
      return;
    }
    case Op::SumCols:
      n.value = in(0).rowwise().sum();
      return;
    case Op::Dot: {
      same_shape(in(0), in(1), "dot");
      double acc = 0.0;
      for (Index i = 0; i < in(0).size(); ++i) acc += in(0).data()[i] * in(1).data()[i];
      n.value = Mat::Constant(1, 1, acc);
      return;
    }
    case Op::Outer: {
      const Mat& u = in(0);
      const Mat& v = in(1);
      n.value = Eigen::Map<const Vec>(u.data(), u.size()) *
                Eigen::Map<const Vec>(v.data(), v.size()).transpose();
      return;
    }
    case Op::Flatten:
      n.value = Eigen::Map<const Mat>(in(0).data(), 1, in(0).size());
      return;
    case Op::RowOuter: {
      const Mat& a = in(0);
      const Mat& b = in(1);
      require_shape(a.rows() == b.rows(), "row_outer: row counts differ");
      const Index m = a.cols(), k = b.cols();
      n.value.resize(a.rows(), m * k);
      for (Index t = 0; t < a.rows(); ++t)
        for (Index i = 0; i < m; ++i) n.value.row(t).segment(i * k, k) = a(t, i) * b.row(t);
      return;
    }
    case Op::RowMatVec: {
      const Mat& c = in(0);
      const Mat& q = in(1);
      const Index m = n.aux.k0;
      const Index k = q.cols();
      require_shape(c.rows() == q.rows() && c.cols() == m * k, "row_matvec: shape mismatch");
      n.value.resize(c.rows(), m);
      for (Index t = 0; t < c.rows(); ++t)
        n.value.row(t) = (Eigen::Map<const Mat>(c.row(t).data(), m, k) * q.row(t).transpose()).transpose();
      return;
    }
    case Op::RowDot:
      same_shape(in(0), in(1), "row_dot");
      n.value = in(0).cwiseProduct(in(1)).rowwise().sum();
      return;
    case Op::MulCol:
      require_shape(in(1).cols() == 1 && in(1).rows() == in(0).rows(), "mul_col: shape mismatch");
      n.value = in(0).array().colwise() * in(1).col(0).array();
      return;
    case Op::DivCol:
      require_shape(in(1).cols() == 1 && in(1).rows() == in(0).rows(), "div_col: shape mismatch");
      n.value = in(0).array().colwise() / in(1).col(0).array();
      return;
    case Op::AddRow:
      require_shape(in(1).rows() == 1 && in(1).cols() == in(0).cols(), "add_row: shape mismatch");
      n.value = in(0).rowwise() + in(1).row(0);
      return;
    case Op::MulRow:
      require_shape(in(1).rows() == 1 && in(1).cols() == in(0).cols(), "mul_row: shape mismatch");
      n.value = in(0).array().rowwise() * in(1).row(0).array();
      return;
    case Op::LayerNormRows: {
      const Mat& a = in(0);
      const double eps = n.aux.s0;
      n.value.resize(a.rows(), a.cols());
      n.saved.resize(a.rows(), 1);
      for (Index t = 0; t < a.rows(); ++t) {
        const double mean = a.row(t).mean();
        const double var = (a.row(t).array() - mean).square().mean();
        const double inv = 1.0 / std::sqrt(var + eps);
        n.saved(t, 0) = inv;
        n.value.row(t) = (a.row(t).array() - mean) * inv;
      }
      return;
    }
    case Op::SoftmaxRows:
      n.value = galite::softmax_rows<double>(in(0));
      return;
    case Op::LogSoftmaxRows: {
      const Mat& a = in(0);
      n.value.resize(a.rows(), a.cols());
      for (Index t = 0; t < a.rows(); ++t) {
        const double mx = a.row(t).maxCoeff();
        const double lse = mx + std::log((a.row(t).array() - mx).exp().sum());
        n.value.row(t) = a.row(t).array() - lse;
      }
      return;
    }
    case Op::LinearScan: {
      const Mat& decay = in(0);
      const Mat& input = in(1);
      const Mat& h0 = in(2);
      require_shape(h0.rows() == 1 && h0.cols() == decay.cols(), "linear_scan: h0 shape mismatch");
      n.value = scan::run<double>(scan_mode_, decay, input, h0.row(0).transpose(), scan_threads_);
      return;
    }
    case Op::ConcatRows:
      require_shape(in(0).cols() == in(1).cols(), "concat_rows: column counts differ");
      n.value.resize(in(0).rows() + in(1).rows(), in(0).cols());
      n.value.topRows(in(0).rows()) = in(0);
      n.value.bottomRows(in(1).rows()) = in(1);
      return;
    case Op::ConcatCols: {
      Index cols = 0;
      const Index rows = in(0).rows();
      for (std::size_t i = 0; i < n.in.size(); ++i) {
        require_shape(in(i).rows() == rows, "concat_cols: row counts differ");
        cols += in(i).cols();
      }
      n.value.resize(rows, cols);
      Index at = 0;
      for (std::size_t i = 0; i < n.in.size(); ++i) {
        n.value.middleCols(at, in(i).cols()) = in(i);
        at += in(i).cols();
      }
      return;
    }
    case Op::SliceCols:
      require_shape(n.aux.k0 >= 0 && n.aux.k0 + n.aux.k1 <= in(0).cols(), "slice_cols: out of range");
      n.value = in(0).middleCols(n.aux.k0, n.aux.k1);
      return;
  }
}

void Tape::backward(const Node& n, const Mat& g, std::vector<Mat>& adj,
                    std::vector<char>& touched) const {
  auto in = [&](std::size_t i) -> const Mat& { return in_value(n, i); };
  auto accumulate = [&](std::size_t i, const auto& contribution) {
    const auto id = static_cast<std::size_t>(n.in[i]);
    if (!nodes_[id].needs_grad) return;
    if (!touched[id]) {
      adj[id] = contribution;
      touched[id] = 1;
    } else {
      adj[id] += contribution;
    }
  };
  auto wants = [&](std::size_t i) { return nodes_[static_cast<std::size_t>(n.in[i])].needs_grad; };

  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::MatMul:
      if (wants(0)) accumulate(0, Mat(g * in(1).transpose()));
      if (wants(1)) accumulate(1, Mat(in(0).transpose() * g));
      return;
    case Op::MatMulNT:
      if (wants(0)) accumulate(0, Mat(g * in(1)));
      if (wants(1)) accumulate(1, Mat(g.transpose() * in(0)));
      return;
    case Op::Transpose:
      accumulate(0, Mat(g.transpose()));
      return;
    case Op::Add:
      accumulate(0, g);
      accumulate(1, g);
      return;
    case Op::Sub:
      accumulate(0, g);
      if (wants(1)) accumulate(1, Mat(-g));
      return;
    case Op::Mul:
      if (wants(0)) accumulate(0, Mat(g.cwiseProduct(in(1))));
      if (wants(1)) accumulate(1, Mat(g.cwiseProduct(in(0))));
      return;
    case Op::Div:
      if (wants(0)) accumulate(0, Mat(g.cwiseQuotient(in(1))));
      if (wants(1))
        accumulate(1, Mat(-(g.array() * n.value.array() / in(1).array()).matrix()));
      return;
    case Op::Affine:
      accumulate(0, Mat(g * n.aux.s0));
      return;
    case Op::Relu:
      accumulate(0, Mat((in(0).array() > 0.0).select(g, 0.0)));
      return;
    case Op::Elu:
      accumulate(0, Mat((in(0).array() > 0.0).select(g.array(), g.array() * (n.value.array() + 1.0))));
      return;
    case Op::Sigmoid:
      accumulate(0, Mat((g.array() * n.value.array() * (1.0 - n.value.array())).matrix()));
      return;
    case Op::Tanh:
      accumulate(0, Mat((g.array() * (1.0 - n.value.array().square())).matrix()));
      return;
    case Op::Exp:
      accumulate(0, Mat(g.cwiseProduct(n.value)));
      return;
    case Op::Log:
      accumulate(0, Mat(g.cwiseQuotient(in(0))));
      return;
    case Op::Sum:
      accumulate(0, Mat::Constant(in(0).rows(), in(0).cols(), g(0, 0)));
      return;
    case Op::SumCols:
      accumulate(0, Mat(g.col(0).replicate(1, in(0).cols())));
      return;
    case Op::Dot:
      if (wants(0)) accumulate(0, Mat(in(1) * g(0, 0)));
      if (wants(1)) accumulate(1, Mat(in(0) * g(0, 0)));
      return;
    case Op::Outer: {
      const Mat& u = in(0);
      const Mat& v = in(1);
      const Eigen::Map<const Vec> uf(u.data(), u.size());
      const Eigen::Map<const Vec> vf(v.data(), v.size());
      if (wants(0)) {
        const Vec gu = g * vf;
        accumulate(0, Mat(Eigen::Map<const Mat>(gu.data(), u.rows(), u.cols())));
      }
      if (wants(1)) {
        const Vec gv = g.transpose() * uf;
        accumulate(1, Mat(Eigen::Map<const Mat>(gv.data(), v.rows(), v.cols())));
      }
      return;
    }
    case Op::Flatten:
      accumulate(0, Mat(Eigen::Map<const Mat>(g.data(), in(0).rows(), in(0).cols())));
      return;
    case Op::RowOuter: {
      const Mat& a = in(0);
      const Mat& b = in(1);
      const Index m = a.cols(), k = b.cols();
      Mat ga(a.rows(), m), gb = Mat::Zero(b.rows(), k);
      for (Index t = 0; t < a.rows(); ++t) {
        for (Index i = 0; i < m; ++i) {
          const auto seg = g.row(t).segment(i * k, k);
          ga(t, i) = seg.dot(b.row(t));
          gb.row(t) += a(t, i) * seg;
        }
      }
      if (wants(0)) accumulate(0, ga);
      if (wants(1)) accumulate(1, gb);
      return;
    }
    case Op::RowMatVec: {
      const Mat& c = in(0);
      const Mat& q = in(1);
      const Index m = n.aux.k0;
      const Index k = q.cols();
      if (wants(0)) {
        Mat gc(c.rows(), c.cols());
        for (Index t = 0; t < c.rows(); ++t)
          Eigen::Map<Mat>(gc.row(t).data(), m, k) = g.row(t).transpose() * q.row(t);
        accumulate(0, gc);
      }
      if (wants(1)) {
        Mat gq(q.rows(), k);
        for (Index t = 0; t < c.rows(); ++t)
          gq.row(t) = g.row(t) * Eigen::Map<const Mat>(c.row(t).data(), m, k);
        accumulate(1, gq);
      }
      return;
    }
    case Op::RowDot:
      if (wants(0)) accumulate(0, Mat(in(1).array().colwise() * g.col(0).array()));
      if (wants(1)) accumulate(1, Mat(in(0).array().colwise() * g.col(0).array()));
      return;
    case Op::MulCol:
      if (wants(0)) accumulate(0, Mat(g.array().colwise() * in(1).col(0).array()));
      if (wants(1)) accumulate(1, Mat(g.cwiseProduct(in(0)).rowwise().sum()));
      return;
    case Op::DivCol:
      if (wants(0)) accumulate(0, Mat(g.array().colwise() / in(1).col(0).array()));
      if (wants(1))
        accumulate(1, Mat(-(g.cwiseProduct(n.value).rowwise().sum().array() / in(1).col(0).array()).matrix()));
      return;
    case Op::AddRow:
      accumulate(0, g);
      if (wants(1)) accumulate(1, Mat(g.colwise().sum()));
      return;
    case Op::MulRow:
      if (wants(0)) accumulate(0, Mat(g.array().rowwise() * in(1).row(0).array()));
      if (wants(1)) accumulate(1, Mat(g.cwiseProduct(in(0)).colwise().sum()));
      return;
    case Op::LayerNormRows: {
      const Mat& y = n.value;
      Mat gx(y.rows(), y.cols());
      for (Index t = 0; t < y.rows(); ++t) {
        const double gm = g.row(t).mean();
        const double gym = g.row(t).cwiseProduct(y.row(t)).mean();
        gx.row(t) = n.saved(t, 0) * (g.row(t).array() - gm - y.row(t).array() * gym);
      }
      accumulate(0, gx);
      return;
    }
    case Op::SoftmaxRows: {
      const Mat& y = n.value;
      const Vec inner = g.cwiseProduct(y).rowwise().sum();
      accumulate(0, Mat(y.array() * (g.colwise() - inner).array()));
      return;
    }
    case Op::LogSoftmaxRows: {
      const Mat p = n.value.array().exp().matrix();
      const Vec gs = g.rowwise().sum();
      accumulate(0, Mat(g - Mat(p.array().colwise() * gs.array())));
      return;
    }
    case Op::LinearScan: {
      const Mat& decay = in(0);
      const Mat& h = n.value;
      const Index steps = h.rows();
      Mat lambda(steps, h.cols());
      lambda.row(steps - 1) = g.row(steps - 1);
      for (Index t = steps - 2; t >= 0; --t)
        lambda.row(t) = g.row(t) + decay.row(t + 1).cwiseProduct(lambda.row(t + 1));
      if (wants(0)) {
        Mat ga(steps, h.cols());
        ga.row(0) = lambda.row(0).cwiseProduct(in(2).row(0));
        if (steps > 1) ga.bottomRows(steps - 1) = lambda.bottomRows(steps - 1).cwiseProduct(h.topRows(steps - 1));
        accumulate(0, ga);
      }
      if (wants(2)) accumulate(2, Mat(decay.row(0).cwiseProduct(lambda.row(0))));
      if (wants(1)) accumulate(1, lambda);
      return;
    }
    case Op::ConcatRows:
      if (wants(0)) accumulate(0, Mat(g.topRows(in(0).rows())));
      if (wants(1)) accumulate(1, Mat(g.bottomRows(in(1).rows())));
      return;
    case Op::ConcatCols: {
      Index at = 0;
      for (std::size_t i = 0; i < n.in.size(); ++i) {
        if (wants(i)) accumulate(i, Mat(g.middleCols(at, in(i).cols())));
        at += in(i).cols();
      }
      return;
    }
    case Op::SliceCols: {
      Mat ga = Mat::Zero(in(0).rows(), in(0).cols());
      ga.middleCols(n.aux.k0, n.aux.k1) = g;
      accumulate(0, ga);
      return;
    }
  }
}

Gradients Tape::grad(const Var& loss) const {
  const auto& out = nodes_[static_cast<std::size_t>(loss.id)].value;
  if (out.rows() != 1 || out.cols() != 1)
    throw ContractError("grad: loss node is not scalar (" + std::to_string(out.rows()) + "x" +
                        std::to_string(out.cols()) + ")");
  std::vector<Mat> adj(nodes_.size());
  std::vector<char> touched(nodes_.size(), 0);
  const auto root = static_cast<std::size_t>(loss.id);
  adj[root] = Mat::Ones(1, 1);
  touched[root] = 1;
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!touched[i] || !nodes_[i].needs_grad) continue;
    backward(nodes_[i], adj[i], adj, touched);
    // Intermediate adjoints are no longer needed once propagated.
    if (nodes_[i].op != Op::Leaf) adj[i] = Mat();
  }
  return Gradients(std::move(adj));
}

namespace {
Var unary(Op op, Var a, Tape::Aux aux = {}) { return a.tape->record(op, {a.id}, aux); }
Var binary(Op op, Var a, Var b, Tape::Aux aux = {}) {
  if (a.tape != b.tape) throw ContractError("autodiff: operands live on different tapes");
  return a.tape->record(op, {a.id, b.id}, aux);
}
}  // namespace

Var matmul(Var a, Var b) { return binary(Op::MatMul, a, b); }
Var matmul_nt(Var a, Var b) { return binary(Op::MatMulNT, a, b); }
Var transpose(Var a) { return unary(Op::Transpose, a); }
Var add(Var a, Var b) { return binary(Op::Add, a, b); }
Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
Var div(Var a, Var b) { return binary(Op::Div, a, b); }
Var affine(Var a, double scale, double shift) {
  Tape::Aux aux;
  aux.s0 = scale;
  aux.s1 = shift;
  return unary(Op::Affine, a, aux);
}
Var scale(Var a, double c) { return affine(a, c, 0.0); }
Var relu(Var a) { return unary(Op::Relu, a); }
Var elu(Var a) { return unary(Op::Elu, a); }
Var sigmoid(Var a) { return unary(Op::Sigmoid, a); }
Var tanh(Var a) { return unary(Op::Tanh, a); }
Var exp(Var a) { return unary(Op::Exp, a); }
Var log(Var a) { return unary(Op::Log, a); }
Var sum(Var a) { return unary(Op::Sum, a); }
Var sum_cols(Var a) { return unary(Op::SumCols, a); }
Var dot(Var a, Var b) { return binary(Op::Dot, a, b); }
Var outer(Var u, Var v) { return binary(Op::Outer, u, v); }
Var flatten(Var a) { return unary(Op::Flatten, a); }
Var row_outer(Var a, Var b) { return binary(Op::RowOuter, a, b); }
Var row_matvec(Var c, Var q, Index out_dim) {
  Tape::Aux aux;
  aux.k0 = out_dim;
  return binary(Op::RowMatVec, c, q, aux);
}
Var row_dot(Var a, Var b) { return binary(Op::RowDot, a, b); }
Var mul_col(Var a, Var c) { return binary(Op::MulCol, a, c); }
Var div_col(Var a, Var c) { return binary(Op::DivCol, a, c); }
Var add_row(Var a, Var b) { return binary(Op::AddRow, a, b); }
Var mul_row(Var a, Var b) { return binary(Op::MulRow, a, b); }
Var layernorm_rows(Var a, double eps) {
  Tape::Aux aux;
  aux.s0 = eps;
  return unary(Op::LayerNormRows, a, aux);
}
Var softmax_rows(Var a) { return unary(Op::SoftmaxRows, a); }
Var log_softmax_rows(Var a) { return unary(Op::LogSoftmaxRows, a); }
Var linear_scan(Var decay, Var input, Var h0) {
  if (decay.tape != input.tape || decay.tape != h0.tape)
    throw ContractError("autodiff: operands live on different tapes");
  return decay.tape->record(Op::LinearScan, {decay.id, input.id, h0.id});
}
Var concat_rows(Var a, Var b) { return binary(Op::ConcatRows, a, b); }
Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.tape != parts.front().tape) throw ContractError("autodiff: operands live on different tapes");
    ids.push_back(p.id);
  }
  return parts.front().tape->record(Op::ConcatCols, std::move(ids));
}
Var slice_cols(Var a, Index start, Index len) {
  Tape::Aux aux;
  aux.k0 = start;
  aux.k1 = len;
  return unary(Op::SliceCols, a, aux);
}

GradCheckResult finite_diff_check(const ValueAndGrad& f, const Vec& theta, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  GradCheckResult result;
  const Vec analytic = f(theta).second;
  require_shape(analytic.size() == theta.size(), "finite_diff_check: gradient length mismatch");
  Vec probe = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double up = f(probe).first;
    probe[i] = theta[i] - h;
    const double down = f(probe).first;
    probe[i] = theta[i];
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (err > result.max_rel_error || result.worst_index < 0) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.analytic = analytic[i];
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace galite::ad
