#pragma once

#include "galite/numerics.hpp"

#include <cstdint>
#include <string>

namespace galite {

// Tally of scalar multiply-adds and activation evaluations in mechanism
// kernels. Kernels take an optional pointer; nullptr disables counting.
struct OpCounter {
  std::uint64_t mul_adds = 0;
  std::uint64_t activations = 0;
};

inline void count_mul_adds(OpCounter* ops, Index n) {
  if (ops) ops->mul_adds += static_cast<std::uint64_t>(n);
}
inline void count_activations(OpCounter* ops, Index n) {
  if (ops) ops->activations += static_cast<std::uint64_t>(n);
}

// y = W x, counted as rows*cols multiply-adds.
template <typename Scalar>
Vector<Scalar> matvec(const Matrix<Scalar>& w, const Vector<Scalar>& x, OpCounter* ops = nullptr) {
  require_shape(w.cols() == x.size(), "matvec: width " + std::to_string(w.cols()) +
                                          " does not match input length " + std::to_string(x.size()));
  count_mul_adds(ops, w.size());
  return w * x;
}

enum class FeatureMapKind { EluPlusOne, LearnedOuterRelu };

inline const char* to_string(FeatureMapKind k) {
  return k == FeatureMapKind::EluPlusOne ? "elu1" : "learned";
}

// ELU(z) + 1 with alpha = 1; strictly positive.
template <typename Scalar>
Vector<Scalar> phi_elu(const Vector<Scalar>& z, OpCounter* ops = nullptr) {
  count_activations(ops, z.size());
  return z.unaryExpr([](Scalar v) { return elu(v) + Scalar(1); });
}

// Row-major flattening of a (x) b: index i * len(b) + j.
template <typename Scalar>
Vector<Scalar> flat_outer(const Vector<Scalar>& a, const Vector<Scalar>& b, OpCounter* ops = nullptr) {
  count_mul_adds(ops, a.size() * b.size());
  Vector<Scalar> out(a.size() * b.size());
  for (Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a[i] * b;
  return out;
}

// f(relu(W_p x) (x) relu(W_m x)); length eta * d_h, entries >= 0.
template <typename Scalar>
Vector<Scalar> phi_learned(const Vector<Scalar>& x, const Matrix<Scalar>& w_p,
                           const Matrix<Scalar>& w_m, OpCounter* ops = nullptr) {
  require_shape(w_p.cols() == x.size() && w_m.cols() == x.size(),
                "phi_learned: projection widths must equal input length");
  Vector<Scalar> p = matvec(w_p, x, ops);
  Vector<Scalar> m = matvec(w_m, x, ops);
  count_activations(ops, p.size() + m.size());
  return flat_outer<Scalar>(relu(p), relu(m), ops);
}

// f(sigmoid(W_p3 x) (x) sigmoid(W_gamma x)); entries in (0, 1).
template <typename Scalar>
Vector<Scalar> gamma_learned(const Vector<Scalar>& x, const Matrix<Scalar>& w_p3,
                             const Matrix<Scalar>& w_gamma, OpCounter* ops = nullptr) {
  require_shape(w_p3.cols() == x.size() && w_gamma.cols() == x.size(),
                "gamma_learned: projection widths must equal input length");
  Vector<Scalar> p = matvec(w_p3, x, ops);
  Vector<Scalar> g = matvec(w_gamma, x, ops);
  count_activations(ops, p.size() + g.size());
  return flat_outer<Scalar>(sigmoid(p), sigmoid(g), ops);
}

}  // namespace galite
