#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace galite {

// Row-major dense containers. Every recurrent quantity lives in one of these.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = Matrix<double>;
using Vec = Vector<double>;
using Index = Eigen::Index;

// Readout denominators are clamped as denom + kDenomEps.
inline constexpr double kDenomEps = 1e-6;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

// Reference product with a fixed summation order: each output entry is
// accumulated over the inner index left to right.
template <typename Scalar>
Matrix<Scalar> matmul(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  require_shape(a.cols() == b.rows(), "matmul: inner dimensions differ (" +
                                          std::to_string(a.cols()) + " vs " +
                                          std::to_string(b.rows()) + ")");
  Matrix<Scalar> out(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.cols(); ++j) {
      Scalar acc = 0;
      for (Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> outer(const Vector<Scalar>& u, const Vector<Scalar>& v) {
  return u * v.transpose();
}

// Row-wise softmax with per-row max subtraction.
template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& m) {
  Matrix<Scalar> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const Scalar mx = m.row(i).maxCoeff();
    Scalar total = 0;
    for (Index j = 0; j < m.cols(); ++j) {
      out(i, j) = std::exp(m(i, j) - mx);
      total += out(i, j);
    }
    out.row(i) /= total;
  }
  return out;
}

template <typename Scalar>
  requires std::is_arithmetic_v<Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
  requires std::is_arithmetic_v<Scalar>
Scalar elu(Scalar x) {
  return x > Scalar(0) ? x : std::expm1(x);
}

template <typename Scalar>
  requires std::is_arithmetic_v<Scalar>
Scalar relu(Scalar x) {
  return x > Scalar(0) ? x : Scalar(0);
}

template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return sigmoid(v); });
}

template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([](S v) { return relu(v); });
}

// Flatten a matrix row-major into a column vector.
template <typename Scalar>
Vector<Scalar> flatten(const Matrix<Scalar>& m) {
  return Eigen::Map<const Vector<Scalar>>(m.data(), m.size());
}

}  // namespace galite
