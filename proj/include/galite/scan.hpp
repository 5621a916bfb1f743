#pragma once

#include "galite/numerics.hpp"

#include <omp.h>

#include <algorithm>
#include <cstddef>
#include <vector>

// First-order elementwise recurrences h_t = a_t * h_{t-1} + b_t evaluated
// either left to right or as an associative prefix scan.
namespace galite::scan {

template <typename Scalar>
struct ScanElement {
  Vector<Scalar> a;  // decay
  Vector<Scalar> b;  // input
};

template <typename Scalar>
ScanElement<Scalar> identity_element(Index n) {
  return {Vector<Scalar>::Ones(n), Vector<Scalar>::Zero(n)};
}

// Composition of affine maps: apply `first`, then `second`.
template <typename Scalar>
ScanElement<Scalar> combine(const ScanElement<Scalar>& first, const ScanElement<Scalar>& second) {
  require_shape(first.a.size() == second.a.size() && first.b.size() == second.b.size() &&
                    first.a.size() == first.b.size(),
                "scan::combine: element lengths differ");
  return {second.a.cwiseProduct(first.a), second.a.cwiseProduct(first.b) + second.b};
}

struct ScanStats {
  std::size_t combines = 0;
  std::size_t depth = 0;
};

// Rows of `decay` and `input` are timesteps. Returns the T x n matrix of states.
template <typename Scalar>
Matrix<Scalar> scan_sequential(const Matrix<Scalar>& decay, const Matrix<Scalar>& input,
                               const Vector<Scalar>& h0) {
  require_shape(decay.rows() == input.rows() && decay.cols() == input.cols(),
                "scan_sequential: decay/input shapes differ");
  require_shape(h0.size() == decay.cols(), "scan_sequential: h0 length mismatch");
  require_shape(decay.rows() >= 1, "scan_sequential: empty sequence");
  const Index steps = decay.rows();
  const Index n = decay.cols();
  Matrix<Scalar> out(steps, n);
  const Scalar* a = decay.data();
  const Scalar* b = input.data();
  Scalar* h = out.data();
  for (Index j = 0; j < n; ++j) h[j] = a[j] * h0[j] + b[j];
  for (Index t = 1; t < steps; ++t) {
    const Scalar* prev = h + (t - 1) * n;
    Scalar* cur = h + t * n;
    const Scalar* at = a + t * n;
    const Scalar* bt = b + t * n;
    for (Index j = 0; j < n; ++j) cur[j] = at[j] * prev[j] + bt[j];
  }
  return out;
}

// Work-efficient inclusive scan (upsweep then downsweep) over a tree padded
// to a power of two with identity elements. The tree shape depends only on T,
// so the result is bit-identical for any thread count.
template <typename Scalar>
Matrix<Scalar> scan_parallel(const Matrix<Scalar>& decay, const Matrix<Scalar>& input,
                             const Vector<Scalar>& h0, int threads = 1,
                             ScanStats* stats = nullptr) {
  require_shape(decay.rows() == input.rows() && decay.cols() == input.cols(),
                "scan_parallel: decay/input shapes differ");
  require_shape(h0.size() == decay.cols(), "scan_parallel: h0 length mismatch");
  require_shape(decay.rows() >= 1, "scan_parallel: empty sequence");
  const Index steps = decay.rows();
  const Index n = decay.cols();
  Index padded = 1;
  while (padded < steps) padded *= 2;

  Matrix<Scalar> a = Matrix<Scalar>::Ones(padded, n);
  Matrix<Scalar> b = Matrix<Scalar>::Zero(padded, n);
  a.topRows(steps) = decay;
  b.topRows(steps) = input;

  auto combine_rows = [&](Index left, Index right) {
    b.row(right) = a.row(right).cwiseProduct(b.row(left)) + b.row(right);
    a.row(right) = a.row(right).cwiseProduct(a.row(left));
  };

  ScanStats local;
  const int workers = std::max(1, threads);

  for (Index stride = 1; stride < padded; stride *= 2) {
    std::vector<Index> targets;
    for (Index i = 2 * stride - 1; i < padded; i += 2 * stride) {
      // Left block covers [i-2s+1, i-s]; right block covers [i-s+1, i].
      if (i - 2 * stride + 1 >= steps) break;
      if (i - stride + 1 >= steps) {
        a.row(i) = a.row(i - stride);
        b.row(i) = b.row(i - stride);
        continue;
      }
      targets.push_back(i);
    }
    const auto count = static_cast<long>(targets.size());
#pragma omp parallel for num_threads(workers) if (workers > 1)
    for (long c = 0; c < count; ++c) combine_rows(targets[c] - stride, targets[c]);
    if (count > 0) {
      local.combines += static_cast<std::size_t>(count);
      ++local.depth;
    }
  }

  for (Index stride = padded / 4; stride >= 1; stride /= 2) {
    std::vector<Index> targets;
    for (Index i = 3 * stride - 1; i < padded && i < steps; i += 2 * stride) targets.push_back(i);
    const auto count = static_cast<long>(targets.size());
#pragma omp parallel for num_threads(workers) if (workers > 1)
    for (long c = 0; c < count; ++c) combine_rows(targets[c] - stride, targets[c]);
    if (count > 0) {
      local.combines += static_cast<std::size_t>(count);
      ++local.depth;
    }
  }

  Matrix<Scalar> out(steps, n);
  for (Index t = 0; t < steps; ++t)
    out.row(t) = a.row(t).cwiseProduct(h0.transpose()) + b.row(t);
  if (stats) *stats = local;
  return out;
}

namespace detail {
template <typename Scalar>
void pack(const std::vector<ScanElement<Scalar>>& elems, Matrix<Scalar>& a, Matrix<Scalar>& b) {
  require_shape(!elems.empty(), "scan: empty sequence");
  const Index n = elems.front().a.size();
  a.resize(static_cast<Index>(elems.size()), n);
  b.resize(static_cast<Index>(elems.size()), n);
  for (std::size_t t = 0; t < elems.size(); ++t) {
    require_shape(elems[t].a.size() == n && elems[t].b.size() == n, "scan: ragged elements");
    a.row(static_cast<Index>(t)) = elems[t].a.transpose();
    b.row(static_cast<Index>(t)) = elems[t].b.transpose();
  }
}

template <typename Scalar>
std::vector<Vector<Scalar>> unpack(const Matrix<Scalar>& h) {
  std::vector<Vector<Scalar>> out;
  out.reserve(static_cast<std::size_t>(h.rows()));
  for (Index t = 0; t < h.rows(); ++t) out.emplace_back(h.row(t).transpose());
  return out;
}
}  // namespace detail

template <typename Scalar>
std::vector<Vector<Scalar>> scan_sequential(const std::vector<ScanElement<Scalar>>& elems,
                                            const Vector<Scalar>& h0) {
  Matrix<Scalar> a, b;
  detail::pack(elems, a, b);
  return detail::unpack(scan_sequential(a, b, h0));
}

template <typename Scalar>
std::vector<Vector<Scalar>> scan_parallel(const std::vector<ScanElement<Scalar>>& elems,
                                          const Vector<Scalar>& h0, int threads = 1,
                                          ScanStats* stats = nullptr) {
  Matrix<Scalar> a, b;
  detail::pack(elems, a, b);
  return detail::unpack(scan_parallel(a, b, h0, threads, stats));
}

enum class Mode { Sequential, Parallel };

template <typename Scalar>
Matrix<Scalar> run(Mode mode, const Matrix<Scalar>& decay, const Matrix<Scalar>& input,
                   const Vector<Scalar>& h0, int threads = 1) {
  return mode == Mode::Sequential ? scan_sequential(decay, input, h0)
                                  : scan_parallel(decay, input, h0, threads);
}

}  // namespace galite::scan
