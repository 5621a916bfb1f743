#pragma once

#include "galite/numerics.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>

namespace galite {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for a (seed, id, id, ...) tuple. Streams do not depend on
// the order in which they are created.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = splitmix64(seed);
  for (auto id : ids) h = splitmix64(h ^ splitmix64(id + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> ids = {}) {
  return Rng(derive_seed(seed, ids));
}

inline Mat random_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline Mat random_uniform(Index rows, Index cols, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// Orthogonal initialization: rows (or columns, whichever is fewer) are
// orthonormal, scaled by `gain`.
inline Mat orthogonal(Index rows, Index cols, Rng& rng, double gain = 1.0) {
  if (rows == 0 || cols == 0) return Mat(rows, cols);
  const bool tall = rows >= cols;
  const Index big = tall ? rows : cols;
  const Index small = tall ? cols : rows;
  Mat g = random_normal(big, small, rng);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(big, small);
  // Sign correction makes the distribution uniform over orthogonal matrices.
  const Mat r = qr.matrixQR().topLeftCorner(small, small);
  for (Index j = 0; j < small; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  Mat out = tall ? q : Mat(q.transpose());
  return out * gain;
}

}  // namespace galite
