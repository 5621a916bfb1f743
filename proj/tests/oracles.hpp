#pragma once

// Reference implementations used only by tests. Each is written directly from
// the defining formula with plain loops, sharing no code with the library
// kernels it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec apply_w(const Mat& w, const Vec& x) {
  Vec y(w.rows());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < w.cols(); ++j) acc += w(i, j) * x[j];
    y[i] = acc;
  }
  return y;
}

inline Vec elu1(const Vec& z) {
  Vec out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) out[i] = z[i] > 0 ? z[i] + 1.0 : std::exp(z[i]);
  return out;
}

// flatten(a (x) b), a indexes rows.
inline Vec kron_flat(const Vec& a, const Vec& b) {
  Vec out(a.size() * b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < b.size(); ++j) out[i * b.size() + j] = a[i] * b[j];
  return out;
}

inline Vec relu(Vec v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = v[i] > 0 ? v[i] : 0.0;
  return v;
}

inline Vec sigmoid(Vec v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = sig(v[i]);
  return v;
}

// sum_i v_i (k_i . q) / (sum_j k_j . q + eps)
inline Vec kernel_attention(const std::vector<Vec>& values, const std::vector<Vec>& keys, const Vec& q,
                            double eps) {
  Vec num = Vec::Zero(values.front().size());
  double den = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double w = keys[i].dot(q);
    num += w * values[i];
    den += w;
  }
  return num / (den + eps);
}

// C_T = sum_i l_i (x) m_i with l_i = (prod_{j>i} (1 - beta_j)) beta_i v_i and
// m_i = (prod_{j>i} (1 - gamma_j)) gamma_i k_i.
inline Mat unrolled_gated_state(const std::vector<Vec>& v, const std::vector<Vec>& k, const std::vector<Vec>& beta,
                                const std::vector<Vec>& gamma) {
  const std::size_t steps = v.size();
  Mat c = Mat::Zero(v.front().size(), k.front().size());
  for (std::size_t i = 0; i < steps; ++i) {
    Vec l = beta[i].cwiseProduct(v[i]);
    Vec m = gamma[i].cwiseProduct(k[i]);
    for (std::size_t j = i + 1; j < steps; ++j) {
      l = l.cwiseProduct(Vec::Ones(l.size()) - beta[j]);
      m = m.cwiseProduct(Vec::Ones(m.size()) - gamma[j]);
    }
    for (Eigen::Index a = 0; a < l.size(); ++a)
      for (Eigen::Index b = 0; b < m.size(); ++b) c(a, b) += l[a] * m[b];
  }
  return c;
}

// Row `row` of causal softmax attention, computed by direct summation.
inline Vec causal_softmax_row(const std::vector<Vec>& q, const std::vector<Vec>& k, const std::vector<Vec>& v,
                              std::size_t row, std::size_t first, double scale) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = first; j <= row; ++j) mx = std::max(mx, q[row].dot(k[j]) * scale);
  double total = 0.0;
  Vec out = Vec::Zero(v.front().size());
  for (std::size_t j = first; j <= row; ++j) {
    const double w = std::exp(q[row].dot(k[j]) * scale - mx);
    total += w;
    out += w * v[j];
  }
  return out / total;
}

// h_t = sum_{i <= t} (prod_{i < j <= t} a_j) b_i + (prod_{j <= t} a_j) h0
inline Mat scan_bruteforce(const Mat& a, const Mat& b, const Vec& h0) {
  Mat out(a.rows(), a.cols());
  for (Eigen::Index t = 0; t < a.rows(); ++t) {
    for (Eigen::Index n = 0; n < a.cols(); ++n) {
      double prod_all = 1.0;
      for (Eigen::Index j = 0; j <= t; ++j) prod_all *= a(j, n);
      double acc = prod_all * h0[n];
      for (Eigen::Index i = 0; i <= t; ++i) {
        double p = b(i, n);
        for (Eigen::Index j = i + 1; j <= t; ++j) p *= a(j, n);
        acc += p;
      }
      out(t, n) = acc;
    }
  }
  return out;
}

// (S(m-n) + S(m+n)) / r with S(k) = r + 1 if r | k else 1.
inline double delta_closed(std::int64_t m, std::int64_t n, std::int64_t r) {
  auto s = [r](std::int64_t k) { return (k % r == 0) ? double(r + 1) : 1.0; };
  return (s(m - n) + s(m + n)) / double(r);
}

// Discounted advantages by direct expansion of the GAE sum.
inline std::vector<double> gae_bruteforce(const std::vector<double>& r, const std::vector<double>& v,
                                          const std::vector<char>& done, double bootstrap, double g, double l) {
  const std::size_t n = r.size();
  std::vector<double> delta(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double next = t + 1 < n ? v[t + 1] : bootstrap;
    delta[t] = r[t] + g * next * (done[t] ? 0.0 : 1.0) - v[t];
  }
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double w = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      adv[t] += w * delta[k];
      if (done[k]) break;
      w *= g * l;
    }
  }
  return adv;
}

// Coordinates where no central difference with h in {1e-4, 1e-5, 1e-6} agrees with the
// analytic gradient within 1e-5 relative plus a 1e-15/h roundoff floor.
// f(theta) returns (value, gradient).
template <typename F>
int fd_violations(F&& f, const Vec& theta) {
  const Vec analytic = f(theta).second;
  Vec probe = theta;
  int bad = 0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    bool ok = false;
    for (double h : {1e-4, 1e-5, 1e-6}) {
      probe[i] = theta[i] + h;
      const double up = f(probe).first;
      probe[i] = theta[i] - h;
      const double down = f(probe).first;
      probe[i] = theta[i];
      const double numeric = (up - down) / (2.0 * h);
      const double scale = std::max(std::abs(analytic[i]), std::abs(numeric));
      ok = ok || std::abs(analytic[i] - numeric) <= 1e-5 * scale + 1e-15 / h;
    }
    bad += ok ? 0 : 1;
  }
  return bad;
}

inline std::vector<int> gray_bits(int n) {
  const int g = n ^ (n >> 1);
  std::vector<int> bits;
  for (int i = 7; i >= 0; --i) bits.push_back((g >> i) & 1);
  return bits;
}

}  // namespace oracle
