#pragma once

#include "galite/feature_maps.hpp"
#include "galite/kron.hpp"
#include "galite/numerics.hpp"
#include "galite/rng.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>

namespace galite {

enum class Mechanism { Linear, GaLiTe, AGaLiTe, Windowed };

enum class Approximation { Cosine, Rank1Sign };

const char* to_string(Mechanism m);
Mechanism parse_mechanism(const std::string& name);

// Forces beta and gamma to constants. Used by tests and the gating ablation.
struct GateOverride {
  double beta = 1.0;
  double gamma = 1.0;
};

struct MechanismConfig {
  Mechanism kind = Mechanism::AGaLiTe;
  FeatureMapKind feature_map = FeatureMapKind::LearnedOuterRelu;
  Index eta = 4;
  std::int64_t r = 1;
  Index memory = 128;
  // AGaLiTe readout: false uses sum / (2r (s.q) + eps); true uses (2/r) sum / (s.q + eps).
  bool derivation_scaling = false;
  Approximation approximation = Approximation::Cosine;
  std::optional<GateOverride> gates;
  std::uint64_t sign_seed = 0;

  bool learned_features() const {
    return kind != Mechanism::Windowed && feature_map == FeatureMapKind::LearnedOuterRelu;
  }
  Index key_dim(Index d_h) const { return learned_features() ? eta * d_h : d_h; }
  std::int64_t approx_terms() const {
    return approximation == Approximation::Rank1Sign ? 1 : r + 1;
  }
};

// Per-head weights. T is a matrix type for inference or an autodiff handle
// for training. Weights a mechanism does not use are left empty (0 x 0).
template <typename T>
struct AttentionWeights {
  T w_q, w_k, w_v, w_beta, w_gamma, w_p1, w_p2, w_p3;
};

template <typename W, typename F>
void visit_weights(W& w, F&& f) {
  f("w_q", w.w_q);
  f("w_k", w.w_k);
  f("w_v", w.w_v);
  f("w_beta", w.w_beta);
  f("w_gamma", w.w_gamma);
  f("w_p1", w.w_p1);
  f("w_p2", w.w_p2);
  f("w_p3", w.w_p3);
}

template <typename Scalar>
using AttentionParams = AttentionWeights<Matrix<Scalar>>;

// Orthogonally initialized parameters for one head of the given mechanism.
AttentionParams<double> init_attention_params(const MechanismConfig& cfg, Index d, Index d_h, Rng& rng);

template <typename Scalar>
AttentionParams<Scalar> cast_params(const AttentionParams<double>& p) {
  AttentionParams<Scalar> out;
  out.w_q = p.w_q.cast<Scalar>();
  out.w_k = p.w_k.cast<Scalar>();
  out.w_v = p.w_v.cast<Scalar>();
  out.w_beta = p.w_beta.cast<Scalar>();
  out.w_gamma = p.w_gamma.cast<Scalar>();
  out.w_p1 = p.w_p1.cast<Scalar>();
  out.w_p2 = p.w_p2.cast<Scalar>();
  out.w_p3 = p.w_p3.cast<Scalar>();
  return out;
}

// ---------------------------------------------------------------------------
// Recurrent states

template <typename Scalar>
struct LinearState {
  Matrix<Scalar> c;  // d_h x d_k
  Vector<Scalar> s;  // d_k
};

template <typename Scalar>
struct GaLiTeState {
  Matrix<Scalar> c;  // d_h x d_k
  Vector<Scalar> s;  // d_k
};

template <typename Scalar>
struct AGaLiTeState {
  Matrix<Scalar> v_tilde;  // (r+1) x d_h, row k is v~^k
  Matrix<Scalar> k_tilde;  // (r+1) x d_k
  Vector<Scalar> s;        // d_k
  std::int64_t tick = 0;   // steps processed since the last reset
};

// Ring buffer of the last M (key, value) pairs, oldest first from `start`.
template <typename Scalar>
struct WindowState {
  Matrix<Scalar> keys;    // M x d_h
  Matrix<Scalar> values;  // M x d_h
  Index start = 0;
  Index count = 0;

  Index capacity() const { return keys.rows(); }
  Index slot(Index i) const { return (start + i) % capacity(); }
};

template <typename Scalar>
using MechanismState =
    std::variant<LinearState<Scalar>, GaLiTeState<Scalar>, AGaLiTeState<Scalar>, WindowState<Scalar>>;

template <typename Scalar>
MechanismState<Scalar> make_state(const MechanismConfig& cfg, Index d_h) {
  const Index dk = cfg.key_dim(d_h);
  switch (cfg.kind) {
    case Mechanism::Linear:
      return LinearState<Scalar>{Matrix<Scalar>::Zero(d_h, dk), Vector<Scalar>::Zero(dk)};
    case Mechanism::GaLiTe:
      return GaLiTeState<Scalar>{Matrix<Scalar>::Zero(d_h, dk), Vector<Scalar>::Zero(dk)};
    case Mechanism::AGaLiTe: {
      const auto terms = static_cast<Index>(cfg.approx_terms());
      return AGaLiTeState<Scalar>{Matrix<Scalar>::Zero(terms, d_h), Matrix<Scalar>::Zero(terms, dk),
                                  Vector<Scalar>::Zero(dk), 0};
    }
    case Mechanism::Windowed:
      require_shape(cfg.memory >= 1, "windowed attention: memory size must be >= 1");
      return WindowState<Scalar>{Matrix<Scalar>::Zero(cfg.memory, d_h),
                                 Matrix<Scalar>::Zero(cfg.memory, d_h), 0, 0};
  }
  throw ContractError("make_state: unknown mechanism");
}

// Number of scalars allocated by a state.
template <typename Scalar>
Index state_scalars(const MechanismState<Scalar>& state) {
  return std::visit(
      [](const auto& s) -> Index {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, AGaLiTeState<Scalar>>)
          return s.v_tilde.size() + s.k_tilde.size() + s.s.size();
        else if constexpr (std::is_same_v<S, WindowState<Scalar>>)
          return s.keys.size() + s.values.size();
        else
          return s.c.size() + s.s.size();
      },
      state);
}

namespace detail {

template <typename Scalar>
struct Projections {
  Vector<Scalar> q, k, v;
};

template <typename Scalar>
Projections<Scalar> project(const Vector<Scalar>& x, const AttentionParams<Scalar>& p,
                            const MechanismConfig& cfg, OpCounter* ops) {
  Projections<Scalar> out;
  out.v = matvec(p.w_v, x, ops);
  if (cfg.learned_features()) {
    out.k = phi_learned(x, p.w_p1, p.w_k, ops);
    out.q = phi_learned(x, p.w_p2, p.w_q, ops);
  } else {
    out.k = phi_elu<Scalar>(matvec(p.w_k, x, ops), ops);
    out.q = phi_elu<Scalar>(matvec(p.w_q, x, ops), ops);
  }
  return out;
}

template <typename Scalar>
void gates(const Vector<Scalar>& x, const AttentionParams<Scalar>& p, const MechanismConfig& cfg,
           Index d_h, Index d_k, Vector<Scalar>& beta, Vector<Scalar>& gamma, OpCounter* ops) {
  if (cfg.gates) {
    beta = Vector<Scalar>::Constant(d_h, static_cast<Scalar>(cfg.gates->beta));
    gamma = Vector<Scalar>::Constant(d_k, static_cast<Scalar>(cfg.gates->gamma));
    return;
  }
  beta = sigmoid(matvec(p.w_beta, x, ops));
  count_activations(ops, d_h);
  if (cfg.learned_features()) {
    gamma = gamma_learned(x, p.w_p3, p.w_gamma, ops);
  } else {
    gamma = sigmoid(matvec(p.w_gamma, x, ops));
    count_activations(ops, d_k);
  }
}

template <typename Scalar>
Scalar guarded(Scalar denom) {
  return denom + static_cast<Scalar>(kDenomEps);
}

}  // namespace detail

// +/-1 sign for the rank-1 approximation at a given phase index.
inline double rank1_sign(std::uint64_t seed, std::int64_t index) {
  return (splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index))) & 1ULL) ? 1.0 : -1.0;
}

// ---------------------------------------------------------------------------
// Single-step mechanisms. Each updates `state` in place and returns a_t.

// C += v (x) k, s += k, a = C q / (s.q + eps).
template <typename Scalar>
Vector<Scalar> linear_attention_step(const Vector<Scalar>& x, LinearState<Scalar>& state,
                                     const AttentionParams<Scalar>& p, const MechanismConfig& cfg,
                                     OpCounter* ops = nullptr) {
  auto pr = detail::project(x, p, cfg, ops);
  require_shape(state.c.rows() == pr.v.size() && state.c.cols() == pr.k.size(),
                "linear_attention_step: state shape does not match parameters");
  state.c.noalias() += pr.v * pr.k.transpose();
  state.s += pr.k;
  count_mul_adds(ops, state.c.size() + pr.k.size());
  Vector<Scalar> num = state.c * pr.q;
  const Scalar den = state.s.dot(pr.q);
  count_mul_adds(ops, state.c.size() + pr.q.size() + num.size());
  return num / detail::guarded(den);
}

// Gated update C = ((1-b) (x) (1-g)) .* C + (b.*v) (x) (g.*k), s = (1-g).*s + g.*k.
template <typename Scalar>
Vector<Scalar> galite_step(const Vector<Scalar>& x, GaLiTeState<Scalar>& state,
                           const AttentionParams<Scalar>& p, const MechanismConfig& cfg,
                           OpCounter* ops = nullptr) {
  auto pr = detail::project(x, p, cfg, ops);
  const Index d_h = pr.v.size();
  const Index d_k = pr.k.size();
  require_shape(state.c.rows() == d_h && state.c.cols() == d_k,
                "galite_step: state shape does not match parameters");
  Vector<Scalar> beta, gamma;
  detail::gates(x, p, cfg, d_h, d_k, beta, gamma, ops);
  const Vector<Scalar> bv = beta.cwiseProduct(pr.v);
  const Vector<Scalar> gk = gamma.cwiseProduct(pr.k);
  const Vector<Scalar> keep_v = Vector<Scalar>::Ones(d_h) - beta;
  const Vector<Scalar> keep_k = Vector<Scalar>::Ones(d_k) - gamma;
  count_mul_adds(ops, d_h + d_k);
  for (Index i = 0; i < d_h; ++i)
    state.c.row(i) = (state.c.row(i).array() * keep_k.transpose().array() * keep_v[i] +
                      bv[i] * gk.transpose().array())
                         .matrix();
  count_mul_adds(ops, 3 * d_h * d_k);
  state.s = keep_k.cwiseProduct(state.s) + gk;
  count_mul_adds(ops, d_k);
  Vector<Scalar> num = state.c * pr.q;
  const Scalar den = state.s.dot(pr.q);
  count_mul_adds(ops, state.c.size() + d_k + d_h);
  return num / detail::guarded(den);
}

// Low-rank gated update over r+1 phased vector pairs; the matrix state is never formed.
template <typename Scalar>
Vector<Scalar> agalite_step(const Vector<Scalar>& x, AGaLiTeState<Scalar>& state,
                            const AttentionParams<Scalar>& p, const MechanismConfig& cfg,
                            OpCounter* ops = nullptr) {
  auto pr = detail::project(x, p, cfg, ops);
  const Index d_h = pr.v.size();
  const Index d_k = pr.k.size();
  const auto terms = static_cast<Index>(cfg.approx_terms());
  require_shape(state.v_tilde.rows() == terms && state.v_tilde.cols() == d_h &&
                    state.k_tilde.rows() == terms && state.k_tilde.cols() == d_k,
                "agalite_step: state shape does not match parameters");
  Vector<Scalar> beta, gamma;
  detail::gates(x, p, cfg, d_h, d_k, beta, gamma, ops);
  const Vector<Scalar> bv = beta.cwiseProduct(pr.v);
  const Vector<Scalar> gk = gamma.cwiseProduct(pr.k);
  const Vector<Scalar> keep_v = Vector<Scalar>::Ones(d_h) - beta;
  const Vector<Scalar> keep_k = Vector<Scalar>::Ones(d_k) - gamma;
  count_mul_adds(ops, d_h + d_k);

  const std::int64_t index = state.tick + 1;
  for (Index i = 0; i < terms; ++i) {
    const auto ph = static_cast<Scalar>(cfg.approximation == Approximation::Rank1Sign
                                            ? rank1_sign(cfg.sign_seed, index)
                                            : kron::phase(i, index, cfg.r));
    state.v_tilde.row(i) = (state.v_tilde.row(i).array() * keep_v.transpose().array() +
                            ph * bv.transpose().array())
                               .matrix();
    state.k_tilde.row(i) = (state.k_tilde.row(i).array() * keep_k.transpose().array() +
                            ph * gk.transpose().array())
                               .matrix();
  }
  count_activations(ops, terms);
  count_mul_adds(ops, 2 * terms * (d_h + d_k));
  state.s = keep_k.cwiseProduct(state.s) + gk;
  count_mul_adds(ops, d_k);

  // a = sum_i v~^i (k~^i . q)
  const Vector<Scalar> weights = state.k_tilde * pr.q;
  Vector<Scalar> num = state.v_tilde.transpose() * weights;
  const Scalar sq = state.s.dot(pr.q);
  count_mul_adds(ops, terms * d_k + terms * d_h + d_k + d_h);
  ++state.tick;

  if (cfg.approximation == Approximation::Rank1Sign) return num / detail::guarded(sq);
  const auto r = static_cast<Scalar>(cfg.r);
  if (cfg.derivation_scaling) return (Scalar(2) / r) * num / detail::guarded(sq);
  return num / detail::guarded(Scalar(2) * r * sq);
}

// Causal softmax attention over the last M cached (key, value) pairs.
template <typename Scalar>
Vector<Scalar> windowed_attention_step(const Vector<Scalar>& x, WindowState<Scalar>& state,
                                       const AttentionParams<Scalar>& p, OpCounter* ops = nullptr) {
  const Vector<Scalar> q = matvec(p.w_q, x, ops);
  const Vector<Scalar> k = matvec(p.w_k, x, ops);
  const Vector<Scalar> v = matvec(p.w_v, x, ops);
  require_shape(state.keys.cols() == k.size(), "windowed_attention_step: state width mismatch");
  const Index cap = state.capacity();
  if (state.count < cap) {
    const Index slot = state.slot(state.count);
    state.keys.row(slot) = k.transpose();
    state.values.row(slot) = v.transpose();
    ++state.count;
  } else {
    state.keys.row(state.start) = k.transpose();
    state.values.row(state.start) = v.transpose();
    state.start = (state.start + 1) % cap;
  }
  const Index n = state.count;
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(x.size()));
  Vector<Scalar> scores(n);
  for (Index j = 0; j < n; ++j) scores[j] = state.keys.row(state.slot(j)).dot(q) * inv_sqrt_d;
  const Scalar mx = scores.maxCoeff();
  Scalar total = 0;
  for (Index j = 0; j < n; ++j) {
    scores[j] = std::exp(scores[j] - mx);
    total += scores[j];
  }
  Vector<Scalar> out = Vector<Scalar>::Zero(v.size());
  for (Index j = 0; j < n; ++j) out += (scores[j] / total) * state.values.row(state.slot(j)).transpose();
  count_mul_adds(ops, 2 * n * v.size());
  count_activations(ops, n);
  return out;
}

template <typename Scalar>
Vector<Scalar> mechanism_step(const Vector<Scalar>& x, MechanismState<Scalar>& state,
                              const AttentionParams<Scalar>& p, const MechanismConfig& cfg,
                              OpCounter* ops = nullptr) {
  return std::visit(
      [&](auto& s) -> Vector<Scalar> {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, LinearState<Scalar>>)
          return linear_attention_step(x, s, p, cfg, ops);
        else if constexpr (std::is_same_v<S, GaLiTeState<Scalar>>)
          return galite_step(x, s, p, cfg, ops);
        else if constexpr (std::is_same_v<S, AGaLiTeState<Scalar>>)
          return agalite_step(x, s, p, cfg, ops);
        else
          return windowed_attention_step(x, s, p, ops);
      },
      state);
}

// softmax(Q K^T / sqrt(d)) V with a causal mask; X is N x d, output N x d_h.
template <typename Scalar>
Matrix<Scalar> canonical_attention(const Matrix<Scalar>& x, const AttentionParams<Scalar>& p) {
  require_shape(x.rows() >= 1, "canonical_attention: empty input");
  require_shape(x.cols() == p.w_q.cols() && x.cols() == p.w_k.cols() && x.cols() == p.w_v.cols(),
                "canonical_attention: input width does not match parameters");
  const Matrix<Scalar> q = x * p.w_q.transpose();
  const Matrix<Scalar> k = x * p.w_k.transpose();
  const Matrix<Scalar> v = x * p.w_v.transpose();
  Matrix<Scalar> scores = (q * k.transpose()) / std::sqrt(static_cast<Scalar>(x.cols()));
  for (Index i = 0; i < scores.rows(); ++i)
    for (Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = -std::numeric_limits<Scalar>::infinity();
  return softmax_rows<Scalar>(scores) * v;
}

}  // namespace galite
