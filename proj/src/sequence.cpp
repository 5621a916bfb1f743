#include "galite/sequence.hpp"

#include <cmath>
#include <limits>

namespace galite {

using ad::Var;

namespace {

template <typename Make>
AttentionVars lift(const AttentionParams<double>& p, Make make) {
  AttentionVars v;
  v.w_q = make(p.w_q);
  v.w_k = make(p.w_k);
  v.w_v = make(p.w_v);
  v.w_beta = make(p.w_beta);
  v.w_gamma = make(p.w_gamma);
  v.w_p1 = make(p.w_p1);
  v.w_p2 = make(p.w_p2);
  v.w_p3 = make(p.w_p3);
  return v;
}

Var row_of(ad::Tape& tape, const Vec& v) { return tape.constant(Mat(v.transpose())); }

Var ones_minus(Var a) { return ad::affine(a, -1.0, 1.0); }

// Zeroes decay rows at episode starts.
Var mask_decay(Var decay, const Vec& keep) {
  if (keep.minCoeff() == 1.0) return decay;
  return ad::mul_col(decay, decay.tape->constant(Mat(keep)));
}

struct Features {
  Var q, k, v;
};

Features features(Var x, const AttentionVars& p, const MechanismConfig& cfg) {
  Features f;
  f.v = ad::matmul_nt(x, p.w_v);
  if (cfg.learned_features()) {
    f.k = ad::row_outer(ad::relu(ad::matmul_nt(x, p.w_p1)), ad::relu(ad::matmul_nt(x, p.w_k)));
    f.q = ad::row_outer(ad::relu(ad::matmul_nt(x, p.w_p2)), ad::relu(ad::matmul_nt(x, p.w_q)));
  } else {
    f.k = ad::affine(ad::elu(ad::matmul_nt(x, p.w_k)), 1.0, 1.0);
    f.q = ad::affine(ad::elu(ad::matmul_nt(x, p.w_q)), 1.0, 1.0);
  }
  return f;
}

void gates(Var x, const AttentionVars& p, const MechanismConfig& cfg, Index d_h, Index d_k, Var& beta,
           Var& gamma) {
  ad::Tape& tape = *x.tape;
  const Index steps = x.rows();
  if (cfg.gates) {
    beta = tape.constant(Mat::Constant(steps, d_h, cfg.gates->beta));
    gamma = tape.constant(Mat::Constant(steps, d_k, cfg.gates->gamma));
    return;
  }
  beta = ad::sigmoid(ad::matmul_nt(x, p.w_beta));
  if (cfg.learned_features())
    gamma = ad::row_outer(ad::sigmoid(ad::matmul_nt(x, p.w_p3)), ad::sigmoid(ad::matmul_nt(x, p.w_gamma)));
  else
    gamma = ad::sigmoid(ad::matmul_nt(x, p.w_gamma));
}

Var readout(Var num, Var sq, double den_scale) {
  return ad::div_col(num, ad::affine(sq, den_scale, kDenomEps));
}

// Per-row phase index, reset-aware, and the tick after the last row.
std::vector<std::int64_t> phase_indices(std::int64_t tick0, const std::vector<char>& resets, Index steps,
                                        std::int64_t& tick_out) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(steps));
  std::int64_t tick = tick0;
  for (Index t = 0; t < steps; ++t) {
    if (!resets.empty() && resets[static_cast<std::size_t>(t)]) tick = 0;
    idx[static_cast<std::size_t>(t)] = tick + 1;
    ++tick;
  }
  tick_out = tick;
  return idx;
}

SequenceResult linear_like(Var x, const AttentionVars& p, const MechanismConfig& cfg, const Mat& c0,
                           const Vec& s0, const Vec& keep) {
  ad::Tape& tape = *x.tape;
  const Index steps = x.rows();
  Features f = features(x, p, cfg);
  const Index d_h = f.v.cols();
  const Index d_k = f.k.cols();
  require_shape(c0.rows() == d_h && c0.cols() == d_k && s0.size() == d_k,
                "forward_sequence: state shape does not match parameters");

  Var c_decay, c_input, s_decay, s_input;
  if (cfg.kind == Mechanism::Linear) {
    c_decay = tape.constant(Mat::Ones(steps, d_h * d_k));
    s_decay = tape.constant(Mat::Ones(steps, d_k));
    c_input = ad::row_outer(f.v, f.k);
    s_input = f.k;
  } else {
    Var beta, gamma;
    gates(x, p, cfg, d_h, d_k, beta, gamma);
    const Var gk = ad::mul(gamma, f.k);
    s_decay = ones_minus(gamma);
    c_decay = ad::row_outer(ones_minus(beta), s_decay);
    c_input = ad::row_outer(ad::mul(beta, f.v), gk);
    s_input = gk;
  }
  const Var c = ad::linear_scan(mask_decay(c_decay, keep), c_input, row_of(tape, flatten(c0)));
  const Var s = ad::linear_scan(mask_decay(s_decay, keep), s_input, row_of(tape, s0));
  const Var out = readout(ad::row_matvec(c, f.q, d_h), ad::row_dot(s, f.q), 1.0);

  const Mat& cv = c.value();
  Mat c_last = Eigen::Map<const Mat>(cv.row(steps - 1).data(), d_h, d_k);
  Vec s_last = s.value().row(steps - 1).transpose();
  SequenceResult res{out, {}};
  if (cfg.kind == Mechanism::Linear)
    res.state = LinearState<double>{std::move(c_last), std::move(s_last)};
  else
    res.state = GaLiTeState<double>{std::move(c_last), std::move(s_last)};
  return res;
}

SequenceResult agalite(Var x, const AttentionVars& p, const MechanismConfig& cfg,
                       const AGaLiTeState<double>& st0, const Vec& keep, const std::vector<char>& resets) {
  ad::Tape& tape = *x.tape;
  const Index steps = x.rows();
  Features f = features(x, p, cfg);
  const Index d_h = f.v.cols();
  const Index d_k = f.k.cols();
  const auto terms = static_cast<Index>(cfg.approx_terms());
  require_shape(st0.v_tilde.rows() == terms && st0.v_tilde.cols() == d_h && st0.k_tilde.rows() == terms &&
                    st0.k_tilde.cols() == d_k && st0.s.size() == d_k,
                "forward_sequence: AGaLiTe state shape does not match parameters");

  Var beta, gamma;
  gates(x, p, cfg, d_h, d_k, beta, gamma);
  const Var bv = ad::mul(beta, f.v);
  const Var gk = ad::mul(gamma, f.k);
  const Var keep_v = mask_decay(ones_minus(beta), keep);
  const Var keep_k = mask_decay(ones_minus(gamma), keep);

  std::int64_t tick_out = 0;
  const auto idx = phase_indices(st0.tick, resets, steps, tick_out);

  // All r+1 recurrences side by side: column block i holds term i.
  std::vector<Var> v_decay, v_input, k_decay, k_input;
  for (Index i = 0; i < terms; ++i) {
    Mat ph(steps, 1);
    for (Index t = 0; t < steps; ++t) {
      const auto at = idx[static_cast<std::size_t>(t)];
      ph(t, 0) = cfg.approximation == Approximation::Rank1Sign ? rank1_sign(cfg.sign_seed, at)
                                                                : kron::phase(i, at, cfg.r);
    }
    const Var phase = tape.constant(std::move(ph));
    v_decay.push_back(keep_v);
    k_decay.push_back(keep_k);
    v_input.push_back(ad::mul_col(bv, phase));
    k_input.push_back(ad::mul_col(gk, phase));
  }
  const Var vt = ad::linear_scan(ad::concat_cols(v_decay), ad::concat_cols(v_input),
                                 row_of(tape, flatten(st0.v_tilde)));
  const Var kt = ad::linear_scan(ad::concat_cols(k_decay), ad::concat_cols(k_input),
                                 row_of(tape, flatten(st0.k_tilde)));
  const Var s = ad::linear_scan(keep_k, gk, row_of(tape, st0.s));

  Var num;
  for (Index i = 0; i < terms; ++i) {
    const Var w = ad::row_dot(ad::slice_cols(kt, i * d_k, d_k), f.q);
    const Var term = ad::mul_col(ad::slice_cols(vt, i * d_h, d_h), w);
    num = i == 0 ? term : ad::add(num, term);
  }
  const Var sq = ad::row_dot(s, f.q);
  Var out;
  if (cfg.approximation == Approximation::Rank1Sign) {
    out = readout(num, sq, 1.0);
  } else {
    const auto r = static_cast<double>(cfg.r);
    out = cfg.derivation_scaling ? ad::scale(readout(num, sq, 1.0), 2.0 / r) : readout(num, sq, 2.0 * r);
  }

  AGaLiTeState<double> st;
  st.v_tilde = Eigen::Map<const Mat>(vt.value().row(steps - 1).data(), terms, d_h);
  st.k_tilde = Eigen::Map<const Mat>(kt.value().row(steps - 1).data(), terms, d_k);
  st.s = s.value().row(steps - 1).transpose();
  st.tick = tick_out;
  return {out, st};
}

SequenceResult windowed(Var x, const AttentionVars& p, const WindowState<double>& st0,
                        const std::vector<char>& resets) {
  ad::Tape& tape = *x.tape;
  const Index steps = x.rows();
  const Index cap = st0.capacity();
  const Index cached = st0.count;
  const Var q = ad::matmul_nt(x, p.w_q);
  const Var k = ad::matmul_nt(x, p.w_k);
  const Var v = ad::matmul_nt(x, p.w_v);
  const Index d_h = v.cols();
  require_shape(st0.keys.cols() == k.cols(), "forward_sequence: window width mismatch");

  Var keys = k, values = v;
  if (cached > 0) {
    Mat ck(cached, d_h), cv(cached, d_h);
    for (Index j = 0; j < cached; ++j) {
      ck.row(j) = st0.keys.row(st0.slot(j));
      cv.row(j) = st0.values.row(st0.slot(j));
    }
    keys = ad::concat_rows(tape.constant(std::move(ck)), k);
    values = ad::concat_rows(tape.constant(std::move(cv)), v);
  }

  // Column j covers stream position j - cached relative to the first row.
  const Index total = cached + steps;
  Mat mask = Mat::Zero(steps, total);
  Index episode_start = -cached;
  for (Index t = 0; t < steps; ++t) {
    if (!resets.empty() && resets[static_cast<std::size_t>(t)]) episode_start = t;
    for (Index j = 0; j < total; ++j) {
      const Index pos = j - cached;
      if (pos > t || pos < episode_start || t - pos >= cap) mask(t, j) = -std::numeric_limits<double>::infinity();
    }
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  const Var scores = ad::add(ad::scale(ad::matmul_nt(q, keys), inv_sqrt_d), tape.constant(std::move(mask)));
  const Var out = ad::matmul(ad::softmax_rows(scores), values);

  WindowState<double> st{Mat::Zero(cap, d_h), Mat::Zero(cap, d_h), 0, 0};
  const Index first = std::max(episode_start, steps - cap);
  for (Index pos = first; pos < steps; ++pos) {
    st.keys.row(st.count) = keys.value().row(pos + cached);
    st.values.row(st.count) = values.value().row(pos + cached);
    ++st.count;
  }
  return {out, st};
}

}  // namespace

AttentionVars attention_constants(ad::Tape& tape, const AttentionParams<double>& p) {
  return lift(p, [&](const Mat& m) { return tape.constant(m); });
}

AttentionVars attention_params(ad::Tape& tape, const AttentionParams<double>& p) {
  return lift(p, [&](const Mat& m) { return tape.param(m); });
}

SequenceResult forward_sequence(Var x, const AttentionVars& p, const MechanismConfig& cfg,
                                const MechanismState<double>& state0, const std::vector<char>& resets) {
  const Index steps = x.rows();
  require_shape(steps >= 1, "forward_sequence: empty sequence");
  require_shape(resets.empty() || static_cast<Index>(resets.size()) == steps,
                "forward_sequence: resets length must equal sequence length");
  Vec keep = Vec::Ones(steps);
  for (Index t = 0; t < static_cast<Index>(resets.size()); ++t)
    if (resets[static_cast<std::size_t>(t)]) keep[t] = 0.0;

  return std::visit(
      [&](const auto& st) -> SequenceResult {
        using S = std::decay_t<decltype(st)>;
        if constexpr (std::is_same_v<S, AGaLiTeState<double>>) {
          require_shape(cfg.kind == Mechanism::AGaLiTe, "forward_sequence: state kind does not match mechanism");
          return agalite(x, p, cfg, st, keep, resets);
        } else if constexpr (std::is_same_v<S, WindowState<double>>) {
          require_shape(cfg.kind == Mechanism::Windowed, "forward_sequence: state kind does not match mechanism");
          return windowed(x, p, st, resets);
        } else {
          const bool linear = std::is_same_v<S, LinearState<double>>;
          require_shape(linear == (cfg.kind == Mechanism::Linear) && cfg.kind != Mechanism::AGaLiTe &&
                            cfg.kind != Mechanism::Windowed,
                        "forward_sequence: state kind does not match mechanism");
          return linear_like(x, p, cfg, st.c, st.s, keep);
        }
      },
      state0);
}

SequenceOutput forward_sequence(const Mat& x, const AttentionParams<double>& p, const MechanismConfig& cfg,
                                const MechanismState<double>& state0, scan::Mode mode, int threads) {
  ad::Tape tape;
  tape.set_scan(mode, threads);
  const Var xv = tape.constant(x);
  auto res = forward_sequence(xv, attention_constants(tape, p), cfg, state0);
  return {res.output.value(), std::move(res.state)};
}

}  // namespace galite
