#include "galite/checks.hpp"

#include "galite/a2c.hpp"
#include "galite/bench.hpp"
#include "galite/csv.hpp"
#include "galite/kron.hpp"
#include "galite/model.hpp"
#include "galite/rng.hpp"
#include "galite/sequence.hpp"
#include "galite/tmaze.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

namespace galite::checks {

Check below(std::string suite, std::string name, double value, double bound, std::string note) {
  Check c{std::move(suite), std::move(name), value, bound, Relation::Below, false, std::move(note)};
  c.pass = std::isfinite(value) && value < bound;
  return c;
}

Check at_least(std::string suite, std::string name, double value, double bound, std::string note) {
  Check c{std::move(suite), std::move(name), value, bound, Relation::AtLeast, false, std::move(note)};
  c.pass = std::isfinite(value) && value >= bound;
  return c;
}

bool all_pass(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

void write_checks_header(std::ostream& os) { os << "suite,name,value,relation,bound,pass,note\n"; }

void write_check_row(std::ostream& os, const Check& c) {
  os << csv_field(c.suite) << ',' << csv_field(c.name) << ',' << fmt_shortest(c.value) << ',' << (c.relation == Relation::Below ? "<" : ">=")
     << ',' << fmt_shortest(c.bound) << ',' << (c.pass ? 1 : 0) << ',' << csv_field(c.note) << '\n';
}

namespace {

// ---------------------------------------------------------------------------
// Reference formulas written with plain loops.

Vec apply_w(const Mat& w, const Vec& x) {
  Vec y(w.rows());
  for (Index i = 0; i < w.rows(); ++i) {
    double acc = 0.0;
    for (Index j = 0; j < w.cols(); ++j) acc += w(i, j) * x[j];
    y[i] = acc;
  }
  return y;
}

Vec map(const Vec& z, double (*f)(double)) {
  Vec out(z.size());
  for (Index i = 0; i < z.size(); ++i) out[i] = f(z[i]);
  return out;
}

double ref_relu(double v) { return v > 0.0 ? v : 0.0; }
double ref_sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
double ref_elu1(double v) { return v > 0.0 ? v + 1.0 : std::exp(v); }

Vec kron_flat(const Vec& a, const Vec& b) {
  Vec out(a.size() * b.size());
  for (Index i = 0; i < a.size(); ++i)
    for (Index j = 0; j < b.size(); ++j) out[i * b.size() + j] = a[i] * b[j];
  return out;
}

double dot(const Vec& a, const Vec& b) {
  double acc = 0.0;
  for (Index i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

struct Proj {
  Vec q, k, v, beta, gamma;
};

Proj reference_proj(const Vec& x, const AttentionParams<double>& p, const MechanismConfig& cfg) {
  Proj o;
  o.v = apply_w(p.w_v, x);
  if (cfg.learned_features()) {
    o.k = kron_flat(map(apply_w(p.w_p1, x), ref_relu), map(apply_w(p.w_k, x), ref_relu));
    o.q = kron_flat(map(apply_w(p.w_p2, x), ref_relu), map(apply_w(p.w_q, x), ref_relu));
  } else {
    o.k = map(apply_w(p.w_k, x), ref_elu1);
    o.q = map(apply_w(p.w_q, x), ref_elu1);
  }
  if (p.w_beta.size() > 0) {
    o.beta = map(apply_w(p.w_beta, x), ref_sigmoid);
    o.gamma = cfg.learned_features()
                  ? kron_flat(map(apply_w(p.w_p3, x), ref_sigmoid), map(apply_w(p.w_gamma, x), ref_sigmoid))
                  : map(apply_w(p.w_gamma, x), ref_sigmoid);
  }
  return o;
}

// sum_{j<=t} v_j (k_j . q_t) / (sum_{j<=t} k_j . q_t + eps)
Mat kernel_attention(const std::vector<Proj>& pr) {
  const auto n = pr.size();
  Mat out(static_cast<Index>(n), pr[0].v.size());
  for (std::size_t t = 0; t < n; ++t) {
    Vec num = Vec::Zero(pr[0].v.size());
    double den = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      const double w = dot(pr[j].k, pr[t].q);
      num += w * pr[j].v;
      den += w;
    }
    out.row(static_cast<Index>(t)) = (num / (den + kDenomEps)).transpose();
  }
  return out;
}

// C_t = sum_i l_i (x) m_i with l_i = (prod_{j>i} (1 - beta_j)) beta_i v_i and
// m_i = (prod_{j>i} (1 - gamma_j)) gamma_i k_i; s_t = sum_i m_i.
Mat unrolled_galite(const std::vector<Proj>& pr) {
  const auto n = pr.size();
  const Index dh = pr[0].v.size(), dk = pr[0].k.size();
  Mat out(static_cast<Index>(n), dh);
  for (std::size_t t = 0; t < n; ++t) {
    Mat c = Mat::Zero(dh, dk);
    Vec s = Vec::Zero(dk);
    for (std::size_t i = 0; i <= t; ++i) {
      Vec l = pr[i].beta.cwiseProduct(pr[i].v);
      Vec m = pr[i].gamma.cwiseProduct(pr[i].k);
      for (std::size_t j = i + 1; j <= t; ++j) {
        for (Index a = 0; a < dh; ++a) l[a] *= 1.0 - pr[j].beta[a];
        for (Index b = 0; b < dk; ++b) m[b] *= 1.0 - pr[j].gamma[b];
      }
      for (Index a = 0; a < dh; ++a)
        for (Index b = 0; b < dk; ++b) c(a, b) += l[a] * m[b];
      s += m;
    }
    const double den = dot(s, pr[t].q);
    out.row(static_cast<Index>(t)) = (apply_w(c, pr[t].q) / (den + kDenomEps)).transpose();
  }
  return out;
}

// Causal softmax over all rows up to t, scaled by 1/sqrt(d).
Mat causal_softmax(const Mat& x, const AttentionParams<double>& p) {
  const Index n = x.rows();
  std::vector<Vec> q, k, v;
  for (Index t = 0; t < n; ++t) {
    const Vec xt = x.row(t).transpose();
    q.push_back(apply_w(p.w_q, xt));
    k.push_back(apply_w(p.w_k, xt));
    v.push_back(apply_w(p.w_v, xt));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  Mat out(n, p.w_v.rows());
  for (Index t = 0; t < n; ++t) {
    std::vector<double> s(static_cast<std::size_t>(t + 1));
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j <= t; ++j) {
      s[static_cast<std::size_t>(j)] = dot(q[static_cast<std::size_t>(t)], k[static_cast<std::size_t>(j)]) * scale;
      mx = std::max(mx, s[static_cast<std::size_t>(j)]);
    }
    double total = 0.0;
    for (auto& e : s) {
      e = std::exp(e - mx);
      total += e;
    }
    Vec a = Vec::Zero(p.w_v.rows());
    for (Index j = 0; j <= t; ++j) a += (s[static_cast<std::size_t>(j)] / total) * v[static_cast<std::size_t>(j)];
    out.row(t) = a.transpose();
  }
  return out;
}

// max |a - b| scaled by max(1, max |b|).
double mixed_err(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

MechanismConfig mech(Mechanism kind, Index eta = 2, std::int64_t r = 1, Index memory = 8) {
  MechanismConfig cfg;
  cfg.kind = kind;
  cfg.eta = eta;
  cfg.r = r;
  cfg.memory = memory;
  return cfg;
}

Mat step_outputs(const Mat& x, const AttentionParams<double>& p, const MechanismConfig& cfg, Index d_h) {
  auto st = make_state<double>(cfg, d_h);
  Mat out(x.rows(), d_h);
  for (Index t = 0; t < x.rows(); ++t) out.row(t) = mechanism_step<double>(x.row(t).transpose(), st, p, cfg).transpose();
  return out;
}

std::vector<Proj> projections(const Mat& x, const AttentionParams<double>& p, const MechanismConfig& cfg) {
  std::vector<Proj> pr;
  for (Index t = 0; t < x.rows(); ++t) pr.push_back(reference_proj(x.row(t).transpose(), p, cfg));
  return pr;
}

std::string tname(const std::string& base, Index T) { return base + " T=" + std::to_string(T); }

}  // namespace

// ---------------------------------------------------------------------------

std::vector<Check> kron_checks() {
  std::vector<Check> out;
  double closed = 0.0, ratio = 0.0;
  long limit_cells = 0;
  for (std::int64_t r : {1, 2, 3, 4, 7, 16, 64}) {
    for (std::int64_t m = 0; m <= 50; ++m) {
      for (std::int64_t n = 0; n <= 50; ++n) {
        const double dh = kron::delta_hat(m, n, r);
        closed = std::max(closed, std::abs(dh - kron::delta_hat_closed_form(m, n, r)));
        if ((m != 0 || n != 0) && r > 2 * std::max<std::int64_t>(m + n, 1)) {
          ratio = std::max(ratio, std::abs(dh - (m == n ? 1.0 : 0.0)) * static_cast<double>(r) / 4.0);
          ++limit_cells;
        }
      }
    }
  }
  out.push_back(below("kron", "delta_hat vs closed form", closed, 1e-10, "m,n in [0,50]; r in {1,2,3,4,7,16,64}"));
  out.push_back(below("kron", "|delta_hat - delta| * r / 4", ratio, 1.0 + 1e-12,
                      "cells with r > 2 max(m+n,1): " + std::to_string(limit_cells)));
  return out;
}

std::vector<Check> equivalence_checks(std::uint64_t seed) {
  std::vector<Check> out;
  const Index d = 8, dh = 4;

  for (auto fm : {FeatureMapKind::EluPlusOne, FeatureMapKind::LearnedOuterRelu}) {
    for (Index T : {1, 8, 64}) {
      Rng rng = make_rng(seed, {1, static_cast<std::uint64_t>(fm), static_cast<std::uint64_t>(T)});
      MechanismConfig cfg = mech(Mechanism::Linear);
      cfg.feature_map = fm;
      const auto p = init_attention_params(cfg, d, dh, rng);
      const Mat x = random_normal(T, d, rng);
      const double err = mixed_err(step_outputs(x, p, cfg, dh), kernel_attention(projections(x, p, cfg)));
      out.push_back(below("equiv", tname(std::string("linear ") + to_string(fm) + " vs kernel sum", T), err, 1e-10));
    }
  }

  for (Index T : {1, 5, 32}) {
    Rng rng = make_rng(seed, {2, static_cast<std::uint64_t>(T)});
    const MechanismConfig cfg = mech(Mechanism::GaLiTe);
    const auto p = init_attention_params(cfg, d, dh, rng);
    const Mat x = random_normal(T, d, rng);
    const double err = mixed_err(step_outputs(x, p, cfg, dh), unrolled_galite(projections(x, p, cfg)));
    out.push_back(below("equiv", tname("galite vs unrolled outer products", T), err, 1e-10));
  }

  {
    // Relative Frobenius error over the whole output sequence, r = 1e5 >= 8T.
    const std::int64_t r = 100000;
    double worst = 0.0;
    int informative = 0;
    for (Index T : {1, 2, 4, 8, 16}) {
      for (int draw = 0; draw < 20; ++draw) {
        Rng rng = make_rng(seed, {3, static_cast<std::uint64_t>(T), static_cast<std::uint64_t>(draw)});
        const MechanismConfig g = mech(Mechanism::GaLiTe);
        MechanismConfig a = mech(Mechanism::AGaLiTe, 2, r);
        a.derivation_scaling = true;
        const auto p = init_attention_params(g, d, dh, rng);
        const Mat x = random_normal(T, d, rng);
        const Mat og = step_outputs(x, p, g, dh), oa = step_outputs(x, p, a, dh);
        const double ng = og.norm();
        if (ng == 0.0) {
          if (oa.norm() != 0.0) worst = std::numeric_limits<double>::infinity();
          continue;
        }
        ++informative;
        worst = std::max(worst, (oa - og).norm() / ng);
      }
    }
    out.push_back(below("equiv", "agalite (r=1e5) vs galite, T<=16", worst, 1e-2,
                        "sequences with nonzero output: " + std::to_string(informative) + "/100"));
  }

  struct Variant {
    std::string name;
    MechanismConfig cfg;
  };
  std::vector<Variant> variants{{"linear", mech(Mechanism::Linear)},
                                {"galite", mech(Mechanism::GaLiTe)},
                                {"agalite r=3", mech(Mechanism::AGaLiTe, 2, 3)},
                                {"windowed M=8", mech(Mechanism::Windowed)}};
  variants.push_back({"agalite rank1", mech(Mechanism::AGaLiTe)});
  variants.back().cfg.approximation = Approximation::Rank1Sign;
  variants.back().cfg.sign_seed = seed;
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    for (Index T : {1, 64, 1024}) {
      Rng rng = make_rng(seed, {4, vi, static_cast<std::uint64_t>(T)});
      const auto& cfg = variants[vi].cfg;
      const auto p = init_attention_params(cfg, d, dh, rng);
      const Mat x = random_normal(T, d, rng);
      const auto seq = forward_sequence(x, p, cfg, make_state<double>(cfg, dh));
      const double err = mixed_err(seq.output, step_outputs(x, p, cfg, dh));
      out.push_back(below("equiv", tname(variants[vi].name + " sequence vs steps", T), err, 1e-10));
    }
  }

  for (Index T : {1, 16, 64}) {
    for (Index extra : {0, 9}) {
      Rng rng = make_rng(seed, {5, static_cast<std::uint64_t>(T), static_cast<std::uint64_t>(extra)});
      const MechanismConfig cfg = mech(Mechanism::Windowed, 2, 1, T + extra);
      const auto p = init_attention_params(cfg, d, dh, rng);
      const Mat x = random_normal(T, d, rng);
      const double err = mixed_err(step_outputs(x, p, cfg, dh), causal_softmax(x, p));
      out.push_back(
          below("equiv", tname("windowed M=" + std::to_string(T + extra) + " vs canonical", T), err, 1e-12));
      const double lib = mixed_err(canonical_attention(x, p), causal_softmax(x, p));
      if (extra == 0) out.push_back(below("equiv", tname("canonical vs causal softmax reference", T), lib, 1e-12));
    }
  }
  return out;
}

std::vector<Check> first_step_checks(std::uint64_t seed) {
  std::vector<Check> out;
  const Index d = 8, dh = 4;
  const int draws = 200;
  struct Variant {
    std::string name;
    MechanismConfig cfg;
  };
  std::vector<Variant> variants{{"linear -> v", mech(Mechanism::Linear)},
                                {"galite -> beta*v", mech(Mechanism::GaLiTe)},
                                {"agalite r=1 -> beta*v", mech(Mechanism::AGaLiTe, 2, 1)}};
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    const auto& cfg = variants[vi].cfg;
    double rel = 0.0, guarded = 0.0;
    int informative = 0;
    for (int k = 0; k < draws; ++k) {
      Rng rng = make_rng(seed, {6, vi, static_cast<std::uint64_t>(k)});
      const auto p = init_attention_params(cfg, d, dh, rng);
      const Vec x = 4.0 * random_normal(d, 1, rng);
      auto st = make_state<double>(cfg, dh);
      const Vec a = mechanism_step<double>(x, st, p, cfg);
      const Proj pr = reference_proj(x, p, cfg);
      const bool gated = cfg.kind != Mechanism::Linear;
      const Vec want = gated ? Vec(pr.beta.cwiseProduct(pr.v)) : pr.v;
      const double den = gated ? dot(pr.gamma.cwiseProduct(pr.k), pr.q) : dot(pr.k, pr.q);
      // The readout divides by den + eps (by 2 r den + eps for the AGaLiTe scaling).
      const double scaled = cfg.kind == Mechanism::AGaLiTe ? 2.0 * static_cast<double>(cfg.r) * den : den;
      const Vec exact = want * (scaled / (scaled + kDenomEps));
      const double wn = std::max(want.norm(), 1e-300);
      guarded = std::max(guarded, (a - exact).norm() / std::max(exact.norm(), 1e-300));
      if (den >= 1.0) {
        ++informative;
        rel = std::max(rel, (a - want).norm() / wn);
      }
    }
    const std::string note = "draws with readout denominator >= 1: " + std::to_string(informative) + "/" +
                             std::to_string(draws);
    out.push_back(below("first-step", variants[vi].name, informative > 0 ? rel : 1.0, 1e-6, note));
    out.push_back(below("first-step", variants[vi].name + " (guarded form)", guarded, 1e-12));
  }
  return out;
}

namespace {

std::string fd_note(const ad::GradCheckResult& r, Index n) {
  std::ostringstream os;
  os << "params " << n << "; worst index " << r.worst_index << " analytic " << fmt_sig17(r.analytic) << " numeric "
     << fmt_sig17(r.numeric);
  return os.str();
}

// Coordinates where no central difference with h in {1e-4, 1e-5, 1e-6} agrees
// within 1e-5 relative plus a 1e-15/h roundoff floor.
int multi_step_violations(const ad::ValueAndGrad& f, const Vec& theta) {
  const Vec analytic = f(theta).second;
  Vec probe = theta;
  int bad = 0;
  for (Index i = 0; i < theta.size(); ++i) {
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

void add_gradient_rows(std::vector<Check>& out, const std::string& target, const ad::ValueAndGrad& f,
                       const Vec& theta) {
  const auto r = ad::finite_diff_check(f, theta, 1e-5);
  out.push_back(below("gradient", target + " h=1e-5", r.max_rel_error, 1e-5, fd_note(r, theta.size())));
  out.push_back(below("gradient", target + " multi-step", multi_step_violations(f, theta), 1.0,
                      "coordinates disagreeing at every h in {1e-4,1e-5,1e-6}"));
}

ModelConfig grad_model(Mechanism kind, Index layers) {
  ModelConfig cfg;
  cfg.d_in = 5;
  cfg.d = 6;
  cfg.heads = 2;
  cfg.d_h = 4;
  cfg.layers = layers;
  cfg.mechanism = mech(kind, 2, 2, 3);
  cfg.mlp_hidden = 8;
  cfg.actor_hidden = 5;
  cfg.critic_hidden = 5;
  return cfg;
}

// Loss and flattened gradient over every model parameter.
template <typename Build>
ad::ValueAndGrad model_objective(Model& m, Build build) {
  return [&m, build](const Vec& th) {
    unflatten_params(m, th);
    ad::Tape tape;
    ModelVars mv = model_params(tape, m);
    const ad::Var loss = build(tape, mv);
    const auto g = tape.grad(loss);
    Vec grad(th.size());
    Index at = 0;
    visit_weights(mv, [&](const std::string&, ad::Var& v) {
      const Mat gv = g.wrt(v);
      grad.segment(at, gv.size()) = flatten(gv);
      at += gv.size();
    });
    return std::make_pair(loss.value()(0, 0), grad);
  };
}

a2c::EnvRollout random_rollout(const Model& m, const ModelConfig& cfg, ModelState<double>& state, Index steps,
                               Index done_at, Rng& rng) {
  a2c::EnvRollout r;
  r.obs = random_normal(steps, cfg.d_in, rng);
  r.start_state = state;
  std::uniform_int_distribution<int> pick(0, static_cast<int>(cfg.actions) - 1);
  std::uniform_real_distribution<double> reward(-1.0, 1.0);
  bool fresh = false;
  for (Index t = 0; t < steps; ++t) {
    if (fresh) state = make_model_state<double>(cfg);
    r.resets.push_back(fresh ? 1 : 0);
    const PolicyOutput po = policy_heads(stack_step<double>(r.obs.row(t).transpose(), state, m, cfg), m);
    r.actions.push_back(pick(rng));
    r.values.push_back(po.value);
    r.log_probs.push_back(0.0);
    r.rewards.push_back(reward(rng));
    r.dones.push_back(t == done_at ? 1 : 0);
    fresh = t == done_at;
  }
  r.bootstrap = 0.3;
  return r;
}

}  // namespace

std::vector<Check> gradient_checks(std::uint64_t seed) {
  std::vector<Check> out;
  const Index d = 6, dh = 4, T = 5;

  struct Variant {
    std::string name;
    MechanismConfig cfg;
  };
  std::vector<Variant> variants{{"linear", mech(Mechanism::Linear, 2, 2, 3)},
                                {"galite", mech(Mechanism::GaLiTe, 2, 2, 3)},
                                {"agalite", mech(Mechanism::AGaLiTe, 2, 2, 3)},
                                {"windowed", mech(Mechanism::Windowed, 2, 2, 3)}};
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    const auto& cfg = variants[vi].cfg;
    Rng rng = make_rng(seed, {7, vi});
    AttentionParams<double> p = init_attention_params(cfg, d, dh, rng);
    Mat x = random_normal(T, d, rng);
    const Mat weight = random_uniform(T, dh, -1.0, 1.0, rng);
    auto warm = make_state<double>(cfg, dh);
    const Mat pre = random_normal(2, d, rng);
    for (Index t = 0; t < pre.rows(); ++t) mechanism_step<double>(pre.row(t).transpose(), warm, p, cfg);

    std::vector<Mat*> slots;
    visit_weights(p, [&](const char*, Mat& m) {
      if (m.size() > 0) slots.push_back(&m);
    });
    slots.push_back(&x);
    Index total = 0;
    for (auto* m : slots) total += m->size();
    Vec theta(total);
    Index at = 0;
    for (auto* m : slots) {
      theta.segment(at, m->size()) = flatten(*m);
      at += m->size();
    }
    ad::ValueAndGrad f = [&](const Vec& th) {
      Index pos = 0;
      for (auto* m : slots) {
        *m = Eigen::Map<const Mat>(th.data() + pos, m->rows(), m->cols());
        pos += m->size();
      }
      ad::Tape tape;
      const AttentionVars pv = attention_params(tape, p);
      const ad::Var xv = tape.param(x);
      const ad::Var loss = ad::sum(ad::mul(forward_sequence(xv, pv, cfg, warm).output, tape.constant(weight)));
      const auto g = tape.grad(loss);
      std::vector<ad::Var> vars;
      visit_weights(pv, [&](const char*, const ad::Var& v) {
        if (v.value().size() > 0) vars.push_back(v);
      });
      vars.push_back(xv);
      Vec grad(th.size());
      Index gp = 0;
      for (const auto& v : vars) {
        grad.segment(gp, v.value().size()) = flatten(Mat(g.wrt(v)));
        gp += v.value().size();
      }
      return std::make_pair(loss.value()(0, 0), grad);
    };
    add_gradient_rows(out, "mechanism " + variants[vi].name, f, theta);
  }

  {
    Rng rng = make_rng(seed, {8});
    GateWeights<Mat> g;
    for (Mat* w : {&g.w_r, &g.u_r, &g.w_z, &g.u_z, &g.w_g, &g.u_g}) *w = 0.5 * random_normal(d, d, rng);
    Mat x = random_normal(T, d, rng), y = random_normal(T, d, rng);
    const Mat w = random_normal(T, d, rng);
    std::vector<Mat*> slots{&g.w_r, &g.u_r, &g.w_z, &g.u_z, &g.w_g, &g.u_g, &x, &y};
    Vec theta(6 * d * d + 2 * T * d);
    Index at = 0;
    for (auto* m : slots) {
      theta.segment(at, m->size()) = flatten(*m);
      at += m->size();
    }
    ad::ValueAndGrad f = [&](const Vec& th) {
      Index pos = 0;
      for (auto* m : slots) {
        *m = Eigen::Map<const Mat>(th.data() + pos, m->rows(), m->cols());
        pos += m->size();
      }
      ad::Tape tape;
      GateWeights<ad::Var> gv{tape.param(g.w_r), tape.param(g.u_r), tape.param(g.w_z),
                              tape.param(g.u_z), tape.param(g.w_g), tape.param(g.u_g)};
      const ad::Var xv = tape.param(x), yv = tape.param(y);
      const ad::Var loss = ad::sum(ad::mul(gru_gate(xv, yv, gv, 2.0), tape.constant(w)));
      const auto grads = tape.grad(loss);
      Vec grad(th.size());
      Index gp = 0;
      for (const auto& v : {gv.w_r, gv.u_r, gv.w_z, gv.u_z, gv.w_g, gv.u_g, xv, yv}) {
        grad.segment(gp, v.value().size()) = flatten(Mat(grads.wrt(v)));
        gp += v.value().size();
      }
      return std::make_pair(loss.value()(0, 0), grad);
    };
    add_gradient_rows(out, "gru_gate", f, theta);
  }

  for (auto kind : {Mechanism::GaLiTe, Mechanism::AGaLiTe, Mechanism::Windowed}) {
    const ModelConfig cfg = grad_model(kind, 2);
    Rng rng = make_rng(seed, {9, static_cast<std::uint64_t>(kind)});
    Model m = init_model(cfg, rng);
    const Mat obs = random_normal(T, cfg.d_in, rng);
    const Mat wl = random_normal(T, cfg.actions, rng), wv = random_normal(T, 1, rng);
    const auto f = model_objective(m, [cfg, obs, wl, wv](ad::Tape& tape, const ModelVars& mv) {
      const auto res = stack_forward_sequence(tape.constant(obs), mv, cfg, make_model_state<double>(cfg));
      const auto pv = policy_heads(res.features, mv);
      return ad::add(ad::sum(ad::mul(pv.logits, tape.constant(wl))), ad::sum(ad::mul(pv.values, tape.constant(wv))));
    });
    add_gradient_rows(out, std::string("2-block stack ") + to_string(kind), f, flatten_params(m));
  }

  {
    const ModelConfig cfg = grad_model(Mechanism::AGaLiTe, 2);
    Rng rng = make_rng(seed, {10});
    Model m = init_model(cfg, rng);
    auto state = make_model_state<double>(cfg);
    stack_step<double>(random_normal(cfg.d_in, 1, rng), state, m, cfg);
    a2c::Rollout ro;
    ro.envs.push_back(random_rollout(m, cfg, state, T, 2, rng));
    ro.envs.push_back(random_rollout(m, cfg, state, T, T - 1, rng));
    const a2c::TrainConfig tc;
    ad::ValueAndGrad f = [&](const Vec& th) {
      unflatten_params(m, th);
      const auto lg = a2c::a2c_loss_and_grad(ro, m, cfg, tc);
      return std::make_pair(lg.stats.total, lg.grad);
    };
    add_gradient_rows(out, "A2C loss agalite", f, flatten_params(m));
  }
  return out;
}

std::vector<Check> environment_checks(std::uint64_t seed) {
  std::vector<Check> out;
  int one_bit = 0, formula = 0;
  for (int n = 0; n <= 255; ++n) {
    const auto g = tmaze::gray_code(n);
    const int want = n ^ (n >> 1);
    for (int i = 0; i < 8; ++i) formula += g[static_cast<std::size_t>(i)] != ((want >> (7 - i)) & 1);
    if (n <= 254) {
      const auto h = tmaze::gray_code(n + 1);
      int diff = 0;
      for (std::size_t i = 0; i < 8; ++i) diff += g[i] != h[i];
      one_bit += diff != 1;
    }
  }
  out.push_back(below("env", "gray code one-bit change on [0,254]", one_bit, 1.0, "violations"));
  out.push_back(below("env", "gray code equals n ^ (n >> 1)", formula, 1.0, "mismatched bits"));

  int tenths_bad = 0;
  double float_err = 0.0;
  for (int c = 1; c <= 255; ++c) {
    tmaze::Env env({c, 0, derive_seed(seed, {11, static_cast<std::uint64_t>(c)})});
    env.reset();
    const tmaze::Action turn = env.cue() == tmaze::Cue::Left ? tmaze::Action::Up : tmaze::Action::Down;
    long tenths = 0;
    double ret = 0.0;
    tmaze::StepResult res;
    for (int i = 0; i < c; ++i) {
      res = env.step(tmaze::Action::Right);
      tenths += res.reward == -0.1 ? -1 : 1000;
      ret += res.reward;
    }
    res = env.step(turn);
    tenths += res.reward == 4.0 ? 40 : 1000;
    ret += res.reward;
    tenths_bad += (tenths != 40 - c || !res.success || !res.done) ? 1 : 0;
    float_err = std::max(float_err, std::abs(ret - (4.0 - 0.1 * c)));
  }
  out.push_back(below("env", "optimal return = 4 - 0.1 c in tenths, c in [1,255]", tenths_bad, 1.0,
                      "corridors with a mismatch"));
  out.push_back(below("env", "optimal return float sum vs 4 - 0.1 c", float_err, 1e-12));

  const int trials = 10000;
  const double z_bound = 3.29;  // two-sided 99.9%
  const double sd = std::sqrt(0.25 / trials);
  {
    tmaze::Env env({10, 0, derive_seed(seed, {12})});
    int left = 0;
    for (int i = 0; i < trials; ++i) {
      env.reset();
      left += env.cue() == tmaze::Cue::Left ? 1 : 0;
    }
    const double freq = static_cast<double>(left) / trials;
    out.push_back(below("env", "cue frequency z-score (10^4 resets)", std::abs(freq - 0.5) / sd, z_bound,
                        "left frequency " + fmt_shortest(freq)));
  }
  {
    tmaze::Env env({2, 200, derive_seed(seed, {13})});
    Rng rng = make_rng(seed, {14});
    std::uniform_int_distribution<int> pick(0, 3);
    int decisions = 0, wins = 0;
    while (decisions < trials) {
      env.reset();
      while (true) {
        const auto res = env.step(static_cast<tmaze::Action>(pick(rng)));
        if (!res.done) continue;
        if (res.junction) {
          ++decisions;
          wins += res.success ? 1 : 0;
        }
        break;
      }
    }
    const double rate = static_cast<double>(wins) / trials;
    out.push_back(below("env", "random junction success z-score (10^4 decisions)", std::abs(rate - 0.5) / sd, z_bound,
                        "success rate " + fmt_shortest(rate)));
  }
  return out;
}

std::vector<Check> complexity_checks() {
  std::vector<Check> out;
  ModelConfig cfg;
  cfg.d = 256;
  cfg.d_h = 64;
  cfg.heads = 1;
  cfg.layers = 1;
  cfg.mechanism = mech(Mechanism::AGaLiTe, 4, 1);
  {
    std::uint64_t lo = std::numeric_limits<std::uint64_t>::max(), hi = 0;
    for (std::int64_t t : {1, 100, 10000}) {
      const auto n = bench::count_ops(cfg, t).mul_adds;
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    out.push_back(below("complexity", "agalite mul-adds spread over t in {1,1e2,1e4}", static_cast<double>(hi - lo), 0.5,
                        "mul-adds " + std::to_string(lo)));
  }
  {
    ModelConfig w = cfg;
    w.mechanism = mech(Mechanism::Windowed, 4, 1);
    std::vector<double> ms, counts;
    for (Index m : {16, 32, 64, 128, 256, 512}) {
      w.mechanism.memory = m;
      ms.push_back(static_cast<double>(m));
      counts.push_back(static_cast<double>(bench::count_ops(w, m).mul_adds));
    }
    const auto fit = bench::linear_fit(ms, counts);
    out.push_back(at_least("complexity", "windowed mul-adds affine in M (R^2)", fit.r_squared, 0.999,
                           "slope " + fmt_shortest(fit.slope) + " per slot"));
  }
  {
    int mismatches = 0;
    for (auto kind : {Mechanism::Linear, Mechanism::GaLiTe, Mechanism::AGaLiTe, Mechanism::Windowed})
      for (Index heads : {1, 4})
        for (std::int64_t r : {1, 3, 7}) {
          ModelConfig c = cfg;
          c.heads = heads;
          c.mechanism = mech(kind, 4, r, 32);
          mismatches += bench::state_size(c) == bench::allocated_state_scalars(c) ? 0 : 1;
        }
    out.push_back(below("complexity", "state_size vs allocated scalars", mismatches, 1.0, "mismatched configs of 24"));
  }
  {
    ModelConfig g = cfg;
    g.mechanism = mech(Mechanism::GaLiTe, 4, 1);
    const auto sg = bench::state_size(g), sa = bench::state_size(cfg);
    out.push_back(at_least("complexity", "galite / agalite state ratio (d_h=64, eta=4, r=1)",
                           static_cast<double>(sg) / static_cast<double>(sa), 10.0,
                           std::to_string(sg) + " / " + std::to_string(sa)));
  }
  return out;
}

}  // namespace galite::checks
