#include <doctest.h>

#include "galite/sequence.hpp"

#include <string>
#include <vector>

using namespace galite;

namespace {

struct Case {
  std::string name;
  MechanismConfig cfg;
};

std::vector<Case> cases() {
  std::vector<Case> out;
  auto add = [&](std::string name, Mechanism kind, auto tweak) {
    MechanismConfig cfg;
    cfg.kind = kind;
    cfg.eta = 2;
    cfg.r = 3;
    cfg.memory = 8;
    tweak(cfg);
    out.push_back({std::move(name), cfg});
  };
  add("linear-elu", Mechanism::Linear, [](MechanismConfig& c) { c.feature_map = FeatureMapKind::EluPlusOne; });
  add("linear-learned", Mechanism::Linear, [](MechanismConfig&) {});
  add("galite", Mechanism::GaLiTe, [](MechanismConfig&) {});
  add("galite-elu", Mechanism::GaLiTe, [](MechanismConfig& c) { c.feature_map = FeatureMapKind::EluPlusOne; });
  add("agalite-r3", Mechanism::AGaLiTe, [](MechanismConfig&) {});
  add("agalite-r1-scaled", Mechanism::AGaLiTe, [](MechanismConfig& c) {
    c.r = 1;
    c.derivation_scaling = true;
  });
  add("agalite-rank1", Mechanism::AGaLiTe, [](MechanismConfig& c) {
    c.approximation = Approximation::Rank1Sign;
    c.sign_seed = 9;
  });
  add("windowed-8", Mechanism::Windowed, [](MechanismConfig&) {});
  add("windowed-1", Mechanism::Windowed, [](MechanismConfig& c) { c.memory = 1; });
  return out;
}

double state_diff(const MechanismState<double>& a, const MechanismState<double>& b) {
  REQUIRE(a.index() == b.index());
  return std::visit(
      [&](const auto& sa) -> double {
        using S = std::decay_t<decltype(sa)>;
        const auto& sb = std::get<S>(b);
        if constexpr (std::is_same_v<S, AGaLiTeState<double>>) {
          CHECK(sa.tick == sb.tick);
          return std::max({(sa.v_tilde - sb.v_tilde).cwiseAbs().maxCoeff(),
                           (sa.k_tilde - sb.k_tilde).cwiseAbs().maxCoeff(), (sa.s - sb.s).cwiseAbs().maxCoeff()});
        } else if constexpr (std::is_same_v<S, WindowState<double>>) {
          CHECK(sa.count == sb.count);
          double worst = 0.0;
          for (Index j = 0; j < sa.count; ++j) {
            worst = std::max(worst, (sa.keys.row(sa.slot(j)) - sb.keys.row(sb.slot(j))).cwiseAbs().maxCoeff());
            worst = std::max(worst, (sa.values.row(sa.slot(j)) - sb.values.row(sb.slot(j))).cwiseAbs().maxCoeff());
          }
          return worst;
        } else {
          return std::max((sa.c - sb.c).cwiseAbs().maxCoeff(), (sa.s - sb.s).cwiseAbs().maxCoeff());
        }
      },
      a);
}

// Step-loop reference; resets[t] replaces the state with a fresh one before row t.
Mat step_loop(const Mat& x, const AttentionParams<double>& p, const MechanismConfig& cfg, Index d_h,
              MechanismState<double>& st, const std::vector<char>& resets = {}) {
  Mat out(x.rows(), d_h);
  for (Index t = 0; t < x.rows(); ++t) {
    if (!resets.empty() && resets[static_cast<std::size_t>(t)]) st = make_state<double>(cfg, d_h);
    out.row(t) = mechanism_step<double>(x.row(t).transpose(), st, p, cfg).transpose();
  }
  return out;
}

}  // namespace

TEST_CASE("forward_sequence matches step iteration") {
  const Index d = 6, dh = 4;
  for (const auto& c : cases()) {
    for (Index T : {1, 5, 64, 1024}) {
      CAPTURE(c.name);
      CAPTURE(T);
      Rng rng = make_rng(10, {static_cast<std::uint64_t>(T)});
      const auto p = init_attention_params(c.cfg, d, dh, rng);
      const Mat x = random_normal(T, d, rng);
      auto st = make_state<double>(c.cfg, dh);
      const Mat want = step_loop(x, p, c.cfg, dh, st);
      const auto got = forward_sequence(x, p, c.cfg, make_state<double>(c.cfg, dh));
      CHECK((got.output - want).cwiseAbs().maxCoeff() < 1e-10);
      CHECK(state_diff(got.state, st) < 1e-10);
      if (c.cfg.kind == Mechanism::AGaLiTe) CHECK(std::get<AGaLiTeState<double>>(got.state).tick == T);
    }
  }
}

TEST_CASE("forward_sequence continues from a carried state") {
  const Index d = 6, dh = 4;
  for (const auto& c : cases()) {
    CAPTURE(c.name);
    Rng rng = make_rng(11);
    const auto p = init_attention_params(c.cfg, d, dh, rng);
    const Mat x = random_normal(40, d, rng);
    auto st = make_state<double>(c.cfg, dh);
    const Mat want = step_loop(x, p, c.cfg, dh, st);
    const auto first = forward_sequence(Mat(x.topRows(13)), p, c.cfg, make_state<double>(c.cfg, dh));
    const auto second = forward_sequence(Mat(x.bottomRows(27)), p, c.cfg, first.state);
    CHECK((first.output - want.topRows(13)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((second.output - want.bottomRows(27)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(state_diff(second.state, st) < 1e-10);
  }
}

TEST_CASE("parallel scan mode agrees with sequential") {
  const Index d = 6, dh = 4;
  for (const auto& c : cases()) {
    CAPTURE(c.name);
    Rng rng = make_rng(12);
    const auto p = init_attention_params(c.cfg, d, dh, rng);
    const Mat x = random_normal(300, d, rng);
    const auto seq = forward_sequence(x, p, c.cfg, make_state<double>(c.cfg, dh));
    const auto par = forward_sequence(x, p, c.cfg, make_state<double>(c.cfg, dh), scan::Mode::Parallel, 2);
    const auto par4 = forward_sequence(x, p, c.cfg, make_state<double>(c.cfg, dh), scan::Mode::Parallel, 4);
    CHECK((seq.output - par.output).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(state_diff(seq.state, par.state) < 1e-10);
    CHECK(par.output == par4.output);
  }
}

TEST_CASE("episode resets inside a sequence") {
  const Index d = 6, dh = 4, T = 30;
  std::vector<char> resets(T, 0);
  resets[0] = 1;
  resets[7] = 1;
  resets[8] = 1;
  resets[21] = 1;
  for (const auto& c : cases()) {
    CAPTURE(c.name);
    Rng rng = make_rng(13);
    const auto p = init_attention_params(c.cfg, d, dh, rng);
    const Mat warm = random_normal(5, d, rng);
    const Mat x = random_normal(T, d, rng);
    auto st = make_state<double>(c.cfg, dh);
    step_loop(warm, p, c.cfg, dh, st);
    const MechanismState<double> st0 = st;
    const Mat want = step_loop(x, p, c.cfg, dh, st, resets);

    ad::Tape tape;
    const auto res = forward_sequence(tape.constant(x), attention_constants(tape, p), c.cfg, st0, resets);
    CHECK((res.output.value() - want).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(state_diff(res.state, st) < 1e-10);
    if (c.cfg.kind == Mechanism::AGaLiTe) CHECK(std::get<AGaLiTeState<double>>(res.state).tick == T - 21);
  }
}

TEST_CASE("forward_sequence contract errors") {
  MechanismConfig cfg;
  cfg.kind = Mechanism::GaLiTe;
  cfg.eta = 2;
  Rng rng = make_rng(14);
  const auto p = init_attention_params(cfg, 6, 4, rng);
  CHECK_THROWS_AS(forward_sequence(Mat(0, 6), p, cfg, make_state<double>(cfg, 4)), ShapeError);
  MechanismConfig other = cfg;
  other.kind = Mechanism::AGaLiTe;
  CHECK_THROWS_AS(forward_sequence(Mat(Mat::Zero(3, 6)), p, cfg, make_state<double>(other, 4)), ShapeError);
  CHECK_THROWS_AS(forward_sequence(Mat(Mat::Zero(3, 6)), p, cfg, make_state<double>(cfg, 5)), ShapeError);
  ad::Tape tape;
  CHECK_THROWS_AS(forward_sequence(tape.constant(Mat::Zero(3, 6)), attention_constants(tape, p), cfg,
                                   make_state<double>(cfg, 4), std::vector<char>(2, 0)),
                  ShapeError);
}

TEST_CASE("gradients through each mechanism") {
  const Index d = 6, dh = 4, T = 5;
  for (auto c : cases()) {
    CAPTURE(c.name);
    c.cfg.r = c.cfg.approximation == Approximation::Rank1Sign ? 1 : 2;
    if (c.cfg.kind == Mechanism::Windowed && c.cfg.memory > 1) c.cfg.memory = 3;
    Rng rng = make_rng(15);
    const auto p0 = init_attention_params(c.cfg, d, dh, rng);
    const Mat x0 = random_normal(T, d, rng);
    const Mat weight = random_uniform(T, dh, -1.0, 1.0, rng);

    // Parameters and inputs are all differentiated; state0 comes from a short warm-up.
    auto warm = make_state<double>(c.cfg, dh);
    step_loop(random_normal(2, d, rng), p0, c.cfg, dh, warm);

    std::vector<Mat*> slots;
    AttentionParams<double> p = p0;
    visit_weights(p, [&](const char*, Mat& m) {
      if (m.size() > 0) slots.push_back(&m);
    });
    Mat x = x0;
    slots.push_back(&x);
    Index total = 0;
    for (auto* m : slots) total += m->size();
    Vec theta(total);
    Index at = 0;
    for (auto* m : slots) {
      theta.segment(at, m->size()) = flatten(*m);
      at += m->size();
    }

    auto f = [&](const Vec& th) {
      Index pos = 0;
      for (auto* m : slots) {
        *m = Eigen::Map<const Mat>(th.data() + pos, m->rows(), m->cols());
        pos += m->size();
      }
      ad::Tape tape;
      const AttentionVars pv = attention_params(tape, p);
      const ad::Var xv = tape.param(x);
      const auto res = forward_sequence(xv, pv, c.cfg, warm);
      const ad::Var loss = ad::sum(ad::mul(res.output, tape.constant(weight)));
      const auto g = tape.grad(loss);
      Vec grad(th.size());
      Index gp = 0;
      std::vector<ad::Var> vars;
      visit_weights(pv, [&](const char*, const ad::Var& v) {
        if (v.value().size() > 0) vars.push_back(v);
      });
      vars.push_back(xv);
      for (const auto& v : vars) {
        grad.segment(gp, v.value().size()) = flatten(Mat(g.wrt(v)));
        gp += v.value().size();
      }
      return std::make_pair(loss.value()(0, 0), grad);
    };
    const auto check = ad::finite_diff_check(f, theta);
    CHECK(check.max_rel_error < 1e-5);
    CHECK(f(theta).second.norm() > 1e-3);
  }
}
