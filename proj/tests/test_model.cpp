#include <doctest.h>

#include "galite/model.hpp"
#include "oracles.hpp"

#include <cmath>
#include <sstream>

using namespace galite;

namespace {

ModelConfig small(Mechanism kind, Index layers = 2) {
  ModelConfig cfg;
  cfg.d_in = 5;
  cfg.d = 6;
  cfg.heads = 2;
  cfg.d_h = 4;
  cfg.layers = layers;
  cfg.mechanism.kind = kind;
  cfg.mechanism.eta = 2;
  cfg.mechanism.r = 2;
  cfg.mechanism.memory = 3;
  cfg.mlp_hidden = 8;
  cfg.actor_hidden = 5;
  cfg.critic_hidden = 5;
  return cfg;
}

GateWeights<Mat> random_gate(Index d, Rng& rng, double scale) {
  GateWeights<Mat> g;
  g.w_r = scale * random_normal(d, d, rng);
  g.u_r = scale * random_normal(d, d, rng);
  g.w_z = scale * random_normal(d, d, rng);
  g.u_z = scale * random_normal(d, d, rng);
  g.w_g = scale * random_normal(d, d, rng);
  g.u_g = scale * random_normal(d, d, rng);
  return g;
}

Mat stream(const Mat& obs, const Model& m, const ModelConfig& cfg, ModelState<double>& st,
           const std::vector<char>& resets = {}) {
  Mat out(obs.rows(), cfg.d);
  for (Index t = 0; t < obs.rows(); ++t) {
    if (!resets.empty() && resets[static_cast<std::size_t>(t)]) st = make_model_state<double>(cfg);
    out.row(t) = stack_step<double>(obs.row(t).transpose(), st, m, cfg).transpose();
  }
  return out;
}

// Gradient of a scalar built by `build` against central differences over every model parameter;
// returns the number of disagreeing coordinates.
template <typename Build>
int model_gradcheck(Model m, Build build) {
  const Vec theta = flatten_params(m);
  auto f = [&](const Vec& th) {
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
  CHECK(f(theta).second.norm() > 1e-3);
  return oracle::fd_violations(f, theta);
}

}  // namespace

TEST_CASE("gru_gate") {
  Rng rng = make_rng(20);
  const Index d = 6;
  const Vec x = random_normal(d, 1, rng), y = random_normal(d, 1, rng);

  SUBCASE("large bias starts near identity") {
    const auto g = random_gate(d, rng, 0.01);
    CHECK((gru_gate<double>(x, y, g, 8.0) - x).cwiseAbs().maxCoeff() < 0.01);
  }
  SUBCASE("saturated update gate") {
    const auto g = random_gate(d, rng, 0.5);
    const Vec r = oracle::sigmoid(oracle::apply_w(g.w_r, y) + oracle::apply_w(g.u_r, x));
    Vec h = oracle::apply_w(g.w_g, y) + oracle::apply_w(g.u_g, r.cwiseProduct(x));
    for (Index i = 0; i < d; ++i) h[i] = std::tanh(h[i]);
    CHECK((gru_gate<double>(x, y, g, -1000.0) - h).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((gru_gate<double>(x, y, g, 1000.0) - x).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("matches the GRU formula") {
    const auto g = random_gate(d, rng, 0.7);
    const Vec r = oracle::sigmoid(oracle::apply_w(g.w_r, y) + oracle::apply_w(g.u_r, x));
    Vec zin = oracle::apply_w(g.w_z, y) + oracle::apply_w(g.u_z, x);
    for (Index i = 0; i < d; ++i) zin[i] -= 2.0;
    const Vec z = oracle::sigmoid(zin);
    Vec h = oracle::apply_w(g.w_g, y) + oracle::apply_w(g.u_g, r.cwiseProduct(x));
    for (Index i = 0; i < d; ++i) h[i] = std::tanh(h[i]);
    Vec want(d);
    for (Index i = 0; i < d; ++i) want[i] = (1.0 - z[i]) * x[i] + z[i] * h[i];
    CHECK((gru_gate<double>(x, y, g, 2.0) - want).cwiseAbs().maxCoeff() < 1e-14);

    ad::Tape tape;
    GateWeights<ad::Var> gv{tape.constant(g.w_r), tape.constant(g.u_r), tape.constant(g.w_z),
                            tape.constant(g.u_z), tape.constant(g.w_g), tape.constant(g.u_g)};
    const ad::Var out = gru_gate(tape.constant(Mat(x.transpose())), tape.constant(Mat(y.transpose())), gv, 2.0);
    CHECK((out.value().row(0).transpose() - want).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("length mismatch") {
    const auto g = random_gate(d, rng, 0.1);
    CHECK_THROWS_AS(gru_gate<double>(x, Vec::Zero(d - 1), g, 2.0), ShapeError);
  }
  SUBCASE("gradient") {
    const Index T = 5;
    GateWeights<Mat> g = random_gate(d, rng, 0.5);
    const Mat xs = random_normal(T, d, rng), ys = random_normal(T, d, rng), w = random_normal(T, d, rng);
    std::vector<Mat*> slots{&g.w_r, &g.u_r, &g.w_z, &g.u_z, &g.w_g, &g.u_g};
    Vec theta(6 * d * d);
    for (std::size_t i = 0; i < slots.size(); ++i) theta.segment(static_cast<Index>(i) * d * d, d * d) = flatten(*slots[i]);
    Mat xv = xs, yv = ys;
    auto f = [&](const Vec& th) {
      for (std::size_t i = 0; i < slots.size(); ++i)
        *slots[i] = Eigen::Map<const Mat>(th.data() + static_cast<Index>(i) * d * d, d, d);
      ad::Tape tape;
      GateWeights<ad::Var> gv{tape.param(g.w_r), tape.param(g.u_r), tape.param(g.w_z),
                              tape.param(g.u_z), tape.param(g.w_g), tape.param(g.u_g)};
      const ad::Var loss = ad::sum(ad::mul(gru_gate(tape.param(xv), tape.param(yv), gv, 2.0), tape.constant(w)));
      const auto grads = tape.grad(loss);
      Vec grad(th.size());
      const std::vector<ad::Var> vars{gv.w_r, gv.u_r, gv.w_z, gv.u_z, gv.w_g, gv.u_g};
      for (std::size_t i = 0; i < vars.size(); ++i)
        grad.segment(static_cast<Index>(i) * d * d, d * d) = flatten(Mat(grads.wrt(vars[i])));
      return std::make_pair(loss.value()(0, 0), grad);
    };
    CHECK(ad::finite_diff_check(f, theta).max_rel_error < 1e-5);
  }
}

TEST_CASE("multi_head") {
  Rng rng = make_rng(21);
  MechanismConfig mc;
  mc.kind = Mechanism::GaLiTe;
  mc.eta = 2;
  const Index d = 4, dh = 4;

  SUBCASE("one head with identity projection") {
    BlockWeights<Mat> b;
    b.heads.push_back(init_attention_params(mc, d, dh, rng));
    b.w_o = Mat::Identity(d, dh);
    std::vector<MechanismState<double>> states{make_state<double>(mc, dh)};
    auto ref = make_state<double>(mc, dh);
    for (int t = 0; t < 5; ++t) {
      const Vec x = random_normal(d, 1, rng);
      CHECK((multi_head(x, states, b, mc) - mechanism_step(x, ref, b.heads[0], mc)).norm() == 0.0);
    }
  }
  SUBCASE("identical heads give repeated blocks") {
    BlockWeights<Mat> b;
    const auto p = init_attention_params(mc, d, dh, rng);
    b.heads = {p, p};
    b.w_o = Mat::Identity(2 * dh, 2 * dh);
    std::vector<MechanismState<double>> states{make_state<double>(mc, dh), make_state<double>(mc, dh)};
    for (int t = 0; t < 5; ++t) {
      const Vec out = multi_head<double>(random_normal(d, 1, rng), states, b, mc);
      CHECK(out.head(dh) == out.tail(dh));
    }
  }
  SUBCASE("four random heads match a per-head loop") {
    BlockWeights<Mat> b;
    for (int h = 0; h < 4; ++h) b.heads.push_back(init_attention_params(mc, d, dh, rng));
    b.w_o = random_normal(d, 4 * dh, rng);
    std::vector<MechanismState<double>> states(4, make_state<double>(mc, dh));
    auto refs = states;
    for (int t = 0; t < 6; ++t) {
      const Vec x = random_normal(d, 1, rng);
      Vec cat(4 * dh);
      for (int h = 0; h < 4; ++h) cat.segment(h * dh, dh) = mechanism_step(x, refs[h], b.heads[h], mc);
      CHECK((multi_head(x, states, b, mc) - oracle::apply_w(b.w_o, cat)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("head count mismatch") {
    BlockWeights<Mat> b;
    b.heads.push_back(init_attention_params(mc, d, dh, rng));
    b.w_o = Mat::Identity(d, dh);
    std::vector<MechanismState<double>> states;
    CHECK_THROWS_AS(multi_head<double>(Vec::Zero(d), states, b, mc), ShapeError);
  }
}

TEST_CASE("block with zero weights and identity-start gates") {
  ModelConfig cfg = small(Mechanism::AGaLiTe, 1);
  cfg.gate_bias = 8.0;
  Rng rng = make_rng(22);
  Model m = init_model(cfg, rng);
  auto& b = m.blocks[0];
  visit_weights(b, "", [](const std::string& name, Mat& w) {
    if (name.find("ln") == std::string::npos) w.setZero();
  });
  std::vector<MechanismState<double>> states(2, make_state<double>(cfg.mechanism, cfg.d_h));
  for (int t = 0; t < 5; ++t) {
    const Vec x = random_normal(cfg.d, 1, rng);
    const Vec out = block_forward(x, states, b, cfg);
    CHECK((out - x).cwiseAbs().maxCoeff() < 1e-3 * x.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("stack sequence matches streaming") {
  for (auto kind : {Mechanism::Linear, Mechanism::GaLiTe, Mechanism::AGaLiTe, Mechanism::Windowed}) {
    CAPTURE(to_string(kind));
    const ModelConfig cfg = small(kind);
    Rng rng = make_rng(23);
    const Model m = init_model(cfg, rng);
    const Mat obs = random_normal(32, cfg.d_in, rng);

    auto st = make_model_state<double>(cfg);
    const Mat want = stream(obs, m, cfg, st);

    ad::Tape tape;
    const auto res = stack_forward_sequence(tape.constant(obs), model_constants(tape, m), cfg,
                                            make_model_state<double>(cfg));
    CHECK((res.features.value() - want).cwiseAbs().maxCoeff() < 1e-10);

    // Split into two halves with the state carried across.
    ad::Tape t2;
    const ModelVars mv = model_constants(t2, m);
    const auto a = stack_forward_sequence(t2.constant(Mat(obs.topRows(16))), mv, cfg, make_model_state<double>(cfg));
    const auto b = stack_forward_sequence(t2.constant(Mat(obs.bottomRows(16))), mv, cfg, a.state);
    CHECK((a.features.value() - want.topRows(16)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((b.features.value() - want.bottomRows(16)).cwiseAbs().maxCoeff() < 1e-10);

    // Policy heads agree between the two paths.
    const auto pv = policy_heads(res.features, model_constants(tape, m));
    for (Index t = 0; t < 32; t += 7) {
      const auto po = policy_heads(Vec(want.row(t).transpose()), m);
      CHECK((pv.logits.value().row(t).transpose() - po.logits).cwiseAbs().maxCoeff() < 1e-10);
      CHECK(std::abs(pv.values.value()(t, 0) - po.value) < 1e-10);
    }
  }
}

TEST_CASE("stack resets match streaming resets") {
  const ModelConfig cfg = small(Mechanism::AGaLiTe);
  Rng rng = make_rng(24);
  const Model m = init_model(cfg, rng);
  const Mat obs = random_normal(20, cfg.d_in, rng);
  std::vector<char> resets(20, 0);
  resets[6] = 1;
  resets[15] = 1;
  auto st = make_model_state<double>(cfg);
  stream(random_normal(3, cfg.d_in, rng), m, cfg, st);
  const ModelState<double> st0 = st;
  const Mat want = stream(obs, m, cfg, st, resets);
  ad::Tape tape;
  const auto res = stack_forward_sequence(tape.constant(obs), model_constants(tape, m), cfg, st0, resets);
  CHECK((res.features.value() - want).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("zero layers gives the embedding") {
  const ModelConfig cfg = small(Mechanism::AGaLiTe, 0);
  Rng rng = make_rng(25);
  Model m = init_model(cfg, rng);
  m.b_e = random_normal(1, cfg.d, rng);
  const Mat obs = random_normal(4, cfg.d_in, rng);
  ad::Tape tape;
  const auto res = stack_forward_sequence(tape.constant(obs), model_constants(tape, m), cfg, make_model_state<double>(cfg));
  for (Index t = 0; t < 4; ++t) {
    const Vec want = oracle::apply_w(m.w_e, obs.row(t).transpose()) + m.b_e.row(0).transpose();
    CHECK((res.features.value().row(t).transpose() - want).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("stack causality") {
  const ModelConfig cfg = small(Mechanism::GaLiTe);
  Rng rng = make_rng(26);
  const Model m = init_model(cfg, rng);
  const Mat obs = random_normal(10, cfg.d_in, rng);
  auto s0 = make_model_state<double>(cfg);
  const Mat base = stream(obs, m, cfg, s0);
  for (Index t = 0; t < 10; ++t) {
    Mat pert = obs;
    pert.row(t) += random_normal(1, cfg.d_in, rng);
    auto s1 = make_model_state<double>(cfg);
    const Mat out = stream(pert, m, cfg, s1);
    CHECK(out.topRows(t) == base.topRows(t));
    CHECK(out.row(t) != base.row(t));
  }
}

TEST_CASE("gradients through a single block") {
  for (auto kind : {Mechanism::GaLiTe, Mechanism::AGaLiTe, Mechanism::Windowed}) {
    const std::string name = to_string(kind);
    CAPTURE(name);
    Rng rng = make_rng(27);
    const Index T = 5;
    const ModelConfig cfg = small(kind, 1);
    const Model m = init_model(cfg, rng);
    const Mat x = random_normal(T, cfg.d, rng), w = random_normal(T, cfg.d, rng);
    const int bad = model_gradcheck(m, [&](ad::Tape& tape, const ModelVars& mv) {
      std::vector<MechanismState<double>> out;
      const std::vector<MechanismState<double>> st(2, make_state<double>(cfg.mechanism, cfg.d_h));
      const ad::Var y = block_forward(tape.constant(x), mv.blocks[0], cfg, st, out);
      return ad::sum(ad::mul(y, tape.constant(w)));
    });
    CHECK(bad == 0);
  }
}

TEST_CASE("gradients through a two-block stack with policy heads") {
  for (auto kind : {Mechanism::GaLiTe, Mechanism::AGaLiTe, Mechanism::Windowed}) {
    const std::string name = to_string(kind);
    CAPTURE(name);
    Rng rng = make_rng(28);
    const Index T = 5;
    const ModelConfig cfg = small(kind, 2);
    const Model m = init_model(cfg, rng);
    const Mat obs = random_normal(T, cfg.d_in, rng);
    const Mat wl = random_normal(T, cfg.actions, rng), wv = random_normal(T, 1, rng);
    const int bad = model_gradcheck(m, [&](ad::Tape& tape, const ModelVars& mv) {
      const auto res = stack_forward_sequence(tape.constant(obs), mv, cfg, make_model_state<double>(cfg));
      const auto pv = policy_heads(res.features, mv);
      return ad::add(ad::sum(ad::mul(pv.logits, tape.constant(wl))), ad::sum(ad::mul(pv.values, tape.constant(wv))));
    });
    CHECK(bad == 0);
  }
}

TEST_CASE("parameter flattening") {
  const ModelConfig cfg = small(Mechanism::AGaLiTe);
  Rng rng = make_rng(28);
  Model m = init_model(cfg, rng);
  const Vec theta = flatten_params(m);
  CHECK(theta.size() == parameter_count(m));
  Model other = init_model(cfg, rng);
  unflatten_params(other, theta);
  CHECK(flatten_params(other) == theta);
  CHECK_THROWS_AS(unflatten_params(other, Vec::Zero(theta.size() - 1)), ShapeError);

  std::vector<std::string> names;
  visit_weights(m, [&](const std::string& n, Mat&) { names.push_back(n); });
  CHECK(names.front() == "embed.w");
  CHECK(std::find(names.begin(), names.end(), "block1.head1.w_q") != names.end());
  CHECK(std::find(names.begin(), names.end(), "block0.gate2.u_g") != names.end());
  CHECK(names.back() == "critic.b2");
}

TEST_CASE("checkpoint round trip") {
  ModelConfig cfg = small(Mechanism::AGaLiTe);
  cfg.mechanism.approximation = Approximation::Rank1Sign;
  cfg.mechanism.gates = GateOverride{0.25, 0.5};
  cfg.mechanism.sign_seed = 77;
  cfg.gate_bias = 1.5;
  Rng rng = make_rng(29);
  const Model m = init_model(cfg, rng);
  std::stringstream ss;
  write_checkpoint(ss, cfg, m);
  const std::string text = ss.str();
  CHECK(text.rfind("galite-checkpoint 1\n", 0) == 0);

  std::istringstream in(text);
  const auto [cfg2, m2] = read_checkpoint(in);
  CHECK(config_echo(cfg2) == config_echo(cfg));
  CHECK(flatten_params(m2) == flatten_params(m));
  std::stringstream again;
  write_checkpoint(again, cfg2, m2);
  CHECK(again.str() == text);

  std::istringstream bad("galite-checkpoint 2\n");
  CHECK_THROWS(read_checkpoint(bad));
  std::istringstream truncated(text.substr(0, text.size() / 2));
  CHECK_THROWS(read_checkpoint(truncated));
}

TEST_CASE("state size formulas") {
  ModelConfig cfg;  // d_h = 64, heads = 4, eta = 4, r = 1
  cfg.mechanism.kind = Mechanism::GaLiTe;
  CHECK(state_size(cfg) == cfg.heads * (64 * 256 + 256));
  CHECK(state_size(cfg) / cfg.heads == 16640);
  CHECK(state_scalars(make_model_state<double>(cfg)) == state_size(cfg) * cfg.layers);
  const Index galite = state_size(cfg);

  cfg.mechanism.kind = Mechanism::AGaLiTe;
  CHECK(state_size(cfg) == cfg.heads * (2 * (64 + 256) + 256));
  CHECK(state_size(cfg) / cfg.heads == 896);
  CHECK(state_scalars(make_model_state<double>(cfg)) == state_size(cfg) * cfg.layers);
  const double ratio = static_cast<double>(galite) / static_cast<double>(state_size(cfg));
  CHECK(ratio >= 10.0);
  CHECK(ratio == doctest::Approx(18.57).epsilon(1e-3));

  cfg.mechanism.kind = Mechanism::Windowed;
  cfg.mechanism.memory = 100;
  CHECK(state_size(cfg) == 4 * 100 * 2 * 64);
  CHECK(state_scalars(make_model_state<double>(cfg)) == state_size(cfg) * cfg.layers);

  cfg.mechanism.kind = Mechanism::Linear;
  CHECK(state_scalars(make_model_state<double>(cfg)) == state_size(cfg) * cfg.layers);
}

TEST_CASE("config validation") {
  ModelConfig cfg = small(Mechanism::AGaLiTe);
  cfg.d = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = small(Mechanism::AGaLiTe);
  cfg.mechanism.r = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = small(Mechanism::Windowed);
  cfg.mechanism.memory = 0;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  CHECK_NOTHROW(small(Mechanism::Linear).validate());
}
