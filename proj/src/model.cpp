#include "galite/model.hpp"

#include "galite/csv.hpp"

#include <istream>
#include <ostream>
#include <sstream>

namespace galite {

using ad::Var;

void ModelConfig::validate() const {
  if (d_in < 1 || d < 1 || heads < 1 || d_h < 1 || layers < 0 || actions < 1 || actor_hidden < 1 ||
      critic_hidden < 1)
    throw ContractError("model config: dimensions must be positive");
  if (mechanism.kind == Mechanism::AGaLiTe && mechanism.r < 1) throw ContractError("model config: r must be >= 1");
  if (mechanism.learned_features() && mechanism.eta < 1) throw ContractError("model config: eta must be >= 1");
  if (mechanism.kind == Mechanism::Windowed && mechanism.memory < 1)
    throw ContractError("model config: memory must be >= 1");
}

namespace {

Mat zeros_row(Index n) { return Mat::Zero(1, n); }
Mat ones_row(Index n) { return Mat::Ones(1, n); }

GateWeights<Mat> init_gate(Index d, Rng& rng) {
  GateWeights<Mat> g;
  g.w_r = orthogonal(d, d, rng);
  g.u_r = orthogonal(d, d, rng);
  g.w_z = orthogonal(d, d, rng);
  g.u_z = orthogonal(d, d, rng);
  g.w_g = orthogonal(d, d, rng);
  g.u_g = orthogonal(d, d, rng);
  return g;
}

}  // namespace

Model init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  m.w_e = orthogonal(cfg.d, cfg.d_in, rng);
  m.b_e = zeros_row(cfg.d);
  const Index hidden = cfg.mlp_width();
  for (Index l = 0; l < cfg.layers; ++l) {
    BlockWeights<Mat> b;
    for (Index h = 0; h < cfg.heads; ++h) b.heads.push_back(init_attention_params(cfg.mechanism, cfg.d, cfg.d_h, rng));
    b.w_o = orthogonal(cfg.d, cfg.heads * cfg.d_h, rng);
    b.ln1_g = ones_row(cfg.d);
    b.ln1_b = zeros_row(cfg.d);
    b.ln2_g = ones_row(cfg.d);
    b.ln2_b = zeros_row(cfg.d);
    b.mlp_w1 = orthogonal(hidden, cfg.d, rng, std::sqrt(2.0));
    b.mlp_b1 = zeros_row(hidden);
    b.mlp_w2 = orthogonal(cfg.d, hidden, rng);
    b.mlp_b2 = zeros_row(cfg.d);
    b.gate1 = init_gate(cfg.d, rng);
    b.gate2 = init_gate(cfg.d, rng);
    m.blocks.push_back(std::move(b));
  }
  m.actor_w1 = orthogonal(cfg.actor_hidden, cfg.d, rng, std::sqrt(2.0));
  m.actor_b1 = zeros_row(cfg.actor_hidden);
  m.actor_w2 = orthogonal(cfg.actions, cfg.actor_hidden, rng, 0.01);
  m.actor_b2 = zeros_row(cfg.actions);
  m.critic_w1 = orthogonal(cfg.critic_hidden, cfg.d, rng, std::sqrt(2.0));
  m.critic_b1 = zeros_row(cfg.critic_hidden);
  m.critic_w2 = orthogonal(1, cfg.critic_hidden, rng, 1.0);
  m.critic_b2 = zeros_row(1);
  return m;
}

Index parameter_count(const Model& m) {
  Index n = 0;
  visit_weights(const_cast<Model&>(m), [&](const std::string&, Mat& w) { n += w.size(); });
  return n;
}

Vec flatten_params(const Model& m) {
  Vec theta(parameter_count(m));
  Index at = 0;
  visit_weights(const_cast<Model&>(m), [&](const std::string&, Mat& w) {
    theta.segment(at, w.size()) = flatten(w);
    at += w.size();
  });
  return theta;
}

void unflatten_params(Model& m, const Vec& theta) {
  require_shape(theta.size() == parameter_count(m), "unflatten_params: length mismatch");
  Index at = 0;
  visit_weights(m, [&](const std::string&, Mat& w) {
    w = Eigen::Map<const Mat>(theta.data() + at, w.rows(), w.cols());
    at += w.size();
  });
}

ModelVars model_params(ad::Tape& tape, const Model& m) {
  return map_weights<Var>(m, [&](const Mat& w) { return tape.param(w); });
}

ModelVars model_constants(ad::Tape& tape, const Model& m) {
  return map_weights<Var>(m, [&](const Mat& w) { return tape.constant(w); });
}

PolicyOutput policy_heads(const Vec& features, const Model& m) {
  PolicyOutput out;
  const Vec a = relu(Vec(m.actor_w1 * features + m.actor_b1.row(0).transpose()));
  out.logits = m.actor_w2 * a + m.actor_b2.row(0).transpose();
  const Vec c = relu(Vec(m.critic_w1 * features + m.critic_b1.row(0).transpose()));
  out.value = (m.critic_w2 * c)(0) + m.critic_b2(0, 0);
  return out;
}

// ---------------------------------------------------------------------------

Var layer_norm_rows(Var x, Var g, Var b) { return ad::add_row(ad::mul_row(ad::layernorm_rows(x), g), b); }

Var gru_gate(Var x, Var y, const GateWeights<Var>& g, double gate_bias) {
  require_shape(x.rows() == y.rows() && x.cols() == y.cols(), "gru_gate: x and y shapes differ");
  const Var r = ad::sigmoid(ad::matmul_nt(y, g.w_r) + ad::matmul_nt(x, g.u_r));
  const Var z = ad::sigmoid(ad::affine(ad::matmul_nt(y, g.w_z) + ad::matmul_nt(x, g.u_z), 1.0, -gate_bias));
  const Var h = ad::tanh(ad::matmul_nt(y, g.w_g) + ad::matmul_nt(r * x, g.u_g));
  return x + z * (h - x);
}

Var multi_head(Var x, const BlockWeights<Var>& b, const MechanismConfig& cfg,
               const std::vector<MechanismState<double>>& states, std::vector<MechanismState<double>>& out,
               const std::vector<char>& resets) {
  require_shape(!b.heads.empty() && states.size() == b.heads.size(), "multi_head: head count mismatch");
  std::vector<Var> parts;
  out.clear();
  for (std::size_t h = 0; h < b.heads.size(); ++h) {
    auto res = forward_sequence(x, b.heads[h], cfg, states[h], resets);
    parts.push_back(res.output);
    out.push_back(std::move(res.state));
  }
  const Var cat = parts.size() == 1 ? parts.front() : ad::concat_cols(parts);
  return ad::matmul_nt(cat, b.w_o);
}

Var block_forward(Var x, const BlockWeights<Var>& b, const ModelConfig& cfg,
                  const std::vector<MechanismState<double>>& states, std::vector<MechanismState<double>>& out,
                  const std::vector<char>& resets) {
  const Var att = multi_head(layer_norm_rows(x, b.ln1_g, b.ln1_b), b, cfg.mechanism, states, out, resets);
  const Var x1 = gru_gate(x, att, b.gate1, cfg.gate_bias);
  const Var n2 = layer_norm_rows(x1, b.ln2_g, b.ln2_b);
  const Var hidden = ad::relu(ad::add_row(ad::matmul_nt(n2, b.mlp_w1), b.mlp_b1));
  const Var mlp = ad::add_row(ad::matmul_nt(hidden, b.mlp_w2), b.mlp_b2);
  return gru_gate(x1, mlp, b.gate2, cfg.gate_bias);
}

StackResult stack_forward_sequence(Var x, const ModelVars& m, const ModelConfig& cfg,
                                   const ModelState<double>& state0, const std::vector<char>& resets) {
  require_shape(x.rows() >= 1, "stack_forward_sequence: empty sequence");
  require_shape(x.cols() == m.w_e.cols(), "stack_forward_sequence: observation width mismatch");
  require_shape(state0.layers.size() == m.blocks.size(), "stack_forward_sequence: layer count mismatch");
  StackResult res;
  res.state.layers.resize(m.blocks.size());
  Var h = ad::add_row(ad::matmul_nt(x, m.w_e), m.b_e);
  for (std::size_t l = 0; l < m.blocks.size(); ++l)
    h = block_forward(h, m.blocks[l], cfg, state0.layers[l], res.state.layers[l], resets);
  res.features = h;
  return res;
}

PolicyVars policy_heads(Var features, const ModelVars& m) {
  PolicyVars out;
  const Var a = ad::relu(ad::add_row(ad::matmul_nt(features, m.actor_w1), m.actor_b1));
  out.logits = ad::add_row(ad::matmul_nt(a, m.actor_w2), m.actor_b2);
  const Var c = ad::relu(ad::add_row(ad::matmul_nt(features, m.critic_w1), m.critic_b1));
  out.values = ad::add_row(ad::matmul_nt(c, m.critic_w2), m.critic_b2);
  return out;
}

Index state_size(const ModelConfig& cfg) {
  const auto& mc = cfg.mechanism;
  const Index dk = mc.key_dim(cfg.d_h);
  switch (mc.kind) {
    case Mechanism::Linear:
    case Mechanism::GaLiTe:
      return cfg.heads * (cfg.d_h * dk + dk);
    case Mechanism::AGaLiTe:
      return cfg.heads * (static_cast<Index>(mc.approx_terms()) * (cfg.d_h + dk) + dk);
    case Mechanism::Windowed:
      return mc.memory * 2 * cfg.d_h * cfg.heads;
  }
  return 0;
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> config_echo(const ModelConfig& cfg) {
  const auto& mc = cfg.mechanism;
  std::map<std::string, std::string> kv;
  kv["d_in"] = std::to_string(cfg.d_in);
  kv["d"] = std::to_string(cfg.d);
  kv["heads"] = std::to_string(cfg.heads);
  kv["d_h"] = std::to_string(cfg.d_h);
  kv["layers"] = std::to_string(cfg.layers);
  kv["mlp_hidden"] = std::to_string(cfg.mlp_width());
  kv["gate_bias"] = fmt_shortest(cfg.gate_bias);
  kv["actor_hidden"] = std::to_string(cfg.actor_hidden);
  kv["critic_hidden"] = std::to_string(cfg.critic_hidden);
  kv["actions"] = std::to_string(cfg.actions);
  kv["mechanism"] = to_string(mc.kind);
  kv["feature_map"] = to_string(mc.feature_map);
  kv["eta"] = std::to_string(mc.eta);
  kv["r"] = std::to_string(mc.r);
  kv["memory"] = std::to_string(mc.memory);
  kv["derivation_scaling"] = mc.derivation_scaling ? "1" : "0";
  kv["approximation"] = mc.approximation == Approximation::Rank1Sign ? "rank1" : "cosine";
  kv["sign_seed"] = std::to_string(mc.sign_seed);
  kv["gates"] = mc.gates ? fmt_shortest(mc.gates->beta) + ":" + fmt_shortest(mc.gates->gamma) : "learned";
  return kv;
}

namespace {

ModelConfig config_from_echo(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error("checkpoint: missing config key '" + k + "'");
    return it->second;
  };
  ModelConfig cfg;
  cfg.d_in = std::stoll(get("d_in"));
  cfg.d = std::stoll(get("d"));
  cfg.heads = std::stoll(get("heads"));
  cfg.d_h = std::stoll(get("d_h"));
  cfg.layers = std::stoll(get("layers"));
  cfg.mlp_hidden = std::stoll(get("mlp_hidden"));
  cfg.gate_bias = std::stod(get("gate_bias"));
  cfg.actor_hidden = std::stoll(get("actor_hidden"));
  cfg.critic_hidden = std::stoll(get("critic_hidden"));
  cfg.actions = std::stoll(get("actions"));
  auto& mc = cfg.mechanism;
  mc.kind = parse_mechanism(get("mechanism"));
  mc.feature_map = get("feature_map") == "elu1" ? FeatureMapKind::EluPlusOne : FeatureMapKind::LearnedOuterRelu;
  mc.eta = std::stoll(get("eta"));
  mc.r = std::stoll(get("r"));
  mc.memory = std::stoll(get("memory"));
  mc.derivation_scaling = get("derivation_scaling") == "1";
  mc.approximation = get("approximation") == "rank1" ? Approximation::Rank1Sign : Approximation::Cosine;
  mc.sign_seed = std::stoull(get("sign_seed"));
  const std::string& gates = get("gates");
  if (gates != "learned") {
    const auto colon = gates.find(':');
    if (colon == std::string::npos) throw std::runtime_error("checkpoint: malformed gates value");
    mc.gates = GateOverride{std::stod(gates.substr(0, colon)), std::stod(gates.substr(colon + 1))};
  }
  return cfg;
}

}  // namespace

void write_checkpoint(std::ostream& os, const ModelConfig& cfg, const Model& m) {
  os << "galite-checkpoint 1\n";
  for (const auto& [k, v] : config_echo(cfg)) os << "config " << k << ' ' << v << '\n';
  visit_weights(const_cast<Model&>(m), [&](const std::string& name, Mat& w) {
    os << "param " << name << ' ' << w.rows() << ' ' << w.cols() << '\n';
    for (Index i = 0; i < w.size(); ++i) os << (i ? " " : "") << fmt_sig17(w.data()[i]);
    os << '\n';
  });
  os << "end\n";
}

std::pair<ModelConfig, Model> read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "galite-checkpoint 1")
    throw std::runtime_error("checkpoint: unsupported header '" + line + "'");
  std::map<std::string, std::string> kv;
  std::map<std::string, Mat> params;
  bool ended = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "config") {
      std::string k, v;
      ls >> k >> v;
      kv[k] = v;
    } else if (tag == "param") {
      std::string name;
      Index rows = 0, cols = 0;
      if (!(ls >> name >> rows >> cols)) throw std::runtime_error("checkpoint: malformed param line");
      std::string values;
      std::getline(is, values);
      std::istringstream vs(values);
      Mat w(rows, cols);
      for (Index i = 0; i < w.size(); ++i)
        if (!(vs >> w.data()[i])) throw std::runtime_error("checkpoint: short value line for " + name);
      params[name] = std::move(w);
    } else if (tag == "end") {
      ended = true;
      break;
    } else if (!tag.empty()) {
      throw std::runtime_error("checkpoint: unknown record '" + tag + "'");
    }
  }
  if (!ended) throw std::runtime_error("checkpoint: missing end marker");
  ModelConfig cfg = config_from_echo(kv);
  Rng rng(0);
  Model m = init_model(cfg, rng);
  visit_weights(m, [&](const std::string& name, Mat& w) {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("checkpoint: missing parameter " + name);
    if (it->second.rows() != w.rows() || it->second.cols() != w.cols())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    w = it->second;
  });
  return {cfg, m};
}

}  // namespace galite
