#pragma once

#include "galite/attention.hpp"
#include "galite/autodiff.hpp"
#include "galite/sequence.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

// Multi-head attention blocks with GRU-type gating, the embedded block stack,
// and the actor/critic heads used by the trainer.
namespace galite {

struct ModelConfig {
  Index d_in = 16;
  Index d = 128;
  Index heads = 4;
  Index d_h = 64;
  Index layers = 4;
  MechanismConfig mechanism;
  Index mlp_hidden = 0;  // 0 means 4 * d
  double gate_bias = 2.0;
  Index actor_hidden = 128;
  Index critic_hidden = 128;
  Index actions = 4;

  Index mlp_width() const { return mlp_hidden > 0 ? mlp_hidden : 4 * d; }
  void validate() const;
};

template <typename T>
struct GateWeights {
  T w_r, u_r, w_z, u_z, w_g, u_g;  // d x d
};

template <typename T>
struct BlockWeights {
  std::vector<AttentionWeights<T>> heads;
  T w_o;               // d x heads*d_h
  T ln1_g, ln1_b;      // 1 x d
  T ln2_g, ln2_b;      // 1 x d
  T mlp_w1, mlp_b1;    // hidden x d, 1 x hidden
  T mlp_w2, mlp_b2;    // d x hidden, 1 x d
  GateWeights<T> gate1, gate2;
};

template <typename T>
struct ModelWeights {
  T w_e, b_e;  // d x d_in, 1 x d
  std::vector<BlockWeights<T>> blocks;
  T actor_w1, actor_b1, actor_w2, actor_b2;
  T critic_w1, critic_b1, critic_w2, critic_b2;
};

template <typename W, typename F>
void visit_weights(GateWeights<W>& g, const std::string& prefix, F&& f) {
  f(prefix + "w_r", g.w_r);
  f(prefix + "u_r", g.u_r);
  f(prefix + "w_z", g.w_z);
  f(prefix + "u_z", g.u_z);
  f(prefix + "w_g", g.w_g);
  f(prefix + "u_g", g.u_g);
}

template <typename W, typename F>
void visit_weights(BlockWeights<W>& b, const std::string& prefix, F&& f) {
  for (std::size_t h = 0; h < b.heads.size(); ++h) {
    const std::string hp = prefix + "head" + std::to_string(h) + ".";
    visit_weights(b.heads[h], [&](const char* name, W& m) { f(hp + name, m); });
  }
  f(prefix + "w_o", b.w_o);
  f(prefix + "ln1_g", b.ln1_g);
  f(prefix + "ln1_b", b.ln1_b);
  f(prefix + "ln2_g", b.ln2_g);
  f(prefix + "ln2_b", b.ln2_b);
  f(prefix + "mlp_w1", b.mlp_w1);
  f(prefix + "mlp_b1", b.mlp_b1);
  f(prefix + "mlp_w2", b.mlp_w2);
  f(prefix + "mlp_b2", b.mlp_b2);
  visit_weights(b.gate1, prefix + "gate1.", f);
  visit_weights(b.gate2, prefix + "gate2.", f);
}

// Visits every weight with its canonical name, e.g. "block1.head0.w_q".
template <typename W, typename F>
void visit_weights(ModelWeights<W>& m, F&& f) {
  f("embed.w", m.w_e);
  f("embed.b", m.b_e);
  for (std::size_t l = 0; l < m.blocks.size(); ++l)
    visit_weights(m.blocks[l], "block" + std::to_string(l) + ".", f);
  f("actor.w1", m.actor_w1);
  f("actor.b1", m.actor_b1);
  f("actor.w2", m.actor_w2);
  f("actor.b2", m.actor_b2);
  f("critic.w1", m.critic_w1);
  f("critic.b1", m.critic_b1);
  f("critic.w2", m.critic_w2);
  f("critic.b2", m.critic_b2);
}

// Same layer/head layout as `src`, fields default-constructed.
template <typename U, typename T>
ModelWeights<U> like(const ModelWeights<T>& src) {
  ModelWeights<U> out;
  out.blocks.resize(src.blocks.size());
  for (std::size_t l = 0; l < src.blocks.size(); ++l) out.blocks[l].heads.resize(src.blocks[l].heads.size());
  return out;
}

// Applies `f` to every field of `src` and stores the results in the same layout.
template <typename U, typename T, typename F>
ModelWeights<U> map_weights(const ModelWeights<T>& src, F&& f) {
  ModelWeights<U> out = like<U>(src);
  std::vector<const T*> from;
  visit_weights(const_cast<ModelWeights<T>&>(src), [&](const std::string&, T& m) { from.push_back(&m); });
  std::size_t i = 0;
  visit_weights(out, [&](const std::string&, U& m) { m = f(*from[i++]); });
  return out;
}

using Model = ModelWeights<Mat>;
using ModelVars = ModelWeights<ad::Var>;

Model init_model(const ModelConfig& cfg, Rng& rng);

Index parameter_count(const Model& m);
Vec flatten_params(const Model& m);
void unflatten_params(Model& m, const Vec& theta);

ModelVars model_params(ad::Tape& tape, const Model& m);
ModelVars model_constants(ad::Tape& tape, const Model& m);

// ---------------------------------------------------------------------------
// Streaming evaluation

template <typename Scalar>
struct ModelState {
  std::vector<std::vector<MechanismState<Scalar>>> layers;  // [layer][head]
};

template <typename Scalar>
ModelState<Scalar> make_model_state(const ModelConfig& cfg) {
  ModelState<Scalar> st;
  st.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& layer : st.layers)
    for (Index h = 0; h < cfg.heads; ++h) layer.push_back(make_state<Scalar>(cfg.mechanism, cfg.d_h));
  return st;
}

template <typename Scalar>
Index state_scalars(const ModelState<Scalar>& st) {
  Index n = 0;
  for (const auto& layer : st.layers)
    for (const auto& s : layer) n += state_scalars<Scalar>(s);
  return n;
}

template <typename Scalar>
Vector<Scalar> layer_norm(const Vector<Scalar>& x, const Matrix<Scalar>& g, const Matrix<Scalar>& b,
                          Scalar eps = Scalar(1e-5)) {
  const Scalar mean = x.mean();
  const Scalar var = (x.array() - mean).square().mean();
  const Scalar inv = Scalar(1) / std::sqrt(var + eps);
  return ((x.array() - mean) * inv * g.row(0).transpose().array() + b.row(0).transpose().array()).matrix();
}

// out = (1 - z) x + z h, with r = s(W_r y + U_r x), z = s(W_z y + U_z x - b_g),
// h = tanh(W_g y + U_g (r x)).
template <typename Scalar>
Vector<Scalar> gru_gate(const Vector<Scalar>& x, const Vector<Scalar>& y, const GateWeights<Matrix<Scalar>>& g,
                        Scalar gate_bias) {
  require_shape(x.size() == y.size(), "gru_gate: x and y lengths differ");
  const Vector<Scalar> r = sigmoid(Vector<Scalar>(g.w_r * y + g.u_r * x));
  const Vector<Scalar> z = sigmoid(Vector<Scalar>((g.w_z * y + g.u_z * x).array() - gate_bias));
  const Vector<Scalar> h = (g.w_g * y + g.u_g * r.cwiseProduct(x)).array().tanh();
  return x + z.cwiseProduct(h - x);
}

// Runs every head on x, concatenates, and applies the output projection.
template <typename Scalar>
Vector<Scalar> multi_head(const Vector<Scalar>& x, std::vector<MechanismState<Scalar>>& states,
                          const BlockWeights<Matrix<Scalar>>& b, const MechanismConfig& cfg,
                          OpCounter* ops = nullptr) {
  require_shape(!b.heads.empty() && states.size() == b.heads.size(), "multi_head: head count mismatch");
  const Index d_h = b.heads.front().w_v.rows();
  Vector<Scalar> cat(d_h * static_cast<Index>(b.heads.size()));
  for (std::size_t h = 0; h < b.heads.size(); ++h)
    cat.segment(static_cast<Index>(h) * d_h, d_h) = mechanism_step(x, states[h], b.heads[h], cfg, ops);
  return b.w_o * cat;
}

template <typename Scalar>
Vector<Scalar> block_forward(const Vector<Scalar>& x, std::vector<MechanismState<Scalar>>& states,
                             const BlockWeights<Matrix<Scalar>>& b, const ModelConfig& cfg,
                             OpCounter* ops = nullptr) {
  const auto bias = static_cast<Scalar>(cfg.gate_bias);
  const Vector<Scalar> att = multi_head(layer_norm(x, b.ln1_g, b.ln1_b), states, b, cfg.mechanism, ops);
  const Vector<Scalar> x1 = gru_gate(x, att, b.gate1, bias);
  const Vector<Scalar> n2 = layer_norm(x1, b.ln2_g, b.ln2_b);
  const Vector<Scalar> hidden = relu(Vector<Scalar>(b.mlp_w1 * n2 + b.mlp_b1.row(0).transpose()));
  const Vector<Scalar> mlp = b.mlp_w2 * hidden + b.mlp_b2.row(0).transpose();
  return gru_gate(x1, mlp, b.gate2, bias);
}

template <typename Scalar>
Vector<Scalar> stack_step(const Vector<Scalar>& obs, ModelState<Scalar>& st, const ModelWeights<Matrix<Scalar>>& m,
                          const ModelConfig& cfg, OpCounter* ops = nullptr) {
  require_shape(obs.size() == m.w_e.cols(), "stack_step: observation length mismatch");
  require_shape(st.layers.size() == m.blocks.size(), "stack_step: layer count mismatch");
  Vector<Scalar> x = m.w_e * obs + m.b_e.row(0).transpose();
  for (std::size_t l = 0; l < m.blocks.size(); ++l) x = block_forward(x, st.layers[l], m.blocks[l], cfg, ops);
  return x;
}

struct PolicyOutput {
  Vec logits;
  double value = 0.0;
};

PolicyOutput policy_heads(const Vec& features, const Model& m);

// ---------------------------------------------------------------------------
// Sequence evaluation on a tape

struct StackResult {
  ad::Var features;  // T x d
  ModelState<double> state;
};

ad::Var layer_norm_rows(ad::Var x, ad::Var g, ad::Var b);
ad::Var gru_gate(ad::Var x, ad::Var y, const GateWeights<ad::Var>& g, double gate_bias);
ad::Var multi_head(ad::Var x, const BlockWeights<ad::Var>& b, const MechanismConfig& cfg,
                   const std::vector<MechanismState<double>>& states, std::vector<MechanismState<double>>& out,
                   const std::vector<char>& resets = {});
ad::Var block_forward(ad::Var x, const BlockWeights<ad::Var>& b, const ModelConfig& cfg,
                      const std::vector<MechanismState<double>>& states, std::vector<MechanismState<double>>& out,
                      const std::vector<char>& resets = {});

// Embeds X (T x d_in) and applies every block through forward_sequence.
StackResult stack_forward_sequence(ad::Var x, const ModelVars& m, const ModelConfig& cfg,
                                   const ModelState<double>& state0, const std::vector<char>& resets = {});

struct PolicyVars {
  ad::Var logits;  // T x actions
  ad::Var values;  // T x 1
};

PolicyVars policy_heads(ad::Var features, const ModelVars& m);

// Recurrent-state scalars per layer for the configured mechanism.
Index state_size(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Text format, line oriented:
//   galite-checkpoint 1
//   config <key> <value>        (one line per ModelConfig field)
//   param <name> <rows> <cols>  followed by one line of rows*cols values,
//                               row-major, %.17g, space separated
//   end
// Parameters appear in canonical visiting order.

void write_checkpoint(std::ostream& os, const ModelConfig& cfg, const Model& m);
std::pair<ModelConfig, Model> read_checkpoint(std::istream& is);
std::map<std::string, std::string> config_echo(const ModelConfig& cfg);

}  // namespace galite
