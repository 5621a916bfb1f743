#include "galite/attention.hpp"

namespace galite {

const char* to_string(Mechanism m) {
  switch (m) {
    case Mechanism::Linear:
      return "linear";
    case Mechanism::GaLiTe:
      return "galite";
    case Mechanism::AGaLiTe:
      return "agalite";
    case Mechanism::Windowed:
      return "windowed";
  }
  return "unknown";
}

Mechanism parse_mechanism(const std::string& name) {
  if (name == "linear") return Mechanism::Linear;
  if (name == "galite") return Mechanism::GaLiTe;
  if (name == "agalite") return Mechanism::AGaLiTe;
  if (name == "windowed") return Mechanism::Windowed;
  throw std::invalid_argument("unknown mechanism '" + name + "'");
}

AttentionParams<double> init_attention_params(const MechanismConfig& cfg, Index d, Index d_h, Rng& rng) {
  require_shape(d >= 1 && d_h >= 1, "init_attention_params: dimensions must be positive");
  if (cfg.kind == Mechanism::AGaLiTe && cfg.r < 1) throw ContractError("AGaLiTe requires r >= 1");
  const bool learned = cfg.learned_features();
  const bool gated = cfg.kind == Mechanism::GaLiTe || cfg.kind == Mechanism::AGaLiTe;
  if (learned && cfg.eta < 1) throw ContractError("eta must be >= 1");

  AttentionParams<double> p;
  p.w_q = orthogonal(d_h, d, rng);
  p.w_k = orthogonal(d_h, d, rng);
  p.w_v = orthogonal(d_h, d, rng);
  if (gated) {
    p.w_beta = orthogonal(d_h, d, rng);
    p.w_gamma = orthogonal(d_h, d, rng);
  }
  if (learned) {
    p.w_p1 = orthogonal(cfg.eta, d, rng);
    p.w_p2 = orthogonal(cfg.eta, d, rng);
    if (gated) p.w_p3 = orthogonal(cfg.eta, d, rng);
  }
  return p;
}

}  // namespace galite
