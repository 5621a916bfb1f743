#include "galite/tmaze.hpp"

#include "galite/csv.hpp"

#include <ostream>
#include <random>

namespace galite::tmaze {

void Config::validate() const {
  if (corridor_length < 1) throw ContractError("tmaze: corridor length must be >= 1");
  if (corridor_length > 255) throw ContractError("tmaze: corridor length must be <= 255");
  if (step_limit() < corridor_length + 2) throw ContractError("tmaze: max_steps must be >= corridor_length + 2");
}

std::array<std::uint8_t, 8> gray_code(int n) {
  if (n < 0 || n > 255) throw std::out_of_range("gray_code: argument must lie in [0, 255]");
  const int g = n ^ (n >> 1);
  std::array<std::uint8_t, 8> bits{};
  for (int i = 0; i < 8; ++i) bits[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((g >> (7 - i)) & 1);
  return bits;
}

Env::Env(Config cfg) : cfg_(cfg), rng_(make_rng(cfg.seed, {0x74ULL})) { cfg_.validate(); }

void Env::set_trace(std::ostream* os) {
  trace_ = os;
  if (trace_) *trace_ << "episode,t,position,action,reward,done\n";
}

Observation Env::observe(bool with_cue) {
  Observation obs{};
  if (with_cue) {
    obs[0] = cue_ == Cue::Right ? 1 : 0;
    obs[1] = cue_ == Cue::Left ? 1 : 0;
  }
  const auto gray = gray_code(position_);
  for (int i = 0; i < 8; ++i) obs[static_cast<std::size_t>(2 + i)] = gray[static_cast<std::size_t>(i)];
  std::bernoulli_distribution coin(0.5);
  for (int i = 10; i < kObsBits; ++i) obs[static_cast<std::size_t>(i)] = coin(rng_) ? 1 : 0;
  return obs;
}

Observation Env::reset() {
  std::bernoulli_distribution coin(0.5);
  cue_ = coin(rng_) ? Cue::Left : Cue::Right;
  position_ = 0;
  clock_ = 0;
  done_ = false;
  ++episode_;
  return observe(true);
}

StepResult Env::step(Action a) {
  if (done_) throw ContractError("tmaze: step called on a finished episode");
  StepResult res;
  res.reward = -0.1;
  const bool at_junction = position_ == cfg_.corridor_length;
  switch (a) {
    case Action::Right:
      if (!at_junction) ++position_;
      break;
    case Action::Left:
      if (position_ > 0) --position_;
      break;
    case Action::Up:
    case Action::Down:
      if (at_junction) {
        const Cue side = a == Action::Up ? Cue::Left : Cue::Right;
        res.junction = true;
        res.success = side == cue_;
        res.reward = res.success ? 4.0 : -1.0;
        res.done = true;
      }
      break;
  }
  ++clock_;
  if (!res.done && clock_ >= cfg_.step_limit()) res.done = true;
  done_ = res.done;
  res.obs = observe(false);
  if (trace_)
    *trace_ << episode_ << ',' << clock_ - 1 << ',' << position_ << ',' << static_cast<int>(a) << ','
            << fmt_shortest(res.reward) << ',' << (res.done ? 1 : 0) << '\n';
  return res;
}

Vec to_vector(const Observation& obs) {
  Vec v(kObsBits);
  for (int i = 0; i < kObsBits; ++i) v[i] = obs[static_cast<std::size_t>(i)];
  return v;
}

}  // namespace galite::tmaze
