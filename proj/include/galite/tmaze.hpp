#pragma once

#include "galite/numerics.hpp"
#include "galite/rng.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>

namespace galite::tmaze {

inline constexpr int kObsBits = 16;
inline constexpr int kActions = 4;

enum class Action : int { Up = 0, Down = 1, Left = 2, Right = 3 };

// Cue 01 rewards the left (up) turn, 10 the right (down) turn.
enum class Cue : int { Left = 1, Right = 2 };

using Observation = std::array<std::uint8_t, kObsBits>;

struct Config {
  int corridor_length = 10;
  int max_steps = 0;  // 0 means 4 * corridor_length
  std::uint64_t seed = 0;

  int step_limit() const { return max_steps > 0 ? max_steps : 4 * corridor_length; }
  void validate() const;
};

// n ^ (n >> 1), most significant bit first.
std::array<std::uint8_t, 8> gray_code(int n);

struct StepResult {
  Observation obs{};
  double reward = 0.0;
  bool done = false;
  bool success = false;   // episode ended with the correct turn
  bool junction = false;  // episode ended with a turn (either side)
};

class Env {
 public:
  explicit Env(Config cfg);

  // Starts an episode; episodes draw from one stream seeded by cfg.seed.
  Observation reset();
  StepResult step(Action a);

  int position() const { return position_; }
  int clock() const { return clock_; }
  Cue cue() const { return cue_; }
  bool done() const { return done_; }
  const Config& config() const { return cfg_; }

  // Optional per-step trace: `episode,t,position,action,reward,done`.
  void set_trace(std::ostream* os);

 private:
  Observation observe(bool with_cue);

  Config cfg_;
  Rng rng_;
  int position_ = 0;
  int clock_ = 0;
  Cue cue_ = Cue::Left;
  bool done_ = true;
  long episode_ = -1;
  std::ostream* trace_ = nullptr;
};

Vec to_vector(const Observation& obs);

}  // namespace galite::tmaze
