#pragma once

#include "galite/model.hpp"
#include "galite/tmaze.hpp"

#include <deque>
#include <functional>
#include <iosfwd>
#include <vector>

namespace galite::a2c {

struct TrainConfig {
  double lr = 5e-4;
  double gamma = 0.99;
  double lambda = 0.95;
  double entropy_coef = 1e-2;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  int rollout = 256;
  int envs = 8;
  long total_steps = 2'000'000;
  std::uint64_t seed = 0;
  long eval_window = 100'000;
  long log_every = 16'384;

  void validate() const;
};

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t,
// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}; V_T = bootstrap.
Advantages compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                       const std::vector<char>& dones, double bootstrap, double gamma, double lambda);

struct EnvRollout {
  Mat obs;  // T x obs_dim
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<double> log_probs;
  std::vector<char> dones;
  std::vector<char> resets;  // episode starts before step t
  double bootstrap = 0.0;
  ModelState<double> start_state;
};

struct Rollout {
  std::vector<EnvRollout> envs;
};

struct LossStats {
  double total = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
};

struct LossAndGrad {
  LossStats stats;
  Vec grad;  // flattened in canonical parameter order
};

// Mean over all rollout steps of -log pi(a) A + value_coef (V - R)^2 - entropy_coef H,
// with A and R from GAE on the recorded values. Gradients flow through the
// attention states within the rollout; the incoming state is a constant.
LossAndGrad a2c_loss_and_grad(const Rollout& rollout, const Model& model, const ModelConfig& mcfg,
                              const TrainConfig& tcfg);

struct Adam {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vec m, v;
  long t = 0;

  void step(Vec& theta, const Vec& grad);
};

// Loss, clipped gradient step, parameter write-back.
LossStats a2c_update(const Rollout& rollout, Model& model, Adam& opt, const ModelConfig& mcfg,
                     const TrainConfig& tcfg);

// -sum p log p of softmax(logits).
double policy_entropy(const Vec& logits);

struct SuccessEstimate {
  double rate = 0.0;
  double lo = 0.0;  // 95% Wilson interval
  double hi = 0.0;
  long episodes = 0;
};

SuccessEstimate wilson_interval(long successes, long trials);

// Episodes ending within the last `window` environment steps.
class SuccessTracker {
 public:
  explicit SuccessTracker(long window) : window_(window) {}

  void record(long step, bool success, double episode_return);
  SuccessEstimate estimate(long now) const;
  double mean_return(long now) const;
  long total() const { return total_; }

 private:
  struct Entry {
    long step;
    bool success;
    double ret;
  };
  void trim(long now) const;

  long window_;
  long total_ = 0;
  mutable std::deque<Entry> entries_;
};

struct LogRow {
  long step = 0;
  long episodes = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

void write_log_header(std::ostream& os);
void write_log_row(std::ostream& os, const LogRow& row);

struct TrainResult {
  std::vector<LogRow> log;
  Model model;
  SuccessEstimate final_success;
};

// Runs `envs` synchronized T-Mazes. `on_row` (optional) sees each log row as
// it is produced.
TrainResult train_tmaze(const ModelConfig& mcfg, const TrainConfig& tcfg, const tmaze::Config& ecfg,
                        const std::function<void(const LogRow&)>& on_row = {});

}  // namespace galite::a2c
