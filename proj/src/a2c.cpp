#include "galite/a2c.hpp"

#include "galite/csv.hpp"

#include <cmath>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace galite::a2c {

using ad::Var;

void TrainConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0) || !(lambda >= 0.0 && lambda <= 1.0))
    throw ContractError("train config: gamma and lambda must lie in [0, 1]");
  if (rollout < 1 || envs < 1) throw ContractError("train config: rollout and envs must be >= 1");
  if (!(lr > 0.0)) throw ContractError("train config: learning rate must be positive");
  if (eval_window < 1 || log_every < 1) throw ContractError("train config: windows must be >= 1");
}

Advantages compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                       const std::vector<char>& dones, double bootstrap, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  require_shape(values.size() == n && dones.size() == n, "compute_gae: length mismatch");
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_adv = 0.0;
  double next_value = bootstrap;
  for (std::size_t i = n; i-- > 0;) {
    const double live = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_value * live - values[i];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[i] = next_adv;
    out.returns[i] = next_adv + values[i];
    next_value = values[i];
  }
  return out;
}

double policy_entropy(const Vec& logits) {
  const double mx = logits.maxCoeff();
  const Vec e = (logits.array() - mx).exp().matrix();
  const double z = e.sum();
  double h = 0.0;
  for (Index i = 0; i < e.size(); ++i) {
    const double p = e[i] / z;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

LossAndGrad a2c_loss_and_grad(const Rollout& rollout, const Model& model, const ModelConfig& mcfg,
                              const TrainConfig& tcfg) {
  require_shape(!rollout.envs.empty(), "a2c: empty rollout");
  ad::Tape tape;
  const ModelVars vars = model_params(tape, model);

  Index total_steps = 0;
  for (const auto& env : rollout.envs) total_steps += env.obs.rows();
  const double inv_n = 1.0 / static_cast<double>(total_steps);

  Var policy_sum, value_sum, entropy_sum;
  bool first = true;
  for (const auto& env : rollout.envs) {
    const Index steps = env.obs.rows();
    require_shape(static_cast<Index>(env.actions.size()) == steps, "a2c: action count mismatch");
    const Advantages adv = compute_gae(env.rewards, env.values, env.dones, env.bootstrap, tcfg.gamma, tcfg.lambda);

    const Var x = tape.constant(env.obs);
    const StackResult feats = stack_forward_sequence(x, vars, mcfg, env.start_state, env.resets);
    const PolicyVars heads = policy_heads(feats.features, vars);
    const Var logp = ad::log_softmax_rows(heads.logits);

    Mat pick = Mat::Zero(steps, mcfg.actions);
    Mat a_col(steps, 1), r_col(steps, 1);
    for (Index t = 0; t < steps; ++t) {
      pick(t, env.actions[static_cast<std::size_t>(t)]) = 1.0;
      a_col(t, 0) = adv.advantages[static_cast<std::size_t>(t)];
      r_col(t, 0) = adv.returns[static_cast<std::size_t>(t)];
    }
    const Var logp_a = ad::sum_cols(ad::mul(logp, tape.constant(std::move(pick))));
    const Var pg = ad::scale(ad::sum(ad::mul(logp_a, tape.constant(std::move(a_col)))), -1.0);
    const Var err = ad::sub(heads.values, tape.constant(std::move(r_col)));
    const Var vl = ad::sum(ad::mul(err, err));
    const Var ent = ad::scale(ad::sum(ad::mul(ad::exp(logp), logp)), -1.0);

    if (first) {
      policy_sum = pg;
      value_sum = vl;
      entropy_sum = ent;
      first = false;
    } else {
      policy_sum = ad::add(policy_sum, pg);
      value_sum = ad::add(value_sum, vl);
      entropy_sum = ad::add(entropy_sum, ent);
    }
  }
  const Var policy = ad::scale(policy_sum, inv_n);
  const Var value = ad::scale(value_sum, inv_n);
  const Var entropy = ad::scale(entropy_sum, inv_n);
  const Var loss = ad::sub(ad::add(policy, ad::scale(value, tcfg.value_coef)), ad::scale(entropy, tcfg.entropy_coef));

  LossAndGrad out;
  out.stats.total = loss.value()(0, 0);
  out.stats.policy_loss = policy.value()(0, 0);
  out.stats.value_loss = value.value()(0, 0);
  out.stats.entropy = entropy.value()(0, 0);
  if (!std::isfinite(out.stats.total)) {
    std::ostringstream msg;
    msg << "a2c: non-finite loss (policy " << out.stats.policy_loss << ", value " << out.stats.value_loss
        << ", entropy " << out.stats.entropy << ")";
    throw std::runtime_error(msg.str());
  }

  const ad::Gradients grads = tape.grad(loss);
  out.grad.resize(parameter_count(model));
  Index at = 0;
  visit_weights(const_cast<ModelVars&>(vars), [&](const std::string&, Var& v) {
    const Mat g = grads.wrt(v);
    out.grad.segment(at, g.size()) = flatten(g);
    at += g.size();
  });
  out.stats.grad_norm = out.grad.norm();
  return out;
}

void Adam::step(Vec& theta, const Vec& grad) {
  if (m.size() != theta.size()) {
    m = Vec::Zero(theta.size());
    v = Vec::Zero(theta.size());
    t = 0;
  }
  ++t;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

LossStats a2c_update(const Rollout& rollout, Model& model, Adam& opt, const ModelConfig& mcfg,
                     const TrainConfig& tcfg) {
  LossAndGrad lg = a2c_loss_and_grad(rollout, model, mcfg, tcfg);
  if (tcfg.max_grad_norm > 0.0 && lg.stats.grad_norm > tcfg.max_grad_norm)
    lg.grad *= tcfg.max_grad_norm / lg.stats.grad_norm;
  Vec theta = flatten_params(model);
  opt.lr = tcfg.lr;
  opt.step(theta, lg.grad);
  unflatten_params(model, theta);
  return lg.stats;
}

SuccessEstimate wilson_interval(long successes, long trials) {
  SuccessEstimate e;
  e.episodes = trials;
  if (trials <= 0) return e;
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z = 1.959963984540054;
  const double denom = 1.0 + z * z / n;
  const double centre = (p + z * z / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
  e.rate = p;
  e.lo = std::max(0.0, centre - half);
  e.hi = std::min(1.0, centre + half);
  return e;
}

void SuccessTracker::record(long step, bool success, double episode_return) {
  entries_.push_back({step, success, episode_return});
  ++total_;
}

void SuccessTracker::trim(long now) const {
  while (!entries_.empty() && entries_.front().step <= now - window_) entries_.pop_front();
}

SuccessEstimate SuccessTracker::estimate(long now) const {
  trim(now);
  long wins = 0;
  for (const auto& e : entries_) wins += e.success ? 1 : 0;
  return wilson_interval(wins, static_cast<long>(entries_.size()));
}

double SuccessTracker::mean_return(long now) const {
  trim(now);
  if (entries_.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : entries_) s += e.ret;
  return s / static_cast<double>(entries_.size());
}

void write_log_header(std::ostream& os) {
  os << "step,episodes,success_rate,mean_return,policy_loss,value_loss,entropy\n";
}

void write_log_row(std::ostream& os, const LogRow& row) {
  os << row.step << ',' << row.episodes << ',' << fmt_shortest(row.success_rate) << ','
     << fmt_shortest(row.mean_return) << ',' << fmt_shortest(row.policy_loss) << ','
     << fmt_shortest(row.value_loss) << ',' << fmt_shortest(row.entropy) << '\n';
}

namespace {

int sample_action(const Vec& logits, Rng& rng, double& log_prob) {
  const double mx = logits.maxCoeff();
  const Vec e = (logits.array() - mx).exp().matrix();
  const double z = e.sum();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double draw = u(rng) * z;
  double acc = 0.0;
  int a = static_cast<int>(e.size()) - 1;
  for (Index i = 0; i < e.size(); ++i) {
    acc += e[i];
    if (draw < acc) {
      a = static_cast<int>(i);
      break;
    }
  }
  log_prob = logits[a] - mx - std::log(z);
  return a;
}

}  // namespace

TrainResult train_tmaze(const ModelConfig& mcfg, const TrainConfig& tcfg, const tmaze::Config& ecfg,
                        const std::function<void(const LogRow&)>& on_row) {
  tcfg.validate();
  mcfg.validate();
  require_shape(mcfg.d_in == tmaze::kObsBits && mcfg.actions == tmaze::kActions,
                "train_tmaze: model input/output sizes must match the environment");

  Rng init_rng = make_rng(tcfg.seed, {1});
  TrainResult result;
  result.model = init_model(mcfg, init_rng);
  Model& model = result.model;
  Adam opt;
  opt.lr = tcfg.lr;

  const auto n_envs = static_cast<std::size_t>(tcfg.envs);
  std::vector<tmaze::Env> envs;
  std::vector<Rng> action_rngs;
  std::vector<Vec> obs(n_envs);
  std::vector<ModelState<double>> states(n_envs, make_model_state<double>(mcfg));
  std::vector<double> episode_returns(n_envs, 0.0);
  std::vector<char> fresh(n_envs, 1);
  for (std::size_t e = 0; e < n_envs; ++e) {
    tmaze::Config c = ecfg;
    c.seed = derive_seed(tcfg.seed, {2, e});
    envs.emplace_back(c);
    action_rngs.push_back(make_rng(tcfg.seed, {3, e}));
    obs[e] = tmaze::to_vector(envs[e].reset());
  }

  SuccessTracker tracker(tcfg.eval_window);
  long env_steps = 0;  // summed over all envs
  long next_log = tcfg.log_every;

  while (env_steps < tcfg.total_steps) {
    Rollout ro;
    ro.envs.resize(n_envs);
    for (std::size_t e = 0; e < n_envs; ++e) {
      ro.envs[e].obs.resize(tcfg.rollout, mcfg.d_in);
      ro.envs[e].start_state = states[e];
    }
    for (int t = 0; t < tcfg.rollout; ++t) {
      for (std::size_t e = 0; e < n_envs; ++e) {
        ++env_steps;
        auto& r = ro.envs[e];
        r.obs.row(t) = obs[e].transpose();
        r.resets.push_back(fresh[e]);
        fresh[e] = 0;
        const Vec feats = stack_step(obs[e], states[e], model, mcfg);
        const PolicyOutput out = policy_heads(feats, model);
        double logp = 0.0;
        const int a = sample_action(out.logits, action_rngs[e], logp);
        const tmaze::StepResult res = envs[e].step(static_cast<tmaze::Action>(a));
        r.actions.push_back(a);
        r.values.push_back(out.value);
        r.log_probs.push_back(logp);
        r.rewards.push_back(res.reward);
        r.dones.push_back(res.done ? 1 : 0);
        episode_returns[e] += res.reward;
        if (res.done) {
          tracker.record(env_steps, res.success, episode_returns[e]);
          episode_returns[e] = 0.0;
          obs[e] = tmaze::to_vector(envs[e].reset());
          states[e] = make_model_state<double>(mcfg);
          fresh[e] = 1;
        } else {
          obs[e] = tmaze::to_vector(res.obs);
        }
      }
    }
    for (std::size_t e = 0; e < n_envs; ++e) {
      ModelState<double> probe = states[e];
      ro.envs[e].bootstrap = policy_heads(stack_step(obs[e], probe, model, mcfg), model).value;
    }
    const LossStats stats = a2c_update(ro, model, opt, mcfg, tcfg);

    if (env_steps >= next_log || env_steps >= tcfg.total_steps) {
      while (next_log <= env_steps) next_log += tcfg.log_every;
      LogRow row;
      row.step = env_steps;
      row.episodes = tracker.total();
      row.success_rate = tracker.estimate(env_steps).rate;
      row.mean_return = tracker.mean_return(env_steps);
      row.policy_loss = stats.policy_loss;
      row.value_loss = stats.value_loss;
      row.entropy = stats.entropy;
      result.log.push_back(row);
      if (on_row) on_row(row);
    }
  }
  result.final_success = tracker.estimate(env_steps);
  return result;
}

}  // namespace galite::a2c
