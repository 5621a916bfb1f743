#include "cli.hpp"

#include "galite/a2c.hpp"
#include "galite/bench.hpp"
#include "galite/checks.hpp"
#include "galite/csv.hpp"
#include "galite/kron.hpp"
#include "galite/model.hpp"
#include "galite/tmaze.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <omp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#ifndef GALITE_VERSION
#define GALITE_VERSION "0.1.0"
#endif

namespace galite::cli {

const char* version() { return GALITE_VERSION; }

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const std::string& flag) {
  std::vector<T> out;
  if (s.empty()) return out;
  for (const auto& p : split(s)) {
    T v{};
    const auto res = std::from_chars(p.data(), p.data() + p.size(), v);
    if (p.empty() || res.ec != std::errc() || res.ptr != p.data() + p.size())
      throw UsageError(flag + ": cannot parse '" + p + "' in list '" + s + "'");
    out.push_back(v);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_same_v<T, double>)
      s += fmt_shortest(v[i]);
    else if constexpr (std::is_same_v<T, std::string>)
      s += v[i];
    else
      s += std::to_string(v[i]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Option groups

struct Common {
  std::uint64_t seed = 0;
  std::string out = "out";
  int threads = 1;
  std::string config;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Seed for all randomness");
  sub->add_option("--out", c.out, "Output directory");
  sub->add_option("--threads", c.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  sub->add_option("--config", c.config, "key=value config file; flags override it");
}

struct ModelOpts {
  std::string mechanism = "agalite";
  std::string feature_map = "learned";
  std::string approximation = "cosine";
  std::string gating = "learned";
  bool derivation_scaling = false;
  Index d = 32, heads = 2, d_h = 16, layers = 2, eta = 2;
  std::int64_t r = 1;
  Index memory = 128, mlp_hidden = 0;
  double gate_bias = 2.0;
  Index actor_hidden = 128, critic_hidden = 128;
};

void add_model(CLI::App* sub, ModelOpts& m, bool heads_mlp) {
  sub->add_option("--mechanism", m.mechanism, "linear | galite | agalite | windowed");
  sub->add_option("--feature-map", m.feature_map, "learned | elu");
  sub->add_option("--approximation", m.approximation, "cosine | rank1");
  sub->add_option("--gating", m.gating, "learned | off");
  sub->add_flag("--derivation-scaling", m.derivation_scaling, "AGaLiTe readout scaled by 2/r");
  sub->add_option("--d", m.d, "Model width")->check(CLI::PositiveNumber);
  sub->add_option("--heads", m.heads, "Attention heads")->check(CLI::PositiveNumber);
  sub->add_option("--d-h", m.d_h, "Head width")->check(CLI::PositiveNumber);
  sub->add_option("--layers", m.layers, "Blocks")->check(CLI::NonNegativeNumber);
  sub->add_option("--eta", m.eta, "Feature expansion")->check(CLI::PositiveNumber);
  sub->add_option("--r", m.r, "AGaLiTe approximation order")->check(CLI::PositiveNumber);
  sub->add_option("--memory", m.memory, "Windowed attention memory M")->check(CLI::PositiveNumber);
  if (!heads_mlp) return;
  sub->add_option("--mlp-hidden", m.mlp_hidden, "Block MLP width (0 means 4d)")->check(CLI::NonNegativeNumber);
  sub->add_option("--gate-bias", m.gate_bias, "GRU gate bias");
  sub->add_option("--actor-hidden", m.actor_hidden, "Actor hidden width")->check(CLI::PositiveNumber);
  sub->add_option("--critic-hidden", m.critic_hidden, "Critic hidden width")->check(CLI::PositiveNumber);
}

ModelConfig build_model(const ModelOpts& o, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.d_in = tmaze::kObsBits;
  cfg.d = o.d;
  cfg.heads = o.heads;
  cfg.d_h = o.d_h;
  cfg.layers = o.layers;
  cfg.mlp_hidden = o.mlp_hidden;
  cfg.gate_bias = o.gate_bias;
  cfg.actor_hidden = o.actor_hidden;
  cfg.critic_hidden = o.critic_hidden;
  cfg.actions = tmaze::kActions;
  auto& mc = cfg.mechanism;
  try {
    mc.kind = parse_mechanism(o.mechanism);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--mechanism: ") + e.what());
  }
  if (o.feature_map == "learned")
    mc.feature_map = FeatureMapKind::LearnedOuterRelu;
  else if (o.feature_map == "elu")
    mc.feature_map = FeatureMapKind::EluPlusOne;
  else
    throw UsageError("--feature-map: expected learned or elu, got '" + o.feature_map + "'");
  if (o.approximation == "cosine")
    mc.approximation = Approximation::Cosine;
  else if (o.approximation == "rank1")
    mc.approximation = Approximation::Rank1Sign;
  else
    throw UsageError("--approximation: expected cosine or rank1, got '" + o.approximation + "'");
  if (o.gating == "off")
    mc.gates = GateOverride{};
  else if (o.gating != "learned")
    throw UsageError("--gating: expected learned or off, got '" + o.gating + "'");
  mc.derivation_scaling = o.derivation_scaling;
  mc.eta = o.eta;
  mc.r = o.r;
  mc.memory = o.memory;
  mc.sign_seed = seed;
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

struct TrainOpts {
  a2c::TrainConfig t;
  tmaze::Config env;
};

void add_train(CLI::App* sub, TrainOpts& o) {
  o.env.corridor_length = 10;
  sub->add_option("--lr", o.t.lr, "Adam learning rate");
  sub->add_option("--gamma", o.t.gamma, "Discount");
  sub->add_option("--lambda", o.t.lambda, "GAE lambda");
  sub->add_option("--entropy-coef", o.t.entropy_coef, "Entropy coefficient");
  sub->add_option("--value-coef", o.t.value_coef, "Value loss coefficient");
  sub->add_option("--max-grad-norm", o.t.max_grad_norm, "Global gradient-norm clip");
  sub->add_option("--rollout", o.t.rollout, "Rollout length");
  sub->add_option("--envs", o.t.envs, "Parallel environments");
  sub->add_option("--total-steps", o.t.total_steps, "Environment steps");
  sub->add_option("--eval-window", o.t.eval_window, "Trailing success window in steps");
  sub->add_option("--log-every", o.t.log_every, "Steps between log rows");
  sub->add_option("--corridor", o.env.corridor_length, "T-Maze corridor length");
  sub->add_option("--max-steps", o.env.max_steps, "Episode step limit (0 means 4 x corridor)");
}

void finish_train(TrainOpts& o, std::uint64_t seed) {
  o.t.seed = seed;
  o.env.seed = seed;
  try {
    o.t.validate();
    o.env.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Run context

struct Run {
  std::string subcommand;
  Common common;
  fs::path dir;
  std::vector<std::string> outputs;
  std::ostream& out;
  std::ostream& err;

  std::ofstream open(const std::string& name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    outputs.push_back((dir / name).string());
    return f;
  }
};

void print_checks(std::ostream& os, const std::vector<checks::Check>& cs) {
  std::size_t passed = 0;
  for (const auto& c : cs) {
    passed += c.pass ? 1 : 0;
    os << (c.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(11) << c.suite << std::setw(56) << c.name << ' '
       << fmt_shortest(c.value) << (c.relation == checks::Relation::Below ? " < " : " >= ") << fmt_shortest(c.bound);
    if (!c.note.empty()) os << "  (" << c.note << ')';
    os << '\n';
  }
  os << passed << '/' << cs.size() << " checks passed\n";
}

int emit_checks(Run& run, const std::string& file, const std::vector<checks::Check>& cs) {
  auto f = run.open(file);
  checks::write_checks_header(f);
  for (const auto& c : cs) checks::write_check_row(f, c);
  print_checks(run.out, cs);
  return checks::all_pass(cs) ? kExitOk : kExitCheckFailed;
}

a2c::TrainResult train(Run& run, const ModelConfig& mcfg, const TrainOpts& o, const std::string& log_file,
                       const std::string& label) {
  auto log = run.open(log_file);
  a2c::write_log_header(log);
  return a2c::train_tmaze(mcfg, o.t, o.env, [&](const a2c::LogRow& row) {
    a2c::write_log_row(log, row);
    log.flush();
    run.err << label << "step " << row.step << " episodes " << row.episodes << " success "
            << fmt_shortest(std::round(row.success_rate * 1e4) / 1e4) << '\n';
  });
}

// ---------------------------------------------------------------------------
// Subcommands

using Handler = std::function<int(Run&)>;

struct Subcommand {
  CLI::App* app;
  Common common;
  std::function<void()> prepare;  // validates parsed options; throws UsageError
  Handler handler;
};

void define_equiv(CLI::App& app, Subcommand& s) {
  s.app = app.add_subcommand("equiv", "Oracle suites: Kronecker, equivalences, first step, environment, complexity");
  add_common(s.app, s.common);
  s.handler = [](Run& run) {
    std::vector<checks::Check> cs = checks::kron_checks();
    for (auto&& part : {checks::equivalence_checks(run.common.seed), checks::first_step_checks(run.common.seed),
                        checks::environment_checks(run.common.seed), checks::complexity_checks()})
      cs.insert(cs.end(), part.begin(), part.end());
    return emit_checks(run, "equiv.csv", cs);
  };
}

void define_gradcheck(CLI::App& app, Subcommand& s) {
  s.app = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_common(s.app, s.common);
  s.handler = [](Run& run) { return emit_checks(run, "gradcheck.csv", checks::gradient_checks(run.common.seed)); };
}

void define_delta(CLI::App& app, Subcommand& s) {
  struct Opts {
    std::int64_t r = 0;
    int max = 5;
  };
  auto o = std::make_shared<Opts>();
  s.app = app.add_subcommand("delta", "Print the delta_hat grid for one r");
  add_common(s.app, s.common);
  s.app->add_option("--r", o->r, "Approximation order")->required()->check(CLI::PositiveNumber);
  s.app->add_option("--max", o->max, "Largest m and n")->check(CLI::NonNegativeNumber);
  s.handler = [o](Run& run) {
    auto f = run.open("delta.csv");
    f << "m,n,delta_hat,closed_form,abs_error\n";
    double worst = 0.0;
    run.out << "delta_hat r=" << o->r << " (rows m, columns n)\n";
    for (int m = 0; m <= o->max; ++m) {
      for (int n = 0; n <= o->max; ++n) {
        const double dh = kron::delta_hat(m, n, o->r), cf = kron::delta_hat_closed_form(m, n, o->r);
        const double e = std::abs(dh - cf);
        worst = std::max(worst, e);
        f << m << ',' << n << ',' << fmt_shortest(dh) << ',' << fmt_shortest(cf) << ',' << fmt_shortest(e) << '\n';
        const double shown = std::abs(dh) < 1e-12 ? 0.0 : dh;
        run.out << (n ? " " : "") << std::setw(9) << std::fixed << std::setprecision(5) << shown;
      }
      run.out << '\n';
    }
    run.out << std::defaultfloat << "max |delta_hat - closed form| = " << fmt_shortest(worst) << '\n';
    return worst <= 1e-10 ? kExitOk : kExitCheckFailed;
  };
}

void define_approx_error(CLI::App& app, Subcommand& s) {
  struct Opts {
    kron::ApproxErrorConfig cfg;
    std::string r_grid = "1,2,4,8,16,32,64,128,256,512";
    std::string c_grid = "0.1,0.25,0.5,0.75,0.9,1";
  };
  auto o = std::make_shared<Opts>();
  s.app = app.add_subcommand("approx-error", "State reconstruction error over r and constant gates c");
  add_common(s.app, s.common);
  s.app->add_option("--d", o->cfg.d, "Value and key width")->check(CLI::PositiveNumber);
  s.app->add_option("--steps", o->cfg.steps, "Sequence length T")->check(CLI::PositiveNumber);
  s.app->add_option("--r-grid", o->r_grid, "Comma-separated r values");
  s.app->add_option("--c-grid", o->c_grid, "Comma-separated gate constants");
  s.app->add_option("--seeds", o->cfg.seeds, "Draws per cell")->check(CLI::PositiveNumber);
  s.prepare = [o]() {
    o->cfg.r_grid = parse_list<std::int64_t>(o->r_grid, "--r-grid");
    o->cfg.c_grid = parse_list<double>(o->c_grid, "--c-grid");
    if (o->cfg.r_grid.empty() || o->cfg.c_grid.empty()) throw UsageError("--r-grid and --c-grid must be non-empty");
    for (auto r : o->cfg.r_grid)
      if (r < 1) throw UsageError("--r-grid: r must be >= 1");
    for (auto c : o->cfg.c_grid)
      if (!(c >= 0.0 && c <= 1.0)) throw UsageError("--c-grid: c must lie in [0, 1]");
  };
  s.handler = [o](Run& run) {
    o->cfg.base_seed = run.common.seed;
    o->cfg.threads = run.common.threads;
    const auto rows = kron::approx_error_experiment(o->cfg);
    auto f = run.open("approx_error.csv");
    kron::write_approx_error_csv(f, rows);

    std::map<std::pair<std::int64_t, double>, std::pair<double, double>> sums;
    for (const auto& row : rows) {
      auto& cell = sums[{row.r, row.c}];
      cell.first += row.frobenius_error;
      cell.second += row.relative_error;
    }
    auto m = run.open("approx_error_mean.csv");
    m << "r,c,mean_frobenius_error,mean_relative_error\n";
    run.out << std::left << std::setw(8) << "r" << std::setw(8) << "c" << std::setw(24) << "mean frobenius"
            << "mean relative\n";
    const double n = o->cfg.seeds;
    for (const auto& [key, v] : sums) {
      m << key.first << ',' << fmt_shortest(key.second) << ',' << fmt_shortest(v.first / n) << ','
        << fmt_shortest(v.second / n) << '\n';
      run.out << std::setw(8) << key.first << std::setw(8) << fmt_shortest(key.second) << std::setw(24)
              << fmt_shortest(v.first / n) << fmt_shortest(v.second / n) << '\n';
    }
    return kExitOk;
  };
}

void define_bench_ops(CLI::App& app, Subcommand& s) {
  struct Opts {
    ModelOpts model;
    std::string mechanisms = "linear,galite,agalite,windowed";
    std::string t_grid = "1,100,10000";
    std::string m_grid = "16,32,64,128,256,512";
    std::vector<std::int64_t> ts, ms;
    std::vector<std::string> kinds;
  };
  auto o = std::make_shared<Opts>();
  o->model.d = 256;
  o->model.d_h = 64;
  o->model.heads = 1;
  o->model.layers = 1;
  o->model.eta = 4;
  s.app = app.add_subcommand("bench-ops", "Exact multiply-add counts and state sizes");
  add_common(s.app, s.common);
  add_model(s.app, o->model, false);
  s.app->add_option("--mechanisms", o->mechanisms, "Comma-separated mechanisms");
  s.app->add_option("--t-grid", o->t_grid, "Stream positions for the recurrent mechanisms");
  s.app->add_option("--m-grid", o->m_grid, "Memory sizes for windowed attention (counted with a full buffer)");
  s.prepare = [o]() {
    o->ts = parse_list<std::int64_t>(o->t_grid, "--t-grid");
    o->ms = parse_list<std::int64_t>(o->m_grid, "--m-grid");
    o->kinds = split(o->mechanisms);
    for (auto t : o->ts)
      if (t < 1) throw UsageError("--t-grid: positions start at 1");
    for (auto m : o->ms)
      if (m < 1) throw UsageError("--m-grid: memory must be >= 1");
    for (const auto& k : o->kinds) {
      ModelOpts mo = o->model;
      mo.mechanism = k;
      build_model(mo, 0);
    }
  };
  s.handler = [o](Run& run) {
    auto f = run.open("opcounts.csv");
    bench::write_opcount_header(f);
    for (const auto& k : o->kinds) {
      ModelOpts mo = o->model;
      mo.mechanism = k;
      ModelConfig cfg = build_model(mo, run.common.seed);
      std::vector<bench::OpCountReport> reps;
      if (cfg.mechanism.kind == Mechanism::Windowed) {
        for (auto m : o->ms) {
          cfg.mechanism.memory = static_cast<Index>(m);
          reps.push_back(bench::count_ops(cfg, m));
        }
      } else {
        for (auto t : o->ts) reps.push_back(bench::count_ops(cfg, t));
      }
      for (const auto& r : reps) {
        bench::write_opcount_row(f, r);
        run.out << std::left << std::setw(10) << r.mechanism << " t=" << std::setw(7) << r.t << " M=" << std::setw(5)
                << r.memory << " mul_adds=" << std::setw(10) << r.mul_adds << " state=" << r.state_scalars << '\n';
      }
    }
    return kExitOk;
  };
}

void define_bench_latency(CLI::App& app, Subcommand& s) {
  struct Opts {
    ModelOpts model;
    bench::LatencyConfig lc;
    std::string mechanisms = "agalite,windowed";
    std::string grid = "64,128,256,512";
    std::string seq = "";
    std::string precision = "f32";
    std::vector<std::int64_t> points, seq_points;
    std::vector<std::string> kinds;
  };
  auto o = std::make_shared<Opts>();
  o->model.d = 128;
  o->model.d_h = 32;
  o->model.heads = 2;
  o->model.layers = 1;
  o->model.eta = 4;
  s.app = app.add_subcommand("bench-latency", "Step and sequence latency of one attention layer");
  add_common(s.app, s.common);
  add_model(s.app, o->model, false);
  s.app->add_option("--mechanisms", o->mechanisms, "Comma-separated mechanisms");
  s.app->add_option("--grid", o->grid, "Stream positions (recurrent) or memory sizes (windowed)");
  s.app->add_option("--seq-lengths", o->seq, "Sequence lengths for whole-sequence timing (empty skips)");
  s.app->add_option("--reps", o->lc.reps, "Timed repetitions (>= 30)");
  s.app->add_option("--warmup", o->lc.warmup, "Discarded repetitions")->check(CLI::NonNegativeNumber);
  s.app->add_option("--inner", o->lc.inner, "Steps per repetition")->check(CLI::PositiveNumber);
  s.app->add_option("--precision", o->precision, "f32 | f64");
  s.prepare = [o]() {
    o->points = parse_list<std::int64_t>(o->grid, "--grid");
    o->seq_points = parse_list<std::int64_t>(o->seq, "--seq-lengths");
    o->kinds = split(o->mechanisms);
    if (o->lc.reps < 30) throw UsageError("--reps must be at least 30");
    if (o->precision != "f32" && o->precision != "f64") throw UsageError("--precision: expected f32 or f64");
    o->lc.single_precision = o->precision == "f32";
    for (auto p : o->points)
      if (p < 1) throw UsageError("--grid: values must be >= 1");
    for (const auto& k : o->kinds) {
      ModelOpts mo = o->model;
      mo.mechanism = k;
      build_model(mo, 0);
    }
  };
  s.handler = [o](Run& run) {
    o->lc.seed = run.common.seed;
    auto f = run.open("latency.csv");
    auto fit = run.open("latency_fit.csv");
    bench::write_latency_header(f);
    fit << "mechanism,mode,slope_ms,slope_stderr,r_squared\n";
    auto emit = [&](const std::vector<bench::LatencyRow>& rows) {
      for (const auto& r : rows) {
        bench::write_latency_row(f, r);
        run.out << std::left << std::setw(10) << r.mechanism << std::setw(9) << r.mode << std::setw(8) << r.context
                << fmt_shortest(r.mean_ms) << " ms +- " << fmt_shortest(r.stderr_ms) << '\n';
      }
      if (rows.size() < 2) return;
      const auto reg = bench::latency_slope(rows);
      fit << rows[0].mechanism << ',' << rows[0].mode << ',' << fmt_shortest(reg.slope) << ','
          << fmt_shortest(reg.slope_stderr) << ',' << fmt_shortest(reg.r_squared) << '\n';
      run.out << rows[0].mechanism << ' ' << rows[0].mode << " slope " << fmt_shortest(reg.slope) << " +- "
              << fmt_shortest(reg.slope_stderr) << " ms per unit\n";
    };
    for (const auto& k : o->kinds) {
      ModelOpts mo = o->model;
      mo.mechanism = k;
      const ModelConfig cfg = build_model(mo, run.common.seed);
      run.err << "timing " << k << '\n';
      emit(bench::measure_latency(cfg, o->points, o->lc));
      if (!o->seq_points.empty()) emit(bench::measure_sequence_latency(cfg, o->seq_points, o->lc));
    }
    return kExitOk;
  };
}

void define_train(CLI::App& app, Subcommand& s) {
  struct Opts {
    ModelOpts model;
    TrainOpts train;
    ModelConfig cfg;
  };
  auto o = std::make_shared<Opts>();
  s.app = app.add_subcommand("train-tmaze", "Train an A2C agent on T-Maze");
  add_common(s.app, s.common);
  add_model(s.app, o->model, true);
  add_train(s.app, o->train);
  s.prepare = [o, &s]() {
    o->cfg = build_model(o->model, s.common.seed);
    finish_train(o->train, s.common.seed);
  };
  s.handler = [o](Run& run) {
    const auto res = train(run, o->cfg, o->train, "train_log.csv", "");
    auto ck = run.open("model.ckpt");
    write_checkpoint(ck, o->cfg, res.model);
    const auto& fs = res.final_success;
    run.out << "final success " << fmt_shortest(fs.rate) << " (95% CI " << fmt_shortest(fs.lo) << " - "
            << fmt_shortest(fs.hi) << ", " << fs.episodes << " episodes in the last " << o->train.t.eval_window
            << " steps)\n";
    return kExitOk;
  };
}

void define_ablate(CLI::App& app, Subcommand& s) {
  struct Opts {
    ModelOpts model;
    TrainOpts train;
    std::string variants = "baseline,gating-off,elu,rank1";
    std::vector<std::pair<std::string, ModelConfig>> runs;
  };
  auto o = std::make_shared<Opts>();
  s.app = app.add_subcommand("ablate", "Train the baseline and its ablations on the same budget");
  add_common(s.app, s.common);
  add_model(s.app, o->model, true);
  add_train(s.app, o->train);
  s.app->add_option("--variants", o->variants, "baseline | gating-off | elu | rank1, comma-separated");
  s.prepare = [o, &s]() {
    finish_train(o->train, s.common.seed);
    o->runs.clear();
    for (const auto& v : split(o->variants)) {
      ModelOpts mo = o->model;
      if (v == "gating-off")
        mo.gating = "off";
      else if (v == "elu")
        mo.feature_map = "elu";
      else if (v == "rank1")
        mo.approximation = "rank1";
      else if (v != "baseline")
        throw UsageError("--variants: unknown variant '" + v + "'");
      o->runs.emplace_back(v, build_model(mo, s.common.seed));
    }
  };
  s.handler = [o](Run& run) {
    auto f = run.open("ablate.csv");
    f << "variant,mechanism,feature_map,approximation,gates,final_success,ci_lo,ci_hi,episodes\n";
    for (const auto& [name, cfg] : o->runs) {
      const auto res = train(run, cfg, o->train, "train_" + name + ".csv", name + ": ");
      const auto echo = config_echo(cfg);
      const auto& fs = res.final_success;
      f << name << ',' << echo.at("mechanism") << ',' << echo.at("feature_map") << ',' << echo.at("approximation")
        << ',' << echo.at("gates") << ',' << fmt_shortest(fs.rate) << ',' << fmt_shortest(fs.lo) << ','
        << fmt_shortest(fs.hi) << ',' << fs.episodes << '\n';
      f.flush();
      run.out << std::left << std::setw(12) << name << " final success " << fmt_shortest(fs.rate) << " (95% CI "
              << fmt_shortest(fs.lo) << " - " << fmt_shortest(fs.hi) << ")\n";
    }
    return kExitOk;
  };
}

// ---------------------------------------------------------------------------
// Config file injection

std::string find_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  return path;
}

// Turns `key = value` lines (top level or under [subcommand]) into flags.
std::vector<std::string> config_flags(const std::string& path, const std::string& subcommand) {
  const auto items = CLI::ConfigINI().from_file(path);
  std::vector<std::string> flags;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == subcommand)) continue;
    std::string key = item.name;
    std::replace(key.begin(), key.end(), '_', '-');
    if (key == "config") throw UsageError(path + ": nested config files are not supported");
    flags.push_back("--" + key + "=" + join(item.inputs));
  }
  return flags;
}

Json echo_options(const CLI::App* sub) {
  Json cfg = Json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help") continue;
    cfg[name] = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
  }
  return cfg;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Recurrent linear attention experiments and checks", "galite"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", version());

  std::vector<Subcommand> subs(8);
  define_equiv(app, subs[0]);
  define_gradcheck(app, subs[1]);
  define_approx_error(app, subs[2]);
  define_delta(app, subs[3]);
  define_bench_ops(app, subs[4]);
  define_bench_latency(app, subs[5]);
  define_train(app, subs[6]);
  define_ablate(app, subs[7]);

  std::vector<std::string> argv = args;
  Subcommand* chosen = nullptr;
  try {
    if (!args.empty() && args[0].rfind('-', 0) != 0 &&
        std::none_of(subs.begin(), subs.end(), [&](const Subcommand& s) { return s.app->get_name() == args[0]; }))
      throw CLI::ExtrasError("unknown subcommand '" + args[0] + "'", CLI::ExitCodes::ExtrasError);
    const std::string config = find_config(args);
    if (!config.empty() && !args.empty()) {
      const auto flags = config_flags(config, args[0]);
      argv.insert(argv.begin() + 1, flags.begin(), flags.end());
    }
    std::vector<std::string> reversed(argv.rbegin(), argv.rend());
    app.parse(reversed);
    for (auto& s : subs)
      if (s.app->parsed()) chosen = &s;
    if (chosen->prepare) chosen->prepare();
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version() << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* target = &app;
    for (const auto& s : subs)
      if (!args.empty() && args[0] == s.app->get_name()) target = s.app;
    err << target->help();
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  Run run{chosen->app->get_name(), chosen->common, fs::path(chosen->common.out), {}, out, err};
  const int threads = chosen->common.threads;
  omp_set_num_threads(threads);
  Eigen::setNbThreads(threads);

  Json manifest;
  manifest["subcommand"] = run.subcommand;
  manifest["argv"] = args;
  manifest["config"] = echo_options(chosen->app);
  manifest["config_file_flags"] = std::vector<std::string>(argv.begin() + 1, argv.end() - (args.size() - 1));
  manifest["seed"] = run.common.seed;
  manifest["threads"] = threads;
  manifest["version"] = version();
  manifest["started"] = utc_now();

  int code = kExitOk;
  try {
    fs::create_directories(run.dir);
    code = chosen->handler(run);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    manifest["error"] = e.what();
    code = kExitCheckFailed;
  }
  manifest["finished"] = utc_now();
  manifest["exit_code"] = code;
  manifest["outputs"] = run.outputs;
  try {
    std::ofstream mf(run.dir / "manifest.json", std::ios::binary);
    mf << manifest.dump(2) << '\n';
    if (!mf) throw std::runtime_error("cannot write manifest");
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
  return code;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace galite::cli
