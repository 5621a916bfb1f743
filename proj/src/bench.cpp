#include "galite/bench.hpp"

#include "galite/csv.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace galite::bench {

namespace {

template <typename Scalar>
void prefill(MechanismState<Scalar>& st, const MechanismConfig& cfg, std::int64_t steps, Rng& rng) {
  std::visit(
      [&](auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, WindowState<Scalar>>) {
          const Index n = std::min<Index>(static_cast<Index>(steps), s.capacity());
          s.keys.topRows(n) = random_normal(n, s.keys.cols(), rng).template cast<Scalar>();
          s.values.topRows(n) = random_normal(n, s.values.cols(), rng).template cast<Scalar>();
          s.start = 0;
          s.count = n;
        } else if constexpr (std::is_same_v<S, AGaLiTeState<Scalar>>) {
          s.v_tilde = random_normal(s.v_tilde.rows(), s.v_tilde.cols(), rng).template cast<Scalar>();
          s.k_tilde = random_uniform(s.k_tilde.rows(), s.k_tilde.cols(), 0.0, 1.0, rng).template cast<Scalar>();
          s.s = random_uniform(s.s.size(), 1, 0.5, 1.5, rng).template cast<Scalar>();
          s.tick = steps;
        } else {
          s.c = random_normal(s.c.rows(), s.c.cols(), rng).template cast<Scalar>();
          s.s = random_uniform(s.s.size(), 1, 0.5, 1.5, rng).template cast<Scalar>();
        }
      },
      st);
  (void)cfg;
}

}  // namespace

Index state_size(const ModelConfig& cfg) { return galite::state_size(cfg); }

Index allocated_state_scalars(const ModelConfig& cfg) {
  Index n = 0;
  for (Index h = 0; h < cfg.heads; ++h) n += state_scalars<double>(make_state<double>(cfg.mechanism, cfg.d_h));
  return n;
}

OpCountReport count_ops(const ModelConfig& cfg, std::int64_t t) {
  if (t < 1) throw ContractError("count_ops: stream position must be >= 1");
  const auto& mc = cfg.mechanism;
  OpCountReport rep;
  rep.mechanism = to_string(mc.kind);
  rep.d = cfg.d;
  rep.d_h = cfg.d_h;
  rep.heads = cfg.heads;
  rep.eta = mc.eta;
  rep.r = mc.r;
  rep.memory = mc.memory;
  rep.t = t;
  rep.state_scalars = bench::state_size(cfg) * cfg.layers;
  if (cfg.layers == 0) return rep;

  Rng rng = make_rng(0, {static_cast<std::uint64_t>(t)});
  const AttentionParams<double> p = init_attention_params(mc, cfg.d, cfg.d_h, rng);
  auto st = make_state<double>(mc, cfg.d_h);
  prefill(st, mc, t - 1, rng);
  const Vec x = random_normal(cfg.d, 1, rng);
  OpCounter ops;
  mechanism_step(x, st, p, mc, &ops);
  const auto copies = static_cast<std::uint64_t>(cfg.heads * cfg.layers);
  rep.mul_adds = ops.mul_adds * copies;
  rep.activations = ops.activations * copies;
  return rep;
}

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void summarize(LatencyRow& row, int group) {
  const auto& s = row.samples_ms;
  const auto n = static_cast<double>(s.size());
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : s) ss += (v - mean) * (v - mean);
  row.stderr_ms = s.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
  std::vector<double> means;
  const std::size_t g = static_cast<std::size_t>(std::max(1, group));
  for (std::size_t i = 0; i + g <= s.size(); i += g)
    means.push_back(std::accumulate(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + g), 0.0) /
                    static_cast<double>(g));
  row.mean_ms = means.empty() ? mean : median(means);
  row.reps = static_cast<int>(s.size());
}

template <typename Scalar>
std::vector<LatencyRow> step_latency(const ModelConfig& cfg, const std::vector<std::int64_t>& grid,
                                     const LatencyConfig& lc) {
  if (lc.reps < 30) throw ContractError("measure_latency: at least 30 repetitions are required");
  const bool windowed = cfg.mechanism.kind == Mechanism::Windowed;
  struct Point {
    MechanismConfig mc;
    std::vector<AttentionParams<Scalar>> params;
    std::vector<MechanismState<Scalar>> states;
    Matrix<Scalar> w_o;
    std::vector<Vector<Scalar>> inputs;
  };
  std::vector<Point> points;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    Rng rng = make_rng(lc.seed, {static_cast<std::uint64_t>(g)});
    Point pt;
    pt.mc = cfg.mechanism;
    if (windowed) pt.mc.memory = static_cast<Index>(grid[g]);
    for (Index h = 0; h < cfg.heads; ++h) {
      pt.params.push_back(cast_params<Scalar>(init_attention_params(pt.mc, cfg.d, cfg.d_h, rng)));
      pt.states.push_back(make_state<Scalar>(pt.mc, cfg.d_h));
      prefill(pt.states.back(), pt.mc, grid[g], rng);
    }
    pt.w_o = orthogonal(cfg.d, cfg.heads * cfg.d_h, rng).cast<Scalar>();
    for (int i = 0; i < lc.inner; ++i) pt.inputs.push_back(random_normal(cfg.d, 1, rng).cast<Scalar>());
    points.push_back(std::move(pt));
  }

  std::vector<LatencyRow> rows(grid.size());
  volatile Scalar sink = 0;  // keeps the timed work observable
  auto run = [&](Point& pt) {
    const Index d_h = cfg.d_h;
    Vector<Scalar> cat(d_h * cfg.heads);
    const auto start = Clock::now();
    for (const auto& x : pt.inputs) {
      for (std::size_t h = 0; h < pt.params.size(); ++h)
        cat.segment(static_cast<Index>(h) * d_h, d_h) = mechanism_step(x, pt.states[h], pt.params[h], pt.mc);
      const Vector<Scalar> y = pt.w_o * cat;
      sink = sink + y[0];
    }
    const std::chrono::duration<double, std::milli> dt = Clock::now() - start;
    return dt.count() / static_cast<double>(pt.inputs.size());
  };
  for (int w = 0; w < lc.warmup; ++w)
    for (auto& pt : points) run(pt);
  for (int rep = 0; rep < lc.reps; ++rep)
    for (std::size_t g = 0; g < points.size(); ++g) rows[g].samples_ms.push_back(run(points[g]));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    rows[g].mechanism = to_string(cfg.mechanism.kind);
    rows[g].mode = "step";
    rows[g].context = grid[g];
    summarize(rows[g], lc.group);
  }
  return rows;
}

}  // namespace

std::vector<LatencyRow> measure_latency(const ModelConfig& cfg, const std::vector<std::int64_t>& grid,
                                        const LatencyConfig& lc) {
  return lc.single_precision ? step_latency<float>(cfg, grid, lc) : step_latency<double>(cfg, grid, lc);
}

std::vector<LatencyRow> measure_sequence_latency(const ModelConfig& cfg, const std::vector<std::int64_t>& grid,
                                                 const LatencyConfig& lc) {
  if (lc.reps < 30) throw ContractError("measure_sequence_latency: at least 30 repetitions are required");
  std::vector<LatencyRow> rows(grid.size());
  std::vector<Mat> inputs;
  std::vector<AttentionParams<double>> params;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    Rng rng = make_rng(lc.seed, {100, static_cast<std::uint64_t>(g)});
    params.push_back(init_attention_params(cfg.mechanism, cfg.d, cfg.d_h, rng));
    inputs.push_back(random_normal(static_cast<Index>(grid[g]), cfg.d, rng));
  }
  volatile double sink = 0.0;
  auto run = [&](std::size_t g) {
    const auto start = Clock::now();
    auto out = forward_sequence(inputs[g], params[g], cfg.mechanism, make_state<double>(cfg.mechanism, cfg.d_h));
    const std::chrono::duration<double, std::milli> dt = Clock::now() - start;
    sink = sink + out.output(0, 0);
    return dt.count();
  };
  for (int w = 0; w < lc.warmup; ++w)
    for (std::size_t g = 0; g < grid.size(); ++g) run(g);
  for (int rep = 0; rep < lc.reps; ++rep)
    for (std::size_t g = 0; g < grid.size(); ++g) rows[g].samples_ms.push_back(run(g));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    rows[g].mechanism = to_string(cfg.mechanism.kind);
    rows[g].mode = "sequence";
    rows[g].context = grid[g];
    summarize(rows[g], lc.group);
  }
  return rows;
}

Regression linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  require_shape(x.size() == y.size() && x.size() >= 3, "linear_fit: need at least 3 paired points");
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  Regression r;
  r.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  r.intercept = my - r.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (r.intercept + r.slope * x[i]);
    sse += e * e;
  }
  r.slope_stderr = sxx > 0.0 ? std::sqrt(sse / (n - 2.0) / sxx) : 0.0;
  r.r_squared = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  return r;
}

Regression latency_slope(const std::vector<LatencyRow>& rows) {
  std::vector<double> x, y;
  for (const auto& row : rows)
    for (double s : row.samples_ms) {
      x.push_back(static_cast<double>(row.context));
      y.push_back(s);
    }
  return linear_fit(x, y);
}

void write_opcount_header(std::ostream& os) {
  os << "mechanism,d,d_h,heads,eta,r,M,t,mul_adds,activations,state_scalars\n";
}

void write_opcount_row(std::ostream& os, const OpCountReport& r) {
  os << r.mechanism << ',' << r.d << ',' << r.d_h << ',' << r.heads << ',' << r.eta << ',' << r.r << ','
     << r.memory << ',' << r.t << ',' << r.mul_adds << ',' << r.activations << ',' << r.state_scalars << '\n';
}

void write_latency_header(std::ostream& os) { os << "mechanism,mode,context,mean_ms,stderr_ms,reps\n"; }

void write_latency_row(std::ostream& os, const LatencyRow& r) {
  os << r.mechanism << ',' << r.mode << ',' << r.context << ',' << fmt_shortest(r.mean_ms) << ','
     << fmt_shortest(r.stderr_ms) << ',' << r.reps << '\n';
}

}  // namespace galite::bench
