#include <doctest.h>

#include "galite/bench.hpp"

#include <sstream>

using namespace galite;
using namespace galite::bench;

namespace {

ModelConfig layer(Mechanism kind, Index d = 32, Index d_h = 8, Index heads = 2, Index eta = 2, std::int64_t r = 1) {
  ModelConfig cfg;
  cfg.d = d;
  cfg.d_h = d_h;
  cfg.heads = heads;
  cfg.layers = 1;
  cfg.mechanism.kind = kind;
  cfg.mechanism.eta = eta;
  cfg.mechanism.r = r;
  return cfg;
}

}  // namespace

TEST_CASE("recurrent op counts do not depend on the stream position") {
  for (auto kind : {Mechanism::AGaLiTe, Mechanism::GaLiTe, Mechanism::Linear}) {
    const std::string name = to_string(kind);
    CAPTURE(name);
    const ModelConfig cfg = layer(kind);
    const auto base = count_ops(cfg, 1);
    CHECK(base.mul_adds > 0);
    CHECK(base.activations > 0);
    for (std::int64_t t : {2, 10, 100, 10'000}) {
      const auto rep = count_ops(cfg, t);
      CHECK(rep.mul_adds == base.mul_adds);
      CHECK(rep.activations == base.activations);
      CHECK(rep.t == t);
    }
  }
}

TEST_CASE("op counts match the multiply-add convention written out by hand") {
  const std::uint64_t d = 32, dh = 8, eta = 2, dk = eta * dh;
  // Learned features: W_p x, W_k x and the flattened outer product, for keys and queries.
  const std::uint64_t proj = dh * d + 2 * (eta * d + dh * d + dk);
  const std::uint64_t gates = dh * d + (eta * d + dh * d + dk) + dh + dk;
  for (std::int64_t r : {1, 3}) {
    const std::uint64_t terms = static_cast<std::uint64_t>(r) + 1;
    const std::uint64_t want = proj + gates + 2 * terms * (dh + dk) + dk + terms * dk + terms * dh + dk + dh;
    CHECK(count_ops(layer(Mechanism::AGaLiTe, 32, 8, 1, 2, r), 9).mul_adds == want);
  }
  CHECK(count_ops(layer(Mechanism::GaLiTe, 32, 8, 1, 2), 9).mul_adds ==
        proj + gates + 3 * dh * dk + dk + dh * dk + dk + dh);
  ModelConfig w = layer(Mechanism::Windowed, 32, 8, 1);
  w.mechanism.memory = 20;
  CHECK(count_ops(w, 7).mul_adds == 3 * dh * d + 2 * 7 * dh);
  CHECK(count_ops(w, 50).mul_adds == 3 * dh * d + 2 * 20 * dh);
}

TEST_CASE("AGaLiTe op counts are affine in r") {
  std::vector<std::uint64_t> counts;
  for (std::int64_t r = 1; r <= 6; ++r) counts.push_back(count_ops(layer(Mechanism::AGaLiTe, 32, 8, 1, 2, r), 5).mul_adds);
  for (std::size_t i = 2; i < counts.size(); ++i) CHECK(counts[i] - counts[i - 1] == counts[1] - counts[0]);
  CHECK(counts[1] > counts[0]);
}

TEST_CASE("windowed op counts are affine in buffer occupancy") {
  ModelConfig cfg = layer(Mechanism::Windowed);
  std::vector<double> m_values, counts;
  for (Index m : {16, 32, 64, 128, 256, 512}) {
    cfg.mechanism.memory = m;
    const auto full = count_ops(cfg, m + 5);
    CHECK(full.memory == m);
    m_values.push_back(static_cast<double>(m));
    counts.push_back(static_cast<double>(full.mul_adds));
  }
  const Regression fit = linear_fit(m_values, counts);
  CHECK(fit.r_squared > 0.999);
  CHECK(fit.slope > 0.0);
  // Exact affinity: every residual vanishes.
  for (std::size_t i = 0; i < counts.size(); ++i)
    CHECK(counts[i] == doctest::Approx(fit.intercept + fit.slope * m_values[i]).epsilon(1e-12));

  cfg.mechanism.memory = 64;
  std::uint64_t prev = 0;
  for (std::int64_t t = 1; t <= 64; ++t) {
    const auto rep = count_ops(cfg, t);
    if (t > 1) CHECK(rep.mul_adds - prev == count_ops(cfg, 2).mul_adds - count_ops(cfg, 1).mul_adds);
    prev = rep.mul_adds;
  }
  CHECK(count_ops(cfg, 64).mul_adds == count_ops(cfg, 1000).mul_adds);
}

TEST_CASE("op counts scale with heads and layers") {
  ModelConfig one = layer(Mechanism::AGaLiTe, 32, 8, 1);
  ModelConfig many = one;
  many.heads = 3;
  many.layers = 2;
  CHECK(count_ops(many, 7).mul_adds == 6 * count_ops(one, 7).mul_adds);
  many.layers = 0;
  const auto none = count_ops(many, 7);
  CHECK(none.mul_adds == 0);
  CHECK(none.activations == 0);
  CHECK(none.state_scalars == 0);
  CHECK_THROWS_AS(count_ops(one, 0), ContractError);
}

TEST_CASE("state sizes match allocation") {
  for (auto kind : {Mechanism::Linear, Mechanism::GaLiTe, Mechanism::AGaLiTe, Mechanism::Windowed}) {
    for (Index heads : {1, 4}) {
      for (std::int64_t r : {1, 3, 7}) {
        const std::string name = to_string(kind);
        CAPTURE(name);
        CAPTURE(heads);
        CAPTURE(r);
        ModelConfig cfg = layer(kind, 64, 16, heads, 4, r);
        cfg.mechanism.memory = 32;
        CHECK(bench::state_size(cfg) == allocated_state_scalars(cfg));
      }
    }
  }
  const ModelConfig g = layer(Mechanism::GaLiTe, 256, 64, 1, 4, 1);
  const ModelConfig a = layer(Mechanism::AGaLiTe, 256, 64, 1, 4, 1);
  CHECK(bench::state_size(g) == 16640);
  CHECK(bench::state_size(a) == 896);
  const double ratio = static_cast<double>(bench::state_size(g)) / static_cast<double>(bench::state_size(a));
  CHECK(ratio == doctest::Approx(18.571).epsilon(1e-3));
  CHECK(ratio >= 10.0);
  ModelConfig w = layer(Mechanism::Windowed, 64, 16, 2);
  w.mechanism.memory = 10;
  CHECK(bench::state_size(w) == 10 * 2 * 16 * 2);
}

TEST_CASE("linear_fit") {
  const auto exact = linear_fit({0, 1, 2, 3}, {1, 3, 5, 7});
  CHECK(exact.slope == doctest::Approx(2.0));
  CHECK(exact.intercept == doctest::Approx(1.0));
  CHECK(exact.r_squared == doctest::Approx(1.0));
  CHECK(exact.slope_stderr == doctest::Approx(0.0));
  // Hand-computed: x mean 1.5, y = {0, 1, 1, 3}, sxy = 4.5, sxx = 5.
  const auto noisy = linear_fit({0, 1, 2, 3}, {0, 1, 1, 3});
  CHECK(noisy.slope == doctest::Approx(0.9));
  CHECK(noisy.intercept == doctest::Approx(-0.1));
  CHECK(noisy.r_squared == doctest::Approx(4.05 / 4.75));
  CHECK(noisy.slope_stderr == doctest::Approx(std::sqrt(0.7 / 2.0 / 5.0)));
  CHECK_THROWS_AS(linear_fit({1, 2}, {1, 2}), ShapeError);
}

TEST_CASE("latency harness schema") {
  ModelConfig cfg = layer(Mechanism::AGaLiTe, 16, 4, 1);
  LatencyConfig lc;
  lc.inner = 4;
  lc.warmup = 1;
  const auto rows = measure_latency(cfg, {1, 100}, lc);
  REQUIRE(rows.size() == 2);
  for (const auto& row : rows) {
    CHECK(row.reps == 30);
    CHECK(row.samples_ms.size() == 30);
    CHECK(row.mean_ms > 0.0);
    CHECK(row.stderr_ms >= 0.0);
    CHECK(row.mode == "step");
  }
  CHECK(rows[1].context == 100);
  const auto seq = measure_sequence_latency(cfg, {8, 16}, lc);
  CHECK(seq[0].mode == "sequence");
  CHECK(seq[1].context == 16);

  lc.reps = 29;
  CHECK_THROWS_AS(measure_latency(cfg, {1}, lc), ContractError);
  CHECK_THROWS_AS(measure_sequence_latency(cfg, {1}, lc), ContractError);

  std::ostringstream os;
  write_latency_header(os);
  LatencyRow row{"agalite", "step", 64, 0.25, 0.01, 30, {}};
  write_latency_row(os, row);
  CHECK(os.str() == "mechanism,mode,context,mean_ms,stderr_ms,reps\nagalite,step,64,0.25,0.01,30\n");

  std::ostringstream oc;
  write_opcount_header(oc);
  write_opcount_row(oc, count_ops(cfg, 3));
  CHECK(oc.str().rfind("mechanism,d,d_h,heads,eta,r,M,t,mul_adds,activations,state_scalars\nagalite,16,4,1,2,1,", 0) == 0);
}
