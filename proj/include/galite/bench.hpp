#pragma once

#include "galite/model.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace galite::bench {

struct OpCountReport {
  std::string mechanism;
  Index d = 0, d_h = 0, heads = 0, eta = 0;
  std::int64_t r = 0;
  Index memory = 0;
  std::int64_t t = 0;
  std::uint64_t mul_adds = 0;
  std::uint64_t activations = 0;
  Index state_scalars = 0;
};

// Mechanism-kernel work for one step at stream position t (1-based), summed
// over heads and layers. Windowed buffers hold min(t, M) entries after the step.
OpCountReport count_ops(const ModelConfig& cfg, std::int64_t t);

// Recurrent-state scalars per layer (all heads).
Index state_size(const ModelConfig& cfg);

// Scalars actually allocated by a freshly constructed per-layer state.
Index allocated_state_scalars(const ModelConfig& cfg);

struct LatencyRow {
  std::string mechanism;
  std::string mode;  // "step" or "sequence"
  std::int64_t context = 0;
  double mean_ms = 0.0;
  double stderr_ms = 0.0;
  int reps = 0;
  std::vector<double> samples_ms;  // per-rep mean step time
};

struct LatencyConfig {
  int reps = 30;
  int warmup = 5;
  int inner = 50;       // steps per rep
  int group = 5;        // reps per group in the median of means
  std::uint64_t seed = 0;
  bool single_precision = true;
};

// Step latency of one multi-head attention layer. For windowed attention the
// grid is the memory size M with a full buffer; for the recurrent mechanisms
// it is the stream position. Grid points are measured round-robin.
std::vector<LatencyRow> measure_latency(const ModelConfig& cfg, const std::vector<std::int64_t>& grid,
                                        const LatencyConfig& lc);

// Whole-sequence forward_sequence timing for sequence lengths in `grid`.
std::vector<LatencyRow> measure_sequence_latency(const ModelConfig& cfg, const std::vector<std::int64_t>& grid,
                                                 const LatencyConfig& lc);

struct Regression {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_stderr = 0.0;
  double r_squared = 0.0;
};

Regression linear_fit(const std::vector<double>& x, const std::vector<double>& y);

// Per-rep samples regressed on the grid value.
Regression latency_slope(const std::vector<LatencyRow>& rows);

void write_opcount_header(std::ostream& os);
void write_opcount_row(std::ostream& os, const OpCountReport& r);
void write_latency_header(std::ostream& os);
void write_latency_row(std::ostream& os, const LatencyRow& r);

}  // namespace galite::bench
