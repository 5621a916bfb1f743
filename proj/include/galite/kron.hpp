#pragma once

#include "galite/numerics.hpp"
#include "galite/rng.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <utility>
#include <vector>

// Cosine approximation of the Kronecker delta and the low-rank state
// reconstruction built on it.
namespace galite::kron {

// (2/r) * sum_{i=0}^{r} cos(2 pi i m / r) cos(2 pi i n / r), evaluated term by term.
double delta_hat(std::int64_t m, std::int64_t n, std::int64_t r);

// (S(m-n) + S(m+n)) / r with S(k) = r+1 if r | k else 1.
double delta_hat_closed_form(std::int64_t m, std::int64_t n, std::int64_t r);

// cos(2 pi k t / r), with k*t reduced modulo r before scaling.
double phase(std::int64_t k, std::int64_t t, std::int64_t r);

// Element t of a sequence (0-based storage) is processed at phase index t + 1,
// the same convention as a stream whose state starts at zero before step 1.
struct GatedSequence {
  std::vector<Vec> values;  // v_t
  std::vector<Vec> keys;    // k_t
  std::vector<Vec> betas;   // beta_t, same length as v_t
  std::vector<Vec> gammas;  // gamma_t, same length as k_t
};

void validate(const GatedSequence& seq);

// C_t = ((1-beta) (x) (1-gamma)) .* C_{t-1} + (beta .* v) (x) (gamma .* k), C_{-1} = 0.
Mat exact_state(const GatedSequence& seq);

// Runs the r+1 phased vector recurrences from zero and returns (2/r) * sum_k v~^k (x) k~^k.
Mat reconstruct_state(const GatedSequence& seq, std::int64_t r);

// One pair of recurrent vectors driven by independent uniform +/-1 signs.
Mat rank1_sign_reconstruct(const GatedSequence& seq, Rng& rng);

// Standard-normal values and keys with every gate fixed to c.
GatedSequence constant_gate_sequence(Index d, Index steps, double c, Rng& rng);

struct ApproxErrorConfig {
  Index d = 128;
  Index steps = 100;
  std::vector<std::int64_t> r_grid = {1, 2, 4, 8, 16, 32, 64, 128, 256, 512};
  std::vector<double> c_grid = {0.1, 0.25, 0.5, 0.75, 0.9, 1.0};
  int seeds = 50;
  std::uint64_t base_seed = 0;
  int threads = 1;
};

struct ApproxErrorRow {
  std::int64_t r = 0;
  double c = 0.0;
  int seed = 0;
  double frobenius_error = 0.0;
  double relative_error = 0.0;
};

// Rows ordered by (r, c, seed). Inputs for a given seed are shared by all
// (r, c) cells so comparisons across r are paired.
std::vector<ApproxErrorRow> approx_error_experiment(const ApproxErrorConfig& cfg);

// Mean Frobenius error per (r, c).
std::map<std::pair<std::int64_t, double>, double> mean_errors(const std::vector<ApproxErrorRow>& rows);

// Header `r,c,seed,frobenius_error`.
void write_approx_error_csv(std::ostream& os, const std::vector<ApproxErrorRow>& rows);

}  // namespace galite::kron
