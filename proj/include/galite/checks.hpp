#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

// Self-contained verification suites shared by the CLI and the acceptance
// binary. Each check compares a measured quantity against a fixed bound.
namespace galite::checks {

enum class Relation { Below, AtLeast };

struct Check {
  std::string suite;
  std::string name;
  double value = 0.0;
  double bound = 0.0;
  Relation relation = Relation::Below;
  bool pass = false;
  std::string note;
};

Check below(std::string suite, std::string name, double value, double bound, std::string note = {});
Check at_least(std::string suite, std::string name, double value, double bound, std::string note = {});

// delta_hat against its closed form, and its distance to the Kronecker delta.
std::vector<Check> kron_checks();

// Recurrences against brute-force and unrolled references, AGaLiTe against
// GaLiTe for large r, whole-sequence evaluation against stepping, and
// windowed attention against canonical attention.
std::vector<Check> equivalence_checks(std::uint64_t seed);

// Outputs after a single step from a zero state.
std::vector<Check> first_step_checks(std::uint64_t seed);

// finite_diff_check with h = 1e-5 at d=6, d_h=4, eta=2, r=2, heads=2, T=5,
// plus a multi-step comparison that separates finite-difference error from
// gradient error.
std::vector<Check> gradient_checks(std::uint64_t seed);

// Gray-code property, optimal returns, cue and junction statistics.
std::vector<Check> environment_checks(std::uint64_t seed);

// Op-count and state-size shapes.
std::vector<Check> complexity_checks();

bool all_pass(const std::vector<Check>& checks);

// Header `suite,name,value,relation,bound,pass,note`.
void write_checks_header(std::ostream& os);
void write_check_row(std::ostream& os, const Check& c);

}  // namespace galite::checks
