#pragma once

#include "galite/attention.hpp"
#include "galite/autodiff.hpp"

#include <vector>

// Whole-sequence evaluation of one attention head on an autodiff tape.
// Per-step keys, values and gates are computed for all T rows at once, the
// recurrences run through linear_scan, and the readouts are formed last.
namespace galite {

using AttentionVars = AttentionWeights<ad::Var>;

AttentionVars attention_constants(ad::Tape& tape, const AttentionParams<double>& p);
AttentionVars attention_params(ad::Tape& tape, const AttentionParams<double>& p);

struct SequenceResult {
  ad::Var output;                // T x d_h
  MechanismState<double> state;  // state after the last row (values only)
};

// `resets[t] != 0` starts a new episode before row t: the state is zeroed and
// the AGaLiTe phase restarts. An empty `resets` means no resets.
SequenceResult forward_sequence(ad::Var x, const AttentionVars& p, const MechanismConfig& cfg,
                                const MechanismState<double>& state0,
                                const std::vector<char>& resets = {});

// Plain-matrix convenience wrapper.
struct SequenceOutput {
  Mat output;
  MechanismState<double> state;
};

SequenceOutput forward_sequence(const Mat& x, const AttentionParams<double>& p, const MechanismConfig& cfg,
                                const MechanismState<double>& state0, scan::Mode mode = scan::Mode::Sequential,
                                int threads = 1);

}  // namespace galite
