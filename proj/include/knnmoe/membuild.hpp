#pragma once

#include "knnmoe/data.hpp"
#include "knnmoe/memstore.hpp"
#include "knnmoe/model.hpp"

namespace knnmoe {

struct BuildParams {
  enum class Mode : uint8_t { Strict, Fast };

  double eta = 0.02;  // refinement step size
  int steps = 1;      // refinement steps S
  // Strict descends each target's own loss (one backward per target);
  // Fast approximates with a single backward of the summed loss, which
  // leaks other positions' gradients into each row.
  Mode mode = Mode::Strict;
  SimKernel kernel = SimKernel::Rbf;
  // Keep only entries whose isolated replay strictly lowers that token's NLL.
  bool accept_only_improving = false;
  // Collect per-token isolated before/after NLL (forced on by the filter).
  bool measure_tokens = true;
};

std::string build_mode_name(BuildParams::Mode m);
BuildParams::Mode build_mode_from_name(const std::string& name, const std::string& what);

// Routing-logit refinement for one sequence. Rows 0..T-2 of each layer's
// logits are optimized jointly across layers on their own token losses;
// the final row has no target and stays parametric.
struct SequenceRefinement {
  std::vector<int> moe_layers;         // aligned with the tensors below
  std::vector<Tensor> keys;            // [T x d] router inputs before refinement
  std::vector<Tensor> initial_logits;  // [T x N]
  std::vector<Tensor> refined_logits;  // [T x N]
  std::vector<double> base_token_nll;  // [T], 0 at the final row
};

SequenceRefinement refine_sequence(const Model& m, std::span<const int> tokens,
                                   const BuildParams& p);

// Router inputs at every position of every MoE layer, one [T x d] tensor per
// layer: the key material a memory build snapshots before refining anything.
std::vector<Tensor> collect_keys(const Model& m, std::span<const int> tokens);

// NLL of target position t with the gating at t replaced per `overrides`
// (layer id, gating), evaluated on the prefix trace tokens[0..t+1]. Causality
// makes row t of the prefix bitwise-equal to row t of the full trace.
double isolated_token_nll(const Model& m, std::span<const int> tokens, int t,
                          const std::vector<std::pair<int, GatingVector>>& overrides);

// Storage rounding: entries are stored in f32, so weights are rounded at
// construction; if rounding pushes the mass above 1, the largest weight is
// stepped down one f32 ulp at a time. Entries that round to zero are dropped.
GatingVector round_gating_f32(GatingVector g);
Tensor round_tensor_f32(Tensor t);

struct TokenMeasure {
  int sequence = 0;
  int position = 0;
  double nll_before = 0.0;
  double nll_after = 0.0;  // isolated replay of the stored gating
  bool stored = true;
};

struct BuildReport {
  int sequences = 0;
  int target_positions = 0;
  int stored_positions = 0;
  int improved = 0;  // isolated NLL strictly decreased
  double mean_isolated_delta = 0.0;  // mean (after - before) over measured tokens
  double joint_nll_before = 0.0;     // token-weighted over the corpus
  double joint_nll_after = 0.0;      // all stored overrides applied at once
  std::vector<TokenMeasure> tokens;
};

// One memory entry per (MoE layer, target position) of every reference
// sequence: key = the position's router input, value = pi applied to its
// refined logits. Sequences are processed independently and in order.
MemoryFile build_memory(const Model& m, const Corpus& ref, const BuildParams& p,
                        BuildReport* report = nullptr);

}  // namespace knnmoe
