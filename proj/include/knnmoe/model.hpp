#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string_view>

#include "knnmoe/autodiff.hpp"
#include "knnmoe/gating.hpp"
#include "knnmoe/tensor.hpp"

namespace knnmoe {

struct ModelConfig {
  int vocab_size = 64;
  int dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  int max_seq_len = 128;
  int num_experts = 8;
  int active_experts = 2;
  int expert_hidden = 128;
  bool renormalize_topk = false;
  std::vector<int> moe_layers;  // empty selects every layer

  void validate() const;
  bool is_moe_layer(int layer) const;
  std::vector<int> moe_layer_ids() const;
};

// Decoder-only pre-norm transformer with sparse expert FFNs. Parameters are
// kept as an ordered manifest; the order pins the checkpoint layout.
struct Model {
  ModelConfig cfg;
  std::vector<std::pair<std::string, Tensor>> params;

  Tensor& param(std::string_view name);
  const Tensor& param(std::string_view name) const;
  int param_index(std::string_view name) const;  // -1 when absent
};

// Ordered parameter manifest implied by a config; pins checkpoint layout.
struct ParamSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
};
std::vector<ParamSpec> param_layout(const ModelConfig& cfg);

Model init_model(const ModelConfig& cfg, uint64_t seed);

// ---------------------------------------------------------------------------
// Routing plans: how each (MoE layer, position) obtains its gating.
//   Parametric - the learned router decides (default everywhere)
//   Override   - a fixed gating replaces the router's output
//   Learnable  - the position's routing logits become a differentiable leaf
// ---------------------------------------------------------------------------

enum class RouteKind : uint8_t { Parametric, Override, Learnable };

struct RouteDirective {
  RouteKind kind = RouteKind::Parametric;
  GatingVector gating;              // Override payload
  std::vector<double> logits_init;  // Learnable payload, one logit per expert
};

// Consulted at parametric positions during the trace. Returning a gating
// overrides the router for that position; nullopt keeps the parametric one.
// router_input is the normed hidden state the router consumed.
using GatingHook = std::function<std::optional<GatingVector>(
    int layer, int pos, std::span<const double> router_input, const GatingVector& parametric)>;

struct RoutingPlan {
  // One directive per sequence position; a missing layer is all-parametric.
  std::map<int, std::vector<RouteDirective>> layers;
  GatingHook hook;
};

// Merge per-layer directives into `plan`, replacing the directive at
// (layer, pos) for every entry. Existing directives elsewhere survive.
void merge_rows(RoutingPlan& plan, int layer, int seq_len,
                const std::vector<std::pair<int, RouteDirective>>& updates);

// ---------------------------------------------------------------------------
// Traced forward pass
// ---------------------------------------------------------------------------

struct MoeLayerTrace {
  int layer_id = -1;
  ad::NodeId router_input = -1;     // [T x d] normed FFN input, the memory keys
  ad::NodeId router_logits = -1;    // [T x N] after any learnable-row merge
  ad::NodeId gating = -1;           // [T x N] matrix fed to the experts
  ad::NodeId learn_logits = -1;     // leaf behind learnable rows, -1 when unused
  std::vector<uint8_t> learn_rows;  // rows taken from learn_logits
};

struct Trace {
  ad::Tape tape;
  std::vector<int> tokens;
  std::vector<int> targets;  // targets[t] = tokens[t+1]; final row is -1
  int num_targets = 0;
  ad::NodeId logits = -1;     // [T x V]
  ad::NodeId token_nll = -1;  // [T x 1], zero at rows without a target
  ad::NodeId mean_nll = -1;   // scalar mean over target rows
  std::vector<MoeLayerTrace> moe;
  std::vector<ad::NodeId> param_nodes;  // aligned with model.params
};

struct TraceOptions {
  bool params_trainable = false;
  const RoutingPlan* plan = nullptr;
};

Trace trace_forward(const Model& m, std::span<const int> tokens, const TraceOptions& opts = {});

// ---------------------------------------------------------------------------
// Plain-inference view (values extracted from a trace)
// ---------------------------------------------------------------------------

struct MoeLayerResult {
  int layer_id = -1;
  Tensor router_input;   // [T x d]
  Tensor router_logits;  // [T x N]
  std::vector<GatingVector> gatings;
};

struct ForwardResult {
  Tensor logits;                  // [T x V]
  std::vector<double> token_nll;  // per position, 0 where no target
  double mean_nll = 0.0;
  int num_targets = 0;
  std::vector<MoeLayerResult> moe;
};

ForwardResult model_forward(const Model& m, std::span<const int> tokens,
                            const RoutingPlan* plan = nullptr);

}  // namespace knnmoe
