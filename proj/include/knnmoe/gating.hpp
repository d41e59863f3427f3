#pragma once

#include <span>
#include <vector>

#include "knnmoe/common.hpp"

namespace knnmoe {

struct GateEntry {
  int expert = 0;
  double weight = 0.0;
};

// Sparse per-position expert gating. Entries are sorted by expert index,
// weights are positive, and the total mass never exceeds 1 (softmax output
// loses mass when top-k masking drops entries without renormalization).
struct GatingVector {
  std::vector<GateEntry> entries;

  static GatingVector from_dense(std::span<const double> dense);
  std::vector<double> to_dense(int num_experts) const;

  double weight_sum() const;
  int support() const { return int(entries.size()); }
  double weight_of(int expert) const;  // 0 when the expert is absent

  // Structural checks: index range and ordering, positive weights, mass
  // bound. `what` names the holder in error messages.
  void validate(int num_experts, const std::string& what) const;

  bool operator==(const GatingVector& o) const;
};

// Routing function: softmax over the logits, keep the k largest (ties break
// toward the lowest expert index), optionally renormalize the survivors to
// sum to 1. Shares kernels with the differentiable graph path, so both
// produce bitwise-identical gatings.
GatingVector pi(std::span<const double> logits, int k, bool renormalize);

// (1-lambda)*a + lambda*b over the union of supports.
GatingVector blend(const GatingVector& a, const GatingVector& b, double lambda);

}  // namespace knnmoe
