#pragma once

#include <optional>

#include "knnmoe/memstore.hpp"

namespace knnmoe {

struct RouterParams {
  int neighbors = 1;  // K
  SimKernel kernel = SimKernel::Rbf;
  // Mean-similarity floor below which the position falls back to the
  // parametric routing. 0 keeps every retrieval; +infinity disables all.
  double min_confidence = 0.0;
};

// Similarity-weighted average of the neighbors' stored gatings. Empty when
// there are no neighbors or every similarity is zero (no signal to mix).
std::optional<GatingVector> aggregate_neighbors(const LayerMemory& mem, const NeighborSet& ns);

// Mean similarity over the returned neighbors; 0 when there are none.
double confidence(const NeighborSet& ns);

// (1-lambda) * parametric + lambda * memory. Rejects lambda outside [0,1].
GatingVector mix(const GatingVector& parametric, const GatingVector& memory, double lambda);

struct MixDecision {
  double lambda = 0.0;
  GatingVector a_parametric;
  GatingVector a_mem;
  GatingVector a_final;
  NeighborSet neighbors;
  bool fallback = false;  // parametric routing kept verbatim
};

// Full per-position decision: query, aggregate, gate on confidence, mix.
// On fallback a_final reproduces the parametric gating bit for bit.
MixDecision route(const LayerMemory& mem, std::span<const double> key,
                  const GatingVector& parametric, const RouterParams& p);

}  // namespace knnmoe
