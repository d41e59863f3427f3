#include "knnmoe/router.hpp"

#include <cmath>

namespace knnmoe {

std::optional<GatingVector> aggregate_neighbors(const LayerMemory& mem, const NeighborSet& ns) {
  if (ns.count() == 0) return std::nullopt;
  double total = 0.0;
  for (double s : ns.sims) total += s;
  if (total == 0.0) return std::nullopt;

  // dense accumulation keeps the result independent of neighbor order
  int n = 0;
  for (int idx : ns.indices)
    for (const GateEntry& e : mem.values[size_t(idx)].entries) n = std::max(n, e.expert + 1);
  std::vector<double> dense(size_t(n), 0.0);
  for (int j = 0; j < ns.count(); ++j) {
    double w = ns.sims[size_t(j)] / total;
    if (w == 0.0) continue;
    for (const GateEntry& e : mem.values[size_t(ns.indices[size_t(j)])].entries)
      dense[size_t(e.expert)] += w * e.weight;
  }
  return GatingVector::from_dense(dense);
}

double confidence(const NeighborSet& ns) {
  if (ns.count() == 0) return 0.0;
  double total = 0.0;
  for (double s : ns.sims) total += s;
  return total / ns.count();
}

GatingVector mix(const GatingVector& parametric, const GatingVector& memory, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    fail("mix: lambda " + std::to_string(lambda) + " outside [0,1]");
  return blend(parametric, memory, lambda);
}

MixDecision route(const LayerMemory& mem, std::span<const double> key,
                  const GatingVector& parametric, const RouterParams& p) {
  MixDecision d;
  d.a_parametric = parametric;
  d.neighbors = query(mem, key, p.neighbors, p.kernel);

  std::optional<GatingVector> agg = aggregate_neighbors(mem, d.neighbors);
  double conf = confidence(d.neighbors);
  if (!agg || !(conf >= p.min_confidence)) {
    d.fallback = true;
    d.lambda = 0.0;
    d.a_final = parametric;
    return d;
  }
  d.a_mem = std::move(*agg);
  d.lambda = std::min(conf, 1.0);
  d.a_final = mix(parametric, d.a_mem, d.lambda);
  return d;
}

}  // namespace knnmoe
