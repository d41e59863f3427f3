#pragma once

#include "knnmoe/gating.hpp"
#include "knnmoe/tensor.hpp"

namespace knnmoe {

enum class SimKernel : uint8_t { Rbf, Cosine };

std::string kernel_name(SimKernel k);
SimKernel kernel_from_name(const std::string& name, const std::string& what);

// One layer's key-value memory. Keys and gating weights are rounded to f32
// at construction, so the in-memory store matches its file byte for byte.
struct LayerMemory {
  int layer_id = -1;
  int dim = 0;
  Tensor keys;                       // [M x dim]
  std::vector<GatingVector> values;  // one refined gating per key
  double gamma = 1.0;                // RBF bandwidth fixed at build time

  int size() const { return keys.rows; }
  void validate(int num_experts, const std::string& what) const;
};

struct NeighborSet {
  std::vector<int> indices;  // ascending by (distance, row id)
  std::vector<double> dist2;
  std::vector<double> sims;

  int count() const { return int(indices.size()); }
};

// Exact scan over all keys; returns the k nearest by squared L2 distance,
// ties toward the lower row id. Similarities use the requested kernel:
// RBF exp(-gamma d^2), cosine clamped at zero (zero vectors score 0).
NeighborSet query(const LayerMemory& mem, std::span<const double> key, int k, SimKernel kernel);

double rbf_similarity(double dist2, double gamma);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Mean L2 distance from each sampled key to its nearest distinct key, with a
// deterministic strided sample of at most 1024 keys; gamma = 1 / (2 dbar^2).
// Degenerate stores (single key, all-identical keys) fall back to 1.
double estimate_gamma(const Tensor& keys);

struct BuildInfo {
  double eta = 0.0;
  int steps = 0;
  std::string mode;  // "strict" | "fast"
};

// Memory file: magic "MOEMEM1\0", u32 LE header length, JSON header, then per
// layer the f32 key rows followed by the sparse gating values.
struct MemoryFile {
  std::string model_fingerprint;
  int dim = 0;
  int num_experts = 0;
  int active_experts = 0;
  SimKernel kernel = SimKernel::Rbf;
  BuildInfo build;
  std::vector<LayerMemory> layers;

  const LayerMemory* layer(int layer_id) const;
  int total_entries() const;
  void validate(const std::string& what) const;
};

std::vector<uint8_t> serialize_memory(const MemoryFile& m);
void save_memory(const MemoryFile& m, const std::string& path);
MemoryFile parse_memory(const std::vector<uint8_t>& bytes, const std::string& what);
MemoryFile load_memory(const std::string& path);

}  // namespace knnmoe
