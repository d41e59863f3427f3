#include "knnmoe/gating.hpp"

#include "knnmoe/kernels.hpp"

namespace knnmoe {

GatingVector GatingVector::from_dense(std::span<const double> dense) {
  GatingVector g;
  for (int i = 0; i < int(dense.size()); ++i)
    if (dense[i] != 0.0) g.entries.push_back({i, dense[i]});
  return g;
}

std::vector<double> GatingVector::to_dense(int num_experts) const {
  std::vector<double> d(size_t(num_experts), 0.0);
  for (const GateEntry& e : entries) {
    if (e.expert < 0 || e.expert >= num_experts)
      fail("gating: expert index " + std::to_string(e.expert) + " out of range [0," +
           std::to_string(num_experts) + ")");
    d[size_t(e.expert)] = e.weight;
  }
  return d;
}

double GatingVector::weight_sum() const {
  double s = 0.0;
  for (const GateEntry& e : entries) s += e.weight;
  return s;
}

double GatingVector::weight_of(int expert) const {
  for (const GateEntry& e : entries)
    if (e.expert == expert) return e.weight;
  return 0.0;
}

void GatingVector::validate(int num_experts, const std::string& what) const {
  int prev = -1;
  for (const GateEntry& e : entries) {
    if (e.expert < 0 || e.expert >= num_experts)
      fail(what + ": expert index " + std::to_string(e.expert) + " out of range [0," +
           std::to_string(num_experts) + ")");
    if (e.expert <= prev)
      fail(what + ": expert indices must be strictly increasing, got " + std::to_string(e.expert) +
           " after " + std::to_string(prev));
    if (!(e.weight > 0.0))
      fail(what + ": non-positive weight " + std::to_string(e.weight) + " for expert " +
           std::to_string(e.expert));
    prev = e.expert;
  }
  double s = weight_sum();
  if (s > 1.0 + 1e-9) fail(what + ": gating mass " + std::to_string(s) + " exceeds 1");
}

bool GatingVector::operator==(const GatingVector& o) const {
  if (entries.size() != o.entries.size()) return false;
  for (size_t i = 0; i < entries.size(); ++i)
    if (entries[i].expert != o.entries[i].expert || entries[i].weight != o.entries[i].weight)
      return false;
  return true;
}

GatingVector pi(std::span<const double> logits, int k, bool renormalize) {
  int n = int(logits.size());
  if (n == 0) fail("pi: empty logits");
  if (k < 1 || k > n)
    fail("pi: k=" + std::to_string(k) + " out of range [1," + std::to_string(n) + "]");
  std::vector<double> p(static_cast<size_t>(n));
  kern::softmax_row(p.data(), logits.data(), n);
  kern::topk_keep_row(p.data(), n, k);
  if (renormalize) kern::normalize_row(p.data(), n);
  return GatingVector::from_dense(p);
}

GatingVector blend(const GatingVector& a, const GatingVector& b, double lambda) {
  GatingVector out;
  double wa = 1.0 - lambda;
  size_t i = 0, j = 0;
  while (i < a.entries.size() || j < b.entries.size()) {
    int ea = i < a.entries.size() ? a.entries[i].expert : INT32_MAX;
    int eb = j < b.entries.size() ? b.entries[j].expert : INT32_MAX;
    if (ea < eb) {
      double w = wa * a.entries[i].weight;
      if (w != 0.0) out.entries.push_back({ea, w});
      ++i;
    } else if (eb < ea) {
      double w = lambda * b.entries[j].weight;
      if (w != 0.0) out.entries.push_back({eb, w});
      ++j;
    } else {
      double w = wa * a.entries[i].weight + lambda * b.entries[j].weight;
      if (w != 0.0) out.entries.push_back({ea, w});
      ++i;
      ++j;
    }
  }
  return out;
}

}  // namespace knnmoe
