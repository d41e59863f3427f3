#pragma once

#include <array>
#include <functional>
#include <span>
#include <vector>

#include "knnmoe/tensor.hpp"

namespace knnmoe::ad {

using NodeId = int32_t;

enum class Op : uint8_t {
  Leaf,
  Const,
  Matmul,
  MatmulNT,
  Add,
  Mul,
  Scale,
  MulRowvec,
  SoftmaxRows,
  CausalSoftmaxRows,
  RmsNormRows,
  Silu,
  Embedding,
  CrossEntropyRows,
  TopkZeroRows,
  NormalizeRows,
  SliceCols,
  ConcatCols,
  MergeRows,
  Sum,
  Mean,
  Pick,
  MoeFfn,
};

// One recorded operation. Values are computed eagerly as the graph is built;
// caches hold whatever the backward pass needs beyond parent values.
struct Node {
  Op op = Op::Leaf;
  Tensor value;
  Tensor grad;  // allocated lazily by backward()
  std::array<NodeId, 2> parents{-1, -1};
  std::vector<NodeId> extra_parents;  // ConcatCols inputs / MoeFfn expert weights
  std::vector<int> ints;              // ids, targets, slice bounds, k, pick coords
  std::vector<uint8_t> mask;          // TopkZeroRows keep mask, MergeRows row mask
  double scalar = 0.0;                // Scale factor, RmsNormRows eps
  Tensor cache;                       // op-specific (probs, row stats, preacts)
  bool requires_grad = false;
};

// Reverse-mode tape over 2-D tensors. A tape records exactly one forward
// trace; backward() may be called any number of times on it (each call
// re-seeds and re-accumulates from scratch, so repeated calls with the same
// root are bitwise identical). Never rebind leaf values on an existing tape;
// retrace instead.
class Tape {
 public:
  NodeId leaf(Tensor value);
  NodeId constant(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_nt(NodeId a, NodeId b);  // A * B^T, B given row-major [N x K]
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId mul_rowvec(NodeId x, NodeId v);  // broadcast 1xN row over MxN
  NodeId softmax_rows(NodeId a);
  NodeId causal_softmax_rows(NodeId a);  // row t normalizes over columns 0..t
  NodeId rms_norm_rows(NodeId a, double eps);
  NodeId silu(NodeId a);
  NodeId embedding(NodeId table, const std::vector<int>& ids);
  // Per-row NLL of the integer target; rows with target -1 produce 0.
  NodeId cross_entropy_rows(NodeId logits, const std::vector<int>& targets);
  NodeId topk_zero_rows(NodeId probs, int k);
  NodeId normalize_rows(NodeId a);
  NodeId slice_cols(NodeId a, int c0, int c1);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  // take_b[r] != 0 selects the row from b, otherwise from a.
  NodeId merge_rows(NodeId a, NodeId b, const std::vector<uint8_t>& take_b);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId pick(NodeId a, int r, int c);
  // Sparse mixture FFN: out[t] = sum_i gates[t,i] * silu(u[t] W1_i) W2_i over
  // the nonzero gates of row t. w1/w2 hold one NodeId per expert.
  NodeId moe_ffn(NodeId u, NodeId gates, const std::vector<NodeId>& w1,
                 const std::vector<NodeId>& w2);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  // Zero tensor until backward() has run over a path containing id.
  const Tensor& grad(NodeId id);

  // Gradient of a scalar root w.r.t. every reachable differentiable node.
  void backward(NodeId root);

  int size() const { return int(nodes_.size()); }

 private:
  NodeId push(Node n);
  Node& at(NodeId id) { return nodes_[id]; }
  void backward_node(NodeId id);

  std::vector<Node> nodes_;
};

// A retraceable graph: leaf values plus a builder that reconstructs the graph
// on a fresh tape and returns the root. Rebuilding instead of mutating keeps
// finite-difference probes and repeated forwards trivially consistent.
struct TracedGraph {
  std::vector<Tensor> leaf_values;
  std::function<NodeId(Tape&, const std::vector<NodeId>&)> build;
};

struct ForwardTrace {
  Tape tape;
  std::vector<NodeId> leaves;
  NodeId root = -1;
};

ForwardTrace forward(const TracedGraph& g);
ForwardTrace forward(const TracedGraph& g, const std::vector<Tensor>& leaf_values);

// Central-difference check of d(root)/d(leaf) against backward(). Returns the
// max elementwise relative error with denominator max(|g_backward|, 1e-8).
double finite_diff_check(const TracedGraph& g, int leaf_index, double step);

}  // namespace knnmoe::ad
