#include "knnmoe/autodiff.hpp"

#include <cmath>

#include "knnmoe/kernels.hpp"

namespace knnmoe::ad {

namespace {

std::string node_desc(const char* op, NodeId id) {
  return std::string(op) + " (node " + std::to_string(id) + ")";
}

void ensure_grad(Node& n) {
  if (n.grad.data.empty()) n.grad = Tensor(n.value.rows, n.value.cols);
}

}  // namespace

NodeId Tape::push(Node n) {
  for (NodeId p : n.parents)
    if (p >= 0 && nodes_[p].requires_grad) n.requires_grad = true;
  for (NodeId p : n.extra_parents)
    if (nodes_[p].requires_grad) n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return NodeId(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return NodeId(nodes_.size() - 1);
}

NodeId Tape::constant(Tensor value) {
  Node n;
  n.op = Op::Const;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return NodeId(nodes_.size() - 1);
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  if (A.cols != B.rows)
    fail("matmul: shape mismatch " + A.shape_str() + " * " + B.shape_str() + " at node " +
         std::to_string(size()));
  Node n;
  n.op = Op::Matmul;
  n.parents = {a, b};
  n.value = Tensor(A.rows, B.cols);
  kern::gemm_nn(n.value.data.data(), A.data.data(), B.data.data(), A.rows, A.cols, B.cols, false);
  return push(std::move(n));
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  if (A.cols != B.cols)
    fail("matmul_nt: shape mismatch " + A.shape_str() + " * " + B.shape_str() + "^T at node " +
         std::to_string(size()));
  Node n;
  n.op = Op::MatmulNT;
  n.parents = {a, b};
  n.value = Tensor(A.rows, B.rows);
  kern::gemm_nt(n.value.data.data(), A.data.data(), B.data.data(), A.rows, A.cols, B.rows, false);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  if (!A.same_shape(B))
    fail("add: shape mismatch " + A.shape_str() + " vs " + B.shape_str() + " at node " +
         std::to_string(size()));
  Node n;
  n.op = Op::Add;
  n.parents = {a, b};
  n.value = A;
  for (int i = 0; i < A.size(); ++i) n.value.data[i] += B.data[i];
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  if (!A.same_shape(B))
    fail("mul: shape mismatch " + A.shape_str() + " vs " + B.shape_str() + " at node " +
         std::to_string(size()));
  Node n;
  n.op = Op::Mul;
  n.parents = {a, b};
  n.value = A;
  for (int i = 0; i < A.size(); ++i) n.value.data[i] *= B.data[i];
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double s) {
  Node n;
  n.op = Op::Scale;
  n.parents = {a, -1};
  n.scalar = s;
  n.value = nodes_[a].value;
  for (double& v : n.value.data) v *= s;
  return push(std::move(n));
}

NodeId Tape::mul_rowvec(NodeId x, NodeId v) {
  const Tensor& X = nodes_[x].value;
  const Tensor& V = nodes_[v].value;
  if (V.rows != 1 || V.cols != X.cols)
    fail("mul_rowvec: expected 1x" + std::to_string(X.cols) + " row vector, got " + V.shape_str() +
         " at node " + std::to_string(size()));
  Node n;
  n.op = Op::MulRowvec;
  n.parents = {x, v};
  n.value = X;
  for (int r = 0; r < X.rows; ++r) {
    double* row = n.value.row(r);
    for (int c = 0; c < X.cols; ++c) row[c] *= V.data[c];
  }
  return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId a) {
  const Tensor& A = nodes_[a].value;
  Node n;
  n.op = Op::SoftmaxRows;
  n.parents = {a, -1};
  n.value = Tensor(A.rows, A.cols);
  for (int r = 0; r < A.rows; ++r) kern::softmax_row(n.value.row(r), A.row(r), A.cols);
  return push(std::move(n));
}

NodeId Tape::causal_softmax_rows(NodeId a) {
  const Tensor& A = nodes_[a].value;
  if (A.rows != A.cols)
    fail("causal_softmax_rows: expected square matrix, got " + A.shape_str() + " at node " +
         std::to_string(size()));
  Node n;
  n.op = Op::CausalSoftmaxRows;
  n.parents = {a, -1};
  n.value = Tensor(A.rows, A.cols);
  for (int r = 0; r < A.rows; ++r) kern::softmax_row(n.value.row(r), A.row(r), r + 1);
  return push(std::move(n));
}

NodeId Tape::rms_norm_rows(NodeId a, double eps) {
  const Tensor& A = nodes_[a].value;
  Node n;
  n.op = Op::RmsNormRows;
  n.parents = {a, -1};
  n.scalar = eps;
  n.value = Tensor(A.rows, A.cols);
  n.cache = Tensor(A.rows, 1);  // per-row 1/rms
  for (int r = 0; r < A.rows; ++r) {
    const double* src = A.row(r);
    double ms = 0.0;
    for (int c = 0; c < A.cols; ++c) ms += src[c] * src[c];
    ms = ms / A.cols + eps;
    double inv = 1.0 / std::sqrt(ms);
    n.cache.data[r] = inv;
    double* dst = n.value.row(r);
    for (int c = 0; c < A.cols; ++c) dst[c] = src[c] * inv;
  }
  return push(std::move(n));
}

NodeId Tape::silu(NodeId a) {
  const Tensor& A = nodes_[a].value;
  Node n;
  n.op = Op::Silu;
  n.parents = {a, -1};
  n.value = Tensor(A.rows, A.cols);
  for (int i = 0; i < A.size(); ++i) n.value.data[i] = kern::silu(A.data[i]);
  return push(std::move(n));
}

NodeId Tape::embedding(NodeId table, const std::vector<int>& ids) {
  const Tensor& T = nodes_[table].value;
  Node n;
  n.op = Op::Embedding;
  n.parents = {table, -1};
  n.ints = ids;
  n.value = Tensor(int(ids.size()), T.cols);
  for (int i = 0; i < int(ids.size()); ++i) {
    int id = ids[i];
    if (id < 0 || id >= T.rows)
      fail("embedding: token id " + std::to_string(id) + " out of range [0," +
           std::to_string(T.rows) + ")");
    std::copy(T.row(id), T.row(id) + T.cols, n.value.row(i));
  }
  return push(std::move(n));
}

NodeId Tape::cross_entropy_rows(NodeId logits, const std::vector<int>& targets) {
  const Tensor& L = nodes_[logits].value;
  if (int(targets.size()) != L.rows)
    fail("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
         L.shape_str() + " logits at node " + std::to_string(size()));
  Node n;
  n.op = Op::CrossEntropyRows;
  n.parents = {logits, -1};
  n.ints = targets;
  n.value = Tensor(L.rows, 1);
  n.cache = Tensor(L.rows, L.cols);  // probs, only target rows filled
  for (int r = 0; r < L.rows; ++r) {
    int y = targets[r];
    if (y == -1) continue;
    if (y < 0 || y >= L.cols)
      fail("cross_entropy_rows: target " + std::to_string(y) + " out of range [0," +
           std::to_string(L.cols) + ") at row " + std::to_string(r));
    double lse = kern::logsumexp_row(L.row(r), L.cols);
    n.value.data[r] = lse - L.at(r, y);
    kern::softmax_row(n.cache.row(r), L.row(r), L.cols);
  }
  return push(std::move(n));
}

NodeId Tape::topk_zero_rows(NodeId probs, int k) {
  const Tensor& P = nodes_[probs].value;
  if (k < 1 || k > P.cols)
    fail("topk_zero_rows: k=" + std::to_string(k) + " out of range [1," + std::to_string(P.cols) +
         "] at node " + std::to_string(size()));
  Node n;
  n.op = Op::TopkZeroRows;
  n.parents = {probs, -1};
  n.value = P;
  n.mask.assign(size_t(P.size()), 0);
  for (int r = 0; r < P.rows; ++r) {
    double* row = n.value.row(r);
    kern::topk_keep_row(row, P.cols, k);
    for (int c = 0; c < P.cols; ++c)
      if (row[c] != 0.0) n.mask[size_t(r) * P.cols + c] = 1;
  }
  return push(std::move(n));
}

NodeId Tape::normalize_rows(NodeId a) {
  const Tensor& A = nodes_[a].value;
  Node n;
  n.op = Op::NormalizeRows;
  n.parents = {a, -1};
  n.value = A;
  n.cache = Tensor(A.rows, 1);
  for (int r = 0; r < A.rows; ++r) {
    double s = kern::normalize_row(n.value.row(r), A.cols);
    if (s == 0.0) fail("normalize_rows: zero row sum at row " + std::to_string(r));
    n.cache.data[r] = s;
  }
  return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId a, int c0, int c1) {
  const Tensor& A = nodes_[a].value;
  if (c0 < 0 || c1 > A.cols || c0 >= c1)
    fail("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " +
         A.shape_str());
  Node n;
  n.op = Op::SliceCols;
  n.parents = {a, -1};
  n.ints = {c0, c1};
  n.value = Tensor(A.rows, c1 - c0);
  for (int r = 0; r < A.rows; ++r)
    std::copy(A.row(r) + c0, A.row(r) + c1, n.value.row(r));
  return push(std::move(n));
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
  if (parts.empty()) fail("concat_cols: no inputs");
  int rows = nodes_[parts[0]].value.rows;
  int cols = 0;
  for (NodeId p : parts) {
    if (nodes_[p].value.rows != rows)
      fail("concat_cols: row mismatch " + nodes_[p].value.shape_str());
    cols += nodes_[p].value.cols;
  }
  Node n;
  n.op = Op::ConcatCols;
  n.extra_parents = parts;
  n.value = Tensor(rows, cols);
  int off = 0;
  for (NodeId p : parts) {
    const Tensor& P = nodes_[p].value;
    for (int r = 0; r < rows; ++r)
      std::copy(P.row(r), P.row(r) + P.cols, n.value.row(r) + off);
    off += P.cols;
  }
  return push(std::move(n));
}

NodeId Tape::merge_rows(NodeId a, NodeId b, const std::vector<uint8_t>& take_b) {
  const Tensor& A = nodes_[a].value;
  const Tensor& B = nodes_[b].value;
  if (!A.same_shape(B))
    fail("merge_rows: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  if (int(take_b.size()) != A.rows) fail("merge_rows: mask size mismatch");
  Node n;
  n.op = Op::MergeRows;
  n.parents = {a, b};
  n.mask = take_b;
  n.value = A;
  for (int r = 0; r < A.rows; ++r)
    if (take_b[r]) std::copy(B.row(r), B.row(r) + B.cols, n.value.row(r));
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  Node n;
  n.op = Op::Sum;
  n.parents = {a, -1};
  double s = 0.0;
  for (double v : nodes_[a].value.data) s += v;
  n.value = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
  const Tensor& A = nodes_[a].value;
  if (A.size() == 0) fail("mean: empty tensor");
  Node n;
  n.op = Op::Mean;
  n.parents = {a, -1};
  double s = 0.0;
  for (double v : A.data) s += v;
  n.value = Tensor::scalar(s / A.size());
  return push(std::move(n));
}

NodeId Tape::pick(NodeId a, int r, int c) {
  const Tensor& A = nodes_[a].value;
  if (r < 0 || r >= A.rows || c < 0 || c >= A.cols)
    fail("pick: index (" + std::to_string(r) + "," + std::to_string(c) + ") out of " +
         A.shape_str());
  Node n;
  n.op = Op::Pick;
  n.parents = {a, -1};
  n.ints = {r, c};
  n.value = Tensor::scalar(A.at(r, c));
  return push(std::move(n));
}

NodeId Tape::moe_ffn(NodeId u, NodeId gates, const std::vector<NodeId>& w1,
                     const std::vector<NodeId>& w2) {
  const Tensor& U = nodes_[u].value;
  const Tensor& G = nodes_[gates].value;
  int num_experts = int(w1.size());
  if (w2.size() != w1.size()) fail("moe_ffn: w1/w2 expert count mismatch");
  if (G.rows != U.rows || G.cols != num_experts)
    fail("moe_ffn: gates " + G.shape_str() + " vs input " + U.shape_str() + " and " +
         std::to_string(num_experts) + " experts");
  int d = U.cols;
  int hidden = nodes_[w1[0]].value.cols;
  for (int i = 0; i < num_experts; ++i) {
    const Tensor& W1 = nodes_[w1[i]].value;
    const Tensor& W2 = nodes_[w2[i]].value;
    if (W1.rows != d || W1.cols != hidden || W2.rows != hidden || W2.cols != d)
      fail("moe_ffn: expert " + std::to_string(i) + " weight shapes " + W1.shape_str() + "/" +
           W2.shape_str() + " inconsistent with d=" + std::to_string(d) +
           " hidden=" + std::to_string(hidden));
  }

  Node n;
  n.op = Op::MoeFfn;
  n.parents = {u, gates};
  n.extra_parents = w1;
  n.extra_parents.insert(n.extra_parents.end(), w2.begin(), w2.end());
  n.value = Tensor(U.rows, d);

  // ints: row offsets into the active list, then the active expert ids.
  n.ints.assign(size_t(U.rows) + 1, 0);
  std::vector<int> active;
  for (int t = 0; t < U.rows; ++t) {
    for (int i = 0; i < num_experts; ++i)
      if (G.at(t, i) != 0.0) active.push_back(i);
    n.ints[size_t(t) + 1] = int(active.size());
  }
  n.ints.insert(n.ints.end(), active.begin(), active.end());
  n.cache = Tensor(int(active.size()), hidden);  // pre-activations per active slot

  int slot = 0;
  std::vector<double> h(static_cast<size_t>(hidden));
  for (int t = 0; t < U.rows; ++t) {
    const double* ut = U.row(t);
    double* out = n.value.row(t);
    for (int i = 0; i < num_experts; ++i) {
      double g = G.at(t, i);
      if (g == 0.0) continue;
      const Tensor& W1 = nodes_[w1[i]].value;
      const Tensor& W2 = nodes_[w2[i]].value;
      double* pre = n.cache.row(slot);
      std::fill(pre, pre + hidden, 0.0);
      for (int c = 0; c < d; ++c) {
        double uc = ut[c];
        if (uc == 0.0) continue;
        const double* w1row = W1.row(c);
        for (int hcol = 0; hcol < hidden; ++hcol) pre[hcol] += uc * w1row[hcol];
      }
      for (int hcol = 0; hcol < hidden; ++hcol) h[hcol] = g * kern::silu(pre[hcol]);
      for (int hcol = 0; hcol < hidden; ++hcol) {
        double sh = h[hcol];
        if (sh == 0.0) continue;
        const double* w2row = W2.row(hcol);
        for (int j = 0; j < d; ++j) out[j] += sh * w2row[j];
      }
      ++slot;
    }
  }
  return push(std::move(n));
}

const Tensor& Tape::grad(NodeId id) {
  Node& n = nodes_[id];
  ensure_grad(n);
  return n.grad;
}

void Tape::backward(NodeId root) {
  const Tensor& rv = nodes_[root].value;
  if (rv.size() != 1)
    fail("backward: root must be scalar, got " + rv.shape_str());

  for (Node& n : nodes_) {
    n.grad.data.clear();
    n.grad.rows = n.grad.cols = 0;
  }
  if (!nodes_[root].requires_grad) return;

  std::vector<uint8_t> marked(nodes_.size(), 0);
  marked[root] = 1;
  for (NodeId id = root; id >= 0; --id) {
    if (!marked[id]) continue;
    const Node& n = nodes_[id];
    for (NodeId p : n.parents)
      if (p >= 0 && nodes_[p].requires_grad) marked[p] = 1;
    for (NodeId p : n.extra_parents)
      if (nodes_[p].requires_grad) marked[p] = 1;
  }

  ensure_grad(nodes_[root]);
  nodes_[root].grad.data[0] = 1.0;
  for (NodeId id = root; id >= 0; --id) {
    if (!marked[id]) continue;
    if (nodes_[id].grad.data.empty()) continue;
    backward_node(id);
  }
}

void Tape::backward_node(NodeId id) {
  Node& n = nodes_[id];
  const Tensor& g = n.grad;
  auto wants = [&](NodeId p) { return p >= 0 && nodes_[p].requires_grad; };
  auto pgrad = [&](NodeId p) -> Tensor& {
    ensure_grad(nodes_[p]);
    return nodes_[p].grad;
  };

  switch (n.op) {
    case Op::Leaf:
    case Op::Const:
      break;

    case Op::Matmul: {
      NodeId a = n.parents[0], b = n.parents[1];
      const Tensor& A = nodes_[a].value;
      const Tensor& B = nodes_[b].value;
      if (wants(a))
        kern::gemm_nt(pgrad(a).data.data(), g.data.data(), B.data.data(), A.rows, B.cols, A.cols,
                      true);
      if (wants(b))
        kern::gemm_tn(pgrad(b).data.data(), A.data.data(), g.data.data(), A.cols, A.rows, B.cols,
                      true);
      break;
    }

    case Op::MatmulNT: {
      NodeId a = n.parents[0], b = n.parents[1];
      const Tensor& A = nodes_[a].value;
      const Tensor& B = nodes_[b].value;
      // value = A * B^T with A [M x K], B [N x K]
      if (wants(a))
        kern::gemm_nn(pgrad(a).data.data(), g.data.data(), B.data.data(), A.rows, B.rows, A.cols,
                      true);
      if (wants(b))
        kern::gemm_tn(pgrad(b).data.data(), g.data.data(), A.data.data(), B.rows, A.rows, A.cols,
                      true);
      break;
    }

    case Op::Add: {
      for (int side = 0; side < 2; ++side) {
        NodeId p = n.parents[side];
        if (!wants(p)) continue;
        Tensor& pg = pgrad(p);
        for (int i = 0; i < g.size(); ++i) pg.data[i] += g.data[i];
      }
      break;
    }

    case Op::Mul: {
      NodeId a = n.parents[0], b = n.parents[1];
      if (wants(a)) {
        Tensor& pg = pgrad(a);
        const Tensor& B = nodes_[b].value;
        for (int i = 0; i < g.size(); ++i) pg.data[i] += g.data[i] * B.data[i];
      }
      if (wants(b)) {
        Tensor& pg = pgrad(b);
        const Tensor& A = nodes_[a].value;
        for (int i = 0; i < g.size(); ++i) pg.data[i] += g.data[i] * A.data[i];
      }
      break;
    }

    case Op::Scale: {
      NodeId a = n.parents[0];
      if (wants(a)) {
        Tensor& pg = pgrad(a);
        for (int i = 0; i < g.size(); ++i) pg.data[i] += g.data[i] * n.scalar;
      }
      break;
    }

    case Op::MulRowvec: {
      NodeId x = n.parents[0], v = n.parents[1];
      const Tensor& X = nodes_[x].value;
      const Tensor& V = nodes_[v].value;
      if (wants(x)) {
        Tensor& pg = pgrad(x);
        for (int r = 0; r < X.rows; ++r) {
          const double* gr = g.row(r);
          double* pr = pg.row(r);
          for (int c = 0; c < X.cols; ++c) pr[c] += gr[c] * V.data[c];
        }
      }
      if (wants(v)) {
        Tensor& pg = pgrad(v);
        for (int r = 0; r < X.rows; ++r) {
          const double* gr = g.row(r);
          const double* xr = X.row(r);
          for (int c = 0; c < X.cols; ++c) pg.data[c] += gr[c] * xr[c];
        }
      }
      break;
    }

    case Op::SoftmaxRows: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      const Tensor& P = n.value;
      for (int r = 0; r < P.rows; ++r) {
        const double* p = P.row(r);
        const double* gr = g.row(r);
        double gp = kern::dot(gr, p, P.cols);
        double* out = pg.row(r);
        for (int c = 0; c < P.cols; ++c) out[c] += p[c] * (gr[c] - gp);
      }
      break;
    }

    case Op::CausalSoftmaxRows: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      const Tensor& P = n.value;
      for (int r = 0; r < P.rows; ++r) {
        const double* p = P.row(r);
        const double* gr = g.row(r);
        int len = r + 1;
        double gp = kern::dot(gr, p, len);
        double* out = pg.row(r);
        for (int c = 0; c < len; ++c) out[c] += p[c] * (gr[c] - gp);
      }
      break;
    }

    case Op::RmsNormRows: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      const Tensor& X = nodes_[a].value;
      for (int r = 0; r < X.rows; ++r) {
        const double* x = X.row(r);
        const double* gr = g.row(r);
        double inv = n.cache.data[r];
        double gx = kern::dot(gr, x, X.cols);
        double coef = inv * inv * inv * gx / X.cols;
        double* out = pg.row(r);
        for (int c = 0; c < X.cols; ++c) out[c] += inv * gr[c] - coef * x[c];
      }
      break;
    }

    case Op::Silu: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      const Tensor& X = nodes_[a].value;
      for (int i = 0; i < X.size(); ++i) pg.data[i] += g.data[i] * kern::silu_grad(X.data[i]);
      break;
    }

    case Op::Embedding: {
      NodeId t = n.parents[0];
      if (!wants(t)) break;
      Tensor& pg = pgrad(t);
      int cols = n.value.cols;
      for (int i = 0; i < int(n.ints.size()); ++i) {
        const double* gr = g.row(i);
        double* dst = pg.row(n.ints[i]);
        for (int c = 0; c < cols; ++c) dst[c] += gr[c];
      }
      break;
    }

    case Op::CrossEntropyRows: {
      NodeId l = n.parents[0];
      if (!wants(l)) break;
      Tensor& pg = pgrad(l);
      const Tensor& P = n.cache;
      for (int r = 0; r < P.rows; ++r) {
        int y = n.ints[r];
        if (y == -1) continue;
        double go = g.data[r];
        if (go == 0.0) continue;
        const double* p = P.row(r);
        double* out = pg.row(r);
        for (int c = 0; c < P.cols; ++c) out[c] += go * p[c];
        out[y] -= go;
      }
      break;
    }

    case Op::TopkZeroRows: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      for (int i = 0; i < g.size(); ++i)
        if (n.mask[i]) pg.data[i] += g.data[i];
      break;
    }

    case Op::NormalizeRows: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      const Tensor& Y = n.value;
      for (int r = 0; r < Y.rows; ++r) {
        const double* y = Y.row(r);
        const double* gr = g.row(r);
        double s = n.cache.data[r];
        double gy = kern::dot(gr, y, Y.cols);
        double* out = pg.row(r);
        for (int c = 0; c < Y.cols; ++c) out[c] += (gr[c] - gy) / s;
      }
      break;
    }

    case Op::SliceCols: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      int c0 = n.ints[0];
      for (int r = 0; r < g.rows; ++r) {
        const double* gr = g.row(r);
        double* out = pg.row(r) + c0;
        for (int c = 0; c < g.cols; ++c) out[c] += gr[c];
      }
      break;
    }

    case Op::ConcatCols: {
      int off = 0;
      for (NodeId p : n.extra_parents) {
        const Tensor& P = nodes_[p].value;
        if (wants(p)) {
          Tensor& pg = pgrad(p);
          for (int r = 0; r < g.rows; ++r) {
            const double* gr = g.row(r) + off;
            double* out = pg.row(r);
            for (int c = 0; c < P.cols; ++c) out[c] += gr[c];
          }
        }
        off += P.cols;
      }
      break;
    }

    case Op::MergeRows: {
      NodeId a = n.parents[0], b = n.parents[1];
      for (int r = 0; r < g.rows; ++r) {
        NodeId p = n.mask[r] ? b : a;
        if (!wants(p)) continue;
        Tensor& pg = pgrad(p);
        const double* gr = g.row(r);
        double* out = pg.row(r);
        for (int c = 0; c < g.cols; ++c) out[c] += gr[c];
      }
      break;
    }

    case Op::Sum: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      double go = g.data[0];
      for (double& v : pg.data) v += go;
      break;
    }

    case Op::Mean: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      Tensor& pg = pgrad(a);
      double go = g.data[0] / pg.size();
      for (double& v : pg.data) v += go;
      break;
    }

    case Op::Pick: {
      NodeId a = n.parents[0];
      if (!wants(a)) break;
      pgrad(a).at(n.ints[0], n.ints[1]) += g.data[0];
      break;
    }

    case Op::MoeFfn: {
      NodeId u = n.parents[0], gates = n.parents[1];
      const Tensor& U = nodes_[u].value;
      const Tensor& G = nodes_[gates].value;
      int num_experts = int(n.extra_parents.size() / 2);
      int d = U.cols;
      int hidden = n.cache.cols;
      const int* row_ptr = n.ints.data();
      const int* active = n.ints.data() + U.rows + 1;

      std::vector<double> ds(static_cast<size_t>(hidden));
      std::vector<double> tvec(static_cast<size_t>(hidden));
      for (int t = 0; t < U.rows; ++t) {
        const double* gr = g.row(t);
        const double* ut = U.row(t);
        for (int slot = row_ptr[t]; slot < row_ptr[t + 1]; ++slot) {
          int i = active[slot];
          double gv = G.at(t, i);
          const double* pre = n.cache.row(slot);
          const Tensor& W1 = nodes_[n.extra_parents[i]].value;
          const Tensor& W2 = nodes_[n.extra_parents[num_experts + i]].value;

          // ds[h] = dL/d(silu_out[h] * g) pre-gate; reused for every target
          for (int h = 0; h < hidden; ++h) ds[h] = kern::dot(W2.row(h), gr, d);

          if (wants(gates)) {
            double dg = 0.0;
            for (int h = 0; h < hidden; ++h) dg += kern::silu(pre[h]) * ds[h];
            pgrad(gates).at(t, i) += dg;
          }
          bool want_u = wants(u);
          bool want_w1 = wants(n.extra_parents[i]);
          bool want_w2 = wants(n.extra_parents[num_experts + i]);
          if (want_u || want_w1) {
            for (int h = 0; h < hidden; ++h)
              tvec[h] = gv * ds[h] * kern::silu_grad(pre[h]);
          }
          if (want_u) {
            double* du = pgrad(u).row(t);
            for (int c = 0; c < d; ++c) du[c] += kern::dot(W1.row(c), tvec.data(), hidden);
          }
          if (want_w1) {
            Tensor& pw1 = pgrad(n.extra_parents[i]);
            for (int c = 0; c < d; ++c) {
              double uc = ut[c];
              if (uc == 0.0) continue;
              double* dst = pw1.row(c);
              for (int h = 0; h < hidden; ++h) dst[h] += uc * tvec[h];
            }
          }
          if (want_w2) {
            Tensor& pw2 = pgrad(n.extra_parents[num_experts + i]);
            for (int h = 0; h < hidden; ++h) {
              double sh = gv * kern::silu(pre[h]);
              if (sh == 0.0) continue;
              double* dst = pw2.row(h);
              for (int j = 0; j < d; ++j) dst[j] += sh * gr[j];
            }
          }
        }
      }
      break;
    }
  }
}

ForwardTrace forward(const TracedGraph& g) { return forward(g, g.leaf_values); }

ForwardTrace forward(const TracedGraph& g, const std::vector<Tensor>& leaf_values) {
  ForwardTrace ft;
  ft.leaves.reserve(leaf_values.size());
  for (const Tensor& t : leaf_values) ft.leaves.push_back(ft.tape.leaf(t));
  ft.root = g.build(ft.tape, ft.leaves);
  if (ft.root < 0 || ft.root >= ft.tape.size()) fail("forward: builder returned invalid root");
  return ft;
}

double finite_diff_check(const TracedGraph& g, int leaf_index, double step) {
  if (step <= 0.0) fail("finite_diff_check: step must be > 0");
  if (leaf_index < 0 || leaf_index >= int(g.leaf_values.size()))
    fail("finite_diff_check: leaf index out of range");

  ForwardTrace base = forward(g);
  if (base.tape.value(base.root).size() != 1)
    fail("finite_diff_check: root must be scalar");
  base.tape.backward(base.root);
  Tensor gbp = base.tape.grad(base.leaves[leaf_index]);

  auto eval_at = [&](const std::vector<Tensor>& vals) {
    ForwardTrace ft = forward(g, vals);
    double v = ft.tape.value(ft.root).data[0];
    if (!std::isfinite(v)) fail("finite_diff_check: non-finite value during perturbation");
    return v;
  };

  std::vector<Tensor> vals = g.leaf_values;
  double max_rel = 0.0;
  Tensor& leaf = vals[leaf_index];
  for (int i = 0; i < leaf.size(); ++i) {
    double orig = leaf.data[i];
    leaf.data[i] = orig + step;
    double fp = eval_at(vals);
    leaf.data[i] = orig - step;
    double fm = eval_at(vals);
    leaf.data[i] = orig;
    double gfd = (fp - fm) / (2.0 * step);
    double denom = std::max(std::abs(gbp.data[i]), 1e-8);
    max_rel = std::max(max_rel, std::abs(gfd - gbp.data[i]) / denom);
  }
  return max_rel;
}

}  // namespace knnmoe::ad
