#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace knnmoe::kern {

// Dense kernels shared by the autodiff ops and the plain (non-graph) code
// paths. Both sides must produce bitwise-identical results, so anything that
// exists in two forms routes through these.

// C[M x N] (+)= A[M x K] * B[K x N]
inline void gemm_nn(double* __restrict__ c, const double* __restrict__ a,
                    const double* __restrict__ b, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + size_t(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* ai = a + size_t(i) * k;
    double* ci = c + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[M x N] (+)= A[M x K] * B[N x K]^T
inline void gemm_nt(double* __restrict__ c, const double* __restrict__ a,
                    const double* __restrict__ b, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + size_t(i) * k;
    double* ci = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + size_t(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      if (accumulate)
        ci[j] += s;
      else
        ci[j] = s;
    }
  }
}

// C[M x N] (+)= A[K x M]^T * B[K x N]
inline void gemm_tn(double* __restrict__ c, const double* __restrict__ a,
                    const double* __restrict__ b, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + size_t(m) * n, 0.0);
  for (int p = 0; p < k; ++p) {
    const double* ap = a + size_t(p) * m;
    const double* bp = b + size_t(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + size_t(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Stabilized softmax over src[0..n), written to dst. dst may alias src.
inline void softmax_row(double* dst, const double* src, int n) {
  double mx = src[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, src[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    dst[i] = std::exp(src[i] - mx);
    sum += dst[i];
  }
  double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) dst[i] *= inv;
}

// log(sum(exp(src))) over src[0..n), stabilized.
inline double logsumexp_row(const double* src, int n) {
  double mx = src[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, src[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(src[i] - mx);
  return mx + std::log(sum);
}

// Zeroes all but the k largest entries of row[0..n). Ties break toward the
// lowest index: repeated arg-max with strict > comparison.
inline void topk_keep_row(double* row, int n, int k) {
  if (k >= n) return;
  thread_local std::vector<unsigned char> kept;
  kept.assign(size_t(n), 0);
  for (int pick = 0; pick < k; ++pick) {
    int best = -1;
    double bv = 0.0;
    for (int i = 0; i < n; ++i) {
      if (kept[i]) continue;
      if (best < 0 || row[i] > bv) {
        best = i;
        bv = row[i];
      }
    }
    kept[best] = 1;
  }
  for (int i = 0; i < n; ++i)
    if (!kept[i]) row[i] = 0.0;
}

// Row sum; returns it so callers can reject zero-sum rows.
inline double normalize_row(double* row, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += row[i];
  if (s != 0.0) {
    double inv = 1.0 / s;
    for (int i = 0; i < n; ++i) row[i] *= inv;
  }
  return s;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
  double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

inline double sq_l2_distance(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace knnmoe::kern
