#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "hsalab/tensor.hpp"
#include "hsalab/thread_pool.hpp"

namespace hsalab {

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

template <typename T>
inline T sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
inline T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
inline T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

// ---------------------------------------------------------------------------
// GEMM kernels. All matrices are dense row-major. The workhorse computes
// C (m x n) += A (m x k) . B (k x n) in saxpy form: the inner loop walks one
// row of B and one row of C contiguously, which vectorizes well and keeps a
// fixed per-element accumulation order (k ascending), so results do not
// depend on the worker count.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void gemm_rows_nn(const T* a, const T* b, T* c, std::size_t i0, std::size_t i1,
                  std::size_t n, std::size_t k, bool accumulate) {
  for (std::size_t i = i0; i < i1; ++i) {
    T* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Row-block size for parallel gemm. Big enough that scheduling overhead is
// negligible, small enough to load-balance short matrices.
inline constexpr std::size_t kGemmRowBlock = 32;

}  // namespace detail

// C (m x n) = [accumulate ? C : 0] + A (m x k) . B (k x n)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate = false) {
  const std::size_t blocks = (m + detail::kGemmRowBlock - 1) / detail::kGemmRowBlock;
  if (blocks <= 1 || m * n * k < (std::size_t(1) << 16)) {
    detail::gemm_rows_nn(a, b, c, 0, m, n, k, accumulate);
    return;
  }
  parallel_for(blocks, [&](std::size_t blk) {
    const std::size_t i0 = blk * detail::kGemmRowBlock;
    const std::size_t i1 = std::min(m, i0 + detail::kGemmRowBlock);
    detail::gemm_rows_nn(a, b, c, i0, i1, n, k, accumulate);
  });
}

// C (m x n) = [accumulate ? C : 0] + A (m x k) . B(n x k)^T. Packs B^T once so
// the hot loop stays in saxpy form.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate = false) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, n, k, accumulate);
}

// C (m x n) = [accumulate ? C : 0] + A (k x m)^T . B (k x n)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate = false) {
  std::vector<T> at(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) at[i * k + p] = a[p * m + i];
  gemm_nn(at.data(), b, c, m, n, k, accumulate);
}

// y = x . W^T with shape checking; x: m x a, W: b x a, y: m x b. No bias.
template <typename T>
void linear(const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& y, bool accumulate = false) {
  HSALAB_CHECK_DIM(x.rank() >= 1 && w.rank() == 2, "linear expects a matrix weight");
  const std::size_t a = x.shape().back();
  const std::size_t m = x.size() / a;
  HSALAB_CHECK_DIM(w.dim(1) == a, "linear: inner dimensions disagree");
  const std::size_t b = w.dim(0);
  HSALAB_CHECK_DIM(y.size() == m * b, "linear: output extent mismatch");
  gemm_nt(x.data(), w.data(), y.data(), m, b, a, accumulate);
}

// Gradients of y = x . W^T:  dx = dy . W,  dW = dy^T . x  (accumulated).
template <typename T>
void linear_backward_input(const Tensor<T>& dy, const Tensor<T>& w, Tensor<T>& dx,
                           bool accumulate = true) {
  const std::size_t b = w.dim(0), a = w.dim(1);
  const std::size_t m = dy.size() / b;
  HSALAB_CHECK_DIM(dx.size() == m * a, "linear backward: dx extent mismatch");
  gemm_nn(dy.data(), w.data(), dx.data(), m, a, b, accumulate);
}

template <typename T>
void linear_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, Tensor<T>& dw,
                            bool accumulate = true) {
  const std::size_t b = dw.dim(0), a = dw.dim(1);
  const std::size_t m = x.size() / a;
  HSALAB_CHECK_DIM(dy.size() == m * b, "linear backward: dy extent mismatch");
  gemm_tn(dy.data(), x.data(), dw.data(), b, a, m, accumulate);
}

// ---------------------------------------------------------------------------
// RMSNorm: y_j = gain_j * x_j / sqrt(mean(x^2) + eps)
// ---------------------------------------------------------------------------

template <typename T>
void rmsnorm(std::span<const T> x, std::span<const T> gain, T eps, std::span<T> y) {
  const std::size_t d = x.size();
  HSALAB_CHECK_DIM(d >= 1, "rmsnorm: zero-length input");
  HSALAB_CHECK_DIM(gain.size() == d && y.size() == d, "rmsnorm: extent mismatch");
  T ms = T(0);
  for (std::size_t j = 0; j < d; ++j) ms += x[j] * x[j];
  ms /= static_cast<T>(d);
  const T inv = T(1) / std::sqrt(ms + eps);
  for (std::size_t j = 0; j < d; ++j) y[j] = gain[j] * x[j] * inv;
}

// dx_i = r*g_i*dy_i - (r^3 x_i / d) * sum_j dy_j g_j x_j ; dgain_j += dy_j x_j r
template <typename T>
void rmsnorm_backward(std::span<const T> x, std::span<const T> gain, T eps,
                      std::span<const T> dy, std::span<T> dx, std::span<T> dgain) {
  const std::size_t d = x.size();
  T ms = T(0);
  for (std::size_t j = 0; j < d; ++j) ms += x[j] * x[j];
  ms /= static_cast<T>(d);
  const T inv = T(1) / std::sqrt(ms + eps);
  T dot = T(0);
  for (std::size_t j = 0; j < d; ++j) dot += dy[j] * gain[j] * x[j];
  const T scale = inv * inv * inv * dot / static_cast<T>(d);
  for (std::size_t j = 0; j < d; ++j) {
    dx[j] += inv * gain[j] * dy[j] - scale * x[j];
    dgain[j] += dy[j] * x[j] * inv;
  }
}

// ---------------------------------------------------------------------------
// softmax-off-by-one: p_j = exp(l_j) / (1 + sum_k exp(l_k)).
// Stabilized with m = max(0, max l): the implicit extra slot (logit 0)
// participates in the shift, so the off-by-one denominator stays exact.
// ---------------------------------------------------------------------------

template <typename T>
void softmax1(std::span<const T> logits, std::span<T> p) {
  const std::size_t n = logits.size();
  HSALAB_CHECK_DIM(n >= 1 && p.size() == n, "softmax1: extent mismatch");
  T m = T(0);
  for (std::size_t j = 0; j < n; ++j) m = std::max(m, logits[j]);
  T denom = std::exp(-m);
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(logits[j] - m);
    denom += p[j];
  }
  const T inv = T(1) / denom;
  for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
}

// Same Jacobian form as plain softmax (the extra slot is constant):
// dl_j = p_j * (dp_j - sum_k dp_k p_k)
template <typename T>
void softmax1_backward(std::span<const T> p, std::span<const T> dp, std::span<T> dlogits) {
  const std::size_t n = p.size();
  T dot = T(0);
  for (std::size_t j = 0; j < n; ++j) dot += dp[j] * p[j];
  for (std::size_t j = 0; j < n; ++j) dlogits[j] = p[j] * (dp[j] - dot);
}

// Plain softmax (used by the chunk encoder, the full-attention reference and
// cross-entropy), max-shift stabilized.
template <typename T>
void softmax(std::span<const T> logits, std::span<T> p) {
  const std::size_t n = logits.size();
  HSALAB_CHECK_DIM(n >= 1 && p.size() == n, "softmax: extent mismatch");
  T m = logits[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, logits[j]);
  T denom = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(logits[j] - m);
    denom += p[j];
  }
  const T inv = T(1) / denom;
  for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
}

template <typename T>
void softmax_backward(std::span<const T> p, std::span<const T> dp, std::span<T> dlogits) {
  const std::size_t n = p.size();
  T dot = T(0);
  for (std::size_t j = 0; j < n; ++j) dot += dp[j] * p[j];
  for (std::size_t j = 0; j < n; ++j) dlogits[j] = p[j] * (dp[j] - dot);
}

template <typename T>
T log_sum_exp(std::span<const T> logits) {
  T m = logits[0];
  for (std::size_t j = 1; j < logits.size(); ++j) m = std::max(m, logits[j]);
  T s = T(0);
  for (std::size_t j = 0; j < logits.size(); ++j) s += std::exp(logits[j] - m);
  return m + std::log(s);
}

}  // namespace hsalab
