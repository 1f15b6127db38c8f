#include "hsalab/selection.hpp"

#include <algorithm>
#include <cmath>

#include "hsalab/ops.hpp"
#include "hsalab/thread_pool.hpp"

namespace hsalab {

template <typename T>
void SelectionParams<T>::init(const ModelConfig& cfg, Rng& rng) {
  norm_gain.resize({cfg.d});
  norm_gain.fill(T(1));
  const T scale = T(1) / std::sqrt(static_cast<T>(cfg.d));
  w_q_slc.resize({cfg.d, cfg.d});
  w_k_slc.resize({cfg.d, cfg.d});
  for (auto& v : w_q_slc.flat()) v = static_cast<T>(rng.normal()) * scale;
  for (auto& v : w_k_slc.flat()) v = static_cast<T>(rng.normal()) * scale;
}

template <typename T>
void SelectionParams<T>::visit(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("sel.norm_gain", norm_gain);
  fn("sel.w_q_slc", w_q_slc);
  fn("sel.w_k_slc", w_k_slc);
}

template <typename T>
void project_selection_queries(const Tensor<T>& h_mid, const SelectionParams<T>& params,
                               Tensor<T>& q_slc, Tensor<T>* normed_tape) {
  HSALAB_CHECK_DIM(h_mid.rank() == 2, "project_selection: H_mid must be l x d");
  const std::size_t l = h_mid.dim(0), d = h_mid.dim(1);
  Tensor<T> normed({l, d});
  for (std::size_t t = 0; t < l; ++t) {
    rmsnorm<T>(h_mid.row(t), params.norm_gain.flat(), static_cast<T>(kRmsNormEps), normed.row(t));
  }
  q_slc.resize({l, d});
  linear(normed, params.w_q_slc, q_slc);
  if (normed_tape) *normed_tape = std::move(normed);
}

template <typename T>
void score_chunks_row(const T* q_row, const T* k_slc, std::size_t n_chunks, std::size_t t,
                      std::size_t S, std::size_t g, std::size_t d_g, T* out_row) {
  const T scale = T(1) / std::sqrt(static_cast<T>(d_g));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t gr = 0; gr < g; ++gr) {
    const T* q = q_row + gr * d_g;
    for (std::size_t i = 0; i < n_chunks; ++i) {
      if (!chunk_eligible(i, t, S)) {
        out_row[gr * n_chunks + i] = neg_inf;
        continue;
      }
      const T* k = k_slc + i * g * d_g + gr * d_g;
      T acc = T(0);
      for (std::size_t c = 0; c < d_g; ++c) acc += q[c] * k[c];
      out_row[gr * n_chunks + i] = acc * scale;
    }
  }
}

template <typename T>
void score_chunks(const Tensor<T>& q_slc, const Tensor<T>& k_slc, std::size_t S,
                  Tensor<T>& scores, std::uint64_t* flops) {
  const std::size_t l = q_slc.dim(0);
  const std::size_t n = k_slc.dim(0);
  const std::size_t d = q_slc.dim(1);
  const std::size_t g = scores.dim(1);
  const std::size_t d_g = d / g;
  const T scale = T(1) / std::sqrt(static_cast<T>(d_g));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  // One gemm per group over every (t, chunk) pair, masked afterwards. The
  // work performed is exactly l*g*d_g*n multiply-adds, which is what the
  // bench module audits against.
  if (flops != nullptr) *flops += static_cast<std::uint64_t>(l) * g * d_g * n;
  std::vector<T> raw(l * n);
  for (std::size_t gr = 0; gr < g; ++gr) {
    std::vector<T> q_hat(l * d_g), k_hat(n * d_g);
    for (std::size_t t = 0; t < l; ++t) {
      const T* src = q_slc.data() + t * d + gr * d_g;
      std::copy(src, src + d_g, q_hat.data() + t * d_g);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = k_slc.data() + i * d + gr * d_g;
      std::copy(src, src + d_g, k_hat.data() + i * d_g);
    }
    gemm_nt(q_hat.data(), k_hat.data(), raw.data(), l, n, d_g);
    for (std::size_t t = 0; t < l; ++t) {
      T* dst = scores.data() + (t * g + gr) * n;
      const T* src = raw.data() + t * n;
      for (std::size_t i = 0; i < n; ++i) {
        dst[i] = chunk_eligible(i, t, S) ? src[i] * scale : neg_inf;
      }
    }
  }
}

template <typename T>
void select_topk_row(const T* scores, std::size_t n_chunks, std::size_t K, std::int32_t* out) {
  // Insertion into a K-slot buffer kept sorted by (score desc, id desc).
  // Only finite scores compete; unfilled slots hold the sentinel.
  std::size_t filled = 0;
  std::vector<std::pair<T, std::int32_t>> best(K);
  for (std::size_t i = 0; i < n_chunks; ++i) {
    const T s = scores[i];
    if (!(s > -std::numeric_limits<T>::infinity())) continue;
    const std::pair<T, std::int32_t> cand{s, static_cast<std::int32_t>(i)};
    auto better = [](const std::pair<T, std::int32_t>& a, const std::pair<T, std::int32_t>& b) {
      return a.first > b.first || (a.first == b.first && a.second > b.second);
    };
    if (filled < K) {
      std::size_t pos = filled++;
      best[pos] = cand;
      while (pos > 0 && better(best[pos], best[pos - 1])) {
        std::swap(best[pos], best[pos - 1]);
        --pos;
      }
    } else if (better(cand, best[K - 1])) {
      std::size_t pos = K - 1;
      best[pos] = cand;
      while (pos > 0 && better(best[pos], best[pos - 1])) {
        std::swap(best[pos], best[pos - 1]);
        --pos;
      }
    }
  }
  for (std::size_t k = 0; k < K; ++k) out[k] = k < filled ? best[k].second : kNoChunk;
}

void sort_indices_desc(const std::int32_t* in, std::size_t K, std::int32_t* out) {
  std::copy(in, in + K, out);
  std::sort(out, out + K, std::greater<std::int32_t>());
  // kNoChunk (-1) sorts below every real id, so sentinels already trail.
}

template <typename T>
void stick_breaking_row(const T* scores, const std::int32_t* sorted, std::size_t K, T* weights) {
  T remaining = T(1);
  for (std::size_t k = 0; k < K; ++k) {
    if (sorted[k] == kNoChunk) {
      weights[k] = T(0);
      continue;
    }
    const T beta = sigmoid(scores[sorted[k]]);
    weights[k] = beta * remaining;
    remaining *= (T(1) - beta);
  }
}

template <typename T>
void stick_breaking_backward_row(const T* d_weights, const T* scores, const std::int32_t* sorted,
                                 std::size_t K, T* d_scores) {
  // w_k = sigma_k * prod_{i<k}(1 - sigma_i)
  //   dw_k/ds_k = (1 - sigma_k) * w_k
  //   dw_k/ds_j = -sigma_j * w_k          (j < k)
  // so ds_j = dw_j (1-sigma_j) w_j / ... computed via suffix sums of dw_k w_k.
  std::size_t m = 0;
  while (m < K && sorted[m] != kNoChunk) ++m;
  if (m == 0) return;
  std::vector<T> sig(m), w(m);
  T remaining = T(1);
  for (std::size_t k = 0; k < m; ++k) {
    sig[k] = sigmoid(scores[sorted[k]]);
    w[k] = sig[k] * remaining;
    remaining *= (T(1) - sig[k]);
  }
  T suffix = T(0);  // sum_{k>j} dw_k w_k
  for (std::size_t j = m; j-- > 0;) {
    const T grad = d_weights[j] * (T(1) - sig[j]) * w[j] - sig[j] * suffix;
    d_scores[sorted[j]] += grad;
    suffix += d_weights[j] * w[j];
  }
}

template <typename T>
SelectionResult<T> select_all(const Tensor<T>& q_slc, const ChunkMemory<T>& mem, std::size_t K,
                              std::size_t S) {
  SelectionResult<T> sel;
  sel.l = q_slc.dim(0);
  sel.g = mem.g;
  sel.n_chunks = mem.n_chunks;
  sel.K = K;
  sel.scores.resize({sel.l, sel.g, std::max<std::size_t>(sel.n_chunks, 1)});
  sel.indices.resize({sel.l, sel.g, K});
  sel.sorted_indices.resize({sel.l, sel.g, K});
  sel.weights.resize({sel.l, sel.g, K});
  if (sel.n_chunks == 0) {
    sel.scores.fill(-std::numeric_limits<T>::infinity());
    sel.indices.fill(kNoChunk);
    sel.sorted_indices.fill(kNoChunk);
    return sel;
  }
  score_chunks(q_slc, mem.K_slc, S, sel.scores);
  const std::size_t n = sel.n_chunks;
  parallel_for(sel.l, [&](std::size_t t) {
    for (std::size_t gr = 0; gr < sel.g; ++gr) {
      const T* srow = &sel.scores.at(t, gr, 0);
      std::int32_t* idx = &sel.indices.at(t, gr, 0);
      std::int32_t* srt = &sel.sorted_indices.at(t, gr, 0);
      T* w = &sel.weights.at(t, gr, 0);
      select_topk_row(srow, n, K, idx);
      sort_indices_desc(idx, K, srt);
      stick_breaking_row(srow, srt, K, w);
    }
  });
  return sel;
}

template <typename T>
InverseSelectionMaps build_inverse_maps(const SelectionResult<T>& sel) {
  InverseSelectionMaps maps;
  maps.l = sel.l;
  maps.g = sel.g;
  maps.n_chunks = sel.n_chunks;
  maps.M.resize({sel.l, sel.g, std::max<std::size_t>(sel.n_chunks, 1)});
  maps.R.resize({sel.l, sel.g, std::max<std::size_t>(sel.n_chunks, 1)});
  for (std::size_t t = 0; t < sel.l; ++t) {
    for (std::size_t gr = 0; gr < sel.g; ++gr) {
      for (std::size_t k = 0; k < sel.K; ++k) {
        const std::int32_t c = sel.sorted_indices.at(t, gr, k);
        if (c == kNoChunk) break;
        maps.M.at(t, gr, static_cast<std::size_t>(c)) = 1;
        maps.R.at(t, gr, static_cast<std::size_t>(c)) = static_cast<std::int32_t>(k);
      }
    }
  }
  return maps;
}

template <typename T>
T mean_pooled_score(const T* q_group, const ChunkMemory<T>& mem, std::size_t group,
                    std::size_t chunk) {
  // r' = q^T mean(K_chunk) summed over the group's heads; the group's keys
  // are shared by all h heads, so this is the grouped-query mean-key score.
  const std::size_t S = mem.S, d_h = mem.d_h, g = mem.g;
  const std::size_t d_g = mem.d / g;
  const std::size_t heads = d_g / d_h;
  std::vector<T> mean_key(d_h, T(0));
  const T* kc = mem.k_chunk(chunk);
  for (std::size_t s = 0; s < S; ++s) {
    const T* krow = kc + s * g * d_h + group * d_h;
    for (std::size_t c = 0; c < d_h; ++c) mean_key[c] += krow[c];
  }
  const T inv_s = T(1) / static_cast<T>(S);
  for (auto& v : mean_key) v *= inv_s;
  T acc = T(0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const T* q = q_group + hd * d_h;
    for (std::size_t c = 0; c < d_h; ++c) acc += q[c] * mean_key[c];
  }
  return acc;
}

template <typename T>
void selection_backward(const Tensor<T>& h_mid, const Tensor<T>& normed,
                        const Tensor<T>& q_slc, const ChunkMemory<T>& mem,
                        const SelectionParams<T>& params, const Tensor<T>& d_scores,
                        Tensor<T>& d_h_mid, Tensor<T>& d_k_slc, SelectionParams<T>& grads) {
  const std::size_t l = h_mid.dim(0), d = h_mid.dim(1);
  const std::size_t n = mem.n_chunks;
  const std::size_t g = d_scores.dim(1);
  const std::size_t d_g = d / g;
  if (n == 0) return;
  const T scale = T(1) / std::sqrt(static_cast<T>(d_g));

  // s[t,gr,i] = q_hat . k_hat * scale. Per group this is a pair of gemms; the
  // d_scores tensor is dense but nonzero only at selected slots, which the
  // saxpy kernel skips for free.
  Tensor<T> dq({l, d});
  std::vector<T> ds_group(l * n);
  for (std::size_t gr = 0; gr < g; ++gr) {
    for (std::size_t t = 0; t < l; ++t) {
      const T* src = &d_scores.at(t, gr, 0);
      for (std::size_t i = 0; i < n; ++i) ds_group[t * n + i] = src[i] * scale;
    }
    // dq_hat (l x d_g) += dS (l x n) . K_hat (n x d_g)
    std::vector<T> k_hat(n * d_g), dq_hat(l * d_g), dk_hat(n * d_g);
    for (std::size_t i = 0; i < n; ++i) {
      const T* kr = mem.K_slc.data() + i * d + gr * d_g;
      std::copy(kr, kr + d_g, k_hat.data() + i * d_g);
    }
    gemm_nn(ds_group.data(), k_hat.data(), dq_hat.data(), l, d_g, n);
    // dk_hat (n x d_g) = dS^T (n x l) . q_hat (l x d_g)
    std::vector<T> q_hat(l * d_g);
    for (std::size_t t = 0; t < l; ++t) {
      const T* qr = q_slc.data() + t * d + gr * d_g;
      std::copy(qr, qr + d_g, q_hat.data() + t * d_g);
    }
    gemm_tn(ds_group.data(), q_hat.data(), dk_hat.data(), n, d_g, l);
    for (std::size_t t = 0; t < l; ++t) {
      T* dst = dq.data() + t * d + gr * d_g;
      const T* src = dq_hat.data() + t * d_g;
      for (std::size_t c = 0; c < d_g; ++c) dst[c] += src[c];
    }
    for (std::size_t i = 0; i < n; ++i) {
      T* dst = d_k_slc.data() + i * d + gr * d_g;
      const T* src = dk_hat.data() + i * d_g;
      for (std::size_t c = 0; c < d_g; ++c) dst[c] += src[c];
    }
  }

  // Q_slc = normed . W_Q_slc^T
  Tensor<T> d_normed({l, d});
  linear_backward_input(dq, params.w_q_slc, d_normed, /*accumulate=*/false);
  linear_backward_weight(dq, normed, grads.w_q_slc);
  for (std::size_t t = 0; t < l; ++t) {
    rmsnorm_backward<T>(h_mid.row(t), params.norm_gain.flat(), static_cast<T>(kRmsNormEps),
                        d_normed.row(t), d_h_mid.row(t), grads.norm_gain.flat());
  }
}

template struct SelectionParams<float>;
template struct SelectionParams<double>;
template void project_selection_queries<float>(const Tensor<float>&, const SelectionParams<float>&,
                                               Tensor<float>&, Tensor<float>*);
template void project_selection_queries<double>(const Tensor<double>&,
                                                const SelectionParams<double>&, Tensor<double>&,
                                                Tensor<double>*);
template void score_chunks_row<float>(const float*, const float*, std::size_t, std::size_t,
                                      std::size_t, std::size_t, std::size_t, float*);
template void score_chunks_row<double>(const double*, const double*, std::size_t, std::size_t,
                                       std::size_t, std::size_t, std::size_t, double*);
template void score_chunks<float>(const Tensor<float>&, const Tensor<float>&, std::size_t,
                                  Tensor<float>&, std::uint64_t*);
template void score_chunks<double>(const Tensor<double>&, const Tensor<double>&, std::size_t,
                                   Tensor<double>&, std::uint64_t*);
template void select_topk_row<float>(const float*, std::size_t, std::size_t, std::int32_t*);
template void select_topk_row<double>(const double*, std::size_t, std::size_t, std::int32_t*);
template void stick_breaking_row<float>(const float*, const std::int32_t*, std::size_t, float*);
template void stick_breaking_row<double>(const double*, const std::int32_t*, std::size_t, double*);
template void stick_breaking_backward_row<float>(const float*, const float*, const std::int32_t*,
                                                 std::size_t, float*);
template void stick_breaking_backward_row<double>(const double*, const double*,
                                                  const std::int32_t*, std::size_t, double*);
template SelectionResult<float> select_all<float>(const Tensor<float>&, const ChunkMemory<float>&,
                                                  std::size_t, std::size_t);
template SelectionResult<double> select_all<double>(const Tensor<double>&,
                                                    const ChunkMemory<double>&, std::size_t,
                                                    std::size_t);
template InverseSelectionMaps build_inverse_maps<float>(const SelectionResult<float>&);
template InverseSelectionMaps build_inverse_maps<double>(const SelectionResult<double>&);
template float mean_pooled_score<float>(const float*, const ChunkMemory<float>&, std::size_t,
                                        std::size_t);
template double mean_pooled_score<double>(const double*, const ChunkMemory<double>&, std::size_t,
                                          std::size_t);
template void selection_backward<float>(const Tensor<float>&, const Tensor<float>&,
                                        const Tensor<float>&, const ChunkMemory<float>&,
                                        const SelectionParams<float>&, const Tensor<float>&,
                                        Tensor<float>&, Tensor<float>&, SelectionParams<float>&);
template void selection_backward<double>(const Tensor<double>&, const Tensor<double>&,
                                         const Tensor<double>&, const ChunkMemory<double>&,
                                         const SelectionParams<double>&, const Tensor<double>&,
                                         Tensor<double>&, Tensor<double>&,
                                         SelectionParams<double>&);

}  // namespace hsalab
