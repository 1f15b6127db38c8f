#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "hsalab/chunking.hpp"
#include "hsalab/config.hpp"
#include "hsalab/tensor.hpp"

namespace hsalab {

inline constexpr std::int32_t kNoChunk = -1;  // sentinel for unfilled top-K slots

// Per-token, per-group chunk selection: masked scores, chosen indices, the
// descending-sorted index list, and stick-breaking weights over it.
template <typename T>
struct SelectionResult {
  std::size_t l = 0, g = 0, n_chunks = 0, K = 0;
  Tensor<T> scores;                   // l x g x n_chunks, -inf at masked slots
  Tensor<std::int32_t> indices;        // l x g x K in rank order (score descending)
  Tensor<std::int32_t> sorted_indices; // l x g x K, chunk id descending, sentinels trail
  Tensor<T> weights;                   // l x g x K, 0 at sentinel slots
};

// M[t][i]: token t selected chunk i. R[t][i]: position of chunk i in the
// sorted list. Both per group.
struct InverseSelectionMaps {
  std::size_t l = 0, g = 0, n_chunks = 0;
  Tensor<std::uint8_t> M;  // l x g x n_chunks
  Tensor<std::int32_t> R;  // l x g x n_chunks, valid only where M is set
};

template <typename T>
struct SelectionParams {
  Tensor<T> norm_gain;  // d
  Tensor<T> w_q_slc;    // d x d
  Tensor<T> w_k_slc;    // d x d (applied to E_bar inside build_memory)

  void init(const ModelConfig& cfg, Rng& rng);
  void visit(const std::function<void(const std::string&, Tensor<T>&)>& fn);
};

// Chunk i may be selected by token t only when it is strictly complete before
// t. With 0-based chunk ids that is (i+1)*S <= t, so the chunk containing t is
// never selectable and the bidirectional encoder cannot leak future tokens.
inline bool chunk_eligible(std::size_t chunk, std::size_t t, std::size_t S) {
  return (chunk + 1) * S <= t;
}

// Queries from the RMSNorm-ed mid states: Q_slc = W_Q_slc . Norm(H_mid),
// grouped as l x g x d_g. Keys are mem.K_slc viewed as n x g x d_g.
template <typename T>
void project_selection_queries(const Tensor<T>& h_mid, const SelectionParams<T>& params,
                               Tensor<T>& q_slc, Tensor<T>* normed_tape);

// Masked scores for one token row: s[gr][i] = <q_hat, k_hat>/sqrt(d_g) for
// eligible chunks, -inf otherwise. k_slc points at n_chunks rows of width
// g*d_g.
template <typename T>
void score_chunks_row(const T* q_row, const T* k_slc, std::size_t n_chunks, std::size_t t,
                      std::size_t S, std::size_t g, std::size_t d_g, T* out_row);

// All rows at once (gemm + mask). The gemm covers every (t, chunk) pair, so
// the work is exactly l*g*d_g*n_chunks multiply-adds; flops, when given,
// accumulates that count.
template <typename T>
void score_chunks(const Tensor<T>& q_slc, const Tensor<T>& k_slc, std::size_t S,
                  Tensor<T>& scores, std::uint64_t* flops = nullptr);

// Indices of the K largest finite scores, ties broken toward the larger
// (more recent) chunk id; sentinel-filled when fewer are eligible.
template <typename T>
void select_topk_row(const T* scores, std::size_t n_chunks, std::size_t K, std::int32_t* out);

// Descending sort of the selected ids, sentinels trailing.
void sort_indices_desc(const std::int32_t* in, std::size_t K, std::int32_t* out);

// Stick-breaking weights over the sorted list: beta_k = sigmoid(s at I'_k),
// w_k = beta_k * prod_{i<k} (1 - beta_i). Sentinels get zero weight and do
// not consume stick.
template <typename T>
void stick_breaking_row(const T* scores, const std::int32_t* sorted, std::size_t K, T* weights);

// d(scores) from d(weights), scattered back to original chunk ids.
template <typename T>
void stick_breaking_backward_row(const T* d_weights, const T* scores, const std::int32_t* sorted,
                                 std::size_t K, T* d_scores);

template <typename T>
SelectionResult<T> select_all(const Tensor<T>& q_slc, const ChunkMemory<T>& mem, std::size_t K,
                              std::size_t S);

template <typename T>
InverseSelectionMaps build_inverse_maps(const SelectionResult<T>& sel);

// Appendix-style chunk-unaware scorer: q . mean(chunk keys) per head summed
// over the group's heads. Used only by the selection-accuracy demo.
template <typename T>
T mean_pooled_score(const T* q_group, const ChunkMemory<T>& mem, std::size_t group,
                    std::size_t chunk);

// Backward through scoring and the query projection. d_scores must be zero at
// masked/unselected slots. Accumulates into dH_mid, dK_slc and param grads.
template <typename T>
void selection_backward(const Tensor<T>& h_mid, const Tensor<T>& normed,
                        const Tensor<T>& q_slc, const ChunkMemory<T>& mem,
                        const SelectionParams<T>& params, const Tensor<T>& d_scores,
                        Tensor<T>& d_h_mid, Tensor<T>& d_k_slc, SelectionParams<T>& grads);

}  // namespace hsalab
