#pragma once

#include <string>
#include <vector>

#include "hsalab/model.hpp"

namespace hsalab {

// Compares three chunk rankings against each other on real forward passes:
//   oracle    - exhaustive softmax-mass relevance: the total attention
//               probability a chunk's tokens would receive under full softmax
//               attention of the first HSA layer's queries over all eligible
//               chunks;
//   selection - the model's learned chunk-selection scores;
//   meanpool  - the chunk-unaware approximation q . mean(chunk keys).
// recall@K is graded by oracle mass (retrieved mass over the ideal top-K
// mass) and measured at the positions that carry
// a ground-truth retrieval target (the answer span), where the softmax mass
// of a trained model is concentrated; on uniform filler the oracle itself is
// noise and ranking agreement is meaningless.
struct SelectionDemoResult {
  double recall_selection = 0.0;
  double recall_meanpool = 0.0;
  std::size_t positions = 0;   // (t, group) pairs scored
  std::size_t inversions = 0;  // oracle top-1 ranked below a lesser chunk by meanpool
  std::string csv;             // t,group,rank,chunk_id,score,weight,oracle_recall_flag
};

// Softmax-mass chunk relevance for one (token, group): full softmax over all
// tokens of eligible chunks, summed per chunk, averaged over the group's
// heads. out must hold n_chunks entries; ineligible chunks get 0.
template <typename T>
void oracle_chunk_mass(const Tensor<T>& q, const ChunkMemory<T>& mem, std::size_t t,
                       std::size_t group, T* out);

template <typename T>
SelectionDemoResult run_selection_demo(const RambaModel<T>& model, const std::string& task_kind,
                                       std::size_t n_instances, std::size_t context_len,
                                       std::size_t key_len, std::uint64_t seed,
                                       bool emit_csv = false);

}  // namespace hsalab
