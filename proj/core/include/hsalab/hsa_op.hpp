#pragma once

#include <cstdint>

#include "hsalab/chunking.hpp"
#include "hsalab/selection.hpp"
#include "hsalab/tensor.hpp"

namespace hsalab {

// Instrumentation queryable after each operator call. Flop counting follows
// the closed-form convention used by the bench module: one multiply-add is
// two flops in the token phase, one in the selection phase.
struct HsaCounters {
  std::uint64_t chunk_loads = 0;
  std::uint64_t bytes_loaded = 0;
  std::uint64_t flops = 0;

  void reset() { *this = HsaCounters{}; }
  HsaCounters& operator+=(const HsaCounters& o) {
    chunk_loads += o.chunk_loads;
    bytes_loaded += o.bytes_loaded;
    flops += o.flops;
    return *this;
  }
};

// Token-level attention probabilities of one (token, group) pair against one
// chunk: P[head][s] = softmax1(Q . K_s / sqrt(d_h)). Every forward and both
// backward phases recompute P through this single code path, so the
// recomputed values are bit-identical to the forward pass.
template <typename T>
void token_chunk_probs(const T* q, const T* k_chunk, std::size_t group, std::size_t h,
                       std::size_t d_h, std::size_t S, std::size_t g, T* p_out);

// Reference semantics: plain triple-loop over (t, group, k). Serves as the
// oracle for the blocked kernel.
template <typename T>
void hsa_forward_naive(const Tensor<T>& q, const ChunkMemory<T>& mem,
                       const SelectionResult<T>& sel, Tensor<T>& o,
                       HsaCounters* counters = nullptr);

// Same semantics organized as one work item per (t, group): load Q once,
// loop over the K selected chunks accumulating into a local buffer, write the
// output exactly once. Sentinel slots are skipped before any load.
template <typename T>
void hsa_forward_blocked(const Tensor<T>& q, const ChunkMemory<T>& mem,
                         const SelectionResult<T>& sel, Tensor<T>& o,
                         HsaCounters* counters = nullptr);

// Backward phase 1, one work item per token: recomputes P, fills the
// D workspace (rowsum(O' o dO')), and accumulates dQ and dw.
template <typename T>
void hsa_backward_qw(const Tensor<T>& d_o, const Tensor<T>& q, const ChunkMemory<T>& mem,
                     const SelectionResult<T>& sel, Tensor<T>& d_q, Tensor<T>& d_w, Tensor<T>& d_ws,
                     HsaCounters* counters = nullptr);

// Backward phase 2, one work item per chunk: scans tokens through the
// inverse maps and accumulates dK/dV chunk-locally. D must be fully written
// by phase 1 before this runs.
template <typename T>
void hsa_backward_kv(const Tensor<T>& d_o, const Tensor<T>& q, const ChunkMemory<T>& mem,
                     const SelectionResult<T>& sel, const InverseSelectionMaps& maps,
                     const Tensor<T>& d_ws, Tensor<T>& d_k_attn, Tensor<T>& d_v_attn,
                     HsaCounters* counters = nullptr);

}  // namespace hsalab
