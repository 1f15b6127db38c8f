#pragma once

#include <cstddef>
#include <type_traits>
#include <functional>
#include <vector>

#include "hsalab/config.hpp"
#include "hsalab/ops.hpp"
#include "hsalab/rng.hpp"
#include "hsalab/tensor.hpp"

namespace hsalab {

inline constexpr double kRmsNormEps = 1e-6;

// Number of complete chunks in a sequence of length l. A trailing partial
// chunk is never encoded and never selectable.
inline std::size_t complete_chunks(std::size_t l, std::size_t S) { return l / S; }

// Per-chunk encoded token states plus everything derived from them. Built
// exactly once per sequence; HSA layers and the selection layer hold
// references into this object, never copies.
template <typename T>
struct ChunkMemory {
  std::size_t n_chunks = 0;
  std::size_t S = 0;
  std::size_t d = 0;
  std::size_t g = 0;
  std::size_t d_h = 0;

  Tensor<T> E;       // n_chunks x S x d, encoder outputs
  Tensor<T> E_bar;   // n_chunks x d, mean pool over the S rows of E_i
  Tensor<T> K_attn;  // n_chunks x S x (g*d_h), shared across all HSA layers
  Tensor<T> V_attn;  // n_chunks x S x (g*d_h)
  Tensor<T> K_slc;   // n_chunks x d, selection keys from E_bar

  std::size_t build_count = 0;  // instrumentation: asserted == 1 per sequence

  const T* k_chunk(std::size_t i) const { return K_attn.data() + i * S * g * d_h; }
  const T* v_chunk(std::size_t i) const { return V_attn.data() + i * S * g * d_h; }
  std::size_t chunk_kv_elems() const { return S * g * d_h; }
};

template <typename T>
struct EncoderLayerParams {
  Tensor<T> n1_gain;  // d
  Tensor<T> w_q, w_k, w_v, w_o;  // d x d
  Tensor<T> n2_gain;  // d
  Tensor<T> w1;       // hidden x d
  Tensor<T> w2;       // d x hidden
};

template <typename T>
struct EncoderParams {
  std::size_t d = 0, S = 0, hidden = 0, n_heads = 0, d_h = 0;
  Tensor<T> pos;  // S x d, learned absolute positions inside a chunk
  std::vector<EncoderLayerParams<T>> layers;

  void init(const ModelConfig& cfg, Rng& rng);
  void visit(const std::function<void(const std::string&, Tensor<T>&)>& fn);
  void zero();
  void add_scaled(const EncoderParams<T>& other, T scale);
};

// Forward tape for one chunk (all encoder layers).
template <typename T>
struct EncoderChunkTape {
  struct Layer {
    Tensor<T> x_in;    // S x d, layer input
    Tensor<T> xn1;     // S x d
    Tensor<T> q, k, v; // S x d
    Tensor<T> p;       // n_heads x S x S attention probabilities
    Tensor<T> o_heads; // S x d, attention output before w_o
    Tensor<T> x_mid;   // S x d, after attention residual
    Tensor<T> xn2;     // S x d
    Tensor<T> h_pre;   // S x hidden
    Tensor<T> h_act;   // S x hidden
  };
  std::vector<Layer> layers;
};

// Encodes one complete S x d block independently of all other chunks.
template <typename T>
void encode_chunk(const EncoderParams<T>& enc, const T* block, Tensor<T>& out,
                  std::type_identity_t<EncoderChunkTape<T>*> tape = nullptr);

template <typename T>
void encode_chunk_backward(const EncoderParams<T>& enc, const EncoderChunkTape<T>& tape,
                           const Tensor<T>& d_out, Tensor<T>& d_block, EncoderParams<T>& grads);

// Splits H_lower into complete chunks, encodes each one (parallel map over
// chunks, deterministic output ordering), and fills mem.E.
template <typename T>
void encode_chunks(const Tensor<T>& h_lower, const ModelConfig& cfg, const EncoderParams<T>& enc,
                   ChunkMemory<T>& mem,
                   std::type_identity_t<std::vector<EncoderChunkTape<T>>*> tapes = nullptr);

// Populates E_bar (mean pool), K_attn/V_attn (shared projections of E) and
// K_slc (selection keys from E_bar). Increments build_count.
template <typename T>
void build_memory(ChunkMemory<T>& mem, const Tensor<T>& w_k, const Tensor<T>& w_v,
                  const Tensor<T>& w_k_slc);

// Reverse of build_memory: consumes gradients for K_attn/V_attn/K_slc and the
// direct E_bar path, producing dE plus weight gradients.
template <typename T>
void build_memory_backward(const ChunkMemory<T>& mem, const Tensor<T>& w_k, const Tensor<T>& w_v,
                           const Tensor<T>& w_k_slc, const Tensor<T>& d_k_attn,
                           const Tensor<T>& d_v_attn, const Tensor<T>& d_k_slc, Tensor<T>& d_e,
                           Tensor<T>& d_w_k, Tensor<T>& d_w_v, Tensor<T>& d_w_k_slc);

}  // namespace hsalab
