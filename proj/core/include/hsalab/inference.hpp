#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "hsalab/model.hpp"

namespace hsalab {

enum class StoreBackend {
  resident,        // everything stays in the "device" tier; fetches are free
  offload_memory,  // token-level K/V in a host-emulated tier, copied on fetch
  offload_file,    // token-level K/V in a file, read on fetch
};

struct StoreCounters {
  std::uint64_t bytes_fetched = 0;
  std::uint64_t fetch_ops = 0;
  std::uint64_t staged_elems_last_step = 0;  // per tensor (K and V each)
  std::uint64_t staged_chunks_last_step = 0;
};

struct MemoryReport {
  std::uint64_t resident_bytes = 0;
  std::uint64_t resident_kslc_bytes = 0;
  std::uint64_t resident_ebar_bytes = 0;
  std::uint64_t resident_state_bytes = 0;
  std::uint64_t offloaded_bytes = 0;
  std::uint64_t bytes_fetched = 0;
  std::uint64_t fetches = 0;
};

// Two-tier chunk store. The resident tier holds the compact selection keys
// (K_slc) and pooled summaries (E_bar); the offloaded tier holds token-level
// K/V blocks keyed by chunk id. A per-step staging set (at most g*K distinct
// chunks) is cleared at the end of every decode step.
template <typename T>
class TieredKVStore {
 public:
  TieredKVStore() = default;
  TieredKVStore(StoreBackend backend, std::size_t S, std::size_t g, std::size_t d_h,
                std::size_t d, const std::string& file_path = "");

  StoreBackend backend() const { return backend_; }
  std::size_t n_chunks() const { return n_chunks_; }
  std::size_t chunk_elems() const { return S_ * g_ * d_h_; }

  // Commits one complete chunk: K/V blocks to the offloaded tier, the
  // selection key row and pooled row to the resident tier.
  void commit_chunk(const T* k_block, const T* v_block, const T* k_slc_row, const T* e_bar_row);

  const T* resident_k_slc() const { return k_slc_.data(); }

  // Stages the given distinct chunk ids for this step (each fetched at most
  // once even if several groups chose it) and returns whether it fetched.
  void stage(const std::vector<std::int32_t>& chunk_ids);
  void clear_staging();

  // Valid only between stage() and clear_staging() for staged ids (any id in
  // resident mode).
  const T* staged_k(std::int32_t chunk_id) const;
  const T* staged_v(std::int32_t chunk_id) const;

  const StoreCounters& counters() const { return counters_; }
  std::uint64_t offloaded_bytes() const;
  std::uint64_t resident_kslc_bytes() const { return k_slc_.size() * sizeof(T); }
  std::uint64_t resident_ebar_bytes() const { return e_bar_.size() * sizeof(T); }

 private:
  struct Staged {
    std::int32_t id = kNoChunk;
    std::vector<T> k, v;
  };

  const Staged& find_staged(std::int32_t chunk_id) const;

  StoreBackend backend_ = StoreBackend::offload_memory;
  std::size_t S_ = 0, g_ = 0, d_h_ = 0, d_ = 0;
  std::size_t n_chunks_ = 0;

  std::vector<T> k_slc_;  // resident, n_chunks x d
  std::vector<T> e_bar_;  // resident, n_chunks x d

  std::vector<std::vector<T>> mem_k_, mem_v_;  // offload_memory / resident tier
  std::string file_path_;
  mutable std::fstream file_;

  std::vector<Staged> staging_;
  StoreCounters counters_;
};

// Autoregressive decoding against the tiered store. One selection and one
// staging event per step, shared across all HSA layers.
template <typename T>
class DecodeSession {
 public:
  DecodeSession(const RambaModel<T>& model, StoreBackend backend,
                const std::string& file_path = "");

  // Runs the full forward over the prompt, commits all complete chunks, and
  // carries the recurrent states. Empty prompts leave an empty store.
  void prefill(std::span<const std::int32_t> prompt);

  // Advances one token: backbone step, one shared selection, one staging
  // event, all HSA layers, commit of the in-progress chunk when it fills.
  // Returns the next-token logits.
  const Tensor<T>& decode_step(std::int32_t token);

  std::int32_t greedy_pick() const;
  std::int32_t sample_pick(double temperature, Rng& rng) const;

  MemoryReport memory_report() const;
  const TieredKVStore<T>& store() const { return store_; }
  std::size_t position() const { return position_; }
  std::uint64_t selection_events() const { return selection_events_; }
  std::uint64_t staging_events() const { return staging_events_; }

 private:
  void step_token(std::int32_t token);
  void maybe_commit_ring();

  const RambaModel<T>* model_;
  TieredKVStore<T> store_;
  StateSnapshot<T> states_;
  Tensor<T> ring_;            // S x d in-progress chunk of lower-decoder outputs
  std::size_t ring_fill_ = 0;
  std::size_t position_ = 0;  // absolute index of the next token to be processed
  Tensor<T> logits_;          // 1 x vocab
  std::uint64_t selection_events_ = 0;
  std::uint64_t staging_events_ = 0;
};

// Greedy-decodes n tokens: each iteration picks from the current logits
// (prefill must have produced some) and feeds the pick back through one
// decode step.
template <typename T>
std::vector<std::int32_t> decode_greedy(DecodeSession<T>& session, std::size_t n);

}  // namespace hsalab
