#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hsalab/inference.hpp"
#include "hsalab/rng.hpp"

namespace hsalab {

// Reserved token ids live at the top of the vocabulary. Fillers and keys are
// drawn uniformly from the non-reserved range, mirroring the random-token-key
// variant of the retrieval tasks.
struct ReservedIds {
  std::int32_t sep;        // corpus document separator
  std::int32_t pk_mark;    // passkey marker ("the pass key is")
  std::int32_t pk_query;   // passkey query marker
  std::int32_t ni_m0, ni_m1, ni_m2, ni_m3;  // niah marker prefix/suffix
  std::int32_t ni_q0, ni_q1, ni_q2;         // niah query pattern
  std::int32_t copy_sep;
  std::int32_t first_reserved;  // lowest reserved id; fillers are < this

  static ReservedIds of(std::size_t vocab);
};

struct TaskMeta {
  std::size_t context_len = 0;
  std::size_t key_len = 0;
  std::size_t insert_pos = 0;
};

struct TaskInstance {
  std::vector<std::int32_t> tokens;
  std::size_t answer_start = 0;  // first answer token position
  std::size_t answer_len = 0;
  TaskMeta meta;

  // Next-token targets with loss restricted to the answer span.
  std::vector<std::int32_t> targets() const;
};

// Filler + marker + random key + filler + query marker + key. The key
// appears verbatim exactly once before the query position. repeated_filler
// hardens the task: filler comes in short repeated runs, which gives
// distractor chunks pooled representations with full-magnitude directions
// (no 1/S washout) and stresses pooling-based chunk scorers.
TaskInstance gen_passkey(Rng& rng, std::size_t context_len, std::size_t key_len,
                         std::size_t vocab, bool repeated_filler = false);

// Same layout with the longer marker/query patterns.
TaskInstance gen_niah(Rng& rng, std::size_t context_len, std::size_t key_len, std::size_t vocab,
                      bool repeated_filler = false);

// First half filler, separator, then a verbatim copy; the copy is the answer.
TaskInstance gen_copy(Rng& rng, std::size_t context_len, std::size_t vocab);

// kind: passkey | niah | copy | passkey_hard | niah_hard (repeated filler).
TaskInstance gen_task(const std::string& kind, Rng& rng, std::size_t context_len,
                      std::size_t key_len, std::size_t vocab);

// Exhaustive search for the answer span inside the context (test oracle).
bool oracle_finds_key(const TaskInstance& inst);

// ---------------------------------------------------------------------------
// Corpus: token ids as little-endian unsigned 32-bit, one flat file, document
// boundaries marked with the reserved separator id.
// ---------------------------------------------------------------------------

void write_corpus(const std::string& path, std::span<const std::int32_t> ids);
std::vector<std::int32_t> read_corpus(const std::string& path, std::size_t vocab);

// Task stream: instances concatenated in corpus format plus a textual sidecar
// (one line per instance: answer_start answer_len context_len key_len insert_pos).
void write_task_stream(const std::string& path, const std::vector<TaskInstance>& instances);

// ---------------------------------------------------------------------------
// Retrieval evaluation
// ---------------------------------------------------------------------------

struct RetrievalPoint {
  std::size_t context_len = 0;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

// Greedy-decodes n tokens given a prompt.
using DecodeFn =
    std::function<std::vector<std::int32_t>(std::span<const std::int32_t>, std::size_t)>;

template <typename T>
DecodeFn make_model_decoder(const RambaModel<T>& model,
                            StoreBackend backend = StoreBackend::resident);

// Exact-match key accuracy per context length. Instances are derived from
// (seed, length, index), so results do not depend on evaluation order.
std::vector<RetrievalPoint> eval_retrieval(const DecodeFn& decode, const std::string& kind,
                                           const std::vector<std::size_t>& lengths,
                                           std::size_t n_per_len, std::size_t key_len,
                                           std::size_t vocab, std::uint64_t seed);

std::string retrieval_csv(const std::vector<RetrievalPoint>& points);

}  // namespace hsalab
