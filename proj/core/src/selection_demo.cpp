#include "hsalab/selection_demo.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hsalab/ops.hpp"
#include "hsalab/tasks.hpp"

namespace hsalab {

template <typename T>
void oracle_chunk_mass(const Tensor<T>& q, const ChunkMemory<T>& mem, std::size_t t,
                       std::size_t group, T* out) {
  const std::size_t n = mem.n_chunks, S = mem.S;
  const std::size_t h = q.dim(2), d_h = q.dim(3);
  const std::size_t row_stride = mem.g * d_h;
  const T scale = T(1) / std::sqrt(static_cast<T>(d_h));
  std::fill(out, out + n, T(0));

  std::size_t eligible = 0;
  while (eligible < n && chunk_eligible(eligible, t, S)) ++eligible;
  if (eligible == 0) return;

  std::vector<T> logits(eligible * S), probs(eligible * S);
  for (std::size_t hd = 0; hd < h; ++hd) {
    const T* qrow = &q.at(t, group, hd, 0);
    for (std::size_t c = 0; c < eligible; ++c) {
      const T* kc = mem.k_chunk(c);
      for (std::size_t s = 0; s < S; ++s) {
        const T* krow = kc + s * row_stride + group * d_h;
        T acc = T(0);
        for (std::size_t j = 0; j < d_h; ++j) acc += qrow[j] * krow[j];
        logits[c * S + s] = acc * scale;
      }
    }
    softmax<T>(std::span<const T>(logits.data(), eligible * S),
               std::span<T>(probs.data(), eligible * S));
    for (std::size_t c = 0; c < eligible; ++c) {
      T mass = T(0);
      for (std::size_t s = 0; s < S; ++s) mass += probs[c * S + s];
      out[c] += mass / static_cast<T>(h);
    }
  }
}

namespace {

// Top-K chunk ids by (value desc, id desc) over the first `eligible` entries.
template <typename T>
std::vector<std::int32_t> topk_ids(const T* values, std::size_t eligible, std::size_t K) {
  std::vector<std::int32_t> ids(eligible);
  for (std::size_t i = 0; i < eligible; ++i) ids[i] = static_cast<std::int32_t>(i);
  std::sort(ids.begin(), ids.end(), [&](std::int32_t a, std::int32_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a > b;
  });
  if (ids.size() > K) ids.resize(K);
  return ids;
}

}  // namespace

template <typename T>
SelectionDemoResult run_selection_demo(const RambaModel<T>& model, const std::string& task_kind,
                                       std::size_t n_instances, std::size_t context_len,
                                       std::size_t key_len, std::uint64_t seed, bool emit_csv) {
  const ModelConfig& cfg = model.cfg();
  SelectionDemoResult result;
  double recall_sel_sum = 0.0, recall_mp_sum = 0.0;
  std::ostringstream csv;
  if (emit_csv) csv << "t,group,rank,chunk_id,score,weight,oracle_recall_flag\n";

  for (std::size_t inst_i = 0; inst_i < n_instances; ++inst_i) {
    Rng rng(hash_mix(hash_mix(seed, 0x5e1dca11ULL), inst_i));
    const TaskInstance inst = gen_task(task_kind, rng, context_len, key_len, cfg.vocab);
    ModelTape<T> tape;
    Tensor<T> logits;
    MemoryPlan<T> plan;
    model.forward(inst.tokens, plan, &tape, logits, nullptr);
    const ChunkMemory<T>& mem = tape.mem;
    const std::size_t n = mem.n_chunks;
    if (n == 0 || tape.hsa_tapes.empty() || tape.hsa_tapes[0].q.empty()) continue;
    const Tensor<T>& q = tape.hsa_tapes[0].q;  // first HSA layer's token queries

    std::vector<T> oracle(n), meanpool(n);
    // Retrieving positions: the ones whose next-token prediction is an
    // answer token.
    const std::size_t t_begin = inst.answer_start == 0 ? 0 : inst.answer_start - 1;
    const std::size_t t_end = inst.answer_start + inst.answer_len - 1;
    for (std::size_t t = t_begin; t < t_end; ++t) {
      std::size_t eligible = 0;
      while (eligible < n && chunk_eligible(eligible, t, cfg.S)) ++eligible;
      if (eligible < cfg.K) continue;  // recall@K needs at least K candidates
      for (std::size_t gr = 0; gr < cfg.g; ++gr) {
        oracle_chunk_mass(q, mem, t, gr, oracle.data());
        for (std::size_t c = 0; c < eligible; ++c) {
          meanpool[c] = mean_pooled_score(&q.at(t, gr, 0, 0), mem, gr, c);
        }
        const auto oracle_top = topk_ids(oracle.data(), eligible, cfg.K);
        const auto mp_top = topk_ids(meanpool.data(), eligible, cfg.K);

        // The learned selection's top-K, from the recorded selection result.
        std::vector<std::int32_t> sel_top;
        for (std::size_t k = 0; k < cfg.K; ++k) {
          const std::int32_t c = tape.sel.indices.at(t, gr, k);
          if (c != kNoChunk) sel_top.push_back(c);
        }

        // Graded recall@K: the share of the oracle's attention mass that the
        // scorer's top-K retrieves, relative to the ideal top-K. This is the
        // quantity chunk selection exists to maximize; set-intersection
        // recall would mostly measure agreement on the near-zero tail.
        double ideal_mass = 0.0;
        for (auto c : oracle_top) ideal_mass += static_cast<double>(oracle[std::size_t(c)]);
        auto recall = [&](const std::vector<std::int32_t>& got) {
          if (ideal_mass <= 0.0) return 0.0;
          double mass = 0.0;
          for (auto c : got) mass += static_cast<double>(oracle[std::size_t(c)]);
          return std::min(1.0, mass / ideal_mass);
        };
        recall_sel_sum += recall(sel_top);
        recall_mp_sum += recall(mp_top);
        ++result.positions;

        // Appendix-style inversion: the oracle's best chunk ranked below some
        // strictly-worse chunk by the mean-pooled scorer.
        if (!oracle_top.empty()) {
          const std::int32_t best = oracle_top[0];
          for (std::size_t c = 0; c < eligible; ++c) {
            if (static_cast<std::int32_t>(c) != best && oracle[c] < oracle[best] &&
                meanpool[c] > meanpool[best]) {
              ++result.inversions;
              break;
            }
          }
        }

        if (emit_csv && inst_i == 0) {
          for (std::size_t k = 0; k < cfg.K; ++k) {
            const std::int32_t c = tape.sel.sorted_indices.at(t, gr, k);
            if (c == kNoChunk) continue;
            const bool flag =
                std::find(oracle_top.begin(), oracle_top.end(), c) != oracle_top.end();
            csv << t << "," << gr << "," << k << "," << c << ","
                << tape.sel.scores.at(t, gr, static_cast<std::size_t>(c)) << ","
                << tape.sel.weights.at(t, gr, k) << "," << (flag ? 1 : 0) << "\n";
          }
        }
      }
    }
  }

  if (result.positions > 0) {
    result.recall_selection = recall_sel_sum / static_cast<double>(result.positions);
    result.recall_meanpool = recall_mp_sum / static_cast<double>(result.positions);
  }
  result.csv = csv.str();
  return result;
}

template void oracle_chunk_mass<float>(const Tensor<float>&, const ChunkMemory<float>&,
                                       std::size_t, std::size_t, float*);
template void oracle_chunk_mass<double>(const Tensor<double>&, const ChunkMemory<double>&,
                                        std::size_t, std::size_t, double*);
template SelectionDemoResult run_selection_demo<float>(const RambaModel<float>&,
                                                       const std::string&, std::size_t,
                                                       std::size_t, std::size_t, std::uint64_t,
                                                       bool);
template SelectionDemoResult run_selection_demo<double>(const RambaModel<double>&,
                                                        const std::string&, std::size_t,
                                                        std::size_t, std::size_t, std::uint64_t,
                                                        bool);

}  // namespace hsalab
