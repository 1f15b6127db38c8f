#include "hsalab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "hsalab/ops.hpp"
#include "hsalab/thread_pool.hpp"

namespace hsalab {

template <typename T>
void attention_full_causal(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           Tensor<T>& o, HsaCounters* counters) {
  HSALAB_CHECK_DIM(q.rank() == 3 && q.same_shape(k) && q.same_shape(v),
                   "full attention: Q/K/V must be l x heads x d_h");
  const std::size_t l = q.dim(0), heads = q.dim(1), d_h = q.dim(2);
  const T scale = T(1) / std::sqrt(static_cast<T>(d_h));
  o.resize({l, heads, d_h});
  std::atomic<std::uint64_t> flops{0};

  parallel_for(l, [&](std::size_t t) {
    std::vector<T> logits(t + 1);
    std::uint64_t row_flops = 0;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const T* qrow = &q.at(t, hd, 0);
      for (std::size_t u = 0; u <= t; ++u) {
        const T* krow = &k.at(u, hd, 0);
        T acc = T(0);
        for (std::size_t c = 0; c < d_h; ++c) acc += qrow[c] * krow[c];
        logits[u] = acc * scale;
        row_flops += 2 * d_h;
      }
      softmax<T>(std::span<const T>(logits.data(), t + 1), std::span<T>(logits.data(), t + 1));
      T* orow = &o.at(t, hd, 0);
      for (std::size_t c = 0; c < d_h; ++c) orow[c] = T(0);
      for (std::size_t u = 0; u <= t; ++u) {
        const T p = logits[u];
        const T* vrow = &v.at(u, hd, 0);
        for (std::size_t c = 0; c < d_h; ++c) orow[c] += p * vrow[c];
        row_flops += 2 * d_h;
      }
    }
    if (counters != nullptr) flops.fetch_add(row_flops, std::memory_order_relaxed);
  });

  if (counters != nullptr) counters->flops += flops.load();
}

std::uint64_t predict_full_attention_flops(std::size_t l, std::size_t heads, std::size_t d_h) {
  // Per query row t (causal, self included): 2*d_h*(t+1) for logits plus
  // 2*d_h*(t+1) for the PV reduction, per head.
  const std::uint64_t pairs = static_cast<std::uint64_t>(l) * (l + 1) / 2;
  return 4ULL * d_h * heads * pairs;
}

std::uint64_t predict_hsa_token_flops(std::size_t l, std::size_t S, std::size_t K, std::size_t g,
                                      std::size_t h, std::size_t d_h) {
  // Per filled (t, group, k) slot: 2*h*S*d_h for logits and 2*h*S*d_h for the
  // PV reduction. A token at position t has min(K, floor(t/S)) filled slots.
  std::uint64_t slots = 0;
  const std::size_t n_chunks = l / S;
  for (std::size_t t = 0; t < l; ++t) {
    const std::size_t eligible = std::min(n_chunks, t / S);
    slots += std::min(K, eligible);
  }
  return slots * g * 4ULL * h * S * d_h;
}

std::uint64_t predict_selection_flops(std::size_t l, std::size_t g, std::size_t d_g,
                                      std::size_t n_chunks) {
  return static_cast<std::uint64_t>(l) * g * d_g * n_chunks;
}

namespace {

using Clock = std::chrono::steady_clock;

double time_median_ms(std::size_t trials, std::size_t warmups, const std::function<void()>& fn) {
  for (std::size_t i = 0; i < warmups; ++i) fn();
  std::vector<double> ms;
  for (std::size_t i = 0; i < trials; ++i) {
    const auto t0 = Clock::now();
    fn();
    ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  return ms[ms.size() / 2];
}

template <typename T>
void fill_random(Tensor<T>& t, Rng& rng, T scale = T(1)) {
  for (auto& v : t.flat()) v = static_cast<T>(rng.normal()) * scale;
}

}  // namespace

std::vector<BenchRecord> bench_ops(const std::vector<std::size_t>& lengths,
                                   const BenchConfig& cfg) {
  using T = float;  // bench runs at training precision
  std::vector<BenchRecord> records;
  const std::size_t d = cfg.g * cfg.h * cfg.d_h;
  const std::size_t d_g = cfg.h * cfg.d_h;
  const std::size_t workers = ThreadPool::global().workers();

  for (std::size_t li = 0; li < lengths.size(); ++li) {
    const std::size_t l = lengths[li];
    HSALAB_CHECK_INPUT(li == 0 || lengths[li - 1] <= l, "bench: lengths must be sorted ascending");
    Rng rng(hash_mix(cfg.seed, l));
    const std::size_t n_chunks = l / cfg.S;

    auto base = [&](const char* op) {
      BenchRecord r;
      r.op = op;
      r.l = l;
      r.S = cfg.S;
      r.K = cfg.K;
      r.g = cfg.g;
      r.h = cfg.h;
      r.d_h = cfg.d_h;
      r.trials = cfg.trials;
      return r;
    };

    // Shared inputs: token-level queries, chunk memory, selection queries.
    Tensor<T> q({l, cfg.g, cfg.h, cfg.d_h});
    fill_random(q, rng);
    ChunkMemory<T> mem;
    mem.n_chunks = n_chunks;
    mem.S = cfg.S;
    mem.d = d;
    mem.g = cfg.g;
    mem.d_h = cfg.d_h;
    mem.K_attn.resize({n_chunks, cfg.S, cfg.g * cfg.d_h});
    mem.V_attn.resize({n_chunks, cfg.S, cfg.g * cfg.d_h});
    mem.K_slc.resize({n_chunks, d});
    fill_random(mem.K_attn, rng);
    fill_random(mem.V_attn, rng);
    fill_random(mem.K_slc, rng);
    Tensor<T> q_slc({l, d});
    fill_random(q_slc, rng);

    // Full-attention reference, layers stacked.
    {
      Tensor<T> fq({l, cfg.g * cfg.h, cfg.d_h}), fk({l, cfg.g * cfg.h, cfg.d_h}),
          fv({l, cfg.g * cfg.h, cfg.d_h}), fo;
      fill_random(fq, rng);
      fill_random(fk, rng);
      fill_random(fv, rng);
      BenchRecord r = base("full_attn3");
      HsaCounters counters;
      r.wall_ms_median = time_median_ms(cfg.trials, cfg.warmups, [&] {
        counters.reset();
        for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
          attention_full_causal(fq, fk, fv, fo, &counters);
        }
      });
      r.flops_measured = counters.flops;
      r.flops_predicted = cfg.layers * predict_full_attention_flops(l, cfg.g * cfg.h, cfg.d_h);
      r.peak_bytes = workers * l * sizeof(T);  // one logits row per worker
      records.push_back(r);
    }

    // One shared selection feeding all HSA layers.
    SelectionResult<T> sel;
    std::uint64_t sel_flops_once = 0;
    {
      BenchRecord r = base("selection");
      r.wall_ms_median = time_median_ms(cfg.trials, cfg.warmups, [&] {
        sel_flops_once = 0;
        sel = SelectionResult<T>();
        sel.l = l;
        sel.g = cfg.g;
        sel.n_chunks = n_chunks;
        sel.K = cfg.K;
        sel.scores.resize({l, cfg.g, n_chunks});
        sel.indices.resize({l, cfg.g, cfg.K});
        sel.sorted_indices.resize({l, cfg.g, cfg.K});
        sel.weights.resize({l, cfg.g, cfg.K});
        score_chunks(q_slc, mem.K_slc, cfg.S, sel.scores, &sel_flops_once);
        parallel_for(l, [&](std::size_t t) {
          for (std::size_t gr = 0; gr < cfg.g; ++gr) {
            select_topk_row(&sel.scores.at(t, gr, 0), n_chunks, cfg.K,
                            &sel.indices.at(t, gr, 0));
            sort_indices_desc(&sel.indices.at(t, gr, 0), cfg.K, &sel.sorted_indices.at(t, gr, 0));
            stick_breaking_row(&sel.scores.at(t, gr, 0), &sel.sorted_indices.at(t, gr, 0), cfg.K,
                               &sel.weights.at(t, gr, 0));
          }
        });
      });
      r.flops_measured = sel_flops_once;
      r.flops_predicted = predict_selection_flops(l, cfg.g, d_g, n_chunks);
      r.peak_bytes = (static_cast<std::uint64_t>(l) * n_chunks + (l + n_chunks) * d_g) * sizeof(T);
      records.push_back(r);
    }

    const std::uint64_t token_pred = predict_hsa_token_flops(l, cfg.S, cfg.K, cfg.g, cfg.h, cfg.d_h);

    // Naive HSA: three stacked calls plus the one shared selection.
    {
      BenchRecord r = base("hsa_naive3");
      Tensor<T> o;
      HsaCounters counters;
      r.wall_ms_median = time_median_ms(cfg.trials, cfg.warmups, [&] {
        counters.reset();
        std::uint64_t sf = 0;
        Tensor<T> scores({l, cfg.g, n_chunks});
        score_chunks(q_slc, mem.K_slc, cfg.S, scores, &sf);
        counters.flops += sf;
        for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
          hsa_forward_naive(q, mem, sel, o, &counters);
        }
      });
      r.flops_measured = counters.flops;
      r.flops_predicted = cfg.layers * token_pred + predict_selection_flops(l, cfg.g, d_g, n_chunks);
      r.peak_bytes = (cfg.h * cfg.S + static_cast<std::uint64_t>(l) * n_chunks) * sizeof(T);
      records.push_back(r);
    }

    // Blocked HSA: three stacked calls plus the one shared selection.
    {
      BenchRecord r = base("hsa_blocked3");
      Tensor<T> o;
      HsaCounters counters;
      r.wall_ms_median = time_median_ms(cfg.trials, cfg.warmups, [&] {
        counters.reset();
        std::uint64_t sf = 0;
        Tensor<T> scores({l, cfg.g, n_chunks});
        score_chunks(q_slc, mem.K_slc, cfg.S, scores, &sf);
        counters.flops += sf;
        for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
          hsa_forward_blocked(q, mem, sel, o, &counters);
        }
      });
      r.flops_measured = counters.flops;
      r.flops_predicted = cfg.layers * token_pred + predict_selection_flops(l, cfg.g, d_g, n_chunks);
      r.peak_bytes =
          workers * (cfg.h * cfg.S + 2 * cfg.h * cfg.d_h) * sizeof(T);  // per-item scratch
      records.push_back(r);
    }

    // Token phase alone (for the linear-vs-quadratic doubling audit).
    {
      BenchRecord r = base("hsa_blocked_token3");
      Tensor<T> o;
      HsaCounters counters;
      r.wall_ms_median = time_median_ms(cfg.trials, cfg.warmups, [&] {
        counters.reset();
        for (std::size_t layer = 0; layer < cfg.layers; ++layer) {
          hsa_forward_blocked(q, mem, sel, o, &counters);
        }
      });
      r.flops_measured = counters.flops;
      r.flops_predicted = cfg.layers * token_pred;
      r.peak_bytes = workers * (cfg.h * cfg.S + 2 * cfg.h * cfg.d_h) * sizeof(T);
      records.push_back(r);
    }
  }
  return records;
}

std::string bench_csv(const std::vector<BenchRecord>& records) {
  std::ostringstream os;
  os << "op,l,S,K,g,h,d_h,trials,wall_ms_median,peak_bytes,flops_measured,flops_predicted\n";
  for (const auto& r : records) {
    os << r.op << "," << r.l << "," << r.S << "," << r.K << "," << r.g << "," << r.h << ","
       << r.d_h << "," << r.trials << "," << r.wall_ms_median << "," << r.peak_bytes << ","
       << r.flops_measured << "," << r.flops_predicted << "\n";
  }
  return os.str();
}

template void attention_full_causal<float>(const Tensor<float>&, const Tensor<float>&,
                                           const Tensor<float>&, Tensor<float>&, HsaCounters*);
template void attention_full_causal<double>(const Tensor<double>&, const Tensor<double>&,
                                            const Tensor<double>&, Tensor<double>&, HsaCounters*);

}  // namespace hsalab
