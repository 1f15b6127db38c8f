#include "hsalab/hsa_op.hpp"

#include <atomic>
#include <cmath>

#include "hsalab/ops.hpp"
#include "hsalab/thread_pool.hpp"

namespace hsalab {

namespace {

template <typename T>
void check_shapes(const Tensor<T>& q, const ChunkMemory<T>& mem, const SelectionResult<T>& sel) {
  HSALAB_CHECK_DIM(q.rank() == 4, "hsa: Q must be l x g x h x d_h");
  HSALAB_CHECK_DIM(q.dim(1) == mem.g && q.dim(3) == mem.d_h, "hsa: Q group layout mismatch");
  HSALAB_CHECK(sel.l == q.dim(0) && sel.g == q.dim(1), "hsa: selection does not match Q");
  HSALAB_CHECK(sel.n_chunks == mem.n_chunks, "hsa: selection does not match memory");
}

}  // namespace

template <typename T>
void token_chunk_probs(const T* q, const T* k_chunk, std::size_t group, std::size_t h,
                       std::size_t d_h, std::size_t S, std::size_t g, T* p_out) {
  const T scale = T(1) / std::sqrt(static_cast<T>(d_h));
  const std::size_t row_stride = g * d_h;
  for (std::size_t hd = 0; hd < h; ++hd) {
    const T* qh = q + hd * d_h;
    T* logits = p_out + hd * S;
    for (std::size_t s = 0; s < S; ++s) {
      const T* kr = k_chunk + s * row_stride + group * d_h;
      T acc = T(0);
      for (std::size_t c = 0; c < d_h; ++c) acc += qh[c] * kr[c];
      logits[s] = acc * scale;
    }
    softmax1<T>(std::span<const T>(logits, S), std::span<T>(logits, S));
  }
}

template <typename T>
void hsa_forward_naive(const Tensor<T>& q, const ChunkMemory<T>& mem,
                       const SelectionResult<T>& sel, Tensor<T>& o, HsaCounters* counters) {
  check_shapes(q, mem, sel);
  const std::size_t l = sel.l, g = sel.g, K = sel.K;
  const std::size_t h = q.dim(2), d_h = q.dim(3);
  const std::size_t S = mem.S, row_stride = g * d_h;
  o.resize({l, g, h, d_h});
  std::uint64_t loads = 0;

  std::vector<T> p(h * S);
  for (std::size_t t = 0; t < l; ++t) {
    for (std::size_t gr = 0; gr < g; ++gr) {
      const T* q_tg = &q.at(t, gr, 0, 0);
      T* o_tg = &o.at(t, gr, 0, 0);
      for (std::size_t k = 0; k < K; ++k) {
        const std::int32_t c = sel.sorted_indices.at(t, gr, k);
        if (c == kNoChunk) continue;
        HSALAB_CHECK(static_cast<std::size_t>(c) < mem.n_chunks, "hsa: chunk index out of range");
        const T w = sel.weights.at(t, gr, k);
        const T* kc = mem.k_chunk(static_cast<std::size_t>(c));
        const T* vc = mem.v_chunk(static_cast<std::size_t>(c));
        ++loads;
        token_chunk_probs(q_tg, kc, gr, h, d_h, S, g, p.data());
        for (std::size_t hd = 0; hd < h; ++hd) {
          const T* prow = p.data() + hd * S;
          T* orow = o_tg + hd * d_h;
          for (std::size_t c2 = 0; c2 < d_h; ++c2) {
            T acc = T(0);
            for (std::size_t s = 0; s < S; ++s) acc += prow[s] * vc[s * row_stride + gr * d_h + c2];
            orow[c2] += w * acc;
          }
        }
      }
    }
  }
  if (counters != nullptr) {
    counters->chunk_loads += loads;
    counters->bytes_loaded += loads * 2 * S * d_h * sizeof(T);
    counters->flops += loads * 4 * h * S * d_h;
  }
}

template <typename T>
void hsa_forward_blocked(const Tensor<T>& q, const ChunkMemory<T>& mem,
                         const SelectionResult<T>& sel, Tensor<T>& o, HsaCounters* counters) {
  check_shapes(q, mem, sel);
  const std::size_t l = sel.l, g = sel.g, K = sel.K;
  const std::size_t h = q.dim(2), d_h = q.dim(3);
  const std::size_t S = mem.S, row_stride = g * d_h;
  o.resize({l, g, h, d_h});

  std::atomic<std::uint64_t> loads{0}, flops{0};

  parallel_for(l * g, [&](std::size_t item) {
    const std::size_t t = item / g;
    const std::size_t gr = item % g;
    // Local scratch per work item: Q tile, probability tile, output
    // accumulator. One output store at the end.
    std::vector<T> q_local(h * d_h), p(h * S), acc(h * d_h, T(0));
    const T* q_tg = &q.at(t, gr, 0, 0);
    std::copy(q_tg, q_tg + h * d_h, q_local.begin());
    std::uint64_t local_loads = 0;

    for (std::size_t k = 0; k < K; ++k) {
      const std::int32_t c = sel.sorted_indices.at(t, gr, k);
      if (c == kNoChunk) continue;  // skipped before any load
      HSALAB_CHECK(static_cast<std::size_t>(c) < mem.n_chunks, "hsa: chunk index out of range");
      const T w = sel.weights.at(t, gr, k);
      const T* kc = mem.k_chunk(static_cast<std::size_t>(c));
      const T* vc = mem.v_chunk(static_cast<std::size_t>(c));
      ++local_loads;
      token_chunk_probs(q_local.data(), kc, gr, h, d_h, S, g, p.data());
      for (std::size_t hd = 0; hd < h; ++hd) {
        const T* prow = p.data() + hd * S;
        T* arow = acc.data() + hd * d_h;
        for (std::size_t c2 = 0; c2 < d_h; ++c2) {
          T sum = T(0);
          for (std::size_t s = 0; s < S; ++s) sum += prow[s] * vc[s * row_stride + gr * d_h + c2];
          arow[c2] += w * sum;
        }
      }
    }
    std::copy(acc.begin(), acc.end(), &o.at(t, gr, 0, 0));
    if (local_loads > 0 && counters != nullptr) {
      loads.fetch_add(local_loads, std::memory_order_relaxed);
      flops.fetch_add(local_loads * 4 * h * S * d_h, std::memory_order_relaxed);
    }
  });

  if (counters != nullptr) {
    counters->chunk_loads += loads.load();
    counters->bytes_loaded += loads.load() * 2 * S * d_h * sizeof(T);
    counters->flops += flops.load();
  }
}

template <typename T>
void hsa_backward_qw(const Tensor<T>& d_o, const Tensor<T>& q, const ChunkMemory<T>& mem,
                     const SelectionResult<T>& sel, Tensor<T>& d_q, Tensor<T>& d_w, Tensor<T>& d_ws,
                     HsaCounters* counters) {
  check_shapes(q, mem, sel);
  HSALAB_CHECK(d_o.same_shape(q), "hsa backward: dO shape mismatch");
  const std::size_t l = sel.l, g = sel.g, K = sel.K;
  const std::size_t h = q.dim(2), d_h = q.dim(3);
  const std::size_t S = mem.S, row_stride = g * d_h;
  const T scale = T(1) / std::sqrt(static_cast<T>(d_h));

  d_q.resize({l, g, h, d_h});
  d_w.resize({l, g, K});
  d_ws.resize({l, g, K, h});

  std::atomic<std::uint64_t> loads{0};

  parallel_for(l * g, [&](std::size_t item) {
    const std::size_t t = item / g;
    const std::size_t gr = item % g;
    std::vector<T> p(h * S), o_prime(h * d_h), ds(h * S), dq_acc(h * d_h, T(0));
    const T* q_tg = &q.at(t, gr, 0, 0);
    const T* do_tg = &d_o.at(t, gr, 0, 0);
    std::uint64_t local_loads = 0;

    for (std::size_t k = 0; k < K; ++k) {
      const std::int32_t c = sel.sorted_indices.at(t, gr, k);
      if (c == kNoChunk) continue;
      const T w = sel.weights.at(t, gr, k);
      const T* kc = mem.k_chunk(static_cast<std::size_t>(c));
      const T* vc = mem.v_chunk(static_cast<std::size_t>(c));
      ++local_loads;

      token_chunk_probs(q_tg, kc, gr, h, d_h, S, g, p.data());

      // O' = P V', D' = rowsum(O' o dO'), dw = rowsum(D')
      T dw_acc = T(0);
      for (std::size_t hd = 0; hd < h; ++hd) {
        const T* prow = p.data() + hd * S;
        T* orow = o_prime.data() + hd * d_h;
        const T* dorow = do_tg + hd * d_h;
        T dval = T(0);
        for (std::size_t c2 = 0; c2 < d_h; ++c2) {
          T acc = T(0);
          for (std::size_t s = 0; s < S; ++s) acc += prow[s] * vc[s * row_stride + gr * d_h + c2];
          orow[c2] = acc;
          dval += acc * dorow[c2];
        }
        d_ws.at(t, gr, k, hd) = dval;  // written exactly once per (t,k,head)
        dw_acc += dval;
      }
      d_w.at(t, gr, k) = dw_acc;

      // dP = dO' V'^T ; dS = w P o (dP - D')
      for (std::size_t hd = 0; hd < h; ++hd) {
        const T* dorow = do_tg + hd * d_h;
        const T dval = d_ws.at(t, gr, k, hd);
        const T* prow = p.data() + hd * S;
        T* dsrow = ds.data() + hd * S;
        for (std::size_t s = 0; s < S; ++s) {
          const T* vrow = vc + s * row_stride + gr * d_h;
          T acc = T(0);
          for (std::size_t c2 = 0; c2 < d_h; ++c2) acc += dorow[c2] * vrow[c2];
          dsrow[s] = w * prow[s] * (acc - dval);
        }
      }

      // dQ += dS K' (logit scale folded in)
      for (std::size_t hd = 0; hd < h; ++hd) {
        const T* dsrow = ds.data() + hd * S;
        T* dqrow = dq_acc.data() + hd * d_h;
        for (std::size_t s = 0; s < S; ++s) {
          const T dl = dsrow[s] * scale;
          const T* krow = kc + s * row_stride + gr * d_h;
          for (std::size_t c2 = 0; c2 < d_h; ++c2) dqrow[c2] += dl * krow[c2];
        }
      }
    }
    std::copy(dq_acc.begin(), dq_acc.end(), &d_q.at(t, gr, 0, 0));
    if (local_loads > 0 && counters != nullptr)
      loads.fetch_add(local_loads, std::memory_order_relaxed);
  });

  if (counters != nullptr) {
    counters->chunk_loads += loads.load();
    counters->bytes_loaded += loads.load() * 2 * S * d_h * sizeof(T);
    counters->flops += loads.load() * 8 * h * S * d_h;
  }
}

template <typename T>
void hsa_backward_kv(const Tensor<T>& d_o, const Tensor<T>& q, const ChunkMemory<T>& mem,
                     const SelectionResult<T>& sel, const InverseSelectionMaps& maps,
                     const Tensor<T>& d_ws, Tensor<T>& d_k_attn, Tensor<T>& d_v_attn,
                     HsaCounters* counters) {
  check_shapes(q, mem, sel);
  HSALAB_CHECK(d_ws.rank() == 4 && d_ws.dim(0) == sel.l && d_ws.dim(3) == q.dim(2),
               "hsa backward: D workspace missing or mis-shaped");
  HSALAB_CHECK(maps.l == sel.l && maps.g == sel.g && maps.n_chunks == sel.n_chunks,
               "hsa backward: inverse maps mismatch");
  const std::size_t l = sel.l, g = sel.g;
  const std::size_t h = q.dim(2), d_h = q.dim(3);
  const std::size_t S = mem.S, row_stride = g * d_h;
  const T scale = T(1) / std::sqrt(static_cast<T>(d_h));

  d_k_attn.resize({mem.n_chunks, S, row_stride});
  d_v_attn.resize({mem.n_chunks, S, row_stride});
  std::atomic<std::uint64_t> loads{0};

  parallel_for(mem.n_chunks, [&](std::size_t i) {
    const T* kc = mem.k_chunk(i);
    const T* vc = mem.v_chunk(i);
    T* dk = d_k_attn.data() + i * S * row_stride;
    T* dv = d_v_attn.data() + i * S * row_stride;
    std::vector<T> p(h * S), ds(h * S);
    std::uint64_t local_loads = 0;

    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t gr = 0; gr < g; ++gr) {
        if (!maps.M.at(t, gr, i)) continue;
        const std::int32_t k = maps.R.at(t, gr, i);
        HSALAB_CHECK(k >= 0 && static_cast<std::size_t>(k) < sel.K &&
                         sel.sorted_indices.at(t, gr, static_cast<std::size_t>(k)) ==
                             static_cast<std::int32_t>(i),
                     "hsa backward: inconsistent (M,R) maps");
        const T w = sel.weights.at(t, gr, static_cast<std::size_t>(k));
        const T* q_tg = &q.at(t, gr, 0, 0);
        const T* do_tg = &d_o.at(t, gr, 0, 0);
        ++local_loads;

        token_chunk_probs(q_tg, kc, gr, h, d_h, S, g, p.data());

        // dV_i += w P^T dO'
        for (std::size_t hd = 0; hd < h; ++hd) {
          const T* prow = p.data() + hd * S;
          const T* dorow = do_tg + hd * d_h;
          for (std::size_t s = 0; s < S; ++s) {
            T* dvrow = dv + s * row_stride + gr * d_h;
            const T wp = w * prow[s];
            for (std::size_t c2 = 0; c2 < d_h; ++c2) dvrow[c2] += wp * dorow[c2];
          }
        }

        // dS = w P o (dP - D'), dK_i += dS^T Q' (scaled)
        for (std::size_t hd = 0; hd < h; ++hd) {
          const T* prow = p.data() + hd * S;
          const T* dorow = do_tg + hd * d_h;
          const T dval = d_ws.at(t, gr, static_cast<std::size_t>(k), hd);
          T* dsrow = ds.data() + hd * S;
          for (std::size_t s = 0; s < S; ++s) {
            const T* vrow = vc + s * row_stride + gr * d_h;
            T acc = T(0);
            for (std::size_t c2 = 0; c2 < d_h; ++c2) acc += dorow[c2] * vrow[c2];
            dsrow[s] = w * prow[s] * (acc - dval);
          }
        }
        for (std::size_t hd = 0; hd < h; ++hd) {
          const T* dsrow = ds.data() + hd * S;
          const T* qrow = q_tg + hd * d_h;
          for (std::size_t s = 0; s < S; ++s) {
            T* dkrow = dk + s * row_stride + gr * d_h;
            const T dl = dsrow[s] * scale;
            for (std::size_t c2 = 0; c2 < d_h; ++c2) dkrow[c2] += dl * qrow[c2];
          }
        }
      }
    }
    if (local_loads > 0 && counters != nullptr)
      loads.fetch_add(local_loads, std::memory_order_relaxed);
  });

  if (counters != nullptr) {
    counters->chunk_loads += loads.load();
    counters->bytes_loaded += loads.load() * 2 * h * d_h * sizeof(T);
    counters->flops += loads.load() * 10 * h * S * d_h;
  }
}

#define HSALAB_INSTANTIATE_HSA(T)                                                               \
  template void token_chunk_probs<T>(const T*, const T*, std::size_t, std::size_t, std::size_t, \
                                     std::size_t, std::size_t, T*);                             \
  template void hsa_forward_naive<T>(const Tensor<T>&, const ChunkMemory<T>&,                   \
                                     const SelectionResult<T>&, Tensor<T>&, HsaCounters*);      \
  template void hsa_forward_blocked<T>(const Tensor<T>&, const ChunkMemory<T>&,                 \
                                       const SelectionResult<T>&, Tensor<T>&, HsaCounters*);    \
  template void hsa_backward_qw<T>(const Tensor<T>&, const Tensor<T>&, const ChunkMemory<T>&,   \
                                   const SelectionResult<T>&, Tensor<T>&, Tensor<T>&,           \
                                   Tensor<T>&, HsaCounters*);                                   \
  template void hsa_backward_kv<T>(const Tensor<T>&, const Tensor<T>&, const ChunkMemory<T>&,   \
                                   const SelectionResult<T>&, const InverseSelectionMaps&,      \
                                   const Tensor<T>&, Tensor<T>&, Tensor<T>&, HsaCounters*);

HSALAB_INSTANTIATE_HSA(float)
HSALAB_INSTANTIATE_HSA(double)
#undef HSALAB_INSTANTIATE_HSA

}  // namespace hsalab
