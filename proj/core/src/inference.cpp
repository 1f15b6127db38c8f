#include "hsalab/inference.hpp"

#include <algorithm>
#include <cmath>

#include "hsalab/ops.hpp"

namespace hsalab {

namespace {
constexpr char kFileMagic[8] = {'H', 'S', 'A', 'K', 'V', '1', 0, 0};

struct FileHeader {
  char magic[8];
  std::uint32_t S = 0, g = 0, d_h = 0, precision = 0;
  std::uint64_t n_chunks = 0;
};
}  // namespace

template <typename T>
TieredKVStore<T>::TieredKVStore(StoreBackend backend, std::size_t S, std::size_t g,
                                std::size_t d_h, std::size_t d, const std::string& file_path)
    : backend_(backend), S_(S), g_(g), d_h_(d_h), d_(d), file_path_(file_path) {
  if (backend_ == StoreBackend::offload_file) {
    HSALAB_CHECK_INPUT(!file_path_.empty(), "file-backed store needs a path");
    file_.open(file_path_, std::ios::binary | std::ios::in | std::ios::out | std::ios::trunc);
    if (!file_) throw StoreError("cannot open store file '" + file_path_ + "'");
    FileHeader hd;
    std::copy(std::begin(kFileMagic), std::end(kFileMagic), hd.magic);
    hd.S = static_cast<std::uint32_t>(S_);
    hd.g = static_cast<std::uint32_t>(g_);
    hd.d_h = static_cast<std::uint32_t>(d_h_);
    hd.precision = static_cast<std::uint32_t>(sizeof(T));
    hd.n_chunks = 0;
    file_.write(reinterpret_cast<const char*>(&hd), sizeof(hd));
    file_.flush();
  }
}

template <typename T>
void TieredKVStore<T>::commit_chunk(const T* k_block, const T* v_block, const T* k_slc_row,
                                    const T* e_bar_row) {
  const std::size_t elems = chunk_elems();
  k_slc_.insert(k_slc_.end(), k_slc_row, k_slc_row + d_);
  e_bar_.insert(e_bar_.end(), e_bar_row, e_bar_row + d_);
  switch (backend_) {
    case StoreBackend::resident:
    case StoreBackend::offload_memory:
      mem_k_.emplace_back(k_block, k_block + elems);
      mem_v_.emplace_back(v_block, v_block + elems);
      break;
    case StoreBackend::offload_file: {
      // Chunk id -> offset is pure arithmetic: header + id * 2 * block bytes.
      file_.seekp(0, std::ios::end);
      file_.write(reinterpret_cast<const char*>(k_block),
                  static_cast<std::streamsize>(elems * sizeof(T)));
      file_.write(reinterpret_cast<const char*>(v_block),
                  static_cast<std::streamsize>(elems * sizeof(T)));
      ++n_chunks_;
      file_.seekp(offsetof(FileHeader, n_chunks), std::ios::beg);
      const std::uint64_t n64 = n_chunks_;
      file_.write(reinterpret_cast<const char*>(&n64), sizeof(n64));
      file_.flush();
      if (!file_) throw StoreError("store file write failed");
      return;
    }
  }
  ++n_chunks_;
}

template <typename T>
void TieredKVStore<T>::stage(const std::vector<std::int32_t>& chunk_ids) {
  clear_staging();
  const std::size_t elems = chunk_elems();
  counters_.staged_chunks_last_step = chunk_ids.size();
  counters_.staged_elems_last_step = chunk_ids.size() * elems;
  if (backend_ == StoreBackend::resident) return;  // nothing moves

  for (std::int32_t id : chunk_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n_chunks_) {
      throw StoreError("stage: chunk " + std::to_string(id) + " was never committed");
    }
    Staged st;
    st.id = id;
    st.k.resize(elems);
    st.v.resize(elems);
    if (backend_ == StoreBackend::offload_memory) {
      std::copy(mem_k_[id].begin(), mem_k_[id].end(), st.k.begin());
      std::copy(mem_v_[id].begin(), mem_v_[id].end(), st.v.begin());
    } else {
      const std::uint64_t base =
          sizeof(FileHeader) + static_cast<std::uint64_t>(id) * 2 * elems * sizeof(T);
      file_.seekg(static_cast<std::streamoff>(base), std::ios::beg);
      file_.read(reinterpret_cast<char*>(st.k.data()),
                 static_cast<std::streamsize>(elems * sizeof(T)));
      file_.read(reinterpret_cast<char*>(st.v.data()),
                 static_cast<std::streamsize>(elems * sizeof(T)));
      if (!file_) throw StoreError("store file read failed");
    }
    counters_.bytes_fetched += 2 * elems * sizeof(T);
    ++counters_.fetch_ops;
    staging_.push_back(std::move(st));
  }
}

template <typename T>
void TieredKVStore<T>::clear_staging() {
  staging_.clear();
}

template <typename T>
const typename TieredKVStore<T>::Staged& TieredKVStore<T>::find_staged(
    std::int32_t chunk_id) const {
  for (const auto& st : staging_) {
    if (st.id == chunk_id) return st;
  }
  throw StoreError("chunk " + std::to_string(chunk_id) + " is not staged");
}

template <typename T>
const T* TieredKVStore<T>::staged_k(std::int32_t chunk_id) const {
  if (backend_ == StoreBackend::resident) {
    if (chunk_id < 0 || static_cast<std::size_t>(chunk_id) >= n_chunks_) {
      throw StoreError("chunk " + std::to_string(chunk_id) + " was never committed");
    }
    return mem_k_[static_cast<std::size_t>(chunk_id)].data();
  }
  return find_staged(chunk_id).k.data();
}

template <typename T>
const T* TieredKVStore<T>::staged_v(std::int32_t chunk_id) const {
  if (backend_ == StoreBackend::resident) {
    if (chunk_id < 0 || static_cast<std::size_t>(chunk_id) >= n_chunks_) {
      throw StoreError("chunk " + std::to_string(chunk_id) + " was never committed");
    }
    return mem_v_[static_cast<std::size_t>(chunk_id)].data();
  }
  return find_staged(chunk_id).v.data();
}

template <typename T>
std::uint64_t TieredKVStore<T>::offloaded_bytes() const {
  if (backend_ == StoreBackend::resident) return 0;
  return static_cast<std::uint64_t>(n_chunks_) * 2 * chunk_elems() * sizeof(T);
}

template <typename T>
DecodeSession<T>::DecodeSession(const RambaModel<T>& model, StoreBackend backend,
                                const std::string& file_path)
    : model_(&model),
      store_(backend, model.cfg().S, model.cfg().g, model.cfg().d_h, model.cfg().d, file_path) {
  const auto& cfg = model.cfg();
  ring_.resize({cfg.S, cfg.d});
  states_.layers.resize(cfg.L);
}

template <typename T>
void DecodeSession<T>::prefill(std::span<const std::int32_t> prompt) {
  if (prompt.empty()) return;
  const auto& cfg = model_->cfg();
  MemoryPlan<T> plan;  // inference carries state, no internal boundaries
  ChunkMemory<T> mem;
  Tensor<T> h_mid;
  model_->forward(prompt, plan, nullptr, logits_, &states_, &mem, &h_mid,
                  /*logits_last_only=*/true);

  for (std::size_t i = 0; i < mem.n_chunks; ++i) {
    store_.commit_chunk(mem.k_chunk(i), mem.v_chunk(i), mem.K_slc.data() + i * cfg.d,
                        mem.E_bar.data() + i * cfg.d);
  }
  const std::size_t tail_start = mem.n_chunks * cfg.S;
  ring_fill_ = prompt.size() - tail_start;
  for (std::size_t r = 0; r < ring_fill_; ++r) {
    const T* src = h_mid.data() + (tail_start + r) * cfg.d;
    std::copy(src, src + cfg.d, ring_.data() + r * cfg.d);
  }
  position_ = prompt.size();
}

template <typename T>
void DecodeSession<T>::maybe_commit_ring() {
  const auto& cfg = model_->cfg();
  if (ring_fill_ < cfg.S) return;
  const auto& p = model_->params();
  Tensor<T> encoded;
  encode_chunk(p.encoder, static_cast<const T*>(ring_.data()), encoded,
               static_cast<EncoderChunkTape<T>*>(nullptr));
  Tensor<T> e_bar({cfg.d});
  const T inv_s = T(1) / static_cast<T>(cfg.S);
  for (std::size_t s = 0; s < cfg.S; ++s)
    for (std::size_t j = 0; j < cfg.d; ++j) e_bar[j] += encoded.at(s, j);
  for (std::size_t j = 0; j < cfg.d; ++j) e_bar[j] *= inv_s;
  const std::size_t kv_width = cfg.g * cfg.d_h;
  Tensor<T> k_block({cfg.S, kv_width}), v_block({cfg.S, kv_width}), k_slc({cfg.d});
  gemm_nt(encoded.data(), p.w_k.data(), k_block.data(), cfg.S, kv_width, cfg.d);
  gemm_nt(encoded.data(), p.w_v.data(), v_block.data(), cfg.S, kv_width, cfg.d);
  gemm_nt(e_bar.data(), p.selection.w_k_slc.data(), k_slc.data(), 1, cfg.d, cfg.d);
  store_.commit_chunk(k_block.data(), v_block.data(), k_slc.data(), e_bar.data());
  ring_fill_ = 0;
}

template <typename T>
const Tensor<T>& DecodeSession<T>::decode_step(std::int32_t token) {
  step_token(token);
  return logits_;
}

template <typename T>
void DecodeSession<T>::step_token(std::int32_t token) {
  const auto& cfg = model_->cfg();
  const auto& p = model_->params();
  const std::size_t d = cfg.d;
  HSALAB_CHECK_INPUT(token >= 0 && static_cast<std::size_t>(token) < cfg.vocab,
                     "decode: token id out of range");

  Tensor<T> h({1, d});
  {
    const T* e = p.embedding.data() + static_cast<std::size_t>(token) * d;
    std::copy(e, e + d, h.data());
  }

  // Lower decoder, one step per layer.
  for (std::size_t li = 0; li < cfg.lower_layers(); ++li) {
    Tensor<T> y, s_final;
    recurrent_forward(p.lower[li], h, states_.layers[li], StateInjections<T>{}, y, s_final,
                      static_cast<RecurrentTape<T>*>(nullptr));
    h = std::move(y);
    states_.layers[li] = std::move(s_final);
  }

  // The in-progress chunk is encoded and committed exactly when it fills.
  std::copy(h.data(), h.data() + d, ring_.data() + ring_fill_ * d);
  ++ring_fill_;
  maybe_commit_ring();

  // One shared selection per step.
  const std::size_t t = position_;
  const std::size_t n = store_.n_chunks();
  const std::size_t g = cfg.g, d_g = cfg.d_g(), K = cfg.K;
  Tensor<T> normed({1, d}), q_row({1, d});
  rmsnorm<T>(h.row(0), p.selection.norm_gain.flat(), static_cast<T>(kRmsNormEps), normed.row(0));
  linear(normed, p.selection.w_q_slc, q_row);
  ++selection_events_;

  std::vector<T> scores(g * std::max<std::size_t>(n, 1),
                        -std::numeric_limits<T>::infinity());
  std::vector<std::int32_t> idx(g * K, kNoChunk), sorted(g * K, kNoChunk);
  std::vector<T> weights(g * K, T(0));
  if (n > 0) {
    score_chunks_row(q_row.data(), store_.resident_k_slc(), n, t, cfg.S, g, d_g, scores.data());
    for (std::size_t gr = 0; gr < g; ++gr) {
      select_topk_row(scores.data() + gr * n, n, K, idx.data() + gr * K);
      sort_indices_desc(idx.data() + gr * K, K, sorted.data() + gr * K);
      stick_breaking_row(scores.data() + gr * n, sorted.data() + gr * K, K,
                         weights.data() + gr * K);
    }
  }

  // Stage each distinct selected chunk once, regardless of how many groups
  // picked it.
  std::vector<std::int32_t> distinct;
  for (std::size_t gr = 0; gr < g; ++gr)
    for (std::size_t k = 0; k < K; ++k)
      if (sorted[gr * K + k] != kNoChunk) distinct.push_back(sorted[gr * K + k]);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  store_.stage(distinct);
  ++staging_events_;

  // Upper decoder.
  std::size_t ui = 0;
  for (std::size_t b = 0; b < cfg.n_hsa_layers(); ++b) {
    for (std::size_t j = 0; j < cfg.G; ++j, ++ui) {
      const std::size_t layer = cfg.lower_layers() + ui;
      Tensor<T> y, s_final;
      recurrent_forward(p.upper[ui], h, states_.layers[layer], StateInjections<T>{}, y, s_final,
                        static_cast<RecurrentTape<T>*>(nullptr));
      h = std::move(y);
      states_.layers[layer] = std::move(s_final);
    }
    if (n == 0) continue;
    const auto& hp = p.hsa[b];
    Tensor<T> hn({1, d}), q({1, d});
    rmsnorm<T>(h.row(0), hp.norm_gain.flat(), static_cast<T>(kRmsNormEps), hn.row(0));
    linear(hn, hp.w_q, q);
    Tensor<T> o({1, d});
    std::vector<T> probs(cfg.h * cfg.S);
    for (std::size_t gr = 0; gr < g; ++gr) {
      const T* qg = q.data() + gr * d_g;
      T* og = o.data() + gr * d_g;
      for (std::size_t k = 0; k < K; ++k) {
        const std::int32_t c = sorted[gr * K + k];
        if (c == kNoChunk) continue;
        const T w = weights[gr * K + k];
        const T* kblk = store_.staged_k(c);
        const T* vblk = store_.staged_v(c);
        token_chunk_probs(qg, kblk, gr, cfg.h, cfg.d_h, cfg.S, g, probs.data());
        for (std::size_t hd = 0; hd < cfg.h; ++hd) {
          const T* prow = probs.data() + hd * cfg.S;
          T* orow = og + hd * cfg.d_h;
          for (std::size_t c2 = 0; c2 < cfg.d_h; ++c2) {
            T acc = T(0);
            for (std::size_t s = 0; s < cfg.S; ++s)
              acc += prow[s] * vblk[s * g * cfg.d_h + gr * cfg.d_h + c2];
            orow[c2] += w * acc;
          }
        }
      }
    }
    linear(o, hp.w_out, h, /*accumulate=*/true);
  }

  Tensor<T> h_final({1, d});
  rmsnorm<T>(h.row(0), p.final_gain.flat(), static_cast<T>(kRmsNormEps), h_final.row(0));
  logits_.resize({1, cfg.vocab});
  gemm_nt(h_final.data(), p.embedding.data(), logits_.data(), 1, cfg.vocab, d);

  store_.clear_staging();
  ++position_;
}

template <typename T>
std::int32_t DecodeSession<T>::greedy_pick() const {
  HSALAB_CHECK(!logits_.empty(), "greedy_pick: no logits yet (prefill or decode first)");
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits_.size(); ++j)
    if (logits_[j] > logits_[best]) best = j;
  return static_cast<std::int32_t>(best);
}

template <typename T>
std::int32_t DecodeSession<T>::sample_pick(double temperature, Rng& rng) const {
  HSALAB_CHECK(!logits_.empty(), "sample_pick: no logits yet");
  if (temperature <= 0.0) return greedy_pick();
  const std::size_t v = logits_.size();
  std::vector<T> probs(v);
  std::vector<T> scaled(v);
  for (std::size_t j = 0; j < v; ++j)
    scaled[j] = static_cast<T>(static_cast<double>(logits_[j]) / temperature);
  softmax<T>(std::span<const T>(scaled.data(), v), std::span<T>(probs.data(), v));
  double r = rng.uniform();
  double acc = 0.0;
  for (std::size_t j = 0; j < v; ++j) {
    acc += static_cast<double>(probs[j]);
    if (r < acc) return static_cast<std::int32_t>(j);
  }
  return static_cast<std::int32_t>(v - 1);
}

template <typename T>
MemoryReport DecodeSession<T>::memory_report() const {
  const auto& cfg = model_->cfg();
  MemoryReport r;
  r.resident_kslc_bytes = store_.resident_kslc_bytes();
  r.resident_ebar_bytes = store_.resident_ebar_bytes();
  r.resident_state_bytes = cfg.L * cfg.d * sizeof(T);
  r.resident_bytes = r.resident_kslc_bytes + r.resident_ebar_bytes + r.resident_state_bytes;
  r.offloaded_bytes = store_.offloaded_bytes();
  r.bytes_fetched = store_.counters().bytes_fetched;
  r.fetches = store_.counters().fetch_ops;
  return r;
}

template <typename T>
std::vector<std::int32_t> decode_greedy(DecodeSession<T>& session, std::size_t n) {
  std::vector<std::int32_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t tok = session.greedy_pick();
    out.push_back(tok);
    session.decode_step(tok);
  }
  return out;
}

#define HSALAB_INSTANTIATE_INFER(T)  \
  template class TieredKVStore<T>;   \
  template class DecodeSession<T>;   \
  template std::vector<std::int32_t> decode_greedy<T>(DecodeSession<T>&, std::size_t);

HSALAB_INSTANTIATE_INFER(float)
HSALAB_INSTANTIATE_INFER(double)
#undef HSALAB_INSTANTIATE_INFER

}  // namespace hsalab
