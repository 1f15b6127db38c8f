#include "hsalab/model.hpp"

#include <chrono>
#include <cmath>

#include "hsalab/ops.hpp"
#include "hsalab/thread_pool.hpp"

namespace hsalab {

template <typename T>
void HsaLayerParams<T>::init(std::size_t d, Rng& rng) {
  norm_gain.resize({d});
  norm_gain.fill(T(1));
  w_q.resize({d, d});
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (auto& v : w_q.flat()) v = static_cast<T>(rng.normal()) * scale;
  // w_out gets the same init as the other projections. A zero init would be
  // the safer residual-stability choice, but it also gates every gradient
  // into the attention, selection and encoder paths by |w_out|, which
  // measurably stalls retrieval learning by >3x on the synthetic tasks.
  w_out.resize({d, d});
  for (auto& v : w_out.flat()) v = static_cast<T>(rng.normal()) * scale;
}

template <typename T>
void HsaLayerParams<T>::visit(const std::string& prefix,
                              const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn(prefix + "norm_gain", norm_gain);
  fn(prefix + "w_q", w_q);
  fn(prefix + "w_out", w_out);
}

template <typename T>
void RambaParams<T>::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  cfg = config;
  embedding.resize({cfg.vocab, cfg.d});
  for (auto& v : embedding.flat()) v = static_cast<T>(rng.normal()) * T(0.02);
  lower.resize(cfg.lower_layers());
  upper.resize(cfg.upper_layers());
  for (auto& lp : lower) lp.init(cfg.d, rng);
  for (auto& lp : upper) lp.init(cfg.d, rng);
  encoder.init(cfg, rng);
  selection.init(cfg, rng);
  const std::size_t kv_width = cfg.g * cfg.d_h;
  const T scale = T(1) / std::sqrt(static_cast<T>(cfg.d));
  w_k.resize({kv_width, cfg.d});
  w_v.resize({kv_width, cfg.d});
  for (auto& v : w_k.flat()) v = static_cast<T>(rng.normal()) * scale;
  for (auto& v : w_v.flat()) v = static_cast<T>(rng.normal()) * scale;
  hsa.resize(cfg.n_hsa_layers());
  for (auto& hp : hsa) hp.init(cfg.d, rng);
  final_gain.resize({cfg.d});
  final_gain.fill(T(1));
}

template <typename T>
void RambaParams<T>::init_zero(const ModelConfig& config) {
  Rng dummy(0);
  init(config, dummy);
  zero_all();
}

template <typename T>
void RambaParams<T>::visit(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("embedding", embedding);
  for (std::size_t i = 0; i < lower.size(); ++i)
    lower[i].visit("lower." + std::to_string(i) + ".", fn);
  encoder.visit(fn);
  selection.visit(fn);
  fn("w_k", w_k);
  fn("w_v", w_v);
  for (std::size_t i = 0; i < hsa.size(); ++i) hsa[i].visit("hsa." + std::to_string(i) + ".", fn);
  for (std::size_t i = 0; i < upper.size(); ++i)
    upper[i].visit("upper." + std::to_string(i) + ".", fn);
  fn("final_gain", final_gain);
}

template <typename T>
void RambaParams<T>::visit_const(
    const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
  auto* self = const_cast<RambaParams<T>*>(this);
  self->visit([&](const std::string& name, Tensor<T>& t) { fn(name, t); });
}

template <typename T>
void RambaParams<T>::zero_all() {
  visit([](const std::string&, Tensor<T>& t) { t.set_zero(); });
}

template <typename T>
std::size_t RambaParams<T>::num_params() const {
  std::size_t n = 0;
  visit_const([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

namespace {

template <typename T>
std::vector<Tensor<T>*> collect_tensors(RambaParams<T>& p) {
  std::vector<Tensor<T>*> out;
  p.visit([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <typename T>
void add_params(RambaParams<T>& dst, RambaParams<T>& src) {
  auto d = collect_tensors(dst);
  auto s = collect_tensors(src);
  HSALAB_CHECK(d.size() == s.size(), "parameter sets diverge");
  for (std::size_t i = 0; i < d.size(); ++i) {
    HSALAB_CHECK(d[i]->size() == s[i]->size(), "parameter tensor shapes diverge");
    T* a = d[i]->data();
    const T* b = s[i]->data();
    for (std::size_t j = 0; j < d[i]->size(); ++j) a[j] += b[j];
  }
}

template <typename T>
StateInjections<T> injections_for_layer(const MemoryPlan<T>& plan, std::size_t layer,
                                        std::size_t l) {
  StateInjections<T> inj;
  if (plan.seg_len == 0 || !plan.replace_at_boundaries) return inj;
  std::size_t b = 1;
  for (std::size_t pos = plan.seg_len; pos < l; pos += plan.seg_len, ++b) {
    Tensor<T> st;
    if (b - 1 < plan.replacements.size() && !plan.replacements[b - 1].empty()) {
      st = plan.replacements[b - 1].layers[layer];
    }
    inj.emplace_back(pos, std::move(st));
  }
  return inj;
}

template <typename T>
Tensor<T> first_state_for_layer(const MemoryPlan<T>& plan, std::size_t layer) {
  if (plan.first.empty()) return Tensor<T>{};
  return plan.first.layers[layer];
}

}  // namespace

template <typename T>
void RambaModel<T>::forward(std::span<const std::int32_t> tokens, const MemoryPlan<T>& plan,
                            ModelTape<T>* tape, Tensor<T>& logits, StateSnapshot<T>* final_states,
                            ChunkMemory<T>* mem_out, Tensor<T>* h_mid_out,
                            bool logits_last_only) const {
  const ModelConfig& cfg = params_.cfg;
  const std::size_t l = tokens.size();
  const std::size_t d = cfg.d;
  HSALAB_CHECK_INPUT(l >= 1, "forward: empty token sequence");
  for (std::size_t t = 0; t < l; ++t) {
    HSALAB_CHECK_INPUT(tokens[t] >= 0 && static_cast<std::size_t>(tokens[t]) < cfg.vocab,
                       "forward: token id out of range");
  }

  Tensor<T> h({l, d});
  for (std::size_t t = 0; t < l; ++t) {
    const T* e = params_.embedding.data() + static_cast<std::size_t>(tokens[t]) * d;
    std::copy(e, e + d, h.data() + t * d);
  }

  StateSnapshot<T> finals;
  finals.layers.resize(cfg.L);
  if (tape) {
    tape->tokens.assign(tokens.begin(), tokens.end());
    tape->x_embed = h;
    tape->lower_tapes.resize(cfg.lower_layers());
    tape->upper_tapes.resize(cfg.upper_layers());
    tape->hsa_tapes.resize(cfg.n_hsa_layers());
  }

  // Lower decoder.
  for (std::size_t li = 0; li < cfg.lower_layers(); ++li) {
    Tensor<T> y;
    recurrent_forward(params_.lower[li], h, first_state_for_layer(plan, li),
                      injections_for_layer(plan, li, l), y, finals.layers[li],
                      tape ? &tape->lower_tapes[li] : nullptr);
    h = std::move(y);
  }

  Tensor<T> h_mid = h;  // feeds the encoder, the selection queries, and the upper decoder

  ChunkMemory<T> mem_local;
  ChunkMemory<T>& mem = tape ? tape->mem : (mem_out ? *mem_out : mem_local);
  encode_chunks(h_mid, cfg, params_.encoder, mem, tape ? &tape->enc_tapes : nullptr);
  build_memory(mem, params_.w_k, params_.w_v, params_.selection.w_k_slc);

  Tensor<T> q_slc, sel_normed;
  project_selection_queries(h_mid, params_.selection, q_slc, &sel_normed);
  SelectionResult<T> sel = select_all(q_slc, mem, cfg.K, cfg.S);

  if (tape) {
    tape->h_mid = std::move(h_mid);
    tape->sel_normed = std::move(sel_normed);
    tape->q_slc = std::move(q_slc);
    tape->maps = build_inverse_maps(sel);
    tape->sel = std::move(sel);
  }
  const SelectionResult<T>& selr = tape ? tape->sel : sel;

  // Upper decoder: blocks of G recurrent layers followed by one HSA layer.
  std::size_t ui = 0;
  for (std::size_t b = 0; b < cfg.n_hsa_layers(); ++b) {
    for (std::size_t j = 0; j < cfg.G; ++j, ++ui) {
      const std::size_t layer = cfg.lower_layers() + ui;
      Tensor<T> y;
      recurrent_forward(params_.upper[ui], h, first_state_for_layer(plan, layer),
                        injections_for_layer(plan, layer, l), y, finals.layers[layer],
                        tape ? &tape->upper_tapes[ui] : nullptr);
      h = std::move(y);
    }
    // With no selectable chunk the HSA layer contributes exactly zero; skip.
    if (mem.n_chunks == 0) continue;
    const auto& hp = params_.hsa[b];
    Tensor<T> normed({l, d});
    for (std::size_t t = 0; t < l; ++t) {
      rmsnorm<T>(h.row(t), hp.norm_gain.flat(), static_cast<T>(kRmsNormEps), normed.row(t));
    }
    Tensor<T> q({l, d});
    linear(normed, hp.w_q, q);
    q.reshape({l, cfg.g, cfg.h, cfg.d_h});
    Tensor<T> o;
    hsa_forward_blocked(q, mem, selr, o);
    if (tape) {
      auto& ht = tape->hsa_tapes[b];
      ht.h_in = h;
      ht.normed = std::move(normed);
      ht.q = q;
      ht.o = o;
    }
    o.reshape({l, d});
    linear(o, hp.w_out, h, /*accumulate=*/true);
  }

  if (tape) tape->h_last = h;
  Tensor<T> h_final({l, d});
  for (std::size_t t = 0; t < l; ++t) {
    rmsnorm<T>(h.row(t), params_.final_gain.flat(), static_cast<T>(kRmsNormEps), h_final.row(t));
  }

  if (logits_last_only) {
    logits.resize({1, cfg.vocab});
    gemm_nt(h_final.data() + (l - 1) * d, params_.embedding.data(), logits.data(), 1, cfg.vocab, d);
  } else {
    logits.resize({l, cfg.vocab});
    linear(h_final, params_.embedding, logits);
  }
  if (tape) tape->h_final = std::move(h_final);
  if (h_mid_out != nullptr) *h_mid_out = tape ? tape->h_mid : std::move(h_mid);
  if (final_states != nullptr) *final_states = std::move(finals);
}

template <typename T>
T RambaModel<T>::loss(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t l = logits.dim(0), vocab = logits.dim(1);
  HSALAB_CHECK_DIM(targets.size() == l, "loss: target length mismatch");
  T total = T(0);
  std::size_t count = 0;
  for (std::size_t t = 0; t < l; ++t) {
    const std::int32_t y = targets[t];
    if (y < 0) continue;
    HSALAB_CHECK_INPUT(static_cast<std::size_t>(y) < vocab, "loss: target id out of range");
    std::span<const T> row(logits.data() + t * vocab, vocab);
    total += log_sum_exp(row) - row[static_cast<std::size_t>(y)];
    ++count;
  }
  return count == 0 ? T(0) : total / static_cast<T>(count);
}

template <typename T>
void RambaModel<T>::loss_backward(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                  std::size_t total_count, Tensor<T>& d_logits) {
  const std::size_t l = logits.dim(0), vocab = logits.dim(1);
  d_logits.resize({l, vocab});
  if (total_count == 0) return;
  const T scale = T(1) / static_cast<T>(total_count);
  for (std::size_t t = 0; t < l; ++t) {
    const std::int32_t y = targets[t];
    if (y < 0) continue;
    std::span<const T> row(logits.data() + t * vocab, vocab);
    std::span<T> drow(d_logits.data() + t * vocab, vocab);
    softmax<T>(row, drow);
    for (std::size_t j = 0; j < vocab; ++j) drow[j] *= scale;
    drow[static_cast<std::size_t>(y)] -= scale;
  }
}

template <typename T>
void RambaModel<T>::backward(const ModelTape<T>& tape, const Tensor<T>& d_logits,
                             RambaParams<T>& grads) const {
  const ModelConfig& cfg = params_.cfg;
  const std::size_t l = tape.tokens.size();
  const std::size_t d = cfg.d;
  HSALAB_CHECK(!tape.h_final.empty(), "backward: missing tape");

  // Tied head: logits = h_final . E^T.
  Tensor<T> d_h_final({l, d});
  linear_backward_input(d_logits, params_.embedding, d_h_final, /*accumulate=*/false);
  linear_backward_weight(d_logits, tape.h_final, grads.embedding);

  Tensor<T> d_h({l, d});
  for (std::size_t t = 0; t < l; ++t) {
    rmsnorm_backward<T>(tape.h_last.row(t), params_.final_gain.flat(),
                        static_cast<T>(kRmsNormEps), d_h_final.row(t), d_h.row(t),
                        grads.final_gain.flat());
  }

  const ChunkMemory<T>& mem = tape.mem;
  const std::size_t n = mem.n_chunks;
  Tensor<T> d_w_total, d_k_attn_total, d_v_attn_total;
  if (n > 0) {
    d_w_total.resize({l, cfg.g, cfg.K});
    d_k_attn_total.resize({n, cfg.S, cfg.g * cfg.d_h});
    d_v_attn_total.resize({n, cfg.S, cfg.g * cfg.d_h});
  }

  // Upper decoder in reverse.
  std::size_t ui = cfg.upper_layers();
  for (std::size_t b = cfg.n_hsa_layers(); b-- > 0;) {
    if (n > 0) {
      const auto& ht = tape.hsa_tapes[b];
      const auto& hp = params_.hsa[b];
      Tensor<T> d_o({l, d});
      linear_backward_input(d_h, hp.w_out, d_o, /*accumulate=*/false);
      Tensor<T> o_flat = ht.o;
      o_flat.reshape({l, d});
      linear_backward_weight(d_h, o_flat, grads.hsa[b].w_out);

      d_o.reshape({l, cfg.g, cfg.h, cfg.d_h});
      Tensor<T> d_q, d_w_layer, d_ws;
      hsa_backward_qw(d_o, ht.q, mem, tape.sel, d_q, d_w_layer, d_ws);
      Tensor<T> d_k_layer, d_v_layer;
      hsa_backward_kv(d_o, ht.q, mem, tape.sel, tape.maps, d_ws, d_k_layer, d_v_layer);
      for (std::size_t i = 0; i < d_w_total.size(); ++i) d_w_total[i] += d_w_layer[i];
      for (std::size_t i = 0; i < d_k_attn_total.size(); ++i) {
        d_k_attn_total[i] += d_k_layer[i];
        d_v_attn_total[i] += d_v_layer[i];
      }

      d_q.reshape({l, d});
      Tensor<T> d_normed({l, d});
      linear_backward_input(d_q, hp.w_q, d_normed, /*accumulate=*/false);
      linear_backward_weight(d_q, ht.normed, grads.hsa[b].w_q);
      for (std::size_t t = 0; t < l; ++t) {
        rmsnorm_backward<T>(ht.h_in.row(t), hp.norm_gain.flat(), static_cast<T>(kRmsNormEps),
                            d_normed.row(t), d_h.row(t), grads.hsa[b].norm_gain.flat());
      }
    }
    for (std::size_t j = 0; j < cfg.G; ++j) {
      --ui;
      Tensor<T> d_x({l, d});
      recurrent_backward(params_.upper[ui], tape.upper_tapes[ui], d_h, d_x, grads.upper[ui],
                         static_cast<Tensor<T>*>(nullptr));
      d_h = std::move(d_x);
    }
  }

  // d_h now carries the gradient at H_mid from the upper-decoder path.
  if (n > 0) {
    // Stick-breaking backward: scatter d(weights) to selection scores.
    Tensor<T> d_scores({l, cfg.g, n});
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t gr = 0; gr < cfg.g; ++gr) {
        stick_breaking_backward_row<T>(&d_w_total.at(t, gr, 0), &tape.sel.scores.at(t, gr, 0),
                                       &tape.sel.sorted_indices.at(t, gr, 0), cfg.K,
                                       &d_scores.at(t, gr, 0));
      }
    }
    Tensor<T> d_k_slc({n, d});
    selection_backward(tape.h_mid, tape.sel_normed, tape.q_slc, mem, params_.selection, d_scores,
                       d_h, d_k_slc, grads.selection);

    Tensor<T> d_e({n, cfg.S, d});
    build_memory_backward(mem, params_.w_k, params_.w_v, params_.selection.w_k_slc,
                          d_k_attn_total, d_v_attn_total, d_k_slc, d_e, grads.w_k, grads.w_v,
                          grads.selection.w_k_slc);

    // Encoder backward per chunk. Per-chunk gradient buffers are reduced in
    // chunk order so the result is identical for any worker count.
    std::vector<EncoderParams<T>> enc_grads(n);
    for (auto& eg : enc_grads) {
      eg = grads.encoder;
      eg.zero();
    }
    std::vector<Tensor<T>> d_blocks(n);
    parallel_for(n, [&](std::size_t i) {
      Tensor<T> d_out({cfg.S, d});
      std::copy(d_e.data() + i * cfg.S * d, d_e.data() + (i + 1) * cfg.S * d, d_out.data());
      d_blocks[i].resize({cfg.S, d});
      encode_chunk_backward(params_.encoder, tape.enc_tapes[i], d_out, d_blocks[i], enc_grads[i]);
    });
    for (std::size_t i = 0; i < n; ++i) {
      grads.encoder.add_scaled(enc_grads[i], T(1));
      T* dst = d_h.data() + i * cfg.S * d;
      const T* src = d_blocks[i].data();
      for (std::size_t j = 0; j < cfg.S * d; ++j) dst[j] += src[j];
    }
  }

  // Lower decoder in reverse.
  for (std::size_t li = cfg.lower_layers(); li-- > 0;) {
    Tensor<T> d_x({l, d});
    recurrent_backward(params_.lower[li], tape.lower_tapes[li], d_h, d_x, grads.lower[li],
                       static_cast<Tensor<T>*>(nullptr));
    d_h = std::move(d_x);
  }

  // Embedding lookup scatter (plus the tied-head term already added above).
  for (std::size_t t = 0; t < l; ++t) {
    T* row = grads.embedding.data() + static_cast<std::size_t>(tape.tokens[t]) * d;
    const T* src = d_h.data() + t * d;
    for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
  }
}

template <typename T>
void RambaModel<T>::save_checkpoint(CheckpointWriter& w, const std::string& prefix) const {
  auto* self = const_cast<RambaModel<T>*>(this);
  self->params_.visit(
      [&](const std::string& name, Tensor<T>& t) { w.add(prefix + name, t); });
}

template <typename T>
void RambaModel<T>::load_checkpoint(const CheckpointReader& r, const std::string& prefix) {
  params_.visit([&](const std::string& name, Tensor<T>& t) {
    Tensor<T> loaded;
    r.read(prefix + name, loaded);
    HSALAB_CHECK(loaded.size() == t.size(), "checkpoint: shape mismatch for '" + name + "'");
    t = std::move(loaded);
  });
}

double lr_at(std::size_t step, const OptimConfig& optim, std::size_t warmup_steps) {
  if (step < warmup_steps) {
    return optim.lr_peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const std::size_t total = optim.total_steps > warmup_steps ? optim.total_steps : warmup_steps + 1;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total - warmup_steps);
  const double clamped = progress > 1.0 ? 1.0 : progress;
  const double pi = 3.14159265358979323846;
  return optim.lr_min + 0.5 * (optim.lr_peak - optim.lr_min) * (1.0 + std::cos(pi * clamped));
}

template <typename T>
void AdamW<T>::attach(RambaParams<T>& params) {
  order_ = collect_tensors(params);
  m_.clear();
  v_.clear();
  for (auto* t : order_) {
    m_.emplace_back(t->size(), 0.0);
    v_.emplace_back(t->size(), 0.0);
  }
  t_ = 0;
}

template <typename T>
void AdamW<T>::step(RambaParams<T>& params, RambaParams<T>& grads, double lr,
                    const OptimConfig& optim) {
  auto ps = collect_tensors(params);
  auto gs = collect_tensors(grads);
  HSALAB_CHECK(ps.size() == order_.size() && gs.size() == order_.size(),
               "optimizer: parameter set changed after attach");
  ++t_;
  const double bc1 = 1.0 - std::pow(optim.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(optim.beta2, static_cast<double>(t_));
  constexpr double eps = 1e-8;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor<T>& p = *ps[i];
    const Tensor<T>& g = *gs[i];
    const bool decay = p.rank() >= 2;
    std::vector<double>& m = m_[i];
    std::vector<double>& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = optim.beta1 * m[j] + (1.0 - optim.beta1) * gj;
      v[j] = optim.beta2 * v[j] + (1.0 - optim.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double upd = mhat / (std::sqrt(vhat) + eps);
      if (decay) upd += optim.weight_decay * static_cast<double>(p[j]);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * upd);
    }
  }
}

template <typename T>
void AdamW<T>::save(CheckpointWriter& w) const {
  w.add_scalar<std::uint64_t>("optim.t", static_cast<std::uint64_t>(t_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    w.add_vector("optim.m." + std::to_string(i), m_[i]);
    w.add_vector("optim.v." + std::to_string(i), v_[i]);
  }
}

template <typename T>
void AdamW<T>::load(const CheckpointReader& r, RambaParams<T>& params) {
  attach(params);
  t_ = static_cast<std::size_t>(r.read_scalar<std::uint64_t>("optim.t"));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    m_[i] = r.read_vector<double>("optim.m." + std::to_string(i));
    v_[i] = r.read_vector<double>("optim.v." + std::to_string(i));
    HSALAB_CHECK(m_[i].size() == order_[i]->size() && v_[i].size() == order_[i]->size(),
                 "optimizer: moment size mismatch on load");
  }
}

template <typename T>
Trainer<T>::Trainer(RambaModel<T>& model, const RunConfig& run, std::uint64_t seed)
    : model_(model),
      run_(run),
      seed_(seed),
      scheduler_(run.mode, run.model.seg_len, hash_mix(seed, 0x5c4edULL)) {
  run_.validate();
  opt_.attach(model_.params());
  lane_states_.resize(run_.optim.batch);
}

template <typename T>
TrainMetrics Trainer<T>::step(const BatchProvider& provider) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t B = run_.optim.batch;

  std::vector<TrainLane<T>> lanes(B);
  for (std::size_t lane = 0; lane < B; ++lane) lanes[lane] = provider(step_, lane);

  std::size_t total_count = 0, total_tokens = 0;
  for (const auto& lane : lanes) {
    total_tokens += lane.tokens.size();
    for (auto y : lane.targets)
      if (y >= 0) ++total_count;
  }
  HSALAB_CHECK(total_count > 0, "train_step: batch has no loss positions");

  // Lazily build reusable per-lane gradient buffers.
  if (lane_grads_.size() != B) {
    lane_grads_.resize(B);
    for (auto& g : lane_grads_) g.init_zero(run_.model);
    total_grads_.init_zero(run_.model);
  }

  std::vector<double> lane_loss_sums(B, 0.0);
  std::vector<StateSnapshot<T>> lane_finals(B);
  const std::size_t segs_per_lane =
      run_.mode == ResetMode::bptt_carry
          ? 1
          : std::max<std::size_t>(1, run_.task.context_len / run_.model.seg_len);
  std::vector<StateSnapshot<T>> segment_finals(B * segs_per_lane);

  parallel_for(B, [&](std::size_t lane) {
    lane_grads_[lane].zero_all();
    const MemoryPlan<T> plan =
        scheduler_.plan(step_, lane, lanes[lane].tokens.size(), lane_states_[lane]);
    ModelTape<T> tape;
    Tensor<T> logits;
    model_.forward(lanes[lane].tokens, plan, &tape, logits, &lane_finals[lane]);

    std::size_t lane_count = 0;
    for (auto y : lanes[lane].targets)
      if (y >= 0) ++lane_count;
    const T mean_loss = RambaModel<T>::loss(logits, lanes[lane].targets);
    lane_loss_sums[lane] = static_cast<double>(mean_loss) * static_cast<double>(lane_count);

    Tensor<T> d_logits;
    RambaModel<T>::loss_backward(logits, lanes[lane].targets, total_count, d_logits);
    model_.backward(tape, d_logits, lane_grads_[lane]);

    // Final recurrent state of every segment, snapshotted from the tapes.
    const std::size_t l = lanes[lane].tokens.size();
    const std::size_t seg = segs_per_lane == 1 ? l : run_.model.seg_len;
    for (std::size_t b = 0; b < segs_per_lane; ++b) {
      const std::size_t t_end = std::min(l, (b + 1) * seg) - 1;
      StateSnapshot<T>& snap = segment_finals[lane * segs_per_lane + b];
      snap.layers.resize(run_.model.L);
      for (std::size_t li = 0; li < run_.model.lower_layers(); ++li) {
        Tensor<T> st({run_.model.d});
        const auto& srow = tape.lower_tapes[li].s;
        std::copy(srow.data() + t_end * run_.model.d, srow.data() + (t_end + 1) * run_.model.d,
                  st.data());
        snap.layers[li] = std::move(st);
      }
      for (std::size_t uiu = 0; uiu < run_.model.upper_layers(); ++uiu) {
        Tensor<T> st({run_.model.d});
        const auto& srow = tape.upper_tapes[uiu].s;
        std::copy(srow.data() + t_end * run_.model.d, srow.data() + (t_end + 1) * run_.model.d,
                  st.data());
        snap.layers[run_.model.lower_layers() + uiu] = std::move(st);
      }
    }
  });

  // Deterministic reduction in lane order.
  total_grads_.zero_all();
  for (std::size_t lane = 0; lane < B; ++lane) add_params(total_grads_, lane_grads_[lane]);

  double loss_value = 0.0;
  for (double s : lane_loss_sums) loss_value += s;
  loss_value /= static_cast<double>(total_count);
  if (!std::isfinite(loss_value)) {
    throw ContractError("train_step: non-finite loss at step " + std::to_string(step_) +
                        " (lr=" + std::to_string(lr_at(step_, run_.optim, run_.warmup_steps())) +
                        ")");
  }

  double sq = 0.0;
  auto gs = collect_tensors(total_grads_);
  for (auto* t : gs)
    for (std::size_t j = 0; j < t->size(); ++j) {
      const double v = static_cast<double>((*t)[j]);
      sq += v * v;
    }
  const double grad_norm = std::sqrt(sq);
  if (run_.optim.clip > 0 && grad_norm > run_.optim.clip) {
    const T scale = static_cast<T>(run_.optim.clip / grad_norm);
    for (auto* t : gs)
      for (std::size_t j = 0; j < t->size(); ++j) (*t)[j] *= scale;
  }

  const double lr = lr_at(step_, run_.optim, run_.warmup_steps());
  opt_.step(model_.params(), total_grads_, lr, run_.optim);

  for (auto& snap : segment_finals) scheduler_.record_segment_final(std::move(snap));
  scheduler_.end_step();
  for (std::size_t lane = 0; lane < B; ++lane) lane_states_[lane] = std::move(lane_finals[lane]);

  TrainMetrics metrics;
  metrics.step = step_;
  metrics.loss = loss_value;
  metrics.lr = lr;
  metrics.grad_norm = grad_norm;
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  metrics.tokens_per_s = elapsed > 0 ? static_cast<double>(total_tokens) / elapsed : 0.0;
  ++step_;
  return metrics;
}

template <typename T>
void Trainer<T>::save(const std::string& path) const {
  CheckpointWriter w;
  const std::string cfg_text = serialize_run_config(run_);
  std::vector<std::uint8_t> cfg_bytes(cfg_text.begin(), cfg_text.end());
  w.add_vector("trainer.config", cfg_bytes);
  w.add_scalar<std::uint64_t>("trainer.step", static_cast<std::uint64_t>(step_));
  model_.save_checkpoint(w);
  opt_.save(w);
  for (std::size_t lane = 0; lane < lane_states_.size(); ++lane) {
    const auto& snap = lane_states_[lane];
    w.add_scalar<std::uint64_t>("trainer.lane." + std::to_string(lane) + ".n",
                                static_cast<std::uint64_t>(snap.layers.size()));
    for (std::size_t li = 0; li < snap.layers.size(); ++li) {
      w.add("trainer.lane." + std::to_string(lane) + "." + std::to_string(li), snap.layers[li]);
    }
  }
  const auto& pool = scheduler_.pool();
  w.add_scalar<std::uint64_t>("trainer.pool.n", static_cast<std::uint64_t>(pool.size()));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t li = 0; li < pool[i].layers.size(); ++li) {
      w.add("trainer.pool." + std::to_string(i) + "." + std::to_string(li), pool[i].layers[li]);
    }
  }
  w.write(path);
}

template <typename T>
void Trainer<T>::load(const std::string& path) {
  CheckpointReader r(path);
  const auto cfg_bytes = r.read_vector<std::uint8_t>("trainer.config");
  const std::string cfg_text(cfg_bytes.begin(), cfg_bytes.end());
  if (cfg_text != serialize_run_config(run_)) {
    throw ConfigError("resume: checkpoint config does not match the run config");
  }
  step_ = static_cast<std::size_t>(r.read_scalar<std::uint64_t>("trainer.step"));
  model_.load_checkpoint(r);
  opt_.load(r, model_.params());
  for (std::size_t lane = 0; lane < lane_states_.size(); ++lane) {
    const auto nlayers = r.read_scalar<std::uint64_t>("trainer.lane." + std::to_string(lane) + ".n");
    lane_states_[lane].layers.resize(nlayers);
    for (std::size_t li = 0; li < nlayers; ++li) {
      r.read("trainer.lane." + std::to_string(lane) + "." + std::to_string(li),
             lane_states_[lane].layers[li]);
    }
  }
  const auto pool_n = r.read_scalar<std::uint64_t>("trainer.pool.n");
  std::vector<StateSnapshot<T>> pool(pool_n);
  for (std::size_t i = 0; i < pool_n; ++i) {
    pool[i].layers.resize(run_.model.L);
    for (std::size_t li = 0; li < run_.model.L; ++li) {
      r.read("trainer.pool." + std::to_string(i) + "." + std::to_string(li), pool[i].layers[li]);
    }
  }
  scheduler_.set_pool(std::move(pool));
}

#define HSALAB_INSTANTIATE_MODEL(T)    \
  template struct HsaLayerParams<T>;   \
  template struct RambaParams<T>;      \
  template class RambaModel<T>;        \
  template class AdamW<T>;             \
  template class Trainer<T>;

HSALAB_INSTANTIATE_MODEL(float)
HSALAB_INSTANTIATE_MODEL(double)
#undef HSALAB_INSTANTIATE_MODEL

}  // namespace hsalab
