#include "hsalab/chunking.hpp"

#include <cmath>

#include "hsalab/thread_pool.hpp"

namespace hsalab {

template <typename T>
void EncoderParams<T>::init(const ModelConfig& cfg, Rng& rng) {
  d = cfg.d;
  S = cfg.S;
  hidden = cfg.mlp_hidden();
  n_heads = cfg.g * cfg.h;
  d_h = cfg.d_h;
  pos.resize({S, d});
  const T pos_scale = T(0.02);
  for (auto& v : pos.flat()) v = static_cast<T>(rng.normal()) * pos_scale;
  layers.resize(cfg.enc_layers);
  const T proj_scale = T(1) / std::sqrt(static_cast<T>(d));
  const T mlp_scale = T(1) / std::sqrt(static_cast<T>(hidden));
  for (auto& lp : layers) {
    lp.n1_gain = Tensor<T>({d});
    lp.n1_gain.fill(T(1));
    lp.n2_gain = Tensor<T>({d});
    lp.n2_gain.fill(T(1));
    for (Tensor<T>* w : {&lp.w_q, &lp.w_k, &lp.w_v, &lp.w_o}) {
      w->resize({d, d});
      for (auto& v : w->flat()) v = static_cast<T>(rng.normal()) * proj_scale;
    }
    lp.w1.resize({hidden, d});
    for (auto& v : lp.w1.flat()) v = static_cast<T>(rng.normal()) * proj_scale;
    lp.w2.resize({d, hidden});
    for (auto& v : lp.w2.flat()) v = static_cast<T>(rng.normal()) * mlp_scale;
  }
}

template <typename T>
void EncoderParams<T>::visit(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("enc.pos", pos);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "enc." + std::to_string(i) + ".";
    fn(p + "n1_gain", layers[i].n1_gain);
    fn(p + "w_q", layers[i].w_q);
    fn(p + "w_k", layers[i].w_k);
    fn(p + "w_v", layers[i].w_v);
    fn(p + "w_o", layers[i].w_o);
    fn(p + "n2_gain", layers[i].n2_gain);
    fn(p + "w1", layers[i].w1);
    fn(p + "w2", layers[i].w2);
  }
}

template <typename T>
void EncoderParams<T>::zero() {
  pos.set_zero();
  for (auto& lp : layers) {
    lp.n1_gain.set_zero();
    lp.w_q.set_zero();
    lp.w_k.set_zero();
    lp.w_v.set_zero();
    lp.w_o.set_zero();
    lp.n2_gain.set_zero();
    lp.w1.set_zero();
    lp.w2.set_zero();
  }
}

template <typename T>
void EncoderParams<T>::add_scaled(const EncoderParams<T>& other, T scale) {
  auto axpy = [scale](Tensor<T>& dst, const Tensor<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  };
  axpy(pos, other.pos);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    axpy(layers[i].n1_gain, other.layers[i].n1_gain);
    axpy(layers[i].w_q, other.layers[i].w_q);
    axpy(layers[i].w_k, other.layers[i].w_k);
    axpy(layers[i].w_v, other.layers[i].w_v);
    axpy(layers[i].n2_gain, other.layers[i].n2_gain);
    axpy(layers[i].w1, other.layers[i].w1);
    axpy(layers[i].w2, other.layers[i].w2);
    axpy(layers[i].w_o, other.layers[i].w_o);
  }
}

namespace {

// Bidirectional multi-head attention over the S positions of one chunk.
// No mask, logits scaled by 1/sqrt(d_h).
template <typename T>
void chunk_attention(std::size_t S, std::size_t d, std::size_t n_heads, std::size_t d_h,
                     const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>& p,
                     Tensor<T>& o_heads) {
  const T scale = T(1) / std::sqrt(static_cast<T>(d_h));
  std::vector<T> logits(S);
  for (std::size_t hd = 0; hd < n_heads; ++hd) {
    const std::size_t off = hd * d_h;
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t u = 0; u < S; ++u) {
        T acc = T(0);
        for (std::size_t c = 0; c < d_h; ++c) acc += q.at(s, off + c) * k.at(u, off + c);
        logits[u] = acc * scale;
      }
      std::span<T> prow(&p.at(hd, s, 0), S);
      softmax<T>(std::span<const T>(logits.data(), S), prow);
      for (std::size_t c = 0; c < d_h; ++c) {
        T acc = T(0);
        for (std::size_t u = 0; u < S; ++u) acc += prow[u] * v.at(u, off + c);
        o_heads.at(s, off + c) = acc;
      }
    }
  }
  (void)d;
}

}  // namespace

template <typename T>
void encode_chunk(const EncoderParams<T>& enc, const T* block, Tensor<T>& out,
                  std::type_identity_t<EncoderChunkTape<T>*> tape) {
  const std::size_t S = enc.S, d = enc.d;
  Tensor<T> x({S, d});
  for (std::size_t i = 0; i < S * d; ++i) x[i] = block[i] + enc.pos[i];

  if (tape) tape->layers.resize(enc.layers.size());

  Tensor<T> xn1({S, d}), q({S, d}), k({S, d}), v({S, d});
  Tensor<T> p({enc.n_heads, S, S}), o_heads({S, d}), attn_out({S, d});
  Tensor<T> xn2({S, d}), h_pre({S, enc.hidden}), h_act({S, enc.hidden}), mlp_out({S, d});

  for (std::size_t li = 0; li < enc.layers.size(); ++li) {
    const auto& lp = enc.layers[li];
    if (tape) tape->layers[li].x_in = x;

    for (std::size_t s = 0; s < S; ++s) {
      rmsnorm<T>(x.row(s), lp.n1_gain.flat(), static_cast<T>(kRmsNormEps), xn1.row(s));
    }
    linear(xn1, lp.w_q, q);
    linear(xn1, lp.w_k, k);
    linear(xn1, lp.w_v, v);
    chunk_attention(S, d, enc.n_heads, enc.d_h, q, k, v, p, o_heads);
    linear(o_heads, lp.w_o, attn_out);
    for (std::size_t i = 0; i < S * d; ++i) x[i] += attn_out[i];

    if (tape) {
      auto& tl = tape->layers[li];
      tl.xn1 = xn1;
      tl.q = q;
      tl.k = k;
      tl.v = v;
      tl.p = p;
      tl.o_heads = o_heads;
      tl.x_mid = x;
    }

    for (std::size_t s = 0; s < S; ++s) {
      rmsnorm<T>(x.row(s), lp.n2_gain.flat(), static_cast<T>(kRmsNormEps), xn2.row(s));
    }
    linear(xn2, lp.w1, h_pre);
    for (std::size_t i = 0; i < h_pre.size(); ++i) h_act[i] = silu(h_pre[i]);
    linear(h_act, lp.w2, mlp_out);
    for (std::size_t i = 0; i < S * d; ++i) x[i] += mlp_out[i];

    if (tape) {
      auto& tl = tape->layers[li];
      tl.xn2 = xn2;
      tl.h_pre = h_pre;
      tl.h_act = h_act;
    }
  }
  out = std::move(x);
}

template <typename T>
void encode_chunk_backward(const EncoderParams<T>& enc, const EncoderChunkTape<T>& tape,
                           const Tensor<T>& d_out, Tensor<T>& d_block, EncoderParams<T>& grads) {
  const std::size_t S = enc.S, d = enc.d;
  HSALAB_CHECK(tape.layers.size() == enc.layers.size(), "encoder backward: missing tape");
  Tensor<T> dx = d_out;  // gradient flowing backwards through the residual stream

  Tensor<T> d_xn2({S, d}), d_hact({S, enc.hidden}), d_hpre({S, enc.hidden});
  Tensor<T> d_oheads({S, d}), d_q({S, d}), d_k({S, d}), d_v({S, d}), d_xn1({S, d});
  const T scale = T(1) / std::sqrt(static_cast<T>(enc.d_h));

  for (std::size_t li = enc.layers.size(); li-- > 0;) {
    const auto& lp = enc.layers[li];
    const auto& tl = tape.layers[li];
    auto& lg = grads.layers[li];

    // MLP block: x2 = x_mid + W2 . silu(W1 . rmsnorm(x_mid))
    linear_backward_weight(dx, tl.h_act, lg.w2);
    d_hact.set_zero();
    linear_backward_input(dx, lp.w2, d_hact);
    for (std::size_t i = 0; i < d_hpre.size(); ++i) d_hpre[i] = d_hact[i] * silu_grad(tl.h_pre[i]);
    linear_backward_weight(d_hpre, tl.xn2, lg.w1);
    d_xn2.set_zero();
    linear_backward_input(d_hpre, lp.w1, d_xn2);
    for (std::size_t s = 0; s < S; ++s) {
      rmsnorm_backward<T>(tl.x_mid.row(s), lp.n2_gain.flat(), static_cast<T>(kRmsNormEps),
                          d_xn2.row(s), dx.row(s), lg.n2_gain.flat());
    }

    // Attention block: x_mid = x_in + W_o . attn(rmsnorm(x_in))
    linear_backward_weight(dx, tl.o_heads, lg.w_o);
    d_oheads.set_zero();
    linear_backward_input(dx, lp.w_o, d_oheads);

    d_q.set_zero();
    d_k.set_zero();
    d_v.set_zero();
    std::vector<T> dp(S), dlog(S);
    for (std::size_t hd = 0; hd < enc.n_heads; ++hd) {
      const std::size_t off = hd * enc.d_h;
      for (std::size_t s = 0; s < S; ++s) {
        const T* prow = &tl.p.at(hd, s, 0);
        for (std::size_t u = 0; u < S; ++u) {
          T acc = T(0);
          for (std::size_t c = 0; c < enc.d_h; ++c)
            acc += d_oheads.at(s, off + c) * tl.v.at(u, off + c);
          dp[u] = acc;
          for (std::size_t c = 0; c < enc.d_h; ++c)
            d_v.at(u, off + c) += prow[u] * d_oheads.at(s, off + c);
        }
        softmax_backward<T>(std::span<const T>(prow, S), std::span<const T>(dp.data(), S),
                            std::span<T>(dlog.data(), S));
        for (std::size_t u = 0; u < S; ++u) {
          const T dl = dlog[u] * scale;
          for (std::size_t c = 0; c < enc.d_h; ++c) {
            d_q.at(s, off + c) += dl * tl.k.at(u, off + c);
            d_k.at(u, off + c) += dl * tl.q.at(s, off + c);
          }
        }
      }
    }

    linear_backward_weight(d_q, tl.xn1, lg.w_q);
    linear_backward_weight(d_k, tl.xn1, lg.w_k);
    linear_backward_weight(d_v, tl.xn1, lg.w_v);
    d_xn1.set_zero();
    linear_backward_input(d_q, lp.w_q, d_xn1);
    linear_backward_input(d_k, lp.w_k, d_xn1);
    linear_backward_input(d_v, lp.w_v, d_xn1);
    for (std::size_t s = 0; s < S; ++s) {
      rmsnorm_backward<T>(tl.x_in.row(s), lp.n1_gain.flat(), static_cast<T>(kRmsNormEps),
                          d_xn1.row(s), dx.row(s), lg.n1_gain.flat());
    }
  }

  // x0 = block + pos  (shared by every chunk, so pos accumulates)
  for (std::size_t i = 0; i < S * d; ++i) {
    d_block[i] += dx[i];
    grads.pos[i] += dx[i];
  }
}

template <typename T>
void encode_chunks(const Tensor<T>& h_lower, const ModelConfig& cfg, const EncoderParams<T>& enc,
                   ChunkMemory<T>& mem,
                   std::type_identity_t<std::vector<EncoderChunkTape<T>>*> tapes) {
  HSALAB_CHECK_DIM(h_lower.rank() == 2 && h_lower.dim(1) == cfg.d, "encode_chunks: H must be l x d");
  const std::size_t l = h_lower.dim(0);
  const std::size_t n = complete_chunks(l, cfg.S);
  mem.n_chunks = n;
  mem.S = cfg.S;
  mem.d = cfg.d;
  mem.g = cfg.g;
  mem.d_h = cfg.d_h;
  mem.E.resize({n, cfg.S, cfg.d});
  if (tapes) tapes->assign(n, EncoderChunkTape<T>{});
  if (n == 0) return;

  parallel_for(n, [&](std::size_t i) {
    Tensor<T> out;
    encode_chunk(enc, h_lower.data() + i * cfg.S * cfg.d, out, tapes ? &(*tapes)[i] : nullptr);
    std::copy(out.data(), out.data() + out.size(), mem.E.data() + i * cfg.S * cfg.d);
  });
}

template <typename T>
void build_memory(ChunkMemory<T>& mem, const Tensor<T>& w_k, const Tensor<T>& w_v,
                  const Tensor<T>& w_k_slc) {
  const std::size_t n = mem.n_chunks, S = mem.S, d = mem.d;
  const std::size_t kv_width = mem.g * mem.d_h;
  HSALAB_CHECK_DIM(w_k.rank() == 2 && w_k.dim(0) == kv_width && w_k.dim(1) == d,
                   "build_memory: W_K must be (g*d_h) x d");
  HSALAB_CHECK_DIM(w_v.rank() == 2 && w_v.dim(0) == kv_width && w_v.dim(1) == d,
                   "build_memory: W_V must be (g*d_h) x d");
  HSALAB_CHECK_DIM(w_k_slc.rank() == 2 && w_k_slc.dim(0) == d && w_k_slc.dim(1) == d,
                   "build_memory: W_K_slc must be d x d");

  mem.E_bar.resize({n, d});
  mem.K_attn.resize({n, S, kv_width});
  mem.V_attn.resize({n, S, kv_width});
  mem.K_slc.resize({n, d});
  ++mem.build_count;
  if (n == 0) return;

  const T inv_s = T(1) / static_cast<T>(S);
  for (std::size_t i = 0; i < n; ++i) {
    const T* e = mem.E.data() + i * S * d;
    T* bar = mem.E_bar.data() + i * d;
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t j = 0; j < d; ++j) bar[j] += e[s * d + j];
    for (std::size_t j = 0; j < d; ++j) bar[j] *= inv_s;
  }

  // K_i = W_K E_i, V_i = W_V E_i over all chunks at once ((n*S) x d rows).
  gemm_nt(mem.E.data(), w_k.data(), mem.K_attn.data(), n * S, kv_width, d);
  gemm_nt(mem.E.data(), w_v.data(), mem.V_attn.data(), n * S, kv_width, d);
  gemm_nt(mem.E_bar.data(), w_k_slc.data(), mem.K_slc.data(), n, d, d);
}

template <typename T>
void build_memory_backward(const ChunkMemory<T>& mem, const Tensor<T>& w_k, const Tensor<T>& w_v,
                           const Tensor<T>& w_k_slc, const Tensor<T>& d_k_attn,
                           const Tensor<T>& d_v_attn, const Tensor<T>& d_k_slc, Tensor<T>& d_e,
                           Tensor<T>& d_w_k, Tensor<T>& d_w_v, Tensor<T>& d_w_k_slc) {
  const std::size_t n = mem.n_chunks, S = mem.S, d = mem.d;
  const std::size_t kv_width = mem.g * mem.d_h;
  if (n == 0) return;

  // dE += dK . W_K + dV . W_V
  gemm_nn(d_k_attn.data(), w_k.data(), d_e.data(), n * S, d, kv_width, /*accumulate=*/true);
  gemm_nn(d_v_attn.data(), w_v.data(), d_e.data(), n * S, d, kv_width, /*accumulate=*/true);
  gemm_tn(d_k_attn.data(), mem.E.data(), d_w_k.data(), kv_width, d, n * S, /*accumulate=*/true);
  gemm_tn(d_v_attn.data(), mem.E.data(), d_w_v.data(), kv_width, d, n * S, /*accumulate=*/true);

  // K_slc = W_K_slc E_bar; E_bar = mean of E rows.
  Tensor<T> d_e_bar({n, d});
  gemm_nn(d_k_slc.data(), w_k_slc.data(), d_e_bar.data(), n, d, d);
  gemm_tn(d_k_slc.data(), mem.E_bar.data(), d_w_k_slc.data(), d, d, n, /*accumulate=*/true);

  const T inv_s = T(1) / static_cast<T>(S);
  for (std::size_t i = 0; i < n; ++i) {
    const T* bar = d_e_bar.data() + i * d;
    T* e = d_e.data() + i * S * d;
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t j = 0; j < d; ++j) e[s * d + j] += bar[j] * inv_s;
  }
}

template struct EncoderParams<float>;
template struct EncoderParams<double>;
template void encode_chunk<float>(const EncoderParams<float>&, const float*, Tensor<float>&,
                                  std::type_identity_t<EncoderChunkTape<float>*>);
template void encode_chunk<double>(const EncoderParams<double>&, const double*, Tensor<double>&,
                                   std::type_identity_t<EncoderChunkTape<double>*>);
template void encode_chunk_backward<float>(const EncoderParams<float>&,
                                           const EncoderChunkTape<float>&, const Tensor<float>&,
                                           Tensor<float>&, EncoderParams<float>&);
template void encode_chunk_backward<double>(const EncoderParams<double>&,
                                            const EncoderChunkTape<double>&, const Tensor<double>&,
                                            Tensor<double>&, EncoderParams<double>&);
template void encode_chunks<float>(const Tensor<float>&, const ModelConfig&,
                                   const EncoderParams<float>&, ChunkMemory<float>&,
                                   std::type_identity_t<std::vector<EncoderChunkTape<float>>*>);
template void encode_chunks<double>(const Tensor<double>&, const ModelConfig&,
                                    const EncoderParams<double>&, ChunkMemory<double>&,
                                    std::type_identity_t<std::vector<EncoderChunkTape<double>>*>);
template void build_memory<float>(ChunkMemory<float>&, const Tensor<float>&, const Tensor<float>&,
                                  const Tensor<float>&);
template void build_memory<double>(ChunkMemory<double>&, const Tensor<double>&,
                                   const Tensor<double>&, const Tensor<double>&);
template void build_memory_backward<float>(const ChunkMemory<float>&, const Tensor<float>&,
                                           const Tensor<float>&, const Tensor<float>&,
                                           const Tensor<float>&, const Tensor<float>&,
                                           const Tensor<float>&, Tensor<float>&, Tensor<float>&,
                                           Tensor<float>&, Tensor<float>&);
template void build_memory_backward<double>(const ChunkMemory<double>&, const Tensor<double>&,
                                            const Tensor<double>&, const Tensor<double>&,
                                            const Tensor<double>&, const Tensor<double>&,
                                            const Tensor<double>&, Tensor<double>&, Tensor<double>&,
                                            Tensor<double>&, Tensor<double>&);

}  // namespace hsalab
