#include <cmath>
#include <cstring>

#include "doctest.h"
#include "hsalab/chunking.hpp"
#include "hsalab/gradcheck.hpp"
#include "hsalab/ops.hpp"

using namespace hsalab;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.g = 1;
  cfg.h = 2;
  cfg.d_h = 8;
  cfg.S = 4;
  cfg.K = 2;
  cfg.L = 4;
  cfg.G = 1;
  cfg.vocab = 64;
  cfg.enc_layers = 1;
  cfg.seg_len = 8;
  return cfg;
}

}  // namespace

TEST_SUITE("chunking") {
  TEST_CASE("complete chunk counts") {
    CHECK(complete_chunks(128, 64) == 2);
    CHECK(complete_chunks(100, 64) == 1);  // trailing 36 tokens never encoded
    CHECK(complete_chunks(10, 64) == 0);
  }

  TEST_CASE("split excludes the trailing partial chunk") {
    const ModelConfig cfg = small_cfg();
    Rng rng(3);
    EncoderParams<float> enc;
    enc.init(cfg, rng);
    Tensor<float> h({10, cfg.d});
    for (auto& v : h.flat()) v = static_cast<float>(rng.normal());
    ChunkMemory<float> mem;
    encode_chunks(h, cfg, enc, mem, nullptr);
    CHECK(mem.n_chunks == 2);  // 10 tokens, S=4
    CHECK(mem.E.dim(0) == 2);
  }

  TEST_CASE("zeroed encoder is the identity through the residual path") {
    const ModelConfig cfg = small_cfg();
    Rng rng(5);
    EncoderParams<float> enc;
    enc.init(cfg, rng);
    enc.zero();
    Tensor<float> block({cfg.S, cfg.d});
    for (auto& v : block.flat()) v = static_cast<float>(rng.normal());
    Tensor<float> out;
    encode_chunk(enc, static_cast<const float*>(block.data()), out,
                 static_cast<EncoderChunkTape<float>*>(nullptr));
    for (std::size_t i = 0; i < block.size(); ++i) CHECK(out[i] == block[i]);
  }

  TEST_CASE("chunk encodings are independent of other chunks") {
    const ModelConfig cfg = small_cfg();
    Rng rng(7);
    EncoderParams<float> enc;
    enc.init(cfg, rng);
    Tensor<float> h({3 * cfg.S, cfg.d});
    for (auto& v : h.flat()) v = static_cast<float>(rng.normal());
    ChunkMemory<float> base;
    encode_chunks(h, cfg, enc, base, nullptr);

    // Perturb chunk 2; chunks 0 and 1 must be bit-identical.
    Tensor<float> h2 = h;
    for (std::size_t j = 0; j < cfg.S * cfg.d; ++j) h2[2 * cfg.S * cfg.d + j] += 1.0f;
    ChunkMemory<float> alt;
    encode_chunks(h2, cfg, enc, alt, nullptr);
    CHECK(std::memcmp(base.E.data(), alt.E.data(), 2 * cfg.S * cfg.d * sizeof(float)) == 0);
    CHECK(std::memcmp(base.E.data() + 2 * cfg.S * cfg.d, alt.E.data() + 2 * cfg.S * cfg.d,
                      cfg.S * cfg.d * sizeof(float)) != 0);

    // Swapping two chunks swaps their encodings identically.
    Tensor<float> h3({3 * cfg.S, cfg.d});
    std::memcpy(h3.data(), h.data() + cfg.S * cfg.d, cfg.S * cfg.d * sizeof(float));
    std::memcpy(h3.data() + cfg.S * cfg.d, h.data(), cfg.S * cfg.d * sizeof(float));
    std::memcpy(h3.data() + 2 * cfg.S * cfg.d, h.data() + 2 * cfg.S * cfg.d,
                cfg.S * cfg.d * sizeof(float));
    ChunkMemory<float> swapped;
    encode_chunks(h3, cfg, enc, swapped, nullptr);
    CHECK(std::memcmp(swapped.E.data(), base.E.data() + cfg.S * cfg.d,
                      cfg.S * cfg.d * sizeof(float)) == 0);
    CHECK(std::memcmp(swapped.E.data() + cfg.S * cfg.d, base.E.data(),
                      cfg.S * cfg.d * sizeof(float)) == 0);
  }

  TEST_CASE("encoder attention matches a naive per-chunk oracle") {
    // One layer, MLP weights zeroed so only the attention block acts; compare
    // the output against an independently coded softmax attention.
    const ModelConfig cfg = small_cfg();
    Rng rng(11);
    EncoderParams<double> enc;
    enc.init(cfg, rng);
    enc.layers[0].w1.set_zero();
    enc.layers[0].w2.set_zero();
    Tensor<double> block({cfg.S, cfg.d});
    for (auto& v : block.flat()) v = rng.normal();
    Tensor<double> out;
    encode_chunk(enc, static_cast<const double*>(block.data()), out,
                 static_cast<EncoderChunkTape<double>*>(nullptr));

    const std::size_t S = cfg.S, d = cfg.d, nh = enc.n_heads, dh = enc.d_h;
    Tensor<double> x0({S, d}), xn({S, d}), q({S, d}), k({S, d}), v({S, d}), oh({S, d}), y({S, d});
    for (std::size_t i = 0; i < S * d; ++i) x0[i] = block[i] + enc.pos[i];
    for (std::size_t s = 0; s < S; ++s)
      rmsnorm<double>(x0.row(s), enc.layers[0].n1_gain.flat(), 1e-6, xn.row(s));
    linear(xn, enc.layers[0].w_q, q);
    linear(xn, enc.layers[0].w_k, k);
    linear(xn, enc.layers[0].w_v, v);
    for (std::size_t hd = 0; hd < nh; ++hd) {
      for (std::size_t s = 0; s < S; ++s) {
        std::vector<double> logits(S), p(S);
        for (std::size_t u = 0; u < S; ++u) {
          double acc = 0;
          for (std::size_t c = 0; c < dh; ++c) acc += q.at(s, hd * dh + c) * k.at(u, hd * dh + c);
          logits[u] = acc / std::sqrt(double(dh));
        }
        softmax<double>(logits, std::span<double>(p.data(), S));
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::size_t u = 0; u < S; ++u) acc += p[u] * v.at(u, hd * dh + c);
          oh.at(s, hd * dh + c) = acc;
        }
      }
    }
    linear(oh, enc.layers[0].w_o, y);
    for (std::size_t i = 0; i < S * d; ++i) y[i] += x0[i];
    for (std::size_t i = 0; i < S * d; ++i) CHECK(out[i] == doctest::Approx(y[i]).epsilon(1e-5));
  }

  TEST_CASE("build_memory pools and projects") {
    const ModelConfig cfg = small_cfg();
    Rng rng(13);
    EncoderParams<double> enc;
    enc.init(cfg, rng);
    Tensor<double> h({2 * cfg.S, cfg.d});
    for (auto& v : h.flat()) v = rng.normal();
    ChunkMemory<double> mem;
    encode_chunks(h, cfg, enc, mem, nullptr);

    Tensor<double> w_k({cfg.g * cfg.d_h, cfg.d}), w_v({cfg.g * cfg.d_h, cfg.d}),
        w_k_slc({cfg.d, cfg.d});
    for (auto& v : w_k.flat()) v = rng.normal();
    for (auto& v : w_v.flat()) v = rng.normal();
    for (auto& v : w_k_slc.flat()) v = rng.normal();
    build_memory(mem, w_k, w_v, w_k_slc);
    CHECK(mem.build_count == 1);

    // E_bar is the row mean of E (direct summation oracle).
    for (std::size_t i = 0; i < mem.n_chunks; ++i) {
      for (std::size_t j = 0; j < cfg.d; ++j) {
        double acc = 0;
        for (std::size_t s = 0; s < cfg.S; ++s) acc += mem.E.at(i, s, j);
        CHECK(mem.E_bar.at(i, j) == doctest::Approx(acc / cfg.S).epsilon(1e-6));
      }
    }

    // Constant chunk pools to that constant row.
    ChunkMemory<double> cmem;
    cmem.n_chunks = 1;
    cmem.S = cfg.S;
    cmem.d = cfg.d;
    cmem.g = cfg.g;
    cmem.d_h = cfg.d_h;
    cmem.E.resize({1, cfg.S, cfg.d});
    for (std::size_t s = 0; s < cfg.S; ++s)
      for (std::size_t j = 0; j < cfg.d; ++j) cmem.E.at(0, s, j) = 0.5 * double(j);
    build_memory(cmem, w_k, w_v, w_k_slc);
    for (std::size_t j = 0; j < cfg.d; ++j)
      CHECK(cmem.E_bar.at(0, j) == doctest::Approx(0.5 * double(j)));
  }

  TEST_CASE("zero keys force 1/(1+S) softmax1 mass per retrieved token") {
    const ModelConfig cfg = small_cfg();
    std::vector<double> logits(cfg.S, 0.0), p(cfg.S);
    softmax1<double>(logits, std::span<double>(p.data(), cfg.S));
    for (std::size_t s = 0; s < cfg.S; ++s) CHECK(p[s] == doctest::Approx(1.0 / (1.0 + cfg.S)));
  }

  TEST_CASE("encoder backward matches finite differences") {
    const ModelConfig cfg = small_cfg();
    Rng rng(17);
    EncoderParams<double> enc;
    enc.init(cfg, rng);
    Tensor<double> block({cfg.S, cfg.d});
    for (auto& v : block.flat()) v = rng.normal();
    Tensor<double> dy({cfg.S, cfg.d});
    for (auto& v : dy.flat()) v = rng.normal();

    auto f = [&]() -> double {
      Tensor<double> out;
      encode_chunk(enc, static_cast<const double*>(block.data()), out,
                   static_cast<EncoderChunkTape<double>*>(nullptr));
      double s = 0;
      for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * dy[i];
      return s;
    };

    EncoderChunkTape<double> tape;
    Tensor<double> out;
    encode_chunk(enc, static_cast<const double*>(block.data()), out, &tape);
    EncoderParams<double> grads;
    grads.init(cfg, rng);
    grads.zero();
    Tensor<double> d_block({cfg.S, cfg.d});
    encode_chunk_backward(enc, tape, dy, d_block, grads);

    std::vector<GradCheckParam> params;
    std::vector<std::string> names;
    std::vector<Tensor<double>*> ps, gs;
    enc.visit([&](const std::string& n, Tensor<double>& t) {
      names.push_back(n);
      ps.push_back(&t);
    });
    grads.visit([&](const std::string&, Tensor<double>& t) { gs.push_back(&t); });
    for (std::size_t i = 0; i < ps.size(); ++i) params.push_back({names[i], ps[i], gs[i]});

    GradCheckOptions opts;
    opts.tol = 1e-6;
    opts.max_entries_per_param = 24;
    const auto report = gradcheck(f, params, opts);
    CHECK(report.pass);

    const double eps = 1e-6;
    for (std::size_t probe : {std::size_t(0), std::size_t(17), block.size() - 1}) {
      const double saved = block[probe];
      block[probe] = saved + eps;
      const double fp = f();
      block[probe] = saved - eps;
      const double fm = f();
      block[probe] = saved;
      CHECK(d_block[probe] == doctest::Approx((fp - fm) / (2 * eps)).epsilon(1e-4));
    }
  }

  TEST_CASE("build_memory backward matches finite differences") {
    const ModelConfig cfg = small_cfg();
    Rng rng(19);
    ChunkMemory<double> mem;
    mem.n_chunks = 2;
    mem.S = cfg.S;
    mem.d = cfg.d;
    mem.g = cfg.g;
    mem.d_h = cfg.d_h;
    mem.E.resize({2, cfg.S, cfg.d});
    for (auto& v : mem.E.flat()) v = rng.normal();
    Tensor<double> w_k({cfg.g * cfg.d_h, cfg.d}), w_v({cfg.g * cfg.d_h, cfg.d}),
        w_k_slc({cfg.d, cfg.d});
    for (auto& v : w_k.flat()) v = rng.normal();
    for (auto& v : w_v.flat()) v = rng.normal();
    for (auto& v : w_k_slc.flat()) v = rng.normal();

    const std::size_t kv = 2 * cfg.S * cfg.g * cfg.d_h;
    std::vector<double> ck(kv), cv(kv), cs(2 * cfg.d);
    for (auto& v : ck) v = rng.normal();
    for (auto& v : cv) v = rng.normal();
    for (auto& v : cs) v = rng.normal();

    auto f = [&]() -> double {
      ChunkMemory<double> m2 = mem;
      build_memory(m2, w_k, w_v, w_k_slc);
      double s = 0;
      for (std::size_t i = 0; i < kv; ++i) s += m2.K_attn[i] * ck[i] + m2.V_attn[i] * cv[i];
      for (std::size_t i = 0; i < 2 * cfg.d; ++i) s += m2.K_slc[i] * cs[i];
      return s;
    };

    ChunkMemory<double> built = mem;
    build_memory(built, w_k, w_v, w_k_slc);
    Tensor<double> d_k({2, cfg.S, cfg.g * cfg.d_h}), d_v({2, cfg.S, cfg.g * cfg.d_h}),
        d_ks({2, cfg.d});
    for (std::size_t i = 0; i < kv; ++i) {
      d_k[i] = ck[i];
      d_v[i] = cv[i];
    }
    for (std::size_t i = 0; i < 2 * cfg.d; ++i) d_ks[i] = cs[i];
    Tensor<double> d_e({2, cfg.S, cfg.d}), d_wk({cfg.g * cfg.d_h, cfg.d}),
        d_wv({cfg.g * cfg.d_h, cfg.d}), d_wks({cfg.d, cfg.d});
    build_memory_backward(built, w_k, w_v, w_k_slc, d_k, d_v, d_ks, d_e, d_wk, d_wv, d_wks);

    const double eps = 1e-6;
    auto probe = [&](Tensor<double>& target, const Tensor<double>& grad, std::size_t idx) {
      const double saved = target[idx];
      target[idx] = saved + eps;
      const double fp = f();
      target[idx] = saved - eps;
      const double fm = f();
      target[idx] = saved;
      CHECK(grad[idx] == doctest::Approx((fp - fm) / (2 * eps)).epsilon(1e-5));
    };
    probe(mem.E, d_e, 3);
    probe(mem.E, d_e, mem.E.size() - 2);
    probe(w_k, d_wk, 5);
    probe(w_v, d_wv, 9);
    probe(w_k_slc, d_wks, 11);
  }
}
