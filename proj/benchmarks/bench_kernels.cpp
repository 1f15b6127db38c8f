#include <benchmark/benchmark.h>

#include "hsalab/bench.hpp"
#include "hsalab/ops.hpp"
#include "hsalab/rng.hpp"

namespace {

using namespace hsalab;

void BM_softmax1(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  std::vector<float> logits(n), p(n);
  for (auto& v : logits) v = static_cast<float>(rng.normal());
  for (auto _ : state) {
    softmax1<float>(logits, std::span<float>(p.data(), n));
    benchmark::DoNotOptimize(p.data());
  }
}
BENCHMARK(BM_softmax1)->Arg(64)->Arg(1024);

void BM_rmsnorm(benchmark::State& state) {
  const std::size_t d = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  std::vector<float> x(d), gain(d, 1.0f), y(d);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  for (auto _ : state) {
    rmsnorm<float>(x, gain, 1e-6f, std::span<float>(y.data(), d));
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_rmsnorm)->Arg(128)->Arg(1024);

void BM_gemm_nt(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  std::vector<float> a(n * n), b(n * n), c(n * n);
  for (auto& v : a) v = static_cast<float>(rng.normal());
  for (auto& v : b) v = static_cast<float>(rng.normal());
  for (auto _ : state) {
    gemm_nt(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_gemm_nt)->Arg(128)->Arg(256)->Arg(512);

void BM_hsa_forward(benchmark::State& state) {
  const std::size_t l = static_cast<std::size_t>(state.range(0));
  const bool blocked = state.range(1) != 0;
  const std::size_t S = 64, K = 8, g = 1, h = 8, d_h = 32;
  const std::size_t d = g * h * d_h;
  Rng rng(4);
  ChunkMemory<float> mem;
  mem.n_chunks = l / S;
  mem.S = S;
  mem.d = d;
  mem.g = g;
  mem.d_h = d_h;
  mem.K_attn.resize({mem.n_chunks, S, g * d_h});
  mem.V_attn.resize({mem.n_chunks, S, g * d_h});
  mem.K_slc.resize({mem.n_chunks, d});
  for (auto& v : mem.K_attn.flat()) v = static_cast<float>(rng.normal());
  for (auto& v : mem.V_attn.flat()) v = static_cast<float>(rng.normal());
  for (auto& v : mem.K_slc.flat()) v = static_cast<float>(rng.normal());
  Tensor<float> q_slc({l, d});
  for (auto& v : q_slc.flat()) v = static_cast<float>(rng.normal());
  const auto sel = select_all(q_slc, mem, K, S);
  Tensor<float> q({l, g, h, d_h});
  for (auto& v : q.flat()) v = static_cast<float>(rng.normal());
  Tensor<float> o;
  for (auto _ : state) {
    if (blocked) {
      hsa_forward_blocked(q, mem, sel, o);
    } else {
      hsa_forward_naive(q, mem, sel, o);
    }
    benchmark::DoNotOptimize(o.data());
  }
}
BENCHMARK(BM_hsa_forward)->Args({2048, 0})->Args({2048, 1})->Args({8192, 1});

void BM_full_attention(benchmark::State& state) {
  const std::size_t l = static_cast<std::size_t>(state.range(0));
  const std::size_t heads = 8, d_h = 32;
  Rng rng(5);
  Tensor<float> q({l, heads, d_h}), k({l, heads, d_h}), v({l, heads, d_h}), o;
  for (auto& t : {&q, &k, &v})
    for (auto& x : t->flat()) x = static_cast<float>(rng.normal());
  for (auto _ : state) {
    attention_full_causal(q, k, v, o);
    benchmark::DoNotOptimize(o.data());
  }
}
BENCHMARK(BM_full_attention)->Arg(1024)->Arg(2048);

}  // namespace

BENCHMARK_MAIN();
