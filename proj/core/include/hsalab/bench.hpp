#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsalab/hsa_op.hpp"

namespace hsalab {

// Causal full softmax attention (the quadratic reference). Q/K/V are
// l x heads x d_h; parallel over query rows, workspace is one logits row per
// worker.
template <typename T>
void attention_full_causal(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           Tensor<T>& o, HsaCounters* counters = nullptr);

struct BenchRecord {
  std::string op;
  std::size_t l = 0, S = 0, K = 0, g = 0, h = 0, d_h = 0;
  std::size_t trials = 0;
  double wall_ms_median = 0.0;
  std::uint64_t peak_bytes = 0;
  std::uint64_t flops_measured = 0;
  std::uint64_t flops_predicted = 0;
};

struct BenchConfig {
  std::size_t S = 64;
  std::size_t K = 8;
  std::size_t g = 1;
  std::size_t h = 8;
  std::size_t d_h = 32;  // d = g*h*d_h = 256
  std::size_t layers = 3;
  std::size_t trials = 5;   // median over these, after the warmups
  std::size_t warmups = 2;
  std::uint64_t seed = 42;
};

// Times the full-attention reference, naive HSA and blocked HSA (three
// stacked operator calls sharing one selection) across the given lengths.
// Emits one extra row per length for the shared selection phase and for the
// blocked token phase alone, so the scaling exponents can be read off
// directly.
std::vector<BenchRecord> bench_ops(const std::vector<std::size_t>& lengths,
                                   const BenchConfig& cfg);

std::string bench_csv(const std::vector<BenchRecord>& records);

// Closed-form flop predictions (audited against the measured counters).
std::uint64_t predict_full_attention_flops(std::size_t l, std::size_t heads, std::size_t d_h);
std::uint64_t predict_hsa_token_flops(std::size_t l, std::size_t S, std::size_t K, std::size_t g,
                                      std::size_t h, std::size_t d_h);
std::uint64_t predict_selection_flops(std::size_t l, std::size_t g, std::size_t d_g,
                                      std::size_t n_chunks);

}  // namespace hsalab
