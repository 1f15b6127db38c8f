#include <cmath>
#include <sstream>

#include "doctest.h"
#include "hsalab/bench.hpp"
#include "hsalab/ops.hpp"

using namespace hsalab;

TEST_SUITE("bench") {
  TEST_CASE("full attention reference matches a per-row oracle") {
    Rng rng(601);
    const std::size_t l = 12, heads = 2, d_h = 4;
    Tensor<double> q({l, heads, d_h}), k({l, heads, d_h}), v({l, heads, d_h}), o;
    for (auto* t : {&q, &k, &v})
      for (auto& x : t->flat()) x = rng.normal();
    attention_full_causal(q, k, v, o);
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t hd = 0; hd < heads; ++hd) {
        std::vector<double> logits(t + 1), p(t + 1);
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0;
          for (std::size_t c = 0; c < d_h; ++c) acc += q.at(t, hd, c) * k.at(u, hd, c);
          logits[u] = acc / std::sqrt(double(d_h));
        }
        softmax<double>(logits, std::span<double>(p.data(), t + 1));
        for (std::size_t c = 0; c < d_h; ++c) {
          double acc = 0;
          for (std::size_t u = 0; u <= t; ++u) acc += p[u] * v.at(u, hd, c);
          CHECK(o.at(t, hd, c) == doctest::Approx(acc).epsilon(1e-9));
        }
      }
    }
  }

  TEST_CASE("flop counters match the closed forms exactly") {
    BenchConfig bc;
    bc.S = 8;
    bc.K = 3;
    bc.g = 1;
    bc.h = 2;
    bc.d_h = 8;
    bc.trials = 1;
    bc.warmups = 0;
    const auto records = bench_ops({64, 128}, bc);
    REQUIRE(records.size() == 10);  // 5 ops per length
    for (const auto& r : records) {
      INFO(r.op << " l=" << r.l);
      CHECK(r.flops_measured == r.flops_predicted);
    }
  }

  TEST_CASE("counter growth separates quadratic from linear") {
    BenchConfig bc;
    bc.S = 8;
    bc.K = 2;
    bc.g = 1;
    bc.h = 2;
    bc.d_h = 8;
    bc.trials = 1;
    bc.warmups = 0;
    const auto records = bench_ops({128, 256}, bc);
    auto find = [&](const std::string& op, std::size_t l) -> const BenchRecord& {
      for (const auto& r : records)
        if (r.op == op && r.l == l) return r;
      FAIL("missing record");
      return records[0];
    };
    // Selection flops are quadratic in l (n_chunks scales with l).
    const double sel_ratio = double(find("selection", 256).flops_measured) /
                             double(find("selection", 128).flops_measured);
    CHECK(sel_ratio == doctest::Approx(4.0));
    // The token phase is asymptotically linear at fixed K; on these lengths
    // the early short-of-K tokens still wash out, so just check it is far
    // from quadratic.
    const double tok_ratio = double(find("hsa_blocked_token3", 256).flops_measured) /
                             double(find("hsa_blocked_token3", 128).flops_measured);
    CHECK(tok_ratio < 2.5);
    // Full attention is quadratic.
    const double full_ratio = double(find("full_attn3", 256).flops_measured) /
                              double(find("full_attn3", 128).flops_measured);
    CHECK(full_ratio > 3.5);
  }

  TEST_CASE("csv columns are exactly as specified") {
    std::vector<BenchRecord> rs;
    BenchRecord r;
    r.op = "full_attn3";
    r.l = 64;
    r.S = 8;
    r.K = 2;
    r.g = 1;
    r.h = 2;
    r.d_h = 8;
    r.trials = 5;
    r.wall_ms_median = 1.5;
    r.peak_bytes = 1024;
    r.flops_measured = 10;
    r.flops_predicted = 10;
    rs.push_back(r);
    const auto csv = bench_csv(rs);
    CHECK(csv ==
          "op,l,S,K,g,h,d_h,trials,wall_ms_median,peak_bytes,flops_measured,flops_predicted\n"
          "full_attn3,64,8,2,1,2,8,5,1.5,1024,10,10\n");
  }

  TEST_CASE("hsa token flop prediction counts partially filled slots") {
    // l=32, S=8, K=2: tokens 0..7 have no eligible chunk, 8..15 one, 16+ two.
    const std::uint64_t per_slot = 4ull * 2 * 8 * 8;  // 4*h*S*d_h
    const std::uint64_t expect = (0 * 8 + 1 * 8 + 2 * 16) * per_slot;
    CHECK(predict_hsa_token_flops(32, 8, 2, 1, 2, 8) == expect);
  }
}
