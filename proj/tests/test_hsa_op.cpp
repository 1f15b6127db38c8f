#include <cmath>
#include <cstring>

#include "doctest.h"
#include "hsalab/hsa_op.hpp"
#include "hsalab/ops.hpp"
#include "hsalab/verify.hpp"

using namespace hsalab;

namespace {

struct Instance {
  ChunkMemory<double> mem;
  SelectionResult<double> sel;
  InverseSelectionMaps maps;
  Tensor<double> q;
  std::size_t l, g, h, d_h, S, K;
};

Instance make_instance(std::uint64_t seed, std::size_t l, std::size_t S, std::size_t K,
                       std::size_t g, std::size_t h, std::size_t d_h) {
  Instance in;
  in.l = l;
  in.g = g;
  in.h = h;
  in.d_h = d_h;
  in.S = S;
  in.K = K;
  Rng rng(seed);
  const std::size_t d = g * h * d_h;
  const std::size_t n = l / S;
  in.mem.n_chunks = n;
  in.mem.S = S;
  in.mem.d = d;
  in.mem.g = g;
  in.mem.d_h = d_h;
  in.mem.K_attn.resize({std::max<std::size_t>(n, 1), S, g * d_h});
  in.mem.V_attn.resize({std::max<std::size_t>(n, 1), S, g * d_h});
  in.mem.K_slc.resize({std::max<std::size_t>(n, 1), d});
  for (auto& v : in.mem.K_attn.flat()) v = rng.normal();
  for (auto& v : in.mem.V_attn.flat()) v = rng.normal();
  for (auto& v : in.mem.K_slc.flat()) v = rng.normal();
  Tensor<double> q_slc({l, d});
  for (auto& v : q_slc.flat()) v = rng.normal();
  in.sel = select_all(q_slc, in.mem, K, S);
  in.maps = build_inverse_maps(in.sel);
  in.q.resize({l, g, h, d_h});
  for (auto& v : in.q.flat()) v = rng.normal();
  return in;
}

// Naive backward oracle: differentiates the naive forward with explicit
// per-(t,k) softmax1 Jacobians (an O(S^2) formulation, independent of the
// rowsum trick used by the two-phase kernels).
void naive_backward(const Instance& in, const Tensor<double>& d_o, Tensor<double>& d_q,
                    Tensor<double>& d_w, Tensor<double>& d_k, Tensor<double>& d_v) {
  const std::size_t l = in.l, g = in.g, h = in.h, d_h = in.d_h, S = in.S, K = in.K;
  const std::size_t stride = g * d_h;
  const double scale = 1.0 / std::sqrt(double(d_h));
  d_q.resize({l, g, h, d_h});
  d_w.resize({l, g, K});
  d_k.resize({in.mem.n_chunks, S, stride});
  d_v.resize({in.mem.n_chunks, S, stride});

  std::vector<double> p(S), dp(S), dlog(S);
  for (std::size_t t = 0; t < l; ++t) {
    for (std::size_t gr = 0; gr < g; ++gr) {
      for (std::size_t k = 0; k < K; ++k) {
        const std::int32_t c = in.sel.sorted_indices.at(t, gr, k);
        if (c == kNoChunk) continue;
        const double w = in.sel.weights.at(t, gr, k);
        const double* kc = in.mem.k_chunk(std::size_t(c));
        const double* vc = in.mem.v_chunk(std::size_t(c));
        for (std::size_t hd = 0; hd < h; ++hd) {
          const double* qrow = &in.q.at(t, gr, hd, 0);
          const double* dorow = &d_o.at(t, gr, hd, 0);
          // forward probabilities for this (t, gr, k, head)
          for (std::size_t s = 0; s < S; ++s) {
            double acc = 0;
            for (std::size_t cc = 0; cc < d_h; ++cc)
              acc += qrow[cc] * kc[s * stride + gr * d_h + cc];
            p[s] = acc * scale;
          }
          softmax1<double>(std::span<const double>(p.data(), S), std::span<double>(p.data(), S));

          // dw contribution: sum_s sum_c p_s v_sc do_c
          double dw_acc = 0;
          for (std::size_t s = 0; s < S; ++s) {
            double vdot = 0;
            for (std::size_t cc = 0; cc < d_h; ++cc)
              vdot += vc[s * stride + gr * d_h + cc] * dorow[cc];
            dw_acc += p[s] * vdot;
            dp[s] = w * vdot;  // dL/dp_s
            // dV accumulation: dL/dv_sc = w p_s do_c
            for (std::size_t cc = 0; cc < d_h; ++cc)
              d_v[std::size_t(c) * S * stride + s * stride + gr * d_h + cc] +=
                  w * p[s] * dorow[cc];
          }
          d_w.at(t, gr, k) += dw_acc;

          // explicit softmax1 Jacobian: dlog_u = sum_s dp_s p_s (delta_us - p_u)
          for (std::size_t u = 0; u < S; ++u) {
            double acc = 0;
            for (std::size_t s = 0; s < S; ++s) {
              const double jac = p[s] * ((s == u ? 1.0 : 0.0) - p[u]);
              acc += dp[s] * jac;
            }
            dlog[u] = acc;
          }
          for (std::size_t u = 0; u < S; ++u) {
            const double dl = dlog[u] * scale;
            for (std::size_t cc = 0; cc < d_h; ++cc) {
              d_q.at(t, gr, hd, cc) += dl * kc[u * stride + gr * d_h + cc];
              d_k[std::size_t(c) * S * stride + u * stride + gr * d_h + cc] += dl * qrow[cc];
            }
          }
        }
      }
    }
  }
}

}  // namespace

TEST_SUITE("hsa_op") {
  TEST_CASE("zero weights give zero output") {
    Instance in = make_instance(101, 32, 8, 2, 1, 2, 4);
    in.sel.weights.set_zero();
    Tensor<double> o;
    hsa_forward_naive(in.q, in.mem, in.sel, o);
    for (std::size_t i = 0; i < o.size(); ++i) CHECK(o[i] == 0.0);
  }

  TEST_CASE("saturated logit recovers the value row") {
    // K=1, w=1, one key aligned with the query at huge magnitude: softmax1
    // mass concentrates on that token.
    const std::size_t S = 4, d_h = 4;
    Instance in = make_instance(103, 8, S, 1, 1, 1, d_h);
    in.sel.sorted_indices.fill(kNoChunk);
    in.sel.weights.set_zero();
    const std::size_t t = 7;
    in.sel.sorted_indices.at(t, 0, 0) = 0;
    in.sel.weights.at(t, 0, 0) = 1.0;
    // Query aligned with key 2 of chunk 0 at +40 logit scale.
    for (std::size_t cc = 0; cc < d_h; ++cc) {
      in.q.at(t, 0, 0, cc) = 0.0;
      for (std::size_t s = 0; s < S; ++s) in.mem.K_attn.at(0, s, cc) = 0.0;
    }
    in.q.at(t, 0, 0, 0) = 40.0 * std::sqrt(double(d_h));
    in.mem.K_attn.at(0, 2, 0) = 1.0;
    Tensor<double> o;
    hsa_forward_naive(in.q, in.mem, in.sel, o);
    for (std::size_t cc = 0; cc < d_h; ++cc) {
      CHECK(o.at(t, 0, 0, cc) == doctest::Approx(in.mem.V_attn.at(0, 2, cc)).epsilon(1e-10));
    }
  }

  TEST_CASE("blocked equals naive on the spec instance") {
    Instance in = make_instance(105, 32, 8, 2, 2, 2, 4);
    Tensor<double> o1, o2;
    hsa_forward_naive(in.q, in.mem, in.sel, o1);
    hsa_forward_blocked(in.q, in.mem, in.sel, o2);
    REQUIRE(o1.size() == o2.size());
    for (std::size_t i = 0; i < o1.size(); ++i) {
      CHECK(relative_error(o1[i], o2[i]) < 1e-12);
    }
  }

  TEST_CASE("degenerate single-token sequence is bit-identical") {
    Instance in = make_instance(107, 1, 4, 2, 1, 2, 4);
    Tensor<double> o1, o2;
    hsa_forward_naive(in.q, in.mem, in.sel, o1);
    hsa_forward_blocked(in.q, in.mem, in.sel, o2);
    CHECK(std::memcmp(o1.data(), o2.data(), o1.size() * sizeof(double)) == 0);
  }

  TEST_CASE("fuzzed equivalence at both precisions") {
    const auto r32 = fuzz_forward_equivalence<float>(0xf00d, 40, 1e-5);
    CHECK(r32.pass);
    const auto r64 = fuzz_forward_equivalence<double>(0xbeef, 40, 1e-12);
    CHECK(r64.pass);
  }

  TEST_CASE("empty selection loads nothing") {
    Instance in = make_instance(109, 16, 8, 2, 1, 2, 4);
    in.sel.sorted_indices.fill(kNoChunk);
    in.sel.weights.set_zero();
    Tensor<double> o;
    HsaCounters counters;
    hsa_forward_blocked(in.q, in.mem, in.sel, o, &counters);
    CHECK(counters.chunk_loads == 0);
    CHECK(counters.bytes_loaded == 0);
    for (std::size_t i = 0; i < o.size(); ++i) CHECK(o[i] == 0.0);
  }

  TEST_CASE("linearity in the chunk weights") {
    Instance in = make_instance(111, 24, 8, 2, 1, 2, 4);
    Tensor<double> o1;
    hsa_forward_blocked(in.q, in.mem, in.sel, o1);
    const double alpha = 1.8125;  // exactly representable
    for (auto& w : in.sel.weights.flat()) w *= alpha;
    Tensor<double> o2;
    hsa_forward_blocked(in.q, in.mem, in.sel, o2);
    for (std::size_t i = 0; i < o1.size(); ++i)
      CHECK(o2[i] == doctest::Approx(alpha * o1[i]).epsilon(1e-12));
  }

  TEST_CASE("output is local to selected chunks") {
    Instance in = make_instance(113, 32, 8, 2, 1, 2, 4);
    Tensor<double> o1;
    hsa_forward_blocked(in.q, in.mem, in.sel, o1);
    // Find a chunk never selected by any (t, group): perturbing its values
    // must leave the output bit-identical.
    std::vector<bool> used(in.mem.n_chunks, false);
    for (std::size_t t = 0; t < in.l; ++t)
      for (std::size_t gr = 0; gr < in.g; ++gr)
        for (std::size_t k = 0; k < in.K; ++k) {
          const auto c = in.sel.sorted_indices.at(t, gr, k);
          if (c != kNoChunk) used[std::size_t(c)] = true;
        }
    // The final chunk is never eligible for any token (strict completeness),
    // so it is always unused.
    const std::size_t victim = in.mem.n_chunks - 1;
    REQUIRE(!used[victim]);
    for (std::size_t i = 0; i < in.mem.chunk_kv_elems(); ++i) {
      in.mem.V_attn[victim * in.mem.chunk_kv_elems() + i] += 3.0;
    }
    Tensor<double> o2;
    hsa_forward_blocked(in.q, in.mem, in.sel, o2);
    CHECK(std::memcmp(o1.data(), o2.data(), o1.size() * sizeof(double)) == 0);
  }

  TEST_CASE("two-phase backward equals the naive jacobian oracle") {
    Instance in = make_instance(115, 32, 8, 3, 2, 2, 4);
    Tensor<double> d_o({in.l, in.g, in.h, in.d_h});
    Rng rng(116);
    for (auto& v : d_o.flat()) v = rng.normal();

    Tensor<double> d_q, d_w, d_ws;
    hsa_backward_qw(d_o, in.q, in.mem, in.sel, d_q, d_w, d_ws);
    Tensor<double> d_k, d_v;
    hsa_backward_kv(d_o, in.q, in.mem, in.sel, in.maps, d_ws, d_k, d_v);

    Tensor<double> e_q, e_w, e_k, e_v;
    naive_backward(in, d_o, e_q, e_w, e_k, e_v);

    for (std::size_t i = 0; i < d_q.size(); ++i)
      CHECK(std::fabs(d_q[i] - e_q[i]) < 1e-10);
    for (std::size_t i = 0; i < d_w.size(); ++i)
      CHECK(std::fabs(d_w[i] - e_w[i]) < 1e-10);
    for (std::size_t i = 0; i < d_k.size(); ++i)
      CHECK(std::fabs(d_k[i] - e_k[i]) < 1e-10);
    for (std::size_t i = 0; i < d_v.size(); ++i)
      CHECK(std::fabs(d_v[i] - e_v[i]) < 1e-10);
  }

  TEST_CASE("zero upstream gradient zeroes everything") {
    Instance in = make_instance(117, 16, 4, 2, 1, 2, 4);
    Tensor<double> d_o({in.l, in.g, in.h, in.d_h});
    Tensor<double> d_q, d_w, d_ws, d_k, d_v;
    hsa_backward_qw(d_o, in.q, in.mem, in.sel, d_q, d_w, d_ws);
    hsa_backward_kv(d_o, in.q, in.mem, in.sel, in.maps, d_ws, d_k, d_v);
    for (std::size_t i = 0; i < d_q.size(); ++i) CHECK(d_q[i] == 0.0);
    for (std::size_t i = 0; i < d_w.size(); ++i) CHECK(d_w[i] == 0.0);
    for (std::size_t i = 0; i < d_ws.size(); ++i) CHECK(d_ws[i] == 0.0);
    for (std::size_t i = 0; i < d_k.size(); ++i) CHECK(d_k[i] == 0.0);
    for (std::size_t i = 0; i < d_v.size(); ++i) CHECK(d_v[i] == 0.0);
  }

  TEST_CASE("K=1 scalar-head instance matches the hand-expanded derivative") {
    // d_h=1, S=1, h=1: O = w * softmax1(q k) v = w * v * e^{qk} / (1 + e^{qk})
    // with the 1/sqrt(d_h)=1 scale. dO/dq = w v k p (1-p), dO/dw = p v,
    // dO/dk = w v q p (1-p), dO/dv = w p.
    ChunkMemory<double> mem;
    mem.n_chunks = 1;
    mem.S = 1;
    mem.d = 1;
    mem.g = 1;
    mem.d_h = 1;
    mem.K_attn.resize({1, 1, 1});
    mem.V_attn.resize({1, 1, 1});
    mem.K_slc.resize({1, 1});
    const double qv = 0.7, kv = -0.3, vv = 1.9, wv = 0.6;
    mem.K_attn[0] = kv;
    mem.V_attn[0] = vv;
    SelectionResult<double> sel;
    sel.l = 2;
    sel.g = 1;
    sel.n_chunks = 1;
    sel.K = 1;
    sel.scores.resize({2, 1, 1});
    sel.indices.resize({2, 1, 1});
    sel.sorted_indices.resize({2, 1, 1});
    sel.weights.resize({2, 1, 1});
    sel.indices.fill(kNoChunk);
    sel.sorted_indices.fill(kNoChunk);
    sel.sorted_indices.at(1, 0, 0) = 0;
    sel.weights.at(1, 0, 0) = wv;
    Tensor<double> q({2, 1, 1, 1});
    q.at(1, 0, 0, 0) = qv;
    const auto maps = build_inverse_maps(sel);

    Tensor<double> d_o({2, 1, 1, 1});
    d_o.at(1, 0, 0, 0) = 1.0;

    Tensor<double> d_q, d_w, d_ws, d_k, d_v;
    hsa_backward_qw(d_o, q, mem, sel, d_q, d_w, d_ws);
    hsa_backward_kv(d_o, q, mem, sel, maps, d_ws, d_k, d_v);

    const double p = std::exp(qv * kv) / (1.0 + std::exp(qv * kv));
    CHECK(d_q.at(1, 0, 0, 0) == doctest::Approx(wv * vv * kv * p * (1 - p)).epsilon(1e-12));
    CHECK(d_w.at(1, 0, 0) == doctest::Approx(p * vv).epsilon(1e-12));
    CHECK(d_k[0] == doctest::Approx(wv * vv * qv * p * (1 - p)).epsilon(1e-12));
    CHECK(d_v[0] == doctest::Approx(wv * p).epsilon(1e-12));
  }

  TEST_CASE("gradcheck on Q and w with selection held fixed") {
    Instance in = make_instance(119, 16, 4, 2, 1, 2, 4);
    Tensor<double> coeff({in.l, in.g, in.h, in.d_h});
    Rng rng(120);
    for (auto& v : coeff.flat()) v = rng.normal();

    auto f = [&]() -> double {
      Tensor<double> o;
      hsa_forward_blocked(in.q, in.mem, in.sel, o);
      double s = 0;
      for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * coeff[i];
      return s;
    };
    Tensor<double> d_q, d_w, d_ws, d_k, d_v;
    hsa_backward_qw(coeff, in.q, in.mem, in.sel, d_q, d_w, d_ws);
    hsa_backward_kv(coeff, in.q, in.mem, in.sel, in.maps, d_ws, d_k, d_v);

    GradCheckOptions opts;
    opts.tol = 1e-6;
    opts.max_entries_per_param = 32;
    const auto report = gradcheck(
        f,
        {{"q", &in.q, &d_q},
         {"weights", &in.sel.weights, &d_w},
         {"k_attn", &in.mem.K_attn, &d_k},
         {"v_attn", &in.mem.V_attn, &d_v}},
        opts);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-6);
  }

  TEST_CASE("unselected chunks receive exactly zero K/V gradient") {
    Instance in = make_instance(121, 32, 8, 2, 1, 2, 4);
    Tensor<double> d_o({in.l, in.g, in.h, in.d_h});
    Rng rng(122);
    for (auto& v : d_o.flat()) v = rng.normal();
    Tensor<double> d_q, d_w, d_ws, d_k, d_v;
    hsa_backward_qw(d_o, in.q, in.mem, in.sel, d_q, d_w, d_ws);
    hsa_backward_kv(d_o, in.q, in.mem, in.sel, in.maps, d_ws, d_k, d_v);
    const std::size_t victim = in.mem.n_chunks - 1;  // never eligible
    for (std::size_t i = 0; i < in.mem.chunk_kv_elems(); ++i) {
      CHECK(d_k[victim * in.mem.chunk_kv_elems() + i] == 0.0);
      CHECK(d_v[victim * in.mem.chunk_kv_elems() + i] == 0.0);
    }
  }

  TEST_CASE("recomputed probabilities are bit-identical across phases") {
    // Both backward phases recompute P through token_chunk_probs; verify the
    // shared code path agrees with a direct call byte for byte.
    Instance in = make_instance(123, 8, 4, 1, 1, 2, 4);
    const std::size_t t = 7;
    const std::int32_t c = in.sel.sorted_indices.at(t, 0, 0);
    REQUIRE(c != kNoChunk);
    std::vector<double> p1(in.h * in.S), p2(in.h * in.S);
    token_chunk_probs(&in.q.at(t, 0, 0, 0), in.mem.k_chunk(std::size_t(c)), 0, in.h, in.d_h, in.S,
                      in.g, p1.data());
    token_chunk_probs(&in.q.at(t, 0, 0, 0), in.mem.k_chunk(std::size_t(c)), 0, in.h, in.d_h, in.S,
                      in.g, p2.data());
    CHECK(std::memcmp(p1.data(), p2.data(), p1.size() * sizeof(double)) == 0);
  }

  TEST_CASE("inconsistent inverse maps are rejected") {
    Instance in = make_instance(125, 16, 4, 2, 1, 2, 4);
    Tensor<double> d_o({in.l, in.g, in.h, in.d_h});
    Tensor<double> d_q, d_w, d_ws, d_k, d_v;
    hsa_backward_qw(d_o, in.q, in.mem, in.sel, d_q, d_w, d_ws);
    // Corrupt R at a selected slot.
    bool corrupted = false;
    for (std::size_t t = 0; t < in.l && !corrupted; ++t) {
      for (std::size_t c = 0; c < in.mem.n_chunks && !corrupted; ++c) {
        if (in.maps.M.at(t, 0, c)) {
          in.maps.R.at(t, 0, c) = static_cast<std::int32_t>(in.K + 3);
          corrupted = true;
        }
      }
    }
    REQUIRE(corrupted);
    CHECK_THROWS_AS(hsa_backward_kv(d_o, in.q, in.mem, in.sel, in.maps, d_ws, d_k, d_v),
                    ContractError);
  }
}
