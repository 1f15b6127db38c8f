#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "hsalab/ops.hpp"
#include "hsalab/selection.hpp"

using namespace hsalab;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

TEST_SUITE("selection") {
  TEST_CASE("eligibility is strict chunk completeness") {
    // t=100, S=64: only chunk 0 (tokens 0..63) is complete before t.
    CHECK(chunk_eligible(0, 100, 64));
    CHECK(!chunk_eligible(1, 100, 64));
    // t=63, S=64: nothing selectable yet.
    CHECK(!chunk_eligible(0, 63, 64));
    // boundary: chunk 0 becomes selectable exactly at t=64.
    CHECK(chunk_eligible(0, 64, 64));
  }

  TEST_CASE("score row masks ineligible chunks") {
    const std::size_t g = 1, d_g = 4, n = 3;
    std::vector<double> q(d_g, 1.0);
    std::vector<double> k_slc(n * d_g);
    for (std::size_t i = 0; i < n * d_g; ++i) k_slc[i] = 0.5;
    std::vector<double> out(n);
    score_chunks_row(q.data(), k_slc.data(), n, /*t=*/9, /*S=*/4, g, d_g, out.data());
    // t=9, S=4: chunks 0 (ends at 3) and 1 (ends at 7) are eligible.
    CHECK(out[0] == doctest::Approx(4 * 0.5 / 2.0));  // dot 2.0 scaled by 1/sqrt(4)
    CHECK(out[1] == out[0]);
    CHECK(out[2] == kNegInf);

    // Orthogonal query scores zero before masking.
    std::vector<double> q2 = {1, -1, 1, -1};
    score_chunks_row(q2.data(), k_slc.data(), n, 9, 4, g, d_g, out.data());
    CHECK(out[0] == doctest::Approx(0.0));
  }

  TEST_CASE("top-k basics and sentinel fill") {
    const double scores[] = {0.9, 0.1, 0.5};
    std::int32_t idx[2];
    select_topk_row(scores, 3, 2, idx);
    CHECK(idx[0] == 0);
    CHECK(idx[1] == 2);

    const double masked[] = {kNegInf, kNegInf, kNegInf};
    std::int32_t idx3[3];
    select_topk_row(masked, 3, 3, idx3);
    CHECK(idx3[0] == kNoChunk);
    CHECK(idx3[1] == kNoChunk);
    CHECK(idx3[2] == kNoChunk);
  }

  TEST_CASE("ties break toward the more recent chunk") {
    const double scores[] = {0.5, 0.5, 0.5, 0.2};
    std::int32_t idx[2];
    select_topk_row(scores, 4, 2, idx);
    CHECK(idx[0] == 2);
    CHECK(idx[1] == 1);
  }

  TEST_CASE("top-k equals a full-sort oracle on fuzzed rows") {
    Rng rng(29);
    for (int trial = 0; trial < 10000; ++trial) {
      const std::size_t n = 1 + rng.uniform_int(24);
      const std::size_t K = 1 + rng.uniform_int(8);
      std::vector<double> scores(n);
      for (auto& s : scores) {
        s = rng.uniform_int(8) == 0 ? kNegInf : std::floor(rng.normal() * 4.0) / 4.0;
      }
      std::vector<std::int32_t> got(K);
      select_topk_row(scores.data(), n, K, got.data());

      // Oracle: full sort by (score desc, id desc), finite only.
      std::vector<std::int32_t> ids;
      for (std::size_t i = 0; i < n; ++i)
        if (scores[i] > kNegInf) ids.push_back(static_cast<std::int32_t>(i));
      std::sort(ids.begin(), ids.end(), [&](std::int32_t a, std::int32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a > b;
      });
      for (std::size_t k = 0; k < K; ++k) {
        const std::int32_t expect = k < ids.size() ? ids[k] : kNoChunk;
        REQUIRE(got[k] == expect);
      }
    }
  }

  TEST_CASE("stick-breaking exact values") {
    // one chunk, s=0
    {
      const double s[] = {0.0};
      const std::int32_t sorted[] = {0};
      double w[1];
      stick_breaking_row(s, sorted, 1, w);
      CHECK(w[0] == doctest::Approx(0.5));
    }
    // three chunks, all s=0: repeated halving
    {
      const double s[] = {0.0, 0.0, 0.0};
      const std::int32_t sorted[] = {2, 1, 0};
      double w[3];
      stick_breaking_row(s, sorted, 3, w);
      CHECK(w[0] == doctest::Approx(0.5));
      CHECK(w[1] == doctest::Approx(0.25));
      CHECK(w[2] == doctest::Approx(0.125));
    }
    // two chunks with s=[ln 3, 0] after sort: sigmoid(ln 3) = 3/4 exactly
    {
      const double s[] = {std::log(3.0), 0.0};
      const std::int32_t sorted[] = {0, 1};
      double w[2];
      stick_breaking_row(s, sorted, 2, w);
      CHECK(w[0] == doctest::Approx(0.75).epsilon(1e-12));
      CHECK(w[1] == doctest::Approx(0.125).epsilon(1e-12));
    }
    // sentinels get zero weight and do not consume stick
    {
      const double s[] = {0.0, 0.0};
      const std::int32_t sorted[] = {1, kNoChunk, kNoChunk};
      double w[3];
      stick_breaking_row(s, sorted, 3, w);
      CHECK(w[0] == doctest::Approx(0.5));
      CHECK(w[1] == 0.0);
      CHECK(w[2] == 0.0);
    }
  }

  TEST_CASE("stick-breaking backward: K=1 sigmoid derivative") {
    const double s[] = {0.0};
    const std::int32_t sorted[] = {0};
    const double dw[] = {1.0};
    double ds[1] = {0.0};
    stick_breaking_backward_row(dw, s, sorted, 1, ds);
    CHECK(ds[0] == doctest::Approx(0.25));  // sigma'(0)
  }

  TEST_CASE("stick-breaking backward: zero upstream gives zero") {
    const double s[] = {0.3, -0.7, 1.1};
    const std::int32_t sorted[] = {2, 1, 0};
    const double dw[] = {0.0, 0.0, 0.0};
    double ds[3] = {0.0, 0.0, 0.0};
    stick_breaking_backward_row(dw, s, sorted, 3, ds);
    for (double v : ds) CHECK(v == 0.0);
  }

  TEST_CASE("stick-breaking backward matches central differences") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 2 + rng.uniform_int(12);
      const std::size_t K = 1 + rng.uniform_int(std::min<std::size_t>(n, 6));
      std::vector<double> scores(n);
      for (auto& s : scores) s = rng.normal();
      std::vector<std::int32_t> idx(K), sorted(K);
      select_topk_row(scores.data(), n, K, idx.data());
      sort_indices_desc(idx.data(), K, sorted.data());
      std::vector<double> coeff(K);
      for (auto& c : coeff) c = rng.normal();

      auto f = [&](const std::vector<double>& sc) {
        std::vector<double> w(K);
        stick_breaking_row(sc.data(), sorted.data(), K, w.data());
        double acc = 0;
        for (std::size_t k = 0; k < K; ++k) acc += coeff[k] * w[k];
        return acc;
      };

      std::vector<double> ds(n, 0.0);
      stick_breaking_backward_row(coeff.data(), scores.data(), sorted.data(), K, ds.data());

      const double eps = 1e-6;
      for (std::size_t j = 0; j < n; ++j) {
        auto sp = scores, sm = scores;
        sp[j] += eps;
        sm[j] -= eps;
        const double num = (f(sp) - f(sm)) / (2 * eps);
        CHECK(ds[j] == doctest::Approx(num).epsilon(1e-5));
      }
    }
  }

  TEST_CASE("weight invariants: bounds, budget, normalization identity") {
    Rng rng(37);
    for (int trial = 0; trial < 500; ++trial) {
      const std::size_t n = 1 + rng.uniform_int(20);
      const std::size_t K = 1 + rng.uniform_int(8);
      std::vector<double> scores(n);
      for (auto& s : scores) s = rng.normal() * 2.5;
      std::vector<std::int32_t> idx(K), sorted(K);
      std::vector<double> w(K);
      select_topk_row(scores.data(), n, K, idx.data());
      sort_indices_desc(idx.data(), K, sorted.data());
      stick_breaking_row(scores.data(), sorted.data(), K, w.data());
      double sum = 0, prod = 1;
      for (std::size_t k = 0; k < K; ++k) {
        REQUIRE(w[k] >= 0.0);
        REQUIRE(w[k] <= 1.0);
        sum += w[k];
        if (sorted[k] != kNoChunk) prod *= 1.0 - sigmoid(scores[sorted[k]]);
      }
      REQUIRE(sum <= 1.0 + 1e-12);
      REQUIRE(std::fabs(sum - (1.0 - prod)) < 1e-6);
    }
  }

  TEST_CASE("inverse maps match the definition and round trip") {
    // Sorted selection [2, 1] for one row.
    SelectionResult<double> sel;
    sel.l = 3;
    sel.g = 1;
    sel.n_chunks = 4;
    sel.K = 2;
    sel.scores.resize({3, 1, 4});
    sel.indices.resize({3, 1, 2});
    sel.sorted_indices.resize({3, 1, 2});
    sel.weights.resize({3, 1, 2});
    sel.indices.fill(kNoChunk);
    sel.sorted_indices.fill(kNoChunk);
    sel.sorted_indices.at(2, 0, 0) = 2;
    sel.sorted_indices.at(2, 0, 1) = 1;

    const auto maps = build_inverse_maps(sel);
    CHECK(maps.M.at(2, 0, 1) == 1);
    CHECK(maps.M.at(2, 0, 2) == 1);
    CHECK(maps.M.at(2, 0, 0) == 0);
    CHECK(maps.R.at(2, 0, 2) == 0);
    CHECK(maps.R.at(2, 0, 1) == 1);
    // Row 0 selected nothing.
    for (std::size_t c = 0; c < 4; ++c) CHECK(maps.M.at(0, 0, c) == 0);
  }

  TEST_CASE("inverse maps reconstruct the sorted list on fuzzed selections") {
    Rng rng(41);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 2 + rng.uniform_int(16);
      const std::size_t K = 1 + rng.uniform_int(6);
      const std::size_t l = 1 + rng.uniform_int(12);
      SelectionResult<double> sel;
      sel.l = l;
      sel.g = 1;
      sel.n_chunks = n;
      sel.K = K;
      sel.scores.resize({l, 1, n});
      sel.indices.resize({l, 1, K});
      sel.sorted_indices.resize({l, 1, K});
      sel.weights.resize({l, 1, K});
      for (std::size_t t = 0; t < l; ++t) {
        std::vector<double> scores(n);
        const std::size_t eligible = std::min<std::size_t>(t, n);
        for (std::size_t c = 0; c < n; ++c)
          scores[c] = c < eligible ? rng.normal() : kNegInf;
        select_topk_row(scores.data(), n, K, &sel.indices.at(t, 0, 0));
        sort_indices_desc(&sel.indices.at(t, 0, 0), K, &sel.sorted_indices.at(t, 0, 0));
      }
      const auto maps = build_inverse_maps(sel);
      for (std::size_t t = 0; t < l; ++t) {
        std::vector<std::int32_t> rebuilt;
        std::vector<std::pair<std::int32_t, std::int32_t>> pairs;  // (rank, chunk)
        for (std::size_t c = 0; c < n; ++c) {
          if (maps.M.at(t, 0, c)) pairs.emplace_back(maps.R.at(t, 0, c), static_cast<std::int32_t>(c));
        }
        std::sort(pairs.begin(), pairs.end());
        for (auto& [rank, c] : pairs) rebuilt.push_back(c);
        for (std::size_t k = 0; k < K; ++k) {
          const std::int32_t expect = sel.sorted_indices.at(t, 0, k);
          const std::int32_t got = k < rebuilt.size() ? rebuilt[k] : kNoChunk;
          REQUIRE(got == expect);
        }
      }
    }
  }

  TEST_CASE("mean-pooled score basics") {
    ChunkMemory<double> mem;
    mem.n_chunks = 1;
    mem.S = 4;
    mem.d = 8;
    mem.g = 1;
    mem.d_h = 4;
    mem.K_attn.resize({1, 4, 4});
    mem.V_attn.resize({1, 4, 4});
    // All keys identical: r' equals q . k for that key (mean of equals).
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t c = 0; c < 4; ++c) mem.K_attn.at(0, s, c) = 0.25 * double(c);
    // Two heads of width 4 sharing the group's keys.
    std::vector<double> q = {1, 2, 3, 4, 0, 0, 0, 0};
    double expect = 0;
    for (std::size_t c = 0; c < 4; ++c) expect += q[c] * 0.25 * double(c);
    CHECK(mean_pooled_score(q.data(), mem, 0, 0) == doctest::Approx(expect));

    // Orthogonal query scores zero.
    std::vector<double> q0 = {0, 0, 0, 0, 0, 0, 0, 0};
    CHECK(mean_pooled_score(q0.data(), mem, 0, 0) == doctest::Approx(0.0));
  }

  TEST_CASE("mean-pooled ranking inverts against the softmax-mass oracle") {
    // Chunk A holds one high-logit token among strongly negative ones; chunk
    // B is uniformly mediocre. The mean-pooled score prefers B, the
    // softmax-mass oracle prefers A.
    const std::size_t S = 16, d_h = 4;
    ChunkMemory<double> mem;
    mem.n_chunks = 2;
    mem.S = S;
    mem.d = d_h;  // single head, single group
    mem.g = 1;
    mem.d_h = d_h;
    mem.K_attn.resize({2, S, d_h});
    mem.V_attn.resize({2, S, d_h});
    std::vector<double> q(d_h, 0.0);
    q[0] = 1.0;
    // Chunk A: token 0 has logit +8, the rest -8.
    mem.K_attn.at(0, 0, 0) = 8.0;
    for (std::size_t s = 1; s < S; ++s) mem.K_attn.at(0, s, 0) = -8.0;
    // Chunk B: all logits 0 (orthogonal keys).
    const double ra = mean_pooled_score(q.data(), mem, 0, 0);
    const double rb = mean_pooled_score(q.data(), mem, 0, 1);
    CHECK(ra < rb);  // mean-pooled prefers the mediocre chunk

    // Softmax-mass oracle over both chunks' tokens.
    std::vector<double> logits(2 * S);
    for (std::size_t s = 0; s < S; ++s) {
      logits[s] = mem.K_attn.at(0, s, 0);  // q = e_0
      logits[S + s] = 0.0;
    }
    std::vector<double> p(2 * S);
    softmax<double>(logits, std::span<double>(p.data(), 2 * S));
    double mass_a = 0, mass_b = 0;
    for (std::size_t s = 0; s < S; ++s) {
      mass_a += p[s];
      mass_b += p[S + s];
    }
    CHECK(mass_a > mass_b);  // the oracle prefers the chunk with the key token
  }
}
