#include "hsalab/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "hsalab/inference.hpp"
#include "hsalab/ops.hpp"

namespace hsalab {

namespace {

// Small model with active HSA layers (w_out randomized away from its zero
// init so attention, selection and the encoder all carry signal).
template <typename T>
RambaModel<T> make_probe_model(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  RambaModel<T> model(cfg, rng);
  const T scale = T(1) / std::sqrt(static_cast<T>(cfg.d));
  for (auto& hp : model.params().hsa) {
    for (auto& v : hp.w_out.flat()) v = static_cast<T>(rng.normal()) * scale;
  }
  return model;
}

ModelConfig small_probe_config() {
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

template <typename T>
FuzzResult fuzz_forward_equivalence(std::uint64_t seed, std::size_t iterations, double tol) {
  FuzzResult result;
  const std::size_t s_choices[] = {4, 8, 16};
  for (std::size_t it = 0; it < iterations; ++it) {
    const std::uint64_t iter_seed = hash_mix(seed, it);
    Rng rng(iter_seed);
    const std::size_t S = s_choices[rng.uniform_int(3)];
    const std::size_t g = 1 + rng.uniform_int(2);
    const std::size_t h = 1 + rng.uniform_int(4);
    const std::size_t d_h = 1 + rng.uniform_int(16);
    const std::size_t K = 1 + rng.uniform_int(8);
    const std::size_t l = 1 + rng.uniform_int(256);
    const std::size_t d = g * h * d_h;
    const std::size_t n = l / S;

    ChunkMemory<T> mem;
    mem.n_chunks = n;
    mem.S = S;
    mem.d = d;
    mem.g = g;
    mem.d_h = d_h;
    mem.K_attn.resize({std::max<std::size_t>(n, 1), S, g * d_h});
    mem.V_attn.resize({std::max<std::size_t>(n, 1), S, g * d_h});
    mem.K_slc.resize({std::max<std::size_t>(n, 1), d});
    for (auto& v : mem.K_attn.flat()) v = static_cast<T>(rng.normal());
    for (auto& v : mem.V_attn.flat()) v = static_cast<T>(rng.normal());
    for (auto& v : mem.K_slc.flat()) v = static_cast<T>(rng.normal());

    Tensor<T> q_slc({l, d});
    for (auto& v : q_slc.flat()) v = static_cast<T>(rng.normal());
    const SelectionResult<T> sel = select_all(q_slc, mem, K, S);

    Tensor<T> q({l, g, h, d_h});
    for (auto& v : q.flat()) v = static_cast<T>(rng.normal());

    Tensor<T> o_naive, o_blocked;
    hsa_forward_naive(q, mem, sel, o_naive);
    hsa_forward_blocked(q, mem, sel, o_blocked);

    for (std::size_t i = 0; i < o_naive.size(); ++i) {
      const double a = static_cast<double>(o_naive[i]);
      const double b = static_cast<double>(o_blocked[i]);
      const double rel = relative_error(a, b);
      if (rel > result.max_rel_err) result.max_rel_err = rel;
      if (rel > tol && result.pass) {
        result.pass = false;
        result.failing_seed = iter_seed;
        std::ostringstream os;
        os << "blocked/naive diverge: rel=" << rel << " at flat index " << i << " (l=" << l
           << " S=" << S << " K=" << K << " g=" << g << " h=" << h << " d_h=" << d_h << ")";
        result.detail = os.str();
      }
    }
  }
  return result;
}

bool causality_trial(std::uint64_t seed, std::string* detail) {
  using T = float;
  Rng rng(hash_mix(seed, 0xca05a1ULL));
  const ModelConfig cfg = small_probe_config();
  RambaModel<T> model = make_probe_model<T>(cfg, hash_mix(seed, 1));

  const std::size_t l = 8 + rng.uniform_int(89);
  std::vector<std::int32_t> tokens(l);
  for (auto& t : tokens) t = static_cast<std::int32_t>(rng.uniform_int(cfg.vocab));
  const std::size_t j = rng.uniform_int(l);
  std::vector<std::int32_t> perturbed = tokens;
  perturbed[j] =
      static_cast<std::int32_t>((perturbed[j] + 1 + rng.uniform_int(cfg.vocab - 1)) % cfg.vocab);

  MemoryPlan<T> plan;
  Tensor<T> logits_a, logits_b;
  model.forward(tokens, plan, nullptr, logits_a, nullptr);
  model.forward(perturbed, plan, nullptr, logits_b, nullptr);

  for (std::size_t t = 0; t < j; ++t) {
    if (std::memcmp(logits_a.data() + t * cfg.vocab, logits_b.data() + t * cfg.vocab,
                    cfg.vocab * sizeof(T)) != 0) {
      if (detail != nullptr) {
        std::ostringstream os;
        os << "logits at position " << t << " changed after perturbing position " << j
           << " (l=" << l << ", seed=" << seed << ")";
        *detail = os.str();
      }
      return false;
    }
  }
  return true;
}

FuzzResult stick_breaking_fuzz(std::uint64_t seed, std::size_t rows) {
  FuzzResult result;
  auto fail = [&](std::uint64_t s, const std::string& why) {
    if (result.pass) {
      result.pass = false;
      result.failing_seed = s;
      result.detail = why;
    }
  };
  for (std::size_t it = 0; it < rows; ++it) {
    const std::uint64_t row_seed = hash_mix(seed, it);
    Rng rng(row_seed);
    const std::size_t n = 1 + rng.uniform_int(32);
    const std::size_t K = 1 + rng.uniform_int(8);
    std::vector<double> scores(n);
    for (auto& s : scores) s = rng.normal() * 3.0;

    std::vector<std::int32_t> idx(K), sorted(K);
    std::vector<double> w(K);
    select_topk_row(scores.data(), n, K, idx.data());
    sort_indices_desc(idx.data(), K, sorted.data());
    stick_breaking_row(scores.data(), sorted.data(), K, w.data());

    double sum = 0.0, prod = 1.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (!(w[k] >= 0.0 && w[k] <= 1.0)) fail(row_seed, "weight outside [0,1]");
      sum += w[k];
      if (sorted[k] != kNoChunk) prod *= 1.0 - sigmoid(scores[sorted[k]]);
    }
    if (sum > 1.0 + 1e-12) fail(row_seed, "weights sum above 1");
    if (std::fabs(sum - (1.0 - prod)) > 1e-6) fail(row_seed, "normalization identity violated");
    result.max_rel_err = std::max(result.max_rel_err, std::fabs(sum - (1.0 - prod)));

    // Equal scores: strictly decreasing weights along the sorted list.
    const double eq = rng.normal();
    std::vector<double> eq_scores(n, eq);
    select_topk_row(eq_scores.data(), n, K, idx.data());
    sort_indices_desc(idx.data(), K, sorted.data());
    stick_breaking_row(eq_scores.data(), sorted.data(), K, w.data());
    for (std::size_t k = 1; k < K; ++k) {
      if (sorted[k] == kNoChunk) break;
      if (!(w[k] < w[k - 1])) fail(row_seed, "recency monotonicity violated under equal scores");
    }
  }
  return result;
}

template <typename T>
bool residency_trial(std::uint64_t seed, std::size_t decode_steps, bool file_backed,
                     const std::string& scratch_dir, std::string* detail) {
  Rng rng(hash_mix(seed, 0x0f10adULL));
  const ModelConfig cfg = small_probe_config();
  RambaModel<T> model = make_probe_model<T>(cfg, hash_mix(seed, 2));

  const std::size_t prompt_len = cfg.S * (3 + rng.uniform_int(4)) + rng.uniform_int(cfg.S);
  std::vector<std::int32_t> prompt(prompt_len);
  for (auto& t : prompt) t = static_cast<std::int32_t>(rng.uniform_int(cfg.vocab));

  DecodeSession<T> resident(model, StoreBackend::resident);
  std::string store_path;
  if (file_backed) {
    std::filesystem::create_directories(scratch_dir);
    store_path = scratch_dir + "/residency_store_" + std::to_string(seed) + ".bin";
  }
  DecodeSession<T> offloaded(model,
                             file_backed ? StoreBackend::offload_file : StoreBackend::offload_memory,
                             store_path);
  resident.prefill(prompt);
  offloaded.prefill(prompt);

  bool ok = true;
  std::ostringstream why;
  for (std::size_t i = 0; i < decode_steps && ok; ++i) {
    const std::int32_t a = resident.greedy_pick();
    const std::int32_t b = offloaded.greedy_pick();
    if (a != b) {
      ok = false;
      why << "token " << i << " diverged: resident=" << a << " offloaded=" << b;
      break;
    }
    const std::size_t t = offloaded.position();  // position about to be processed
    resident.decode_step(a);
    offloaded.decode_step(b);

    // Per-step staged accounting: min(K, eligible) distinct chunks per group
    // (g=1 here), S*g*d_h numbers per tensor per chunk.
    const std::size_t eligible = std::min(offloaded.store().n_chunks(), t / cfg.S);
    const std::size_t expect_chunks = std::min(cfg.K, eligible);
    const auto& sc = offloaded.store().counters();
    if (sc.staged_chunks_last_step != expect_chunks) {
      ok = false;
      why << "staged chunk count " << sc.staged_chunks_last_step << " != expected "
          << expect_chunks << " at step " << i;
      break;
    }
    if (sc.staged_elems_last_step != expect_chunks * cfg.S * cfg.g * cfg.d_h) {
      ok = false;
      why << "staged element count mismatch at step " << i;
      break;
    }
  }
  if (!store_path.empty()) std::filesystem::remove(store_path);
  if (!ok && detail != nullptr) *detail = why.str();
  return ok;
}

ModelConfig tiny_gradcheck_config() {
  ModelConfig cfg;
  cfg.d = 32;
  cfg.g = 1;
  cfg.h = 2;
  cfg.d_h = 16;
  cfg.S = 8;
  cfg.K = 2;
  cfg.L = 4;
  cfg.G = 1;
  cfg.vocab = 64;
  cfg.enc_layers = 1;
  cfg.seg_len = 32;
  return cfg;
}

GradCheckReport model_gradcheck(const ModelConfig& cfg, std::size_t seq_len, std::uint64_t seed,
                                const GradCheckOptions& opts) {
  using T = double;

  for (int attempt = 0; attempt < 8; ++attempt) {
    const std::uint64_t try_seed = hash_mix(seed, static_cast<std::uint64_t>(attempt));
    RambaModel<T> model = make_probe_model<T>(cfg, try_seed);
    Rng rng(hash_mix(try_seed, 0xdadaULL));
    std::vector<std::int32_t> tokens(seq_len);
    for (auto& t : tokens) t = static_cast<std::int32_t>(rng.uniform_int(cfg.vocab));
    std::vector<std::int32_t> targets(seq_len);
    for (std::size_t t = 0; t + 1 < seq_len; ++t) targets[t] = tokens[t + 1];
    targets[seq_len - 1] = -1;

    // zero_reset plan with an internal boundary exercises gradient truncation.
    MemoryPlan<T> plan;
    if (seq_len > cfg.seg_len) {
      plan.seg_len = cfg.seg_len;
      plan.replace_at_boundaries = true;
      plan.replacements.assign((seq_len - 1) / cfg.seg_len, StateSnapshot<T>{});
    }

    // Central differences step over a discrete top-K: require a solid margin
    // between the K-th selected and the best unselected score so eps-sized
    // nudges cannot flip the selected set.
    {
      ModelTape<T> tape;
      Tensor<T> logits;
      model.forward(tokens, plan, &tape, logits, nullptr);
      double margin = 1e30;
      const auto& sel = tape.sel;
      for (std::size_t t = 0; t < sel.l; ++t) {
        for (std::size_t gr = 0; gr < sel.g; ++gr) {
          double kth = 1e30;
          std::size_t filled = 0;
          for (std::size_t k = 0; k < sel.K; ++k) {
            if (sel.indices.at(t, gr, k) == kNoChunk) break;
            kth = static_cast<double>(
                sel.scores.at(t, gr, static_cast<std::size_t>(sel.indices.at(t, gr, k))));
            ++filled;
          }
          if (filled < sel.K) continue;  // nothing unselected competes
          double best_out = -1e30;
          for (std::size_t c = 0; c < sel.n_chunks; ++c) {
            if (!chunk_eligible(c, t, cfg.S)) continue;
            bool selected = false;
            for (std::size_t k = 0; k < filled; ++k) {
              if (sel.indices.at(t, gr, k) == static_cast<std::int32_t>(c)) selected = true;
            }
            if (!selected) best_out = std::max(best_out, static_cast<double>(sel.scores.at(t, gr, c)));
          }
          if (best_out > -1e29) margin = std::min(margin, kth - best_out);
        }
      }
      if (margin < 1e-3) continue;  // reseed; this draw is too close to a flip
    }

    std::size_t count = 0;
    for (auto y : targets)
      if (y >= 0) ++count;

    auto f = [&]() -> double {
      Tensor<T> logits;
      model.forward(tokens, plan, nullptr, logits, nullptr);
      return static_cast<double>(RambaModel<T>::loss(logits, targets));
    };

    RambaParams<T> grads;
    grads.init_zero(cfg);
    {
      ModelTape<T> tape;
      Tensor<T> logits;
      model.forward(tokens, plan, &tape, logits, nullptr);
      Tensor<T> d_logits;
      RambaModel<T>::loss_backward(logits, targets, count, d_logits);
      model.backward(tape, d_logits, grads);
    }

    std::vector<GradCheckParam> params;
    std::vector<Tensor<T>*> pts, gts;
    std::vector<std::string> names;
    model.params().visit([&](const std::string& name, Tensor<T>& t) {
      pts.push_back(&t);
      names.push_back(name);
    });
    grads.visit([&](const std::string&, Tensor<T>& t) { gts.push_back(&t); });
    for (std::size_t i = 0; i < pts.size(); ++i) {
      params.push_back(GradCheckParam{names[i], pts[i], gts[i]});
    }
    return gradcheck(f, params, opts);
  }
  throw ContractError("model_gradcheck: no seed with a safe top-K margin found");
}

template FuzzResult fuzz_forward_equivalence<float>(std::uint64_t, std::size_t, double);
template FuzzResult fuzz_forward_equivalence<double>(std::uint64_t, std::size_t, double);
template bool residency_trial<float>(std::uint64_t, std::size_t, bool, const std::string&,
                                     std::string*);
template bool residency_trial<double>(std::uint64_t, std::size_t, bool, const std::string&,
                                      std::string*);

}  // namespace hsalab
