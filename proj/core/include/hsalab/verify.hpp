#pragma once

#include <cstdint>
#include <string>

#include "hsalab/gradcheck.hpp"
#include "hsalab/model.hpp"

namespace hsalab {

struct FuzzResult {
  bool pass = true;
  double max_rel_err = 0.0;
  std::uint64_t failing_seed = 0;
  std::string detail;
};

// Blocked-vs-naive forward equivalence on randomly drawn configurations
// (l <= 256, S in {4,8,16}, K <= 8, g <= 2, h <= 4, d_h <= 16) with random
// memory and selection.
template <typename T>
FuzzResult fuzz_forward_equivalence(std::uint64_t seed, std::size_t iterations, double tol);

// Whole-model causality: perturb one token, logits at earlier positions must
// be unchanged bit-for-bit.
bool causality_trial(std::uint64_t seed, std::string* detail);

// Stick-breaking invariants on fuzzed score rows: weights in [0,1], sum <= 1,
// the normalization identity to 1e-6, and recency monotonicity under equal
// scores.
FuzzResult stick_breaking_fuzz(std::uint64_t seed, std::size_t rows);

// Greedy decode with an offloaded store (memory- or file-backed) must produce
// token-identical output to the fully resident store.
template <typename T>
bool residency_trial(std::uint64_t seed, std::size_t decode_steps, bool file_backed,
                     const std::string& scratch_dir, std::string* detail);

// End-to-end finite-difference check of every parameter tensor on a tiny
// config. Retries a few seeds if the drawn instance has a top-K margin too
// small for clean central differences (selection flips would poison the
// numeric gradient).
GradCheckReport model_gradcheck(const ModelConfig& cfg, std::size_t seq_len, std::uint64_t seed,
                                const GradCheckOptions& opts);

// Tiny configuration used by the gradient-check gate.
ModelConfig tiny_gradcheck_config();

}  // namespace hsalab
