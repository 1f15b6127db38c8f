#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "hsalab/check.hpp"

namespace hsalab {

// All dimensional hyperparameters of the model plus their derived quantities.
// The desk-scale defaults mirror the reference ratios at 1/8 width.
struct ModelConfig {
  std::size_t d = 128;         // model width
  std::size_t g = 1;           // query-head groups (each shares one KV head)
  std::size_t h = 4;           // query heads per group
  std::size_t d_h = 32;        // head width
  std::size_t S = 16;          // chunk size in tokens
  std::size_t K = 4;           // selected chunks per group
  std::size_t L = 8;           // backbone layer count (split into lower/upper)
  std::size_t G = 2;           // backbone layers per HSA block in the upper decoder
  std::size_t vocab = 256;     // vocabulary size
  std::size_t enc_layers = 1;  // chunk-encoder depth
  std::size_t seg_len = 256;   // memory-reset segment length in tokens

  std::size_t d_g() const { return h * d_h; }
  std::size_t n_hsa_layers() const { return L / (2 * G); }
  std::size_t lower_layers() const { return L / 2; }
  std::size_t upper_layers() const { return L / 2; }

  // Encoder MLP hidden width: 4d/3 rounded to the nearest multiple of 8.
  std::size_t mlp_hidden() const {
    const double target = 4.0 * static_cast<double>(d) / 3.0;
    std::size_t k = static_cast<std::size_t>(target / 8.0 + 0.5);
    if (k == 0) k = 1;
    return 8 * k;
  }

  void validate() const {
    HSALAB_CHECK_INPUT(d >= 1 && g >= 1 && h >= 1 && d_h >= 1, "config: dims must be positive");
    HSALAB_CHECK_INPUT(d == g * h * d_h, "config: d must equal g*h*d_h");
    HSALAB_CHECK_INPUT(S >= 1, "config: S must be >= 1");
    HSALAB_CHECK_INPUT(K >= 1, "config: K must be >= 1");
    HSALAB_CHECK_INPUT(L >= 2 && L % 2 == 0, "config: L must be even and >= 2");
    HSALAB_CHECK_INPUT(G >= 1 && (L / 2) % G == 0, "config: L/2 must be divisible by G");
    HSALAB_CHECK_INPUT(vocab >= 2, "config: vocab must be >= 2");
    HSALAB_CHECK_INPUT(enc_layers >= 1, "config: enc_layers must be >= 1");
    HSALAB_CHECK_INPUT(seg_len >= S && seg_len % S == 0, "config: seg_len must be a multiple of S");
  }

  // Analytic parameter count; audited against the instantiated model.
  std::size_t param_count() const {
    const std::size_t kv_width = g * d_h;
    std::size_t n = 0;
    n += vocab * d;                                     // embedding (head is tied)
    n += L * (4 * d * d + d);                           // recurrent layers: W_a,W_u,W_g,W_o + b_a
    n += S * d;                                         // encoder positional embedding
    n += enc_layers * (2 * d + 4 * d * d + 2 * d * mlp_hidden());
    n += d + 2 * d * d;                                 // selection norm gain, W_Q_slc, W_K_slc
    n += 2 * d * kv_width;                              // shared W_K, W_V
    n += n_hsa_layers() * (d + 2 * d * d);              // per HSA layer: gain, W_Q, W_out
    n += d;                                             // final norm gain
    return n;
  }
};

// Memory handling across segment boundaries during training.
enum class ResetMode { bptt_carry, zero_reset, random_carry };

inline const char* reset_mode_name(ResetMode m) {
  switch (m) {
    case ResetMode::bptt_carry: return "bptt_carry";
    case ResetMode::zero_reset: return "zero_reset";
    case ResetMode::random_carry: return "random_carry";
  }
  return "?";
}

inline ResetMode reset_mode_from_name(const std::string& s) {
  if (s == "bptt_carry") return ResetMode::bptt_carry;
  if (s == "zero_reset") return ResetMode::zero_reset;
  if (s == "random_carry") return ResetMode::random_carry;
  throw ConfigError("config: unknown mode '" + s + "'");
}

struct OptimConfig {
  double lr_peak = 2e-3;
  double lr_min = 4e-5;
  double warmup_ratio = 0.02;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double clip = 1.0;     // global gradient-norm clip
  std::size_t total_steps = 2000;
  std::size_t batch = 8;

  void validate() const {
    HSALAB_CHECK_INPUT(lr_peak >= 0 && lr_min >= 0, "config: learning rates must be nonnegative");
    HSALAB_CHECK_INPUT(warmup_ratio >= 0 && warmup_ratio < 1, "config: warmup_ratio in [0,1)");
    HSALAB_CHECK_INPUT(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "config: betas in [0,1)");
    HSALAB_CHECK_INPUT(total_steps >= 1, "config: total_steps must be >= 1");
    HSALAB_CHECK_INPUT(batch >= 1, "config: batch must be >= 1");
  }
};

struct TaskConfig {
  std::string task = "passkey";  // passkey | niah | copy | corpus
  std::size_t context_len = 512; // training sequence length
  std::size_t key_len = 4;
  std::string corpus_path;

  void validate() const {
    HSALAB_CHECK_INPUT(task == "passkey" || task == "niah" || task == "passkey_hard" ||
                           task == "niah_hard" || task == "copy" || task == "corpus",
                       "config: unknown task");
    HSALAB_CHECK_INPUT(context_len >= 8, "config: context_len too small");
    HSALAB_CHECK_INPUT(key_len >= 1, "config: key_len must be >= 1");
  }
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  TaskConfig task;
  ResetMode mode = ResetMode::bptt_carry;
  std::size_t checkpoint_every = 500;

  void validate() const {
    model.validate();
    optim.validate();
    task.validate();
    HSALAB_CHECK_INPUT(task.context_len % model.seg_len == 0 || task.context_len <= model.seg_len,
                       "config: context_len must be a multiple of seg_len (or fit in one segment)");
  }

  std::size_t warmup_steps() const {
    auto w = static_cast<std::size_t>(optim.warmup_ratio * static_cast<double>(optim.total_steps));
    return w < 1 ? 1 : w;
  }
};

// Flat key=value parsing. '#' starts a comment; blank lines ignored; unknown
// keys are rejected by name.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);
void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value);

}  // namespace hsalab
