#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsalab/backbone.hpp"
#include "hsalab/checkpoint.hpp"
#include "hsalab/chunking.hpp"
#include "hsalab/config.hpp"
#include "hsalab/hsa_op.hpp"
#include "hsalab/selection.hpp"

namespace hsalab {

template <typename T>
struct HsaLayerParams {
  Tensor<T> norm_gain;  // d
  Tensor<T> w_q;        // d x d
  Tensor<T> w_out;      // d x d, zero-initialized so the layer starts as identity

  void init(std::size_t d, Rng& rng);
  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Tensor<T>&)>& fn);
};

template <typename T>
struct ModelTape {
  std::vector<std::int32_t> tokens;
  Tensor<T> x_embed;  // l x d
  std::vector<RecurrentTape<T>> lower_tapes;
  Tensor<T> h_mid;    // l x d, lower-decoder output
  ChunkMemory<T> mem;
  std::vector<EncoderChunkTape<T>> enc_tapes;
  Tensor<T> sel_normed;  // l x d
  Tensor<T> q_slc;       // l x d
  SelectionResult<T> sel;
  InverseSelectionMaps maps;
  struct HsaLayerTape {
    Tensor<T> normed;  // l x d
    Tensor<T> q;       // l x g x h x d_h
    Tensor<T> o;       // l x g x h x d_h
    Tensor<T> h_in;    // l x d residual-stream input (needed for the pre-norm)
  };
  std::vector<HsaLayerTape> hsa_tapes;
  std::vector<RecurrentTape<T>> upper_tapes;
  Tensor<T> h_last;   // l x d, stream before the final norm
  Tensor<T> h_final;  // l x d, after the final norm
};

// Aggregate of every learnable tensor; also used as the gradient container.
template <typename T>
struct RambaParams {
  ModelConfig cfg;
  Tensor<T> embedding;  // vocab x d, tied with the output head
  std::vector<RecurrentLayerParams<T>> lower;
  EncoderParams<T> encoder;
  SelectionParams<T> selection;
  Tensor<T> w_k, w_v;  // (g*d_h) x d shared KV projections
  std::vector<HsaLayerParams<T>> hsa;
  std::vector<RecurrentLayerParams<T>> upper;
  Tensor<T> final_gain;  // d

  void init(const ModelConfig& config, Rng& rng);
  void init_zero(const ModelConfig& config);  // zero tensors of matching shapes
  void visit(const std::function<void(const std::string&, Tensor<T>&)>& fn);
  void visit_const(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const;
  void zero_all();
  std::size_t num_params() const;
};

template <typename T>
class RambaModel {
 public:
  RambaModel() = default;
  RambaModel(const ModelConfig& cfg, Rng& rng) { params_.init(cfg, rng); }

  const ModelConfig& cfg() const { return params_.cfg; }
  RambaParams<T>& params() { return params_; }
  const RambaParams<T>& params() const { return params_; }

  // Full-sequence forward. tape may be null (inference). When
  // logits_last_only is set only the final row of logits is produced (the
  // tensor is 1 x vocab). mem_out/h_mid_out expose what the decode engine
  // needs to commit chunks.
  void forward(std::span<const std::int32_t> tokens, const MemoryPlan<T>& plan,
               ModelTape<T>* tape, Tensor<T>& logits, StateSnapshot<T>* final_states,
               ChunkMemory<T>* mem_out = nullptr, Tensor<T>* h_mid_out = nullptr,
               bool logits_last_only = false) const;

  // Mean cross-entropy over positions whose target is >= 0.
  static T loss(const Tensor<T>& logits, std::span<const std::int32_t> targets);
  static void loss_backward(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                            std::size_t total_count, Tensor<T>& d_logits);

  // Accumulates parameter gradients into grads.
  void backward(const ModelTape<T>& tape, const Tensor<T>& d_logits, RambaParams<T>& grads) const;

  void save_checkpoint(CheckpointWriter& w, const std::string& prefix = "model.") const;
  void load_checkpoint(const CheckpointReader& r, const std::string& prefix = "model.");

 private:
  RambaParams<T> params_;
};

// ---------------------------------------------------------------------------
// Optimizer and training
// ---------------------------------------------------------------------------

// Linear warmup to lr_peak, then cosine decay to lr_min.
double lr_at(std::size_t step, const OptimConfig& optim, std::size_t warmup_steps);

template <typename T>
class AdamW {
 public:
  void attach(RambaParams<T>& params);  // fixes the parameter order

  // Decoupled weight decay applied to rank >= 2 tensors only.
  void step(RambaParams<T>& params, RambaParams<T>& grads, double lr, const OptimConfig& optim);

  std::size_t steps_taken() const { return t_; }

  void save(CheckpointWriter& w) const;
  void load(const CheckpointReader& r, RambaParams<T>& params);

 private:
  std::vector<Tensor<T>*> order_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

template <typename T>
struct TrainLane {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;  // -1 = position excluded from the loss
};

struct TrainMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double tokens_per_s = 0.0;
};

// One optimizer step: per-lane forward/backward (lanes run in parallel with
// per-lane gradient buffers reduced in lane order, so results are identical
// for any worker count), global-norm clip, AdamW update.
template <typename T>
class Trainer {
 public:
  Trainer(RambaModel<T>& model, const RunConfig& run, std::uint64_t seed);

  using BatchProvider =
      std::function<TrainLane<T>(std::size_t step, std::size_t lane)>;

  TrainMetrics step(const BatchProvider& provider);

  std::size_t current_step() const { return step_; }
  const ResetScheduler<T>& scheduler() const { return scheduler_; }

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  RambaModel<T>& model_;
  RunConfig run_;
  std::uint64_t seed_;
  AdamW<T> opt_;
  ResetScheduler<T> scheduler_;
  std::vector<StateSnapshot<T>> lane_states_;  // carried per lane for bptt
  std::vector<RambaParams<T>> lane_grads_;     // reused per-lane gradient buffers
  RambaParams<T> total_grads_;
  std::size_t step_ = 0;
};

}  // namespace hsalab
