#pragma once

#include <cstddef>
#include <type_traits>
#include <functional>
#include <utility>
#include <vector>

#include "hsalab/config.hpp"
#include "hsalab/rng.hpp"
#include "hsalab/tensor.hpp"

namespace hsalab {

// Gated diagonal recurrence standing in for the SSD backbone layers:
//   a_t = sigmoid(W_a x_t + b_a)          decay in (0,1)
//   u_t = W_u x_t
//   s_t = a_t o s_{t-1} + (1 - a_t) o u_t  convex combination, bounded state
//   y_t = x_t + W_o (s_t o sigmoid(W_g x_t))
template <typename T>
struct RecurrentLayerParams {
  Tensor<T> w_a, w_u, w_g, w_o;  // d x d
  Tensor<T> b_a;                 // d

  void init(std::size_t d, Rng& rng);
  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Tensor<T>&)>& fn);
};

// State injected mid-sequence: (position p, state used as s_{p-1}). Injected
// states are constants, so gradient stops at every injection by construction.
template <typename T>
using StateInjections = std::vector<std::pair<std::size_t, Tensor<T>>>;

template <typename T>
struct RecurrentTape {
  Tensor<T> x;     // l x d layer input
  Tensor<T> a;     // l x d decay gates
  Tensor<T> u;     // l x d candidates
  Tensor<T> s;     // l x d states
  Tensor<T> gate;  // l x d output gates
  Tensor<T> m;     // l x d gated states (input to w_o)
  Tensor<T> s_first;           // initial state actually used (empty = zeros)
  StateInjections<T> injections;
};

// s_first empty means a zero initial state. Returns the final state through
// s_final. The scan is sequential in t; batching across calls is the caller's
// concern.
template <typename T>
void recurrent_forward(const RecurrentLayerParams<T>& params, const Tensor<T>& x,
                       const Tensor<T>& s_first, const StateInjections<T>& injections,
                       Tensor<T>& y, Tensor<T>& s_final,
                       std::type_identity_t<RecurrentTape<T>*> tape = nullptr);

// Reverse scan. d_x accumulates; grads accumulate; d_s_first receives the
// gradient flowing to the initial state so truncated BPTT can drop it
// explicitly. Gradient does not cross injected boundaries.
template <typename T>
void recurrent_backward(const RecurrentLayerParams<T>& params, const RecurrentTape<T>& tape,
                        const Tensor<T>& d_y, Tensor<T>& d_x, RecurrentLayerParams<T>& grads,
                        std::type_identity_t<Tensor<T>*> d_s_first = nullptr);

// A full-model snapshot of recurrent states: one d-vector per layer.
template <typename T>
struct StateSnapshot {
  std::vector<Tensor<T>> layers;

  bool empty() const { return layers.empty(); }
};

// Memory handling used by one forward call of one lane.
template <typename T>
struct MemoryPlan {
  std::size_t seg_len = 0;         // 0 = no internal boundaries
  StateSnapshot<T> first;          // empty = zeros
  // Replacement snapshots at internal boundaries p = seg_len, 2*seg_len, ...
  // Parallel to boundary index; an empty snapshot means zeros.
  std::vector<StateSnapshot<T>> replacements;
  bool replace_at_boundaries = false;  // false = carry across (bptt within call)
};

// Training-time scheduler implementing the three reset modes. random_carry
// draws from the final states of all segments of the previous optimizer step;
// at step 0 it falls back to zeros. Draws are keyed on (seed, step, lane,
// boundary), so lane processing order cannot change the schedule.
template <typename T>
class ResetScheduler {
 public:
  ResetScheduler(ResetMode mode, std::size_t seg_len, std::uint64_t seed)
      : mode_(mode), seg_len_(seg_len), seed_(seed) {}

  ResetMode mode() const { return mode_; }
  std::size_t seg_len() const { return seg_len_; }

  // Plan for one lane of one optimizer step. seq_len must be a multiple of
  // seg_len (or fit within one segment). carried holds the lane's final
  // states from the previous step (used only by bptt_carry).
  MemoryPlan<T> plan(std::size_t step, std::size_t lane, std::size_t seq_len,
                     const StateSnapshot<T>& carried) const;

  // Record the final state of every segment of this step; called once per
  // (lane, segment). end_step() promotes them to the draw pool.
  void record_segment_final(StateSnapshot<T> snapshot);
  void end_step();

  const std::vector<StateSnapshot<T>>& pool() const { return pool_; }
  void set_pool(std::vector<StateSnapshot<T>> pool) { pool_ = std::move(pool); }
  const std::vector<StateSnapshot<T>>& pending() const { return pending_; }

 private:
  ResetMode mode_;
  std::size_t seg_len_;
  std::uint64_t seed_;
  std::vector<StateSnapshot<T>> pool_;     // previous step's segment finals
  std::vector<StateSnapshot<T>> pending_;  // this step's segment finals
};

}  // namespace hsalab
