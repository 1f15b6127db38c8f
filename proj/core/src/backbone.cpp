#include "hsalab/backbone.hpp"

#include <cmath>

#include "hsalab/ops.hpp"

namespace hsalab {

template <typename T>
void RecurrentLayerParams<T>::init(std::size_t d, Rng& rng) {
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (Tensor<T>* w : {&w_a, &w_u, &w_g, &w_o}) {
    w->resize({d, d});
    for (auto& v : w->flat()) v = static_cast<T>(rng.normal()) * scale;
  }
  b_a.resize({d});
  b_a.fill(T(1));  // start with a moderate memory horizon: sigmoid(1) ~ 0.73
}

template <typename T>
void RecurrentLayerParams<T>::visit(
    const std::string& prefix, const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn(prefix + "w_a", w_a);
  fn(prefix + "b_a", b_a);
  fn(prefix + "w_u", w_u);
  fn(prefix + "w_g", w_g);
  fn(prefix + "w_o", w_o);
}

template <typename T>
void recurrent_forward(const RecurrentLayerParams<T>& params, const Tensor<T>& x,
                       const Tensor<T>& s_first, const StateInjections<T>& injections,
                       Tensor<T>& y, Tensor<T>& s_final,
                       std::type_identity_t<RecurrentTape<T>*> tape) {
  HSALAB_CHECK_DIM(x.rank() == 2, "recurrent: x must be l x d");
  const std::size_t l = x.dim(0), d = x.dim(1);
  HSALAB_CHECK_DIM(s_first.empty() || s_first.size() == d, "recurrent: bad initial state");

  Tensor<T> a({l, d}), u({l, d}), gate({l, d}), s({l, d}), m({l, d});

  // Batched projections, then the elementwise scan.
  linear(x, params.w_a, a);
  for (std::size_t t = 0; t < l; ++t) {
    T* row = a.data() + t * d;
    for (std::size_t j = 0; j < d; ++j) row[j] = sigmoid(row[j] + params.b_a[j]);
  }
  linear(x, params.w_u, u);
  linear(x, params.w_g, gate);
  for (auto& v : gate.flat()) v = sigmoid(v);

  std::vector<T> prev(d, T(0));
  if (!s_first.empty()) std::copy(s_first.data(), s_first.data() + d, prev.begin());
  std::size_t next_inj = 0;
  for (std::size_t t = 0; t < l; ++t) {
    if (next_inj < injections.size() && injections[next_inj].first == t) {
      const Tensor<T>& inj = injections[next_inj].second;
      if (inj.empty()) {
        std::fill(prev.begin(), prev.end(), T(0));
      } else {
        HSALAB_CHECK_DIM(inj.size() == d, "recurrent: bad injected state");
        std::copy(inj.data(), inj.data() + d, prev.begin());
      }
      ++next_inj;
    }
    const T* arow = a.data() + t * d;
    const T* urow = u.data() + t * d;
    const T* grow = gate.data() + t * d;
    T* srow = s.data() + t * d;
    T* mrow = m.data() + t * d;
    for (std::size_t j = 0; j < d; ++j) {
      const T st = arow[j] * prev[j] + (T(1) - arow[j]) * urow[j];
      srow[j] = st;
      prev[j] = st;
      mrow[j] = st * grow[j];
    }
  }

  y.resize({l, d});
  linear(m, params.w_o, y);
  for (std::size_t i = 0; i < l * d; ++i) y[i] += x[i];

  s_final.resize({d});
  std::copy(prev.begin(), prev.end(), s_final.data());

  if (tape) {
    tape->x = x;
    tape->a = std::move(a);
    tape->u = std::move(u);
    tape->s = std::move(s);
    tape->gate = std::move(gate);
    tape->m = std::move(m);
    tape->s_first = s_first;
    tape->injections = injections;
  }
}

template <typename T>
void recurrent_backward(const RecurrentLayerParams<T>& params, const RecurrentTape<T>& tape,
                        const Tensor<T>& d_y, Tensor<T>& d_x, RecurrentLayerParams<T>& grads,
                        std::type_identity_t<Tensor<T>*> d_s_first) {
  HSALAB_CHECK(!tape.x.empty(), "recurrent backward: missing tape");
  const std::size_t l = tape.x.dim(0), d = tape.x.dim(1);

  // y = x + W_o m
  Tensor<T> dm({l, d});
  linear_backward_input(d_y, params.w_o, dm, /*accumulate=*/false);
  linear_backward_weight(d_y, tape.m, grads.w_o);

  Tensor<T> d_pre_a({l, d}), d_u({l, d}), d_z({l, d});

  // Reverse scan over the state recurrence. Gradient does not cross injected
  // boundaries: the injected s_{p-1} is a constant.
  std::vector<T> carry(d, T(0));
  std::vector<bool> injected(l, false);
  std::vector<const Tensor<T>*> inj_state(l, nullptr);
  for (const auto& [pos, st] : tape.injections) {
    injected[pos] = true;
    inj_state[pos] = &st;
  }

  for (std::size_t t = l; t-- > 0;) {
    const T* arow = &tape.a.at(t, 0);
    const T* urow = &tape.u.at(t, 0);
    const T* grow = &tape.gate.at(t, 0);
    const T* srow = &tape.s.at(t, 0);
    const T* dmrow = &dm.at(t, 0);
    T* dprea = &d_pre_a.at(t, 0);
    T* du = &d_u.at(t, 0);
    T* dz = &d_z.at(t, 0);

    for (std::size_t j = 0; j < d; ++j) {
      // m_t = s_t o gate_t
      const T ds_local = dmrow[j] * grow[j];
      const T dgate = dmrow[j] * srow[j];
      dz[j] = dgate * grow[j] * (T(1) - grow[j]);

      const T total = ds_local + carry[j];
      T s_prev;
      if (t == 0) {
        s_prev = tape.s_first.empty() ? T(0) : tape.s_first[j];
      } else if (injected[t]) {
        const Tensor<T>* inj = inj_state[t];
        s_prev = (inj == nullptr || inj->empty()) ? T(0) : (*inj)[j];
      } else {
        s_prev = tape.s.at(t - 1, j);
      }
      const T da = total * (s_prev - urow[j]);
      dprea[j] = da * arow[j] * (T(1) - arow[j]);
      du[j] = total * (T(1) - arow[j]);
      carry[j] = injected[t] ? T(0) : total * arow[j];
    }
  }

  if (d_s_first != nullptr) {
    d_s_first->resize({d});
    std::copy(carry.begin(), carry.end(), d_s_first->data());
  }

  // dX = dY (residual) + dPreA W_a + dU W_u + dZ W_g
  for (std::size_t i = 0; i < l * d; ++i) d_x[i] += d_y[i];
  linear_backward_input(d_pre_a, params.w_a, d_x);
  linear_backward_input(d_u, params.w_u, d_x);
  linear_backward_input(d_z, params.w_g, d_x);
  linear_backward_weight(d_pre_a, tape.x, grads.w_a);
  linear_backward_weight(d_u, tape.x, grads.w_u);
  linear_backward_weight(d_z, tape.x, grads.w_g);
  for (std::size_t t = 0; t < l; ++t) {
    const T* row = &d_pre_a.at(t, 0);
    for (std::size_t j = 0; j < d; ++j) grads.b_a[j] += row[j];
  }
}

template <typename T>
MemoryPlan<T> ResetScheduler<T>::plan(std::size_t step, std::size_t lane, std::size_t seq_len,
                                      const StateSnapshot<T>& carried) const {
  MemoryPlan<T> p;
  const std::size_t n_segments = seg_len_ > 0 ? (seq_len + seg_len_ - 1) / seg_len_ : 1;

  switch (mode_) {
    case ResetMode::bptt_carry:
      // One uninterrupted scan; the first state continues the previous call.
      p.seg_len = 0;
      p.first = carried;
      return p;
    case ResetMode::zero_reset:
      p.seg_len = seg_len_;
      p.replace_at_boundaries = true;
      p.first = StateSnapshot<T>{};  // zeros
      p.replacements.assign(n_segments > 1 ? n_segments - 1 : 0, StateSnapshot<T>{});
      return p;
    case ResetMode::random_carry: {
      p.seg_len = seg_len_;
      p.replace_at_boundaries = true;
      if (pool_.empty()) {
        // Step 0 (or nothing recorded yet): fall back to zeros.
        p.first = StateSnapshot<T>{};
        p.replacements.assign(n_segments > 1 ? n_segments - 1 : 0, StateSnapshot<T>{});
        return p;
      }
      auto draw = [&](std::size_t boundary) -> StateSnapshot<T> {
        Rng r(hash_mix(hash_mix(seed_, step), hash_mix(lane, boundary)));
        return pool_[r.uniform_int(pool_.size())];
      };
      p.first = draw(0);
      for (std::size_t b = 1; b < n_segments; ++b) p.replacements.push_back(draw(b));
      return p;
    }
  }
  return p;
}

template <typename T>
void ResetScheduler<T>::record_segment_final(StateSnapshot<T> snapshot) {
  pending_.push_back(std::move(snapshot));
}

template <typename T>
void ResetScheduler<T>::end_step() {
  pool_ = std::move(pending_);
  pending_.clear();
}

#define HSALAB_INSTANTIATE_BACKBONE(T)                                                           \
  template struct RecurrentLayerParams<T>;                                                       \
  template void recurrent_forward<T>(const RecurrentLayerParams<T>&, const Tensor<T>&,           \
                                     const Tensor<T>&, const StateInjections<T>&, Tensor<T>&,    \
                                     Tensor<T>&, std::type_identity_t<RecurrentTape<T>*>);       \
  template void recurrent_backward<T>(const RecurrentLayerParams<T>&, const RecurrentTape<T>&,   \
                                      const Tensor<T>&, Tensor<T>&, RecurrentLayerParams<T>&,    \
                                      std::type_identity_t<Tensor<T>*>);                         \
  template class ResetScheduler<T>;

HSALAB_INSTANTIATE_BACKBONE(float)
HSALAB_INSTANTIATE_BACKBONE(double)
#undef HSALAB_INSTANTIATE_BACKBONE

}  // namespace hsalab
