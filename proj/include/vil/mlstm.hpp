#pragma once

// Matrix-memory LSTM sequence kernel in three algebraically equivalent
// forms: a stabilized step-by-step recurrence, a fully parallel masked form,
// and a chunkwise form that carries state between fixed-size chunks while
// handling each chunk in parallel.  All forms are built from differentiable
// tensor ops, so gradients flow end-to-end through any of them.
//
// Stabilization: gating is tracked in log space through a running maximum m.
// The stabilized state relates to the naive (unstabilized) recurrence by
// C_stab = C_naive * exp(-m), n_stab = n_naive * exp(-m); outputs are
// invariant to m in exact arithmetic.  Empty state is encoded by m at a
// large negative sentinel rather than -inf, so all arithmetic stays on
// ordinary floats.

#include <cstdint>

#include "vil/tensor.hpp"

namespace vil {

// Finite stand-in for -inf in gate pre-activations and stabilizers.
inline constexpr double kNegSentinel = -1e30;
// Cap on the exponent of the normalizer guard exp(-m): keeps the guard
// finite when m sits at the sentinel while leaving ordinary values exact.
inline constexpr double kGuardExpCap = 80.0;

namespace mlstm {

template <typename T>
struct MLSTMStateT {
  TensorT<T> C;  // {d_v, d_qk} matrix memory
  TensorT<T> n;  // {d_qk} normalizer
  TensorT<T> m;  // {1} log-space stabilizer

  // Empty memory: zero C and n, stabilizer at the sentinel.
  static MLSTMStateT zero(int64_t d_qk, int64_t d_v);
};

template <typename T>
struct StepResultT {
  TensorT<T> h;  // {d_v}
  MLSTMStateT<T> state;
};

template <typename T>
struct SequenceResultT {
  TensorT<T> H;  // {L, d_v}
  MLSTMStateT<T> state;
};

using MLSTMState = MLSTMStateT<float>;

// One stabilized update:
//   g  = log sigmoid(f_pre)
//   m' = max(g + m, i_pre)
//   f' = exp(g + m - m'),  i' = exp(i_pre - m')
//   C' = f' C + i' v (k/sqrt(d_qk))^T,  n' = f' n + i' k/sqrt(d_qk)
//   h  = C' q / max(|n'.q|, exp(-m'))
// q,k: {d_qk}; v: {d_v}; i_pre,f_pre: {1}.
template <typename T>
StepResultT<T> recurrent_step(const MLSTMStateT<T>& state, const TensorT<T>& q,
                              const TensorT<T>& k, const TensorT<T>& v, const TensorT<T>& i_pre,
                              const TensorT<T>& f_pre);

// Fold of the recurrent_step update over t = 1..L, fused into a single scan
// that keeps C, n, m at accumulator width between steps and rounds each
// output once.  Q,K: {L,d_qk}; V: {L,d_v}; gates: {L}.  Gradients flow
// through H (and into the initial state); the returned final state is
// detached, as carried state is in truncated-backprop use.
template <typename T>
SequenceResultT<T> forward_recurrent(const TensorT<T>& Q, const TensorT<T>& K, const TensorT<T>& V,
                                     const TensorT<T>& i_pre, const TensorT<T>& f_pre,
                                     const MLSTMStateT<T>& init);

// Whole-sequence masked form (assumes empty initial state):
//   D[t,s] = sum_{u=s+1..t} log sigmoid(f_u) + i_s   for s <= t, else -inf
//   H[t]   = sum_s exp(D[t,s] - m_t) (q_t.k_s/sqrt(d_qk)) v_s / denom_t
// with per-row stabilizer m_t = max_s D[t,s] and denominator
// max(|row sum|, exp(-m_t)).  Entries above the diagonal are never computed.
template <typename T>
TensorT<T> forward_parallel(const TensorT<T>& Q, const TensorT<T>& K, const TensorT<T>& V,
                            const TensorT<T>& i_pre, const TensorT<T>& f_pre);

// Chunkwise form: the sequence is split into chunks of `chunk` steps (the
// last chunk may be short).  Within a chunk the masked parallel form is
// used; across chunks the state is carried exactly like the recurrence.
// chunk == L with empty init follows the same code path as forward_parallel;
// chunk == 1 reproduces the recurrence up to summation order.
template <typename T>
SequenceResultT<T> forward_chunkwise(const TensorT<T>& Q, const TensorT<T>& K, const TensorT<T>& V,
                                     const TensorT<T>& i_pre, const TensorT<T>& f_pre,
                                     int64_t chunk, const MLSTMStateT<T>& init);

}  // namespace mlstm
}  // namespace vil
