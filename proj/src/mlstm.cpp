#include "vil/mlstm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>

namespace vil {
namespace mlstm {

namespace {

// Normalizer guard exp(-m) with the exponent capped so a sentinel-valued m
// yields a huge-but-finite guard instead of overflowing to inf.
// d/dm = -exp(-m) where the cap is inactive, 0 where it saturates.
template <typename T>
TensorT<T> stab_guard(const TensorT<T>& m) {
  size_t n = static_cast<size_t>(m.numel());
  std::vector<T> out(n);
  auto mv = m.values();
  const T cap = static_cast<T>(kGuardExpCap);
  for (size_t i = 0; i < n; ++i) out[i] = std::exp(std::min(-mv[i], cap));
  opcount::add_elementwise(n);
  return make_op_node<T>(
      m.shape(), std::move(out), {m},
      [cap](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < node.values.size(); ++i)
          if (-p.values[i] < cap) p.grad[i] -= node.grad[i] * node.values[i];
      },
      "stab_guard");
}

// Fused row stabilizer.  With b = inclusive cumsum(lf):
//   m_raw[t] = max_{s<=t} (b[t] - b[s] + i_pre[s]),
// computed at accumulator width in O(L) via a running max of (i[s] - b[s]).
// The gradient routes to the argmax term; ties keep the earliest s.
template <typename T>
TensorT<T> causal_rowmax(const TensorT<T>& lf, const TensorT<T>& i_pre) {
  check<ShapeError>(lf.rank() == 1 && i_pre.rank() == 1 && lf.dim(0) == i_pre.dim(0),
                    "causal_rowmax: expected equal {L} gate vectors, got ",
                    shape_str(lf.shape()), " and ", shape_str(i_pre.shape()));
  int64_t L = lf.dim(0);
  using A = detail::acc_t<T>;
  std::vector<T> out(static_cast<size_t>(L));
  std::vector<int64_t> arg(static_cast<size_t>(L));
  {
    auto lv = lf.values();
    auto iv = i_pre.values();
    A b = 0, best = 0;
    int64_t best_s = 0;
    for (int64_t t = 0; t < L; ++t) {
      b += static_cast<A>(lv[static_cast<size_t>(t)]);
      const A cand = static_cast<A>(iv[static_cast<size_t>(t)]) - b;
      if (t == 0 || cand > best) {
        best = cand;
        best_s = t;
      }
      out[static_cast<size_t>(t)] = static_cast<T>(b + best);
      arg[static_cast<size_t>(t)] = best_s;
    }
  }
  opcount::add_elementwise(static_cast<uint64_t>(L));
  return make_op_node<T>(
      {L, 1}, std::move(out), {lf, i_pre},
      [L, arg](detail::NodeT<T>& node) {
        auto& plf = *node.parents[0];
        auto& pi = *node.parents[1];
        const T* g = node.grad.data();
        if (pi.requires_grad) {
          pi.ensure_grad();
          for (int64_t t = 0; t < L; ++t)
            pi.grad[static_cast<size_t>(arg[static_cast<size_t>(t)])] += g[t];
        }
        if (plf.requires_grad) {
          plf.ensure_grad();
          // m_raw[t] = b[t] - b[s*] + i[s*]: db gets +g at t, -g at s*;
          // dlf[u] = suffix sum of db over u.
          std::vector<T> db(static_cast<size_t>(L), T(0));
          for (int64_t t = 0; t < L; ++t) {
            db[static_cast<size_t>(t)] += g[t];
            db[static_cast<size_t>(arg[static_cast<size_t>(t)])] -= g[t];
          }
          T acc = 0;
          for (int64_t u = L; u-- > 0;) {
            acc += db[static_cast<size_t>(u)];
            plf.grad[static_cast<size_t>(u)] += acc;
          }
        }
      },
      "causal_rowmax");
}

// Fused stabilized gate weights.  With b = inclusive cumsum(lf):
//   W[t,s] = exp(b[t] - b[s] + i_pre[s] - m_row[t])  for s <= t, 0 above.
// The whole log-space pipeline evaluates at accumulator width and rounds
// once at the output, so every execution mode sees the same weights to a
// final-storage ulp.
template <typename T>
TensorT<T> causal_weight_matrix(const TensorT<T>& lf, const TensorT<T>& i_pre,
                                const TensorT<T>& m_row) {
  check<ShapeError>(lf.rank() == 1 && i_pre.rank() == 1 && lf.dim(0) == i_pre.dim(0),
                    "causal_weight_matrix: expected equal {L} gate vectors, got ",
                    shape_str(lf.shape()), " and ", shape_str(i_pre.shape()));
  check<ShapeError>(m_row.numel() == lf.dim(0), "causal_weight_matrix: m_row must have L entries");
  int64_t L = lf.dim(0);
  using A = detail::acc_t<T>;
  std::vector<T> out(static_cast<size_t>(L * L), T(0));
  {
    std::vector<A> b(static_cast<size_t>(L));
    auto lv = lf.values();
    A acc = 0;
    for (int64_t t = 0; t < L; ++t) {
      acc += static_cast<A>(lv[static_cast<size_t>(t)]);
      b[static_cast<size_t>(t)] = acc;
    }
    auto iv = i_pre.values();
    auto mv = m_row.values();
    for (int64_t t = 0; t < L; ++t)
      for (int64_t s = 0; s <= t; ++s)
        out[static_cast<size_t>(t * L + s)] = static_cast<T>(
            std::exp(b[static_cast<size_t>(t)] - b[static_cast<size_t>(s)] +
                     static_cast<A>(iv[static_cast<size_t>(s)]) -
                     static_cast<A>(mv[static_cast<size_t>(t)])));
  }
  opcount::add_elementwise(static_cast<uint64_t>(L) * static_cast<uint64_t>(L + 1) / 2);
  return make_op_node<T>(
      {L, L}, std::move(out), {lf, i_pre, m_row},
      [L](detail::NodeT<T>& node) {
        auto& plf = *node.parents[0];
        auto& pi = *node.parents[1];
        auto& pm = *node.parents[2];
        const T* g = node.grad.data();
        const T* w = node.values.data();
        // All partials are (+/-) entries of g .* W: row/column sums suffice.
        std::vector<T> rowsum(static_cast<size_t>(L), T(0));
        std::vector<T> colsum(static_cast<size_t>(L), T(0));
        for (int64_t t = 0; t < L; ++t)
          for (int64_t s = 0; s <= t; ++s) {
            T gw = g[t * L + s] * w[t * L + s];
            rowsum[static_cast<size_t>(t)] += gw;
            colsum[static_cast<size_t>(s)] += gw;
          }
        if (pi.requires_grad) {
          pi.ensure_grad();
          for (int64_t s = 0; s < L; ++s) pi.grad[static_cast<size_t>(s)] += colsum[static_cast<size_t>(s)];
        }
        if (pm.requires_grad) {
          pm.ensure_grad();
          for (int64_t t = 0; t < L; ++t) pm.grad[static_cast<size_t>(t)] -= rowsum[static_cast<size_t>(t)];
        }
        if (plf.requires_grad) {
          plf.ensure_grad();
          // db[u] = rowsum[u] - colsum[u]; dlf[u] = suffix sum of db.
          T acc = 0;
          for (int64_t u = L; u-- > 0;) {
            acc += rowsum[static_cast<size_t>(u)] - colsum[static_cast<size_t>(u)];
            plf.grad[static_cast<size_t>(u)] += acc;
          }
        }
      },
      "causal_weight_matrix");
}

template <typename T>
void check_finite(const TensorT<T>& x, const char* what) {
  auto v = x.values();
  int64_t cols = x.rank() >= 1 ? x.numel() / x.dim(0) : 1;
  for (size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      fail<NumericError>("non-finite ", what, " at step ", cols > 0 ? static_cast<int64_t>(i) / cols : 0);
}

template <typename T>
void check_sequence_inputs(const TensorT<T>& Q, const TensorT<T>& K, const TensorT<T>& V,
                           const TensorT<T>& i_pre, const TensorT<T>& f_pre) {
  check<ShapeError>(Q.rank() == 2 && K.rank() == 2 && V.rank() == 2, "mlstm: Q,K,V must be rank 2");
  check<ShapeError>(Q.shape() == K.shape(), "mlstm: Q ", shape_str(Q.shape()), " and K ",
                    shape_str(K.shape()), " must match");
  check<ShapeError>(V.dim(0) == Q.dim(0), "mlstm: V rows ", V.dim(0), " != sequence length ",
                    Q.dim(0));
  check<ShapeError>(i_pre.rank() == 1 && f_pre.rank() == 1 && i_pre.dim(0) == Q.dim(0) &&
                        f_pre.dim(0) == Q.dim(0),
                    "mlstm: gate vectors must be {L}");
  check_finite(Q, "query");
  check_finite(K, "key");
  check_finite(V, "value");
  check_finite(i_pre, "input gate");
  check_finite(f_pre, "forget gate");
}

template <typename T>
void check_state(const MLSTMStateT<T>& st, int64_t d_qk, int64_t d_v) {
  check<ShapeError>(st.C.rank() == 2 && st.C.dim(0) == d_v && st.C.dim(1) == d_qk,
                    "mlstm: state C must be {d_v,d_qk}, got ", shape_str(st.C.shape()));
  check<ShapeError>(st.n.rank() == 1 && st.n.dim(0) == d_qk, "mlstm: state n must be {d_qk}");
  check<ShapeError>(st.m.numel() == 1, "mlstm: state m must be a scalar");
}

// Shared intra-chunk core.  Given the chunk's Q,K,V, its gate vectors and
// the row stabilizer m_row {c,1}, returns the numerator {c,d_v} and signed
// row sum {c,1} of the masked score block.
template <typename T>
struct IntraBlock {
  TensorT<T> num;
  TensorT<T> rsum;
};

template <typename T>
IntraBlock<T> masked_score_block(const TensorT<T>& Qc, const TensorT<T>& Kc, const TensorT<T>& Vc,
                                 const TensorT<T>& lf, const TensorT<T>& ic,
                                 const TensorT<T>& m_row) {
  int64_t d_qk = Qc.dim(1);
  T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_qk)));
  TensorT<T> W = causal_weight_matrix(lf, ic, m_row);
  TensorT<T> S = mul(causal_scores(Qc, Kc, inv_sqrt), W);
  return {tri_matmul(S, Vc), row_sum(S)};
}

// Fused boundary-state scan for the chunkwise form.  For each chunk p with
// rows [o, o+c) and b = inclusive cumsum of that chunk's lf, B = b[c-1],
// z_j = i_pre[o+j] + B - b[j]:
//   m'    = max(m + B, max_j z_j)
//   decay = exp(m + B - m'),  w_j = exp(z_j - m')
//   C'    = decay C + sum_j w_j v_j kbar_j^T,   n' = decay n + sum_j w_j kbar_j
// The whole trajectory runs at accumulator width; each boundary state is
// rounded once into its own packed block of rows [p*(d_v+2), (p+1)*(d_v+2)):
// C' first, then n', then m' tiled across the last row (so a row max
// recovers it).  Boundary drift therefore never compounds: every snapshot
// is the exact chain rounded once, exactly like the recurrent scan.
template <typename T>
TensorT<T> chunk_state_scan(const TensorT<T>& K, const TensorT<T>& V, const TensorT<T>& lf,
                            const TensorT<T>& i_pre, const TensorT<T>& C0, const TensorT<T>& n0,
                            const TensorT<T>& m0, int64_t chunk) {
  const int64_t L = K.dim(0), d_qk = K.dim(1), d_v = V.dim(1);
  const int64_t nblocks = (L + chunk - 1) / chunk;
  using A = detail::acc_t<T>;
  const A inv_sqrt = A(1) / std::sqrt(static_cast<A>(d_qk));

  struct Trace {
    std::vector<A> Cs, ns;       // state before each chunk, nblocks blocks
    std::vector<A> w;            // per sequence row
    std::vector<A> decay;        // per chunk
    std::vector<uint8_t> carry_wins;
    std::vector<int64_t> z_arg;  // global row of the winning z, per chunk
  };
  const bool track = grad_enabled() &&
                     (K.requires_grad() || V.requires_grad() || lf.requires_grad() ||
                      i_pre.requires_grad() || C0.requires_grad() || n0.requires_grad() ||
                      m0.requires_grad());
  auto trace = std::make_shared<Trace>();
  if (track) {
    trace->Cs.reserve(static_cast<size_t>(nblocks * d_v * d_qk));
    trace->ns.reserve(static_cast<size_t>(nblocks * d_qk));
    trace->w.resize(static_cast<size_t>(L));
  }

  std::vector<A> C(C0.values().begin(), C0.values().end());
  std::vector<A> n(n0.values().begin(), n0.values().end());
  A m = static_cast<A>(m0.values()[0]);
  std::vector<T> out(static_cast<size_t>(nblocks * (d_v + 2) * d_qk));
  auto kv = K.values();
  auto vv = V.values();
  auto lv = lf.values();
  auto iv = i_pre.values();
  std::vector<A> b(static_cast<size_t>(std::min(chunk, L)));
  std::vector<A> w(static_cast<size_t>(std::min(chunk, L)));
  for (int64_t p = 0, o = 0; o < L; ++p, o += chunk) {
    const int64_t c = std::min(chunk, L - o);
    if (track) {
      trace->Cs.insert(trace->Cs.end(), C.begin(), C.end());
      trace->ns.insert(trace->ns.end(), n.begin(), n.end());
    }
    A acc = 0;
    for (int64_t j = 0; j < c; ++j) {
      acc += static_cast<A>(lv[static_cast<size_t>(o + j)]);
      b[static_cast<size_t>(j)] = acc;
    }
    const A B = b[static_cast<size_t>(c - 1)];
    A z_best = 0;
    int64_t z_arg = 0;
    for (int64_t j = 0; j < c; ++j) {
      const A z = static_cast<A>(iv[static_cast<size_t>(o + j)]) + B - b[static_cast<size_t>(j)];
      if (j == 0 || z > z_best) {
        z_best = z;
        z_arg = j;
      }
    }
    const A carry = m + B;
    const bool carry_wins = carry >= z_best;
    const A m_new = carry_wins ? carry : z_best;
    const A decay = std::exp(carry - m_new);
    for (int64_t j = 0; j < c; ++j)
      w[static_cast<size_t>(j)] = std::exp(static_cast<A>(iv[static_cast<size_t>(o + j)]) + B -
                                           b[static_cast<size_t>(j)] - m_new);
    for (int64_t r = 0; r < d_v; ++r) {
      A* Crow = C.data() + r * d_qk;
      for (int64_t q = 0; q < d_qk; ++q) {
        A s = decay * Crow[q];
        for (int64_t j = 0; j < c; ++j)
          s += w[static_cast<size_t>(j)] * static_cast<A>(vv[static_cast<size_t>((o + j) * d_v + r)]) *
               (inv_sqrt * static_cast<A>(kv[static_cast<size_t>((o + j) * d_qk + q)]));
        Crow[q] = s;
      }
    }
    for (int64_t q = 0; q < d_qk; ++q) {
      A s = decay * n[static_cast<size_t>(q)];
      for (int64_t j = 0; j < c; ++j)
        s += w[static_cast<size_t>(j)] *
             (inv_sqrt * static_cast<A>(kv[static_cast<size_t>((o + j) * d_qk + q)]));
      n[static_cast<size_t>(q)] = s;
    }
    m = m_new;
    T* block = out.data() + p * (d_v + 2) * d_qk;
    for (int64_t r = 0; r < d_v; ++r)
      for (int64_t q = 0; q < d_qk; ++q)
        block[r * d_qk + q] = static_cast<T>(C[static_cast<size_t>(r * d_qk + q)]);
    for (int64_t q = 0; q < d_qk; ++q) {
      block[d_v * d_qk + q] = static_cast<T>(n[static_cast<size_t>(q)]);
      block[(d_v + 1) * d_qk + q] = static_cast<T>(m_new);
    }
    if (track) {
      std::copy(w.begin(), w.begin() + c, trace->w.begin() + o);
      trace->decay.push_back(decay);
      trace->carry_wins.push_back(carry_wins ? 1 : 0);
      trace->z_arg.push_back(o + z_arg);
    }
  }
  opcount::add_macs(static_cast<uint64_t>(L) * static_cast<uint64_t>(d_v * d_qk + d_qk));
  opcount::add_elementwise(static_cast<uint64_t>(L * 3 + nblocks * (d_v + 2) * d_qk));

  return make_op_node<T>(
      {nblocks * (d_v + 2), d_qk}, std::move(out), {K, V, lf, i_pre, C0, n0, m0},
      [L, chunk, nblocks, d_qk, d_v, inv_sqrt, trace](detail::NodeT<T>& node) {
        auto& pK = *node.parents[0];
        auto& pV = *node.parents[1];
        auto& plf = *node.parents[2];
        auto& pi = *node.parents[3];
        auto& pC0 = *node.parents[4];
        auto& pn0 = *node.parents[5];
        auto& pm0 = *node.parents[6];
        for (auto& p : node.parents)
          if (p->requires_grad) p->ensure_grad();
        const T* G = node.grad.data();
        // Reverse chunk loop: GC/gn/gm carry d(loss)/d(state after chunk p);
        // every block also collects external upstream grads from the slices
        // the per-chunk output path consumed.
        std::vector<A> GC(static_cast<size_t>(d_v * d_qk), A(0));
        std::vector<A> gn(static_cast<size_t>(d_qk), A(0));
        A gm = 0;
        std::vector<A> gb(static_cast<size_t>(std::min(chunk, L)));
        for (int64_t p = nblocks; p-- > 0;) {
          const int64_t o = p * chunk;
          const int64_t c = std::min(chunk, L - o);
          const T* block_g = G + p * (d_v + 2) * d_qk;
          for (int64_t r = 0; r < d_v; ++r)
            for (int64_t q = 0; q < d_qk; ++q)
              GC[static_cast<size_t>(r * d_qk + q)] += static_cast<A>(block_g[r * d_qk + q]);
          for (int64_t q = 0; q < d_qk; ++q) {
            gn[static_cast<size_t>(q)] += static_cast<A>(block_g[d_v * d_qk + q]);
            gm += static_cast<A>(block_g[(d_v + 1) * d_qk + q]);
          }
          const A decay = trace->decay[static_cast<size_t>(p)];
          const A* Cb = trace->Cs.data() + p * d_v * d_qk;
          const A* nb = trace->ns.data() + p * d_qk;
          A gdecay = 0;
          for (int64_t r = 0; r < d_v; ++r)
            for (int64_t q = 0; q < d_qk; ++q)
              gdecay += GC[static_cast<size_t>(r * d_qk + q)] * Cb[r * d_qk + q];
          for (int64_t q = 0; q < d_qk; ++q) gdecay += gn[static_cast<size_t>(q)] * nb[q];
          const A p_dec = gdecay * decay;
          A gz_sum = 0;
          std::fill(gb.begin(), gb.begin() + c, A(0));
          for (int64_t j = 0; j < c; ++j) {
            const A wj = trace->w[static_cast<size_t>(o + j)];
            A gw = 0;
            for (int64_t q = 0; q < d_qk; ++q) {
              A col = gn[static_cast<size_t>(q)];
              for (int64_t r = 0; r < d_v; ++r)
                col += GC[static_cast<size_t>(r * d_qk + q)] *
                       static_cast<A>(pV.values[static_cast<size_t>((o + j) * d_v + r)]);
              gw += col * (inv_sqrt * static_cast<A>(pK.values[static_cast<size_t>((o + j) * d_qk + q)]));
              if (pK.requires_grad)
                pK.grad[static_cast<size_t>((o + j) * d_qk + q)] += static_cast<T>(wj * col * inv_sqrt);
            }
            if (pV.requires_grad)
              for (int64_t r = 0; r < d_v; ++r) {
                A s = 0;
                for (int64_t q = 0; q < d_qk; ++q)
                  s += GC[static_cast<size_t>(r * d_qk + q)] * inv_sqrt *
                       static_cast<A>(pK.values[static_cast<size_t>((o + j) * d_qk + q)]);
                pV.grad[static_cast<size_t>((o + j) * d_v + r)] += static_cast<T>(wj * s);
              }
            const A gz = gw * wj;
            gz_sum += gz;
            if (pi.requires_grad) pi.grad[static_cast<size_t>(o + j)] += static_cast<T>(gz);
            gb[static_cast<size_t>(j)] -= gz;
          }
          const A gm_total = gm - p_dec - gz_sum;
          A gB = p_dec + gz_sum;
          A gm_new = p_dec;
          if (trace->carry_wins[static_cast<size_t>(p)]) {
            gm_new += gm_total;
            gB += gm_total;
          } else {
            const int64_t ja = trace->z_arg[static_cast<size_t>(p)];
            if (pi.requires_grad) pi.grad[static_cast<size_t>(ja)] += static_cast<T>(gm_total);
            gb[static_cast<size_t>(ja - o)] -= gm_total;
            gB += gm_total;
          }
          gb[static_cast<size_t>(c - 1)] += gB;
          if (plf.requires_grad) {
            A acc = 0;
            for (int64_t u = c; u-- > 0;) {
              acc += gb[static_cast<size_t>(u)];
              plf.grad[static_cast<size_t>(o + u)] += static_cast<T>(acc);
            }
          }
          for (auto& x : GC) x *= decay;
          for (auto& x : gn) x *= decay;
          gm = gm_new;
        }
        if (pC0.requires_grad)
          for (size_t j = 0; j < GC.size(); ++j) pC0.grad[j] += static_cast<T>(GC[j]);
        if (pn0.requires_grad)
          for (size_t j = 0; j < gn.size(); ++j) pn0.grad[j] += static_cast<T>(gn[j]);
        if (pm0.requires_grad) pm0.grad[0] += static_cast<T>(gm);
      },
      "chunk_state_scan");
}

}  // namespace

template <typename T>
MLSTMStateT<T> MLSTMStateT<T>::zero(int64_t d_qk, int64_t d_v) {
  check<ConfigError>(d_qk >= 1 && d_v >= 1, "mlstm: non-positive state dims");
  return {TensorT<T>::zeros({d_v, d_qk}), TensorT<T>::zeros({d_qk}),
          TensorT<T>::scalar(static_cast<T>(kNegSentinel))};
}

template <typename T>
StepResultT<T> recurrent_step(const MLSTMStateT<T>& state, const TensorT<T>& q,
                              const TensorT<T>& k, const TensorT<T>& v, const TensorT<T>& i_pre,
                              const TensorT<T>& f_pre) {
  check<ShapeError>(q.rank() == 1 && k.rank() == 1 && v.rank() == 1, "recurrent_step: q,k,v must be rank 1");
  check<ShapeError>(q.shape() == k.shape(), "recurrent_step: q and k dims differ");
  check<ShapeError>(i_pre.numel() == 1 && f_pre.numel() == 1, "recurrent_step: gates must be scalars");
  int64_t d_qk = q.dim(0), d_v = v.dim(0);
  check_state(state, d_qk, d_v);
  check_finite(q, "query");
  check_finite(k, "key");
  check_finite(v, "value");
  check_finite(i_pre, "input gate");
  check_finite(f_pre, "forget gate");

  T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_qk)));
  TensorT<T> g = logsigmoid(f_pre);
  TensorT<T> gm = add(g, state.m);
  TensorT<T> m_new = maximum(gm, i_pre);
  TensorT<T> f_s = vil::exp(sub(gm, m_new));
  TensorT<T> i_s = vil::exp(sub(i_pre, m_new));
  TensorT<T> kbar = scale(k, inv_sqrt);

  TensorT<T> outer = matmul(reshape(v, {d_v, 1}), reshape(kbar, {1, d_qk}));
  TensorT<T> C_new = add(mul(state.C, f_s), mul(outer, i_s));
  TensorT<T> n_new = add(mul(state.n, f_s), mul(kbar, i_s));

  TensorT<T> Cq = matmul(C_new, reshape(q, {d_qk, 1}));                       // {d_v,1}
  TensorT<T> nq = reshape(matmul(reshape(n_new, {1, d_qk}), reshape(q, {d_qk, 1})), {1});
  TensorT<T> den = maximum(vil::abs(nq), stab_guard(m_new));
  TensorT<T> h = reshape(div(Cq, den), {d_v});
  return {h, {C_new, n_new, m_new}};
}

// Forward trajectory saved for the fused scan backward.  Everything sits at
// accumulator width; the branch bits record which side each max() took so
// the backward routes subgradients exactly where the forward went.
template <typename T>
struct ScanTrace {
  using A = detail::acc_t<T>;
  std::vector<A> Cs, ns;                       // (L+1) states, index 0 = init
  std::vector<A> fdec, idec, m, s, den;  // per step
  std::vector<uint8_t> a_wins, s_wins;   // m' = lf+m side; den = |s| side
};

template <typename T>
SequenceResultT<T> forward_recurrent(const TensorT<T>& Q, const TensorT<T>& K, const TensorT<T>& V,
                                     const TensorT<T>& i_pre, const TensorT<T>& f_pre,
                                     const MLSTMStateT<T>& init) {
  check_sequence_inputs(Q, K, V, i_pre, f_pre);
  int64_t L = Q.dim(0), d_qk = Q.dim(1), d_v = V.dim(1);
  check_state(init, d_qk, d_v);
  using A = detail::acc_t<T>;
  const A inv_sqrt = A(1) / std::sqrt(static_cast<A>(d_qk));
  const A cap = static_cast<A>(kGuardExpCap);

  TensorT<T> lf = logsigmoid(f_pre);
  const bool track = grad_enabled() &&
                     (Q.requires_grad() || K.requires_grad() || V.requires_grad() ||
                      i_pre.requires_grad() || lf.requires_grad() || init.C.requires_grad() ||
                      init.n.requires_grad() || init.m.requires_grad());
  auto trace = std::make_shared<ScanTrace<T>>();

  std::vector<A> C(init.C.values().begin(), init.C.values().end());
  std::vector<A> n(init.n.values().begin(), init.n.values().end());
  A m = static_cast<A>(init.m.values()[0]);
  if (track) {
    trace->Cs.reserve(static_cast<size_t>((L + 1) * d_v * d_qk));
    trace->ns.reserve(static_cast<size_t>((L + 1) * d_qk));
    trace->Cs.insert(trace->Cs.end(), C.begin(), C.end());
    trace->ns.insert(trace->ns.end(), n.begin(), n.end());
  }

  std::vector<T> H(static_cast<size_t>(L * d_v));
  auto qv = Q.values();
  auto kv = K.values();
  auto vv = V.values();
  auto iv = i_pre.values();
  auto lv = lf.values();
  for (int64_t t = 0; t < L; ++t) {
    const A a = static_cast<A>(lv[static_cast<size_t>(t)]) + m;
    const A ig = static_cast<A>(iv[static_cast<size_t>(t)]);
    const bool a_w = a >= ig;
    const A m_new = a_w ? a : ig;
    const A fdec = std::exp(a - m_new);
    const A idec = std::exp(ig - m_new);
    const T* qrow = &qv[static_cast<size_t>(t * d_qk)];
    const T* krow = &kv[static_cast<size_t>(t * d_qk)];
    const T* vrow = &vv[static_cast<size_t>(t * d_v)];
    for (int64_t r = 0; r < d_v; ++r) {
      const A vr = idec * static_cast<A>(vrow[r]);
      A* Crow = C.data() + r * d_qk;
      for (int64_t c = 0; c < d_qk; ++c)
        Crow[c] = fdec * Crow[c] + vr * (inv_sqrt * static_cast<A>(krow[c]));
    }
    A s = 0;
    for (int64_t c = 0; c < d_qk; ++c) {
      n[static_cast<size_t>(c)] =
          fdec * n[static_cast<size_t>(c)] + idec * inv_sqrt * static_cast<A>(krow[c]);
      s += n[static_cast<size_t>(c)] * static_cast<A>(qrow[c]);
    }
    const A guard = std::exp(std::min(-m_new, cap));
    const bool s_w = std::abs(s) >= guard;
    const A den = s_w ? std::abs(s) : guard;
    for (int64_t r = 0; r < d_v; ++r) {
      A num = 0;
      const A* Crow = C.data() + r * d_qk;
      for (int64_t c = 0; c < d_qk; ++c) num += Crow[c] * static_cast<A>(qrow[c]);
      H[static_cast<size_t>(t * d_v + r)] = static_cast<T>(num / den);
    }
    m = m_new;
    if (track) {
      trace->Cs.insert(trace->Cs.end(), C.begin(), C.end());
      trace->ns.insert(trace->ns.end(), n.begin(), n.end());
      trace->fdec.push_back(fdec);
      trace->idec.push_back(idec);
      trace->m.push_back(m_new);
      trace->s.push_back(s);
      trace->den.push_back(den);
      trace->a_wins.push_back(a_w ? 1 : 0);
      trace->s_wins.push_back(s_w ? 1 : 0);
    }
  }
  opcount::add_macs(static_cast<uint64_t>(L) * static_cast<uint64_t>(2 * d_v * d_qk + d_qk));
  opcount::add_elementwise(static_cast<uint64_t>(L) *
                           static_cast<uint64_t>(d_v * d_qk + 2 * d_qk + d_v + 8));

  MLSTMStateT<T> fin{TensorT<T>::from_values({d_v, d_qk}, std::vector<T>(C.begin(), C.end())),
                     TensorT<T>::from_values({d_qk}, std::vector<T>(n.begin(), n.end())),
                     TensorT<T>::scalar(static_cast<T>(m))};

  TensorT<T> Hn = make_op_node<T>(
      {L, d_v}, std::move(H), {Q, K, V, i_pre, lf, init.C, init.n, init.m},
      [L, d_qk, d_v, inv_sqrt, cap, trace](detail::NodeT<T>& node) {
        auto& pQ = *node.parents[0];
        auto& pK = *node.parents[1];
        auto& pV = *node.parents[2];
        auto& pi = *node.parents[3];
        auto& plf = *node.parents[4];
        auto& pC0 = *node.parents[5];
        auto& pn0 = *node.parents[6];
        auto& pm0 = *node.parents[7];
        for (auto& p : node.parents)
          if (p->requires_grad) p->ensure_grad();
        const T* gH = node.grad.data();
        const T* Hv = node.values.data();
        // Reverse scan: GC/gn carry d(loss)/d(state after step t); each step
        // first adds its local output terms, then peels the update equations.
        std::vector<A> GC(static_cast<size_t>(d_v * d_qk), A(0));
        std::vector<A> gn(static_cast<size_t>(d_qk), A(0));
        std::vector<A> gq(static_cast<size_t>(d_qk)), gk(static_cast<size_t>(d_qk));
        std::vector<A> gv(static_cast<size_t>(d_v));
        A gm_next = 0;
        for (int64_t t = L; t-- > 0;) {
          const A fdec = trace->fdec[static_cast<size_t>(t)];
          const A idec = trace->idec[static_cast<size_t>(t)];
          const A den = trace->den[static_cast<size_t>(t)];
          const A* Ct = trace->Cs.data() + (t + 1) * d_v * d_qk;
          const A* Cp = trace->Cs.data() + t * d_v * d_qk;
          const A* nt = trace->ns.data() + (t + 1) * d_qk;
          const A* np = trace->ns.data() + t * d_qk;
          const T* qrow = &pQ.values[static_cast<size_t>(t * d_qk)];
          const T* krow = &pK.values[static_cast<size_t>(t * d_qk)];
          const T* vrow = &pV.values[static_cast<size_t>(t * d_v)];
          std::fill(gq.begin(), gq.end(), A(0));
          std::fill(gk.begin(), gk.end(), A(0));
          // h = num/den: num = C_t q, den = max(|n_t.q|, exp(-m_t)).
          A gden = 0;
          for (int64_t r = 0; r < d_v; ++r) {
            const A gh = static_cast<A>(gH[t * d_v + r]);
            gden -= gh * static_cast<A>(Hv[t * d_v + r]);
            const A gnum = gh / den;
            const A* Crow = Ct + r * d_qk;
            A* GCrow = GC.data() + r * d_qk;
            for (int64_t c = 0; c < d_qk; ++c) {
              GCrow[c] += gnum * static_cast<A>(qrow[c]);
              gq[static_cast<size_t>(c)] += gnum * Crow[c];
            }
          }
          gden /= den;
          A gs = 0;
          A gm_t = gm_next;
          if (trace->s_wins[static_cast<size_t>(t)])
            gs = trace->s[static_cast<size_t>(t)] >= 0 ? gden : -gden;
          else if (-trace->m[static_cast<size_t>(t)] < cap)
            gm_t -= gden * den;  // d(guard)/dm = -guard, and den == guard here
          for (int64_t c = 0; c < d_qk; ++c) {
            gn[static_cast<size_t>(c)] += gs * static_cast<A>(qrow[c]);
            gq[static_cast<size_t>(c)] += gs * nt[c];
          }
          // Peel C_t = fdec C_{t-1} + idec v kbar^T and the matching n update.
          A gfdec = 0, gidec = 0;
          for (int64_t r = 0; r < d_v; ++r) {
            const A vr = static_cast<A>(vrow[r]);
            const A* GCrow = GC.data() + r * d_qk;
            const A* Cprow = Cp + r * d_qk;
            A gv_r = 0;
            for (int64_t c = 0; c < d_qk; ++c) {
              const A kbar = inv_sqrt * static_cast<A>(krow[c]);
              gfdec += GCrow[c] * Cprow[c];
              gidec += GCrow[c] * vr * kbar;
              gv_r += GCrow[c] * kbar;
              gk[static_cast<size_t>(c)] += GCrow[c] * vr;
            }
            gv[static_cast<size_t>(r)] = gv_r * idec;
          }
          for (int64_t c = 0; c < d_qk; ++c) {
            gfdec += gn[static_cast<size_t>(c)] * np[c];
            gidec += gn[static_cast<size_t>(c)] * inv_sqrt * static_cast<A>(krow[c]);
            gk[static_cast<size_t>(c)] =
                (gk[static_cast<size_t>(c)] + gn[static_cast<size_t>(c)]) * idec * inv_sqrt;
          }
          for (auto& x : GC) x *= fdec;
          for (auto& x : gn) x *= fdec;
          // Through fdec = exp(g+m-m'), idec = exp(i-m'), m' = max(g+m, i):
          // the winning side of the max absorbs gm_t and kills its own decay.
          const A P = gfdec * fdec;
          const A Qd = gidec * idec;
          const bool aw = trace->a_wins[static_cast<size_t>(t)] != 0;
          const A ga = aw ? gm_t - Qd : P;
          const A gi = aw ? Qd : gm_t - P;
          gm_next = ga;
          if (pQ.requires_grad)
            for (int64_t c = 0; c < d_qk; ++c)
              pQ.grad[static_cast<size_t>(t * d_qk + c)] += static_cast<T>(gq[static_cast<size_t>(c)]);
          if (pK.requires_grad)
            for (int64_t c = 0; c < d_qk; ++c)
              pK.grad[static_cast<size_t>(t * d_qk + c)] += static_cast<T>(gk[static_cast<size_t>(c)]);
          if (pV.requires_grad)
            for (int64_t r = 0; r < d_v; ++r)
              pV.grad[static_cast<size_t>(t * d_v + r)] += static_cast<T>(gv[static_cast<size_t>(r)]);
          if (pi.requires_grad) pi.grad[static_cast<size_t>(t)] += static_cast<T>(gi);
          if (plf.requires_grad) plf.grad[static_cast<size_t>(t)] += static_cast<T>(ga);
        }
        if (pC0.requires_grad)
          for (size_t j = 0; j < GC.size(); ++j) pC0.grad[j] += static_cast<T>(GC[j]);
        if (pn0.requires_grad)
          for (size_t j = 0; j < gn.size(); ++j) pn0.grad[j] += static_cast<T>(gn[j]);
        if (pm0.requires_grad) pm0.grad[0] += static_cast<T>(gm_next);
      },
      "recurrent_scan");
  return {Hn, fin};
}

template <typename T>
TensorT<T> forward_parallel(const TensorT<T>& Q, const TensorT<T>& K, const TensorT<T>& V,
                            const TensorT<T>& i_pre, const TensorT<T>& f_pre) {
  check_sequence_inputs(Q, K, V, i_pre, f_pre);
  int64_t d_v = V.dim(1);
  TensorT<T> lf = logsigmoid(f_pre);
  TensorT<T> m_row = causal_rowmax(lf, i_pre);
  IntraBlock<T> blk = masked_score_block(Q, K, V, lf, i_pre, m_row);
  TensorT<T> den = maximum(vil::abs(blk.rsum), stab_guard(m_row));
  return div(blk.num, tile_cols(den, d_v));
}

template <typename T>
SequenceResultT<T> forward_chunkwise(const TensorT<T>& Q, const TensorT<T>& K, const TensorT<T>& V,
                                     const TensorT<T>& i_pre, const TensorT<T>& f_pre,
                                     int64_t chunk, const MLSTMStateT<T>& init) {
  check<ConfigError>(chunk >= 1, "forward_chunkwise: chunk size must be >= 1, got ", chunk);
  check_sequence_inputs(Q, K, V, i_pre, f_pre);
  int64_t L = Q.dim(0), d_qk = Q.dim(1), d_v = V.dim(1);
  check_state(init, d_qk, d_v);

  TensorT<T> i2 = reshape(i_pre, {L, 1});
  TensorT<T> lf_all = logsigmoid(f_pre);
  TensorT<T> lf2 = reshape(lf_all, {L, 1});
  TensorT<T> packed = chunk_state_scan(K, V, lf_all, i_pre, init.C, init.n, init.m, chunk);
  auto state_after = [&](int64_t p) -> MLSTMStateT<T> {
    if (p < 0) return init;
    const int64_t r0 = p * (d_v + 2);
    return {slice_rows(packed, r0, r0 + d_v),
            reshape(slice_rows(packed, r0 + d_v, r0 + d_v + 1), {d_qk}),
            reshape(row_max(slice_rows(packed, r0 + d_v + 1, r0 + d_v + 2)), {1})};
  };

  std::vector<TensorT<T>> out_chunks;
  for (int64_t p = 0, o = 0; o < L; ++p, o += chunk) {
    int64_t c = std::min(chunk, L - o);
    TensorT<T> Qc = slice_rows(Q, o, o + c);
    TensorT<T> Kc = slice_rows(K, o, o + c);
    TensorT<T> Vc = slice_rows(V, o, o + c);
    TensorT<T> ic = reshape(slice_rows(i2, o, o + c), {c});
    TensorT<T> lf = reshape(slice_rows(lf2, o, o + c), {c});
    MLSTMStateT<T> st = state_after(p - 1);

    TensorT<T> bloc = cumsum0(lf);  // inclusive within-chunk log-forget sums
    // Row stabilizer covers both intra-chunk writes and the carried state,
    // whose log-scale decays through the chunk as m_prev + bloc[t].
    TensorT<T> carry_log = add(reshape(bloc, {c, 1}), st.m);
    TensorT<T> m_row = maximum(causal_rowmax(lf, ic), carry_log);
    IntraBlock<T> blk = masked_score_block(Qc, Kc, Vc, lf, ic, m_row);

    TensorT<T> w = vil::exp(sub(carry_log, m_row));              // {c,1}
    TensorT<T> Qstate = matmul(Qc, transpose(st.C));             // {c,d_v}
    TensorT<T> num = add(blk.num, mul(tile_cols(w, d_v), Qstate));
    TensorT<T> qn = matmul(Qc, reshape(st.n, {d_qk, 1}));        // {c,1}
    TensorT<T> rsum = add(blk.rsum, mul(w, qn));
    TensorT<T> den = maximum(vil::abs(rsum), stab_guard(m_row));
    out_chunks.push_back(div(num, tile_cols(den, d_v)));
  }
  return {concat_rows(out_chunks), state_after((L + chunk - 1) / chunk - 1)};
}

// ---- explicit instantiation -----------------------------------------------------

#define VIL_INSTANTIATE_MLSTM(T)                                                                  \
  template struct MLSTMStateT<T>;                                                                 \
  template StepResultT<T> recurrent_step<T>(const MLSTMStateT<T>&, const TensorT<T>&,             \
                                            const TensorT<T>&, const TensorT<T>&,                 \
                                            const TensorT<T>&, const TensorT<T>&);                \
  template SequenceResultT<T> forward_recurrent<T>(const TensorT<T>&, const TensorT<T>&,          \
                                                   const TensorT<T>&, const TensorT<T>&,          \
                                                   const TensorT<T>&, const MLSTMStateT<T>&);     \
  template TensorT<T> forward_parallel<T>(const TensorT<T>&, const TensorT<T>&,                   \
                                          const TensorT<T>&, const TensorT<T>&,                   \
                                          const TensorT<T>&);                                     \
  template SequenceResultT<T> forward_chunkwise<T>(const TensorT<T>&, const TensorT<T>&,          \
                                                   const TensorT<T>&, const TensorT<T>&,          \
                                                   const TensorT<T>&, int64_t,                    \
                                                   const MLSTMStateT<T>&);

VIL_INSTANTIATE_MLSTM(float)
VIL_INSTANTIATE_MLSTM(double)

#undef VIL_INSTANTIATE_MLSTM

}  // namespace mlstm
}  // namespace vil
