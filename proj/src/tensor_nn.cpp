#include <algorithm>
#include <cmath>

#include "vil/tensor.hpp"

namespace vil {

namespace {

// C[m,n] += A[m,k] * B[k,n], accumulated in the output buffer at A's width.
template <typename T, typename A>
void matmul_accumulate(const T* a, const T* b, A* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    A* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      A av = arow[p];
      if (av == A(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  check<ShapeError>(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 operands, got ",
                    shape_str(a.shape()), " and ", shape_str(b.shape()));
  check<ShapeError>(a.dim(1) == b.dim(0), "matmul: inner dimensions differ: ",
                    shape_str(a.shape()), " x ", shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<detail::acc_t<T>> acc(static_cast<size_t>(m * n), 0);
  matmul_accumulate(a.values().data(), b.values().data(), acc.data(), m, k, n);
  std::vector<T> out(acc.begin(), acc.end());
  opcount::add_macs(static_cast<uint64_t>(m) * static_cast<uint64_t>(k) * static_cast<uint64_t>(n));
  return make_op_node<T>(
      {m, n}, std::move(out), {a, b},
      [m, k, n](detail::NodeT<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        // dA = dC * B^T ; dB = A^T * dC
        if (pa.requires_grad) {
          pa.ensure_grad();
          const T* g = node.grad.data();
          const T* bv = pb.values.data();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t p = 0; p < k; ++p) {
              T acc = 0;
              const T* grow = g + i * n;
              const T* brow = bv + p * n;
              for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              pa.grad[static_cast<size_t>(i * k + p)] += acc;
            }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          const T* g = node.grad.data();
          const T* av = pa.values.data();
          for (int64_t i = 0; i < m; ++i) {
            const T* arow = av + i * k;
            const T* grow = g + i * n;
            for (int64_t p = 0; p < k; ++p) {
              T a_ip = arow[p];
              if (a_ip == T(0)) continue;
              T* brow = pb.grad.data() + p * n;
              for (int64_t j = 0; j < n; ++j) brow[j] += a_ip * grow[j];
            }
          }
        }
      },
      "matmul");
}

// Adds a length-N bias vector to every row of an {L,N} matrix.
template <typename T>
TensorT<T> add_row_bias(const TensorT<T>& x, const TensorT<T>& b) {
  check<ShapeError>(x.rank() == 2 && b.rank() == 1 && b.dim(0) == x.dim(1),
                    "add_row_bias: bias ", shape_str(b.shape()), " incompatible with ",
                    shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.values().begin(), x.values().end());
  auto bv = b.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(r * cols + c)] += bv[static_cast<size_t>(c)];
  opcount::add_elementwise(static_cast<uint64_t>(rows * cols));
  return make_op_node<T>(
      {rows, cols}, std::move(out), {x, b},
      [rows, cols](detail::NodeT<T>& node) {
        auto& px = *node.parents[0];
        auto& pb = *node.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < node.values.size(); ++i) px.grad[i] += node.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c)
              pb.grad[static_cast<size_t>(c)] += node.grad[static_cast<size_t>(r * cols + c)];
        }
      },
      "add_row_bias");
}

template <typename T>
TensorT<T> row_scale(const TensorT<T>& x, const TensorT<T>& s) {
  check<ShapeError>(x.rank() == 2 && s.rank() == 1 && s.dim(0) == x.dim(1),
                    "row_scale: scale ", shape_str(s.shape()), " incompatible with ",
                    shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(static_cast<size_t>(rows * cols));
  auto xv = x.values();
  auto sv = s.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c)
      out[static_cast<size_t>(r * cols + c)] =
          xv[static_cast<size_t>(r * cols + c)] * sv[static_cast<size_t>(c)];
  opcount::add_elementwise(static_cast<uint64_t>(rows * cols));
  return make_op_node<T>(
      x.shape(), std::move(out), {x, s},
      [rows, cols](detail::NodeT<T>& node) {
        auto& px = *node.parents[0];
        auto& ps = *node.parents[1];
        if (px.requires_grad) {
          px.ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c)
              px.grad[static_cast<size_t>(r * cols + c)] +=
                  node.grad[static_cast<size_t>(r * cols + c)] * ps.values[static_cast<size_t>(c)];
        }
        if (ps.requires_grad) {
          ps.ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c)
              ps.grad[static_cast<size_t>(c)] +=
                  node.grad[static_cast<size_t>(r * cols + c)] * px.values[static_cast<size_t>(r * cols + c)];
        }
      },
      "row_scale");
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  TensorT<T> y = matmul(x, w);
  if (b.defined()) y = add_row_bias(y, b);
  return y;
}

// ---- causal (lower-triangular) products --------------------------------------

template <typename T>
TensorT<T> causal_scores(const TensorT<T>& q, const TensorT<T>& k, T scalec) {
  check<ShapeError>(q.rank() == 2 && k.rank() == 2 && q.shape() == k.shape(),
                    "causal_scores: expected equal {L,d} operands, got ", shape_str(q.shape()),
                    " and ", shape_str(k.shape()));
  int64_t L = q.dim(0), d = q.dim(1);
  std::vector<T> out(static_cast<size_t>(L * L), T(0));
  const T* qv = q.values().data();
  const T* kv = k.values().data();
  for (int64_t t = 0; t < L; ++t)
    for (int64_t s = 0; s <= t; ++s) {
      detail::acc_t<T> acc = 0;
      const T* qr = qv + t * d;
      const T* kr = kv + s * d;
      for (int64_t j = 0; j < d; ++j) acc += static_cast<detail::acc_t<T>>(qr[j]) * kr[j];
      out[static_cast<size_t>(t * L + s)] = static_cast<T>(scalec * acc);
    }
  opcount::add_macs(static_cast<uint64_t>(L) * static_cast<uint64_t>(L + 1) / 2 *
                    static_cast<uint64_t>(d));
  return make_op_node<T>(
      {L, L}, std::move(out), {q, k},
      [L, d, scalec](detail::NodeT<T>& node) {
        auto& pq = *node.parents[0];
        auto& pk = *node.parents[1];
        const T* g = node.grad.data();
        if (pq.requires_grad) {
          pq.ensure_grad();
          for (int64_t t = 0; t < L; ++t)
            for (int64_t s = 0; s <= t; ++s) {
              T gv = scalec * g[t * L + s];
              if (gv == T(0)) continue;
              const T* kr = pk.values.data() + s * d;
              T* qg = pq.grad.data() + t * d;
              for (int64_t j = 0; j < d; ++j) qg[j] += gv * kr[j];
            }
        }
        if (pk.requires_grad) {
          pk.ensure_grad();
          for (int64_t t = 0; t < L; ++t)
            for (int64_t s = 0; s <= t; ++s) {
              T gv = scalec * g[t * L + s];
              if (gv == T(0)) continue;
              const T* qr = pq.values.data() + t * d;
              T* kg = pk.grad.data() + s * d;
              for (int64_t j = 0; j < d; ++j) kg[j] += gv * qr[j];
            }
        }
      },
      "causal_scores");
}

template <typename T>
TensorT<T> tri_matmul(const TensorT<T>& s_mat, const TensorT<T>& v) {
  check<ShapeError>(s_mat.rank() == 2 && s_mat.dim(0) == s_mat.dim(1),
                    "tri_matmul: score matrix must be square, got ", shape_str(s_mat.shape()));
  check<ShapeError>(v.rank() == 2 && v.dim(0) == s_mat.dim(0),
                    "tri_matmul: value rows must match score size, got ", shape_str(v.shape()));
  int64_t L = s_mat.dim(0), d = v.dim(1);
  std::vector<detail::acc_t<T>> acc(static_cast<size_t>(L * d), 0);
  const T* sv = s_mat.values().data();
  const T* vv = v.values().data();
  for (int64_t t = 0; t < L; ++t) {
    detail::acc_t<T>* orow = acc.data() + t * d;
    for (int64_t s = 0; s <= t; ++s) {
      detail::acc_t<T> w = sv[t * L + s];
      if (w == detail::acc_t<T>(0)) continue;
      const T* vrow = vv + s * d;
      for (int64_t j = 0; j < d; ++j) orow[j] += w * vrow[j];
    }
  }
  std::vector<T> out(acc.begin(), acc.end());
  opcount::add_macs(static_cast<uint64_t>(L) * static_cast<uint64_t>(L + 1) / 2 *
                    static_cast<uint64_t>(d));
  return make_op_node<T>(
      {L, d}, std::move(out), {s_mat, v},
      [L, d](detail::NodeT<T>& node) {
        auto& ps = *node.parents[0];
        auto& pv = *node.parents[1];
        const T* g = node.grad.data();
        if (ps.requires_grad) {
          ps.ensure_grad();
          for (int64_t t = 0; t < L; ++t)
            for (int64_t s = 0; s <= t; ++s) {
              T acc = 0;
              const T* grow = g + t * d;
              const T* vrow = pv.values.data() + s * d;
              for (int64_t j = 0; j < d; ++j) acc += grow[j] * vrow[j];
              ps.grad[static_cast<size_t>(t * L + s)] += acc;
            }
        }
        if (pv.requires_grad) {
          pv.ensure_grad();
          for (int64_t t = 0; t < L; ++t)
            for (int64_t s = 0; s <= t; ++s) {
              T w = ps.values[static_cast<size_t>(t * L + s)];
              if (w == T(0)) continue;
              const T* grow = g + t * d;
              T* vg = pv.grad.data() + s * d;
              for (int64_t j = 0; j < d; ++j) vg[j] += w * grow[j];
            }
        }
      },
      "tri_matmul");
}

// ---- normalization ------------------------------------------------------------

template <typename T>
TensorT<T> norm_groups(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       int64_t groups, T eps) {
  check<ShapeError>(x.rank() == 1 || x.rank() == 2, "norm_groups: expected rank 1 or 2, got ",
                    shape_str(x.shape()));
  int64_t rows = x.rank() == 2 ? x.dim(0) : 1;
  int64_t cols = x.rank() == 2 ? x.dim(1) : x.dim(0);
  check<ShapeError>(gamma.rank() == 1 && gamma.dim(0) == cols, "norm_groups: gamma ",
                    shape_str(gamma.shape()), " incompatible with ", shape_str(x.shape()));
  if (beta.defined())
    check<ShapeError>(beta.rank() == 1 && beta.dim(0) == cols, "norm_groups: beta ",
                      shape_str(beta.shape()), " incompatible with ", shape_str(x.shape()));
  check<ConfigError>(groups >= 1 && cols % groups == 0, "norm_groups: ", cols,
                     " channels not divisible into ", groups, " groups");
  int64_t gw = cols / groups;  // group width

  size_t n = static_cast<size_t>(rows * cols);
  std::vector<T> out(n);
  std::vector<T> xhat(n);                                        // normalized pre-affine
  std::vector<T> inv_std(static_cast<size_t>(rows * groups));    // 1/sqrt(var+eps)
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.defined() ? beta.values().data() : nullptr;
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t g = 0; g < groups; ++g) {
      const T* seg = xv + r * cols + g * gw;
      T mean = 0;
      for (int64_t j = 0; j < gw; ++j) mean += seg[j];
      mean /= static_cast<T>(gw);
      T var = 0;
      for (int64_t j = 0; j < gw; ++j) {
        T dv = seg[j] - mean;
        var += dv * dv;
      }
      var /= static_cast<T>(gw);
      T istd = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(r * groups + g)] = istd;
      for (int64_t j = 0; j < gw; ++j) {
        int64_t c = g * gw + j;
        size_t idx = static_cast<size_t>(r * cols + c);
        T xh = (seg[j] - mean) * istd;
        xhat[idx] = xh;
        out[idx] = xh * gv[c] + (bv ? bv[c] : T(0));
      }
    }
  }
  opcount::add_elementwise(static_cast<uint64_t>(n));
  std::vector<TensorT<T>> parents = {x, gamma};
  bool has_beta = beta.defined();
  if (has_beta) parents.push_back(beta);
  return make_op_node<T>(
      x.shape(), std::move(out), parents,
      [rows, cols, groups, gw, xhat, inv_std, has_beta](detail::NodeT<T>& node) {
        auto& px = *node.parents[0];
        auto& pg = *node.parents[1];
        const T* g = node.grad.data();
        const T* gv = pg.values.data();
        if (pg.requires_grad) {
          pg.ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c)
              pg.grad[static_cast<size_t>(c)] +=
                  g[r * cols + c] * xhat[static_cast<size_t>(r * cols + c)];
        }
        if (has_beta) {
          auto& pb = *node.parents[2];
          if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t c = 0; c < cols; ++c) pb.grad[static_cast<size_t>(c)] += g[r * cols + c];
          }
        }
        if (px.requires_grad) {
          px.ensure_grad();
          // Per group: dx = istd/G * (G*dy' - sum(dy') - xhat * sum(dy'*xhat)),
          // where dy' = dy * gamma.
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t grp = 0; grp < groups; ++grp) {
              T sum_dy = 0, sum_dy_xhat = 0;
              for (int64_t j = 0; j < gw; ++j) {
                int64_t c = grp * gw + j;
                T dy = g[r * cols + c] * gv[c];
                sum_dy += dy;
                sum_dy_xhat += dy * xhat[static_cast<size_t>(r * cols + c)];
              }
              T istd = inv_std[static_cast<size_t>(r * groups + grp)];
              for (int64_t j = 0; j < gw; ++j) {
                int64_t c = grp * gw + j;
                size_t idx = static_cast<size_t>(r * cols + c);
                T dy = g[r * cols + c] * gv[c];
                px.grad[idx] += istd * (dy - (sum_dy + xhat[idx] * sum_dy_xhat) / static_cast<T>(gw));
              }
            }
        }
      },
      "norm_groups");
}

template <typename T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps) {
  return norm_groups(x, gamma, beta, 1, eps);
}

// ---- convolutions -------------------------------------------------------------

template <typename T>
TensorT<T> conv2d_depthwise(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias) {
  check<ShapeError>(x.rank() == 3, "conv2d_depthwise: expected {H,W,D} input, got ",
                    shape_str(x.shape()));
  check<ConfigError>(kernel.rank() == 3 && kernel.dim(0) == 3 && kernel.dim(1) == 3,
                     "conv2d_depthwise: kernel must be {3,3,D}, got ", shape_str(kernel.shape()));
  int64_t H = x.dim(0), W = x.dim(1), D = x.dim(2);
  check<ShapeError>(kernel.dim(2) == D, "conv2d_depthwise: kernel channels ", kernel.dim(2),
                    " != input channels ", D);
  if (bias.defined())
    check<ShapeError>(bias.rank() == 1 && bias.dim(0) == D, "conv2d_depthwise: bias shape ",
                      shape_str(bias.shape()));
  std::vector<T> out(static_cast<size_t>(H * W * D), T(0));
  const T* xv = x.values().data();
  const T* kv = kernel.values().data();
  const T* bv = bias.defined() ? bias.values().data() : nullptr;
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      T* orow = out.data() + (i * W + j) * D;
      for (int64_t di = -1; di <= 1; ++di) {
        int64_t ii = i + di;
        if (ii < 0 || ii >= H) continue;
        for (int64_t dj = -1; dj <= 1; ++dj) {
          int64_t jj = j + dj;
          if (jj < 0 || jj >= W) continue;
          const T* xrow = xv + (ii * W + jj) * D;
          const T* krow = kv + ((di + 1) * 3 + (dj + 1)) * D;
          for (int64_t c = 0; c < D; ++c) orow[c] += xrow[c] * krow[c];
        }
      }
      if (bv)
        for (int64_t c = 0; c < D; ++c) orow[c] += bv[c];
    }
  // Nominal dense count (padding taps included), matching the analytic model.
  opcount::add_macs(static_cast<uint64_t>(9) * static_cast<uint64_t>(H * W * D));
  std::vector<TensorT<T>> parents = {x, kernel};
  bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias);
  return make_op_node<T>(
      {H, W, D}, std::move(out), parents,
      [H, W, D, has_bias](detail::NodeT<T>& node) {
        auto& px = *node.parents[0];
        auto& pk = *node.parents[1];
        const T* g = node.grad.data();
        if (px.requires_grad) {
          px.ensure_grad();
          const T* kv = pk.values.data();
          for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
              for (int64_t di = -1; di <= 1; ++di) {
                int64_t ii = i + di;
                if (ii < 0 || ii >= H) continue;
                for (int64_t dj = -1; dj <= 1; ++dj) {
                  int64_t jj = j + dj;
                  if (jj < 0 || jj >= W) continue;
                  const T* grow = g + (i * W + j) * D;
                  const T* krow = kv + ((di + 1) * 3 + (dj + 1)) * D;
                  T* xg = px.grad.data() + (ii * W + jj) * D;
                  for (int64_t c = 0; c < D; ++c) xg[c] += grow[c] * krow[c];
                }
              }
        }
        if (pk.requires_grad) {
          pk.ensure_grad();
          const T* xv = px.values.data();
          for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
              for (int64_t di = -1; di <= 1; ++di) {
                int64_t ii = i + di;
                if (ii < 0 || ii >= H) continue;
                for (int64_t dj = -1; dj <= 1; ++dj) {
                  int64_t jj = j + dj;
                  if (jj < 0 || jj >= W) continue;
                  const T* grow = g + (i * W + j) * D;
                  const T* xrow = xv + (ii * W + jj) * D;
                  T* kg = pk.grad.data() + ((di + 1) * 3 + (dj + 1)) * D;
                  for (int64_t c = 0; c < D; ++c) kg[c] += grow[c] * xrow[c];
                }
              }
        }
        if (has_bias) {
          auto& pb = *node.parents[2];
          if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t p = 0; p < H * W; ++p)
              for (int64_t c = 0; c < D; ++c) pb.grad[static_cast<size_t>(c)] += g[p * D + c];
          }
        }
      },
      "conv2d_depthwise");
}

template <typename T>
TensorT<T> causal_conv1d(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias) {
  check<ShapeError>(x.rank() == 2, "causal_conv1d: expected {L,D} input, got ",
                    shape_str(x.shape()));
  check<ShapeError>(kernel.rank() == 2 && kernel.dim(1) == x.dim(1),
                    "causal_conv1d: kernel ", shape_str(kernel.shape()), " incompatible with ",
                    shape_str(x.shape()));
  int64_t L = x.dim(0), D = x.dim(1), K = kernel.dim(0);
  if (bias.defined())
    check<ShapeError>(bias.rank() == 1 && bias.dim(0) == D, "causal_conv1d: bias shape ",
                      shape_str(bias.shape()));
  // out[t] = sum_j kernel[j] * x[t - (K-1) + j], taps before t=0 are zero.
  std::vector<T> out(static_cast<size_t>(L * D), T(0));
  const T* xv = x.values().data();
  const T* kv = kernel.values().data();
  const T* bv = bias.defined() ? bias.values().data() : nullptr;
  for (int64_t t = 0; t < L; ++t) {
    T* orow = out.data() + t * D;
    for (int64_t j = 0; j < K; ++j) {
      int64_t s = t - (K - 1) + j;
      if (s < 0) continue;
      const T* xrow = xv + s * D;
      const T* krow = kv + j * D;
      for (int64_t c = 0; c < D; ++c) orow[c] += xrow[c] * krow[c];
    }
    if (bv)
      for (int64_t c = 0; c < D; ++c) orow[c] += bv[c];
  }
  opcount::add_macs(static_cast<uint64_t>(K) * static_cast<uint64_t>(L * D));
  std::vector<TensorT<T>> parents = {x, kernel};
  bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias);
  return make_op_node<T>(
      {L, D}, std::move(out), parents,
      [L, D, K, has_bias](detail::NodeT<T>& node) {
        auto& px = *node.parents[0];
        auto& pk = *node.parents[1];
        const T* g = node.grad.data();
        if (px.requires_grad) {
          px.ensure_grad();
          const T* kv = pk.values.data();
          for (int64_t t = 0; t < L; ++t)
            for (int64_t j = 0; j < K; ++j) {
              int64_t s = t - (K - 1) + j;
              if (s < 0) continue;
              const T* grow = g + t * D;
              const T* krow = kv + j * D;
              T* xg = px.grad.data() + s * D;
              for (int64_t c = 0; c < D; ++c) xg[c] += grow[c] * krow[c];
            }
        }
        if (pk.requires_grad) {
          pk.ensure_grad();
          const T* xv = px.values.data();
          for (int64_t t = 0; t < L; ++t)
            for (int64_t j = 0; j < K; ++j) {
              int64_t s = t - (K - 1) + j;
              if (s < 0) continue;
              const T* grow = g + t * D;
              const T* xrow = xv + s * D;
              T* kg = pk.grad.data() + j * D;
              for (int64_t c = 0; c < D; ++c) kg[c] += grow[c] * xrow[c];
            }
        }
        if (has_bias) {
          auto& pb = *node.parents[2];
          if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t t = 0; t < L; ++t)
              for (int64_t c = 0; c < D; ++c) pb.grad[static_cast<size_t>(c)] += g[t * D + c];
          }
        }
      },
      "causal_conv1d");
}

// ---- classification loss ------------------------------------------------------

template <typename T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, int64_t target) {
  check<ShapeError>(logits.rank() == 1 || (logits.rank() == 2 && logits.dim(0) == 1),
                    "softmax_cross_entropy: expected {K} or {1,K} logits, got ",
                    shape_str(logits.shape()));
  int64_t K = logits.numel();
  check<UsageError>(target >= 0 && target < K, "softmax_cross_entropy: target ", target,
                    " out of range for ", K, " classes");
  auto lv = logits.values();
  T mx = lv[0];
  for (T v : lv) mx = std::max(mx, v);
  T lse = 0;
  for (T v : lv) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  T loss = lse - lv[static_cast<size_t>(target)];
  opcount::add_elementwise(static_cast<uint64_t>(3 * K));
  return make_op_node<T>(
      {1}, {loss}, {logits},
      [target, lse](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = node.grad[0];
        for (size_t i = 0; i < p.values.size(); ++i) {
          T soft = std::exp(p.values[i] - lse);
          p.grad[i] += g * (soft - (static_cast<int64_t>(i) == target ? T(1) : T(0)));
        }
      },
      "softmax_cross_entropy");
}

template <typename T>
std::vector<T> softmax_values(std::span<const T> logits) {
  std::vector<T> out(logits.begin(), logits.end());
  T mx = out[0];
  for (T v : out) mx = std::max(mx, v);
  T denom = 0;
  for (T& v : out) {
    v = std::exp(v - mx);
    denom += v;
  }
  for (T& v : out) v /= denom;
  return out;
}

template <typename T>
int64_t argmax(std::span<const T> v) {
  check<UsageError>(!v.empty(), "argmax of empty span");
  int64_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int64_t>(i);
  return best;
}

// ---- explicit instantiation ----------------------------------------------------

#define VIL_INSTANTIATE_NN(T)                                                                   \
  template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                          \
  template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);       \
  template TensorT<T> add_row_bias<T>(const TensorT<T>&, const TensorT<T>&);                    \
  template TensorT<T> row_scale<T>(const TensorT<T>&, const TensorT<T>&);                       \
  template TensorT<T> causal_scores<T>(const TensorT<T>&, const TensorT<T>&, T);                \
  template TensorT<T> tri_matmul<T>(const TensorT<T>&, const TensorT<T>&);                      \
  template TensorT<T> norm_groups<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,   \
                                     int64_t, T);                                               \
  template TensorT<T> layernorm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, T); \
  template TensorT<T> conv2d_depthwise<T>(const TensorT<T>&, const TensorT<T>&,                 \
                                          const TensorT<T>&);                                   \
  template TensorT<T> causal_conv1d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);\
  template TensorT<T> softmax_cross_entropy<T>(const TensorT<T>&, int64_t);                     \
  template std::vector<T> softmax_values<T>(std::span<const T>);                                \
  template int64_t argmax<T>(std::span<const T>);

VIL_INSTANTIATE_NN(float)
VIL_INSTANTIATE_NN(double)

#undef VIL_INSTANTIATE_NN

}  // namespace vil
