#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A TensorT<T> is a cheap handle onto a graph node holding values, an
// optional gradient buffer, and (when gradients are enabled) the parent
// links plus a backward closure.  Graphs are built implicitly by the free
// functions below; backward(loss) replays the recorded operations in exact
// reverse topological order and accumulates gradients into every node that
// requires them.
//
// Broadcasting is deliberately restricted: binary operations accept either
// two tensors of identical shape or one tensor plus one single-element
// tensor.  Everything else must be made explicit through tile/reshape ops.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "vil/errors.hpp"

namespace vil {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Reductions over float tensors accumulate at double width (the BLAS dsdot
// convention) and transcendentals evaluate through double; agreement between
// different execution orders then sits at storage rounding, not drift.
template <typename T>
using acc_t = std::conditional_t<std::is_same_v<T, float>, double, T>;

template <typename T>
struct NodeT {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until ensure_grad()
  bool requires_grad = false;
  bool backward_ran = false;   // set on a node used as backward() root
  uint64_t visit_stamp = 0;    // order stamp assigned during backward
  const char* op = "leaf";
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

}  // namespace detail

// Thread-local switch: while disabled, newly created ops record neither
// parents nor backward closures (pure inference).
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Operation counters (thread-local).  Matmul-like ops count exact
// multiply-accumulates; convolutions count nominal dense MACs (padding taps
// included); elementwise/norm ops count one unit per produced element.
// Forward passes only; backward closures are not instrumented.
namespace opcount {
void reset();
uint64_t macs();
uint64_t elementwise();
void add_macs(uint64_t n);
void add_elementwise(uint64_t n);
}  // namespace opcount

template <typename T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<detail::NodeT<T>> node) : node_(std::move(node)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false);
  static TensorT full(Shape shape, T value, bool requires_grad = false);
  static TensorT from_values(Shape shape, std::vector<T> values, bool requires_grad = false);
  static TensorT scalar(T value, bool requires_grad = false);
  static TensorT randn(Shape shape, std::mt19937& rng, T stddev = T(1), bool requires_grad = false);
  static TensorT rand_uniform(Shape shape, std::mt19937& rng, T lo, T hi, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }

  std::span<const T> values() const { return node_->values; }
  std::span<T> values_mut() { return node_->values; }
  std::span<const T> grad() const { return node_->grad; }
  T item() const;
  T at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg);
  void zero_grad();

  detail::NodeT<T>* node() const { return node_.get(); }
  const std::shared_ptr<detail::NodeT<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::NodeT<T>> node_;
};

using Tensor = TensorT<float>;
using TensorF64 = TensorT<double>;

// Generic op-node constructor: the extension point used by fused kernels
// (and by test fixtures that deliberately install broken backward rules).
// `backward` receives the finished node; it must read node.grad and
// accumulate into node.parents[i]->grad for parents that require gradients.
template <typename T>
TensorT<T> make_op_node(Shape shape, std::vector<T> values, std::vector<TensorT<T>> parents,
                        std::function<void(detail::NodeT<T>&)> backward, const char* op_name);

// ---- autodiff engine --------------------------------------------------------

// Reverse topological order of the subgraph reachable from root (root last).
template <typename T>
std::vector<detail::NodeT<T>*> topo_order(const TensorT<T>& root);

// Seeds d(loss)/d(loss) = 1 and runs every backward closure in reverse
// topological order.  loss must be a single-element tensor; running backward
// twice on the same root without rebuilding the graph is rejected.
template <typename T>
void backward(const TensorT<T>& loss);

// ---- elementwise / scalar ---------------------------------------------------

template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> maximum(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> exp(const TensorT<T>& x);
template <typename T> TensorT<T> log(const TensorT<T>& x);
template <typename T> TensorT<T> sigmoid(const TensorT<T>& x);
template <typename T> TensorT<T> logsigmoid(const TensorT<T>& x);
template <typename T> TensorT<T> silu(const TensorT<T>& x);
template <typename T> TensorT<T> abs(const TensorT<T>& x);
template <typename T> TensorT<T> negate(const TensorT<T>& x);
template <typename T> TensorT<T> scale(const TensorT<T>& x, T c);
template <typename T> TensorT<T> add_const(const TensorT<T>& x, T c);

// ---- reductions / shape -----------------------------------------------------

template <typename T> TensorT<T> sum(const TensorT<T>& x);                  // -> {1}
template <typename T> TensorT<T> row_sum(const TensorT<T>& x);              // {L,N} -> {L,1}
template <typename T> TensorT<T> row_max(const TensorT<T>& x);              // {L,N} -> {L,1}; {N} -> {1}
template <typename T> TensorT<T> mean_rows(const TensorT<T>& x);            // {L,N} -> {1,N}
template <typename T> TensorT<T> cumsum0(const TensorT<T>& x);              // {L} inclusive prefix sums
template <typename T> TensorT<T> tile_cols(const TensorT<T>& col, int64_t n);  // {L,1} -> {L,n}
template <typename T> TensorT<T> reshape(const TensorT<T>& x, Shape shape);
template <typename T> TensorT<T> transpose(const TensorT<T>& x);            // {M,N} -> {N,M}
template <typename T> TensorT<T> slice_rows(const TensorT<T>& x, int64_t r0, int64_t r1);
template <typename T> TensorT<T> slice_cols(const TensorT<T>& x, int64_t c0, int64_t c1);
template <typename T> TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts);
template <typename T> TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts);
template <typename T> TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<int64_t>& index);

// ---- linear algebra / nn ----------------------------------------------------

template <typename T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);
// y = x W + b (b optional, added to every row)
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b = {});
// y[t,j] = x[t,j] + b[j]
template <typename T> TensorT<T> add_row_bias(const TensorT<T>& x, const TensorT<T>& b);
// y[t,j] = x[t,j] * s[j]
template <typename T> TensorT<T> row_scale(const TensorT<T>& x, const TensorT<T>& s);

// Lower-triangular (causal) score products: out[t,s] = c * dot(q[t], k[s])
// for s <= t, 0 above the diagonal.  Only the masked-in entries are computed.
template <typename T>
TensorT<T> causal_scores(const TensorT<T>& q, const TensorT<T>& k, T scalec);
// out[t] = sum_{s<=t} s_mat[t,s] * v[s]; entries above the diagonal ignored.
template <typename T>
TensorT<T> tri_matmul(const TensorT<T>& s_mat, const TensorT<T>& v);

// Normalizes groups of channels per row: x {L,D} split into `groups` equal
// channel blocks, each block normalized to zero mean / unit variance, then
// scaled by gamma {D} and shifted by beta {D} (beta optional).
template <typename T>
TensorT<T> norm_groups(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       int64_t groups, T eps);
// Layer normalization over the last axis (norm_groups with one group).
template <typename T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                     T eps = T(1e-6));

// Depthwise 3x3 convolution on an {H,W,D} grid, zero padding 1, stride 1.
// kernel {3,3,D}, bias optional {D}.
template <typename T>
TensorT<T> conv2d_depthwise(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias);
// Depthwise causal 1-D convolution on {L,D}: left-padded by K-1 so that
// out[t] depends on x[t-K+1 .. t]; kernel {K,D}, bias optional {D}.
template <typename T>
TensorT<T> causal_conv1d(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias);

// Numerically stable softmax cross-entropy of a single logit vector {K}
// (or {1,K}) against an integer target; returns a {1} loss.
template <typename T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, int64_t target);

template <typename T> std::vector<T> softmax_values(std::span<const T> logits);
template <typename T> int64_t argmax(std::span<const T> v);

// ---- helpers ----------------------------------------------------------------

template <typename T> bool all_finite(std::span<const T> v);

}  // namespace vil
