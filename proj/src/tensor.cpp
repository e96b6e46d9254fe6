#include "vil/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace vil {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

thread_local int g_no_grad_depth = 0;

struct Counters {
  uint64_t macs = 0;
  uint64_t elementwise = 0;
};
thread_local Counters g_counters;

void validate_shape(const Shape& shape) {
  for (int64_t d : shape) check<ShapeError>(d > 0, "non-positive extent in shape ", shape_str(shape));
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

namespace opcount {
void reset() { g_counters = Counters{}; }
uint64_t macs() { return g_counters.macs; }
uint64_t elementwise() { return g_counters.elementwise; }
void add_macs(uint64_t n) { g_counters.macs += n; }
void add_elementwise(uint64_t n) { g_counters.elementwise += n; }
}  // namespace opcount

// ---- handle -----------------------------------------------------------------

template <typename T>
TensorT<T> TensorT<T>::from_values(Shape shape, std::vector<T> values, bool requires_grad) {
  validate_shape(shape);
  check<ShapeError>(shape_numel(shape) == static_cast<int64_t>(values.size()),
                    "value count ", values.size(), " does not match shape ", shape_str(shape));
  auto node = std::make_shared<detail::NodeT<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return TensorT<T>(std::move(node));
}

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  std::vector<T> v(static_cast<size_t>(shape_numel(shape)), T(0));
  return from_values(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value, bool requires_grad) {
  validate_shape(shape);
  std::vector<T> v(static_cast<size_t>(shape_numel(shape)), value);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::randn(Shape shape, std::mt19937& rng, T stddev, bool requires_grad) {
  validate_shape(shape);
  std::normal_distribution<T> dist(T(0), stddev);
  std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
  for (T& x : v) x = dist(rng);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::rand_uniform(Shape shape, std::mt19937& rng, T lo, T hi, bool requires_grad) {
  validate_shape(shape);
  std::uniform_real_distribution<T> dist(lo, hi);
  std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
  for (T& x : v) x = dist(rng);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
T TensorT<T>::item() const {
  check<UsageError>(numel() == 1, "item() requires a single-element tensor, got ", shape_str(shape()));
  return node_->values[0];
}

template <typename T>
T TensorT<T>::at(std::initializer_list<int64_t> idx) const {
  check<UsageError>(static_cast<int>(idx.size()) == rank(), "index rank mismatch");
  int64_t flat = 0;
  int i = 0;
  for (int64_t v : idx) {
    check<UsageError>(v >= 0 && v < dim(i), "index out of range");
    flat = flat * dim(i) + v;
    ++i;
  }
  return node_->values[static_cast<size_t>(flat)];
}

template <typename T>
void TensorT<T>::set_requires_grad(bool rg) {
  check<UsageError>(node_->parents.empty(), "requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = rg;
}

template <typename T>
void TensorT<T>::zero_grad() {
  node_->grad.assign(node_->values.size(), T(0));
  node_->backward_ran = false;
}

// ---- op-node construction ---------------------------------------------------

template <typename T>
TensorT<T> make_op_node(Shape shape, std::vector<T> values, std::vector<TensorT<T>> parents,
                        std::function<void(detail::NodeT<T>&)> backward, const char* op_name) {
  validate_shape(shape);
  check<ShapeError>(shape_numel(shape) == static_cast<int64_t>(values.size()),
                    "op ", op_name, ": value count does not match shape ", shape_str(shape));
  auto node = std::make_shared<detail::NodeT<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op_name;
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs_grad = needs_grad || p.node()->requires_grad;
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward);
  }
  return TensorT<T>(std::move(node));
}

// ---- backward engine --------------------------------------------------------

template <typename T>
std::vector<detail::NodeT<T>*> topo_order(const TensorT<T>& root) {
  // Iterative postorder DFS; a node is emitted after all of its parents.
  std::vector<detail::NodeT<T>*> order;
  std::unordered_set<detail::NodeT<T>*> done;
  std::vector<std::pair<detail::NodeT<T>*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (done.count(node)) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      detail::NodeT<T>* parent = node->parents[next].get();
      ++next;
      if (!done.count(parent)) stack.emplace_back(parent, 0);
    } else {
      done.insert(node);
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void backward(const TensorT<T>& loss) {
  check<UsageError>(loss.defined(), "backward on undefined tensor");
  check<UsageError>(loss.numel() == 1, "backward requires a scalar loss, got ",
                    shape_str(loss.shape()));
  detail::NodeT<T>* root = loss.node();
  check<UsageError>(!root->backward_ran, "backward called twice on the same graph without reset");
  root->backward_ran = true;
  check<UsageError>(root->requires_grad,
                    "backward on a graph with no gradient-tracking leaves");

  std::vector<detail::NodeT<T>*> order = topo_order(loss);
  for (detail::NodeT<T>* n : order) {
    if (n->requires_grad) n->ensure_grad();
  }
  root->grad[0] = T(1);
  uint64_t stamp = 1;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::NodeT<T>* n = *it;
    n->visit_stamp = stamp++;
    if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
  }
}

// ---- elementwise ------------------------------------------------------------

namespace {

// Binary broadcast: identical shapes, or one operand with a single element.
enum class BinKind { Same, ScalarLeft, ScalarRight };

template <typename T>
BinKind binary_kind(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() == b.shape()) return BinKind::Same;
  // Two single-element operands with differing shapes: the higher-rank side
  // keeps its shape, so {c,1} op scalar stays {c,1} even when c == 1.
  if (a.numel() == 1 && b.numel() == 1)
    return a.rank() >= b.rank() ? BinKind::ScalarRight : BinKind::ScalarLeft;
  if (a.numel() == 1) return BinKind::ScalarLeft;
  if (b.numel() == 1) return BinKind::ScalarRight;
  fail<ShapeError>(op, ": shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()),
                   " are neither equal nor scalar-broadcastable");
}

// Accumulates `src` into parent grad; if the parent is a broadcast scalar the
// contributions are reduced by summation.
template <typename T>
void accumulate_grad(detail::NodeT<T>& parent, std::span<const T> src) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  if (parent.numel() == 1 && src.size() != 1) {
    T acc = 0;
    for (T v : src) acc += v;
    parent.grad[0] += acc;
  } else {
    for (size_t i = 0; i < src.size(); ++i) parent.grad[i] += src[i];
  }
}

template <typename T, typename FwdFn, typename BwdFn>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, const char* name, FwdFn fwd,
                     BwdFn bwd) {
  BinKind kind = binary_kind(a, b, name);
  const auto& big = (kind == BinKind::ScalarLeft) ? b : a;
  size_t n = static_cast<size_t>(big.numel());
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (size_t i = 0; i < n; ++i) {
    T x = (kind == BinKind::ScalarLeft) ? av[0] : av[i];
    T y = (kind == BinKind::ScalarRight) ? bv[0] : bv[i];
    out[i] = fwd(x, y);
  }
  opcount::add_elementwise(n);
  return make_op_node<T>(
      big.shape(), std::move(out), {a, b},
      [kind, bwd](detail::NodeT<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        size_t n = node.values.size();
        std::vector<T> ga(n), gb(n);
        for (size_t i = 0; i < n; ++i) {
          T x = (kind == BinKind::ScalarLeft) ? pa.values[0] : pa.values[i];
          T y = (kind == BinKind::ScalarRight) ? pb.values[0] : pb.values[i];
          auto [dx, dy] = bwd(x, y, node.values[i]);
          ga[i] = node.grad[i] * dx;
          gb[i] = node.grad[i] * dy;
        }
        accumulate_grad(pa, std::span<const T>(ga));
        accumulate_grad(pb, std::span<const T>(gb));
      },
      name);
}

template <typename T, typename FwdFn, typename BwdFn>
TensorT<T> unary_op(const TensorT<T>& x, const char* name, FwdFn fwd, BwdFn bwd) {
  size_t n = static_cast<size_t>(x.numel());
  std::vector<T> out(n);
  auto xv = x.values();
  for (size_t i = 0; i < n; ++i) out[i] = fwd(xv[i]);
  opcount::add_elementwise(n);
  return make_op_node<T>(
      x.shape(), std::move(out), {x},
      [bwd](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < node.values.size(); ++i)
          p.grad[i] += node.grad[i] * bwd(p.values[i], node.values[i]);
      },
      name);
}

template <typename T>
T stable_sigmoid(T x) {
  const double v = static_cast<double>(x);
  if (v >= 0) return static_cast<T>(1.0 / (1.0 + std::exp(-v)));
  const double e = std::exp(v);
  return static_cast<T>(e / (1.0 + e));
}

template <typename T>
T stable_logsigmoid(T x) {
  // log(sigmoid(x)) = -softplus(-x), split by sign for stability.
  const double v = static_cast<double>(x);
  if (v >= 0) return static_cast<T>(-std::log1p(std::exp(-v)));
  return static_cast<T>(v - std::log1p(std::exp(v)));
}

}  // namespace

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T, T, T) { return std::pair<T, T>(T(1), T(1)); });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T, T, T) { return std::pair<T, T>(T(1), T(-1)); });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T x, T y, T) { return std::pair<T, T>(y, x); });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(
      a, b, "div", [](T x, T y) { return x / y; },
      [](T x, T y, T) { return std::pair<T, T>(T(1) / y, -x / (y * y)); });
}

template <typename T>
TensorT<T> maximum(const TensorT<T>& a, const TensorT<T>& b) {
  // Ties route the gradient to the first operand.
  return binary_op(
      a, b, "maximum", [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T) {
        return x >= y ? std::pair<T, T>(T(1), T(0)) : std::pair<T, T>(T(0), T(1));
      });
}

template <typename T>
TensorT<T> exp(const TensorT<T>& x) {
  return unary_op(
      x, "exp", [](T v) { return static_cast<T>(std::exp(static_cast<double>(v))); },
      [](T, T out) { return out; });
}

template <typename T>
TensorT<T> log(const TensorT<T>& x) {
  for (T v : x.values())
    check<DomainError>(v > T(0), "log of non-positive value ", static_cast<double>(v));
  return unary_op(
      x, "log", [](T v) { return static_cast<T>(std::log(static_cast<double>(v))); },
      [](T in, T) { return T(1) / in; });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return unary_op(
      x, "sigmoid", [](T v) { return stable_sigmoid(v); },
      [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
TensorT<T> logsigmoid(const TensorT<T>& x) {
  return unary_op(
      x, "logsigmoid", [](T v) { return stable_logsigmoid(v); },
      [](T in, T) { return stable_sigmoid(-in); });
}

template <typename T>
TensorT<T> silu(const TensorT<T>& x) {
  return unary_op(
      x, "silu", [](T v) { return v * stable_sigmoid(v); },
      [](T in, T) {
        T s = stable_sigmoid(in);
        return s * (T(1) + in * (T(1) - s));
      });
}

template <typename T>
TensorT<T> abs(const TensorT<T>& x) {
  return unary_op(
      x, "abs", [](T v) { return std::fabs(v); },
      [](T in, T) { return in > T(0) ? T(1) : (in < T(0) ? T(-1) : T(0)); });
}

template <typename T>
TensorT<T> negate(const TensorT<T>& x) {
  return unary_op(
      x, "negate", [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  return unary_op(
      x, "scale", [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
TensorT<T> add_const(const TensorT<T>& x, T c) {
  return unary_op(
      x, "add_const", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  opcount::add_elementwise(static_cast<uint64_t>(x.numel()));
  return make_op_node<T>(
      {1}, {acc}, {x},
      [](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (auto& g : p.grad) g += node.grad[0];
      },
      "sum");
}

namespace {

template <typename T>
std::pair<int64_t, int64_t> rows_cols(const TensorT<T>& x, const char* op) {
  check<ShapeError>(x.rank() == 1 || x.rank() == 2, op, ": expected rank 1 or 2, got ",
                    shape_str(x.shape()));
  if (x.rank() == 1) return {1, x.dim(0)};
  return {x.dim(0), x.dim(1)};
}

}  // namespace

template <typename T>
TensorT<T> row_sum(const TensorT<T>& x) {
  auto [rows, cols] = rows_cols(x, "row_sum");
  std::vector<T> out(static_cast<size_t>(rows));
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    detail::acc_t<T> acc = 0;
    for (int64_t c = 0; c < cols; ++c) acc += xv[static_cast<size_t>(r * cols + c)];
    out[static_cast<size_t>(r)] = static_cast<T>(acc);
  }
  opcount::add_elementwise(static_cast<uint64_t>(x.numel()));
  Shape oshape = x.rank() == 1 ? Shape{1} : Shape{rows, 1};
  int64_t cols_c = cols;
  return make_op_node<T>(
      oshape, std::move(out), {x},
      [cols_c](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        int64_t rows = node.numel();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols_c; ++c)
            p.grad[static_cast<size_t>(r * cols_c + c)] += node.grad[static_cast<size_t>(r)];
      },
      "row_sum");
}

template <typename T>
TensorT<T> row_max(const TensorT<T>& x) {
  auto [rows, cols] = rows_cols(x, "row_max");
  std::vector<T> out(static_cast<size_t>(rows));
  std::vector<int64_t> arg(static_cast<size_t>(rows));
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r) {
    T best = xv[static_cast<size_t>(r * cols)];
    int64_t bi = 0;
    for (int64_t c = 1; c < cols; ++c) {
      T v = xv[static_cast<size_t>(r * cols + c)];
      if (v > best) {
        best = v;
        bi = c;
      }
    }
    out[static_cast<size_t>(r)] = best;
    arg[static_cast<size_t>(r)] = bi;
  }
  opcount::add_elementwise(static_cast<uint64_t>(x.numel()));
  Shape oshape = x.rank() == 1 ? Shape{1} : Shape{rows, 1};
  int64_t cols_c = cols;
  return make_op_node<T>(
      oshape, std::move(out), {x},
      [cols_c, arg](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t r = 0; r < node.numel(); ++r)
          p.grad[static_cast<size_t>(r * cols_c + arg[static_cast<size_t>(r)])] +=
              node.grad[static_cast<size_t>(r)];
      },
      "row_max");
}

template <typename T>
TensorT<T> mean_rows(const TensorT<T>& x) {
  check<ShapeError>(x.rank() == 2, "mean_rows: expected rank 2, got ", shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<detail::acc_t<T>> acc(static_cast<size_t>(cols), 0);
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) acc[static_cast<size_t>(c)] += xv[static_cast<size_t>(r * cols + c)];
  std::vector<T> out(static_cast<size_t>(cols));
  for (size_t c = 0; c < out.size(); ++c) out[c] = static_cast<T>(acc[c] / static_cast<double>(rows));
  opcount::add_elementwise(static_cast<uint64_t>(x.numel()));
  return make_op_node<T>(
      {1, cols}, std::move(out), {x},
      [rows, cols](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c)
            p.grad[static_cast<size_t>(r * cols + c)] +=
                node.grad[static_cast<size_t>(c)] / static_cast<T>(rows);
      },
      "mean_rows");
}

template <typename T>
TensorT<T> cumsum0(const TensorT<T>& x) {
  check<ShapeError>(x.rank() == 1, "cumsum0: expected rank 1, got ", shape_str(x.shape()));
  size_t n = static_cast<size_t>(x.numel());
  std::vector<T> out(n);
  auto xv = x.values();
  // Compensated running sum at accumulator width: the prefix sums feed
  // log-space gate weights, so drift (~n*eps*|sum|) would exponentiate into
  // visible cross-execution-order deviation.
  detail::acc_t<T> acc = 0, comp = 0;
  for (size_t i = 0; i < n; ++i) {
    const detail::acc_t<T> term = xv[i];
    const detail::acc_t<T> next = acc + term;
    comp += std::abs(acc) >= std::abs(term) ? (acc - next) + term : (term - next) + acc;
    acc = next;
    out[i] = static_cast<T>(acc + comp);
  }
  opcount::add_elementwise(n);
  return make_op_node<T>(
      x.shape(), std::move(out), {x},
      [](detail::NodeT<T>& node) {
        // d/dx[u] = sum of output grads at t >= u: reverse suffix sums.
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T acc = 0;
        for (size_t i = node.values.size(); i-- > 0;) {
          acc += node.grad[i];
          p.grad[i] += acc;
        }
      },
      "cumsum0");
}

template <typename T>
TensorT<T> tile_cols(const TensorT<T>& col, int64_t n) {
  check<ShapeError>(col.rank() == 2 && col.dim(1) == 1, "tile_cols: expected {L,1}, got ",
                    shape_str(col.shape()));
  check<ShapeError>(n >= 1, "tile_cols: non-positive tile count");
  int64_t rows = col.dim(0);
  std::vector<T> out(static_cast<size_t>(rows * n));
  auto cv = col.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < n; ++c) out[static_cast<size_t>(r * n + c)] = cv[static_cast<size_t>(r)];
  opcount::add_elementwise(static_cast<uint64_t>(rows * n));
  return make_op_node<T>(
      {rows, n}, std::move(out), {col},
      [rows, n](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          T acc = 0;
          for (int64_t c = 0; c < n; ++c) acc += node.grad[static_cast<size_t>(r * n + c)];
          p.grad[static_cast<size_t>(r)] += acc;
        }
      },
      "tile_cols");
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  check<ShapeError>(shape_numel(shape) == x.numel(), "reshape: cannot view ",
                    shape_str(x.shape()), " as ", shape_str(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_op_node<T>(
      std::move(shape), std::move(out), {x},
      [](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < node.values.size(); ++i) p.grad[i] += node.grad[i];
      },
      "reshape");
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& x) {
  check<ShapeError>(x.rank() == 2, "transpose: expected rank 2, got ", shape_str(x.shape()));
  int64_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n));
  auto xv = x.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = xv[static_cast<size_t>(i * n + j)];
  return make_op_node<T>(
      {n, m}, std::move(out), {x},
      [m, n](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j)
            p.grad[static_cast<size_t>(i * n + j)] += node.grad[static_cast<size_t>(j * m + i)];
      },
      "transpose");
}

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& x, int64_t r0, int64_t r1) {
  auto [rows, cols] = rows_cols(x, "slice_rows");
  check<ShapeError>(x.rank() == 2, "slice_rows: expected rank 2, got ", shape_str(x.shape()));
  check<ShapeError>(r0 >= 0 && r0 < r1 && r1 <= rows, "slice_rows: range [", r0, ",", r1,
                    ") invalid for ", rows, " rows");
  std::vector<T> out(static_cast<size_t>((r1 - r0) * cols));
  auto xv = x.values();
  std::copy(xv.begin() + r0 * cols, xv.begin() + r1 * cols, out.begin());
  int64_t cols_c = cols;
  return make_op_node<T>(
      {r1 - r0, cols}, std::move(out), {x},
      [r0, cols_c](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        size_t off = static_cast<size_t>(r0 * cols_c);
        for (size_t i = 0; i < node.values.size(); ++i) p.grad[off + i] += node.grad[i];
      },
      "slice_rows");
}

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& x, int64_t c0, int64_t c1) {
  check<ShapeError>(x.rank() == 2, "slice_cols: expected rank 2, got ", shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  check<ShapeError>(c0 >= 0 && c0 < c1 && c1 <= cols, "slice_cols: range [", c0, ",", c1,
                    ") invalid for ", cols, " cols");
  int64_t w = c1 - c0;
  std::vector<T> out(static_cast<size_t>(rows * w));
  auto xv = x.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < w; ++c)
      out[static_cast<size_t>(r * w + c)] = xv[static_cast<size_t>(r * cols + c0 + c)];
  return make_op_node<T>(
      {rows, w}, std::move(out), {x},
      [rows, cols, c0, w](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < w; ++c)
            p.grad[static_cast<size_t>(r * cols + c0 + c)] +=
                node.grad[static_cast<size_t>(r * w + c)];
      },
      "slice_cols");
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  check<UsageError>(!parts.empty(), "concat_rows: empty part list");
  int64_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
  check<ShapeError>(cols > 0, "concat_rows: parts must be rank 2");
  int64_t rows = 0;
  for (const auto& p : parts) {
    check<ShapeError>(p.rank() == 2 && p.dim(1) == cols, "concat_rows: column mismatch: ",
                      shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(static_cast<size_t>(rows * cols));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    off += p.numel();
  }
  return make_op_node<T>(
      {rows, cols}, std::move(out), parts,
      [offsets](detail::NodeT<T>& node) {
        for (size_t k = 0; k < node.parents.size(); ++k) {
          auto& p = *node.parents[k];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          size_t off = static_cast<size_t>(offsets[k]);
          for (size_t i = 0; i < p.values.size(); ++i) p.grad[i] += node.grad[off + i];
        }
      },
      "concat_rows");
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  check<UsageError>(!parts.empty(), "concat_cols: empty part list");
  check<ShapeError>(parts[0].rank() == 2, "concat_cols: parts must be rank 2");
  int64_t rows = parts[0].dim(0);
  int64_t cols = 0;
  for (const auto& p : parts) {
    check<ShapeError>(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch: ",
                      shape_str(p.shape()));
    cols += p.dim(1);
  }
  std::vector<T> out(static_cast<size_t>(rows * cols));
  std::vector<int64_t> offsets;
  {
    int64_t coff = 0;
    for (const auto& p : parts) {
      offsets.push_back(coff);
      auto pv = p.values();
      int64_t w = p.dim(1);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < w; ++c)
          out[static_cast<size_t>(r * cols + coff + c)] = pv[static_cast<size_t>(r * w + c)];
      coff += w;
    }
  }
  return make_op_node<T>(
      {rows, cols}, std::move(out), parts,
      [rows, cols, offsets](detail::NodeT<T>& node) {
        for (size_t k = 0; k < node.parents.size(); ++k) {
          auto& p = *node.parents[k];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          int64_t w = p.shape[1];
          int64_t coff = offsets[k];
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < w; ++c)
              p.grad[static_cast<size_t>(r * w + c)] +=
                  node.grad[static_cast<size_t>(r * cols + coff + c)];
        }
      },
      "concat_cols");
}

template <typename T>
TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<int64_t>& index) {
  check<ShapeError>(x.rank() == 2, "gather_rows: expected rank 2, got ", shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  for (int64_t i : index)
    check<ShapeError>(i >= 0 && i < rows, "gather_rows: index ", i, " out of range for ", rows,
                      " rows");
  int64_t orows = static_cast<int64_t>(index.size());
  std::vector<T> out(static_cast<size_t>(orows * cols));
  auto xv = x.values();
  for (int64_t r = 0; r < orows; ++r)
    std::copy(xv.begin() + index[static_cast<size_t>(r)] * cols,
              xv.begin() + (index[static_cast<size_t>(r)] + 1) * cols,
              out.begin() + r * cols);
  return make_op_node<T>(
      {orows, cols}, std::move(out), {x},
      [index, cols](detail::NodeT<T>& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        int64_t orows = static_cast<int64_t>(index.size());
        for (int64_t r = 0; r < orows; ++r)
          for (int64_t c = 0; c < cols; ++c)
            p.grad[static_cast<size_t>(index[static_cast<size_t>(r)] * cols + c)] +=
                node.grad[static_cast<size_t>(r * cols + c)];
      },
      "gather_rows");
}

// ---- misc helpers -----------------------------------------------------------

template <typename T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// ---- explicit instantiation ---------------------------------------------------

#define VIL_INSTANTIATE_TENSOR(T)                                                              \
  template class TensorT<T>;                                                                   \
  template TensorT<T> make_op_node<T>(Shape, std::vector<T>, std::vector<TensorT<T>>,          \
                                      std::function<void(detail::NodeT<T>&)>, const char*);    \
  template std::vector<detail::NodeT<T>*> topo_order<T>(const TensorT<T>&);                    \
  template void backward<T>(const TensorT<T>&);                                                \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> div<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> maximum<T>(const TensorT<T>&, const TensorT<T>&);                        \
  template TensorT<T> exp<T>(const TensorT<T>&);                                               \
  template TensorT<T> log<T>(const TensorT<T>&);                                               \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                                           \
  template TensorT<T> logsigmoid<T>(const TensorT<T>&);                                        \
  template TensorT<T> silu<T>(const TensorT<T>&);                                              \
  template TensorT<T> abs<T>(const TensorT<T>&);                                               \
  template TensorT<T> negate<T>(const TensorT<T>&);                                            \
  template TensorT<T> scale<T>(const TensorT<T>&, T);                                          \
  template TensorT<T> add_const<T>(const TensorT<T>&, T);                                      \
  template TensorT<T> sum<T>(const TensorT<T>&);                                               \
  template TensorT<T> row_sum<T>(const TensorT<T>&);                                           \
  template TensorT<T> row_max<T>(const TensorT<T>&);                                           \
  template TensorT<T> mean_rows<T>(const TensorT<T>&);                                         \
  template TensorT<T> cumsum0<T>(const TensorT<T>&);                                           \
  template TensorT<T> tile_cols<T>(const TensorT<T>&, int64_t);                                \
  template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                                    \
  template TensorT<T> transpose<T>(const TensorT<T>&);                                         \
  template TensorT<T> slice_rows<T>(const TensorT<T>&, int64_t, int64_t);                      \
  template TensorT<T> slice_cols<T>(const TensorT<T>&, int64_t, int64_t);                      \
  template TensorT<T> concat_rows<T>(const std::vector<TensorT<T>>&);                          \
  template TensorT<T> concat_cols<T>(const std::vector<TensorT<T>>&);                          \
  template TensorT<T> gather_rows<T>(const TensorT<T>&, const std::vector<int64_t>&);          \
  template bool all_finite<T>(std::span<const T>);

VIL_INSTANTIATE_TENSOR(float)
VIL_INSTANTIATE_TENSOR(double)

#undef VIL_INSTANTIATE_TENSOR

}  // namespace vil
