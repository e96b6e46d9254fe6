#pragma once

// Decoupled-weight-decay Adam (AdamW) with bias correction, plus global
// gradient-norm clipping.  The optimizer owns per-parameter moment buffers;
// parameters are updated in place from their accumulated gradients.

#include <vector>

#include "vil/tensor.hpp"

namespace vil {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <typename T>
class AdamWT {
 public:
  explicit AdamWT(AdamWConfig cfg) : cfg_(cfg) {}

  // One update over all parameters:
  //   p <- p * (1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps)
  // Decay is decoupled: it never touches the moment estimates, so a zero
  // gradient still shrinks the weight by exactly (1 - lr*wd).
  void step(std::vector<TensorT<T>>& params, double lr);
  void step(std::vector<TensorT<T>>& params) { step(params, cfg_.lr); }

  int64_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

using AdamW = AdamWT<float>;

// Scales all gradients so that their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<TensorT<T>>& params, double max_norm);

}  // namespace vil
