#include "vil/optim.hpp"

#include <cmath>

namespace vil {

template <typename T>
void AdamWT<T>::step(std::vector<TensorT<T>>& params, double lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params[i].numel()), T(0));
      v_[i].assign(static_cast<size_t>(params[i].numel()), T(0));
    }
  }
  check<UsageError>(m_.size() == params.size(), "adamw: parameter list changed size");
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    check<UsageError>(m_[i].size() == static_cast<size_t>(p.numel()),
                      "adamw: parameter ", i, " changed shape");
    if (!p.requires_grad()) continue;
    auto vals = p.values_mut();
    auto grad = p.grad();
    if (grad.empty()) continue;  // never touched by backward
    for (size_t j = 0; j < vals.size(); ++j) {
      double g = static_cast<double>(grad[j]);
      double m = cfg_.beta1 * static_cast<double>(m_[i][j]) + (1.0 - cfg_.beta1) * g;
      double v = cfg_.beta2 * static_cast<double>(v_[i][j]) + (1.0 - cfg_.beta2) * g * g;
      m_[i][j] = static_cast<T>(m);
      v_[i][j] = static_cast<T>(v);
      double mhat = m / bc1;
      double vhat = v / bc2;
      double p_new = static_cast<double>(vals[j]) * (1.0 - lr * cfg_.weight_decay) -
                     lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      vals[j] = static_cast<T>(p_new);
    }
  }
}

template <typename T>
double clip_grad_norm(std::vector<TensorT<T>>& params, double max_norm) {
  check<ConfigError>(max_norm > 0, "clip_grad_norm: max_norm must be positive");
  double sq = 0;
  for (auto& p : params) {
    if (!p.requires_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    T s = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.requires_grad()) continue;
      auto node = p.node();
      for (T& g : node->grad) g *= s;
    }
  }
  return norm;
}

template class AdamWT<float>;
template class AdamWT<double>;
template double clip_grad_norm<float>(std::vector<TensorT<float>>&, double);
template double clip_grad_norm<double>(std::vector<TensorT<double>>&, double);

}  // namespace vil
