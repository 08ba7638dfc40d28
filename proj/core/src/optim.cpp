#include "simr/optim.hpp"

#include <cmath>
#include <string>

namespace simr {

namespace {

template <typename T>
void require_positive_lr(T lr) {
  if (!(lr > T(0)) || !std::isfinite(lr)) {
    throw ConfigError("optimizer: learning rate must be positive, got " + std::to_string(lr));
  }
}

}  // namespace

template <typename T>
Sgd<T>::Sgd(T lr) : lr_(lr) {
  require_positive_lr(lr);
}

template <typename T>
void Sgd<T>::step(ParamStore<T>& params) {
  for (auto& p : params) {
    auto& t = p.tensor;
    if (t.grad.size() != t.data.size()) continue;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] -= lr_ * t.grad[i];
    t.zero_grad();
  }
}

template <typename T>
Adam<T>::Adam(T lr, T beta1, T beta2, T eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  require_positive_lr(lr);
  if (!(beta1 >= T(0) && beta1 < T(1) && beta2 >= T(0) && beta2 < T(1) && eps > T(0))) {
    throw ConfigError("adam: betas must lie in [0, 1) and eps must be positive");
  }
}

template <typename T>
void Adam<T>::step(ParamStore<T>& params) {
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
  }
  ++t_;
  const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
  const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
  std::size_t idx = 0;
  for (auto& p : params) {
    auto& t = p.tensor;
    auto& m = m_[idx];
    auto& v = v_[idx];
    ++idx;
    if (t.grad.size() != t.data.size()) continue;
    if (m.size() != t.data.size()) {
      m.assign(t.data.size(), T(0));
      v.assign(t.data.size(), T(0));
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const T g = t.grad[i];
      m[i] = beta1_ * m[i] + (T(1) - beta1_) * g;
      v[i] = beta2_ * v[i] + (T(1) - beta2_) * g * g;
      const T m_hat = m[i] / bc1;
      const T v_hat = v[i] / bc2;
      t.data[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
    t.zero_grad();
  }
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adam or sgd)");
}

std::string_view optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "sgd";
}

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(OptimizerKind kind, T lr) {
  if (kind == OptimizerKind::Sgd) return std::make_unique<Sgd<T>>(lr);
  return std::make_unique<Adam<T>>(lr);
}

template class Sgd<float>;
template class Sgd<double>;
template class Adam<float>;
template class Adam<double>;
template std::unique_ptr<Optimizer<float>> make_optimizer(OptimizerKind, float);
template std::unique_ptr<Optimizer<double>> make_optimizer(OptimizerKind, double);

}  // namespace simr
