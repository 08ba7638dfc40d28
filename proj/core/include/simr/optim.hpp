#pragma once

#include <memory>
#include <string_view>
#include <vector>

#include "simr/params.hpp"

namespace simr {

/// Applies one update from the accumulated gradients, then zeroes them.
/// Parameters without a gradient buffer are left untouched.
template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(ParamStore<T>& params) = 0;
};

template <typename T>
class Sgd final : public Optimizer<T> {
 public:
  explicit Sgd(T lr);
  void step(ParamStore<T>& params) override;

 private:
  T lr_;
};

template <typename T>
class Adam final : public Optimizer<T> {
 public:
  explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8));
  void step(ParamStore<T>& params) override;
  long steps() const noexcept { return t_; }

 private:
  T lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

enum class OptimizerKind { Adam, Sgd };

OptimizerKind parse_optimizer(std::string_view name);
std::string_view optimizer_name(OptimizerKind kind);

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(OptimizerKind kind, T lr);

}  // namespace simr
