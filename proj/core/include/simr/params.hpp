#pragma once

#include <deque>
#include <random>
#include <string>
#include <string_view>

#include "simr/tensor.hpp"

namespace simr {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Owns a model's trainable tensors under unique names. References returned
/// by add()/get() stay valid for the store's lifetime.
template <typename T>
class ParamStore {
 public:
  /// Registers a zero-filled trainable tensor. Throws ContractError on a
  /// duplicate name.
  Tensor<T>& add(std::string name, Shape shape);
  Tensor<T>& get(std::string_view name);
  const Tensor<T>& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t element_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();

 private:
  std::deque<NamedTensor<T>> params_;
};

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), the default for weight matrices.
template <typename T>
void init_uniform_fan_in(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng);

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace simr
