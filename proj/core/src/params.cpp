#include "simr/params.hpp"

#include <algorithm>
#include <cmath>

namespace simr {

template <typename T>
Tensor<T>& ParamStore<T>::add(std::string name, Shape shape) {
  if (contains(name)) throw ContractError("params: duplicate parameter name '" + name + "'");
  Tensor<T> t(std::move(shape));
  t.requires_grad = true;
  params_.push_back(NamedTensor<T>{std::move(name), std::move(t)});
  return params_.back().tensor;
}

template <typename T>
Tensor<T>& ParamStore<T>::get(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ContractError("params: no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(std::string_view name) const {
  return const_cast<ParamStore*>(this)->get(name);
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.name == name; });
}

template <typename T>
std::size_t ParamStore<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void init_uniform_fan_in(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

template class ParamStore<float>;
template class ParamStore<double>;
template void init_uniform_fan_in(Tensor<float>&, std::size_t, std::mt19937_64&);
template void init_uniform_fan_in(Tensor<double>&, std::size_t, std::mt19937_64&);

}  // namespace simr
