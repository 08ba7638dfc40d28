#include "simr/tensor.hpp"

#include <cmath>
#include <sstream>

namespace simr {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
void Tensor<T>::validate() const {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor: zero-sized dimension in shape " + shape_str(shape));
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape.size()) {
    throw DimensionError("tensor: index rank " + std::to_string(index.size()) +
                         " does not match shape " + shape_str(shape));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape[axis]) throw DimensionError("tensor: index out of range for " + shape_str(shape));
    off = off * shape[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data[offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data[offset(index)];
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (auto v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template struct Tensor<float>;
template struct Tensor<double>;

}  // namespace simr
