#include "simr/loss.hpp"

namespace simr {

namespace {

template <typename T>
Var<T> infonce(Var<T> s, const char* name) {
  const auto& shape = s.shape();
  if (shape.size() != 2 || shape[0] != shape[1]) {
    throw ContractError(std::string(name) + ": similarity matrix must be square, got " + shape_str(shape));
  }
  const auto n = shape[0];
  Tensor<T> eye(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) eye.data[i * n + i] = T(1);
  auto diag_mask = s.graph->leaf(std::move(eye));
  auto per_pair = add(log_softmax(s, 1), log_softmax(s, 0));
  return scale(sum(mul(per_pair, diag_mask)), T(-1) / static_cast<T>(n));
}

}  // namespace

template <typename T>
Var<T> infonce_t2i(Var<T> s_t2i) {
  return infonce(s_t2i, "infonce_t2i");
}

template <typename T>
Var<T> infonce_i2t(Var<T> s_i2t) {
  return infonce(s_i2t, "infonce_i2t");
}

template <typename T>
LossTerms<T> total_loss(Var<T> s_t2i, Var<T> s_i2t) {
  LossTerms<T> terms;
  terms.l_t2i = infonce_t2i(s_t2i);
  terms.l_i2t = infonce_i2t(s_i2t);
  terms.total = add(terms.l_t2i, terms.l_i2t);
  terms.batch_size = s_t2i.dim(0);
  return terms;
}

template Var<float> infonce_t2i(Var<float>);
template Var<double> infonce_t2i(Var<double>);
template Var<float> infonce_i2t(Var<float>);
template Var<double> infonce_i2t(Var<double>);
template LossTerms<float> total_loss(Var<float>, Var<float>);
template LossTerms<double> total_loss(Var<double>, Var<double>);

}  // namespace simr
