#pragma once

// Bidirectional InfoNCE over square similarity matrices. For one direction
// with matrix S (n x n) the per-pair loss is
//
//   -log softmax_row(S)_i[i] - log softmax_col(S)_i[i]
//
// averaged over i. The total loss is the sum of the t2i and i2t terms.

#include "simr/autograd.hpp"

namespace simr {

/// S_t2i: (T, I) with T == I. Throws ContractError otherwise.
template <typename T>
Var<T> infonce_t2i(Var<T> s_t2i);

/// S_i2t: (I, T) with I == T.
template <typename T>
Var<T> infonce_i2t(Var<T> s_i2t);

struct LossBreakdown {
  double l_t2i = 0;
  double l_i2t = 0;
  double total = 0;
  std::size_t batch_size = 0;
};

template <typename T>
struct LossTerms {
  Var<T> l_t2i;
  Var<T> l_i2t;
  Var<T> total;
  std::size_t batch_size = 0;

  LossBreakdown breakdown() const {
    return {static_cast<double>(l_t2i.value()[0]), static_cast<double>(l_i2t.value()[0]),
            static_cast<double>(total.value()[0]), batch_size};
  }
};

template <typename T>
LossTerms<T> total_loss(Var<T> s_t2i, Var<T> s_i2t);

}  // namespace simr
