#pragma once

// Test-only helpers: random tensors and a central finite-difference oracle
// that never touches the backward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "simr/autograd.hpp"

namespace simr::testing {

inline Tensor<double> random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = dist(rng);
  return t;
}

using LossBuilder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// Compares backward() against central differences of a freshly rebuilt graph
/// for every element of every input.
inline GradCheck check_gradients(const std::vector<Tensor<double>>& inputs, const LossBuilder& build,
                                 double h = 1e-5) {
  auto evaluate = [&](const std::vector<Tensor<double>>& values) {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& v : values) leaves.push_back(g.leaf(v, false));
    return build(g, leaves).value()[0];
  };

  Graph<double> g;
  std::vector<Var<double>> leaves;
  for (const auto& v : inputs) leaves.push_back(g.leaf(v, true));
  g.backward(build(g, leaves));

  GradCheck result;
  auto probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto& analytic = g.leaf_grad(leaves[t].id);
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = probe[t].data[i];
      probe[t].data[i] = orig + h;
      const double up = evaluate(probe);
      probe[t].data[i] = orig - h;
      const double down = evaluate(probe);
      probe[t].data[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      result.max_rel_error = std::max(result.max_rel_error, rel_error(a, numeric));
      ++result.checked;
    }
  }
  return result;
}

/// Scalar probe of an op output: sum(out * weights) with fixed random weights.
inline Var<double> weighted_sum(Graph<double>& g, Var<double> out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor(rng, out.shape());
  return sum(mul(out, g.leaf(std::move(w))));
}

}  // namespace simr::testing
