#pragma once

// Small building blocks shared by the encoders and the alignment module.

#include <unordered_map>

#include "simr/autograd.hpp"
#include "simr/params.hpp"

namespace simr {

/// Binds parameters into one graph, at most once each, so that a tensor used
/// in several places appears as a single leaf.
template <typename T>
class ParamBinder {
 public:
  explicit ParamBinder(Graph<T>& graph) : graph_(&graph) {}

  Var<T> operator()(Tensor<T>& param) {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return it->second;
    auto v = graph_->param(param);
    bound_.emplace(&param, v);
    return v;
  }

  Graph<T>& graph() const { return *graph_; }

 private:
  Graph<T>* graph_;
  std::unordered_map<const Tensor<T>*, Var<T>> bound_;
};

template <typename T>
struct LinearParams {
  Tensor<T>* weight = nullptr;  // (in, out)
  Tensor<T>* bias = nullptr;    // (out), optional

  static LinearParams make(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                           bool with_bias, std::mt19937_64& rng) {
    LinearParams p;
    p.weight = &store.add(name + ".weight", {in, out});
    init_uniform_fan_in(*p.weight, in, rng);
    if (with_bias) p.bias = &store.add(name + ".bias", {out});
    return p;
  }

  Var<T> operator()(ParamBinder<T>& bind, Var<T> x) const {
    auto y = matmul(x, bind(*weight));
    return bias ? add(y, bind(*bias)) : y;
  }
};

template <typename T>
struct LayerNormParams {
  Tensor<T>* gain = nullptr;
  Tensor<T>* bias = nullptr;

  static LayerNormParams make(ParamStore<T>& store, const std::string& name, std::size_t dim) {
    LayerNormParams p;
    p.gain = &store.add(name + ".gain", {dim});
    std::fill(p.gain->data.begin(), p.gain->data.end(), T(1));
    p.bias = &store.add(name + ".bias", {dim});
    return p;
  }

  Var<T> operator()(ParamBinder<T>& bind, Var<T> x) const {
    return add(mul(layer_norm(x), bind(*gain)), bind(*bias));
  }
};

/// Two-layer GELU feedforward, in -> hidden -> out.
template <typename T>
struct FeedForwardParams {
  LinearParams<T> up;
  LinearParams<T> down;

  static FeedForwardParams make(ParamStore<T>& store, const std::string& name, std::size_t in,
                                std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
    return {LinearParams<T>::make(store, name + ".up", in, hidden, true, rng),
            LinearParams<T>::make(store, name + ".down", hidden, out, true, rng)};
  }

  Var<T> operator()(ParamBinder<T>& bind, Var<T> x) const { return down(bind, gelu(up(bind, x))); }
};

}  // namespace simr
