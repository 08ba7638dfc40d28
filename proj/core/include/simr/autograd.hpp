#pragma once

// Tape-based reverse-mode automatic differentiation.
//
// A Graph owns every intermediate value produced while evaluating a model.
// Each op is recorded on the tape together with a forward closure (used by
// replay()) and, when any input requires a gradient, a backward closure.
// backward() walks the tape in reverse and deposits gradients on leaves:
// parameters bound with Graph::param() receive them in their own Tensor::grad,
// plain leaves keep them on the node.
//
// All reductions run row-major, left to right, so a given graph is
// bit-reproducible.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "simr/tensor.hpp"

namespace simr {

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Transpose,
  Permute,
  Reshape,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Exp,
  Log,
  Relu,
  Gelu,
  Softmax,
  MaskedSoftmax,
  LogSoftmax,
  SumAll,
  Sum,
  Mean,
  Concat,
  Slice,
  L2Normalize,
  LayerNorm,
  GatherRows,
};

std::string_view op_name(OpKind kind);

template <typename T>
class Graph;

/// Handle to a node inside a Graph. Cheap to copy; only valid while the
/// owning graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t dim(std::size_t axis) const { return value().shape.at(axis); }
  bool requires_grad() const;
};

struct OpRecord {
  OpKind kind;
  std::vector<std::size_t> inputs;
  std::size_t output;
  bool differentiable;
};

template <typename T>
class Graph {
 public:
  using ForwardFn = std::function<Tensor<T>(const Graph&)>;
  using BackwardFn = std::function<void(Graph&, std::size_t out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding a copy of `value`. Its gradient, if requested, is kept on
  /// the node (see leaf_grad()).
  Var<T> leaf(Tensor<T> value, bool requires_grad = false);
  /// Leaf bound to an externally owned parameter. backward() accumulates
  /// into `param.grad`. The parameter must outlive the graph.
  Var<T> param(Tensor<T>& param);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Overwrites a leaf value in place. Intended for replay-based probing.
  Tensor<T>& leaf_value(std::size_t id);
  /// Accumulated gradient of a plain leaf after backward().
  const std::vector<T>& leaf_grad(std::size_t id) const;

  /// Reverse sweep from a scalar loss. Accumulates into leaf gradients, so
  /// two calls without zeroing double them.
  void backward(Var<T> loss);

  /// Recomputes every op output from the current leaf values, in tape order.
  void replay();

  std::span<const OpRecord> ops() const { return ops_; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Number of zero-norm vectors encountered by l2_normalize.
  std::size_t zero_norm_events() const { return zero_norm_events_; }
  void note_zero_norm(std::size_t n) { zero_norm_events_ += n; }

  // Op plumbing, used by the free functions below.
  Var<T> record(OpKind kind, std::vector<std::size_t> inputs, ForwardFn forward,
                BackwardFn backward);
  /// Gradient buffer of a node, allocated (zeroed) on first use.
  std::vector<T>& grad_buffer(std::size_t id);
  const std::vector<T>& out_grad(std::size_t id) const { return nodes_.at(id).grad; }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    Tensor<T>* bound = nullptr;
  };
  struct Step {
    ForwardFn forward;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  std::vector<OpRecord> ops_;
  std::vector<Step> steps_;
  std::size_t zero_norm_events_ = 0;
};

// ---------------------------------------------------------------------------
// Ops. Binary elementwise ops broadcast numpy-style (trailing axes aligned).
// `axis` arguments are non-negative and must be < rank.

/// a: (..., m, k); b: (k, n) or (..., k, n) with identical leading axes.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// Swaps the last two axes.
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> permute(Var<T> a, std::vector<std::size_t> perm);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_scalar(Var<T> a, T s);

template <typename T> Var<T> exp(Var<T> a);
/// Throws DomainError when any element is <= 0.
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
/// Exact (erf) GELU.
template <typename T> Var<T> gelu(Var<T> a);

template <typename T> Var<T> softmax(Var<T> a, std::size_t axis);
/// Softmax where positions with keep[i] == 0 get weight exactly 0. `keep`
/// has one entry per element of `a`; every softmax slice needs at least one
/// kept position.
template <typename T> Var<T> masked_softmax(Var<T> a, std::vector<std::uint8_t> keep, std::size_t axis);
template <typename T> Var<T> log_softmax(Var<T> a, std::size_t axis);

/// Sum of all elements, shape (1).
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> sum(Var<T> a, std::size_t axis, bool keepdim = false);
template <typename T> Var<T> mean(Var<T> a, std::size_t axis, bool keepdim = false);

template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length);

/// x / ||x|| along `axis`. Zero-norm slices map to zero and are counted in
/// Graph::zero_norm_events().
template <typename T> Var<T> l2_normalize(Var<T> a, std::size_t axis);
/// (x - mean) / sqrt(var + eps) over the last axis, no affine part.
template <typename T> Var<T> layer_norm(Var<T> a, T eps = T(1e-5));
/// Rows of a 2-D table selected by `ids`; output shape (ids.size(), cols).
template <typename T> Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace simr
