#include "simr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace simr {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Permute: return "permute";
    case OpKind::Reshape: return "reshape";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Relu: return "relu";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softmax: return "softmax";
    case OpKind::MaskedSoftmax: return "masked_softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::SumAll: return "sum_all";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::GatherRows: return "gather_rows";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(id);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return graph->requires_grad(id);
}

template <typename T>
Var<T> Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::param(Tensor<T>& param) {
  Node node;
  node.value.shape = param.shape;
  node.value.data = param.data;
  node.requires_grad = param.requires_grad;
  node.bound = &param;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T>& Graph<T>::leaf_value(std::size_t id) {
  auto& node = nodes_.at(id);
  if (!node.leaf) throw ContractError("graph: node " + std::to_string(id) + " is not a leaf");
  return node.value;
}

template <typename T>
const std::vector<T>& Graph<T>::leaf_grad(std::size_t id) const {
  return nodes_.at(id).value.grad;
}

template <typename T>
Var<T> Graph<T>::record(OpKind kind, std::vector<std::size_t> inputs, ForwardFn forward,
                        BackwardFn backward) {
  bool needs_grad = false;
  for (auto in : inputs) {
    if (in >= nodes_.size()) throw ContractError("graph: op references unknown node");
    needs_grad = needs_grad || nodes_[in].requires_grad;
  }
  Node node;
  node.value = forward(*this);
  node.requires_grad = needs_grad;
  node.leaf = false;
  nodes_.push_back(std::move(node));
  const std::size_t out = nodes_.size() - 1;
  ops_.push_back(OpRecord{kind, std::move(inputs), out, needs_grad});
  steps_.push_back(Step{std::move(forward), needs_grad ? std::move(backward) : BackwardFn{}});
  return {this, out};
}

template <typename T>
std::vector<T>& Graph<T>::grad_buffer(std::size_t id) {
  auto& node = nodes_.at(id);
  if (node.grad.size() != node.value.data.size()) node.grad.assign(node.value.data.size(), T(0));
  return node.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw ContractError("backward: loss belongs to a different graph");
  if (value(loss.id).size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape));
  }
  for (auto& node : nodes_) node.grad.clear();
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)[0] = T(1);

  for (std::size_t s = ops_.size(); s-- > 0;) {
    const auto out = ops_[s].output;
    if (!steps_[s].backward || nodes_[out].grad.empty()) continue;
    steps_[s].backward(*this, out);
  }

  for (auto& node : nodes_) {
    if (!node.requires_grad || node.grad.empty()) continue;
    if (!node.leaf) continue;
    Tensor<T>& target = node.bound ? *node.bound : node.value;
    target.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) target.grad[i] += node.grad[i];
  }
}

template <typename T>
void Graph<T>::replay() {
  for (std::size_t s = 0; s < ops_.size(); ++s) {
    nodes_[ops_[s].output].value = steps_[s].forward(*this);
  }
}

namespace {

struct AxisSplit {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
Graph<T>& graph_of(Var<T> a, Var<T> b, const char* op) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw ContractError(std::string(op) + ": operands belong to different graphs");
  }
  return *a.graph;
}

// C += A(m x k) * B(k x n)
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(k x n) += A(m x k)^T * B(m x n)
template <typename T>
void gemm_at_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void transpose_into(const T* src, T* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

// C(m x k) += G(m x n) * B(k x n)^T
template <typename T>
void gemm_bt_acc(const T* g, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                 std::vector<T>& scratch) {
  scratch.resize(k * n);
  transpose_into(b, scratch.data(), k, n);
  gemm_acc(g, scratch.data(), c, m, n, k);
}

struct MatmulDims {
  std::size_t batch;  // 1 when b is 2-D (a's leading axes fold into m)
  std::size_t m, k, n;
  bool shared_b;
  Shape out;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
  };
  if (a.size() < 2 || b.size() < 2) fail();
  MatmulDims d{};
  d.k = a.back();
  if (b.size() == 2) {
    if (b[0] != d.k) fail();
    d.batch = 1;
    d.m = numel(a) / d.k;
    d.n = b[1];
    d.shared_b = true;
    d.out = Shape(a.begin(), a.end() - 1);
    d.out.push_back(d.n);
    return d;
  }
  if (a.size() != b.size()) fail();
  for (std::size_t i = 0; i + 2 < a.size(); ++i) {
    if (a[i] != b[i]) fail();
  }
  if (b[b.size() - 2] != d.k) fail();
  d.m = a[a.size() - 2];
  d.n = b.back();
  d.batch = numel(a) / (d.m * d.k);
  d.shared_b = false;
  d.out = Shape(a.begin(), a.end() - 1);
  d.out.push_back(d.n);
  return d;
}

// Broadcasting --------------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;  // per output axis, 0 where broadcast
  std::vector<std::size_t> b_stride;
  enum class Mode { Same, BSuffix, ASuffix, General } mode;
  std::size_t a_n, b_n;
};

std::vector<std::size_t> aligned_strides(const Shape& s, std::size_t rank) {
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t axis = s.size() - 1 - i;
    const std::size_t out_axis = rank - 1 - i;
    strides[out_axis] = s[axis] == 1 ? 0 : stride;
    stride *= s[axis];
  }
  return strides;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  bc.a_n = numel(a);
  bc.b_n = numel(b);
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[rank - 1 - i] = std::max(da, db);
  }
  if (a == b) {
    bc.mode = Broadcast::Mode::Same;
  } else if (bc.out == a && is_suffix(b, a)) {
    bc.mode = Broadcast::Mode::BSuffix;
  } else if (bc.out == b && is_suffix(a, b)) {
    bc.mode = Broadcast::Mode::ASuffix;
  } else {
    bc.mode = Broadcast::Mode::General;
  }
  bc.a_stride = aligned_strides(a, rank);
  bc.b_stride = aligned_strides(b, rank);
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element, in order.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t total = numel(bc.out);
  switch (bc.mode) {
    case Broadcast::Mode::Same:
      for (std::size_t o = 0; o < total; ++o) f(o, o, o);
      return;
    case Broadcast::Mode::BSuffix:
      for (std::size_t o = 0; o < total; ++o) f(o, o, o % bc.b_n);
      return;
    case Broadcast::Mode::ASuffix:
      for (std::size_t o = 0; o < total; ++o) f(o, o % bc.a_n, o);
      return;
    case Broadcast::Mode::General:
      break;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += bc.a_stride[ax];
      ib += bc.b_stride[ax];
      if (idx[ax] < bc.out[ax]) break;
      ia -= bc.a_stride[ax] * idx[ax];
      ib -= bc.b_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

enum class Binary { Add, Sub, Mul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, Binary kind) {
  const char* name = kind == Binary::Add ? "add" : kind == Binary::Sub ? "sub" : "mul";
  auto& g = graph_of(a, b, name);
  const auto bc = broadcast(a.shape(), b.shape(), name);
  const auto ia = a.id, ib = b.id;
  auto forward = [ia, ib, bc, kind](const Graph<T>& gr) {
    const auto& av = gr.value(ia).data;
    const auto& bv = gr.value(ib).data;
    Tensor<T> out(bc.out);
    auto& o = out.data;
    switch (kind) {
      case Binary::Add: for_each_broadcast(bc, [&](std::size_t k, std::size_t i, std::size_t j) { o[k] = av[i] + bv[j]; }); break;
      case Binary::Sub: for_each_broadcast(bc, [&](std::size_t k, std::size_t i, std::size_t j) { o[k] = av[i] - bv[j]; }); break;
      case Binary::Mul: for_each_broadcast(bc, [&](std::size_t k, std::size_t i, std::size_t j) { o[k] = av[i] * bv[j]; }); break;
    }
    return out;
  };
  auto backward = [ia, ib, bc, kind](Graph<T>& gr, std::size_t out) {
    const auto& go = gr.out_grad(out);
    if (gr.requires_grad(ia)) {
      auto& ga = gr.grad_buffer(ia);
      if (kind == Binary::Mul) {
        const auto& bv = gr.value(ib).data;
        for_each_broadcast(bc, [&](std::size_t k, std::size_t i, std::size_t j) { ga[i] += go[k] * bv[j]; });
      } else {
        for_each_broadcast(bc, [&](std::size_t k, std::size_t i, std::size_t) { ga[i] += go[k]; });
      }
    }
    if (gr.requires_grad(ib)) {
      auto& gb = gr.grad_buffer(ib);
      if (kind == Binary::Mul) {
        const auto& av = gr.value(ia).data;
        for_each_broadcast(bc, [&](std::size_t k, std::size_t i, std::size_t j) { gb[j] += go[k] * av[i]; });
      } else if (kind == Binary::Sub) {
        for_each_broadcast(bc, [&](std::size_t k, std::size_t, std::size_t j) { gb[j] -= go[k]; });
      } else {
        for_each_broadcast(bc, [&](std::size_t k, std::size_t, std::size_t j) { gb[j] += go[k]; });
      }
    }
  };
  const auto op = kind == Binary::Add ? OpKind::Add : kind == Binary::Sub ? OpKind::Sub : OpKind::Mul;
  return g.record(op, {ia, ib}, forward, backward);
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, OpKind kind, F f, D df) {
  const auto ia = a.id;
  auto forward = [ia, f](const Graph<T>& gr) {
    const auto& x = gr.value(ia);
    Tensor<T> out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x.data[i]);
    return out;
  };
  auto backward = [ia, df](Graph<T>& gr, std::size_t out) {
    const auto& x = gr.value(ia).data;
    const auto& y = gr.value(out).data;
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += go[i] * df(x[i], y[i]);
  };
  return a.graph->record(kind, {ia}, forward, backward);
}

}  // namespace

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& g = graph_of(a, b, "matmul");
  const auto d = matmul_dims(a.shape(), b.shape());
  const auto ia = a.id, ib = b.id;
  auto forward = [ia, ib, d](const Graph<T>& gr) {
    const auto& av = gr.value(ia).data;
    const auto& bv = gr.value(ib).data;
    Tensor<T> out(d.out);
    for (std::size_t s = 0; s < d.batch; ++s) {
      const T* bp = d.shared_b ? bv.data() : bv.data() + s * d.k * d.n;
      gemm_acc(av.data() + s * d.m * d.k, bp, out.data.data() + s * d.m * d.n, d.m, d.k, d.n);
    }
    return out;
  };
  auto backward = [ia, ib, d](Graph<T>& gr, std::size_t out) {
    const auto& go = gr.out_grad(out);
    const auto& av = gr.value(ia).data;
    const auto& bv = gr.value(ib).data;
    std::vector<T> scratch;
    if (gr.requires_grad(ia)) {
      auto& ga = gr.grad_buffer(ia);
      for (std::size_t s = 0; s < d.batch; ++s) {
        const T* bp = d.shared_b ? bv.data() : bv.data() + s * d.k * d.n;
        gemm_bt_acc(go.data() + s * d.m * d.n, bp, ga.data() + s * d.m * d.k, d.m, d.k, d.n, scratch);
      }
    }
    if (gr.requires_grad(ib)) {
      auto& gb = gr.grad_buffer(ib);
      for (std::size_t s = 0; s < d.batch; ++s) {
        T* gbp = d.shared_b ? gb.data() : gb.data() + s * d.k * d.n;
        gemm_at_acc(av.data() + s * d.m * d.k, go.data() + s * d.m * d.n, gbp, d.m, d.k, d.n);
      }
    }
  };
  return g.record(OpKind::MatMul, {ia, ib}, forward, backward);
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& s = a.shape();
  if (s.size() < 2) throw DimensionError("transpose: needs rank >= 2, got " + shape_str(s));
  std::vector<std::size_t> perm(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm) {
  const Shape in_shape = a.shape();
  const std::size_t rank = in_shape.size();
  {
    std::vector<bool> seen(rank, false);
    if (perm.size() != rank) throw DimensionError("permute: permutation rank mismatch for " + shape_str(in_shape));
    for (auto p : perm) {
      if (p >= rank || seen[p]) throw DimensionError("permute: invalid permutation for " + shape_str(in_shape));
      seen[p] = true;
    }
  }
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank);
  {
    std::size_t stride = 1;
    for (std::size_t ax = rank; ax-- > 0;) {
      in_strides[ax] = stride;
      stride *= in_shape[ax];
    }
  }
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  // offsets[o] = input offset of output element o
  auto offsets = std::make_shared<std::vector<std::size_t>>(numel(out_shape));
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < offsets->size(); ++o) {
      (*offsets)[o] = src;
      for (std::size_t ax = rank; ax-- > 0;) {
        ++idx[ax];
        src += src_stride[ax];
        if (idx[ax] < out_shape[ax]) break;
        src -= src_stride[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
  const auto ia = a.id;
  auto forward = [ia, out_shape, offsets](const Graph<T>& gr) {
    const auto& x = gr.value(ia).data;
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < offsets->size(); ++o) out.data[o] = x[(*offsets)[o]];
    return out;
  };
  auto backward = [ia, offsets](Graph<T>& gr, std::size_t out) {
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t o = 0; o < offsets->size(); ++o) ga[(*offsets)[o]] += go[o];
  };
  return a.graph->record(OpKind::Permute, {ia}, forward, backward);
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.value().size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const auto ia = a.id;
  auto forward = [ia, shape](const Graph<T>& gr) { return Tensor<T>(shape, gr.value(ia).data); };
  auto backward = [ia](Graph<T>& gr, std::size_t out) {
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  };
  return a.graph->record(OpKind::Reshape, {ia}, forward, backward);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::Add);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::Sub);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, Binary::Mul);
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary(a, OpKind::Scale, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary(a, OpKind::AddScalar, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary(a, OpKind::Exp, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  for (auto v : a.value().data) {
    if (!(v > T(0))) throw DomainError("log: non-positive argument " + std::to_string(v));
  }
  return unary(a, OpKind::Log, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary(a, OpKind::Relu, [](T x) { return x > T(0) ? x : T(0); },
               [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary(
      a, OpKind::Gelu, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& x, AxisSplit s, const std::vector<std::uint8_t>* keep) {
  Tensor<T> out(x.shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t idx = base + j * s.inner;
        if (keep && !(*keep)[idx]) continue;
        mx = std::max(mx, x.data[idx]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) {
        throw ContractError("masked_softmax: slice with every position masked");
      }
      T total = 0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t idx = base + j * s.inner;
        const T e = (keep && !(*keep)[idx]) ? T(0) : std::exp(x.data[idx] - mx);
        out.data[idx] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out.data[base + j * s.inner] /= total;
    }
  }
  return out;
}

template <typename T>
void softmax_backward(const std::vector<T>& y, const std::vector<T>& go, std::vector<T>& ga, AxisSplit s) {
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      T dot = 0;
      for (std::size_t j = 0; j < s.n; ++j) dot += go[base + j * s.inner] * y[base + j * s.inner];
      for (std::size_t j = 0; j < s.n; ++j) {
        const std::size_t idx = base + j * s.inner;
        ga[idx] += y[idx] * (go[idx] - dot);
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "softmax");
  const auto ia = a.id;
  auto forward = [ia, s](const Graph<T>& gr) { return softmax_forward(gr.value(ia), s, nullptr); };
  auto backward = [ia, s](Graph<T>& gr, std::size_t out) {
    softmax_backward(gr.value(out).data, gr.out_grad(out), gr.grad_buffer(ia), s);
  };
  return a.graph->record(OpKind::Softmax, {ia}, forward, backward);
}

template <typename T>
Var<T> masked_softmax(Var<T> a, std::vector<std::uint8_t> keep, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "masked_softmax");
  if (keep.size() != a.value().size()) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(keep.size()) + " entries for shape " +
                         shape_str(a.shape()));
  }
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::move(keep));
  const auto ia = a.id;
  auto forward = [ia, s, mask](const Graph<T>& gr) { return softmax_forward(gr.value(ia), s, mask.get()); };
  auto backward = [ia, s](Graph<T>& gr, std::size_t out) {
    softmax_backward(gr.value(out).data, gr.out_grad(out), gr.grad_buffer(ia), s);
  };
  return a.graph->record(OpKind::MaskedSoftmax, {ia}, forward, backward);
}

template <typename T>
Var<T> log_softmax(Var<T> a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "log_softmax");
  const auto ia = a.id;
  auto forward = [ia, s](const Graph<T>& gr) {
    const auto& x = gr.value(ia);
    Tensor<T> out(x.shape);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, x.data[base + j * s.inner]);
        T total = 0;
        for (std::size_t j = 0; j < s.n; ++j) total += std::exp(x.data[base + j * s.inner] - mx);
        const T lse = mx + std::log(total);
        for (std::size_t j = 0; j < s.n; ++j) out.data[base + j * s.inner] = x.data[base + j * s.inner] - lse;
      }
    }
    return out;
  };
  auto backward = [ia, s](Graph<T>& gr, std::size_t out) {
    const auto& y = gr.value(out).data;
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        T total = 0;
        for (std::size_t j = 0; j < s.n; ++j) total += go[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t idx = base + j * s.inner;
          ga[idx] += go[idx] - std::exp(y[idx]) * total;
        }
      }
    }
  };
  return a.graph->record(OpKind::LogSoftmax, {ia}, forward, backward);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> a) {
  const auto ia = a.id;
  auto forward = [ia](const Graph<T>& gr) {
    T total = 0;
    for (auto v : gr.value(ia).data) total += v;
    return Tensor<T>::scalar(total);
  };
  auto backward = [ia](Graph<T>& gr, std::size_t out) {
    const T go = gr.out_grad(out)[0];
    for (auto& v : gr.grad_buffer(ia)) v += go;
  };
  return a.graph->record(OpKind::SumAll, {ia}, forward, backward);
}

namespace {

template <typename T>
Var<T> reduce_axis(Var<T> a, std::size_t axis, bool keepdim, bool average) {
  const char* name = average ? "mean" : "sum";
  const auto s = split_axis(a.shape(), axis, name);
  Shape out_shape = a.shape();
  if (keepdim || out_shape.size() == 1) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const T factor = average ? T(1) / static_cast<T>(s.n) : T(1);
  const auto ia = a.id;
  auto forward = [ia, s, out_shape, factor](const Graph<T>& gr) {
    const auto& x = gr.value(ia).data;
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.n; ++j) {
        const T* src = x.data() + (o * s.n + j) * s.inner;
        T* dst = out.data.data() + o * s.inner;
        for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
      }
    }
    if (factor != T(1)) {
      for (auto& v : out.data) v *= factor;
    }
    return out;
  };
  auto backward = [ia, s, factor](Graph<T>& gr, std::size_t out) {
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.n; ++j) {
        T* dst = ga.data() + (o * s.n + j) * s.inner;
        const T* src = go.data() + o * s.inner;
        for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in] * factor;
      }
    }
  };
  return a.graph->record(average ? OpKind::Mean : OpKind::Sum, {ia}, forward, backward);
}

}  // namespace

template <typename T>
Var<T> sum(Var<T> a, std::size_t axis, bool keepdim) {
  return reduce_axis(a, axis, keepdim, false);
}

template <typename T>
Var<T> mean(Var<T> a, std::size_t axis, bool keepdim) {
  return reduce_axis(a, axis, keepdim, true);
}

// ---------------------------------------------------------------------------
// Concat / slice

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Graph<T>* g = parts.front().graph;
  const Shape first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.graph != g) throw ContractError("concat: operands belong to different graphs");
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " does not match " + shape_str(first));
    out_shape[axis] += s[axis];
    ids.push_back(p.id);
    widths.push_back(s[axis]);
  }
  const auto split = split_axis(out_shape, axis, "concat");
  auto forward = [ids, widths, out_shape, split](const Graph<T>& gr) {
    Tensor<T> out(out_shape);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const auto& x = gr.value(ids[p]).data;
      const std::size_t chunk = widths[p] * split.inner;
      for (std::size_t o = 0; o < split.outer; ++o) {
        std::copy_n(x.data() + o * chunk, chunk, out.data.data() + o * split.n * split.inner + offset);
      }
      offset += chunk;
    }
    return out;
  };
  auto backward = [ids, widths, split](Graph<T>& gr, std::size_t out) {
    const auto& go = gr.out_grad(out);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t chunk = widths[p] * split.inner;
      if (gr.requires_grad(ids[p])) {
        auto& ga = gr.grad_buffer(ids[p]);
        for (std::size_t o = 0; o < split.outer; ++o) {
          const T* src = go.data() + o * split.n * split.inner + offset;
          T* dst = ga.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += chunk;
    }
  };
  return g->record(OpKind::Concat, ids, forward, backward);
}

template <typename T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto s = split_axis(a.shape(), axis, "slice");
  if (length == 0 || start + length > s.n) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of bounds for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const auto ia = a.id;
  auto forward = [ia, s, out_shape, start, length](const Graph<T>& gr) {
    const auto& x = gr.value(ia).data;
    Tensor<T> out(out_shape);
    const std::size_t chunk = length * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(x.data() + (o * s.n + start) * s.inner, chunk, out.data.data() + o * chunk);
    }
    return out;
  };
  auto backward = [ia, s, start, length](Graph<T>& gr, std::size_t out) {
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(ia);
    const std::size_t chunk = length * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = ga.data() + (o * s.n + start) * s.inner;
      const T* src = go.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  };
  return a.graph->record(OpKind::Slice, {ia}, forward, backward);
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Var<T> l2_normalize(Var<T> a, std::size_t axis) {
  const auto s = split_axis(a.shape(), axis, "l2_normalize");
  const auto ia = a.id;
  auto forward = [ia, s](const Graph<T>& gr) {
    const auto& x = gr.value(ia);
    Tensor<T> out(x.shape);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        T sq = 0;
        for (std::size_t j = 0; j < s.n; ++j) sq += x.data[base + j * s.inner] * x.data[base + j * s.inner];
        if (sq == T(0)) continue;
        const T inv = T(1) / std::sqrt(sq);
        for (std::size_t j = 0; j < s.n; ++j) out.data[base + j * s.inner] = x.data[base + j * s.inner] * inv;
      }
    }
    return out;
  };
  auto backward = [ia, s](Graph<T>& gr, std::size_t out) {
    const auto& x = gr.value(ia).data;
    const auto& y = gr.value(out).data;
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        T sq = 0, dot = 0;
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t idx = base + j * s.inner;
          sq += x[idx] * x[idx];
          dot += go[idx] * y[idx];
        }
        if (sq == T(0)) continue;
        const T inv = T(1) / std::sqrt(sq);
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t idx = base + j * s.inner;
          ga[idx] += (go[idx] - y[idx] * dot) * inv;
        }
      }
    }
  };
  auto result = a.graph->record(OpKind::L2Normalize, {ia}, forward, backward);

  std::size_t zero = 0;
  const auto& x = a.value().data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      bool all_zero = true;
      for (std::size_t j = 0; j < s.n && all_zero; ++j) all_zero = x[o * s.n * s.inner + in + j * s.inner] == T(0);
      zero += all_zero ? 1 : 0;
    }
  }
  a.graph->note_zero_norm(zero);
  return result;
}

template <typename T>
Var<T> layer_norm(Var<T> a, T eps) {
  const auto& shape = a.shape();
  const std::size_t n = shape.back();
  const std::size_t rows = a.value().size() / n;
  const auto ia = a.id;
  auto forward = [ia, n, rows, eps](const Graph<T>& gr) {
    const auto& x = gr.value(ia);
    Tensor<T> out(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* src = x.data.data() + r * n;
      T* dst = out.data.data() + r * n;
      T mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += src[j];
      mu /= static_cast<T>(n);
      T var = 0;
      for (std::size_t j = 0; j < n; ++j) var += (src[j] - mu) * (src[j] - mu);
      var /= static_cast<T>(n);
      const T rstd = T(1) / std::sqrt(var + eps);
      for (std::size_t j = 0; j < n; ++j) dst[j] = (src[j] - mu) * rstd;
    }
    return out;
  };
  auto backward = [ia, n, rows, eps](Graph<T>& gr, std::size_t out) {
    const auto& x = gr.value(ia).data;
    const auto& y = gr.value(out).data;
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* src = x.data() + r * n;
      const T* yr = y.data() + r * n;
      const T* gr_ = go.data() + r * n;
      T mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += src[j];
      mu /= static_cast<T>(n);
      T var = 0;
      for (std::size_t j = 0; j < n; ++j) var += (src[j] - mu) * (src[j] - mu);
      var /= static_cast<T>(n);
      const T rstd = T(1) / std::sqrt(var + eps);
      T mean_g = 0, mean_gy = 0;
      for (std::size_t j = 0; j < n; ++j) {
        mean_g += gr_[j];
        mean_gy += gr_[j] * yr[j];
      }
      mean_g /= static_cast<T>(n);
      mean_gy /= static_cast<T>(n);
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += rstd * (gr_[j] - mean_g - yr[j] * mean_gy);
    }
  };
  return a.graph->record(OpKind::LayerNorm, {ia}, forward, backward);
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids) {
  const auto& s = table.shape();
  if (s.size() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_str(s));
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t rows = s[0], cols = s[1];
  for (auto id : ids) {
    if (id >= rows) {
      throw DimensionError("gather_rows: id " + std::to_string(id) + " out of range for table " + shape_str(s));
    }
  }
  auto shared_ids = std::make_shared<const std::vector<std::size_t>>(std::move(ids));
  const auto it = table.id;
  auto forward = [it, shared_ids, cols](const Graph<T>& gr) {
    const auto& x = gr.value(it).data;
    Tensor<T> out(Shape{shared_ids->size(), cols});
    for (std::size_t r = 0; r < shared_ids->size(); ++r) {
      std::copy_n(x.data() + (*shared_ids)[r] * cols, cols, out.data.data() + r * cols);
    }
    return out;
  };
  auto backward = [it, shared_ids, cols](Graph<T>& gr, std::size_t out) {
    const auto& go = gr.out_grad(out);
    auto& ga = gr.grad_buffer(it);
    for (std::size_t r = 0; r < shared_ids->size(); ++r) {
      T* dst = ga.data() + (*shared_ids)[r] * cols;
      const T* src = go.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  };
  return table.graph->record(OpKind::GatherRows, {it}, forward, backward);
}

// ---------------------------------------------------------------------------

#define SIMR_INSTANTIATE(T)                                                              \
  template struct Var<T>;                                                                \
  template class Graph<T>;                                                               \
  template Var<T> matmul(Var<T>, Var<T>);                                                \
  template Var<T> transpose(Var<T>);                                                     \
  template Var<T> permute(Var<T>, std::vector<std::size_t>);                             \
  template Var<T> reshape(Var<T>, Shape);                                                \
  template Var<T> add(Var<T>, Var<T>);                                                   \
  template Var<T> sub(Var<T>, Var<T>);                                                   \
  template Var<T> mul(Var<T>, Var<T>);                                                   \
  template Var<T> scale(Var<T>, T);                                                      \
  template Var<T> add_scalar(Var<T>, T);                                                 \
  template Var<T> exp(Var<T>);                                                           \
  template Var<T> log(Var<T>);                                                           \
  template Var<T> relu(Var<T>);                                                          \
  template Var<T> gelu(Var<T>);                                                          \
  template Var<T> softmax(Var<T>, std::size_t);                                          \
  template Var<T> masked_softmax(Var<T>, std::vector<std::uint8_t>, std::size_t);        \
  template Var<T> log_softmax(Var<T>, std::size_t);                                      \
  template Var<T> sum(Var<T>);                                                           \
  template Var<T> sum(Var<T>, std::size_t, bool);                                        \
  template Var<T> mean(Var<T>, std::size_t, bool);                                       \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                       \
  template Var<T> slice(Var<T>, std::size_t, std::size_t, std::size_t);                  \
  template Var<T> l2_normalize(Var<T>, std::size_t);                                     \
  template Var<T> layer_norm(Var<T>, T);                                                 \
  template Var<T> gather_rows(Var<T>, std::vector<std::size_t>);

SIMR_INSTANTIATE(float)
SIMR_INSTANTIATE(double)

#undef SIMR_INSTANTIATE

}  // namespace simr
