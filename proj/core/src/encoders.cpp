#include "simr/encoders.hpp"

#include <cmath>
#include <numeric>

namespace simr {

void PatchGrid::validate() const {
  if (rows == 0 || cols == 0 || features == 0) throw InputError("patch grid: empty dimensions");
  if (values.size() != rows * cols * features) {
    throw InputError("patch grid: expected " + std::to_string(rows * cols * features) + " values, got " +
                     std::to_string(values.size()));
  }
  for (auto v : values) {
    if (!std::isfinite(v)) throw InputError("patch grid: non-finite value");
  }
}

std::size_t TokenSeq::valid_count() const {
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](auto v) { return v != 0; }));
}

void EncoderConfig::validate() const {
  if (embed_dim == 0 || heads == 0 || ffn_dim == 0 || patch_count == 0 || patch_features == 0 ||
      max_tokens == 0 || vocab_size == 0) {
    throw ConfigError("encoder: all dimensions must be positive");
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
}

template <typename T>
TransformerBlock<T> TransformerBlock<T>::make(ParamStore<T>& store, const std::string& name,
                                              const EncoderConfig& cfg, std::mt19937_64& rng) {
  const auto d = cfg.embed_dim;
  TransformerBlock b;
  b.norm1 = LayerNormParams<T>::make(store, name + ".norm1", d);
  b.query = LinearParams<T>::make(store, name + ".query", d, d, false, rng);
  b.key = LinearParams<T>::make(store, name + ".key", d, d, false, rng);
  b.value = LinearParams<T>::make(store, name + ".value", d, d, false, rng);
  b.out = LinearParams<T>::make(store, name + ".out", d, d, true, rng);
  b.norm2 = LayerNormParams<T>::make(store, name + ".norm2", d);
  b.ffn = FeedForwardParams<T>::make(store, name + ".ffn", d, cfg.ffn_dim, d, rng);
  b.heads = cfg.heads;
  return b;
}

template <typename T>
Var<T> TransformerBlock<T>::operator()(ParamBinder<T>& bind, Var<T> x, std::span<const std::uint8_t> valid) const {
  const auto batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  const auto dh = d / heads;

  auto h = norm1(bind, x);
  auto split = [&](Var<T> v) { return permute(reshape(v, {batch, n, heads, dh}), {0, 2, 1, 3}); };
  auto q = split(query(bind, h));                                  // (B, H, N, dh)
  auto k = permute(reshape(key(bind, h), {batch, n, heads, dh}), {0, 2, 3, 1});  // (B, H, dh, N)
  auto v = split(value(bind, h));

  auto logits = scale(matmul(q, k), T(1) / std::sqrt(static_cast<T>(dh)));  // (B, H, N, N)
  Var<T> attn;
  if (valid.empty()) {
    attn = softmax(logits, 3);
  } else {
    std::vector<std::uint8_t> keep(batch * heads * n * n);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t hh = 0; hh < heads; ++hh) {
        for (std::size_t i = 0; i < n; ++i) {
          std::copy_n(valid.data() + b * n, n, keep.data() + ((b * heads + hh) * n + i) * n);
        }
      }
    }
    attn = masked_softmax(logits, std::move(keep), 3);
  }
  auto ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {batch, n, d});
  x = add(x, out(bind, ctx));
  return add(x, ffn(bind, norm2(bind, x)));
}

template <typename T>
ImageEncoder<T>::ImageEncoder(ParamStore<T>& store, const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto d = cfg.embed_dim;
  patch_embed_ = LinearParams<T>::make(store, "image.patch_embed", cfg.patch_features, d, true, rng);
  position_ = &store.add("image.position", {cfg.patch_count, d});
  init_uniform_fan_in(*position_, d, rng);
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    blocks_.push_back(TransformerBlock<T>::make(store, "image.block" + std::to_string(i), cfg, rng));
  }
  proj_ = LinearParams<T>::make(store, "image.proj", d, d, true, rng);
}

template <typename T>
std::pair<Var<T>, Var<T>> ImageEncoder<T>::encode(ParamBinder<T>& bind, std::span<const PatchGrid> batch) const {
  if (batch.empty()) throw InputError("encode_image: empty batch");
  const auto l = cfg_.patch_count, p = cfg_.patch_features;
  Tensor<T> raw(Shape{batch.size(), l, p});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& grid = batch[i];
    if (grid.patch_count() != l || grid.features != p) {
      throw DimensionError("encode_image: image " + std::to_string(i) + " has " + std::to_string(grid.patch_count()) +
                           "x" + std::to_string(grid.features) + " patches, expected " + std::to_string(l) + "x" +
                           std::to_string(p));
    }
    grid.validate();
    std::copy(grid.values.begin(), grid.values.end(), raw.data.begin() + static_cast<std::ptrdiff_t>(i * l * p));
  }
  auto x = bind.graph().leaf(std::move(raw));
  x = add(patch_embed_(bind, x), bind(*position_));
  for (const auto& block : blocks_) x = block(bind, x, {});
  auto local = proj_(bind, x);
  return {local, mean(local, 1)};
}

template <typename T>
TextEncoder<T>::TextEncoder(ParamStore<T>& store, const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto d = cfg.embed_dim;
  token_embed_ = &store.add("text.token_embed", {cfg.vocab_size, d});
  init_uniform_fan_in(*token_embed_, d, rng);
  position_ = &store.add("text.position", {cfg.max_tokens, d});
  init_uniform_fan_in(*position_, d, rng);
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    blocks_.push_back(TransformerBlock<T>::make(store, "text.block" + std::to_string(i), cfg, rng));
  }
  proj_ = LinearParams<T>::make(store, "text.proj", d, d, true, rng);
}

template <typename T>
std::pair<Var<T>, Var<T>> TextEncoder<T>::encode(ParamBinder<T>& bind, std::span<const TokenSeq> batch) const {
  if (batch.empty()) throw InputError("encode_text: empty batch");
  const auto m = cfg_.max_tokens, d = cfg_.embed_dim;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> valid;
  ids.reserve(batch.size() * m);
  valid.reserve(batch.size() * m);
  Tensor<T> keep(Shape{batch.size(), m, 1});
  Tensor<T> inv_count(Shape{batch.size(), 1});
  for (std::size_t t = 0; t < batch.size(); ++t) {
    const auto& seq = batch[t];
    if (seq.length() != m || seq.valid.size() != m) {
      throw DimensionError("encode_text: sequence " + std::to_string(t) + " has length " +
                           std::to_string(seq.length()) + ", expected " + std::to_string(m));
    }
    const auto count = seq.valid_count();
    if (count == 0) throw InputError("encode_text: sequence " + std::to_string(t) + " is all padding");
    for (std::size_t j = 0; j < m; ++j) {
      if (seq.ids[j] >= cfg_.vocab_size) {
        throw InputError("encode_text: token id " + std::to_string(seq.ids[j]) + " outside vocabulary of " +
                         std::to_string(cfg_.vocab_size));
      }
      // Padded slots always read row 0 so their content cannot leak.
      ids.push_back(seq.valid[j] ? seq.ids[j] : 0);
      valid.push_back(seq.valid[j] ? 1 : 0);
      keep.data[t * m + j] = seq.valid[j] ? T(1) : T(0);
    }
    inv_count.data[t] = T(1) / static_cast<T>(count);
  }
  auto x = reshape(gather_rows(bind(*token_embed_), std::move(ids)), {batch.size(), m, d});
  x = add(x, bind(*position_));
  for (const auto& block : blocks_) x = block(bind, x, valid);
  auto& g = bind.graph();
  auto local = mul(proj_(bind, x), g.leaf(std::move(keep)));
  auto global = mul(sum(local, 1), g.leaf(std::move(inv_count)));
  return {local, global};
}

template <typename T>
FeatureBundle<T> encode_batch(ParamBinder<T>& bind, const ImageEncoder<T>& image, const TextEncoder<T>& text,
                              std::span<const PatchGrid> images, std::span<const TokenSeq> texts) {
  FeatureBundle<T> f;
  std::tie(f.x_local, f.x_global) = image.encode(bind, images);
  std::tie(f.y_local, f.y_global) = text.encode(bind, texts);
  for (const auto& seq : texts) {
    for (auto v : seq.valid) f.text_valid.push_back(v ? 1 : 0);
  }
  return f;
}

template struct TransformerBlock<float>;
template struct TransformerBlock<double>;
template class ImageEncoder<float>;
template class ImageEncoder<double>;
template class TextEncoder<float>;
template class TextEncoder<double>;
template FeatureBundle<float> encode_batch(ParamBinder<float>&, const ImageEncoder<float>&, const TextEncoder<float>&,
                                           std::span<const PatchGrid>, std::span<const TokenSeq>);
template FeatureBundle<double> encode_batch(ParamBinder<double>&, const ImageEncoder<double>&,
                                            const TextEncoder<double>&, std::span<const PatchGrid>,
                                            std::span<const TokenSeq>);

}  // namespace simr
