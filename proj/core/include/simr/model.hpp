#pragma once

#include <cstdint>
#include <span>

#include "simr/alignment.hpp"
#include "simr/encoders.hpp"
#include "simr/params.hpp"

namespace simr {

struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t encoder_blocks = 2;
  std::size_t ffn_dim = 0;  // 0 selects 2 * embed_dim
  std::size_t patch_count = 16;
  std::size_t patch_features = 16;
  std::size_t max_tokens = 24;
  std::size_t vocab_size = 64;
  HeadKind head = HeadKind::Linear;
  KvChoice kv = KvChoice::Both;
  bool residual = true;
  bool cross_attention = true;

  std::size_t effective_ffn_dim() const { return ffn_dim ? ffn_dim : 2 * embed_dim; }
  EncoderConfig encoder() const;
  AlignmentConfig alignment() const;
  void validate() const;
};

/// Image encoder + text encoder + alignment, all parameters in one store.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }
  const Alignment<T>& alignment() const noexcept { return alignment_; }
  const ImageEncoder<T>& image_encoder() const noexcept { return image_; }
  const TextEncoder<T>& text_encoder() const noexcept { return text_; }

  FeatureBundle<T> encode(ParamBinder<T>& bind, std::span<const PatchGrid> images,
                          std::span<const TokenSeq> texts) const {
    return encode_batch(bind, image_, text_, images, texts);
  }

  SimilarityOutput<T> similarity(ParamBinder<T>& bind, const FeatureBundle<T>& f) const {
    return alignment_.similarity(bind, f);
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  std::mt19937_64 rng_;
  ImageEncoder<T> image_;
  TextEncoder<T> text_;
  Alignment<T> alignment_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace simr
