#pragma once

// Toy image and text encoders exposing local + global features of a shared
// width D. Both are small pre-LN transformers; the text side masks padding.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "simr/layers.hpp"

namespace simr {

/// One image as an L x P matrix of raw patch features on a rows x cols grid.
struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t features = 0;
  std::vector<float> values;  // row-major (rows*cols) x features

  std::size_t patch_count() const noexcept { return rows * cols; }
  /// Throws InputError unless shape and values agree and are finite.
  void validate() const;
};

/// Token ids padded to a fixed length; `valid[j] == 0` marks padding.
struct TokenSeq {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> valid;

  std::size_t length() const noexcept { return ids.size(); }
  std::size_t valid_count() const;
};

/// Encoder outputs for a batch of I images and T texts.
template <typename T>
struct FeatureBundle {
  Var<T> x_local;   // (I, L, D)
  Var<T> x_global;  // (I, D)
  Var<T> y_local;   // (T, M, D), zero at padded positions
  Var<T> y_global;  // (T, D)
  std::vector<std::uint8_t> text_valid;  // (T, M)

  std::size_t image_count() const { return x_global.dim(0); }
  std::size_t text_count() const { return y_global.dim(0); }
};

struct EncoderConfig {
  std::size_t embed_dim = 32;       // D
  std::size_t heads = 4;
  std::size_t blocks = 2;           // transformer blocks per encoder
  std::size_t ffn_dim = 64;         // hidden width of the block feedforward
  std::size_t patch_count = 16;     // L
  std::size_t patch_features = 16;  // P
  std::size_t max_tokens = 24;      // M
  std::size_t vocab_size = 64;

  void validate() const;
};

/// Pre-LN self-attention block with optional key padding mask.
template <typename T>
struct TransformerBlock {
  LayerNormParams<T> norm1, norm2;
  LinearParams<T> query, key, value, out;
  FeedForwardParams<T> ffn;
  std::size_t heads = 1;

  static TransformerBlock make(ParamStore<T>& store, const std::string& name, const EncoderConfig& cfg,
                               std::mt19937_64& rng);

  /// x: (B, N, D). `valid`, when non-empty, has B*N entries; invalid
  /// positions are never attended to.
  Var<T> operator()(ParamBinder<T>& bind, Var<T> x, std::span<const std::uint8_t> valid) const;
};

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder(ParamStore<T>& store, const EncoderConfig& cfg, std::mt19937_64& rng);

  /// Returns (x_local (I, L, D), x_global (I, D)); x_global is the mean over
  /// patches. Throws DimensionError when grids disagree on L or P.
  std::pair<Var<T>, Var<T>> encode(ParamBinder<T>& bind, std::span<const PatchGrid> batch) const;

 private:
  EncoderConfig cfg_;
  LinearParams<T> patch_embed_;
  Tensor<T>* position_;
  std::vector<TransformerBlock<T>> blocks_;
  LinearParams<T> proj_;
};

template <typename T>
class TextEncoder {
 public:
  TextEncoder(ParamStore<T>& store, const EncoderConfig& cfg, std::mt19937_64& rng);

  /// Returns (y_local (T, M, D), y_global (T, D)). Padded positions of
  /// y_local are zero and y_global is the mean over valid positions.
  /// Throws InputError on an all-padding sequence or an out-of-vocabulary id.
  std::pair<Var<T>, Var<T>> encode(ParamBinder<T>& bind, std::span<const TokenSeq> batch) const;

 private:
  EncoderConfig cfg_;
  Tensor<T>* token_embed_;
  Tensor<T>* position_;
  std::vector<TransformerBlock<T>> blocks_;
  LinearParams<T> proj_;
};

/// Runs both encoders and packs the four feature blocks.
template <typename T>
FeatureBundle<T> encode_batch(ParamBinder<T>& bind, const ImageEncoder<T>& image, const TextEncoder<T>& text,
                              std::span<const PatchGrid> images, std::span<const TokenSeq> texts);

}  // namespace simr
