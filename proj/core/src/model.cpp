#include "simr/model.hpp"

namespace simr {

EncoderConfig ModelConfig::encoder() const {
  EncoderConfig e;
  e.embed_dim = embed_dim;
  e.heads = heads;
  e.blocks = encoder_blocks;
  e.ffn_dim = effective_ffn_dim();
  e.patch_count = patch_count;
  e.patch_features = patch_features;
  e.max_tokens = max_tokens;
  e.vocab_size = vocab_size;
  return e;
}

AlignmentConfig ModelConfig::alignment() const {
  AlignmentConfig a;
  a.embed_dim = embed_dim;
  a.heads = heads;
  a.ffn_dim = effective_ffn_dim();
  a.mlp_hidden = std::max<std::size_t>(1, embed_dim / 2);
  a.head = head;
  a.kv = kv;
  a.residual = residual;
  a.cross_attention = cross_attention;
  return a;
}

void ModelConfig::validate() const {
  encoder().validate();
  alignment().validate();
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      rng_(seed),
      image_(params_, cfg_.encoder(), rng_),
      text_(params_, cfg_.encoder(), rng_),
      alignment_(params_, cfg_.alignment(), rng_) {}

template class Model<float>;
template class Model<double>;

}  // namespace simr
