#pragma once

// Random toy batches and small model configs shared by the test binaries.

#include <random>
#include <vector>

#include "simr/model.hpp"

namespace simr::testing {

inline ModelConfig tiny_config(HeadKind head = HeadKind::Linear, KvChoice kv = KvChoice::Both) {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.encoder_blocks = 1;
  cfg.patch_count = 4;
  cfg.patch_features = 5;
  cfg.max_tokens = 6;
  cfg.vocab_size = 12;
  cfg.head = head;
  cfg.kv = kv;
  return cfg;
}

inline PatchGrid random_grid(std::mt19937_64& rng, std::size_t patches, std::size_t features) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  PatchGrid g;
  g.rows = 1;
  g.cols = patches;
  for (std::size_t r = 2; r * r <= patches; ++r) {
    if (patches % r == 0) {
      g.rows = r;
      g.cols = patches / r;
    }
  }
  g.features = features;
  g.values.resize(patches * features);
  for (auto& v : g.values) v = dist(rng);
  return g;
}

/// Sequence with `valid` leading tokens drawn from [1, vocab) and padding after.
inline TokenSeq random_tokens(std::mt19937_64& rng, std::size_t length, std::size_t valid, std::size_t vocab) {
  std::uniform_int_distribution<std::uint32_t> id(1, static_cast<std::uint32_t>(vocab - 1));
  TokenSeq s;
  s.ids.assign(length, 0);
  s.valid.assign(length, 0);
  for (std::size_t j = 0; j < valid; ++j) {
    s.ids[j] = id(rng);
    s.valid[j] = 1;
  }
  return s;
}

struct ToyBatch {
  std::vector<PatchGrid> images;
  std::vector<TokenSeq> texts;
};

inline ToyBatch random_batch(std::mt19937_64& rng, const ModelConfig& cfg, std::size_t images, std::size_t texts) {
  ToyBatch b;
  std::uniform_int_distribution<std::size_t> len(1, cfg.max_tokens);
  for (std::size_t i = 0; i < images; ++i) b.images.push_back(random_grid(rng, cfg.patch_count, cfg.patch_features));
  for (std::size_t t = 0; t < texts; ++t) b.texts.push_back(random_tokens(rng, cfg.max_tokens, len(rng), cfg.vocab_size));
  return b;
}

/// Fills every parameter with uniform noise so no head or bias starts at 0.
template <typename T>
void randomize_params(Model<T>& model, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& p : model.params()) {
    for (auto& v : p.tensor.data) v = static_cast<T>(dist(rng));
  }
}

}  // namespace simr::testing

#include "simr/loss.hpp"
#include "support.hpp"

namespace simr::testing {

/// Total InfoNCE loss of the model on a batch, built in `bind`'s graph.
inline Var<double> batch_loss(ParamBinder<double>& bind, const Model<double>& model, const ToyBatch& batch) {
  auto f = model.encode(bind, batch.images, batch.texts);
  auto sim = model.similarity(bind, f);
  return total_loss(sim.s_t2i, sim.s_i2t).total;
}

/// Backward vs central differences for every model parameter element.
inline GradCheck check_param_gradients(Model<double>& model, const ToyBatch& batch, double h = 1e-5) {
  model.params().zero_grad();
  {
    Graph<double> g;
    ParamBinder<double> bind(g);
    g.backward(batch_loss(bind, model, batch));
  }
  auto evaluate = [&] {
    Graph<double> g;
    ParamBinder<double> bind(g);
    return batch_loss(bind, model, batch).value()[0];
  };
  GradCheck result;
  for (auto& p : model.params()) {
    auto& t = p.tensor;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data[i];
      t.data[i] = orig + h;
      const double up = evaluate();
      t.data[i] = orig - h;
      const double down = evaluate();
      t.data[i] = orig;
      result.max_rel_error = std::max(result.max_rel_error, rel_error(t.grad[i], (up - down) / (2 * h)));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace simr::testing
