#include <random>

#include <benchmark/benchmark.h>

#include "simr/eval.hpp"
#include "simr/loss.hpp"
#include "simr/model.hpp"
#include "simr/optim.hpp"

using namespace simr;

namespace {

Tensor<float> random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Tensor<float> t(Shape{rows, cols});
  for (auto& v : t.data) v = dist(rng);
  return t;
}

// Default-sized model inputs: 4x4 grid of 16-feature patches, 24 tokens.
struct Batch {
  std::vector<PatchGrid> images;
  std::vector<TokenSeq> texts;
};

Batch make_batch(std::mt19937_64& rng, const ModelConfig& cfg, std::size_t n) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::uniform_int_distribution<std::uint32_t> word(2, static_cast<std::uint32_t>(cfg.vocab_size - 1));
  Batch b;
  for (std::size_t i = 0; i < n; ++i) {
    PatchGrid g;
    g.rows = 4;
    g.cols = 4;
    g.features = cfg.patch_features;
    g.values.resize(cfg.patch_count * cfg.patch_features);
    for (auto& v : g.values) v = dist(rng);
    b.images.push_back(std::move(g));
    TokenSeq s;
    s.ids.assign(cfg.max_tokens, 0);
    s.valid.assign(cfg.max_tokens, 0);
    for (std::size_t j = 0; j < 6; ++j) {
      s.ids[j] = word(rng);
      s.valid[j] = 1;
    }
    b.texts.push_back(std::move(s));
  }
  return b;
}

ModelConfig bench_config(HeadKind head) {
  ModelConfig cfg;
  cfg.vocab_size = 40;
  cfg.head = head;
  return cfg;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  const auto a = random_matrix(rng, n, n), b = random_matrix(rng, n, n);
  for (auto _ : state) {
    Graph<float> g;
    benchmark::DoNotOptimize(matmul(g.leaf(a), g.leaf(b)).value().data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(32, 256);

void BM_Similarity(benchmark::State& state) {
  auto cfg = bench_config(static_cast<HeadKind>(state.range(1)));
  Model<float> model(cfg, 7);
  std::mt19937_64 rng(2);
  auto batch = make_batch(rng, cfg, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    Graph<float> g;
    ParamBinder<float> bind(g);
    auto sim = model.similarity(bind, model.encode(bind, batch.images, batch.texts));
    benchmark::DoNotOptimize(sim.s_t2i.value().data.data());
  }
  state.SetLabel(std::string(head_kind_name(cfg.head)));
}
BENCHMARK(BM_Similarity)
    ->Args({32, static_cast<int>(HeadKind::Linear)})
    ->Args({32, static_cast<int>(HeadKind::CosProjProj)})
    ->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  auto cfg = bench_config(HeadKind::Linear);
  Model<float> model(cfg, 7);
  Adam<float> adam(5e-4f);
  std::mt19937_64 rng(3);
  auto batch = make_batch(rng, cfg, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    Graph<float> g;
    ParamBinder<float> bind(g);
    auto sim = model.similarity(bind, model.encode(bind, batch.images, batch.texts));
    auto loss = total_loss(sim.s_t2i, sim.s_i2t);
    g.backward(loss.total);
    adam.step(model.params());
  }
}
BENCHMARK(BM_TrainStep)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Auc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(4);
  std::normal_distribution<double> dist;
  std::vector<double> scores(n);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint8_t>(i % 3 == 0);
    scores[i] = dist(rng) + labels[i];
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(auc(scores, labels));
    benchmark::DoNotOptimize(select_threshold(scores, labels).threshold);
  }
}
BENCHMARK(BM_Auc)->Arg(500)->Arg(5000);

}  // namespace

BENCHMARK_MAIN();
