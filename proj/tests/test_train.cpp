#include <cmath>
#include <limits>

#include "doctest.h"
#include "simr/checkpoint.hpp"
#include "simr/io.hpp"
#include "simr/train.hpp"
#include "temp_dir.hpp"

using namespace simr;

namespace {

Dataset smoke_data() {
  GenerateConfig gen;
  gen.k = 4;
  gen.l = 4;
  gen.p = 8;
  gen.m = 10;
  gen.n_train = 200;
  gen.n_val = 40;
  gen.n_test = 0;
  gen.seed = 3;
  return synthesize(gen);
}

ModelConfig smoke_model(const Dataset& d) {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.encoder_blocks = 1;
  fit_model_to_dataset(cfg, d);
  return cfg;
}

TrainConfig smoke_train() {
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 16;
  t.lr = 2e-3;
  return t;
}

double epoch_mean(const TrainResult& r, std::size_t epoch) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& it : r.log) {
    if (it.epoch == epoch) {
      total += it.loss.total;
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig t;
  t.batch_size = 1;
  CHECK_THROWS_WITH_AS(t.validate(), doctest::Contains("negative"), ConfigError);
  t = {};
  t.lr = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.epochs = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("sentence pools merge canonical prompts") {
  auto d = smoke_data();
  auto plain = sentence_pools(d.train, d.concepts, false);
  auto aligned = sentence_pools(d.train, d.concepts, true);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    CHECK(plain[i] == d.train[i].sentences);
    CHECK(std::equal(plain[i].begin(), plain[i].end(), aligned[i].begin()));
    const auto positives = static_cast<std::size_t>(std::count(d.train[i].labels.begin(), d.train[i].labels.end(), 1));
    CHECK(aligned[i].size() == plain[i].size() + positives);
  }
}

TEST_CASE("smoke training lowers the loss and is deterministic") {
  auto d = smoke_data();
  auto pools = sentence_pools(d.train, d.concepts, true);
  Model<float> a(smoke_model(d), 1), b(smoke_model(d), 1);
  auto ra = train_model(a, d, pools, smoke_train());
  auto rb = train_model(b, d, pools, smoke_train());
  CHECK(epoch_mean(ra, 2) < epoch_mean(ra, 0));
  CHECK(ra.val_loss.size() == 3);
  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) CHECK(ra.log[i].loss.total == rb.log[i].loss.total);
  CHECK(encode_checkpoint(a.params()) == encode_checkpoint(b.params()));
}

TEST_CASE("training artifacts and numeric abort") {
  auto d = smoke_data();
  auto pools = sentence_pools(d.train, d.concepts, false);
  simr::testing::TempDir tmp;
  Model<float> model(smoke_model(d), 2);
  auto cfg = smoke_train();
  cfg.epochs = 1;
  auto r = train_model(model, d, pools, cfg, {tmp.path(), R"({"seed":2})"});

  auto log = read_text(tmp.path() / "loss.csv");
  CHECK(log.rfind("# config: {\"seed\":2}\niter,l_t2i,l_i2t,total\n0,", 0) == 0);
  CHECK(static_cast<std::size_t>(std::count(log.begin(), log.end(), '\n')) == r.log.size() + 2);
  Model<float> reloaded(smoke_model(d), 99);
  load_checkpoint(reloaded.params(), tmp.path() / "model.ckpt");
  CHECK(encode_checkpoint(reloaded.params()) == encode_checkpoint(model.params()));
  CHECK(std::filesystem::exists(tmp.path() / "best.ckpt"));

  const auto good = read_file(tmp.path() / "model.ckpt");
  model.params().get("align.head.weight").data[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(train_model(model, d, pools, cfg, {tmp.path(), ""}), NumericError);
  CHECK(read_file(tmp.path() / "model.ckpt") == good);
}
