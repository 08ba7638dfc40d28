#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"

using namespace simr;
using namespace simr::testing;

namespace {

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

AlignmentConfig small_alignment(std::size_t d, std::size_t heads, HeadKind head = HeadKind::Linear,
                                KvChoice kv = KvChoice::Local) {
  AlignmentConfig cfg;
  cfg.embed_dim = d;
  cfg.heads = heads;
  cfg.ffn_dim = 2 * d;
  cfg.mlp_hidden = std::max<std::size_t>(1, d / 2);
  cfg.head = head;
  cfg.kv = kv;
  return cfg;
}

void set_identity(Tensor<double>& w) {
  std::fill(w.data.begin(), w.data.end(), 0.0);
  for (std::size_t i = 0; i < w.shape[0]; ++i) w.at({i, i}) = 1.0;
}

// Bundle built directly from leaf tensors; text tokens all valid unless given.
FeatureBundle<double> bundle(Graph<double>& g, Tensor<double> x_local, Tensor<double> x_global,
                             Tensor<double> y_local, Tensor<double> y_global,
                             std::vector<std::uint8_t> text_valid = {}) {
  FeatureBundle<double> f;
  if (text_valid.empty()) text_valid.assign(y_local.shape[0] * y_local.shape[1], 1);
  f.x_local = g.leaf(std::move(x_local));
  f.x_global = g.leaf(std::move(x_global));
  f.y_local = g.leaf(std::move(y_local));
  f.y_global = g.leaf(std::move(y_global));
  f.text_valid = std::move(text_valid);
  return f;
}

FeatureBundle<double> random_bundle(Graph<double>& g, std::mt19937_64& rng, std::size_t images, std::size_t texts,
                                    std::size_t l, std::size_t m, std::size_t d) {
  return bundle(g, random_tensor(rng, {images, l, d}), random_tensor(rng, {images, d}),
                random_tensor(rng, {texts, m, d}), random_tensor(rng, {texts, d}));
}

}  // namespace

TEST_CASE("select_kv token counts") {
  std::mt19937_64 rng(1);
  Graph<double> g;
  auto f = random_bundle(g, rng, 2, 2, 16, 5, 4);
  CHECK(select_image_kv(f, KvChoice::Global).tokens.dim(1) == 1);
  CHECK(select_image_kv(f, KvChoice::Local).tokens.dim(1) == 16);
  auto both = select_image_kv(f, KvChoice::Both);
  CHECK(both.tokens.dim(1) == 17);
  CHECK(both.local_count == 16);
  // the appended token is the global feature
  for (std::size_t d = 0; d < 4; ++d) CHECK(both.tokens.value().at({1, 16, d}) == f.x_global.value().at({1, d}));
  CHECK(parse_kv_choice("both") == KvChoice::Both);
  CHECK_THROWS_AS(parse_kv_choice("all"), ConfigError);
}

TEST_CASE("cross_attend_t2i") {
  std::mt19937_64 rng(2);

  SUBCASE("identical keys give uniform attention and K-independent SR") {
    ParamStore<double> store;
    Alignment<double> align(store, small_alignment(4, 2), rng);
    auto token = random_tensor(rng, {4});
    auto y_global = random_tensor(rng, {1, 4});
    std::vector<Tensor<double>> srs;
    for (std::size_t l : {3, 5}) {
      Tensor<double> x_local(Shape{1, l, 4});
      for (std::size_t j = 0; j < l; ++j) std::copy(token.data.begin(), token.data.end(), x_local.data.begin() + j * 4);
      Graph<double> g;
      ParamBinder<double> bind(g);
      auto f = bundle(g, x_local, Tensor<double>(Shape{1, 4}), random_tensor(rng, {1, 2, 4}), y_global);
      auto r = align.cross_attend_t2i(bind, f);
      for (auto w : r.attention.data) CHECK(w == doctest::Approx(1.0 / static_cast<double>(l)));
      srs.push_back(r.sr.value());
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(srs[0].data[i] == doctest::Approx(srs[1].data[i]).epsilon(1e-12));
  }

  SUBCASE("T = I = 1 shape") {
    ParamStore<double> store;
    Alignment<double> align(store, small_alignment(4, 2), rng);
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto f = random_bundle(g, rng, 1, 1, 3, 2, 4);
    CHECK(align.cross_attend_t2i(bind, f).sr.shape() == Shape{1, 1, 4});
    CHECK(align.cross_attend_i2t(bind, f).sr.shape() == Shape{1, 1, 4});
  }

  SUBCASE("single head, two keys: hand-computed softmax") {
    ParamStore<double> store;
    Alignment<double> align(store, small_alignment(2, 1), rng);
    set_identity(store.get("align.query.weight"));
    set_identity(store.get("align.key.weight"));
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto f = bundle(g, Tensor<double>({1, 2, 2}, {0.3, -1.0, 2.0, 1.0}), Tensor<double>(Shape{1, 2}),
                    random_tensor(rng, {1, 1, 2}), Tensor<double>({1, 2}, {1.0, 0.5}));
    auto r = align.cross_attend_t2i(bind, f);
    const double l1 = (1.0 * 0.3 + 0.5 * -1.0) / std::sqrt(2.0);
    const double l2 = (1.0 * 2.0 + 0.5 * 1.0) / std::sqrt(2.0);
    const double w1 = std::exp(l1) / (std::exp(l1) + std::exp(l2));
    REQUIRE(r.attention.shape == Shape{1, 1, 1, 2});
    CHECK(r.attention.data[0] == doctest::Approx(w1).epsilon(1e-12));
    CHECK(r.attention.data[1] == doctest::Approx(1.0 - w1).epsilon(1e-12));
  }
}

TEST_CASE("cross_attend_i2t") {
  std::mt19937_64 rng(3);

  SUBCASE("one valid text token takes all attention") {
    ParamStore<double> store;
    Alignment<double> align(store, small_alignment(4, 2), rng);
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto f = bundle(g, random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 4}), random_tensor(rng, {1, 4, 4}),
                    random_tensor(rng, {1, 4}), {0, 0, 1, 0});
    auto r = align.cross_attend_i2t(bind, f);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t h = 0; h < 2; ++h) {
        CHECK(r.attention.at({i, 0, h, 2}) == 1.0);
        CHECK(r.attention.at({i, 0, h, 0}) == 0.0);
      }
    }
  }

  SUBCASE("role swap: i2t on (A, B) equals t2i on the transposed fixture") {
    ParamStore<double> store;
    Alignment<double> align(store, small_alignment(4, 2), rng);
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {2, 5, 4});
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto f1 = bundle(g, random_tensor(rng, {3, 5, 4}), a, b, random_tensor(rng, {2, 4}));
    auto f2 = bundle(g, b, random_tensor(rng, {2, 4}), random_tensor(rng, {3, 5, 4}), a);
    auto i2t = align.cross_attend_i2t(bind, f1);
    auto t2i = align.cross_attend_t2i(bind, f2);
    REQUIRE(i2t.sr.shape() == t2i.sr.shape());
    for (std::size_t i = 0; i < i2t.sr.value().size(); ++i) CHECK(i2t.sr.value()[i] == t2i.sr.value()[i]);
  }
}

TEST_CASE("project_similarity") {
  std::mt19937_64 rng(4);

  SUBCASE("zero weights: every entry equals the bias") {
    ParamStore<double> store;
    Alignment<double> align(store, small_alignment(4, 2), rng);
    std::fill(store.get("align.head.weight").data.begin(), store.get("align.head.weight").data.end(), 0.0);
    store.get("align.head.bias").data[0] = 0.7;
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto s = align.project_similarity(bind, g.leaf(random_tensor(rng, {2, 3, 4})));
    CHECK(s.shape() == Shape{2, 3});
    for (auto v : s.value().data) CHECK(v == 0.7);
  }

  SUBCASE("linear head on ones: sum(w) + b") {
    ParamStore<double> store;
    Alignment<double> align(store, small_alignment(4, 2), rng);
    const auto& w = store.get("align.head.weight").data;
    store.get("align.head.bias").data[0] = -0.2;
    const double expected = std::accumulate(w.begin(), w.end(), 0.0) - 0.2;
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto s = align.project_similarity(bind, g.leaf(Tensor<double>(Shape{2, 2, 4}, 1.0)));
    for (auto v : s.value().data) CHECK(v == doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("MLP head matches a two-layer hand computation") {
    auto cfg = small_alignment(3, 1, HeadKind::Mlp);
    cfg.mlp_hidden = 2;
    ParamStore<double> store;
    Alignment<double> align(store, cfg, rng);
    const std::vector<double> w1{0.5, -1.0, 0.25, 2.0, -0.5, 1.0};  // (3, 2)
    const std::vector<double> b1{0.1, -0.3};
    const std::vector<double> w2{1.5, -0.75};  // (2, 1)
    const double b2 = 0.05;
    store.get("align.head.hidden.weight").data = w1;
    store.get("align.head.hidden.bias").data = b1;
    store.get("align.head.output.weight").data = w2;
    store.get("align.head.output.bias").data = {b2};
    const Tensor<double> sr({2, 2, 3}, {1, 0, -1, 0.5, 2, 0, -1, -1, 1, 3, 0.25, -2});
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto s = align.project_similarity(bind, g.leaf(sr));
    for (std::size_t e = 0; e < 4; ++e) {
      double out = b2;
      for (std::size_t h = 0; h < 2; ++h) {
        double pre = b1[h];
        for (std::size_t d = 0; d < 3; ++d) pre += sr.data[e * 3 + d] * w1[d * 2 + h];
        out += gelu_ref(pre) * w2[h];
      }
      CHECK(s.value().data[e] == doctest::Approx(out).epsilon(1e-12));
    }
  }

  SUBCASE("cosine heads have no projection") {
    ParamStore<double> store;
    Alignment<double> align(store, small_alignment(4, 2, HeadKind::CosProjProj), rng);
    Graph<double> g;
    ParamBinder<double> bind(g);
    CHECK_THROWS_AS(align.project_similarity(bind, g.leaf(random_tensor(rng, {1, 1, 4}))), ConfigError);
  }
}

TEST_CASE("cosine_variant_scores") {
  auto score = [](std::vector<double> t2i, std::vector<double> i2t, HeadKind kind,
                  std::vector<double> x_g = {1, 0, 0}, std::vector<double> y_g = {1, 0, 0}) {
    Graph<double> g;
    auto f = bundle(g, Tensor<double>(Shape{1, 1, 3}), Tensor<double>({1, 3}, x_g), Tensor<double>(Shape{1, 1, 3}),
                    Tensor<double>({1, 3}, y_g));
    auto [s_t2i, s_i2t] = cosine_variant_scores(f, g.leaf(Tensor<double>({1, 1, 3}, t2i)),
                                                g.leaf(Tensor<double>({1, 1, 3}, i2t)), kind);
    CHECK(s_t2i.value().data == s_i2t.value().data);
    return std::pair{s_t2i.value().data[0], g.zero_norm_events()};
  };
  CHECK(score({1, 2, 3}, {1, 2, 3}, HeadKind::CosProjProj).first == doctest::Approx(1.0));
  CHECK(score({1, 0, 0}, {0, 5, 0}, HeadKind::CosProjProj).first == doctest::Approx(0.0));
  CHECK(score({1, 2, 2}, {2, 1, 2}, HeadKind::CosProjProj).first == doctest::Approx(8.0 / 9.0).epsilon(1e-12));
  // cos(i2t, y_g) + cos(t2i, x_g)
  CHECK(score({1, 2, 2}, {0, 3, 0}, HeadKind::CosProjOrig, {2, 1, 2}, {0, 1, 0}).first ==
        doctest::Approx(1.0 + 8.0 / 9.0).epsilon(1e-12));
  auto [zero, events] = score({0, 0, 0}, {1, 1, 1}, HeadKind::CosProjProj);
  CHECK(zero == 0.0);
  CHECK(events == 1);
}

TEST_CASE("similarity invariants on a tiny model") {
  std::mt19937_64 rng(5);
  auto cfg = tiny_config();
  Model<double> model(cfg, 7);
  randomize_params(model, rng);

  auto scores = [&](const ToyBatch& b) {
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto sim = model.similarity(bind, model.encode(bind, b.images, b.texts));
    return std::tuple{sim.s_t2i.value(), sim.s_i2t.value(), sim.attn_t2i, sim.attn_i2t};
  };

  SUBCASE("attention weights form a simplex over keys") {
    for (int trial = 0; trial < 10; ++trial) {
      auto [st, si, at, ai] = scores(random_batch(rng, cfg, 3, 3));
      for (const auto* attn : {&at, &ai}) {
        const auto k = attn->shape.back();
        for (std::size_t row = 0; row < attn->size() / k; ++row) {
          double total = 0;
          for (std::size_t j = 0; j < k; ++j) {
            CHECK(attn->data[row * k + j] >= 0.0);
            total += attn->data[row * k + j];
          }
          CHECK(std::abs(total - 1.0) < 1e-6);
        }
      }
    }
  }

  SUBCASE("permuting images permutes S_t2i columns and S_i2t rows") {
    auto batch = random_batch(rng, cfg, 4, 3);
    auto [st, si, at, ai] = scores(batch);
    std::vector<std::size_t> perm{2, 0, 3, 1};
    ToyBatch permuted = batch;
    for (std::size_t i = 0; i < 4; ++i) permuted.images[i] = batch.images[perm[i]];
    auto [pt, pi, pat, pai] = scores(permuted);
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(pt.at({t, i}) == doctest::Approx(st.at({t, perm[i]})).epsilon(1e-12));
        CHECK(pi.at({i, t}) == doctest::Approx(si.at({perm[i], t})).epsilon(1e-12));
      }
    }
  }

  SUBCASE("one parameter set drives both directions") {
    auto batch = random_batch(rng, cfg, 2, 2);
    auto [st, si, at, ai] = scores(batch);
    for (auto& v : model.params().get("align.key.weight").data) v *= 1.5;
    auto [st2, si2, at2, ai2] = scores(batch);
    CHECK(st.data != st2.data);
    CHECK(si.data != si2.data);
  }
}

TEST_CASE("kv=global with one patch equals kv=local") {
  std::mt19937_64 rng(6);
  auto cfg = tiny_config(HeadKind::Linear, KvChoice::Global);
  cfg.patch_count = 1;
  auto local_cfg = cfg;
  local_cfg.kv = KvChoice::Local;
  Model<double> global_model(cfg, 3), local_model(local_cfg, 3);
  ToyBatch batch = random_batch(rng, cfg, 3, 3);
  for (auto& t : batch.texts) t = random_tokens(rng, cfg.max_tokens, 1, cfg.vocab_size);

  auto run = [&](Model<double>& m) {
    Graph<double> g;
    ParamBinder<double> bind(g);
    auto sim = m.similarity(bind, m.encode(bind, batch.images, batch.texts));
    return sim.s_t2i.value();
  };
  auto a = run(global_model), b = run(local_model);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) < 1e-6);
}

TEST_CASE("gradient check with a zeroed feedforward output layer") {
  std::mt19937_64 rng(8);
  auto cfg = tiny_config();
  cfg.embed_dim = 4;
  cfg.max_tokens = 3;
  cfg.patch_count = 2;
  Model<double> model(cfg, 1);
  randomize_params(model, rng);
  for (auto& v : model.params().get("align.ffn.down.weight").data) v = 0.0;
  for (auto& v : model.params().get("align.ffn.down.bias").data) v = 0.0;
  auto batch = random_batch(rng, cfg, 2, 2);
  auto result = check_param_gradients(model, batch);
  CHECK(result.max_rel_error < 1e-4);
}
