#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "simr/eval.hpp"
#include "simr/io.hpp"
#include "simr/train.hpp"
#include "temp_dir.hpp"

using namespace simr;

namespace {

using Labels = std::vector<std::uint8_t>;

double brute_auc(const std::vector<double>& s, const Labels& l) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!l[i] || l[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

ThresholdMetrics brute_metrics(const std::vector<double>& s, const Labels& l, double t) {
  double tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool p = s[i] >= t;
    tp += p && l[i];
    fp += p && !l[i];
    fn += !p && l[i];
    tn += !p && !l[i];
  }
  ThresholdMetrics m;
  m.acc = (tp + tn) / (tp + fp + fn + tn);
  m.f1 = tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : 0;
  const double d = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
  m.mcc = d > 0 ? (tp * tn - fp * fn) / d : 0;
  return m;
}

// Random column with coarse scores so ties are common.
std::pair<std::vector<double>, Labels> random_column(std::mt19937_64& rng, bool both_classes = true) {
  std::uniform_int_distribution<std::size_t> len(2, 30);
  std::uniform_int_distribution<int> level(0, 9), bit(0, 1);
  for (;;) {
    const auto n = len(rng);
    std::vector<double> s(n);
    Labels l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = level(rng) * 0.1;
      l[i] = static_cast<std::uint8_t>(bit(rng));
    }
    const auto pos = std::count(l.begin(), l.end(), 1);
    if (!both_classes || (pos > 0 && pos < static_cast<long>(n))) return {s, l};
  }
}

}  // namespace

TEST_CASE("auc") {
  CHECK(auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, Labels{0, 0, 1, 1}) == doctest::Approx(0.75));
  CHECK(auc(std::vector<double>{0.1, 0.2, 0.3, 0.4}, Labels{0, 0, 1, 1}) == 1.0);
  CHECK(auc(std::vector<double>{0.5, 0.5, 0.5}, Labels{0, 1, 1}) == 0.5);
  CHECK_THROWS_AS(auc(std::vector<double>{0.1, 0.2}, Labels{1, 1}), UndefinedMetric);
}

TEST_CASE("thresholded metrics") {
  auto from = [](std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
    return metrics_from(Confusion{tp, fp, fn, tn});
  };
  auto balanced = from(1, 1, 1, 1);
  CHECK(balanced.mcc == 0.0);
  CHECK(balanced.acc == 0.5);
  CHECK(balanced.f1 == 0.5);
  auto perfect = from(3, 0, 0, 4);
  CHECK(perfect.mcc == 1.0);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.acc == 1.0);
  auto hand = from(2, 1, 1, 6);
  CHECK(hand.f1 == doctest::Approx(2.0 / 3.0));
  CHECK(hand.acc == doctest::Approx(0.8));
  // (2*6 - 1*1) / sqrt(3*3*7*7) = 11/21
  CHECK(hand.mcc == doctest::Approx(11.0 / 21.0).epsilon(1e-12));
  CHECK(from(0, 0, 2, 3).mcc == 0.0);
  CHECK(thresholded_metrics(std::vector<double>{0.2, 0.5}, Labels{0, 1}, 0.5).mcc == 1.0);
}

TEST_CASE("metric oracles on random columns") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> thr(-0.05, 0.95);
  for (int trial = 0; trial < 100; ++trial) {
    auto [s, l] = random_column(rng);
    CHECK(std::abs(auc(s, l) - brute_auc(s, l)) < 1e-9);

    const double t = thr(rng);
    auto m = thresholded_metrics(s, l, t);
    auto b = brute_metrics(s, l, t);
    CHECK(std::abs(m.mcc - b.mcc) < 1e-9);
    CHECK(std::abs(m.f1 - b.f1) < 1e-9);
    CHECK(std::abs(m.acc - b.acc) < 1e-9);

    // exhaustive midpoint scan
    std::vector<double> u(s);
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    auto choice = select_threshold(s, l);
    if (u.size() < 2) {
      CHECK(choice.fallback);
      continue;
    }
    double best = -2, best_t = 0;
    for (std::size_t i = 0; i + 1 < u.size(); ++i) {
      const double mid = 0.5 * (u[i] + u[i + 1]);
      const double mcc = brute_metrics(s, l, mid).mcc;
      if (mcc > best + 1e-12) {
        best = mcc;
        best_t = mid;
      }
    }
    CHECK_FALSE(choice.fallback);
    CHECK(std::abs(choice.val_mcc - best) < 1e-9);
    CHECK(std::abs(choice.threshold - best_t) < 1e-9);
  }
}

TEST_CASE("threshold selection edge cases") {
  auto sep = select_threshold(std::vector<double>{0.1, 0.2, 0.7, 0.9}, Labels{0, 0, 1, 1});
  CHECK(sep.threshold > 0.2);
  CHECK(sep.threshold < 0.7);
  CHECK(sep.val_mcc == 1.0);
  auto constant = select_threshold(std::vector<double>{0.3, 0.3, 0.3}, Labels{0, 1, 1});
  CHECK(constant.fallback);
  CHECK(constant.threshold == 0.3);
  auto single = select_threshold(std::vector<double>{0.1, 0.4, 0.9}, Labels{1, 1, 1});
  CHECK(single.fallback);
  CHECK(single.threshold == 0.4);
}

TEST_CASE("auc is invariant under monotone transforms") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 50; ++trial) {
    auto [s, l] = random_column(rng);
    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3 * s[i]) - 7 + s[i] * s[i] * s[i];
    CHECK(auc(t, l) == auc(s, l));
  }
}

TEST_CASE("pointing game") {
  std::vector<double> map{0, 0, 1, 0};
  CHECK(pointing_hit(map, std::vector<std::uint32_t>{2, 3}));
  CHECK_FALSE(pointing_hit(map, std::vector<std::uint32_t>{0}));
  CHECK(pointing_argmax(std::vector<double>{0.4, 0.1, 0.4}) == 0);

  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> u(0, 1), scale(0.01, 100), shift(-50, 50);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> m(16);
    for (auto& v : m) v = std::round(u(rng) * 8) / 8;  // ties on purpose
    std::vector<double> a(m);
    const double sc = scale(rng), sh = shift(rng);
    for (auto& v : a) v = v * sc + sh;
    CHECK(pointing_argmax(a) == pointing_argmax(m));
  }
}

TEST_CASE("attention rendering") {
  SUBCASE("golden file") {
    const std::vector<double> fixture{0.02, 0.05, 0.01, 0.03, 0.04, 0.31, 0.12, 0.02,
                                      0.01, 0.09, 0.18, 0.03, 0.02, 0.01, 0.04, 0.02};
    simr::testing::TempDir tmp;
    export_attention_map(fixture, 4, 4, tmp.path() / "map.pgm");
    CHECK(read_file(tmp.path() / "map.pgm") == read_file(SIMR_TEST_DATA_DIR "/attention_golden.pgm"));
  }

  SUBCASE("uniform map is uniform gray") {
    auto pgm = render_attention(std::vector<double>(16, 1.0 / 16), 4, 4);
    const std::string header = "P5\n64 64\n255\n";
    REQUIRE(pgm.size() == header.size() + 64 * 64);
    CHECK(std::string(pgm.begin(), pgm.begin() + static_cast<long>(header.size())) == header);
    CHECK(std::all_of(pgm.begin() + static_cast<long>(header.size()), pgm.end(), [](auto v) { return v == 128; }));
  }

  SUBCASE("one-hot map peaks inside its block") {
    std::vector<double> m(16, 0.0);
    m[1 * 4 + 2] = 1.0;  // row 1, col 2
    auto pgm = render_attention(m, 4, 4);
    const std::size_t header = std::string("P5\n64 64\n255\n").size();
    auto it = std::max_element(pgm.begin() + static_cast<long>(header), pgm.end());
    const auto idx = static_cast<std::size_t>(it - pgm.begin()) - header;
    CHECK(*it == 255);
    CHECK(idx / 64 / 16 == 1);
    CHECK(idx % 64 / 16 == 2);
  }

  CHECK_THROWS_AS(render_attention(std::vector<double>(5, 0.0), 2, 2), DimensionError);
}

TEST_CASE("csv append writes the header once") {
  simr::testing::TempDir tmp;
  append_csv_row(tmp.path() / "log.csv", "a,b", "1,2");
  append_csv_row(tmp.path() / "log.csv", "a,b", "3,4");
  CHECK(read_text(tmp.path() / "log.csv") == "a,b\n1,2\n3,4\n");
}

TEST_CASE("prompts and zero-shot scoring") {
  GenerateConfig gen;
  gen.k = 4;
  gen.l = 4;
  gen.p = 5;
  gen.m = 8;
  gen.n_train = 4;
  gen.n_val = 12;
  gen.n_test = 20;
  auto data = synthesize(gen);
  ModelConfig cfg = simr::testing::tiny_config();
  fit_model_to_dataset(cfg, data);

  auto p1 = PromptSet::make(PromptTemplate::P1, data.concepts, data.vocab, gen.m);
  CHECK(p1.sentences[0] == "there is " + data.concepts.names[0] + " .");
  auto p2 = PromptSet::make(PromptTemplate::P2, data.concepts, data.vocab, gen.m);
  CHECK(p2.sentences[1] == "a disease of " + data.concepts.names[1]);
  CHECK_THROWS_AS(parse_prompt_template("P3"), ConfigError);
  auto missing = data.concepts;
  missing.names[0] = "unlisted";
  CHECK_THROWS_AS(PromptSet::make(PromptTemplate::P1, missing, data.vocab, gen.m), ConfigError);

  std::vector<PatchGrid> images{data.test[0].grid, data.test[1].grid, data.test[0].grid};

  SUBCASE("zero head gives constant scores and AUC 0.5") {
    Model<float> model(cfg, 1);
    std::fill(model.params().get("align.head.weight").data.begin(), model.params().get("align.head.weight").data.end(),
              0.0f);
    auto report = evaluate(model, data, {});
    for (const auto& c : report.classes) {
      if (c.auc) CHECK(*c.auc == 0.5);
    }
    CHECK(report.mean_auc == 0.5);
  }

  SUBCASE("duplicate images give identical rows; batching does not matter") {
    Model<float> model(cfg, 2);
    auto a = zero_shot(model, images, p1, ScoreDirection::Average, true, 64);
    auto b = zero_shot(model, images, p1, ScoreDirection::Average, true, 1);
    for (std::size_t d = 0; d < a.concepts; ++d) CHECK(a.score(0, d) == a.score(2, d));
    for (std::size_t i = 0; i < a.scores.size(); ++i) CHECK(std::abs(a.scores[i] - b.scores[i]) < 1e-5);
    auto t2i = zero_shot(model, images, p1, ScoreDirection::T2I, false);
    auto i2t = zero_shot(model, images, p1, ScoreDirection::I2T, false);
    for (std::size_t i = 0; i < a.scores.size(); ++i) {
      CHECK(a.scores[i] == doctest::Approx(0.5 * (t2i.scores[i] + i2t.scores[i])));
    }
    // head-averaged maps over local patches sum to at most 1 (the global key takes the rest)
    for (std::size_t i = 0; i < 3; ++i) {
      auto m = a.map(i, 0);
      const double total = std::accumulate(m.begin(), m.end(), 0.0);
      CHECK(total <= 1.0 + 1e-6);
      CHECK(total > 0.0);
    }
  }

  SUBCASE("global-only keys have no pointing maps") {
    auto g = cfg;
    g.kv = KvChoice::Global;
    Model<float> model(g, 3);
    auto out = zero_shot(model, images, p1, ScoreDirection::Average, true);
    CHECK(out.maps.empty());
    auto report = evaluate(model, data, {});
    CHECK_FALSE(report.mean_pointing.has_value());
  }

  SUBCASE("report serialization and determinism") {
    Model<float> model(cfg, 4);
    EvalOptions opt;
    opt.config = {{"seed", 4}};
    auto a = evaluate(model, data, opt);
    auto b = evaluate(model, data, opt);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.to_csv() == b.to_csv());
    CHECK(a.aligned);
    CHECK(a.to_json()["config"]["seed"] == 4);
    CHECK(a.to_csv().rfind("# config: ", 0) == 0);
    CHECK(a.classes.size() == 4);
    for (const auto& c : a.classes) {
      if (c.auc) {
        CHECK(*c.auc >= 0.0);
        CHECK(*c.auc <= 1.0);
      }
      CHECK(c.mcc >= -1.0);
      CHECK(c.mcc <= 1.0);
    }
    opt.prompt = PromptTemplate::P2;
    CHECK_FALSE(evaluate(model, data, opt).aligned);
  }
}
