#include "simr/synth.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>
#include <set>

#include "simr/error.hpp"
#include "simr/io.hpp"

namespace simr {

namespace {

constexpr std::string_view kConceptNames[] = {
    "atelectasis", "cardiomegaly", "consolidation", "edema",    "effusion",     "emphysema", "fibrosis",
    "hernia",      "infiltration", "mass",          "nodule",   "pneumothorax", "pneumonia", "thickening",
};

// Report phrasings. None of them matches either inference prompt.
constexpr std::string_view kTemplates[] = {
    "evidence of {} .", "{} is observed .", "findings consistent with {} .", "{} is noted .", "signs of {} .",
};

constexpr double kMinAngleDeg = 15.0;

using json = nlohmann::json;

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : words_{"<pad>", "<unk>"} {
  for (const auto& w : words) {
    if (!contains(w)) words_.push_back(w);
  }
}

std::uint32_t Vocabulary::id(std::string_view word) const {
  auto it = std::find(words_.begin() + 2, words_.end(), word);
  return it == words_.end() ? unk_id : static_cast<std::uint32_t>(it - words_.begin());
}

bool Vocabulary::contains(std::string_view word) const {
  return std::find(words_.begin(), words_.end(), word) != words_.end();
}

TokenSeq Vocabulary::encode(std::string_view sentence, std::size_t max_tokens) const {
  TokenSeq seq;
  seq.ids.assign(max_tokens, pad_id);
  seq.valid.assign(max_tokens, 0);
  auto words = split_words(sentence);
  for (std::size_t j = 0; j < std::min(words.size(), max_tokens); ++j) {
    seq.ids[j] = id(words[j]);
    seq.valid[j] = 1;
  }
  return seq;
}

std::size_t ConceptVocab::capacity() { return std::size(kConceptNames); }

ConceptVocab ConceptVocab::make(std::size_t k, std::size_t p, std::mt19937_64& rng) {
  if (k < 2) throw ConfigError("concept count K must be >= 2, got " + std::to_string(k));
  if (k > capacity()) {
    throw ConfigError("concept count K=" + std::to_string(k) + " exceeds the " + std::to_string(capacity()) +
                      " available concept names");
  }
  if (p < 2) throw ConfigError("patch features P must be >= 2 to separate concept signatures");
  ConceptVocab v;
  v.names.assign(kConceptNames, kConceptNames + k);
  v.templates.assign(std::begin(kTemplates), std::end(kTemplates));

  const double max_cos = std::cos(kMinAngleDeg * std::numbers::pi / 180.0);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (std::size_t c = 0; c < k; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) throw ConfigError("cannot place " + std::to_string(k) + " separated signatures in P=" +
                                             std::to_string(p));
      std::vector<float> s(p);
      for (auto& x : s) x = normal(rng);
      bool ok = true;
      for (const auto& other : v.signatures) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t j = 0; j < p; ++j) {
          dot += s[j] * other[j];
          na += s[j] * s[j];
          nb += other[j] * other[j];
        }
        if (std::abs(dot) / std::sqrt(na * nb) > max_cos) ok = false;
      }
      if (ok) {
        v.signatures.push_back(std::move(s));
        break;
      }
    }
  }
  return v;
}

std::optional<std::size_t> ConceptVocab::find(std::string_view name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names.begin());
}

std::vector<std::size_t> ConceptVocab::mentioned(std::string_view sentence) const {
  auto words = split_words(sentence);
  std::vector<std::size_t> found;
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (std::find(words.begin(), words.end(), names[c]) != words.end()) found.push_back(c);
  }
  return found;
}

std::string instantiate(std::string_view tmpl, const std::vector<std::string>& names) {
  std::string joined;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) joined += " and ";
    joined += names[i];
  }
  std::string out(tmpl);
  auto pos = out.find("{}");
  if (pos != std::string::npos) out.replace(pos, 2, joined);
  return out;
}

void GenerateConfig::validate() const {
  if (k < 2) throw ConfigError("K must be >= 2, got " + std::to_string(k));
  if (k > ConceptVocab::capacity()) {
    throw ConfigError("K=" + std::to_string(k) + " exceeds template capacity " +
                      std::to_string(ConceptVocab::capacity()));
  }
  if (l == 0 || p < 2 || m == 0) throw ConfigError("L, M must be positive and P >= 2");
  if (max_concepts_per_image < 1 || max_concepts_per_image > k) {
    throw ConfigError("max_concepts_per_image must lie in [1, K]");
  }
  if (max_concepts_per_image > l) throw ConfigError("max_concepts_per_image cannot exceed L");
  if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma must be finite and >= 0");
  if (n_train + n_val + n_test == 0) throw ConfigError("dataset would be empty");
}

const std::vector<Sample>& Dataset::split(std::string_view name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

std::pair<std::size_t, std::size_t> grid_shape(std::size_t l) {
  std::size_t rows = 1;
  for (std::size_t r = 1; r * r <= l; ++r) {
    if (l % r == 0) rows = r;
  }
  return {rows, l / rows};
}

namespace {

Vocabulary build_vocab(const ConceptVocab& concepts) {
  std::set<std::string> words;
  auto add_template = [&](std::string_view t) {
    for (auto& w : split_words(t)) {
      if (w != "{}") words.insert(w);
    }
  };
  for (const auto& t : concepts.templates) add_template(t);
  add_template(prompt_p1);
  add_template(prompt_p2);
  words.insert("and");
  std::vector<std::string> ordered(words.begin(), words.end());
  ordered.insert(ordered.end(), concepts.names.begin(), concepts.names.end());
  return Vocabulary(ordered);
}

Sample make_sample(std::uint64_t id, const GenerateConfig& cfg, std::size_t rows, std::size_t cols,
                   const ConceptVocab& concepts, std::mt19937_64& rng) {
  std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.noise_sigma));
  Sample s;
  s.id = id;
  s.grid.rows = rows;
  s.grid.cols = cols;
  s.grid.features = cfg.p;
  s.grid.values.resize(cfg.l * cfg.p);
  for (auto& v : s.grid.values) v = cfg.noise_sigma > 0 ? noise(rng) : 0.0f;
  s.labels.assign(cfg.k, 0);
  s.grounding.assign(cfg.k, {});

  std::uniform_int_distribution<std::size_t> count_dist(1, cfg.max_concepts_per_image);
  std::vector<std::size_t> order(cfg.k);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> positives(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count_dist(rng)));

  std::vector<std::uint32_t> free_patches(cfg.l);
  std::iota(free_patches.begin(), free_patches.end(), 0u);
  std::shuffle(free_patches.begin(), free_patches.end(), rng);
  std::size_t next_free = 0;
  std::uniform_int_distribution<std::size_t> patch_count(1, 3);
  for (std::size_t i = 0; i < positives.size(); ++i) {
    const auto c = positives[i];
    s.labels[c] = 1;
    // Leave at least one free patch for each concept still to place.
    const std::size_t reserve = positives.size() - i - 1;
    const std::size_t n = std::min(patch_count(rng), cfg.l - next_free - reserve);
    for (std::size_t j = 0; j < n; ++j) {
      const auto patch = free_patches[next_free++];
      s.grounding[c].push_back(patch);
      for (std::size_t f = 0; f < cfg.p; ++f) {
        s.grid.values[patch * cfg.p + f] =
            concepts.signatures[c][f] + (cfg.noise_sigma > 0 ? noise(rng) : 0.0f);
      }
    }
    std::sort(s.grounding[c].begin(), s.grounding[c].end());
  }

  std::uniform_int_distribution<std::size_t> sentence_count(1, 4);
  std::uniform_int_distribution<std::size_t> pick_template(0, concepts.templates.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_positive(0, positives.size() - 1);
  const auto n_sent = sentence_count(rng);
  std::vector<std::vector<std::size_t>> mention(n_sent);
  for (std::size_t i = 0; i < positives.size(); ++i) mention[i % n_sent].push_back(positives[i]);
  for (auto& m : mention) {
    if (m.empty()) m.push_back(positives[pick_positive(rng)]);
    std::sort(m.begin(), m.end());
    std::vector<std::string> names;
    for (auto c : m) names.push_back(concepts.names[c]);
    s.sentences.push_back(instantiate(concepts.templates[pick_template(rng)], names));
  }
  return s;
}

json shape_json(std::initializer_list<std::size_t> dims) { return json(std::vector<std::size_t>(dims)); }

void write_split(const std::vector<Sample>& samples, const std::string& name, const GenerateConfig& cfg,
                 const std::filesystem::path& dir, json& files) {
  const auto n = samples.size();
  std::vector<float> patches, labels, grounding(n * cfg.k * cfg.l, 0.0f);
  patches.reserve(n * cfg.l * cfg.p);
  labels.reserve(n * cfg.k);
  json reports = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    patches.insert(patches.end(), s.grid.values.begin(), s.grid.values.end());
    for (auto v : s.labels) labels.push_back(static_cast<float>(v));
    for (std::size_t c = 0; c < cfg.k; ++c) {
      for (auto patch : s.grounding[c]) grounding[(i * cfg.k + c) * cfg.l + patch] = 1.0f;
    }
    reports.push_back({{"id", s.id}, {"sentences", s.sentences}});
  }
  write_f32(dir / (name + "_patches.f32"), patches);
  write_f32(dir / (name + "_labels.f32"), labels);
  write_f32(dir / (name + "_grounding.f32"), grounding);
  // no trailing newline: any truncated document then fails to parse
  write_text(dir / (name + "_reports.json"), reports.dump(1));
  files[name] = {
      {"count", n},
      {"patches", {{"path", name + "_patches.f32"}, {"shape", shape_json({n, cfg.l, cfg.p})}}},
      {"labels", {{"path", name + "_labels.f32"}, {"shape", shape_json({n, cfg.k})}}},
      {"grounding", {{"path", name + "_grounding.f32"}, {"shape", shape_json({n, cfg.k, cfg.l})}}},
      {"reports", {{"path", name + "_reports.json"}}},
  };
}

template <typename V>
V manifest_get(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("manifest.json: missing field '") + key + "'", 0);
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: field '") + key + "': " + e.what(), 0);
  }
}

std::vector<Sample> read_split(const json& entry, const std::string& name, const Dataset& d,
                               const std::filesystem::path& dir) {
  const auto& cfg = d.config;
  const auto n = manifest_get<std::size_t>(entry, "count");
  auto file = [&](const char* key) { return dir / manifest_get<std::string>(entry.at(key), "path"); };
  for (const char* key : {"patches", "labels", "grounding", "reports"}) {
    if (!entry.contains(key)) throw FormatError("manifest.json: split " + name + " lacks " + key, 0);
  }
  auto patches = read_f32(file("patches"), n * cfg.l * cfg.p);
  auto labels = read_f32(file("labels"), n * cfg.k);
  auto grounding = read_f32(file("grounding"), n * cfg.k * cfg.l);
  json reports;
  try {
    reports = json::parse(read_text(file("reports")));
  } catch (const json::parse_error& e) {
    throw FormatError(name + "_reports.json: " + e.what(), e.byte);
  }
  if (!reports.is_array() || reports.size() != n) {
    throw FormatError(name + "_reports.json: expected " + std::to_string(n) + " entries", 0);
  }
  std::vector<Sample> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = samples[i];
    try {
      s.id = reports[i].at("id").get<std::uint64_t>();
      s.sentences = reports[i].at("sentences").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw FormatError(name + "_reports.json: entry " + std::to_string(i) + ": " + e.what(), 0);
    }
    s.grid.rows = d.grid_rows;
    s.grid.cols = d.grid_cols;
    s.grid.features = cfg.p;
    s.grid.values.assign(patches.begin() + static_cast<std::ptrdiff_t>(i * cfg.l * cfg.p),
                         patches.begin() + static_cast<std::ptrdiff_t>((i + 1) * cfg.l * cfg.p));
    s.labels.resize(cfg.k);
    s.grounding.resize(cfg.k);
    for (std::size_t c = 0; c < cfg.k; ++c) {
      s.labels[c] = labels[i * cfg.k + c] != 0.0f ? 1 : 0;
      for (std::size_t patch = 0; patch < cfg.l; ++patch) {
        if (grounding[(i * cfg.k + c) * cfg.l + patch] != 0.0f) {
          s.grounding[c].push_back(static_cast<std::uint32_t>(patch));
        }
      }
    }
  }
  return samples;
}

}  // namespace

Dataset synthesize(const GenerateConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  std::tie(d.grid_rows, d.grid_cols) = grid_shape(cfg.l);
  std::mt19937_64 rng(cfg.seed);
  d.concepts = ConceptVocab::make(cfg.k, cfg.p, rng);
  d.vocab = build_vocab(d.concepts);
  std::uint64_t next_id = 0;
  for (auto [split, n] : {std::pair{&d.train, cfg.n_train}, {&d.val, cfg.n_val}, {&d.test, cfg.n_test}}) {
    split->reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      split->push_back(make_sample(next_id++, cfg, d.grid_rows, d.grid_cols, d.concepts, rng));
    }
  }
  return d;
}

void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  ensure_directory(dir);
  const auto& cfg = d.config;
  std::vector<float> signatures;
  for (const auto& s : d.concepts.signatures) signatures.insert(signatures.end(), s.begin(), s.end());
  write_f32(dir / "concepts.f32", signatures);

  json files;
  write_split(d.train, "train", cfg, dir, files);
  write_split(d.val, "val", cfg, dir, files);
  write_split(d.test, "test", cfg, dir, files);
  files["concepts"] = {{"path", "concepts.f32"}, {"shape", shape_json({cfg.k, cfg.p})}};

  json manifest = {
      {"version", dataset_format_version},
      {"seed", cfg.seed},
      {"counts", {{"train", cfg.n_train}, {"val", cfg.n_val}, {"test", cfg.n_test}}},
      {"K", cfg.k},
      {"L", cfg.l},
      {"P", cfg.p},
      {"M", cfg.m},
      {"grid", {d.grid_rows, d.grid_cols}},
      {"noise_sigma", cfg.noise_sigma},
      {"max_concepts_per_image", cfg.max_concepts_per_image},
      {"concepts", d.concepts.names},
      {"templates", d.concepts.templates},
      {"vocabulary", d.vocab.words()},
      {"files", files},
  };
  write_text(dir / "manifest.json", manifest.dump(2));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw IoError("no dataset at " + dir.string() + " (manifest.json missing)");
  json m;
  try {
    m = json::parse(read_text(manifest_path));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest.json: ") + e.what(), e.byte);
  }
  const auto version = manifest_get<int>(m, "version");
  if (version != dataset_format_version) {
    throw FormatError("manifest.json: unsupported version " + std::to_string(version), 0);
  }
  Dataset d;
  auto& cfg = d.config;
  cfg.seed = manifest_get<std::uint64_t>(m, "seed");
  cfg.k = manifest_get<std::size_t>(m, "K");
  cfg.l = manifest_get<std::size_t>(m, "L");
  cfg.p = manifest_get<std::size_t>(m, "P");
  cfg.m = manifest_get<std::size_t>(m, "M");
  cfg.noise_sigma = manifest_get<double>(m, "noise_sigma");
  cfg.max_concepts_per_image = manifest_get<std::size_t>(m, "max_concepts_per_image");
  auto counts = manifest_get<json>(m, "counts");
  cfg.n_train = manifest_get<std::size_t>(counts, "train");
  cfg.n_val = manifest_get<std::size_t>(counts, "val");
  cfg.n_test = manifest_get<std::size_t>(counts, "test");
  auto grid = manifest_get<std::vector<std::size_t>>(m, "grid");
  if (grid.size() != 2 || grid[0] * grid[1] != cfg.l) throw FormatError("manifest.json: grid does not match L", 0);
  d.grid_rows = grid[0];
  d.grid_cols = grid[1];
  d.concepts.names = manifest_get<std::vector<std::string>>(m, "concepts");
  d.concepts.templates = manifest_get<std::vector<std::string>>(m, "templates");
  if (d.concepts.names.size() != cfg.k) throw FormatError("manifest.json: concept list does not match K", 0);
  auto words = manifest_get<std::vector<std::string>>(m, "vocabulary");
  if (words.size() < 2 || words[0] != "<pad>" || words[1] != "<unk>") {
    throw FormatError("manifest.json: vocabulary must start with <pad>, <unk>", 0);
  }
  d.vocab = Vocabulary(std::vector<std::string>(words.begin() + 2, words.end()));

  const auto files = manifest_get<json>(m, "files");
  auto signatures = read_f32(dir / manifest_get<std::string>(manifest_get<json>(files, "concepts"), "path"), cfg.k * cfg.p);
  for (std::size_t c = 0; c < cfg.k; ++c) {
    d.concepts.signatures.emplace_back(signatures.begin() + static_cast<std::ptrdiff_t>(c * cfg.p),
                                       signatures.begin() + static_cast<std::ptrdiff_t>((c + 1) * cfg.p));
  }
  d.train = read_split(manifest_get<json>(files, "train"), "train", d, dir);
  d.val = read_split(manifest_get<json>(files, "val"), "val", d, dir);
  d.test = read_split(manifest_get<json>(files, "test"), "test", d, dir);
  return d;
}

Dataset generate(const GenerateConfig& cfg, const std::filesystem::path& dir) {
  auto d = synthesize(cfg);
  write_dataset(d, dir);
  return d;
}

}  // namespace simr
