#include "simr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "simr/error.hpp"
#include "simr/io.hpp"

namespace simr {

PromptTemplate parse_prompt_template(std::string_view name) {
  if (name == "P1" || name == "p1") return PromptTemplate::P1;
  if (name == "P2" || name == "p2") return PromptTemplate::P2;
  throw ConfigError("unknown prompt template '" + std::string(name) + "' (expected P1 or P2)");
}

std::string_view prompt_template_name(PromptTemplate p) { return p == PromptTemplate::P1 ? "P1" : "P2"; }

std::string_view prompt_template_text(PromptTemplate p) { return p == PromptTemplate::P1 ? prompt_p1 : prompt_p2; }

ScoreDirection parse_score_direction(std::string_view name) {
  if (name == "average" || name == "avg") return ScoreDirection::Average;
  if (name == "t2i") return ScoreDirection::T2I;
  if (name == "i2t") return ScoreDirection::I2T;
  throw ConfigError("unknown score direction '" + std::string(name) + "' (expected average, t2i or i2t)");
}

std::string_view score_direction_name(ScoreDirection d) {
  switch (d) {
    case ScoreDirection::Average: return "average";
    case ScoreDirection::T2I: return "t2i";
    case ScoreDirection::I2T: return "i2t";
  }
  return "average";
}

PromptSet PromptSet::make(PromptTemplate id, const ConceptVocab& concepts, const Vocabulary& vocab,
                          std::size_t max_tokens) {
  PromptSet set;
  set.id = id;
  for (const auto& name : concepts.names) {
    if (!vocab.contains(name)) throw ConfigError("concept '" + name + "' is not in the vocabulary");
    auto sentence = instantiate(prompt_template_text(id), {name});
    set.tokens.push_back(vocab.encode(sentence, max_tokens));
    set.sentences.push_back(std::move(sentence));
  }
  return set;
}

std::vector<double> ZeroShotOutput::column(std::size_t cls) const {
  std::vector<double> col(images);
  for (std::size_t i = 0; i < images; ++i) col[i] = score(i, cls);
  return col;
}

ZeroShotOutput zero_shot(const Model<float>& model, std::span<const PatchGrid> images, const PromptSet& prompts,
                         ScoreDirection direction, bool keep_maps, std::size_t batch) {
  if (prompts.tokens.empty()) throw ConfigError("zero_shot: empty prompt set");
  if (batch == 0) throw ConfigError("zero_shot: batch must be positive");
  ZeroShotOutput out;
  out.images = images.size();
  out.concepts = prompts.tokens.size();
  out.scores.resize(out.images * out.concepts);
  const bool maps = keep_maps && model.config().cross_attention && model.config().kv != KvChoice::Global;
  if (maps) {
    out.map_size = model.config().patch_count;
    out.maps.resize(out.images * out.concepts * out.map_size);
  }
  const auto k = out.concepts;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const auto n = std::min(batch, images.size() - start);
    Graph<float> g;
    ParamBinder<float> bind(g);
    auto f = model.encode(bind, images.subspan(start, n), prompts.tokens);
    auto sim = model.similarity(bind, f);
    const auto& st = sim.s_t2i.value();  // (K, n)
    const auto& si = sim.s_i2t.value();  // (n, K)
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < k; ++d) {
        const double a = st.data[d * n + i], b = si.data[i * k + d];
        double s = 0.5 * (a + b);
        if (direction == ScoreDirection::T2I) s = a;
        if (direction == ScoreDirection::I2T) s = b;
        out.scores[(start + i) * k + d] = s;
      }
    }
    if (maps) {
      const auto& attn = sim.attn_t2i;  // (K, n, H, keys)
      const auto heads = attn.shape[2], keys = attn.shape[3];
      for (std::size_t d = 0; d < k; ++d) {
        for (std::size_t i = 0; i < n; ++i) {
          double* dst = out.maps.data() + ((start + i) * k + d) * out.map_size;
          for (std::size_t h = 0; h < heads; ++h) {
            const float* src = attn.data.data() + ((d * n + i) * heads + h) * keys;
            for (std::size_t j = 0; j < out.map_size; ++j) dst[j] += src[j];
          }
          for (std::size_t j = 0; j < out.map_size; ++j) dst[j] /= static_cast<double>(heads);
        }
      }
    }
  }
  return out;
}

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ContractError("auc: scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Mann-Whitney U from average ranks of tied groups.
  double rank_sum = 0;
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[idx[t]]) {
        rank_sum += avg_rank;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) throw UndefinedMetric("auc: labels contain a single class");
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2) / (p * n);
}

Confusion confusion_at(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold) {
  if (scores.size() != labels.size()) throw ContractError("confusion: scores and labels differ in length");
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i]) {
      pred ? ++c.tp : ++c.fn;
    } else {
      pred ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

ThresholdMetrics metrics_from(const Confusion& c) {
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn),
               tn = static_cast<double>(c.tn);
  ThresholdMetrics m;
  const double total = tp + fp + fn + tn;
  m.acc = total > 0 ? (tp + tn) / total : 0.0;
  m.f1 = (2 * tp + fp + fn) > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  m.mcc = denom > 0 ? (tp * tn - fp * fn) / std::sqrt(denom) : 0.0;
  return m;
}

ThresholdMetrics thresholded_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                     double threshold) {
  if (!std::isfinite(threshold)) throw ContractError("thresholded_metrics: threshold must be finite");
  return metrics_from(confusion_at(scores, labels, threshold));
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ThresholdChoice select_threshold(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ContractError("select_threshold: scores and labels differ in length");
  ThresholdChoice choice;
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  std::vector<double> unique(scores.begin(), scores.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  if (positives == 0 || positives == labels.size() || unique.size() < 2) {
    choice.fallback = true;
    choice.threshold = median({scores.begin(), scores.end()});
    choice.val_mcc = thresholded_metrics(scores, labels, choice.threshold).mcc;
    return choice;
  }
  // Sweep midpoints in ascending order, updating the confusion incrementally.
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  Confusion c{positives, labels.size() - positives, 0, 0};  // everything predicted positive
  std::size_t cursor = 0;
  bool first = true;
  for (std::size_t u = 0; u + 1 < unique.size(); ++u) {
    while (cursor < idx.size() && scores[idx[cursor]] <= unique[u]) {
      if (labels[idx[cursor]]) {
        --c.tp;
        ++c.fn;
      } else {
        --c.fp;
        ++c.tn;
      }
      ++cursor;
    }
    const double mcc = metrics_from(c).mcc;
    if (first || mcc > choice.val_mcc) {
      choice.val_mcc = mcc;
      choice.threshold = 0.5 * (unique[u] + unique[u + 1]);
      first = false;
    }
  }
  return choice;
}

std::size_t pointing_argmax(std::span<const double> map) {
  if (map.empty()) throw ContractError("pointing game: empty attention map");
  return static_cast<std::size_t>(std::max_element(map.begin(), map.end()) - map.begin());
}

bool pointing_hit(std::span<const double> map, std::span<const std::uint32_t> grounding) {
  const auto best = pointing_argmax(map);
  return std::find(grounding.begin(), grounding.end(), best) != grounding.end();
}

EvalReport evaluate(const Model<float>& model, const Dataset& data, const EvalOptions& options) {
  if (data.test.empty()) throw ConfigError("evaluate: test split is empty");
  const auto prompts = PromptSet::make(options.prompt, data.concepts, data.vocab, data.config.m);
  auto grids = [](const std::vector<Sample>& split) {
    std::vector<PatchGrid> g;
    for (const auto& s : split) g.push_back(s.grid);
    return g;
  };
  auto labels_of = [](const std::vector<Sample>& split, std::size_t c) {
    std::vector<std::uint8_t> l;
    for (const auto& s : split) l.push_back(s.labels[c]);
    return l;
  };

  const auto val_images = grids(data.val);
  const auto test_images = grids(data.test);
  std::optional<ZeroShotOutput> val;
  if (!val_images.empty()) val = zero_shot(model, val_images, prompts, options.direction, false);
  const auto test = zero_shot(model, test_images, prompts, options.direction, true);

  EvalReport r;
  r.prompt = prompt_template_name(options.prompt);
  r.direction = score_direction_name(options.direction);
  r.aligned = options.trained_with_prompt_alignment && options.prompt == PromptTemplate::P1;
  r.test_images = test_images.size();
  r.config = options.config;
  double pointing_sum = 0;
  for (std::size_t c = 0; c < data.concepts.size(); ++c) {
    ClassReport cr;
    cr.name = data.concepts.names[c];
    const auto scores = test.column(c);
    const auto labels = labels_of(data.test, c);
    cr.positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    try {
      cr.auc = auc(scores, labels);
      r.mean_auc += *cr.auc;
      ++r.auc_classes;
    } catch (const UndefinedMetric&) {
    }
    if (val) {
      cr.threshold = select_threshold(val->column(c), labels_of(data.val, c));
    } else {
      cr.threshold = {median(scores), 0.0, true};
    }
    const auto m = thresholded_metrics(scores, labels, cr.threshold.threshold);
    cr.mcc = m.mcc;
    cr.f1 = m.f1;
    cr.acc = m.acc;
    r.mean_mcc += m.mcc;
    r.mean_f1 += m.f1;
    r.mean_acc += m.acc;
    if (!test.maps.empty() && cr.positives > 0) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < data.test.size(); ++i) {
        if (data.test[i].labels[c]) hits += pointing_hit(test.map(i, c), data.test[i].grounding[c]);
      }
      cr.pointing = static_cast<double>(hits) / static_cast<double>(cr.positives);
      cr.pointing_count = cr.positives;
      pointing_sum += *cr.pointing;
      ++r.pointing_classes;
    }
    r.classes.push_back(std::move(cr));
  }
  const double k = static_cast<double>(data.concepts.size());
  if (r.auc_classes) r.mean_auc /= static_cast<double>(r.auc_classes);
  r.mean_mcc /= k;
  r.mean_f1 /= k;
  r.mean_acc /= k;
  if (r.pointing_classes) r.mean_pointing = pointing_sum / static_cast<double>(r.pointing_classes);
  return r;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json classes_json = nlohmann::json::array();
  for (const auto& c : classes) {
    classes_json.push_back({
        {"name", c.name},
        {"auc", optional_json(c.auc)},
        {"mcc", c.mcc},
        {"f1", c.f1},
        {"acc", c.acc},
        {"threshold", c.threshold.threshold},
        {"threshold_fallback", c.threshold.fallback},
        {"val_mcc", c.threshold.val_mcc},
        {"positives", c.positives},
        {"pointing", optional_json(c.pointing)},
        {"pointing_count", c.pointing_count},
    });
  }
  return {
      {"prompt", prompt},
      {"direction", direction},
      {"aligned", aligned},
      {"test_images", test_images},
      {"mean", {{"auc", mean_auc}, {"auc_classes", auc_classes}, {"mcc", mean_mcc}, {"f1", mean_f1},
                {"acc", mean_acc}, {"pointing", optional_json(mean_pointing)}, {"pointing_classes", pointing_classes}}},
      {"classes", classes_json},
      {"config", config},
  };
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "# config: " << config.dump() << '\n';
  out << "class,auc,mcc,f1,acc,threshold,threshold_fallback,positives,pointing\n";
  for (const auto& c : classes) {
    out << c.name << ',' << fmt(c.auc) << ',' << fmt(c.mcc) << ',' << fmt(c.f1) << ',' << fmt(c.acc) << ','
        << fmt(c.threshold.threshold) << ',' << (c.threshold.fallback ? 1 : 0) << ',' << c.positives << ','
        << fmt(c.pointing) << '\n';
  }
  out << "mean," << fmt(mean_auc) << ',' << fmt(mean_mcc) << ',' << fmt(mean_f1) << ',' << fmt(mean_acc) << ",,,,"
      << fmt(mean_pointing) << '\n';
  return out.str();
}

std::vector<std::uint8_t> render_attention(std::span<const double> map, std::size_t rows, std::size_t cols,
                                           std::size_t scale, const std::string& comment) {
  if (rows * cols != map.size() || rows == 0 || cols == 0) {
    throw DimensionError("render_attention: map of " + std::to_string(map.size()) + " values does not fit a " +
                         std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  if (scale == 0) throw ConfigError("render_attention: scale must be positive");
  const auto h = rows * scale, w = cols * scale;
  std::vector<double> up(h * w);
  auto source = [&](std::size_t dst, std::size_t n, std::size_t& lo, std::size_t& hi, double& frac) {
    double s = (static_cast<double>(dst) + 0.5) / static_cast<double>(scale) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, n - 1);
    frac = s - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < h; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, rows, y0, y1, fy);
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, cols, x0, x1, fx);
      const double top = map[y0 * cols + x0] * (1 - fx) + map[y0 * cols + x1] * fx;
      const double bottom = map[y1 * cols + x0] * (1 - fx) + map[y1 * cols + x1] * fx;
      up[y * w + x] = top * (1 - fy) + bottom * fy;
    }
  }
  const auto [lo_it, hi_it] = std::minmax_element(up.begin(), up.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;

  std::string header = "P5\n";
  if (!comment.empty()) header += "# " + comment + "\n";
  header += std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> pgm(header.begin(), header.end());
  pgm.reserve(header.size() + up.size());
  for (double v : up) {
    pgm.push_back(range > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * (v - lo) / range)) : 128);
  }
  return pgm;
}

void export_attention_map(std::span<const double> map, std::size_t rows, std::size_t cols,
                          const std::filesystem::path& path, std::size_t scale, const std::string& comment) {
  const auto pgm = render_attention(map, rows, cols, scale, comment);
  write_file(path, std::span<const char>(reinterpret_cast<const char*>(pgm.data()), pgm.size()));
}

void append_csv_row(const std::filesystem::path& path, const std::string& header, const std::string& row) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  if (fresh) out << header << '\n';
  out << row << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace simr
