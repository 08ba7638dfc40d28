#pragma once

// Zero-shot classification, attention grounding and classification metrics.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "simr/model.hpp"
#include "simr/synth.hpp"

namespace simr {

enum class PromptTemplate { P1, P2 };
enum class ScoreDirection { Average, T2I, I2T };

PromptTemplate parse_prompt_template(std::string_view name);
std::string_view prompt_template_name(PromptTemplate p);
std::string_view prompt_template_text(PromptTemplate p);
ScoreDirection parse_score_direction(std::string_view name);
std::string_view score_direction_name(ScoreDirection d);

/// One prompt per concept, in concept order.
struct PromptSet {
  PromptTemplate id = PromptTemplate::P1;
  std::vector<std::string> sentences;
  std::vector<TokenSeq> tokens;

  /// Throws ConfigError when a concept name is missing from `vocab`.
  static PromptSet make(PromptTemplate id, const ConceptVocab& concepts, const Vocabulary& vocab,
                        std::size_t max_tokens);
};

struct ZeroShotOutput {
  std::size_t images = 0;
  std::size_t concepts = 0;
  std::vector<double> scores;  // (images, concepts)
  /// Head-averaged attention of prompt d over image i's local patches,
  /// (images, concepts, L). Empty when kv=global or not requested.
  std::vector<double> maps;
  std::size_t map_size = 0;

  double score(std::size_t image, std::size_t cls) const { return scores[image * concepts + cls]; }
  std::span<const double> map(std::size_t image, std::size_t cls) const {
    return {maps.data() + (image * concepts + cls) * map_size, map_size};
  }
  std::vector<double> column(std::size_t cls) const;
};

/// score(i, d) = (S_t2i[d][i] + S_i2t[i][d]) / 2 for the average direction,
/// or one of the two terms. Images are processed in chunks of `batch`.
ZeroShotOutput zero_shot(const Model<float>& model, std::span<const PatchGrid> images, const PromptSet& prompts,
                         ScoreDirection direction, bool keep_maps = true, std::size_t batch = 64);

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Throws UndefinedMetric unless both classes occur.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct ThresholdMetrics {
  double mcc = 0, f1 = 0, acc = 0;
};

/// Predicts positive when score >= threshold.
Confusion confusion_at(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold);
/// MCC is 0 when its denominator vanishes; F1 is 0 when there are no
/// positives predicted or present.
ThresholdMetrics metrics_from(const Confusion& c);
ThresholdMetrics thresholded_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                     double threshold);

struct ThresholdChoice {
  double threshold = 0;
  double val_mcc = 0;
  bool fallback = false;  // single-class or constant column: median score used
};

/// Scans midpoints of consecutive sorted unique scores and keeps the one
/// with the highest MCC, the lowest threshold winning ties.
ThresholdChoice select_threshold(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Index of the largest value, lowest index on ties.
std::size_t pointing_argmax(std::span<const double> map);
bool pointing_hit(std::span<const double> map, std::span<const std::uint32_t> grounding);

struct ClassReport {
  std::string name;
  std::optional<double> auc;
  double mcc = 0, f1 = 0, acc = 0;
  ThresholdChoice threshold;
  std::size_t positives = 0;
  std::optional<double> pointing;  // hit rate over positives
  std::size_t pointing_count = 0;
};

struct EvalReport {
  std::string prompt;
  std::string direction;
  bool aligned = false;  // prompt matches the template used by prompt alignment in training
  std::vector<ClassReport> classes;
  double mean_auc = 0;
  std::size_t auc_classes = 0;
  double mean_mcc = 0, mean_f1 = 0, mean_acc = 0;
  std::optional<double> mean_pointing;
  std::size_t pointing_classes = 0;
  std::size_t test_images = 0;
  nlohmann::json config;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

struct EvalOptions {
  PromptTemplate prompt = PromptTemplate::P1;
  ScoreDirection direction = ScoreDirection::Average;
  bool trained_with_prompt_alignment = true;
  nlohmann::json config;  // echoed into the report
};

/// Thresholds from the val split, metrics and pointing game on the test split.
EvalReport evaluate(const Model<float>& model, const Dataset& data, const EvalOptions& options);

/// Head-averaged attention map as a binary PGM: bilinear upsampling by
/// `scale`, min-max normalized to 0-255 (uniform input gives 128). A
/// non-empty `comment` (single line) goes into the header.
std::vector<std::uint8_t> render_attention(std::span<const double> map, std::size_t rows, std::size_t cols,
                                           std::size_t scale = 16, const std::string& comment = {});
void export_attention_map(std::span<const double> map, std::size_t rows, std::size_t cols,
                          const std::filesystem::path& path, std::size_t scale = 16, const std::string& comment = {});
/// Appends one CSV row, writing `header` first when the file is new.
void append_csv_row(const std::filesystem::path& path, const std::string& header, const std::string& row);

}  // namespace simr
