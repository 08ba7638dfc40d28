#pragma once

// Synthetic paired image/report data with known concepts and grounding.
//
// Each image is an L x P patch grid. A positive concept implants its
// signature vector (plus gaussian noise) into 1-3 patches; every other patch
// is pure noise. The report mentions each positive concept in at least one
// sentence built from a phrasing template, and never mentions a negative one.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "simr/encoders.hpp"

namespace simr {

/// Splits on ASCII whitespace.
std::vector<std::string> split_words(std::string_view text);

/// Closed whitespace vocabulary. Id 0 is padding, id 1 the unknown token.
class Vocabulary {
 public:
  static constexpr std::uint32_t pad_id = 0;
  static constexpr std::uint32_t unk_id = 1;

  Vocabulary() = default;
  /// `words` excludes the two reserved entries; duplicates are dropped.
  explicit Vocabulary(const std::vector<std::string>& words);

  std::uint32_t id(std::string_view word) const;
  bool contains(std::string_view word) const;
  std::size_t size() const noexcept { return words_.size(); }
  /// Every entry including "<pad>" and "<unk>", indexed by id.
  const std::vector<std::string>& words() const noexcept { return words_; }

  /// Tokenizes and pads/truncates to `max_tokens`.
  TokenSeq encode(std::string_view sentence, std::size_t max_tokens) const;

 private:
  std::vector<std::string> words_;
};

struct ConceptVocab {
  std::vector<std::string> names;
  std::vector<std::vector<float>> signatures;  // K x P
  std::vector<std::string> templates;          // "{}" marks the concept slot

  /// Number of distinct concept names available.
  static std::size_t capacity();
  /// K concepts with random signatures whose pairwise angle exceeds 15
  /// degrees. Throws ConfigError when K is outside [2, capacity()].
  static ConceptVocab make(std::size_t k, std::size_t p, std::mt19937_64& rng);

  std::size_t size() const noexcept { return names.size(); }
  std::optional<std::size_t> find(std::string_view name) const;
  /// Concepts whose name occurs as a token in `sentence`, in vocab order.
  std::vector<std::size_t> mentioned(std::string_view sentence) const;
};

/// Canonical prompt sentence, also appended by prompt alignment.
inline constexpr std::string_view prompt_p1 = "there is {} .";
/// Alternative prompt that never appears in generated reports.
inline constexpr std::string_view prompt_p2 = "a disease of {}";

/// Fills a template, joining several names with "and".
std::string instantiate(std::string_view tmpl, const std::vector<std::string>& names);

struct Sample {
  std::uint64_t id = 0;
  PatchGrid grid;
  std::vector<std::string> sentences;
  std::vector<std::uint8_t> labels;                  // K
  std::vector<std::vector<std::uint32_t>> grounding;  // per concept, patch indices (empty when negative)
};

struct GenerateConfig {
  std::size_t k = 8;
  std::size_t l = 16;
  std::size_t p = 16;
  std::size_t m = 24;  // max tokens per sentence
  std::size_t n_train = 2000;
  std::size_t n_val = 300;
  std::size_t n_test = 500;
  std::uint64_t seed = 7;
  double noise_sigma = 0.3;
  std::size_t max_concepts_per_image = 3;

  void validate() const;
};

struct Dataset {
  GenerateConfig config;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  ConceptVocab concepts;
  Vocabulary vocab;
  std::vector<Sample> train, val, test;

  const std::vector<Sample>& split(std::string_view name) const;
};

/// Near-square factorization rows x cols = l with rows <= cols.
std::pair<std::size_t, std::size_t> grid_shape(std::size_t l);

/// Deterministic in-memory generation.
Dataset synthesize(const GenerateConfig& cfg);

inline constexpr int dataset_format_version = 1;

/// Directory layout: manifest.json, concepts.f32, and per split
/// <split>_patches.f32 (n,L,P), <split>_labels.f32 (n,K),
/// <split>_grounding.f32 (n,K,L) and <split>_reports.json.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Throws IoError for missing files and FormatError for malformed ones.
Dataset load_dataset(const std::filesystem::path& dir);

/// synthesize + write_dataset.
Dataset generate(const GenerateConfig& cfg, const std::filesystem::path& dir);

}  // namespace simr
