#pragma once

// Reproducible runs: one JSON run configuration drives data generation,
// training, evaluation, ablation grids and attention exports. Every output
// file embeds the configuration that produced it.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "simr/eval.hpp"
#include "simr/train.hpp"

namespace simr {

struct RunConfig {
  std::string dataset = "data";
  std::string out = "runs/default";
  ModelConfig model;  // L, P, M and vocabulary size always come from the dataset
  bool prompt_align = true;
  PromptTemplate prompt = PromptTemplate::P1;
  ScoreDirection direction = ScoreDirection::Average;
  TrainConfig train;
  std::string rewriter_url;  // empty: SIMR_REWRITER_URL, else rule-based
  GenerateConfig data;

  void validate() const;
  nlohmann::json to_json() const;
  /// Overrides the fields present in `j`. Unknown keys and badly typed
  /// values throw ConfigError.
  void merge_json(const nlohmann::json& j);
  /// Parses a JSON config file and merges it.
  void merge_file(const std::filesystem::path& path);

  std::optional<RewriterEndpoint> rewriter() const;
};

/// Writes a dataset per `cfg.data` into `cfg.dataset`.
Dataset run_gen_data(const RunConfig& cfg);

struct TrainRun {
  TrainResult result;
  std::filesystem::path checkpoint;
};

/// Trains on `cfg.dataset`; writes loss.csv, model.ckpt, best.ckpt and
/// run_config.json into `cfg.out`.
TrainRun run_train(const RunConfig& cfg);

/// Model architecture recorded next to a checkpoint by run_train.
RunConfig load_run_config(const std::filesystem::path& checkpoint);

/// Restores a trained model. The architecture comes from the
/// run_config.json beside `checkpoint`.
std::unique_ptr<Model<float>> load_model(const std::filesystem::path& checkpoint, const Dataset& data,
                                         RunConfig* trained_with = nullptr);

/// Evaluates `checkpoint` with the prompt and direction of `cfg`; writes
/// eval_<prompt>_<direction>.json and .csv into `cfg.out`.
EvalReport run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint);

struct AblationGrid {
  std::vector<HeadKind> heads{HeadKind::Linear};
  std::vector<KvChoice> kvs{KvChoice::Both};
  std::vector<bool> prompt_align{true};
  std::vector<bool> cross_attention{true};
  std::vector<PromptTemplate> prompts{PromptTemplate::P1, PromptTemplate::P2};
  std::vector<std::uint64_t> seeds{7};
};

struct AblationRow {
  HeadKind head = HeadKind::Linear;
  KvChoice kv = KvChoice::Both;
  bool prompt_align = true;
  bool cross_attention = true;
  std::uint64_t seed = 0;
  PromptTemplate prompt = PromptTemplate::P1;
  bool ok = false;
  std::string error;
  double auc = 0, mcc = 0, f1 = 0, acc = 0;
  std::optional<double> pointing;
  double final_loss = 0;
  double train_seconds = 0;
};

/// Parses comma-separated axis values ("linear,mlp", "on,off", "P1,P2").
std::vector<HeadKind> parse_head_list(const std::string& list);
std::vector<KvChoice> parse_kv_list(const std::string& list);
std::vector<bool> parse_switch_list(const std::string& list);
std::vector<PromptTemplate> parse_prompt_list(const std::string& list);

/// Trains and evaluates every cell of the grid on one dataset. A failing
/// cell becomes a row with ok=false; the rest still run. Each cell yields
/// one row per evaluated prompt.
std::vector<AblationRow> run_ablation(const RunConfig& base, const Dataset& data, const AblationGrid& grid);

/// CSV with a leading "# config:" line. Training time is left out so that
/// repeated runs produce identical files.
std::string ablation_csv(const std::vector<AblationRow>& rows, const nlohmann::json& config);

/// Loads the dataset, runs the grid and writes <cfg.out>/ablation.csv.
std::vector<AblationRow> run_ablate(const RunConfig& cfg, const AblationGrid& grid);

/// Writes one PGM per sample id to <cfg.out>/attention/ and appends a row
/// per export to <cfg.out>/attention/exports.csv. Returns the PGM paths.
std::vector<std::filesystem::path> run_export_attn(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                                   const std::string& concept_name,
                                                   const std::vector<std::uint64_t>& sample_ids);

}  // namespace simr
