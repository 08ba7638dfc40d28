#pragma once

// Contrastive training loop: shuffled mini-batches of paired samples, one
// report sentence drawn per sample per iteration, Adam (or SGD) on the
// bidirectional InfoNCE loss.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "simr/loss.hpp"
#include "simr/model.hpp"
#include "simr/optim.hpp"
#include "simr/prompt.hpp"
#include "simr/synth.hpp"

namespace simr {

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 5e-4;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Sentence pool per sample. With prompt alignment the canonical
/// "there is <concept> ." sentences join the original ones (merge, not
/// replace). The rewriter endpoint, when given, is tried first.
std::vector<std::vector<std::string>> sentence_pools(const std::vector<Sample>& samples, const ConceptVocab& concepts,
                                                     bool prompt_align,
                                                     const std::optional<RewriterEndpoint>& rewriter = std::nullopt);

/// Model dimensions that must agree with the dataset (L, P, M, vocabulary).
void fit_model_to_dataset(ModelConfig& cfg, const Dataset& data);

struct IterationLoss {
  std::size_t iter = 0;
  std::size_t epoch = 0;
  LossBreakdown loss;
};

/// Where the loop writes its artifacts. Empty `dir` disables all writing.
struct TrainArtifacts {
  std::filesystem::path dir;
  std::string config_echo;  // one-line JSON embedded in the loss log
};

struct TrainResult {
  std::vector<IterationLoss> log;
  std::vector<double> val_loss;  // mean total loss per epoch, empty without a val split
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
};

/// Trains in place. Writes loss.csv, model.ckpt after every epoch and at the
/// end, and best.ckpt whenever the validation loss improves. A non-finite
/// loss throws NumericError; the checkpoints already on disk are kept.
TrainResult train_model(Model<float>& model, const Dataset& data, const std::vector<std::vector<std::string>>& pools,
                        const TrainConfig& cfg, const TrainArtifacts& artifacts = {});

/// Mean total loss over the split in fixed-order batches using each sample's
/// first sentence.
double evaluate_loss(const Model<float>& model, const Dataset& data, const std::vector<Sample>& split,
                     std::size_t batch_size);

}  // namespace simr
