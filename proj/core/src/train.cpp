#include "simr/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "simr/checkpoint.hpp"
#include "simr/error.hpp"
#include "simr/io.hpp"

namespace simr {

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size < 2) {
    throw ConfigError("batch_size must be >= 2: InfoNCE needs at least one in-batch negative, got " +
                      std::to_string(batch_size));
  }
}

std::vector<std::vector<std::string>> sentence_pools(const std::vector<Sample>& samples, const ConceptVocab& concepts,
                                                     bool prompt_align, const std::optional<RewriterEndpoint>& rewriter) {
  std::vector<std::vector<std::string>> pools;
  pools.reserve(samples.size());
  for (const auto& s : samples) {
    if (!prompt_align) {
      pools.push_back(s.sentences);
    } else if (rewriter) {
      pools.push_back(remote_rewrite(s.sentences, concepts, rewriter).sentences);
    } else {
      pools.push_back(simr::prompt_align(s.sentences, concepts));
    }
  }
  return pools;
}

void fit_model_to_dataset(ModelConfig& cfg, const Dataset& data) {
  cfg.patch_count = data.config.l;
  cfg.patch_features = data.config.p;
  cfg.max_tokens = data.config.m;
  cfg.vocab_size = data.vocab.size();
}

namespace {

LossTerms<float> batch_loss(ParamBinder<float>& bind, const Model<float>& model, std::span<const PatchGrid> images,
                            std::span<const TokenSeq> texts) {
  auto f = model.encode(bind, images, texts);
  auto sim = model.similarity(bind, f);
  return total_loss(sim.s_t2i, sim.s_i2t);
}

bool finite(const LossBreakdown& b) {
  return std::isfinite(b.l_t2i) && std::isfinite(b.l_i2t) && std::isfinite(b.total);
}

bool params_finite(const ParamStore<float>& params) {
  for (const auto& p : params) {
    if (!p.tensor.all_finite()) return false;
  }
  return true;
}

}  // namespace

double evaluate_loss(const Model<float>& model, const Dataset& data, const std::vector<Sample>& split,
                     std::size_t batch_size) {
  double total = 0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start + 2 <= split.size(); start += batch_size) {
    const auto end = std::min(split.size(), start + batch_size);
    if (end - start < 2) break;
    std::vector<PatchGrid> images;
    std::vector<TokenSeq> texts;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(split[i].grid);
      texts.push_back(data.vocab.encode(split[i].sentences.front(), data.config.m));
    }
    Graph<float> g;
    ParamBinder<float> bind(g);
    total += batch_loss(bind, model, images, texts).breakdown().total;
    ++batches;
  }
  return batches ? total / static_cast<double>(batches) : 0.0;
}

TrainResult train_model(Model<float>& model, const Dataset& data, const std::vector<std::vector<std::string>>& pools,
                        const TrainConfig& cfg, const TrainArtifacts& artifacts) {
  cfg.validate();
  const auto& train = data.train;
  if (pools.size() != train.size()) throw ContractError("train_model: one sentence pool per training sample required");
  if (train.size() < 2) throw ConfigError("training split needs at least 2 samples");

  std::vector<std::vector<TokenSeq>> tokens(pools.size());
  for (std::size_t i = 0; i < pools.size(); ++i) {
    if (pools[i].empty()) throw InputError("sample " + std::to_string(train[i].id) + " has no sentences");
    for (const auto& s : pools[i]) tokens[i].push_back(data.vocab.encode(s, data.config.m));
  }

  const bool writing = !artifacts.dir.empty();
  std::ofstream log_file;
  if (writing) {
    ensure_directory(artifacts.dir);
    log_file.open(artifacts.dir / "loss.csv", std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + (artifacts.dir / "loss.csv").string());
    if (!artifacts.config_echo.empty()) log_file << "# config: " << artifacts.config_echo << '\n';
    log_file << "iter,l_t2i,l_i2t,total\n";
  }

  auto optimizer = make_optimizer<float>(cfg.optimizer, static_cast<float>(cfg.lr));
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t iter = 0;
  model.params().zero_grad();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;  // a lone leftover sample has no negatives
      std::vector<PatchGrid> images;
      std::vector<TokenSeq> texts;
      for (std::size_t j = start; j < end; ++j) {
        const auto idx = order[j];
        images.push_back(train[idx].grid);
        std::uniform_int_distribution<std::size_t> pick(0, tokens[idx].size() - 1);
        texts.push_back(tokens[idx][pick(rng)]);
      }
      Graph<float> g;
      ParamBinder<float> bind(g);
      auto terms = batch_loss(bind, model, images, texts);
      const auto b = terms.breakdown();
      if (writing) log_file << iter << ',' << b.l_t2i << ',' << b.l_i2t << ',' << b.total << '\n';
      if (!finite(b)) {
        if (writing) log_file.flush();
        std::ostringstream msg;
        msg << "non-finite loss at iteration " << iter << " (epoch " << epoch << "): l_t2i=" << b.l_t2i
            << " l_i2t=" << b.l_i2t << "; last good checkpoint kept";
        throw NumericError(msg.str());
      }
      g.backward(terms.total);
      optimizer->step(model.params());
      result.log.push_back({iter, epoch, b});
      ++iter;
    }
    if (!params_finite(model.params())) {
      throw NumericError("parameters became non-finite during epoch " + std::to_string(epoch) +
                         "; last good checkpoint kept");
    }
    if (writing) {
      log_file.flush();
      save_checkpoint(model.params(), artifacts.dir / "model.ckpt");
    }
    if (data.val.size() >= 2) {
      const double v = evaluate_loss(model, data, data.val, cfg.batch_size);
      result.val_loss.push_back(v);
      if (v < result.best_val_loss) {
        result.best_val_loss = v;
        result.best_epoch = epoch;
        if (writing) save_checkpoint(model.params(), artifacts.dir / "best.ckpt");
      }
    }
  }
  return result;
}

}  // namespace simr
