// simr: generate synthetic data, train, evaluate, ablate and export
// attention maps. Settings come from defaults, then --config FILE, then
// command-line flags.

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "simr/error.hpp"
#include "simr/io.hpp"
#include "simr/run.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

// Flags left unset keep whatever the config file or the defaults say.
struct Overrides {
  std::optional<std::string> dataset, out, rewriter_url;
  std::optional<std::size_t> embed_dim, heads, encoder_blocks, ffn_dim;
  std::optional<std::string> head, kv, residual, cross_attention, prompt_align, prompt, direction;
  std::optional<std::string> optimizer;
  std::optional<double> lr;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k, l, p, m, n_train, n_val, n_test, max_concepts;
  std::optional<double> noise_sigma;
};

bool parse_switch(const std::string& v) { return simr::parse_switch_list(v).front(); }

void apply(const Overrides& o, simr::RunConfig& cfg) {
  if (o.dataset) cfg.dataset = *o.dataset;
  if (o.out) cfg.out = *o.out;
  if (o.rewriter_url) cfg.rewriter_url = *o.rewriter_url;
  if (o.embed_dim) cfg.model.embed_dim = *o.embed_dim;
  if (o.heads) cfg.model.heads = *o.heads;
  if (o.encoder_blocks) cfg.model.encoder_blocks = *o.encoder_blocks;
  if (o.ffn_dim) cfg.model.ffn_dim = *o.ffn_dim;
  if (o.head) cfg.model.head = simr::parse_head_kind(*o.head);
  if (o.kv) cfg.model.kv = simr::parse_kv_choice(*o.kv);
  if (o.residual) cfg.model.residual = parse_switch(*o.residual);
  if (o.cross_attention) cfg.model.cross_attention = parse_switch(*o.cross_attention);
  if (o.prompt_align) cfg.prompt_align = parse_switch(*o.prompt_align);
  if (o.prompt) cfg.prompt = simr::parse_prompt_template(*o.prompt);
  if (o.direction) cfg.direction = simr::parse_score_direction(*o.direction);
  if (o.optimizer) cfg.train.optimizer = simr::parse_optimizer(*o.optimizer);
  if (o.lr) cfg.train.lr = *o.lr;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.data.seed = *o.seed;
  }
  if (o.k) cfg.data.k = *o.k;
  if (o.l) cfg.data.l = *o.l;
  if (o.p) cfg.data.p = *o.p;
  if (o.m) cfg.data.m = *o.m;
  if (o.n_train) cfg.data.n_train = *o.n_train;
  if (o.n_val) cfg.data.n_val = *o.n_val;
  if (o.n_test) cfg.data.n_test = *o.n_test;
  if (o.max_concepts) cfg.data.max_concepts_per_image = *o.max_concepts;
  if (o.noise_sigma) cfg.data.noise_sigma = *o.noise_sigma;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--dataset", o.dataset, "Dataset directory");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--seed", o.seed, "Random seed");
}

void add_model(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--embed-dim", o.embed_dim, "Shared feature width D");
  cmd->add_option("--heads", o.heads, "Attention heads");
  cmd->add_option("--encoder-blocks", o.encoder_blocks, "Transformer blocks per encoder");
  cmd->add_option("--ffn-dim", o.ffn_dim, "Feedforward width (0: 2*D)");
  cmd->add_option("--head", o.head, "Similarity head: linear, mlp, cos_proj_proj, cos_proj_orig");
  cmd->add_option("--kv", o.kv, "Cross-attention keys/values: global, local, both");
  cmd->add_option("--residual", o.residual, "Residual connections in the alignment block: on/off");
  cmd->add_option("--cross-attention", o.cross_attention, "Cross-attention alignment: on/off");
}

void add_training(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--prompt-align", o.prompt_align, "Prompt alignment of training reports: on/off");
  cmd->add_option("--optimizer", o.optimizer, "adam or sgd");
  cmd->add_option("--lr", o.lr, "Learning rate");
  cmd->add_option("--epochs", o.epochs, "Training epochs");
  cmd->add_option("--batch-size", o.batch_size, "Mini-batch size (>= 2)");
  cmd->add_option("--rewriter-url", o.rewriter_url, "Prompt rewriter service (default: $SIMR_REWRITER_URL)");
}

void add_scoring(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--prompt", o.prompt, "Inference prompt: P1 or P2");
  cmd->add_option("--direction", o.direction, "Zero-shot score: average, t2i or i2t");
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

// Timestamps live only here so that every other output is reproducible.
void log_run(const std::string& dir, const std::string& command, int code) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream log(std::filesystem::path(dir) / "run.log", std::ios::app);
  if (log) log << timestamp() << ' ' << command << " exit=" << code << '\n';
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const simr::ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const simr::NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const simr::InputError*>(&e) || dynamic_cast<const simr::IoError*>(&e) ||
      dynamic_cast<const simr::FormatError*>(&e) || dynamic_cast<const simr::DimensionError*>(&e) ||
      dynamic_cast<const simr::UndefinedMetric*>(&e)) {
    return kData;
  }
  return kFailure;
}

void print_report(const simr::EvalReport& r) {
  std::cout << "prompt " << r.prompt << (r.aligned ? " (aligned)" : "") << ", direction " << r.direction << ", "
            << r.test_images << " test images\n";
  std::cout << std::fixed << std::setprecision(4);
  std::cout << "mean AUC " << r.mean_auc << " over " << r.auc_classes << " classes, MCC " << r.mean_mcc << ", F1 "
            << r.mean_f1 << ", ACC " << r.mean_acc;
  if (r.mean_pointing) std::cout << ", pointing " << *r.mean_pointing;
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-attention image-text similarity learning on synthetic data"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_file;
  app.add_option("--config", config_file, "JSON run configuration")->check(CLI::ExistingFile);

  Overrides o;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic paired dataset");
  gen->add_option("--out,--dataset", o.dataset, "Dataset directory (created if missing)");
  gen->add_option("--seed", o.seed, "Random seed");
  gen->add_option("--k", o.k, "Number of concepts K");
  gen->add_option("--l", o.l, "Patches per image L");
  gen->add_option("--p", o.p, "Features per patch P");
  gen->add_option("--m", o.m, "Max tokens per sentence M");
  gen->add_option("--n-train", o.n_train, "Training samples");
  gen->add_option("--n-val", o.n_val, "Validation samples");
  gen->add_option("--n-test", o.n_test, "Test samples");
  gen->add_option("--noise-sigma", o.noise_sigma, "Gaussian noise standard deviation");
  gen->add_option("--max-concepts", o.max_concepts, "Max concepts per image");

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, o);
  add_model(train, o);
  add_training(train, o);

  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "Zero-shot evaluation of a checkpoint");
  add_common(eval, o);
  add_scoring(eval, o);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  std::string heads = "linear", kvs = "both", pas = "on", cas = "on", prompts = "P1,P2", seeds;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate a grid of variants");
  add_common(ablate, o);
  add_model(ablate, o);
  add_training(ablate, o);
  ablate->add_option("--direction", o.direction, "Zero-shot score: average, t2i or i2t");
  ablate->add_option("--grid-heads", heads, "Comma list of head kinds")->capture_default_str();
  ablate->add_option("--grid-kv", kvs, "Comma list of kv choices")->capture_default_str();
  ablate->add_option("--grid-pa", pas, "Comma list of prompt-alignment settings (on,off)")->capture_default_str();
  ablate->add_option("--grid-ca", cas, "Comma list of cross-attention settings (on,off)")->capture_default_str();
  ablate->add_option("--grid-prompts", prompts, "Comma list of inference prompts")->capture_default_str();
  ablate->add_option("--grid-seeds", seeds, "Comma list of seeds (default: --seed)");

  std::string concept_name;
  std::vector<std::uint64_t> samples;
  auto* exp = app.add_subcommand("export-attn", "Export attention maps as PGM images");
  add_common(exp, o);
  add_scoring(exp, o);
  exp->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  exp->add_option("--concept", concept_name, "Concept name")->required();
  exp->add_option("--samples", samples, "Sample ids")->required()->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  simr::RunConfig cfg;
  std::string command = app.get_subcommands().front()->get_name();
  int code = kOk;
  try {
    if (!config_file.empty()) cfg.merge_file(config_file);
    apply(o, cfg);

    if (command == "gen-data") {
      auto d = simr::run_gen_data(cfg);
      std::cout << "wrote " << cfg.dataset << ": K=" << d.config.k << " L=" << d.config.l << " (" << d.grid_rows << "x"
                << d.grid_cols << ") P=" << d.config.p << " M=" << d.config.m << ", " << d.train.size() << "/"
                << d.val.size() << "/" << d.test.size() << " train/val/test, vocabulary " << d.vocab.size()
                << ", seed " << d.config.seed << '\n';
      std::cout << "concepts:";
      for (const auto& n : d.concepts.names) std::cout << ' ' << n;
      std::cout << '\n';
    } else if (command == "train") {
      auto run = simr::run_train(cfg);
      const auto& log = run.result.log;
      std::cout << "trained " << log.size() << " iterations; loss " << log.front().loss.total << " -> "
                << log.back().loss.total;
      if (!run.result.val_loss.empty()) {
        std::cout << "; best val loss " << run.result.best_val_loss << " at epoch " << run.result.best_epoch;
      }
      std::cout << "\ncheckpoint " << run.checkpoint.string() << '\n';
    } else if (command == "eval") {
      print_report(simr::run_eval(cfg, checkpoint));
    } else if (command == "ablate") {
      simr::AblationGrid grid;
      grid.heads = simr::parse_head_list(heads);
      grid.kvs = simr::parse_kv_list(kvs);
      grid.prompt_align = simr::parse_switch_list(pas);
      grid.cross_attention = simr::parse_switch_list(cas);
      grid.prompts = simr::parse_prompt_list(prompts);
      grid.seeds = {cfg.train.seed};
      if (!seeds.empty()) {
        grid.seeds.clear();
        std::stringstream in(seeds);
        for (std::string s; std::getline(in, s, ',');) grid.seeds.push_back(std::stoull(s));
      }
      auto rows = simr::run_ablate(cfg, grid);
      std::size_t failed = 0;
      for (const auto& r : rows) failed += !r.ok;
      std::cout << rows.size() << " rows (" << failed << " failed) -> " << cfg.out << "/ablation.csv\n";
    } else if (command == "export-attn") {
      for (const auto& p : simr::run_export_attn(cfg, checkpoint, concept_name, samples)) {
        std::cout << p.string() << '\n';
      }
    }
  } catch (const std::exception& e) {
    code = exit_code_for(e);
    std::cerr << "simr " << command << ": " << e.what() << '\n';
  }
  if (command != "gen-data") log_run(cfg.out, command, code);
  return code;
}
