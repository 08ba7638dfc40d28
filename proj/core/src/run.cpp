#include "simr/run.hpp"

#include <chrono>
#include <sstream>

#include "simr/checkpoint.hpp"
#include "simr/error.hpp"
#include "simr/io.hpp"

namespace simr {

using json = nlohmann::json;

namespace {

template <typename V>
V as(const json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + key + "' has the wrong type: " + j.dump());
  }
}

std::size_t as_size(const json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<long long>() < 0) {
    throw ConfigError("config field '" + key + "' must be a non-negative integer, got " + j.dump());
  }
  return j.get<std::size_t>();
}

template <typename Fn>
void each_field(const json& j, const std::string& section, Fn&& fn) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto path = section.empty() ? key : section + "." + key;
    if (!fn(key, value, path)) throw ConfigError("unknown config field '" + path + "'");
  }
}

std::string one_line(const json& j) { return j.dump(); }

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

json RunConfig::to_json() const {
  return {
      {"dataset", dataset},
      {"out", out},
      {"model",
       {{"embed_dim", model.embed_dim},
        {"heads", model.heads},
        {"encoder_blocks", model.encoder_blocks},
        {"ffn_dim", model.ffn_dim},
        {"head", head_kind_name(model.head)},
        {"kv", kv_choice_name(model.kv)},
        {"residual", model.residual},
        {"cross_attention", model.cross_attention}}},
      {"prompt_align", prompt_align},
      {"prompt", prompt_template_name(prompt)},
      {"direction", score_direction_name(direction)},
      {"train",
       {{"optimizer", optimizer_name(train.optimizer)},
        {"lr", train.lr},
        {"epochs", train.epochs},
        {"batch_size", train.batch_size},
        {"seed", train.seed}}},
      {"rewriter_url", rewriter_url},
      {"data",
       {{"k", data.k},
        {"l", data.l},
        {"p", data.p},
        {"m", data.m},
        {"n_train", data.n_train},
        {"n_val", data.n_val},
        {"n_test", data.n_test},
        {"seed", data.seed},
        {"noise_sigma", data.noise_sigma},
        {"max_concepts_per_image", data.max_concepts_per_image}}},
  };
}

void RunConfig::merge_json(const json& j) {
  each_field(j, "", [&](const std::string& key, const json& v, const std::string& path) {
    if (key == "dataset") {
      dataset = as<std::string>(v, path);
    } else if (key == "out") {
      out = as<std::string>(v, path);
    } else if (key == "prompt_align") {
      prompt_align = as<bool>(v, path);
    } else if (key == "prompt") {
      prompt = parse_prompt_template(as<std::string>(v, path));
    } else if (key == "direction") {
      direction = parse_score_direction(as<std::string>(v, path));
    } else if (key == "rewriter_url") {
      rewriter_url = as<std::string>(v, path);
    } else if (key == "model") {
      each_field(v, path, [&](const std::string& k, const json& x, const std::string& p) {
        if (k == "embed_dim") model.embed_dim = as_size(x, p);
        else if (k == "heads") model.heads = as_size(x, p);
        else if (k == "encoder_blocks") model.encoder_blocks = as_size(x, p);
        else if (k == "ffn_dim") model.ffn_dim = as_size(x, p);
        else if (k == "head") model.head = parse_head_kind(as<std::string>(x, p));
        else if (k == "kv") model.kv = parse_kv_choice(as<std::string>(x, p));
        else if (k == "residual") model.residual = as<bool>(x, p);
        else if (k == "cross_attention") model.cross_attention = as<bool>(x, p);
        else return false;
        return true;
      });
    } else if (key == "train") {
      each_field(v, path, [&](const std::string& k, const json& x, const std::string& p) {
        if (k == "optimizer") train.optimizer = parse_optimizer(as<std::string>(x, p));
        else if (k == "lr") train.lr = as<double>(x, p);
        else if (k == "epochs") train.epochs = as_size(x, p);
        else if (k == "batch_size") train.batch_size = as_size(x, p);
        else if (k == "seed") train.seed = as<std::uint64_t>(x, p);
        else return false;
        return true;
      });
    } else if (key == "data") {
      each_field(v, path, [&](const std::string& k, const json& x, const std::string& p) {
        if (k == "k") data.k = as_size(x, p);
        else if (k == "l") data.l = as_size(x, p);
        else if (k == "p") data.p = as_size(x, p);
        else if (k == "m") data.m = as_size(x, p);
        else if (k == "n_train") data.n_train = as_size(x, p);
        else if (k == "n_val") data.n_val = as_size(x, p);
        else if (k == "n_test") data.n_test = as_size(x, p);
        else if (k == "seed") data.seed = as<std::uint64_t>(x, p);
        else if (k == "noise_sigma") data.noise_sigma = as<double>(x, p);
        else if (k == "max_concepts_per_image") data.max_concepts_per_image = as_size(x, p);
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
  merge_json(j);
}

std::optional<RewriterEndpoint> RunConfig::rewriter() const {
  if (!rewriter_url.empty()) {
    RewriterEndpoint e;
    e.url = rewriter_url;
    return e;
  }
  return RewriterEndpoint::from_env();
}

Dataset run_gen_data(const RunConfig& cfg) { return generate(cfg.data, cfg.dataset); }

TrainRun run_train(const RunConfig& cfg) {
  cfg.train.validate();
  const auto data = load_dataset(cfg.dataset);
  RunConfig effective = cfg;
  fit_model_to_dataset(effective.model, data);
  effective.validate();

  const std::filesystem::path out(cfg.out);
  ensure_directory(out);
  const auto echo = effective.to_json();
  write_text(out / "run_config.json", echo.dump(2));

  Model<float> model(effective.model, cfg.train.seed);
  const auto pools = sentence_pools(data.train, data.concepts, cfg.prompt_align, cfg.rewriter());
  TrainRun run;
  run.result = train_model(model, data, pools, cfg.train, {out, one_line(echo)});
  run.checkpoint = out / "model.ckpt";
  return run;
}

RunConfig load_run_config(const std::filesystem::path& checkpoint) {
  const auto path = checkpoint.parent_path() / "run_config.json";
  if (!std::filesystem::exists(path)) {
    throw IoError("no run_config.json next to " + checkpoint.string() + "; it records the model architecture");
  }
  RunConfig cfg;
  cfg.merge_file(path);
  return cfg;
}

std::unique_ptr<Model<float>> load_model(const std::filesystem::path& checkpoint, const Dataset& data,
                                         RunConfig* trained_with) {
  auto trained = load_run_config(checkpoint);
  fit_model_to_dataset(trained.model, data);
  auto model = std::make_unique<Model<float>>(trained.model, trained.train.seed);
  load_checkpoint(model->params(), checkpoint);
  if (trained_with) *trained_with = trained;
  return model;
}

EvalReport run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  const auto data = load_dataset(cfg.dataset);
  RunConfig trained;
  auto model = load_model(checkpoint, data, &trained);

  json echo = cfg.to_json();
  echo["model"] = trained.to_json()["model"];
  echo["trained_prompt_align"] = trained.prompt_align;
  echo["checkpoint"] = checkpoint.string();

  EvalOptions options;
  options.prompt = cfg.prompt;
  options.direction = cfg.direction;
  options.trained_with_prompt_alignment = trained.prompt_align;
  options.config = echo;
  auto report = evaluate(*model, data, options);

  const std::filesystem::path out(cfg.out);
  ensure_directory(out);
  const auto stem = "eval_" + std::string(prompt_template_name(cfg.prompt)) + "_" +
                    std::string(score_direction_name(cfg.direction));
  write_text(out / (stem + ".json"), report.to_json().dump(2) + "\n");
  write_text(out / (stem + ".csv"), report.to_csv());
  return report;
}

namespace {

template <typename V, typename Parse>
std::vector<V> parse_list(const std::string& list, Parse parse) {
  std::vector<V> out;
  std::stringstream in(list);
  for (std::string item; std::getline(in, item, ',');) {
    const auto start = item.find_first_not_of(' ');
    const auto end = item.find_last_not_of(' ');
    if (start == std::string::npos) continue;
    out.push_back(parse(item.substr(start, end - start + 1)));
  }
  if (out.empty()) throw ConfigError("empty list '" + list + "'");
  return out;
}

}  // namespace

std::vector<HeadKind> parse_head_list(const std::string& list) {
  return parse_list<HeadKind>(list, [](const std::string& s) { return parse_head_kind(s); });
}

std::vector<KvChoice> parse_kv_list(const std::string& list) {
  return parse_list<KvChoice>(list, [](const std::string& s) { return parse_kv_choice(s); });
}

std::vector<bool> parse_switch_list(const std::string& list) {
  return parse_list<bool>(list, [](const std::string& s) {
    if (s == "on" || s == "true" || s == "1") return true;
    if (s == "off" || s == "false" || s == "0") return false;
    throw ConfigError("expected on or off, got '" + s + "'");
  });
}

std::vector<PromptTemplate> parse_prompt_list(const std::string& list) {
  return parse_list<PromptTemplate>(list, [](const std::string& s) { return parse_prompt_template(s); });
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const Dataset& data, const AblationGrid& grid) {
  std::vector<AblationRow> rows;
  for (auto seed : grid.seeds) {
    for (bool ca : grid.cross_attention) {
      for (bool pa : grid.prompt_align) {
        for (auto head : grid.heads) {
          for (auto kv : grid.kvs) {
            AblationRow cell;
            cell.head = head;
            cell.kv = kv;
            cell.prompt_align = pa;
            cell.cross_attention = ca;
            cell.seed = seed;
            std::vector<AblationRow> cell_rows;
            try {
              auto model_cfg = base.model;
              model_cfg.head = head;
              model_cfg.kv = kv;
              model_cfg.cross_attention = ca;
              fit_model_to_dataset(model_cfg, data);
              auto train_cfg = base.train;
              train_cfg.seed = seed;
              Model<float> model(model_cfg, seed);
              const auto start = std::chrono::steady_clock::now();
              auto result = train_model(model, data, sentence_pools(data.train, data.concepts, pa, base.rewriter()),
                                        train_cfg);
              cell.train_seconds =
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
              cell.final_loss = result.log.empty() ? 0.0 : result.log.back().loss.total;
              for (auto prompt : grid.prompts) {
                EvalOptions options;
                options.prompt = prompt;
                options.direction = base.direction;
                options.trained_with_prompt_alignment = pa;
                auto report = evaluate(model, data, options);
                AblationRow row = cell;
                row.prompt = prompt;
                row.ok = true;
                row.auc = report.mean_auc;
                row.mcc = report.mean_mcc;
                row.f1 = report.mean_f1;
                row.acc = report.mean_acc;
                row.pointing = report.mean_pointing;
                cell_rows.push_back(row);
              }
            } catch (const std::exception& e) {
              cell_rows.clear();
              for (auto prompt : grid.prompts) {
                AblationRow row = cell;
                row.prompt = prompt;
                row.error = e.what();
                cell_rows.push_back(row);
              }
            }
            rows.insert(rows.end(), cell_rows.begin(), cell_rows.end());
          }
        }
      }
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const json& config) {
  std::ostringstream out;
  out << "# config: " << config.dump() << '\n';
  out << "head,kv,prompt_align,cross_attention,seed,prompt,status,auc,mcc,f1,acc,pointing,final_loss,error\n";
  out.precision(6);
  for (const auto& r : rows) {
    std::string error = r.error;
    for (auto& ch : error) {
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    }
    out << head_kind_name(r.head) << ',' << kv_choice_name(r.kv) << ',' << (r.prompt_align ? "on" : "off") << ','
        << (r.cross_attention ? "on" : "off") << ',' << r.seed << ',' << prompt_template_name(r.prompt) << ','
        << (r.ok ? "ok" : "error") << ',';
    if (r.ok) {
      out << r.auc << ',' << r.mcc << ',' << r.f1 << ',' << r.acc << ',';
      if (r.pointing) out << *r.pointing;
      out << ',' << r.final_loss;
    } else {
      out << ",,,,,";
    }
    out << ',' << error << '\n';
  }
  return out.str();
}

std::vector<AblationRow> run_ablate(const RunConfig& cfg, const AblationGrid& grid) {
  cfg.train.validate();
  const auto data = load_dataset(cfg.dataset);
  auto rows = run_ablation(cfg, data, grid);
  json echo = cfg.to_json();
  auto names = [](const auto& values, auto name) {
    json a = json::array();
    for (const auto& v : values) a.push_back(name(v));
    return a;
  };
  echo["grid"] = {
      {"heads", names(grid.heads, [](HeadKind h) { return std::string(head_kind_name(h)); })},
      {"kv", names(grid.kvs, [](KvChoice k) { return std::string(kv_choice_name(k)); })},
      {"prompt_align", names(grid.prompt_align, [](bool b) { return b ? "on" : "off"; })},
      {"cross_attention", names(grid.cross_attention, [](bool b) { return b ? "on" : "off"; })},
      {"prompts", names(grid.prompts, [](PromptTemplate p) { return std::string(prompt_template_name(p)); })},
      {"seeds", grid.seeds},
  };
  const std::filesystem::path out(cfg.out);
  ensure_directory(out);
  write_text(out / "ablation.csv", ablation_csv(rows, echo));
  return rows;
}

std::vector<std::filesystem::path> run_export_attn(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                                   const std::string& concept_name,
                                                   const std::vector<std::uint64_t>& sample_ids) {
  const auto data = load_dataset(cfg.dataset);
  auto model = load_model(checkpoint, data);
  if (!model->config().cross_attention || model->config().kv == KvChoice::Global) {
    throw ConfigError("attention export needs local keys (kv=local or kv=both with cross-attention on)");
  }
  const auto c = data.concepts.find(concept_name);
  if (!c) throw ConfigError("unknown concept '" + concept_name + "'");

  std::vector<const Sample*> samples;
  for (auto id : sample_ids) {
    const Sample* found = nullptr;
    for (const auto* split : {&data.train, &data.val, &data.test}) {
      for (const auto& s : *split) {
        if (s.id == id) found = &s;
      }
    }
    if (!found) throw InputError("no sample with id " + std::to_string(id));
    samples.push_back(found);
  }
  std::vector<PatchGrid> images;
  for (const auto* s : samples) images.push_back(s->grid);
  const auto prompts = PromptSet::make(cfg.prompt, data.concepts, data.vocab, data.config.m);
  const auto zs = zero_shot(*model, images, prompts, cfg.direction, true);

  json echo = cfg.to_json();
  echo["checkpoint"] = checkpoint.string();
  const auto dir = std::filesystem::path(cfg.out) / "attention";
  ensure_directory(dir);
  const auto log = dir / "exports.csv";
  const std::string header = "# config: " + one_line(echo) + "\nsample_id,concept,label,score,argmax_patch,hit,path";
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto* s = samples[i];
    const auto map = zs.map(i, *c);
    const auto path = dir / (concept_name + "_" + std::to_string(s->id) + ".pgm");
    export_attention_map(map, data.grid_rows, data.grid_cols, path, 16,
                         "sample " + std::to_string(s->id) + " concept " + concept_name);
    const bool positive = s->labels[*c] != 0;
    const auto best = pointing_argmax(map);
    std::ostringstream row;
    row.precision(6);
    row << s->id << ',' << concept_name << ',' << (positive ? 1 : 0) << ',' << zs.score(i, *c) << ',' << best << ','
        << (positive ? (pointing_hit(map, s->grounding[*c]) ? "1" : "0") : "") << ',' << path.filename().string();
    append_csv_row(log, header, row.str());
    written.push_back(path);
  }
  return written;
}

}  // namespace simr
