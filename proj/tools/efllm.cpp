// efllm: command-line front end. Every subcommand resolves its configuration
// (defaults < --config file < flags), writes its artifacts into a staging
// directory and moves them under --out only when the run succeeds.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "efllm/efllm.hpp"

namespace fs = std::filesystem;
using namespace efllm;

namespace {

struct KeySpec {
  const char* key;
  const char* fallback;
  const char* help;
};

// Every configuration key with its default.
const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys{
      {"run.seed", "42", "global seed (falls back to EFLLM_SEED, then 42)"},
      {"data.scenario", "pv", "scenario: load, pv or wind"},
      {"data.days", "365", "days of hourly data to generate"},
      {"data.rated", "798", "rated capacity E_r in kW"},
      {"data.bins", "100", "number of intervals N"},
      {"data.events", "true", "plant the scenario's sparse weather events"},
      {"paths.data", "", "dataset CSV (with .meta sidecar)"},
      {"paths.base", "", "base checkpoint directory"},
      {"paths.checkpoint", "", "fine-tuned checkpoint directory"},
      {"paths.registry", "", "function registry file (built-in registry when empty)"},
      {"pretrain.value_sentences", "600", "past-value sentences in the base corpus"},
      {"pretrain.free_form", "100", "free-form forecast replies in the base corpus"},
      {"pretrain.guidance_repeats", "4", "repetitions of the guidance Q/A bank"},
      {"pretrain.function_dialogues", "120", "decision-support dialogues in the base corpus"},
      {"pretrain.corpus_seed", "7", "seed of the base corpus"},
      {"pretrain.grounded_days", "60", "days of the separate plant used for grounded examples"},
      {"pretrain.grounded_stride", "3", "stride between grounded examples"},
      {"pretrain.window", "24", "series window length T"},
      {"pretrain.epochs", "10", "pretraining epochs"},
      {"pretrain.lr", "0.003", "pretraining learning rate"},
      {"model.width", "32", "model width"},
      {"model.layers", "2", "transformer layers"},
      {"model.heads", "2", "attention heads"},
      {"model.ff_hidden", "128", "feed-forward hidden size"},
      {"model.max_len", "128", "maximum sequence length"},
      {"model.rank", "4", "LoRA rank of a new adapter"},
      {"model.adapter_init_std", "0.1", "init std of a new adapter's A factors"},
      {"train.lr", "0.01", "learning rate"},
      {"train.prefix_lr", "0", "prefix learning rate (0: same as lr)"},
      {"train.epochs", "3", "epochs"},
      {"train.batch_size", "1", "examples per step"},
      {"train.lambda", "0", "Frobenius penalty on trainable adapters"},
      {"train.task_weight", "0.5", "task weight w between classification and regression"},
      {"train.train_fraction", "0.8", "leading share of the dataset used for training"},
      {"train.stride", "13", "keep every stride-th training window"},
      {"train.limit", "32", "maximum number of training windows"},
      {"train.text_every", "0", "insert a text-only example after this many windows (0: none)"},
      {"train.cot", "false", "add two-step examples with the weather supplement"},
      {"decode.mode", "greedy", "greedy or sample"},
      {"decode.temperature", "0.7", "sampling temperature"},
      {"decode.max_tokens", "24", "maximum generated tokens"},
      {"decode.samples", "1", "samples averaged per prediction (1: single prediction)"},
      {"decode.cot", "false", "two-step inference with the weather supplement"},
      {"decode.threshold", "0.8", "similarity below which a response counts as a hallucination"},
      {"infer.rows", "24", "predict the last this many rows of the dataset"},
      {"eval.stride", "1", "keep every stride-th test window"},
      {"eval.rows", "48", "maximum number of test windows"},
      {"sweep.w", "0.2,0.5,0.8", "task weights"},
      {"sweep.seeds", "3", "seeds per task weight"},
      {"anova.runs", "100", "sampled inferences"},
      {"anova.groups", "10", "sequential ANOVA groups"},
  };
  return keys;
}

struct FlagSpec {
  const char* flag;
  const char* key;
};

class ExitError : public std::runtime_error {
 public:
  ExitError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

// ---------------------------------------------------------------------------
// Configuration

struct Resolved {
  IniFile ini;
  std::string get(const std::string& k) const { return ini.get(k, ""); }
  double num(const std::string& k) const { return ini.get_double(k, 0.0); }
  std::size_t size(const std::string& k) const { return ini.get_size(k, 0); }
  bool flag(const std::string& k) const { return ini.get_bool(k, false); }
  std::uint64_t seed() const { return static_cast<std::uint64_t>(ini.get_size("run.seed", 42)); }
};

std::set<std::string> known_keys() {
  std::set<std::string> out;
  for (const auto& k : schema()) out.insert(k.key);
  return out;
}

Resolved resolve(const std::string& config_path, const std::map<std::string, std::string>& flags,
                 const std::vector<std::string>& sets) {
  Resolved r;
  for (const auto& k : schema()) r.ini.set(k.key, k.fallback);
  if (const char* env = std::getenv("EFLLM_SEED"); env && *env) r.ini.set("run.seed", env);
  if (!config_path.empty()) {
    const auto file = IniFile::load(config_path);
    file.reject_unknown(known_keys());
    for (const auto& [k, v] : file.values()) r.ini.set(k, v);
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    const auto key = s.substr(0, eq);
    if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
    r.ini.set(key, s.substr(eq + 1));
  }
  for (const auto& [k, v] : flags) r.ini.set(k, v);
  // type checks for every key up front
  for (const auto& k : schema()) {
    const std::string def = k.fallback;
    if (def == "true" || def == "false") r.ini.get_bool(k.key, false);
    else if (!def.empty() && (std::isdigit(static_cast<unsigned char>(def[0])) && def.find(',') == std::string::npos))
      r.ini.get_double(k.key, 0.0);
  }
  parse_scenario(r.get("data.scenario"));
  if (r.get("decode.mode") != "greedy" && r.get("decode.mode") != "sample") {
    throw ConfigError("decode.mode must be greedy or sample");
  }
  r.ini.get_size("run.seed", 0);
  return r;
}

// ---------------------------------------------------------------------------
// Run directory

class RunDir {
 public:
  explicit RunDir(std::string out) : out_(std::move(out)) {
    if (out_.empty()) throw ConfigError("--out is required");
    staging_ = out_ + ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~RunDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }
  std::string path(const std::string& leaf) const { return staging_ + "/" + leaf; }
  void commit() {
    fs::create_directories(out_);
    for (const auto& e : fs::directory_iterator(staging_)) {
      const auto dst = fs::path(out_) / e.path().filename();
      fs::remove_all(dst);
      fs::rename(e.path(), dst);
    }
    fs::remove_all(staging_);
    committed_ = true;
  }

 private:
  std::string out_, staging_;
  bool committed_ = false;
};

// ---------------------------------------------------------------------------
// Shared pieces

std::string require_path(const Resolved& r, const std::string& key) {
  const auto p = r.get(key);
  if (p.empty()) throw ConfigError(key + " is required");
  return p;
}

TrainConfig train_config(const Resolved& r) {
  TrainConfig c;
  c.lr = r.num("train.lr");
  c.prefix_lr = r.num("train.prefix_lr");
  c.epochs = r.size("train.epochs");
  c.batch_size = r.size("train.batch_size");
  c.lambda = r.num("train.lambda");
  c.task_weight = r.num("train.task_weight");
  c.seed = r.seed();
  c.validate();
  return c;
}

DecodeOptions decode_options(const Resolved& r, std::uint64_t seed) {
  const auto n = r.size("decode.max_tokens");
  if (r.get("decode.mode") == "sample") return DecodeOptions::sample(r.num("decode.temperature"), seed, n);
  return DecodeOptions::greedy(n);
}

void save_normalization(const NormalizationParams& p, const std::vector<std::string>& channels, const std::string& path) {
  IniFile ini;
  std::string names, mean, sd;
  for (std::size_t i = 0; i < p.mean.size(); ++i) {
    names += (i ? "," : "") + channels[i];
    mean += (i ? "," : "") + format_double(p.mean[i]);
    sd += (i ? "," : "") + format_double(p.stddev[i]);
  }
  ini.set("normalization.channels", names);
  ini.set("normalization.mean", mean);
  ini.set("normalization.stddev", sd);
  ini.save(path);
}

std::optional<NormalizationParams> load_normalization(const std::string& dir, const Dataset& d) {
  const auto path = dir + "/normalization.ini";
  if (!fs::exists(path)) return std::nullopt;
  const auto ini = IniFile::load(path);
  if (ini.get("normalization.channels", "") != [&] {
        std::string s;
        for (std::size_t i = 0; i < d.channels().size(); ++i) s += (i ? "," : "") + d.channels()[i];
        return s;
      }()) {
    throw ConfigError("dataset channels differ from the checkpoint's normalization channels");
  }
  auto numbers = [&](const std::string& key) {
    std::vector<double> out;
    std::istringstream in(ini.get(key, ""));
    std::string cell;
    while (std::getline(in, cell, ',')) out.push_back(std::stod(cell));
    return out;
  };
  NormalizationParams p;
  p.mean = numbers("normalization.mean");
  p.stddev = numbers("normalization.stddev");
  if (p.mean.size() != d.channels().size() || p.stddev.size() != p.mean.size()) {
    throw IoError("malformed " + path);
  }
  return p;
}

void save_model(const Model& m, const Vocabulary& v, const std::optional<NormalizationParams>& norm,
                const Dataset* d, const std::string& dir) {
  save_checkpoint(m, v, dir);
  if (norm && d) save_normalization(*norm, d->channels(), dir + "/normalization.ini");
}

void check_compatible(const Model& m, const Dataset& d) {
  if (m.config().channels != d.channels().size()) {
    throw ConfigError("model expects " + std::to_string(m.config().channels) + " channels but the dataset has " +
                      std::to_string(d.channels().size()) + " (" + scenario_name(d.scenario) + ")");
  }
}

struct Prepared {
  Dataset data, train_part, test_part;
  NormalizationParams norm;
};

Prepared prepare(const Resolved& r, const std::string& ckpt_dir) {
  Prepared p;
  p.data = read_dataset_csv(require_path(r, "paths.data"));
  const double f = r.num("train.train_fraction");
  auto [tr, te] = split(p.data, SplitPolicy::chronological(f, 1.0 - f));
  p.train_part = std::move(tr);
  p.test_part = std::move(te);
  const auto saved = ckpt_dir.empty() ? std::nullopt : load_normalization(ckpt_dir, p.data);
  p.norm = saved ? *saved : fit_dataset_normalization(p.train_part);
  return p;
}

std::vector<TrainingExample> training_examples(const Resolved& r, const Prepared& p, std::size_t window) {
  auto ex = to_examples(p.train_part, window, 1, p.data.scheme(), ModePlan{r.size("train.text_every")}, &p.norm);
  const auto stride = r.size("train.stride");
  if (stride == 0) throw ConfigError("train.stride must be positive");
  ex = every(ex, stride, 0, r.size("train.limit"));
  if (r.flag("train.cot")) {
    const auto n = ex.size();
    for (std::size_t i = 0; i < n; ++i)
      if (ex[i].mode == Mode::multimodal) ex.push_back(cot_step2_example(ex[i], p.data.scenario, p.data.rated, p.data.scheme()));
  }
  if (ex.empty()) throw ConfigError("no training examples selected");
  return ex;
}

std::vector<TrainingExample> test_examples(const Resolved& r, const Prepared& p, std::size_t window) {
  const auto stride = r.size("eval.stride");
  if (stride == 0) throw ConfigError("eval.stride must be positive");
  auto ex = every(to_examples(p.test_part, window, 1, p.data.scheme(), {}, &p.norm), stride, 0, r.size("eval.rows"));
  if (ex.empty()) throw ConfigError("no test examples selected");
  return ex;
}

void write_text(const std::string& path, const std::string& text) { write_file(path, text); }

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen_data(const Resolved& r, RunDir& run) {
  ScenarioSpec s;
  s.kind = parse_scenario(r.get("data.scenario"));
  s.rated = r.num("data.rated");
  s.days = r.size("data.days");
  s.seed = r.seed();
  s.bins = r.size("data.bins");
  if (r.flag("data.events")) s.events = default_events(s.kind, s.rated);
  const auto d = generate(s);
  write_dataset_csv(d, run.path("data.csv"));
  std::cout << "wrote " << d.size() << " rows of " << scenario_name(s.kind) << " data\n";
}

void cmd_pretrain(const Resolved& r, RunDir& run) {
  BasePlan plan;
  plan.corpus.scenario = parse_scenario(r.get("data.scenario"));
  plan.corpus.rated = r.num("data.rated");
  plan.corpus.value_sentences = r.size("pretrain.value_sentences");
  plan.corpus.free_form = r.size("pretrain.free_form");
  plan.corpus.guidance_repeats = r.size("pretrain.guidance_repeats");
  plan.corpus.function_dialogues = r.size("pretrain.function_dialogues");
  plan.corpus.seed = static_cast<std::uint64_t>(r.size("pretrain.corpus_seed"));
  plan.grounded_days = r.size("pretrain.grounded_days");
  plan.grounded_stride = r.size("pretrain.grounded_stride");
  plan.grounded_seed = derive_seed(r.seed(), 1001);
  plan.window = r.size("pretrain.window");
  plan.init_seed = derive_seed(r.seed(), 1);
  plan.width = r.size("model.width");
  plan.layers = r.size("model.layers");
  plan.heads = r.size("model.heads");
  plan.ff_hidden = r.size("model.ff_hidden");
  plan.max_len = r.size("model.max_len");
  plan.train.lr = r.num("pretrain.lr");
  plan.train.epochs = r.size("pretrain.epochs");
  plan.train.seed = r.seed();
  const auto base = pretrain_base(plan);
  save_checkpoint(base.model, base.vocab, run.path("checkpoint"));
  write_loss_csv(base.result, run.path("loss.csv"));
  std::cout << "pretrained base: vocab " << base.vocab.size() << ", final epoch loss "
            << (base.result.epoch_mean.empty() ? 0.0 : base.result.epoch_mean.back()) << "\n";
}

Model with_new_adapter(const Model& base, const Resolved& r, std::uint64_t seed) {
  Model m = base.deep_copy();
  m.set_stack(push_adapter(m.stack(), r.size("model.rank"), derive_seed(seed, 5), r.num("model.adapter_init_std")));
  return m;
}

void cmd_train(const Resolved& r, RunDir& run) {
  const auto base = load_checkpoint(require_path(r, "paths.base"));
  const auto p = prepare(r, "");
  check_compatible(base.model, p.data);
  const auto ex = training_examples(r, p, base.model.config().window);
  auto cfg = train_config(r);
  auto model = with_new_adapter(base.model, r, r.seed());
  const auto result = train(model, encode_all(ex, base.vocab, cfg.task_weight), cfg);
  save_model(model, base.vocab, p.norm, &p.data, run.path("checkpoint"));
  write_loss_csv(result, run.path("loss.csv"));
  std::cout << "trained on " << ex.size() << " examples, final epoch loss " << result.epoch_mean.back() << "\n";
}

void cmd_continual(const Resolved& r, RunDir& run) {
  const auto dir = require_path(r, "paths.checkpoint");
  auto ck = load_checkpoint(dir);
  const auto p = prepare(r, dir);
  check_compatible(ck.model, p.data);
  const auto ex = training_examples(r, p, ck.model.config().window);
  auto cfg = train_config(r);
  const auto before = tensor_digests(ck.model);
  const auto result = continual_update(ck.model, encode_all(ex, ck.vocab, cfg.task_weight), cfg);
  save_model(ck.model, ck.vocab, p.norm, &p.data, run.path("checkpoint"));
  write_loss_csv(result, run.path("loss.csv"));
  const auto after = tensor_digests(ck.model);
  std::string digests = "tensor,sha256_before,sha256_after\n";
  for (const auto& [name, h] : before) digests += name + "," + h + "," + after.at(name) + "\n";
  write_text(run.path("frozen_digests.csv"), digests);
  std::cout << "continual update on " << ex.size() << " examples, adapters now " << ck.model.stack().adapters.size()
            << "\n";
}

void cmd_infer(const Resolved& r, RunDir& run) {
  const auto dir = require_path(r, "paths.checkpoint");
  const auto ck = load_checkpoint(dir);
  const auto p = prepare(r, dir);
  check_compatible(ck.model, p.data);
  const auto window = ck.model.config().window;
  auto all = to_examples(p.data, window, 1, p.data.scheme(), {}, &p.norm);
  const std::size_t n = std::min(r.size("infer.rows"), all.size());
  if (n == 0) throw ConfigError("infer.rows must be positive");
  const auto head = forecast_prompt_head(p.data.scenario, p.data.rated);
  std::vector<PredictionRow> rows;
  std::string cot_log = "timestamp,step1,step2\n";
  for (std::size_t i = all.size() - n; i < all.size(); ++i) {
    const auto& ex = all[i];
    const auto in = ForecastInput::from(ex, ex.prompt);
    const auto seed = derive_seed(r.seed(), i);
    ForecastResponse resp;
    if (r.size("decode.samples") > 1) {
      resp = averaged_predict(ck.model, ck.vocab, in, r.size("decode.samples"), seed, r.num("decode.temperature")).response;
    } else if (r.flag("decode.cot")) {
      const auto c = cot_infer(ck.model, ck.vocab, in, head, ex.supplement, decode_options(r, seed));
      cot_log += iso_timestamp(ex.timestamp) + "," + c.step1.raw + "," + c.step2.raw + "\n";
      resp = c.step2;
    } else {
      resp = predict(ck.model, ck.vocab, in, decode_options(r, seed));
    }
    rows.push_back({ex.timestamp, ex.target, resp});
  }
  write_predictions_csv(rows, p.data.scheme(), run.path("predictions.csv"));
  if (r.flag("decode.cot")) write_text(run.path("cot.csv"), cot_log);
  std::size_t ok = 0;
  for (const auto& row : rows) ok += row.response.conforming;
  std::cout << "predicted " << rows.size() << " rows, " << ok << " conforming\n";
}

void cmd_chat(const Resolved& r, RunDir& run) {
  const auto ck = load_checkpoint(require_path(r, "paths.checkpoint"));
  const auto registry = r.get("paths.registry").empty() ? default_registry() : load_registry(r.get("paths.registry"));
  Context ctx;
  const auto data = r.get("paths.data");
  ctx["data_dir"] = data.empty() ? fs::current_path().string() : fs::path(data).parent_path().string();
  if (ctx["data_dir"].empty()) ctx["data_dir"] = ".";
  std::string transcript;
  std::string line;
  std::size_t turns = 0;
  while (std::getline(std::cin, line)) {
    const auto text = detail::trim_copy(line);
    if (text.empty()) continue;
    if (text == "exit" || text == "quit") break;
    const auto t = respond(ck.model, ck.vocab, text, registry, ctx, decode_options(r, derive_seed(r.seed(), turns)));
    if (t.function_id == "feature_engineering" && !t.flagged) ctx["features"] = t.function_value;
    for (const auto& l : transcript_lines(t)) transcript += l + "\n";
    std::cout << "assistant: " << t.final_response << "\n";
    if (t.flagged) std::cout << "notice: " << t.notice << "\n";
    ++turns;
  }
  write_text(run.path("transcript.tsv"), transcript);
  std::cout << turns << " turns\n";
}

std::vector<double> parse_weights(const std::string& s) {
  std::vector<double> out;
  std::istringstream in(s);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ConfigError("sweep.w entry '" + cell + "' is not a number");
    }
  }
  return out;
}

void cmd_sweep(const Resolved& r, RunDir& run) {
  const auto base = load_checkpoint(require_path(r, "paths.base"));
  const auto p = prepare(r, "");
  check_compatible(base.model, p.data);
  const auto window = base.model.config().window;
  const auto train_ex = training_examples(r, p, window);
  const auto test_ex = test_examples(r, p, window);
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < r.size("sweep.seeds"); ++k) seeds.push_back(derive_seed(r.seed(), 100 + k));
  auto cell = [&](double w, std::uint64_t seed) {
    auto cfg = train_config(r);
    cfg.task_weight = w;
    cfg.seed = seed;
    auto model = with_new_adapter(base.model, r, seed);
    train(model, encode_all(train_ex, base.vocab, w), cfg);
    return evaluate_forecasts(model, base.vocab, test_ex, p.data.scheme(), r.num("decode.threshold"),
                              DecodeOptions::sample(r.num("decode.temperature"), seed, r.size("decode.max_tokens")),
                              true);
  };
  const auto rows = sweep(cell, parse_weights(r.get("sweep.w")), seeds);
  write_sweep_csv(rows, run.path("sweep.csv"));
  for (const auto& row : rows)
    if (row.flagged) std::cerr << "w=" << row.w << " flagged: " << row.notice << "\n";
  std::cout << "sweep over " << rows.size() << " task weights x " << seeds.size() << " seeds\n";
}

void cmd_anova(const Resolved& r, RunDir& run) {
  const auto dir = require_path(r, "paths.checkpoint");
  const auto ck = load_checkpoint(dir);
  const auto p = prepare(r, dir);
  check_compatible(ck.model, p.data);
  const auto ex = to_examples(p.test_part, ck.model.config().window, 1, p.data.scheme(), {}, &p.norm);
  const auto& last = ex.back();
  StabilityConfig cfg;
  cfg.runs = r.size("anova.runs");
  cfg.groups = r.size("anova.groups");
  cfg.temperature = r.num("decode.temperature");
  cfg.seed = r.seed();
  const auto greedy = r.get("decode.mode") == "greedy" && r.num("decode.temperature") == 0.0;
  AnovaRow row{scenario_name(p.data.scenario), std::nan(""), std::nan("")};
  std::string values = "run,value\n";
  try {
    const auto res = stability_run(
        [&](const DecodeOptions& o) {
          auto opt = o;
          opt.max_new_tokens = r.size("decode.max_tokens");
          return predict(ck.model, ck.vocab, ForecastInput::from(last, last.prompt), opt);
        },
        cfg, greedy);
    row.f = res.report.f;
    row.p = res.report.p;
    for (std::size_t i = 0; i < res.values.size(); ++i)
      values += std::to_string(i) + "," + (res.values[i] ? format_value(*res.values[i]) : "") + "\n";
  } catch (const ZeroVarianceError& e) {
    std::cerr << "F undefined: " << e.what() << "\n";
  }
  write_anova_csv({row}, run.path("anova.csv"));
  write_text(run.path("runs.csv"), values);
  std::cout << "F = " << row.f << ", p = " << row.p << "\n";
}

void cmd_eval(const Resolved& r, RunDir& run) {
  const auto dir = require_path(r, "paths.checkpoint");
  const auto ck = load_checkpoint(dir);
  const auto p = prepare(r, dir);
  check_compatible(ck.model, p.data);
  const auto ex = test_examples(r, p, ck.model.config().window);
  const auto scheme = p.data.scheme();
  const auto ev = evaluate_forecasts(ck.model, ck.vocab, ex, scheme, r.num("decode.threshold"),
                                     decode_options(r, r.seed()));
  std::vector<double> cls_pred, cls_truth, reg_pred, reg_truth, base_pred, truth;
  std::vector<PredictionRow> rows;
  for (std::size_t i = 0; i < ex.size(); ++i) {
    const auto resp = parse_response(ev.responses[i]);
    rows.push_back({ex[i].timestamp, ex[i].target, resp});
    if (resp.class_id && *resp.class_id <= scheme.intervals) {
      cls_pred.push_back(decode_class(*resp.class_id, scheme));
      cls_truth.push_back(ex[i].target);
    }
    if (resp.value) {
      reg_pred.push_back(*resp.value);
      reg_truth.push_back(ex[i].target);
    }
    base_pred.push_back(persistence_forecast(*ex[i].window));
    truth.push_back(ex[i].target);
  }
  std::string csv = "method,mae,rmse,n\n";
  auto line = [&](const std::string& name, const std::vector<double>& pr, const std::vector<double>& tr) {
    if (pr.empty()) {
      csv += name + ",,,0\n";
      return;
    }
    const auto m = metrics(pr, tr);
    csv += name + "," + format_value(m.mae) + "," + format_value(m.rmse) + "," + std::to_string(pr.size()) + "\n";
  };
  line("efllm_class", cls_pred, cls_truth);
  line("efllm_reg", reg_pred, reg_truth);
  line("persistence", base_pred, truth);
  write_text(run.path("metrics.csv"), csv);
  write_predictions_csv(rows, scheme, run.path("predictions.csv"));
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "count,class_accuracy,conforming_rate,hp_c_pct,hp_r_pct\n%zu,%.4f,%.4f,%.2f,%.2f\n", ev.count,
                ev.class_accuracy, ev.conforming_rate, ev.hp_c_pct, ev.hp_r_pct);
  write_text(run.path("summary.csv"), buf);
  std::cout << csv;
}

// ---------------------------------------------------------------------------

struct Command {
  const char* name;
  const char* help;
  std::vector<FlagSpec> flags;
  void (*run)(const Resolved&, RunDir&);
};

const std::vector<Command>& commands() {
  static const std::vector<Command> c{
      {"gen-data", "generate a synthetic scenario dataset",
       {{"--scenario", "data.scenario"}, {"--days", "data.days"}, {"--rated", "data.rated"}, {"--bins", "data.bins"},
        {"--events", "data.events"}},
       cmd_gen_data},
      {"pretrain", "pretrain the toy base model on the synthetic corpus",
       {{"--scenario", "data.scenario"}, {"--rated", "data.rated"}, {"--epochs", "pretrain.epochs"},
        {"--lr", "pretrain.lr"}, {"--width", "model.width"}, {"--layers", "model.layers"}},
       cmd_pretrain},
      {"train", "fine-tune a new adapter and the prefix block (F-PEFT)",
       {{"--base", "paths.base"}, {"--data", "paths.data"}, {"--rank", "model.rank"}, {"--lr", "train.lr"},
        {"--epochs", "train.epochs"}, {"--w", "train.task_weight"}, {"--lambda", "train.lambda"},
        {"--limit", "train.limit"}, {"--stride", "train.stride"}, {"--cot", "train.cot"}},
       cmd_train},
      {"continual", "stack and train a new adapter on a fine-tuned model",
       {{"--checkpoint", "paths.checkpoint"}, {"--data", "paths.data"}, {"--lr", "train.lr"},
        {"--epochs", "train.epochs"}, {"--w", "train.task_weight"}, {"--limit", "train.limit"},
        {"--stride", "train.stride"}},
       cmd_continual},
      {"infer", "predict the last rows of a dataset",
       {{"--checkpoint", "paths.checkpoint"}, {"--data", "paths.data"}, {"--rows", "infer.rows"},
        {"--samples", "decode.samples"}, {"--cot", "decode.cot"}, {"--mode", "decode.mode"},
        {"--temperature", "decode.temperature"}},
       cmd_infer},
      {"chat", "read prompts from stdin and answer with function calling",
       {{"--checkpoint", "paths.checkpoint"}, {"--registry", "paths.registry"}, {"--data", "paths.data"},
        {"--mode", "decode.mode"}},
       cmd_chat},
      {"sweep", "task-weight sweep of accuracy and hallucination proportions",
       {{"--base", "paths.base"}, {"--data", "paths.data"}, {"--w", "sweep.w"}, {"--seeds", "sweep.seeds"},
        {"--epochs", "train.epochs"}, {"--rows", "eval.rows"}, {"--threshold", "decode.threshold"}},
       cmd_sweep},
      {"anova", "repeated sampled inference and one-way ANOVA",
       {{"--checkpoint", "paths.checkpoint"}, {"--data", "paths.data"}, {"--runs", "anova.runs"},
        {"--groups", "anova.groups"}, {"--temperature", "decode.temperature"}},
       cmd_anova},
      {"eval", "test-set metrics against the persistence baseline",
       {{"--checkpoint", "paths.checkpoint"}, {"--data", "paths.data"}, {"--rows", "eval.rows"},
        {"--stride", "eval.stride"}, {"--mode", "decode.mode"}},
       cmd_eval},
  };
  return c;
}

std::string key_help(const std::string& key) {
  for (const auto& k : schema())
    if (key == k.key) return std::string(k.help) + " [" + k.key + ", default " + (*k.fallback ? k.fallback : "none") + "]";
  return key;
}

int run_main(int argc, char** argv) {
  CLI::App app{"efllm: multimodal energy forecasting with a toy fused-PEFT language model"};
  app.require_subcommand(1);
  struct Parsed {
    std::string config, out, seed;
    std::vector<std::string> sets;
    std::map<std::string, std::string> values;  // flag -> raw value
  };
  std::map<std::string, Parsed> parsed;
  for (const auto& c : commands()) {
    auto* sub = app.add_subcommand(c.name, c.help);
    auto& p = parsed[c.name];
    sub->add_option("--config", p.config, "configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", p.out, "run directory")->required();
    sub->add_option("--seed", p.seed, key_help("run.seed"));
    sub->add_option("--set", p.sets, "override any key: section.key=value");
    for (const auto& f : c.flags) sub->add_option(f.flag, p.values[f.flag], key_help(f.key));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (const auto& c : commands()) {
    auto* sub = app.get_subcommand(c.name);
    if (!sub->parsed()) continue;
    auto& p = parsed[c.name];
    std::map<std::string, std::string> flags;
    for (const auto& f : c.flags)
      if (sub->count(f.flag) > 0) flags[f.key] = p.values[f.flag];
    if (sub->count("--seed") > 0) flags["run.seed"] = p.seed;
    const auto resolved = resolve(p.config, flags, p.sets);
    RunDir run(p.out);
    resolved.ini.save(run.path("config.ini"));
    c.run(resolved, run);
    run.commit();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_main(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ArgumentError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const SchemaError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
