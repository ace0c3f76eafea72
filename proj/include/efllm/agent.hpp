#pragma once

// Two-pass function calling: keyword + pattern triggers, a small function
// library (feature engineering, prompt engineering, decision support) and the
// dialogue loop that splices exact function results into the final answer.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "efllm/data_synth.hpp"
#include "efllm/error.hpp"
#include "efllm/forecast.hpp"
#include "efllm/fusion_model.hpp"
#include "efllm/text_codec.hpp"

namespace efllm {

// ---------------------------------------------------------------------------
// Tables and feature engineering

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    return std::nullopt;
  }
};

inline Table read_table_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read table " + path);
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("table " + path + " is empty");
  t.columns = split_csv_line(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.columns.size()) throw SchemaError(path + ":" + std::to_string(lineno) + ": wrong column count");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline Table table_from_dataset(const Dataset& d) {
  Table t;
  t.columns = {"timestamp", "target"};
  t.columns.insert(t.columns.end(), d.feature_names.begin(), d.feature_names.end());
  t.columns.push_back("weather_text");
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<std::string> r{iso_timestamp(d.timestamps[i]), format_csv_number(d.target[i])};
    for (const double f : d.features[i]) r.push_back(format_csv_number(f));
    r.push_back(d.weather[i]);
    t.rows.push_back(std::move(r));
  }
  return t;
}

struct FeatureTable {
  std::vector<std::string> columns;  // "target" first
  std::vector<std::int64_t> timestamps;
  std::vector<std::vector<double>> rows;
  std::string summary;
};

namespace detail {

inline std::string slug(const std::string& s) {
  std::string out;
  for (const char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '_';
  return out;
}

inline std::optional<double> to_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

// Drops constant feature columns, z-scores the numeric features, adds
// hour-of-day and day-of-week, one-hot encodes the weather text and appends
// lag-1 / lag-24 target columns. The first 24 rows (no lag-24) are dropped.
inline FeatureTable fn_feature_engineering(const Table& table) {
  const auto target_col = table.column("target");
  if (!target_col) throw SchemaError("feature engineering needs a 'target' column");
  const auto ts_col = table.column("timestamp");
  const auto weather_col = table.column("weather_text");
  const std::size_t n = table.rows.size();
  if (n <= 24) throw SchemaError("feature engineering needs more than 24 rows for the lag-24 feature");

  std::vector<double> target(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto v = detail::to_number(table.rows[r][*target_col]);
    if (!v) throw SchemaError("non-numeric target in row " + std::to_string(r + 1));
    target[r] = *v;
  }
  std::vector<std::int64_t> ts(n, 0);
  if (ts_col)
    for (std::size_t r = 0; r < n; ++r) ts[r] = parse_iso_timestamp(table.rows[r][*ts_col]);

  FeatureTable out;
  out.columns.push_back("target");
  std::vector<std::vector<double>> cols{target};
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    if (c == *target_col || (ts_col && c == *ts_col) || (weather_col && c == *weather_col)) continue;
    std::vector<double> v(n);
    bool numeric = true;
    for (std::size_t r = 0; r < n && numeric; ++r) {
      const auto x = detail::to_number(table.rows[r][c]);
      numeric = x.has_value();
      if (numeric) v[r] = *x;
    }
    if (!numeric) continue;
    double mean = 0.0;
    for (const double x : v) mean += x;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    if (!(sd > 1e-12)) continue;  // constant column
    for (auto& x : v) x = (x - mean) / sd;
    out.columns.push_back(table.columns[c]);
    cols.push_back(std::move(v));
  }
  std::vector<double> hour(n), dow(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::int64_t day = ts[r] >= 0 ? ts[r] / 86400 : (ts[r] - 86399) / 86400;
    hour[r] = static_cast<double>((ts[r] - day * 86400) / 3600);
    dow[r] = static_cast<double>(((day + 4) % 7 + 7) % 7);  // 0 = Sunday
  }
  out.columns.push_back("hour");
  cols.push_back(hour);
  out.columns.push_back("day_of_week");
  cols.push_back(dow);
  if (weather_col) {
    std::set<std::string> cats;
    for (const auto& row : table.rows) cats.insert(row[*weather_col]);
    for (const auto& cat : cats) {
      std::vector<double> v(n);
      for (std::size_t r = 0; r < n; ++r) v[r] = table.rows[r][*weather_col] == cat ? 1.0 : 0.0;
      out.columns.push_back("weather_" + detail::slug(cat));
      cols.push_back(std::move(v));
    }
  }
  std::vector<double> lag1(n, 0.0), lag24(n, 0.0);
  for (std::size_t r = 1; r < n; ++r) lag1[r] = target[r - 1];
  for (std::size_t r = 24; r < n; ++r) lag24[r] = target[r - 24];
  out.columns.push_back("lag_1");
  cols.push_back(lag1);
  out.columns.push_back("lag_24");
  cols.push_back(lag24);

  for (std::size_t r = 24; r < n; ++r) {
    std::vector<double> row;
    for (const auto& c : cols) row.push_back(c[r]);
    out.rows.push_back(std::move(row));
    out.timestamps.push_back(ts[r]);
  }
  out.summary = "columns:";
  for (std::size_t i = 0; i < out.columns.size(); ++i) out.summary += (i ? ", " : " ") + out.columns[i];
  return out;
}

inline void write_feature_csv(const FeatureTable& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature table " + path);
  out << "timestamp";
  for (const auto& c : t.columns) out << ',' << c;
  out << '\n';
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out << iso_timestamp(t.timestamps[r]);
    for (const double v : t.rows[r]) out << ',' << format_csv_number(v);
    out << '\n';
  }
  if (!out) throw IoError("failed writing feature table " + path);
}

// ---------------------------------------------------------------------------
// Prompt engineering

// Step-1 prompt for a scenario; the feature summary is folded into a
// features clause, which disappears when the summary is empty.
inline std::string fn_prompt_engineering(Scenario s, double rated, const std::string& feature_summary) {
  if (!(rated > 0.0)) throw ConfigError("rated capacity must be positive");
  std::string features = feature_summary;
  if (features.rfind("columns:", 0) == 0) features = features.substr(8);
  std::string cleaned;
  for (const char c : features) cleaned += c == ',' ? ' ' : c;
  std::istringstream words(cleaned);
  std::string w, joined;
  while (words >> w) joined += (joined.empty() ? "" : " ") + w;
  return step1_prompt(forecast_prompt_head(s, rated, joined));
}

inline std::string fn_prompt_engineering(const std::string& scenario, double rated, const std::string& summary) {
  return fn_prompt_engineering(parse_scenario(scenario), rated, summary);
}

struct ParsedPrompt {
  Scenario scenario;
  double rated = 0.0;
  std::string features;
};

// Recognizes the step-1 prompt grammar.
inline std::optional<ParsedPrompt> parse_step1_prompt(const std::string& text) {
  static const std::regex re(
      R"(^user : forecast (load|pv|wind) power for the next hour with capacity (\d+\.\d\d) kW \.(?: features ([^.|]+) \.)? assistant :$)");
  std::smatch m;
  if (!std::regex_match(text, m, re)) return std::nullopt;
  return ParsedPrompt{parse_scenario(m[1].str()), std::stod(m[2].str()), m[3].matched ? m[3].str() : ""};
}

// ---------------------------------------------------------------------------
// Decision support

enum class DecisionKind { utilization, reserve_margin, energy };

struct DecisionResult {
  double value = 0.0;
  std::string exact;     // two-decimal rendering with unit, e.g. "98.21%"
  std::string sentence;  // fixed answer template
};

inline DecisionResult fn_decision_support(DecisionKind kind, const std::vector<double>& predictions, double rated,
                                          double step_hours = 1.0) {
  if (predictions.empty()) throw ArgumentError("decision support needs at least one prediction");
  if (!(rated > 0.0)) throw ArgumentError("rated capacity must be positive");
  DecisionResult r;
  double sum = 0.0;
  for (const double p : predictions) sum += p;
  switch (kind) {
    case DecisionKind::utilization:
      r.value = 100.0 * sum / (rated * static_cast<double>(predictions.size()));
      r.exact = format_value(r.value) + "%";
      r.sentence = "capacity utilization = " + r.exact;
      break;
    case DecisionKind::reserve_margin:
      r.value = 100.0 * (rated - *std::max_element(predictions.begin(), predictions.end())) / rated;
      r.exact = format_value(r.value) + "%";
      r.sentence = "reserve margin = " + r.exact;
      break;
    case DecisionKind::energy:
      r.value = sum * step_hours;
      r.exact = format_value(r.value) + " kWh";
      r.sentence = "energy = " + r.exact;
      break;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Registry and triggers

struct ArgSlot {
  enum class Type { text, number, number_list };
  std::string name;
  Type type = Type::text;
};

struct FunctionSpec {
  std::string id;
  std::vector<std::string> keywords;
  std::string pattern;        // ECMAScript regex, case-insensitive; group i fills slot i
  std::vector<ArgSlot> slots;
  std::string handler;
};

using Args = std::map<std::string, std::string>;

struct FunctionOutput {
  std::string text;   // appended to the second-pass prompt
  std::string value;  // what the result slot expands to
};

// Values a dialogue session makes available to handlers (e.g. the feature
// summary produced by an earlier turn).
using Context = std::map<std::string, std::string>;

using Handler = std::function<FunctionOutput(const Args&, const Context&)>;

class Registry {
 public:
  void add(FunctionSpec spec) {
    for (const auto& s : specs_)
      if (s.id == spec.id) throw ConfigError("duplicate function id '" + spec.id + "'");
    if (spec.keywords.empty()) throw ConfigError("function '" + spec.id + "' needs at least one keyword");
    try {
      std::regex re(spec.pattern, std::regex::icase);
      if (re.mark_count() < spec.slots.size()) {
        throw ConfigError("function '" + spec.id + "' pattern has fewer groups than slots");
      }
    } catch (const std::regex_error& e) {
      throw ConfigError("function '" + spec.id + "' has an invalid pattern: " + e.what());
    }
    specs_.push_back(std::move(spec));
  }
  void bind(const std::string& handler, Handler h) { handlers_[handler] = std::move(h); }

  const std::vector<FunctionSpec>& specs() const { return specs_; }
  bool empty() const { return specs_.empty(); }

  const FunctionSpec& spec(const std::string& id) const {
    for (const auto& s : specs_)
      if (s.id == id) return s;
    throw IndexError("unknown function '" + id + "'");
  }

  FunctionOutput call(const std::string& id, const Args& args, const Context& ctx = {}) const {
    const auto& s = spec(id);
    const auto it = handlers_.find(s.handler);
    if (it == handlers_.end()) throw ConfigError("no handler bound for '" + s.handler + "'");
    return it->second(args, ctx);
  }

 private:
  std::vector<FunctionSpec> specs_;
  std::map<std::string, Handler> handlers_;
};

namespace detail {

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::set<std::string> word_set(const std::string& text) {
  std::set<std::string> words;
  std::string cur;
  for (const char c : lower(text)) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
      cur += c;
    } else if (!cur.empty()) {
      words.insert(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.insert(cur);
  return words;
}

inline std::string trim_copy(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::vector<double> parse_number_list(const std::string& s) {
  std::vector<double> out;
  std::string cell;
  std::string flat;
  for (const char c : s) flat += c == ',' ? ' ' : c;
  std::istringstream in(flat);
  while (in >> cell) {
    const auto v = to_number(cell);
    if (!v) throw ArgumentError("'" + cell + "' is not a number");
    out.push_back(*v);
  }
  return out;
}

}  // namespace detail

struct Trigger {
  std::string id;
  Args args;
};

// A function fires when all its keywords occur as words in the prompt or the
// first response (case-insensitive) and its pattern matches one of them. The
// first firing function in registry order wins.
inline std::optional<Trigger> detect_trigger(const std::string& prompt, const std::string& first_response,
                                             const Registry& registry) {
  if (registry.empty()) throw ContractError("function registry is empty");
  const auto words = detail::word_set(prompt + "\n" + first_response);
  for (const auto& spec : registry.specs()) {
    bool all = true;
    for (const auto& k : spec.keywords) all = all && words.count(detail::lower(k)) > 0;
    if (!all) continue;
    const std::regex re(spec.pattern, std::regex::icase);
    std::smatch m;
    if (!std::regex_search(prompt, m, re) && !std::regex_search(first_response, m, re)) continue;
    Trigger t{spec.id, {}};
    for (std::size_t i = 0; i < spec.slots.size(); ++i) {
      const auto& slot = spec.slots[i];
      const std::string v = m[i + 1].matched ? detail::trim_copy(m[i + 1].str()) : "";
      if (v.empty()) throw ArgumentError("function '" + spec.id + "' could not fill slot '" + slot.name + "'");
      if (slot.type == ArgSlot::Type::number && !detail::to_number(v)) {
        throw ArgumentError("slot '" + slot.name + "' of '" + spec.id + "' expects a number, got '" + v + "'");
      }
      if (slot.type == ArgSlot::Type::number_list && detail::parse_number_list(v).empty()) {
        throw ArgumentError("slot '" + slot.name + "' of '" + spec.id + "' expects numbers");
      }
      t.args[slot.name] = v;
    }
    return t;
  }
  return std::nullopt;
}

// Registry file: blocks introduced by "function <id>", followed by
// "key = value" lines for keywords, pattern, slots and handler.
inline Registry parse_registry(const std::string& text, const std::string& origin = "<registry>") {
  Registry reg;
  std::optional<FunctionSpec> cur;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto flush = [&] {
    if (!cur) return;
    if (cur->pattern.empty() || cur->handler.empty()) {
      throw ConfigError(origin + ": function '" + cur->id + "' needs a pattern and a handler");
    }
    reg.add(std::move(*cur));
    cur.reset();
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto s = detail::trim_copy(line);
    const auto where = origin + ":" + std::to_string(lineno);
    if (s.empty() || s[0] == '#') continue;
    if (s.rfind("function ", 0) == 0) {
      flush();
      cur = FunctionSpec{};
      cur->id = detail::trim_copy(s.substr(9));
      if (cur->id.empty()) throw ConfigError(where + ": missing function id");
      continue;
    }
    const auto eq = s.find('=');
    if (!cur || eq == std::string::npos) throw ConfigError(where + ": expected 'function <id>' or key = value");
    const auto key = detail::trim_copy(s.substr(0, eq));
    const auto value = detail::trim_copy(s.substr(eq + 1));
    auto items = [&] {
      std::vector<std::string> out;
      std::string item;
      std::istringstream is(value);
      while (std::getline(is, item, ','))
        if (auto t = detail::trim_copy(item); !t.empty()) out.push_back(t);
      return out;
    };
    if (key == "keywords") {
      cur->keywords = items();
    } else if (key == "pattern") {
      cur->pattern = value;
    } else if (key == "handler") {
      cur->handler = value;
    } else if (key == "slots") {
      for (const auto& item : items()) {
        const auto colon = item.find(':');
        ArgSlot slot{detail::trim_copy(item.substr(0, colon)), ArgSlot::Type::text};
        const auto type = colon == std::string::npos ? "text" : detail::trim_copy(item.substr(colon + 1));
        if (type == "number") slot.type = ArgSlot::Type::number;
        else if (type == "list") slot.type = ArgSlot::Type::number_list;
        else if (type != "text") throw ConfigError(where + ": unknown slot type '" + type + "'");
        cur->slots.push_back(slot);
      }
    } else {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
  flush();
  return reg;
}

inline std::string registry_text(const Registry& reg) {
  std::string out;
  for (const auto& s : reg.specs()) {
    out += "function " + s.id + "\n  keywords = ";
    for (std::size_t i = 0; i < s.keywords.size(); ++i) out += (i ? ", " : "") + s.keywords[i];
    out += "\n  pattern = " + s.pattern + "\n  slots = ";
    for (std::size_t i = 0; i < s.slots.size(); ++i) {
      const char* t = s.slots[i].type == ArgSlot::Type::number ? "number"
                      : s.slots[i].type == ArgSlot::Type::number_list ? "list" : "text";
      out += (i ? ", " : "") + s.slots[i].name + ":" + t;
    }
    out += "\n  handler = " + s.handler + "\n\n";
  }
  return out;
}

inline const char* kDefaultRegistry = R"(# function library
function feature_engineering
  keywords = feature, engineering
  pattern = engineering on ([A-Za-z0-9_./-]+\.csv)
  slots = path:text
  handler = feature_engineering

function prompt_engineering
  keywords = prompt
  pattern = prompt for (load|pv|wind) with capacity ([0-9]+(?:\.[0-9]+)?)
  slots = scenario:text, capacity:number
  handler = prompt_engineering

function utilization
  keywords = capacity, utilization
  pattern = predictions ([0-9][0-9., ]*?) with capacity ([0-9]+(?:\.[0-9]+)?)
  slots = predictions:list, capacity:number
  handler = utilization

function reserve_margin
  keywords = reserve, margin
  pattern = predictions ([0-9][0-9., ]*?) with capacity ([0-9]+(?:\.[0-9]+)?)
  slots = predictions:list, capacity:number
  handler = reserve_margin

function energy
  keywords = energy
  pattern = predictions ([0-9][0-9., ]*?) with capacity ([0-9]+(?:\.[0-9]+)?)
  slots = predictions:list, capacity:number
  handler = energy
)";

inline void bind_builtin_handlers(Registry& reg) {
  reg.bind("feature_engineering", [](const Args& a, const Context& ctx) {
    std::string path = a.at("path");
    if (auto it = ctx.find("data_dir"); it != ctx.end() && !path.empty() && path[0] != '/') path = it->second + "/" + path;
    const auto t = fn_feature_engineering(read_table_csv(path));
    return FunctionOutput{t.summary, t.summary};
  });
  reg.bind("prompt_engineering", [](const Args& a, const Context& ctx) {
    const auto it = ctx.find("features");
    const auto p = fn_prompt_engineering(a.at("scenario"), std::stod(a.at("capacity")), it == ctx.end() ? "" : it->second);
    return FunctionOutput{"prompt ready", p};
  });
  auto decision = [](DecisionKind kind) {
    return [kind](const Args& a, const Context&) {
      const auto r = fn_decision_support(kind, detail::parse_number_list(a.at("predictions")), std::stod(a.at("capacity")));
      return FunctionOutput{r.sentence, r.exact};
    };
  };
  reg.bind("utilization", decision(DecisionKind::utilization));
  reg.bind("reserve_margin", decision(DecisionKind::reserve_margin));
  reg.bind("energy", decision(DecisionKind::energy));
}

inline Registry default_registry() {
  auto reg = parse_registry(kDefaultRegistry, "<builtin>");
  bind_builtin_handlers(reg);
  return reg;
}

inline Registry load_registry(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read registry " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  auto reg = parse_registry(ss.str(), path);
  bind_builtin_handlers(reg);
  return reg;
}

// ---------------------------------------------------------------------------
// Dialogue

inline constexpr std::string_view kFunctionResultTag = "[FUNCTION RESULT]";

inline std::string chat_prompt(const std::string& user) { return "user : " + user + std::string(kPromptTail); }

inline std::string second_pass_prompt(const std::string& user, const std::string& result) {
  return "user : " + user + " " + std::string(kFunctionResultTag) + " " + result + std::string(kPromptTail);
}

struct DialogueTurn {
  std::string prompt;
  std::string first_response;
  std::optional<std::string> function_id;
  Args args;
  std::string function_result;  // text shown to the model
  std::string function_value;   // exact value the result slot expands to
  std::string final_response;
  bool flagged = false;
  std::string notice;
};

inline std::string expand_result_slot(const std::string& text, const std::string& value) {
  std::string out = text;
  const std::string slot(Vocabulary::reserved_tokens()[Vocabulary::kResultId]);
  for (std::size_t pos = out.find(slot); pos != std::string::npos; pos = out.find(slot, pos + value.size()))
    out.replace(pos, slot.size(), value);
  return out;
}

inline std::string model_reply(const Model& model, const Vocabulary& vocab, const std::string& prompt,
                               const DecodeOptions& opt) {
  return detokenize(generate(model, std::optional<Tensor>{}, prompt_ids(prompt, vocab), opt), vocab);
}

// Pass 1 answers the prompt; when a function fires its result is appended to
// the prompt for pass 2, whose result slots are replaced by the exact value.
inline DialogueTurn respond(const Model& model, const Vocabulary& vocab, const std::string& user,
                            const Registry& registry, const Context& ctx = {},
                            const DecodeOptions& opt = DecodeOptions::greedy(48)) {
  DialogueTurn turn;
  turn.prompt = user;
  turn.first_response = model_reply(model, vocab, chat_prompt(user), opt);
  std::optional<Trigger> trig;
  try {
    trig = detect_trigger(user, turn.first_response, registry);
  } catch (const ArgumentError& e) {
    turn.final_response = turn.first_response + " [error: " + e.what() + "]";
    turn.flagged = true;
    turn.notice = e.what();
    return turn;
  }
  if (!trig) {
    turn.final_response = turn.first_response;
    return turn;
  }
  turn.function_id = trig->id;
  turn.args = trig->args;
  FunctionOutput out;
  try {
    out = registry.call(trig->id, trig->args, ctx);
  } catch (const std::exception& e) {
    turn.flagged = true;
    turn.notice = std::string("function ") + trig->id + " failed: " + e.what();
    turn.final_response = turn.first_response + " [error: " + turn.notice + "]";
    return turn;
  }
  turn.function_result = out.text;
  turn.function_value = out.value;
  const auto second = model_reply(model, vocab, second_pass_prompt(user, out.text), opt);
  turn.final_response = expand_result_slot(second, out.value);
  if (turn.final_response.find(out.value) == std::string::npos) {
    turn.flagged = true;
    turn.notice = "final response does not carry the function result";
  }
  return turn;
}

// Transcript records: one "role<TAB>text" line per message.
inline std::vector<std::string> transcript_lines(const DialogueTurn& t) {
  std::vector<std::string> out{"user\t" + t.prompt, "assistant\t" + t.first_response};
  if (t.function_id) {
    out.push_back("function\t" + *t.function_id + " " + t.function_result);
    out.push_back("assistant\t" + t.final_response);
  }
  if (t.flagged) out.push_back("notice\t" + t.notice);
  return out;
}

}  // namespace efllm
