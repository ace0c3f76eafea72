#pragma once

// Forecast semantics on top of the model: power binning and interval-median
// decoding, the fixed answer template, prompt construction, error metrics,
// sample-averaged prediction and two-step (draft, then weather-refined)
// inference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "efllm/error.hpp"
#include "efllm/fusion_model.hpp"
#include "efllm/rng.hpp"
#include "efllm/text_codec.hpp"
#include "efllm/trainer.hpp"

namespace efllm {

enum class Scenario { load, pv, wind };

inline std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::load: return "load";
    case Scenario::pv: return "pv";
    case Scenario::wind: return "wind";
  }
  return "?";
}

inline Scenario parse_scenario(const std::string& s) {
  if (s == "load") return Scenario::load;
  if (s == "pv") return Scenario::pv;
  if (s == "wind") return Scenario::wind;
  throw ConfigError("unknown scenario '" + s + "' (expected load, pv or wind)");
}

inline std::string scenario_unit(Scenario) { return "kW"; }

// N + 1 classes over [0, E_r]: class 0 is exactly zero output, class i covers
// ((i - 1) / N * E_r, i / N * E_r].
struct BinningScheme {
  double rated = 798.0;
  std::size_t intervals = 100;

  void validate() const {
    if (!(rated > 0.0)) throw ConfigError("rated capacity must be positive");
    if (intervals < 1) throw ConfigError("interval count must be at least 1");
  }
  std::size_t class_count() const { return intervals + 1; }
  double upper_edge(std::size_t i) const { return static_cast<double>(i) / static_cast<double>(intervals) * rated; }
  double half_width() const { return rated / (2.0 * static_cast<double>(intervals)); }
};

inline std::size_t bin_power(double power, const BinningScheme& s) {
  if (!(power >= 0.0) || power > s.rated) {
    throw RangeError("power " + std::to_string(power) + " outside [0, " + std::to_string(s.rated) + "]");
  }
  if (power == 0.0) return 0;
  auto i = static_cast<std::size_t>(std::ceil(power / s.rated * static_cast<double>(s.intervals)));
  i = std::clamp<std::size_t>(i, 1, s.intervals);
  while (i > 1 && power <= s.upper_edge(i - 1)) --i;
  while (i < s.intervals && power > s.upper_edge(i)) ++i;
  return i;
}

// Interval midpoint used as the class's point prediction.
inline double decode_class(std::size_t cls, const BinningScheme& s) {
  if (cls > s.intervals) {
    throw RangeError("class " + std::to_string(cls) + " exceeds interval count " + std::to_string(s.intervals));
  }
  if (cls == 0) return 0.0;
  return static_cast<double>(2 * cls - 1) / (2.0 * static_cast<double>(s.intervals)) * s.rated;
}

struct ForecastResponse {
  std::optional<std::size_t> class_id;  // task 1
  std::optional<double> value;          // task 2
  std::string unit;
  std::string raw;
  bool conforming = false;
};

inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string render_task1(std::size_t cls) { return "interval: " + std::to_string(cls); }

inline std::string render_task2(double value, Scenario s) {
  return "value: " + format_value(value) + " " + scenario_unit(s);
}

inline std::string render_answer(std::size_t cls, double value, Scenario s) {
  return render_task1(cls) + " " + std::string(kTaskDelimiter) + " " + render_task2(value, s);
}

// Splits text at the first task delimiter into (task 1 part, task 2 part).
inline std::pair<std::string, std::string> split_tasks(const std::string& text) {
  const auto pos = text.find(kTaskDelimiter);
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(' ');
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(' ') - b + 1);
  };
  if (pos == std::string::npos) return {trim(text), ""};
  return {trim(text.substr(0, pos)), trim(text.substr(pos + kTaskDelimiter.size()))};
}

// Parses the fixed template; each task part is parsed independently so a
// response can conform on one task and not the other.
inline ForecastResponse parse_response(const std::string& text) {
  static const std::regex task1_re(R"(^interval: (\d{1,6})$)");
  static const std::regex task2_re(R"(^value: (\d{1,9}\.\d\d) (kW)$)");
  ForecastResponse r;
  r.raw = text;
  const auto [t1, t2] = split_tasks(text);
  std::smatch m;
  if (std::regex_match(t1, m, task1_re)) r.class_id = static_cast<std::size_t>(std::stoul(m[1].str()));
  if (std::regex_match(t2, m, task2_re)) {
    r.value = std::stod(m[1].str());
    r.unit = m[2].str();
  }
  r.conforming = r.class_id.has_value() && r.value.has_value() && text == t1 + " ; " + t2;
  return r;
}

// ISO-8601 UTC rendering of an epoch-seconds instant.
inline std::string iso_timestamp(std::int64_t t) {
  std::int64_t days = t >= 0 ? t / 86400 : (t - 86399) / 86400;
  std::int64_t secs = t - days * 86400;
  // civil-from-days (Howard Hinnant)
  days += 719468;
  const std::int64_t era = (days >= 0 ? days : days - 146096) / 146097;
  const std::int64_t doe = days - era * 146097;
  const std::int64_t yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  std::int64_t y = yoe + era * 400;
  const std::int64_t doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const std::int64_t mp = (5 * doy + 2) / 153;
  const std::int64_t d = doy - (153 * mp + 2) / 5 + 1;
  const std::int64_t m = mp < 10 ? mp + 3 : mp - 9;
  if (m <= 2) ++y;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%04lld-%02lld-%02lldT%02lld:%02lld:%02lld", static_cast<long long>(y),
                static_cast<long long>(m), static_cast<long long>(d), static_cast<long long>(secs / 3600),
                static_cast<long long>((secs / 60) % 60), static_cast<long long>(secs % 60));
  return buf;
}

// Inverse of iso_timestamp for "YYYY-MM-DDTHH:MM:SS".
inline std::int64_t parse_iso_timestamp(const std::string& s) {
  int y, mo, d, h, mi, se;
  if (std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &se) != 6) {
    throw SchemaError("bad ISO-8601 timestamp '" + s + "'");
  }
  const std::int64_t yy = mo <= 2 ? y - 1 : y;
  const std::int64_t era = (yy >= 0 ? yy : yy - 399) / 400;
  const std::int64_t yoe = yy - era * 400;
  const std::int64_t doy = (153 * (mo > 2 ? mo - 3 : mo + 9) + 2) / 5 + d - 1;
  const std::int64_t doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  const std::int64_t days = era * 146097 + doe - 719468;
  return days * 86400 + h * 3600 + mi * 60 + se;
}

// ---------------------------------------------------------------------------
// Prompts

inline std::string forecast_prompt_head(Scenario s, double rated, const std::string& features = "") {
  std::string head = "user : forecast " + scenario_name(s) + " power for the next hour with capacity " +
                     format_value(rated) + " kW .";
  if (!features.empty()) head += " features " + features + " .";
  return head;
}

inline constexpr std::string_view kPromptTail = " assistant :";
inline constexpr std::string_view kSupplementDelimiter = "|";

inline std::string step1_prompt(const std::string& head) { return head + std::string(kPromptTail); }

// Supplement section between the prompt head and the reply marker; reduces to
// the bare delimiter when there is no weather text.
inline std::string supplement_section(const std::string& draft, const std::string& weather) {
  std::string s = " " + std::string(kSupplementDelimiter);
  if (!weather.empty()) s += " draft " + draft + " weather " + weather + " .";
  return s;
}

inline std::string step2_prompt(const std::string& head, const std::string& draft, const std::string& weather) {
  return head + supplement_section(draft, weather) + std::string(kPromptTail);
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t count = 0;
};

inline MetricsReport metrics(const std::vector<double>& predicted, const std::vector<double>& truth) {
  if (predicted.size() != truth.size()) throw DimensionError("prediction and ground-truth lengths differ");
  if (predicted.empty()) throw ContractError("metrics need at least one sample");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double e = predicted[i] - truth[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double n = static_cast<double>(predicted.size());
  return {abs_sum / n, std::sqrt(sq_sum / n), predicted.size()};
}

// Last observed target value carried forward.
inline double persistence_forecast(const SeriesWindow& window, std::size_t target_channel = 0) {
  if (window.length() == 0) throw ContractError("persistence forecast on an empty window");
  return window.at(window.length() - 1, target_channel);
}

// ---------------------------------------------------------------------------
// Inference

struct ForecastInput {
  std::optional<std::vector<double>> window;  // normalized [rows x cols]
  std::size_t rows = 0, cols = 0;
  std::string prompt;

  static ForecastInput from(const TrainingExample& ex, const std::string& prompt) {
    ForecastInput in;
    if (ex.window) {
      in.window = ex.normalized;
      in.rows = ex.window->length();
      in.cols = ex.window->width();
    }
    in.prompt = prompt;
    return in;
  }

  std::optional<Tensor> tensor() const {
    if (!window) return std::nullopt;
    return window_tensor<float>(*window, rows, cols);
  }
};

inline std::string complete(const Model& model, const Vocabulary& vocab, const ForecastInput& in,
                            const DecodeOptions& opt) {
  const auto out = generate(model, in.tensor(), prompt_ids(in.prompt, vocab), opt);
  return detokenize(out, vocab);
}

inline ForecastResponse predict(const Model& model, const Vocabulary& vocab, const ForecastInput& in,
                                const DecodeOptions& opt) {
  return parse_response(complete(model, vocab, in, opt));
}

class HallucinationStormError : public Error {
  using Error::Error;
};

struct AveragedPrediction {
  ForecastResponse response;
  std::size_t samples = 0;
  std::size_t excluded = 0;
};

// Combines conforming samples: majority class (ties to the lower id) and mean
// value over a sorted reduction, so the result is independent of sample order.
inline AveragedPrediction aggregate_samples(const std::vector<ForecastResponse>& samples) {
  std::map<std::size_t, std::size_t> votes;
  std::vector<double> values;
  std::string unit;
  std::size_t excluded = 0;
  for (const auto& s : samples) {
    if (!s.conforming) {
      ++excluded;
      continue;
    }
    ++votes[*s.class_id];
    values.push_back(*s.value);
    unit = s.unit;
  }
  if (values.empty()) {
    throw HallucinationStormError("all " + std::to_string(samples.size()) + " samples were non-conforming");
  }
  std::size_t best = votes.begin()->first, best_n = 0;
  for (const auto& [cls, n] : votes)
    if (n > best_n) best = cls, best_n = n;  // map order gives the lower id on ties
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (const double v : values) total += v;
  AveragedPrediction out;
  out.response.class_id = best;
  out.response.value = total / static_cast<double>(values.size());
  out.response.unit = unit;
  out.response.conforming = true;
  out.response.raw = "interval: " + std::to_string(best) + " ; value: " + format_value(*out.response.value) + " " + unit;
  out.samples = samples.size();
  out.excluded = excluded;
  return out;
}

inline AveragedPrediction averaged_predict(const Model& model, const Vocabulary& vocab, const ForecastInput& in,
                                           std::size_t n, std::uint64_t seed, double temperature = 0.7) {
  std::vector<ForecastResponse> samples;
  for (std::size_t k = 0; k < n; ++k)
    samples.push_back(predict(model, vocab, in, DecodeOptions::sample(temperature, derive_seed(seed, k))));
  return aggregate_samples(samples);
}

struct CotResult {
  std::string step1_prompt, step2_prompt;
  ForecastResponse step1, step2;
};

// Step 1 sees only the series; step 2 re-prompts with the step-1 draft and the
// weather text appended as a supplement.
inline CotResult cot_infer(const Model& model, const Vocabulary& vocab, const ForecastInput& series_only,
                           const std::string& head, const std::string& weather, const DecodeOptions& opt) {
  CotResult r;
  ForecastInput in = series_only;
  r.step1_prompt = in.prompt = step1_prompt(head);
  r.step1 = predict(model, vocab, in, opt);
  r.step2_prompt = in.prompt = step2_prompt(head, r.step1.raw, weather);
  r.step2 = predict(model, vocab, in, opt);
  return r;
}

struct PredictionRow {
  std::int64_t timestamp = 0;
  double truth = 0.0;
  ForecastResponse response;
};

inline void write_predictions_csv(const std::vector<PredictionRow>& rows, const BinningScheme& scheme,
                                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write predictions " + path);
  out << "timestamp,true,pred_class,pred_class_median,pred_reg,conforming\n";
  for (const auto& r : rows) {
    out << iso_timestamp(r.timestamp) << ',' << format_value(r.truth) << ',';
    if (r.response.class_id && *r.response.class_id <= scheme.intervals) {
      out << *r.response.class_id << ',' << format_value(decode_class(*r.response.class_id, scheme));
    } else {
      out << ',';
    }
    out << ',' << (r.response.value ? format_value(*r.response.value) : "") << ',' << (r.response.conforming ? 1 : 0)
        << '\n';
  }
  if (!out) throw IoError("failed writing predictions " + path);
}

}  // namespace efllm
