#pragma once

// Seeded synthetic load / PV / wind scenarios with weather text and planted
// sparse events, CSV round-tripping, dataset splits and conversion into
// training examples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "efllm/error.hpp"
#include "efllm/forecast.hpp"
#include "efllm/prefix_encoder.hpp"
#include "efllm/rng.hpp"
#include "efllm/trainer.hpp"

namespace efllm {

// A rare weather situation: `count` rows carry `phrase` as their weather text
// and have `effect` (kW) added to the target.
struct SparseEvent {
  std::string phrase;
  std::size_t count = 1;
  double effect = 0.0;
};

struct ScenarioSpec {
  Scenario kind = Scenario::pv;
  double rated = 798.0;
  std::size_t days = 365;
  std::uint64_t seed = 42;
  std::vector<SparseEvent> events;
  std::int64_t start = 1672531200;  // 2023-01-01T00:00:00Z
  std::size_t bins = 100;

  void validate() const {
    if (!(rated > 0.0)) throw ConfigError("scenario rated capacity must be positive");
    if (days == 0) throw ConfigError("scenario needs at least one day");
    for (const auto& e : events) {
      if (e.phrase.empty()) throw ConfigError("sparse event needs a phrase");
      if (e.count < 1) throw ConfigError("sparse event '" + e.phrase + "' must occur at least once");
      if (std::abs(e.effect) >= rated) throw ConfigError("sparse event '" + e.phrase + "' effect exceeds capacity");
      if (e.phrase.find(',') != std::string::npos) throw ConfigError("event phrases may not contain commas");
    }
  }
};

// Default rare events per scenario, mirroring the kind of weather transitions
// the forecasts are meant to pick up from text.
inline std::vector<SparseEvent> default_events(Scenario kind, double rated) {
  switch (kind) {
    case Scenario::pv:
      return {{"heavy rain turning to clear", 3, 0.3 * rated}, {"clear turning to heavy rain", 4, -0.3 * rated}};
    case Scenario::load: return {{"heat wave alert", 3, 0.15 * rated}};
    case Scenario::wind: return {{"sudden gust front", 3, 0.2 * rated}};
  }
  return {};
}

struct Dataset {
  Scenario scenario = Scenario::pv;
  double rated = 798.0;
  std::size_t bins = 100;
  std::vector<std::string> feature_names;
  std::vector<std::int64_t> timestamps;
  std::vector<double> target;
  std::vector<std::vector<double>> features;  // one vector per row
  std::vector<std::string> weather;

  std::size_t size() const { return timestamps.size(); }
  BinningScheme scheme() const { return {rated, bins}; }

  std::vector<std::string> channels() const {
    std::vector<std::string> c{"target"};
    c.insert(c.end(), feature_names.begin(), feature_names.end());
    return c;
  }

  // Rows [begin, begin + len) with the target as channel 0.
  SeriesWindow window(std::size_t begin, std::size_t len) const {
    if (begin + len > size()) throw IndexError("window beyond the end of the dataset");
    SeriesWindow w;
    w.channels = channels();
    for (std::size_t t = begin; t < begin + len; ++t) {
      w.timestamps.push_back(timestamps[t]);
      w.values.push_back(target[t]);
      w.values.insert(w.values.end(), features[t].begin(), features[t].end());
    }
    return w;
  }

  Dataset subset(std::size_t begin, std::size_t end) const {
    Dataset d;
    d.scenario = scenario;
    d.rated = rated;
    d.bins = bins;
    d.feature_names = feature_names;
    auto cut = [&](const auto& v) { return std::decay_t<decltype(v)>(v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end)); };
    d.timestamps = cut(timestamps);
    d.target = cut(target);
    d.features = cut(features);
    d.weather = cut(weather);
    return d;
  }
};

namespace detail {

inline double day_angle(std::size_t doy) { return 2.0 * M_PI * static_cast<double>(doy) / 365.0; }

inline const std::vector<std::string>& pv_weather_names() {
  static const std::vector<std::string> names{"clear", "cloudy", "light rain", "heavy rain"};
  return names;
}

inline void generate_pv(const ScenarioSpec& spec, Dataset& d) {
  d.feature_names = {"wind_speed", "sunlight", "weather_type"};
  Rng weather_rng(derive_seed(spec.seed, 11)), noise(derive_seed(spec.seed, 12)), wind(derive_seed(spec.seed, 13));
  static const double factor[] = {1.0, 0.65, 0.35, 0.15};
  static const double stay[] = {0.7, 0.5, 0.5, 0.4};
  std::size_t state = 0;
  double wind_speed = 3.0;
  for (std::size_t day = 0; day < spec.days; ++day) {
    if (day > 0 && weather_rng.uniform() > stay[state]) {
      const double u = weather_rng.uniform();
      state = u < 0.45 ? 0 : u < 0.75 ? 1 : u < 0.9 ? 2 : 3;
    }
    const double a = day_angle(day % 365);
    const double sunrise = 6.0 + std::cos(a + 0.17);
    const double sunset = 18.0 - std::cos(a + 0.17);
    const double seasonal = 0.75 + 0.25 * std::cos(a - day_angle(172));
    for (std::size_t h = 0; h < 24; ++h) {
      const double hc = static_cast<double>(h) + 0.5;
      const double elev = (hc > sunrise && hc < sunset) ? std::sin(M_PI * (hc - sunrise) / (sunset - sunrise)) : 0.0;
      wind_speed = std::max(0.0, 3.0 + 0.85 * (wind_speed - 3.0) + 0.6 * wind.normal());
      const double eps = noise.normal(0.0, 0.03);
      double power = 0.0;
      double sun = 0.0;
      if (elev > 0.0) {
        sun = 1000.0 * elev * seasonal * factor[state];
        power = std::clamp(spec.rated * 0.9 * elev * seasonal * factor[state] * (1.0 + eps), 0.0, spec.rated);
      }
      d.target.push_back(power);
      d.features.push_back({wind_speed, sun, static_cast<double>(state)});
      d.weather.push_back(pv_weather_names()[state]);
    }
  }
}

inline void generate_load(const ScenarioSpec& spec, Dataset& d) {
  d.feature_names = {"holiday", "temperature", "dew_point", "wind_speed"};
  Rng noise(derive_seed(spec.seed, 21)), temp_rng(derive_seed(spec.seed, 22)), wind(derive_seed(spec.seed, 23));
  static const std::set<std::size_t> holidays{0, 1, 45, 95, 120, 121, 160, 245, 273, 274, 359, 360};
  double wind_speed = 4.0;
  for (std::size_t day = 0; day < spec.days; ++day) {
    const bool holiday = holidays.count(day % 365) > 0;
    const std::int64_t weekday = (spec.start / 86400 + static_cast<std::int64_t>(day) + 4) % 7;  // 0 = Sunday
    const bool weekend = weekday == 0 || weekday == 6;
    const double a = day_angle(day % 365);
    const double day_temp = 15.0 + 10.0 * std::cos(a - day_angle(200)) + temp_rng.normal(0.0, 2.0);
    for (std::size_t h = 0; h < 24; ++h) {
      const double hd = static_cast<double>(h);
      const double temp = day_temp + 4.0 * std::sin(2.0 * M_PI * (hd - 9.0) / 24.0) + temp_rng.normal(0.0, 0.5);
      const double dew = temp - 3.0 - 3.0 * temp_rng.uniform();
      wind_speed = std::max(0.0, 4.0 + 0.8 * (wind_speed - 4.0) + 0.7 * wind.normal());
      const double shape = 0.45 + 0.2 * std::exp(-(hd - 8.0) * (hd - 8.0) / 4.0) +
                           0.3 * std::exp(-(hd - 19.0) * (hd - 19.0) / 5.0);
      const double calendar = (holiday || weekend) ? 0.85 : 1.0;
      const double weather = 1.0 + 0.012 * std::abs(temp - 18.0);
      const double power = std::clamp(spec.rated * 0.75 * shape * calendar * weather * (1.0 + noise.normal(0.0, 0.02)),
                                      0.0, spec.rated);
      d.target.push_back(power);
      d.features.push_back({holiday ? 1.0 : 0.0, temp, dew, wind_speed});
      std::string text = temp > 25.0 ? "hot" : temp < 5.0 ? "cold" : "mild";
      if (holiday) text += " holiday";
      d.weather.push_back(text);
    }
  }
}

inline void generate_wind(const ScenarioSpec& spec, Dataset& d) {
  d.feature_names = {"wind_speed", "wind_direction"};
  Rng speed_rng(derive_seed(spec.seed, 31)), dir_rng(derive_seed(spec.seed, 32)), noise(derive_seed(spec.seed, 33));
  double v = 7.5, dir = 180.0;
  for (std::size_t t = 0; t < spec.days * 24; ++t) {
    v = std::max(0.0, 7.5 + 0.9 * (v - 7.5) + 1.2 * speed_rng.normal());
    dir = std::fmod(dir + 15.0 * dir_rng.normal() + 360.0, 360.0);
    double p = 0.0;
    if (v >= 3.0 && v < 12.0) p = spec.rated * std::pow((v - 3.0) / 9.0, 3.0);
    else if (v >= 12.0 && v < 25.0) p = spec.rated;
    p = std::clamp(p * (1.0 + noise.normal(0.0, 0.02)), 0.0, spec.rated);
    d.target.push_back(p);
    d.features.push_back({v, dir});
    d.weather.push_back(v < 4.0 ? "calm" : v < 9.0 ? "breezy" : v < 15.0 ? "windy" : "storm");
  }
}

// Rows eligible to host an event for this scenario, preferred rows first.
inline std::vector<std::size_t> event_candidates(const ScenarioSpec& spec, const Dataset& d, const SparseEvent& e,
                                                 Rng& rng) {
  std::vector<std::size_t> preferred, other;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double shifted = d.target[i] + e.effect;
    if (shifted < 0.0 || shifted > spec.rated) continue;
    if (spec.kind == Scenario::pv) {
      const std::size_t hour = i % 24;
      if (hour < 9 || hour > 15 || d.target[i] <= 0.0) continue;
      (d.weather[i] == (e.effect > 0 ? "heavy rain" : "clear") ? preferred : other).push_back(i);
    } else {
      other.push_back(i);
    }
  }
  rng.shuffle(preferred.begin(), preferred.end());
  rng.shuffle(other.begin(), other.end());
  preferred.insert(preferred.end(), other.begin(), other.end());
  return preferred;
}

}  // namespace detail

// Seeded scenario generation. Event placement draws from its own stream, so
// the same spec without events reproduces every non-event row exactly.
inline Dataset generate(const ScenarioSpec& spec) {
  spec.validate();
  Dataset d;
  d.scenario = spec.kind;
  d.rated = spec.rated;
  d.bins = spec.bins;
  switch (spec.kind) {
    case Scenario::pv: detail::generate_pv(spec, d); break;
    case Scenario::load: detail::generate_load(spec, d); break;
    case Scenario::wind: detail::generate_wind(spec, d); break;
  }
  for (std::size_t t = 0; t < d.target.size(); ++t) d.timestamps.push_back(spec.start + static_cast<std::int64_t>(t) * 3600);
  Rng event_rng(derive_seed(spec.seed, 41));
  std::set<std::size_t> used_days;
  for (const auto& e : spec.events) {
    std::size_t placed = 0;
    for (const auto row : detail::event_candidates(spec, d, e, event_rng)) {
      if (placed == e.count) break;
      if (!used_days.insert(row / 24).second) continue;
      d.target[row] += e.effect;
      d.weather[row] = e.phrase;
      ++placed;
    }
    if (placed < e.count) {
      throw ConfigError("cannot place " + std::to_string(e.count) + " occurrences of '" + e.phrase +
                        "' on distinct days within capacity bounds");
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline void write_dataset_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset " + path);
  out << "timestamp,target";
  for (const auto& f : d.feature_names) out << ',' << f;
  out << ",weather_text\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    out << iso_timestamp(d.timestamps[i]) << ',' << format_csv_number(d.target[i]);
    for (const double f : d.features[i]) out << ',' << format_csv_number(f);
    out << ',' << d.weather[i] << '\n';
  }
  if (!out) throw IoError("failed writing dataset " + path);
  std::ofstream meta(path + ".meta", std::ios::binary);
  if (!meta) throw IoError("cannot write metadata " + path + ".meta");
  meta << "scenario,e_r,n_bins\n" << scenario_name(d.scenario) << ',' << format_csv_number(d.rated) << ',' << d.bins << '\n';
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline Dataset read_dataset_csv(const std::string& path) {
  std::ifstream meta(path + ".meta", std::ios::binary);
  if (!meta) throw IoError("missing metadata sidecar " + path + ".meta");
  std::string line;
  std::getline(meta, line);
  if (line != "scenario,e_r,n_bins") throw SchemaError("bad metadata header in " + path + ".meta");
  std::getline(meta, line);
  const auto m = split_csv_line(line);
  if (m.size() != 3) throw SchemaError("bad metadata row in " + path + ".meta");
  Dataset d;
  d.scenario = parse_scenario(m[0]);
  d.rated = std::stod(m[1]);
  d.bins = static_cast<std::size_t>(std::stoul(m[2]));

  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read dataset " + path);
  std::getline(in, line);
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "timestamp" || header[1] != "target" || header.back() != "weather_text") {
    throw SchemaError("dataset header must be timestamp,target,<features...>,weather_text");
  }
  d.feature_names.assign(header.begin() + 2, header.end() - 1);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw SchemaError(path + ":" + std::to_string(lineno) + ": wrong column count");
    d.timestamps.push_back(parse_iso_timestamp(cells[0]));
    d.target.push_back(std::stod(cells[1]));
    std::vector<double> f;
    for (std::size_t i = 2; i + 1 < cells.size(); ++i) f.push_back(std::stod(cells[i]));
    d.features.push_back(std::move(f));
    d.weather.push_back(cells.back());
  }
  return d;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitPolicy {
  enum class Kind { chronological, transfer, capacity_transfer };
  Kind kind = Kind::chronological;
  double train_fraction = 0.8;
  double test_fraction = 0.2;
  double factor = 1.0;

  static SplitPolicy chronological(double train, double test) { return {Kind::chronological, train, test, 1.0}; }
  static SplitPolicy transfer() { return {Kind::transfer, 0.5, 0.5, 1.0}; }
  static SplitPolicy capacity_transfer(double factor) { return {Kind::capacity_transfer, 0.5, 0.5, factor}; }
};

// Rescales targets to a plant of capacity rated * factor.
inline Dataset rescale_capacity(const Dataset& d, double factor) {
  if (!(factor > 0.0)) throw ConfigError("capacity factor must be positive");
  Dataset out = d;
  out.rated = d.rated * factor;
  for (auto& t : out.target) t = std::min(t * factor, out.rated);
  return out;
}

// chronological: leading train rows, then the following test rows.
// transfer: first half / second half.
// capacity_transfer: first half as the source plant, second half rescaled to
// the target plant.
inline std::pair<Dataset, Dataset> split(const Dataset& d, const SplitPolicy& p) {
  if (d.size() == 0) throw ContractError("cannot split an empty dataset");
  std::size_t cut = 0, end = d.size();
  switch (p.kind) {
    case SplitPolicy::Kind::chronological: {
      if (p.train_fraction <= 0.0 || p.test_fraction <= 0.0 || p.train_fraction + p.test_fraction > 1.0 + 1e-12) {
        throw ConfigError("chronological split fractions must be positive and sum to at most 1");
      }
      cut = static_cast<std::size_t>(std::floor(p.train_fraction * static_cast<double>(d.size())));
      end = std::min(d.size(), cut + static_cast<std::size_t>(std::round(p.test_fraction * static_cast<double>(d.size()))));
      break;
    }
    case SplitPolicy::Kind::transfer:
    case SplitPolicy::Kind::capacity_transfer: cut = d.size() / 2; break;
  }
  if (cut == 0 || cut >= end) throw ContractError("split leaves one side empty");
  auto train = d.subset(0, cut);
  auto test = d.subset(cut, end);
  if (p.kind == SplitPolicy::Kind::capacity_transfer) test = rescale_capacity(test, p.factor);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Examples

struct QaPair {
  std::string question;
  std::string answer;
};

// Operational-guidance questions used as text-only training examples.
inline const std::vector<QaPair>& guidance_bank() {
  static const std::vector<QaPair> bank{
      {"what does the interval class mean ?", "the interval class is the share of rated capacity in one percent steps ."},
      {"what does interval zero mean ?", "interval zero means the plant produces no power ."},
      {"how is the value reported ?", "the value is the predicted power in kW with two decimals ."},
      {"why is pv power zero at night ?", "there is no sunlight at night so pv power is zero ."},
      {"what drives wind power ?", "wind power follows the wind speed through the power curve ."},
      {"what drives the load ?", "the load follows the daily routine the temperature and holidays ."},
      {"how should i use the forecast ?", "use the forecast to schedule reserves and plan dispatch ."},
      {"what is the rated capacity ?", "the rated capacity is the maximum grid connected power of the plant ."},
      {"what happens after heavy rain turning to clear ?", "after heavy rain turning to clear pv power rises quickly ."},
      {"what happens when clear turning to heavy rain ?", "when clear turning to heavy rain pv power drops quickly ."},
      {"how many classes are there ?", "there are one hundred and one classes including interval zero ."},
      {"what is the reserve margin ?", "the reserve margin is the spare capacity above the forecast peak ."},
  };
  return bank;
}

// Text-only examples inserted after every `multimodal_per_text` multimodal
// examples (0 disables them).
struct ModePlan {
  std::size_t multimodal_per_text = 0;
};

inline TrainingExample guidance_example(std::size_t k) {
  const auto& qa = guidance_bank()[k % guidance_bank().size()];
  TrainingExample ex;
  ex.mode = Mode::text;
  ex.prompt = "user : " + qa.question + std::string(kPromptTail);
  ex.answer = qa.answer;
  return ex;
}

inline NormalizationParams fit_dataset_normalization(const Dataset& d) { return fit_normalization(d.window(0, d.size())); }

// Sliding windows of length `window` predicting the target `horizon` steps
// after the window's last row.
inline std::vector<TrainingExample> to_examples(const Dataset& d, std::size_t window, std::size_t horizon,
                                                const BinningScheme& scheme, const ModePlan& plan = {},
                                                const NormalizationParams* norm = nullptr) {
  if (window == 0 || horizon == 0) throw ContractError("window and horizon must be positive");
  if (d.size() < window + horizon) {
    throw ContractError("window of " + std::to_string(window) + " plus horizon " + std::to_string(horizon) +
                        " exceeds dataset length " + std::to_string(d.size()));
  }
  const NormalizationParams params = norm ? *norm : fit_dataset_normalization(d);
  const std::string prompt = step1_prompt(forecast_prompt_head(d.scenario, d.rated));
  std::vector<TrainingExample> out;
  std::size_t emitted = 0, text_k = 0;
  for (std::size_t i = 0; i + window + horizon <= d.size(); ++i) {
    const std::size_t target_row = i + window - 1 + horizon;
    TrainingExample ex;
    ex.mode = Mode::multimodal;
    ex.window = d.window(i, window);
    ex.normalized = apply_normalization(*ex.window, params);
    ex.prompt = prompt;
    ex.target = d.target[target_row];
    ex.label_class = bin_power(std::clamp(ex.target, 0.0, scheme.rated), scheme);
    ex.answer = render_answer(ex.label_class, ex.target, d.scenario);
    ex.supplement = d.weather[target_row];
    ex.timestamp = d.timestamps[target_row];
    out.push_back(std::move(ex));
    if (plan.multimodal_per_text > 0 && ++emitted % plan.multimodal_per_text == 0) out.push_back(guidance_example(text_k++));
  }
  return out;
}

}  // namespace efllm
