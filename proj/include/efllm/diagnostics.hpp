#pragma once

// Hallucination and stability diagnostics: sentence-embedding similarity,
// one-way ANOVA with an F-distribution p-value, repeated-inference stability
// runs and the task-weight sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "efllm/error.hpp"
#include "efllm/forecast.hpp"
#include "efllm/fusion_model.hpp"
#include "efllm/rng.hpp"
#include "efllm/text_codec.hpp"

namespace efllm {

// ---------------------------------------------------------------------------
// Similarity

inline constexpr double kHallucinationThreshold = 0.8;

struct SentenceEmbedding {
  std::vector<double> vec;
  bool empty = false;  // no tokens: zero vector
};

// Mean of the embedding-table rows of the tokenized text.
template <class T>
SentenceEmbedding sentence_embed(const std::string& text, const BasicTensor<T>& table, const Vocabulary& vocab) {
  if (table.rows() != vocab.size()) throw DimensionError("embedding table rows differ from vocabulary size");
  const auto seq = tokenize(text, vocab);
  const std::size_t d = table.cols();
  SentenceEmbedding e;
  e.vec.assign(d, 0.0);
  if (seq.ids.empty()) {
    e.empty = true;
    return e;
  }
  const auto data = table.data();
  for (const auto id : seq.ids)
    for (std::size_t j = 0; j < d; ++j) e.vec[j] += static_cast<double>(data[id * d + j]);
  for (auto& x : e.vec) x /= static_cast<double>(seq.ids.size());
  return e;
}

struct SimilarityReport {
  double similarity = 0.0;
  double threshold = kHallucinationThreshold;
  bool is_hallucination = false;
  bool degenerate = false;  // zero-norm output embedding
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline SimilarityReport classify(double similarity, double threshold, bool degenerate = false) {
  if (!(threshold >= -1.0 && threshold <= 1.0)) throw ConfigError("similarity threshold must lie in [-1, 1]");
  return {similarity, threshold, similarity < threshold, degenerate};
}

template <class T>
SimilarityReport similarity(const std::string& expected, const std::string& output, const BasicTensor<T>& table,
                            const Vocabulary& vocab, double threshold = kHallucinationThreshold) {
  const auto e = sentence_embed(expected, table, vocab);
  if (e.empty) throw ContractError("expected text is empty");
  const auto o = sentence_embed(output, table, vocab);
  double on = 0.0;
  for (const double x : o.vec) on += x * x;
  const bool degenerate = on == 0.0;
  return classify(degenerate ? 0.0 : cosine(e.vec, o.vec), threshold, degenerate);
}

// ---------------------------------------------------------------------------
// ANOVA

struct AnovaReport {
  double sst = 0.0, ssb = 0.0, ssw = 0.0, msb = 0.0, msw = 0.0, f = 0.0, p = 1.0;
  std::size_t k = 0, n = 0;
  std::vector<std::size_t> group_sizes;
};

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-10;
  double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ContractError("incomplete beta needs positive shape parameters");
  if (!(x >= 0.0 && x <= 1.0)) throw RangeError("incomplete beta argument outside [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::beta_cf(a, b, x) / a;
  return 1.0 - bt * detail::beta_cf(b, a, 1.0 - x) / b;
}

// Upper tail P(F > f) of the F(d1, d2) distribution.
inline double f_survival(double f, double d1, double d2) {
  if (!(d1 > 0.0) || !(d2 > 0.0)) throw ContractError("F distribution needs positive degrees of freedom");
  if (!(f > 0.0)) return 1.0;
  if (std::isinf(f)) return 0.0;
  return incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

inline AnovaReport anova(const std::vector<std::vector<double>>& groups) {
  AnovaReport r;
  r.k = groups.size();
  if (r.k < 2) throw ContractError("ANOVA needs at least two groups");
  double total = 0.0;
  for (const auto& g : groups) {
    if (g.empty()) throw ContractError("ANOVA group is empty");
    r.group_sizes.push_back(g.size());
    r.n += g.size();
    for (const double x : g) {
      if (!std::isfinite(x)) throw NumericError("ANOVA observation is not finite");
      total += x;
    }
  }
  if (r.n <= r.k) throw ContractError("ANOVA needs more observations than groups");
  const double grand = total / static_cast<double>(r.n);
  for (const auto& g : groups) {
    double s = 0.0;
    for (const double x : g) s += x;
    const double mean = s / static_cast<double>(g.size());
    r.ssb += static_cast<double>(g.size()) * (mean - grand) * (mean - grand);
    for (const double x : g) {
      r.ssw += (x - mean) * (x - mean);
      r.sst += (x - grand) * (x - grand);
    }
  }
  r.msb = r.ssb / static_cast<double>(r.k - 1);
  r.msw = r.ssw / static_cast<double>(r.n - r.k);
  if (!(r.msw > 0.0)) throw ZeroVarianceError("within-group variance is zero; F is undefined");
  r.f = r.msb / r.msw;
  r.p = f_survival(r.f, static_cast<double>(r.k - 1), static_cast<double>(r.n - r.k));
  return r;
}

// ---------------------------------------------------------------------------
// Stability

struct StabilityConfig {
  std::size_t runs = 100;
  std::size_t groups = 10;
  double temperature = 0.7;
  std::uint64_t seed = 42;
  double max_excluded = 0.2;

  void validate() const {
    if (groups < 2) throw ConfigError("stability run needs at least two groups");
    if (runs == 0 || runs % groups != 0) throw ConfigError("stability runs must be a positive multiple of the group count");
    if (!(max_excluded >= 0.0 && max_excluded < 1.0)) throw ConfigError("excluded fraction must lie in [0, 1)");
  }
};

struct StabilityResult {
  AnovaReport report;
  std::vector<std::optional<double>> values;  // per run, in run order
  std::size_t excluded = 0;
};

// Splits per-run values into sequential groups, skipping missing ones.
inline std::vector<std::vector<double>> sequential_groups(const std::vector<std::optional<double>>& values,
                                                          std::size_t k) {
  if (k == 0 || values.size() % k != 0) throw ContractError("values do not split evenly into groups");
  const std::size_t per = values.size() / k;
  std::vector<std::vector<double>> out(k);
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i]) out[i / per].push_back(*values[i]);
  return out;
}

// Repeated sampled inferences on one input; the regression values feed the
// ANOVA. Greedy decoding makes every run identical, which surfaces as a
// ZeroVarianceError.
inline StabilityResult stability_run(const std::function<ForecastResponse(const DecodeOptions&)>& infer,
                                     const StabilityConfig& cfg, bool greedy = false) {
  cfg.validate();
  StabilityResult r;
  for (std::size_t i = 0; i < cfg.runs; ++i) {
    const auto opt = greedy ? DecodeOptions::greedy() : DecodeOptions::sample(cfg.temperature, derive_seed(cfg.seed, i));
    const auto resp = infer(opt);
    if (resp.value) r.values.push_back(*resp.value);
    else r.values.push_back(std::nullopt), ++r.excluded;
  }
  if (static_cast<double>(r.excluded) > cfg.max_excluded * static_cast<double>(cfg.runs)) {
    throw UnstableModelError(std::to_string(r.excluded) + " of " + std::to_string(cfg.runs) +
                             " inferences were non-conforming");
  }
  auto groups = sequential_groups(r.values, cfg.groups);
  groups.erase(std::remove_if(groups.begin(), groups.end(), [](const auto& g) { return g.empty(); }), groups.end());
  r.report = anova(groups);
  return r;
}

inline StabilityResult stability_run(const Model& model, const Vocabulary& vocab, const ForecastInput& in,
                                     const StabilityConfig& cfg, bool greedy = false) {
  return stability_run([&](const DecodeOptions& opt) { return predict(model, vocab, in, opt); }, cfg, greedy);
}

struct AnovaRow {
  std::string scenario;
  double f = 0.0, p = 1.0;
};

inline void write_anova_csv(const std::vector<AnovaRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "scenario,F,p\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6g,%.6g\n", r.scenario.c_str(), r.f, r.p);
    out << buf;
  }
  if (!out) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Evaluation and sweep

struct ForecastEvaluation {
  double mae_c = 0.0, mae_r = 0.0;  // over responses whose task part parsed
  double hp_c_pct = 0.0, hp_r_pct = 0.0;
  double class_accuracy = 0.0, conforming_rate = 0.0;
  std::size_t count = 0, parsed_c = 0, parsed_r = 0;
  std::vector<std::string> responses;
};

// Responses over labelled examples (sampled decoding draws a per-example
// seed); each task part is compared with the expected task text and counts as
// a hallucination when the similarity falls below the threshold. With
// `isolate_tasks` the task-2 part is generated after the reference task-1
// text, so each span is judged on its own.
inline ForecastEvaluation evaluate_forecasts(const Model& model, const Vocabulary& vocab,
                                             const std::vector<TrainingExample>& examples, const BinningScheme& scheme,
                                             double threshold = kHallucinationThreshold,
                                             const DecodeOptions& opt = DecodeOptions::greedy(24),
                                             bool isolate_tasks = false) {
  ForecastEvaluation ev;
  double abs_c = 0.0, abs_r = 0.0;
  std::size_t hall_c = 0, hall_r = 0, correct = 0, conforming = 0;
  const auto& table = model.base().tok_emb;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.mode != Mode::multimodal) continue;
    ++ev.count;
    auto o = opt;
    if (o.mode == DecodeOptions::Mode::sample) o.seed = derive_seed(opt.seed, i);
    const auto text = complete(model, vocab, ForecastInput::from(ex, ex.prompt), o);
    ev.responses.push_back(text);
    const auto resp = parse_response(text);
    const auto [exp1, exp2] = split_tasks(ex.answer);
    auto [out1, out2] = split_tasks(text);
    if (isolate_tasks) {
      auto in = ForecastInput::from(ex, ex.prompt + " " + exp1 + " " + std::string(kTaskDelimiter));
      out2 = complete(model, vocab, in, o);
    }
    if (similarity(exp1, out1, table, vocab, threshold).is_hallucination) ++hall_c;
    if (similarity(exp2, out2, table, vocab, threshold).is_hallucination) ++hall_r;
    if (resp.conforming) ++conforming;
    if (resp.class_id && *resp.class_id <= scheme.intervals) {
      ++ev.parsed_c;
      abs_c += std::abs(decode_class(*resp.class_id, scheme) - ex.target);
      if (*resp.class_id == ex.label_class) ++correct;
    }
    if (resp.value) {
      ++ev.parsed_r;
      abs_r += std::abs(*resp.value - ex.target);
    }
  }
  if (ev.count == 0) throw ContractError("evaluation needs at least one multimodal example");
  const double n = static_cast<double>(ev.count);
  ev.mae_c = ev.parsed_c ? abs_c / static_cast<double>(ev.parsed_c) : std::numeric_limits<double>::quiet_NaN();
  ev.mae_r = ev.parsed_r ? abs_r / static_cast<double>(ev.parsed_r) : std::numeric_limits<double>::quiet_NaN();
  ev.hp_c_pct = 100.0 * static_cast<double>(hall_c) / n;
  ev.hp_r_pct = 100.0 * static_cast<double>(hall_r) / n;
  ev.class_accuracy = static_cast<double>(correct) / n;
  ev.conforming_rate = static_cast<double>(conforming) / n;
  return ev;
}

struct SweepRow {
  double w = 0.0;
  double mae_c = 0.0, mae_r = 0.0, hp_c_pct = 0.0, hp_r_pct = 0.0;
  std::size_t seeds_ok = 0;
  bool flagged = false;
  std::string notice;
};

using SweepCell = std::function<ForecastEvaluation(double w, std::uint64_t seed)>;

// One cell per (w, seed); rows keep the order of `ws` and average the cells
// that succeeded. A failing cell flags its row without stopping the sweep.
inline std::vector<SweepRow> sweep(const SweepCell& cell, const std::vector<double>& ws,
                                   const std::vector<std::uint64_t>& seeds) {
  if (ws.empty() || seeds.empty()) throw ConfigError("sweep needs at least one weight and one seed");
  for (const double w : ws)
    if (!(w > 0.0 && w < 1.0)) throw ConfigError("sweep weights must lie in (0, 1)");
  std::vector<SweepRow> rows;
  for (const double w : ws) {
    SweepRow row;
    row.w = w;
    double mc = 0.0, mr = 0.0;
    std::size_t nc = 0, nr = 0;
    for (const auto seed : seeds) {
      try {
        const auto ev = cell(w, seed);
        row.hp_c_pct += ev.hp_c_pct;
        row.hp_r_pct += ev.hp_r_pct;
        if (std::isfinite(ev.mae_c)) mc += ev.mae_c, ++nc;
        if (std::isfinite(ev.mae_r)) mr += ev.mae_r, ++nr;
        ++row.seeds_ok;
      } catch (const std::exception& e) {
        row.flagged = true;
        row.notice += (row.notice.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": " + e.what();
      }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (row.seeds_ok > 0) {
      row.hp_c_pct /= static_cast<double>(row.seeds_ok);
      row.hp_r_pct /= static_cast<double>(row.seeds_ok);
    } else {
      row.hp_c_pct = row.hp_r_pct = nan;
    }
    row.mae_c = nc ? mc / static_cast<double>(nc) : nan;
    row.mae_r = nr ? mr / static_cast<double>(nr) : nan;
    rows.push_back(row);
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "w,mae_c,mae_r,hp_c_pct,hp_r_pct\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.2f,%.4f,%.4f,%.2f,%.2f\n", r.w, r.mae_c, r.mae_r, r.hp_c_pct, r.hp_r_pct);
    out << buf;
  }
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace efllm
