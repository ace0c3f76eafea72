#pragma once

// Toy end-to-end pipeline: the base-model corpus (dialogue templates,
// free-form replies, function-calling exchanges), series-grounded nowcast
// examples, vocabulary assembly, pretraining and the two-step (CoT) data.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "efllm/agent.hpp"
#include "efllm/data_synth.hpp"
#include "efllm/forecast.hpp"
#include "efllm/fusion_model.hpp"
#include "efllm/rng.hpp"
#include "efllm/text_codec.hpp"
#include "efllm/trainer.hpp"

namespace efllm {

inline std::string nowcast_prompt(Scenario s, double rated) {
  return "user : report " + scenario_name(s) + " power for the last hour with capacity " + format_value(rated) +
         " kW ." + std::string(kPromptTail);
}

// Replies the base model gives to a forecast request before fine-tuning.
inline const std::vector<std::string>& free_form_replies() {
  static const std::vector<std::string> r{
      "the sun rises and the output will climb slowly .",
      "clouds may reduce the output in the afternoon .",
      "the output depends on the weather and the season .",
      "at night the plant produces nothing .",
      "it is hard to say without more weather information .",
      "the power should be similar to the last hour .",
  };
  return r;
}

struct CorpusOptions {
  Scenario scenario = Scenario::pv;
  double rated = 798.0;
  std::size_t value_sentences = 600;  // past-value dialogues and reports
  std::size_t free_form = 100;        // free-form replies to forecast prompts
  std::size_t guidance_repeats = 4;
  std::size_t function_dialogues = 120;
  std::uint64_t seed = 7;
};

namespace detail {

inline std::string number_list(const std::vector<double>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + format_value(xs[i]);
  return s;
}

struct DecisionTemplate {
  DecisionKind kind;
  const char* request;  // phrase naming the quantity
  const char* ack;
  const char* answer;
};

inline const std::vector<DecisionTemplate>& decision_templates() {
  static const std::vector<DecisionTemplate> t{
      {DecisionKind::utilization, "what is the capacity utilization", "i will compute the capacity utilization .",
       "the capacity utilization is"},
      {DecisionKind::reserve_margin, "what is the reserve margin", "i will compute the reserve margin .",
       "the reserve margin is"},
      {DecisionKind::energy, "how much energy is expected", "i will compute the energy .", "the expected energy is"},
  };
  return t;
}

}  // namespace detail

// A scripted decision-support request, its first reply and the two-pass
// exchange the base model learns.
struct DecisionDialogue {
  std::string user;
  std::string first_reply;
  std::string final_reply;  // with the result slot
  DecisionResult expected;
};

inline DecisionDialogue decision_dialogue(Rng& rng, double rated) {
  const auto& tpl = detail::decision_templates()[rng.below(detail::decision_templates().size())];
  std::vector<double> preds(1 + rng.below(4));
  for (auto& p : preds) p = std::round(rng.uniform(0.0, rated) * 100.0) / 100.0;
  const double cap = std::round(rated);
  DecisionDialogue d;
  d.user = std::string(tpl.request) + " for predictions " + detail::number_list(preds) + " with capacity " +
           format_value(cap) + " ?";
  d.first_reply = tpl.ack;
  d.final_reply = std::string(tpl.answer) + " " + std::string(Vocabulary::reserved_tokens()[Vocabulary::kResultId]) + " .";
  d.expected = fn_decision_support(tpl.kind, preds, cap);
  return d;
}

// Sentences the base model is pretrained on: templated reports of observed
// power, the guidance bank, free-form answers to forecast requests and the
// two passes of function-calling dialogues.
inline std::vector<std::string> base_corpus(const CorpusOptions& o) {
  Rng rng(o.seed);
  const BinningScheme scheme{o.rated, 100};
  const std::string name = scenario_name(o.scenario);
  static const char* when[] = {"yesterday at noon", "last hour", "this morning", "two hours ago"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < o.value_sentences; ++i) {
    const double v = rng.uniform() < 0.2 ? 0.0 : std::round(rng.uniform(0.0, o.rated) * 100.0) / 100.0;
    const auto answer = render_answer(bin_power(v, scheme), v, o.scenario);
    if (i % 2) out.push_back("report : " + answer + " .");
    else out.push_back("user : what was the " + name + " power " + when[i / 2 % 4] + " ?" + std::string(kPromptTail) + " " + answer);
  }
  const auto forecast = step1_prompt(forecast_prompt_head(o.scenario, o.rated));
  for (std::size_t i = 0; i < o.free_form; ++i)
    out.push_back(forecast + " " + free_form_replies()[i % free_form_replies().size()]);
  for (std::size_t r = 0; r < o.guidance_repeats; ++r)
    for (const auto& qa : guidance_bank()) out.push_back("user : " + qa.question + std::string(kPromptTail) + " " + qa.answer);
  for (std::size_t i = 0; i < o.function_dialogues; ++i) {
    const auto d = decision_dialogue(rng, o.rated);
    out.push_back(chat_prompt(d.user) + " " + d.first_reply);
    out.push_back(second_pass_prompt(d.user, d.expected.sentence) + " " + d.final_reply);
  }
  // feature / prompt engineering requests, second pass seeing the same
  // result text the handlers produce
  const std::string summary = "columns: target, wind_speed, sunlight, hour, day_of_week, weather_clear, lag_1, lag_24";
  static const char* other[][3] = {
      {"run feature engineering on data.csv", "running feature engineering .", ""},
      {"please run feature engineering on history.csv", "running feature engineering .", ""},
      {"build the prompt for pv with capacity 798", "building the prompt .", "prompt ready"},
      {"build the prompt for load with capacity 500", "building the prompt .", "prompt ready"},
  };
  const std::size_t repeats = std::max<std::size_t>(4, o.function_dialogues / 10);
  for (std::size_t r = 0; r < repeats; ++r) {
    for (const auto& [u, a, res] : other) {
      out.push_back(chat_prompt(u) + " " + a);
      out.push_back(second_pass_prompt(u, *res ? std::string(res) : summary) + " finished : " +
                    std::string(Vocabulary::reserved_tokens()[Vocabulary::kResultId]) + " .");
    }
  }
  return out;
}

// Series-grounded examples from a separate plant: the answer reports the last
// observed value of the window, which teaches the base to read the prefix.
inline std::vector<TrainingExample> grounded_examples(const Dataset& d, std::size_t window, std::size_t stride) {
  if (stride == 0) throw ConfigError("grounded stride must be positive");
  auto ex = to_examples(d, window, 1, d.scheme());
  const auto prompt = nowcast_prompt(d.scenario, d.rated);
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < ex.size(); i += stride) {
    auto e = ex[i];
    const double last = d.target[i + window - 1];
    e.prompt = prompt;
    e.target = last;
    e.label_class = bin_power(last, d.scheme());
    e.answer = render_answer(e.label_class, last, d.scenario);
    out.push_back(std::move(e));
  }
  return out;
}

// Step-2 examples: the prompt carries a draft (the persistence forecast
// rendered as an answer) and the weather text at the forecast instant.
inline TrainingExample cot_step2_example(const TrainingExample& ex, Scenario s, double rated, const BinningScheme& scheme) {
  if (!ex.window) throw ContractError("two-step examples need a series window");
  const double last = std::clamp(persistence_forecast(*ex.window), 0.0, rated);
  TrainingExample out = ex;
  out.prompt = step2_prompt(forecast_prompt_head(s, rated), render_answer(bin_power(last, scheme), last, s), ex.supplement);
  return out;
}

// Every string whose tokens the toy model has to know, including weather
// phrases, decimals and the two-step prompt layout.
inline std::vector<std::string> vocab_corpus(const std::vector<std::string>& corpus, Scenario s, double rated,
                                             const std::vector<std::string>& extra = {}) {
  std::vector<std::string> v = corpus;
  const auto head = forecast_prompt_head(s, rated);
  for (int k = 0; k < 2; ++k) {
    v.push_back(nowcast_prompt(s, rated));
    v.push_back(step2_prompt(head, "interval: 0 ; value: 0.00 kW", "clear"));
    for (const auto& w : detail::pv_weather_names()) v.push_back("weather " + w);
    for (const auto& e : default_events(s, rated)) v.push_back(e.phrase);
    v.push_back("hot cold mild holiday calm breezy windy storm");
    v.insert(v.end(), extra.begin(), extra.end());
  }
  return v;
}

inline std::vector<std::vector<std::size_t>> encode_corpus(const std::vector<std::string>& corpus, const Vocabulary& vocab) {
  std::vector<std::vector<std::size_t>> ids;
  for (const auto& s : corpus) {
    auto t = prompt_ids(s, vocab);
    t.push_back(Vocabulary::kEosId);
    ids.push_back(std::move(t));
  }
  return ids;
}

// Desk-scale model: two layers, width 32.
inline ModelConfig toy_model_config(std::size_t vocab_size, std::size_t channels) {
  ModelConfig c;
  c.vocab = vocab_size;
  c.channels = channels;
  c.width = 32;
  c.layers = 2;
  c.heads = 2;
  c.ff_hidden = 128;
  c.max_len = 128;
  c.prefix_attn_init = 5.0;
  c.prefix_recency_init = 8.0;
  c.embed_init_std = 0.05;
  return c;
}

struct BasePlan {
  CorpusOptions corpus;
  std::size_t grounded_days = 60;
  std::size_t grounded_stride = 3;
  std::uint64_t grounded_seed = 1001;
  std::size_t window = 24;
  std::uint64_t init_seed = 1;
  std::size_t width = 32, layers = 2, heads = 2, ff_hidden = 128, max_len = 128;
  TrainConfig train{.lr = 3e-3, .epochs = 10};
};

struct Base {
  Model model;
  Vocabulary vocab;
  TrainResult result;
};

// Builds the vocabulary, initializes a toy model and pretrains it on the
// text corpus plus grounded nowcast examples from a separate plant.
inline Base pretrain_base(const BasePlan& plan) {
  const auto corpus = base_corpus(plan.corpus);
  ScenarioSpec gs;
  gs.kind = plan.corpus.scenario;
  gs.rated = plan.corpus.rated;
  gs.days = plan.grounded_days;
  gs.seed = plan.grounded_seed;
  const auto gd = generate(gs);
  const auto grounded = grounded_examples(gd, plan.window, plan.grounded_stride);
  std::vector<std::string> extra;
  for (const auto& g : grounded) extra.push_back(g.answer);
  auto vocab = build_vocab(vocab_corpus(corpus, plan.corpus.scenario, plan.corpus.rated, extra));
  auto cfg = toy_model_config(vocab.size(), gd.channels().size());
  cfg.window = plan.window;
  cfg.width = plan.width;
  cfg.layers = plan.layers;
  cfg.heads = plan.heads;
  cfg.ff_hidden = plan.ff_hidden;
  cfg.max_len = plan.max_len;
  auto model = Model::init(cfg, plan.init_seed);
  std::vector<EncodedExample> enc;
  for (const auto& g : grounded) enc.push_back(encode(g, vocab, 1.0));
  auto result = pretrain(model, encode_corpus(corpus, vocab), enc, plan.train);
  return {std::move(model), std::move(vocab), std::move(result)};
}

// Every `stride`-th example starting at `offset`.
inline std::vector<TrainingExample> every(const std::vector<TrainingExample>& ex, std::size_t stride,
                                          std::size_t offset = 0, std::size_t limit = SIZE_MAX) {
  std::vector<TrainingExample> out;
  for (std::size_t i = offset; i < ex.size() && out.size() < limit; i += stride) out.push_back(ex[i]);
  return out;
}

inline std::vector<EncodedExample> encode_all(const std::vector<TrainingExample>& ex, const Vocabulary& vocab,
                                              double task_weight) {
  std::vector<EncodedExample> out;
  for (const auto& e : ex) out.push_back(encode(e, vocab, task_weight));
  return out;
}

}  // namespace efllm
