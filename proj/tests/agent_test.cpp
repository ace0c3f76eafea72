#include "test_util.hpp"

using namespace efllm;
using efllm::testing::TempDir;
using efllm::testing::tiny_config;

namespace {

Table hourly_table(std::size_t n) {
  Table t;
  t.columns = {"timestamp", "target", "const", "x", "weather_text"};
  for (std::size_t r = 0; r < n; ++r) {
    t.rows.push_back({iso_timestamp(1672531200 + static_cast<std::int64_t>(r) * 3600), std::to_string(r), "5",
                      std::to_string(r % 3), r % 2 ? "light rain" : "sunny"});
  }
  return t;
}

std::string result_slot() { return std::string(Vocabulary::reserved_tokens()[Vocabulary::kResultId]); }

bool same_turn(const DialogueTurn& a, const DialogueTurn& b) {
  return a.prompt == b.prompt && a.first_response == b.first_response && a.function_id == b.function_id &&
         a.args == b.args && a.function_result == b.function_result && a.function_value == b.function_value &&
         a.final_response == b.final_response && a.flagged == b.flagged && a.notice == b.notice;
}

struct Chat {
  Model model;
  Vocabulary vocab;
};

// Small model pretrained on the function-calling part of the base corpus.
const Chat& chat_model() {
  static const Chat c = [] {
    CorpusOptions o;
    o.value_sentences = 40;
    o.free_form = 12;
    o.guidance_repeats = 1;
    o.function_dialogues = 90;
    const auto corpus = base_corpus(o);
    auto vocab = build_vocab(vocab_corpus(corpus, o.scenario, o.rated, {}));
    auto cfg = toy_model_config(vocab.size(), 4);
    cfg.window = 8;
    auto model = Model::init(cfg, 2);
    TrainConfig tc;
    tc.lr = 3e-3;
    tc.epochs = 12;
    pretrain(model, encode_corpus(corpus, vocab), tc);
    return Chat{std::move(model), std::move(vocab)};
  }();
  return c;
}

}  // namespace

TEST(Trigger, FeatureEngineeringFires) {
  const auto reg = default_registry();
  const auto t = detect_trigger("please do feature engineering on table.csv", "", reg);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->id, "feature_engineering");
  EXPECT_EQ(t->args.at("path"), "table.csv");
}

TEST(Trigger, CaseInsensitiveAndScansFirstResponse) {
  const auto reg = default_registry();
  auto t = detect_trigger("Run Feature Engineering on Data.csv", "", reg);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->args.at("path"), "Data.csv");
  t = detect_trigger("what is the reserve margin ?", "for predictions 10, 20 with capacity 100", reg);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->id, "reserve_margin");
  EXPECT_EQ(t->args.at("capacity"), "100");
}

TEST(Trigger, NoKeywordsNoTrigger) {
  const auto reg = default_registry();
  EXPECT_FALSE(detect_trigger("hello there", "the sun is out", reg));
  // keywords without the format do not fire
  EXPECT_FALSE(detect_trigger("what is the reserve margin ?", "", reg));
  EXPECT_THROW(detect_trigger("x", "y", Registry{}), ContractError);
}

TEST(Trigger, RegistryOrderBreaksTies) {
  auto reg = parse_registry(
      "function first\n keywords = total\n pattern = total of ([0-9]+)\n slots = n:number\n handler = h\n"
      "function second\n keywords = total\n pattern = total of ([0-9]+)\n slots = n:number\n handler = h\n");
  auto t = detect_trigger("the total of 12 please", "", reg);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->id, "first");
  auto swapped = parse_registry(registry_text(reg).replace(registry_text(reg).find("first"), 5, "third"));
  EXPECT_EQ(detect_trigger("the total of 12 please", "", swapped)->id, "third");
}

TEST(Trigger, UnfillableSlotRaises) {
  auto reg = parse_registry("function f\n keywords = energy\n pattern = energy( of ([0-9]+))?\n slots = skip:text, n:number\n handler = h\n");
  EXPECT_THROW(detect_trigger("energy please", "", reg), ArgumentError);
  auto typed = parse_registry("function f\n keywords = energy\n pattern = energy of (\\w+)\n slots = n:number\n handler = h\n");
  EXPECT_THROW(detect_trigger("energy of lots", "", typed), ArgumentError);
  EXPECT_EQ(detect_trigger("energy of 12", "", typed)->args.at("n"), "12");
}

TEST(Trigger, ForecastPromptsNeverFire) {
  const auto reg = default_registry();
  std::vector<std::string> prompts;
  for (auto s : {Scenario::pv, Scenario::load, Scenario::wind}) {
    for (double rated : {298.0, 500.0, 798.0}) {
      const auto head = forecast_prompt_head(s, rated, "wind_speed, sunlight");
      prompts.push_back(step1_prompt(forecast_prompt_head(s, rated)));
      prompts.push_back(step1_prompt(head));
      prompts.push_back(step2_prompt(head, "interval: 12 ; value: 95.76 kW", "heavy rain turning to clear"));
      prompts.push_back(nowcast_prompt(s, rated));
    }
  }
  for (const auto& qa : guidance_bank()) prompts.push_back(chat_prompt(qa.question));
  ScenarioSpec spec;
  spec.days = 20;
  spec.events = default_events(Scenario::pv, spec.rated);
  const auto d = generate(spec);
  for (const auto& ex : every(to_examples(d, 24, 1, d.scheme()), 7)) {
    prompts.push_back(ex.prompt);
    prompts.push_back(step2_prompt(forecast_prompt_head(Scenario::pv, 798.0), ex.answer, ex.supplement));
  }
  ASSERT_GT(prompts.size(), 60u);
  for (const auto& p : prompts) EXPECT_FALSE(detect_trigger(p, "", reg)) << p;
}

TEST(FeatureEngineering, LagsAndDroppedRows) {
  const auto f = fn_feature_engineering(hourly_table(48));
  ASSERT_EQ(f.rows.size(), 24u);
  const std::vector<std::string> want{"target", "x", "hour", "day_of_week", "weather_light_rain", "weather_sunny",
                                      "lag_1", "lag_24"};
  EXPECT_EQ(f.columns, want);
  for (std::size_t k = 0; k < 24; ++k) {
    const double r = static_cast<double>(k + 24);  // original row index
    EXPECT_EQ(f.rows[k][0], r);
    EXPECT_EQ(f.rows[k][6], r - 1);
    EXPECT_EQ(f.rows[k][7], r - 24);
    EXPECT_EQ(f.rows[k][2], static_cast<double>(k));  // hour of day 0..23 on the second day
    EXPECT_EQ(f.rows[k][3], 1.0);                     // 2023-01-02 is a Monday
    EXPECT_EQ(f.rows[k][4] + f.rows[k][5], 1.0);
    EXPECT_EQ(f.timestamps[k], 1672531200 + static_cast<std::int64_t>(r) * 3600);
  }
}

TEST(FeatureEngineering, ConstantColumnDroppedAndZScored) {
  const auto f = fn_feature_engineering(hourly_table(48));
  EXPECT_EQ(std::find(f.columns.begin(), f.columns.end(), "const"), f.columns.end());
  // x = r % 3 over all 48 rows: mean 1, population sd sqrt(2/3) (48 is a multiple of 3)
  const double sd = std::sqrt(2.0 / 3.0);
  for (std::size_t k = 0; k < f.rows.size(); ++k) EXPECT_NEAR(f.rows[k][1], (static_cast<double>((k + 24) % 3) - 1.0) / sd, 1e-12);
}

TEST(FeatureEngineering, SummaryListsColumns) {
  const auto f = fn_feature_engineering(hourly_table(30));
  std::string want = "columns:";
  for (std::size_t i = 0; i < f.columns.size(); ++i) want += (i ? ", " : " ") + f.columns[i];
  EXPECT_EQ(f.summary, want);
}

TEST(FeatureEngineering, Errors) {
  auto t = hourly_table(48);
  t.columns[1] = "power";
  EXPECT_THROW(fn_feature_engineering(t), SchemaError);
  EXPECT_THROW(fn_feature_engineering(hourly_table(24)), SchemaError);
  auto bad = hourly_table(30);
  bad.rows[3][1] = "n/a";
  EXPECT_THROW(fn_feature_engineering(bad), SchemaError);
}

TEST(FeatureEngineering, FromCsvAndDataset) {
  TempDir dir("agent_fe");
  ScenarioSpec s;
  s.days = 3;
  const auto d = generate(s);
  write_dataset_csv(d, dir.str("d.csv"));
  const auto a = fn_feature_engineering(read_table_csv(dir.str("d.csv")));
  const auto b = fn_feature_engineering(table_from_dataset(d));
  EXPECT_EQ(a.columns, b.columns);
  EXPECT_EQ(a.rows, b.rows);
  EXPECT_EQ(a.rows.size(), d.size() - 24);
  write_feature_csv(a, dir.str("f.csv"));
  EXPECT_EQ(read_table_csv(dir.str("f.csv")).rows.size(), a.rows.size());
}

TEST(PromptEngineering, DeterministicAndGrammatical) {
  const auto a = fn_prompt_engineering("pv", 798.0, "columns: target, sunlight, lag_1");
  EXPECT_EQ(a, fn_prompt_engineering("pv", 798.0, "columns: target, sunlight, lag_1"));
  EXPECT_NE(a.find("capacity 798.00 kW"), std::string::npos);
  const auto p = parse_step1_prompt(a);
  ASSERT_TRUE(p);
  EXPECT_EQ(p->scenario, Scenario::pv);
  EXPECT_EQ(p->rated, 798.0);
  EXPECT_EQ(p->features, "target sunlight lag_1");
}

TEST(PromptEngineering, EmptySummaryStillParses) {
  const auto a = fn_prompt_engineering(Scenario::wind, 2000.0, "");
  const auto p = parse_step1_prompt(a);
  ASSERT_TRUE(p);
  EXPECT_EQ(p->features, "");
  EXPECT_EQ(a, step1_prompt(forecast_prompt_head(Scenario::wind, 2000.0)));
  EXPECT_THROW(fn_prompt_engineering("hydro", 10.0, ""), ConfigError);
  EXPECT_THROW(fn_prompt_engineering("pv", 0.0, ""), ConfigError);
  EXPECT_FALSE(parse_step1_prompt("user : hello assistant :"));
}

TEST(DecisionSupport, HandArithmetic) {
  EXPECT_EQ(fn_decision_support(DecisionKind::utilization, {399, 399}, 798).exact, "50.00%");
  EXPECT_EQ(fn_decision_support(DecisionKind::utilization, {798, 798, 798}, 798).exact, "100.00%");
  EXPECT_EQ(fn_decision_support(DecisionKind::utilization, {783.72}, 798).exact, "98.21%");
  EXPECT_EQ(fn_decision_support(DecisionKind::reserve_margin, {100, 798}, 798).exact, "0.00%");
  EXPECT_EQ(fn_decision_support(DecisionKind::reserve_margin, {199.5}, 798).exact, "75.00%");
  EXPECT_EQ(fn_decision_support(DecisionKind::energy, {1.5, 2.5}, 798).exact, "4.00 kWh");
  EXPECT_EQ(fn_decision_support(DecisionKind::energy, {1.5, 2.5}, 798, 0.25).exact, "1.00 kWh");
  EXPECT_EQ(fn_decision_support(DecisionKind::utilization, {399, 399}, 798).sentence, "capacity utilization = 50.00%");
}

TEST(DecisionSupport, Errors) {
  EXPECT_THROW(fn_decision_support(DecisionKind::utilization, {1}, 0.0), ArgumentError);
  EXPECT_THROW(fn_decision_support(DecisionKind::reserve_margin, {}, 10.0), ArgumentError);
}

TEST(DecisionSupport, RandomAgainstLongDouble) {
  Rng rng(12);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> p(1 + rng.below(24));
    long double sum = 0;
    for (auto& x : p) {
      x = std::round(rng.uniform(0, 798) * 100) / 100;
      sum += x;
    }
    const auto r = fn_decision_support(DecisionKind::utilization, p, 798);
    EXPECT_NEAR(r.value, static_cast<double>(100.0L * sum / (798.0L * p.size())), 1e-9);
  }
}

TEST(Registry, TextRoundTripAndErrors) {
  const auto reg = default_registry();
  const auto again = parse_registry(registry_text(reg));
  ASSERT_EQ(again.specs().size(), reg.specs().size());
  for (std::size_t i = 0; i < reg.specs().size(); ++i) {
    EXPECT_EQ(again.specs()[i].id, reg.specs()[i].id);
    EXPECT_EQ(again.specs()[i].keywords, reg.specs()[i].keywords);
    EXPECT_EQ(again.specs()[i].pattern, reg.specs()[i].pattern);
    EXPECT_EQ(again.specs()[i].handler, reg.specs()[i].handler);
  }
  EXPECT_THROW(parse_registry("keywords = a\n"), ConfigError);
  EXPECT_THROW(parse_registry("function f\n keywords = a\n handler = h\n"), ConfigError);
  EXPECT_THROW(parse_registry("function f\n keywords = a\n pattern = (\n handler = h\n"), ConfigError);
  EXPECT_THROW(parse_registry("function f\n keywords = a\n pattern = x\n slots = n:number\n handler = h\n"), ConfigError);
  EXPECT_THROW(parse_registry("function f\n colour = red\n"), ConfigError);
  EXPECT_THROW(parse_registry("function f\n keywords = a\n pattern = x\n handler = h\nfunction f\n keywords = a\n pattern = x\n handler = h\n"),
               ConfigError);
  EXPECT_THROW(reg.call("nope", {}), IndexError);
  EXPECT_THROW(load_registry("/nonexistent/registry.txt"), IoError);
}

TEST(Dialogue, ResultSlotExpansion) {
  EXPECT_EQ(expand_result_slot("the value is " + result_slot() + " .", "50.00%"), "the value is 50.00% .");
  EXPECT_EQ(expand_result_slot(result_slot() + " " + result_slot(), "<result>"), "<result> <result>");
  EXPECT_EQ(expand_result_slot("nothing", "1"), "nothing");
  EXPECT_EQ(second_pass_prompt("q", "r"), "user : q [FUNCTION RESULT] r assistant :");
}

TEST(Dialogue, NoTriggerPassesThrough) {
  const auto v = build_vocab({"hello there general", "hello there general"});
  const auto m = Model::init(tiny_config(v.size()), 4);
  const auto t = respond(m, v, "hello there", default_registry());
  EXPECT_FALSE(t.function_id);
  EXPECT_EQ(t.final_response, t.first_response);
  EXPECT_FALSE(t.flagged);
  EXPECT_EQ(transcript_lines(t), (std::vector<std::string>{"user\thello there", "assistant\t" + t.first_response}));
}

TEST(Dialogue, IdempotentUnderGreedy) {
  const auto v = build_vocab({"capacity utilization predictions with", "capacity utilization predictions with"});
  const auto m = Model::init(tiny_config(v.size()), 5);
  const auto reg = default_registry();
  const std::string q = "capacity utilization for predictions 399, 399 with capacity 798";
  const auto a = respond(m, v, q, reg), b = respond(m, v, q, reg);
  EXPECT_TRUE(same_turn(a, b));
  ASSERT_TRUE(a.function_id);
  EXPECT_EQ(a.function_value, "50.00%");
  // untrained: either the value made it through the slot or the turn is flagged
  EXPECT_TRUE(a.flagged || a.final_response.find("50.00%") != std::string::npos);
}

TEST(Dialogue, FunctionFailureIsFlagged) {
  const auto v = build_vocab({"feature engineering on", "feature engineering on"});
  const auto m = Model::init(tiny_config(v.size()), 6);
  const auto t = respond(m, v, "feature engineering on missing.csv", default_registry());
  ASSERT_TRUE(t.function_id);
  EXPECT_TRUE(t.flagged);
  EXPECT_NE(t.notice.find("feature_engineering failed"), std::string::npos);
  EXPECT_EQ(t.final_response.rfind(t.first_response, 0), 0u);
  EXPECT_EQ(transcript_lines(t).back(), "notice\t" + t.notice);
}

TEST(Dialogue, DecisionAnswersCarryTheExactNumber) {
  const auto& c = chat_model();
  const auto reg = default_registry();
  Rng rng(321);
  int ok = 0;
  for (int i = 0; i < 10; ++i) {
    const auto d = decision_dialogue(rng, 798.0);
    const auto t = respond(c.model, c.vocab, d.user, reg);
    ASSERT_TRUE(t.function_id) << d.user;
    EXPECT_EQ(t.function_value, d.expected.exact);
    if (!t.flagged && t.final_response.find(d.expected.exact) != std::string::npos) ++ok;
  }
  EXPECT_GE(ok, 9);
}

TEST(Dialogue, ScriptedSession) {
  const auto& c = chat_model();
  const auto reg = default_registry();
  TempDir dir("agent_session");
  ScenarioSpec s;
  s.days = 3;
  write_dataset_csv(generate(s), dir.str("data.csv"));
  Context ctx{{"data_dir", dir.str()}};

  const auto fe = respond(c.model, c.vocab, "run feature engineering on data.csv", reg, ctx);
  ASSERT_EQ(fe.function_id, "feature_engineering");
  EXPECT_FALSE(fe.flagged) << fe.final_response;
  ctx["features"] = fe.function_value;

  const auto pe = respond(c.model, c.vocab, "build the prompt for pv with capacity 798", reg, ctx);
  ASSERT_EQ(pe.function_id, "prompt_engineering");
  EXPECT_FALSE(pe.flagged) << pe.final_response;
  const auto parsed = parse_step1_prompt(pe.function_value);
  ASSERT_TRUE(parsed);
  EXPECT_NE(parsed->features.find("lag_24"), std::string::npos);

  const auto ds = respond(c.model, c.vocab, "what is the capacity utilization for predictions 399.00, 399.00 with capacity 798 ?", reg, ctx);
  ASSERT_EQ(ds.function_id, "utilization");
  EXPECT_FALSE(ds.flagged) << ds.final_response;
  EXPECT_NE(ds.final_response.find("50.00%"), std::string::npos) << ds.final_response;

  const auto plain = respond(c.model, c.vocab, "what does interval zero mean ?", reg, ctx);
  EXPECT_FALSE(plain.function_id);
  EXPECT_EQ(plain.final_response, plain.first_response);
}
