#include "test_util.hpp"

using namespace efllm;
using efllm::testing::TempDir;
using efllm::testing::tiny_config;

TEST(Binning, PaperExamples) {
  const BinningScheme s{798.0, 100};
  EXPECT_EQ(bin_power(0.0, s), 0u);
  EXPECT_EQ(bin_power(798.0, s), 100u);
  EXPECT_EQ(bin_power(4.0, s), 1u);
  EXPECT_EQ(bin_power(7.98, s), 1u);
  EXPECT_EQ(bin_power(7.99, s), 2u);
  EXPECT_EQ(s.class_count(), 101u);
  EXPECT_THROW(bin_power(-0.01, s), RangeError);
  EXPECT_THROW(bin_power(798.01, s), RangeError);
  EXPECT_THROW(bin_power(std::nan(""), s), RangeError);
}

TEST(Binning, ExhaustiveScanPartitionsTheRange) {
  const BinningScheme s{798.0, 100};
  const int grid = 100000;
  std::set<std::size_t> seen;
  for (int k = 0; k <= grid; ++k) {
    const double p = 798.0 * k / grid;
    const auto c = bin_power(p, s);
    seen.insert(c);
    if (p == 0.0) {
      ASSERT_EQ(c, 0u);
      continue;
    }
    ASSERT_NE(c, 0u) << p;
    // exactly one interval (left-open, right-closed) holds p
    int hits = 0;
    std::size_t hit = 0;
    for (std::size_t i = 1; i <= 100; ++i) {
      const double lo = static_cast<double>(i - 1) / 100.0 * 798.0, hi = static_cast<double>(i) / 100.0 * 798.0;
      if (lo < p && p <= hi) ++hits, hit = i;
    }
    ASSERT_EQ(hits, 1) << p;
    ASSERT_EQ(c, hit) << p;
    ASSERT_LE(std::abs(decode_class(c, s) - p), 3.99 + 1e-9) << p;
  }
  EXPECT_EQ(seen.size(), 101u);
}

TEST(Binning, DecodeClass) {
  const BinningScheme s{798.0, 100};
  EXPECT_EQ(decode_class(0, s), 0.0);
  EXPECT_NEAR(decode_class(1, s), 3.99, 1e-12);
  EXPECT_NEAR(decode_class(100, s), 794.01, 1e-9);
  EXPECT_THROW(decode_class(101, s), RangeError);
  for (std::size_t i = 1; i <= 100; ++i) EXPECT_EQ(bin_power(decode_class(i, s), s), i);
}

TEST(Binning, OtherSchemes) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const BinningScheme s{rng.uniform(1.0, 5000.0), 1 + rng.below(200)};
    for (int k = 0; k < 200; ++k) {
      const double p = rng.uniform(0.0, s.rated);
      const auto c = bin_power(p, s);
      ASSERT_GE(c, 1u);
      ASSERT_LE(c, s.intervals);
      ASSERT_LE(std::abs(decode_class(c, s) - p), s.half_width() * (1 + 1e-12));
    }
  }
}

TEST(Template, RenderAndParse) {
  EXPECT_EQ(render_answer(42, 335.16, Scenario::pv), "interval: 42 ; value: 335.16 kW");
  const auto r = parse_response("interval: 42 ; value: 335.16 kW");
  EXPECT_TRUE(r.conforming);
  EXPECT_EQ(*r.class_id, 42u);
  EXPECT_EQ(*r.value, 335.16);
  EXPECT_EQ(r.unit, "kW");
}

TEST(Template, RoundTripProperty) {
  Rng rng(8);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t cls = rng.below(101);
    const double v = std::round(rng.uniform(0.0, 1e5) * 100.0) / 100.0;
    const auto r = parse_response(render_answer(cls, v, Scenario::load));
    ASSERT_TRUE(r.conforming);
    ASSERT_EQ(*r.class_id, cls);
    ASSERT_EQ(format_value(*r.value), format_value(v));
  }
}

TEST(Template, NonConforming) {
  EXPECT_FALSE(parse_response("The weather suggests that the output will rise").conforming);
  EXPECT_FALSE(parse_response("").conforming);
  EXPECT_FALSE(parse_response("interval: 4").conforming);
  EXPECT_FALSE(parse_response("interval: 4 ; value: 3.1 kW").conforming);
  EXPECT_FALSE(parse_response("interval: 4  ; value: 3.10 kW").conforming);
  const auto half = parse_response("interval: 4 ; clouds");
  EXPECT_TRUE(half.class_id);
  EXPECT_FALSE(half.value);
  EXPECT_FALSE(half.conforming);
}

TEST(Metrics, HandCases) {
  auto a = metrics({1, 2, 3}, {1, 2, 3});
  EXPECT_EQ(a.mae, 0.0);
  EXPECT_EQ(a.rmse, 0.0);
  auto b = metrics({1, 3}, {2, 2});
  EXPECT_EQ(b.mae, 1.0);
  EXPECT_EQ(b.rmse, 1.0);
  auto c = metrics({0, 4}, {2, 2});
  EXPECT_EQ(c.mae, 2.0);
  EXPECT_EQ(c.rmse, 2.0);  // errors are -2 and +2
  auto d = metrics({0, 4}, {2, 1});
  EXPECT_NEAR(d.mae, 2.5, 1e-12);
  EXPECT_NEAR(d.rmse, std::sqrt(6.5), 1e-12);
  EXPECT_THROW(metrics({}, {}), ContractError);
  EXPECT_THROW(metrics({1}, {1, 2}), DimensionError);
}

TEST(Metrics, RmseDominatesMae) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(1 + rng.below(30)), y(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.normal(0, 100), y[i] = rng.normal(0, 100);
    const auto m = metrics(p, y);
    EXPECT_GE(m.rmse + 1e-12, m.mae);
    EXPECT_GE(m.mae, 0.0);
  }
}

TEST(Averaging, MajorityAndMean) {
  std::vector<ForecastResponse> s;
  for (int i = 0; i < 30; ++i) s.push_back(parse_response("interval: 3 ; value: 10.00 kW"));
  for (int i = 0; i < 20; ++i) s.push_back(parse_response("interval: 4 ; value: 12.00 kW"));
  auto a = aggregate_samples(s);
  EXPECT_EQ(*a.response.class_id, 3u);
  EXPECT_NEAR(*a.response.value, (30 * 10.0 + 20 * 12.0) / 50.0, 1e-12);
  auto b = aggregate_samples({parse_response("interval: 3 ; value: 10.00 kW"), parse_response("interval: 4 ; value: 12.00 kW")});
  EXPECT_EQ(*b.response.class_id, 3u);  // tie goes to the lower id
  EXPECT_EQ(*b.response.value, 11.0);
}

TEST(Averaging, IdenticalSamplesEqualTheSingleAnswer) {
  const auto one = parse_response("interval: 17 ; value: 130.25 kW");
  auto a = aggregate_samples(std::vector<ForecastResponse>(50, one));
  EXPECT_EQ(a.response.raw, one.raw);
  EXPECT_EQ(a.excluded, 0u);
}

TEST(Averaging, ExcludesAndStorms) {
  auto a = aggregate_samples({parse_response("clouds"), parse_response("interval: 2 ; value: 5.00 kW")});
  EXPECT_EQ(a.excluded, 1u);
  EXPECT_EQ(a.samples, 2u);
  EXPECT_THROW(aggregate_samples({parse_response("clouds"), parse_response("sun")}), HallucinationStormError);
}

TEST(Averaging, OrderIndependent) {
  std::vector<ForecastResponse> s;
  Rng rng(3);
  for (int i = 0; i < 40; ++i)
    s.push_back(parse_response(render_answer(rng.below(5), std::round(rng.uniform(0, 500) * 100) / 100, Scenario::pv)));
  const auto a = aggregate_samples(s);
  rng.shuffle(s.begin(), s.end());
  const auto b = aggregate_samples(s);
  EXPECT_EQ(a.response.raw, b.response.raw);
  EXPECT_EQ(*a.response.value, *b.response.value);
}

TEST(Prompts, StepTwoDiffersOnlyInSupplement) {
  const auto head = forecast_prompt_head(Scenario::pv, 798.0);
  const auto p1 = step1_prompt(head);
  const auto p2 = step2_prompt(head, "interval: 3 ; value: 20.00 kW", "heavy rain turning to clear");
  EXPECT_EQ(p1.substr(0, head.size()), head);
  EXPECT_EQ(p2.substr(0, head.size()), head);
  EXPECT_TRUE(p1.ends_with(" assistant :"));
  EXPECT_TRUE(p2.ends_with(" assistant :"));
  EXPECT_EQ(p2.substr(head.size(), p2.size() - p1.size()),
            " | draft interval: 3 ; value: 20.00 kW weather heavy rain turning to clear .");
  EXPECT_EQ(step2_prompt(head, "anything", ""), head + " | assistant :");
  EXPECT_NE(head.find("798.00 kW"), std::string::npos);
}

TEST(Prompts, Scenarios) {
  EXPECT_EQ(parse_scenario("wind"), Scenario::wind);
  EXPECT_THROW(parse_scenario("hydro"), ConfigError);
  EXPECT_NE(forecast_prompt_head(Scenario::load, 500, "a, b").find("features a, b ."), std::string::npos);
}

TEST(Timestamps, IsoRoundTrip) {
  EXPECT_EQ(iso_timestamp(0), "1970-01-01T00:00:00");
  EXPECT_EQ(iso_timestamp(951782400), "2000-02-29T00:00:00");
  EXPECT_EQ(parse_iso_timestamp("2024-03-01T13:05:09"), 1709298309);
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const auto t = static_cast<std::int64_t>(rng.below(4'000'000'000ULL));
    EXPECT_EQ(parse_iso_timestamp(iso_timestamp(t)), t);
  }
  EXPECT_THROW(parse_iso_timestamp("yesterday"), SchemaError);
}

TEST(Persistence, LastValue) {
  SeriesWindow w;
  w.channels = {"target", "x"};
  w.timestamps = {0, 3600};
  w.values = {1, 9, 2, 8};
  EXPECT_EQ(persistence_forecast(w), 2.0);
  EXPECT_EQ(persistence_forecast(w, 1), 8.0);
}

TEST(Inference, CotRunsBothSteps) {
  auto v = build_vocab({"user : forecast pv power for the next hour with capacity 798.00 kW . | draft weather clear assistant :",
                        "user : forecast pv power for the next hour with capacity 798.00 kW . | draft weather clear assistant :"});
  auto m = Model::init(tiny_config(v.size()), 1);
  ForecastInput in;
  in.window = std::vector<double>(tiny_config().window * tiny_config().channels, 0.1);
  in.rows = tiny_config().window;
  in.cols = tiny_config().channels;
  const auto r = cot_infer(m, v, in, forecast_prompt_head(Scenario::pv, 798), "clear", DecodeOptions::greedy(6));
  EXPECT_EQ(r.step1_prompt, step1_prompt(forecast_prompt_head(Scenario::pv, 798)));
  EXPECT_NE(r.step2_prompt.find("draft " + r.step1.raw + " weather clear"), std::string::npos);
  const auto again = cot_infer(m, v, in, forecast_prompt_head(Scenario::pv, 798), "clear", DecodeOptions::greedy(6));
  EXPECT_EQ(again.step2.raw, r.step2.raw);
  // an untrained model does not follow the template
  EXPECT_THROW(averaged_predict(m, v, in, 5, 1), HallucinationStormError);
}

TEST(Output, PredictionsCsv) {
  TempDir d("pred_csv");
  std::vector<PredictionRow> rows{{0, 12.5, parse_response("interval: 2 ; value: 12.00 kW")},
                                  {3600, 0.0, parse_response("clouds")}};
  write_predictions_csv(rows, {798.0, 100}, d.str("p.csv"));
  EXPECT_EQ(read_file(d.str("p.csv")),
            "timestamp,true,pred_class,pred_class_median,pred_reg,conforming\n"
            "1970-01-01T00:00:00,12.50,2,11.97,12.00,1\n"
            "1970-01-01T01:00:00,0.00,,,,0\n");
}
