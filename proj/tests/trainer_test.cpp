#include "test_util.hpp"

using namespace efllm;
using efllm::testing::rand_d;
using efllm::testing::TempDir;
using efllm::testing::tiny_config;

namespace {

const std::vector<std::string>& toy_lines() {
  static const std::vector<std::string> l{
      "user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", "interval: 7 ; value: 20.25 kW",
      "user : load now ? assistant :",  "user : hello there assistant :", "hello there friend .",
  };
  return l;
}

Vocabulary toy_vocab() {
  auto lines = toy_lines();
  lines.insert(lines.end(), toy_lines().begin(), toy_lines().end());
  return build_vocab(lines);
}

SeriesWindow toy_window(std::size_t t, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  SeriesWindow w;
  for (std::size_t j = 0; j < c; ++j) w.channels.push_back("c" + std::to_string(j));
  for (std::size_t i = 0; i < t; ++i) {
    w.timestamps.push_back(static_cast<std::int64_t>(i) * 3600);
    for (std::size_t j = 0; j < c; ++j) w.values.push_back(rng.normal(0.0, 1.0));
  }
  return w;
}

TrainingExample mm_example(const std::string& prompt, const std::string& answer, std::uint64_t seed) {
  TrainingExample ex;
  ex.mode = Mode::multimodal;
  ex.window = toy_window(tiny_config().window, tiny_config().channels, seed);
  ex.normalized = ex.window->values;
  ex.prompt = prompt;
  ex.answer = answer;
  return ex;
}

TrainingExample text_example(const std::string& prompt, const std::string& answer) {
  TrainingExample ex;
  ex.mode = Mode::text;
  ex.prompt = prompt;
  ex.answer = answer;
  return ex;
}

Model fine_tune_ready(const Vocabulary& v, std::uint64_t seed) {
  auto m = Model::init(tiny_config(v.size()), seed);
  m.set_stack(push_adapter(m.stack(), 2, derive_seed(seed, 3), 0.1));
  return m;
}

// Width-32 base pretrained on the toy lines, with one fresh adapter on top.
Model pretrained(const Vocabulary& v, std::uint64_t seed) {
  auto cfg = tiny_config(v.size());
  cfg.width = 32;
  cfg.ff_hidden = 64;
  cfg.rank = 4;
  auto m = Model::init(cfg, seed);
  TrainConfig pc;
  pc.lr = 1e-2;
  pc.epochs = 30;
  pretrain(m, encode_corpus(toy_lines(), v), pc);
  m.set_stack(push_adapter(m.stack(), 4, derive_seed(seed, 3), 0.1));
  return m;
}

std::map<std::string, std::string> frozen_digests(const Model& m) {
  std::map<std::string, std::string> out;
  for (const auto& [n, d] : tensor_digests(m))
    if (n.rfind("lora.", 0) != 0 && n.rfind("prefix.", 0) != 0) out[n] = d;
  return out;
}

double mean_loss(const Model& m, const std::vector<EncodedExample>& data) {
  NoGradGuard g;
  double s = 0;
  for (const auto& e : data) s += example_loss(m, e, 0.0).total.item();
  return s / static_cast<double>(data.size());
}

// ids [BOS p a a a ;] with task 1 over the three answer tokens and task 2 the delimiter.
EncodedExample manual_example(double w) {
  EncodedExample e;
  e.ids = {1, 5, 6, 7, 6, 5};
  e.answer_begin = 2;
  e.span = {{2, 5}, {5, 6}, w};
  e.mode = Mode::text;
  return e;
}

}  // namespace

TEST(MultitaskLoss, UniformLogitsClosedForm) {
  auto logits = TensorD::zeros({6, 8});
  AdapterStack<double> empty;
  auto lb = multitask_loss(logits, manual_example(0.5), empty, 0.0, 0);
  EXPECT_NEAR(lb.total.item(), 2.0 * std::log(8.0), 1e-12);
  EXPECT_NEAR(lb.task1, 3.0 * std::log(8.0), 1e-12);
  EXPECT_NEAR(lb.task2, std::log(8.0), 1e-12);
}

TEST(MultitaskLoss, PerfectPredictionsGiveZero) {
  auto ex = manual_example(0.3);
  std::vector<double> v(6 * 8, 0.0);
  for (std::size_t r = 0; r + 1 < 6; ++r) v[r * 8 + ex.ids[r + 1]] = 1e4;
  AdapterStack<double> empty;
  EXPECT_NEAR(multitask_loss(TensorD({6, 8}, v), ex, empty, 0.0, 0).total.item(), 0.0, 1e-12);
}

TEST(MultitaskLoss, WeightOneIsTask1PlusPenalty) {
  auto m = ModelD::init(tiny_config(), 1);
  auto s = push_adapter(m.stack(), 2, 2, 0.3);
  Rng rng(3);
  for (auto& b : s.adapters[0].b)
    for (auto& x : b.mutable_data()) x = rng.normal(0, 0.2);
  auto logits = rand_d({6, 8}, 4, 1.0, false);
  auto ex = manual_example(1.0);
  double frob = 0;
  for (std::size_t k = 0; k < s.base.size(); ++k) {
    auto d = matmul_nt(s.adapters[0].a[k], s.adapters[0].b[k]);
    for (double x : d.data()) frob += x * x;
  }
  const double lambda = 0.25;
  auto lb = multitask_loss(logits, ex, s, lambda, 0);
  EXPECT_NEAR(lb.total.item(), lb.task1 + lambda * frob, 1e-9);
  EXPECT_NEAR(lb.frobenius, frob, 1e-9);
  // lambda = 0, weight 1: plain NLL over span 1
  std::vector<std::size_t> tgt(ex.ids.begin() + 2, ex.ids.begin() + 5);
  EXPECT_NEAR(multitask_loss(logits, ex, s, 0.0, 0).total.item(),
              cross_entropy(slice(logits, 0, 1, 4), std::span<const std::size_t>(tgt)).item(), 1e-12);
}

TEST(MultitaskLoss, FrozenAdaptersAreNotPenalized) {
  auto m = ModelD::init(tiny_config(), 1);
  auto s = push_adapter(m.stack(), 2, 2, 0.3);
  for (auto& b : s.adapters[0].b) std::fill(b.mutable_data().begin(), b.mutable_data().end(), 0.5);
  s = push_adapter(s, 2, 3);
  auto lb = multitask_loss(rand_d({6, 8}, 4, 1.0, false), manual_example(0.5), s, 1.0, 0);
  EXPECT_EQ(lb.frobenius, 0.0);
}

TEST(MultitaskLoss, DerivativeInWeightIsL1MinusL2) {
  auto logits = rand_d({6, 8}, 5, 1.0, false);
  AdapterStack<double> empty;
  const double w = 0.4, h = 1e-4;
  auto at = [&](double ww) { return multitask_loss(logits, manual_example(ww), empty, 0.0, 0); };
  const auto lb = at(w);
  const double numeric = (at(w + h).total.item() - at(w - h).total.item()) / (2 * h);
  EXPECT_NEAR(numeric, lb.task1 - lb.task2, 1e-6);
}

TEST(MultitaskLoss, PromptTargetsAreMasked) {
  auto logits = rand_d({6, 8}, 6, 1.0, false);
  AdapterStack<double> empty;
  auto ex = manual_example(0.5);
  const double base = multitask_loss(logits, ex, empty, 0.0, 0).total.item();
  for (std::size_t id = 0; id < 8; ++id) {
    ex.ids[1] = id;
    EXPECT_EQ(multitask_loss(logits, ex, empty, 0.0, 0).total.item(), base);
  }
}

TEST(MultitaskLoss, EmptySpansRejected) {
  auto ex = manual_example(0.5);
  ex.span = {{3, 3}, {6, 6}, 0.5};
  AdapterStack<double> empty;
  EXPECT_THROW(multitask_loss(TensorD::zeros({6, 8}), ex, empty, 0.0, 0), ContractError);
  ex.span = {{2, 5}, {4, 6}, 0.5};
  EXPECT_THROW(multitask_loss(TensorD::zeros({6, 8}), ex, empty, 0.0, 0), ContractError);
}

TEST(Encode, SplitsAtDelimiter) {
  const auto v = toy_vocab();
  auto e = encode(mm_example("user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", 1), v, 0.7);
  EXPECT_EQ(e.ids.front(), Vocabulary::kBosId);
  EXPECT_EQ(e.ids.back(), Vocabulary::kEosId);
  EXPECT_EQ(e.ids[e.span.task2.begin], v.id(";"));
  EXPECT_EQ(e.span.task1.begin, e.answer_begin);
  EXPECT_EQ(e.span.task1.end, e.span.task2.begin);
  EXPECT_EQ(e.span.task2.end, e.ids.size());
  EXPECT_EQ(e.span.weight, 0.7);
  ASSERT_TRUE(e.window);
  EXPECT_EQ(e.window_rows, tiny_config().window);
}

TEST(Encode, NoDelimiterMeansSingleTask) {
  const auto v = toy_vocab();
  auto e = encode(text_example("user : hello there assistant :", "hello there friend ."), v, 0.3);
  EXPECT_EQ(e.span.task2.size(), 0u);
  EXPECT_EQ(e.span.weight, 1.0);
  EXPECT_FALSE(e.window);
}

TEST(Encode, ModeMustMatchWindow) {
  const auto v = toy_vocab();
  auto bad = text_example("user : hello there assistant :", "hello");
  bad.window = toy_window(5, 2, 1);
  EXPECT_THROW(encode(bad, v, 0.5), ContractError);
  auto bad2 = mm_example("user : power now ? assistant :", "interval: 3", 1);
  bad2.window.reset();
  EXPECT_THROW(encode(bad2, v, 0.5), ContractError);
}

TEST(AlignBatches, PermutationAndDeterminism) {
  std::vector<Mode> modes(10, Mode::text);
  modes.resize(20, Mode::multimodal);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto b = align_batches(modes, seed);
    std::vector<std::size_t> flat;
    for (const auto& x : b) flat.insert(flat.end(), x.begin(), x.end());
    std::sort(flat.begin(), flat.end());
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(flat[i], i);
    EXPECT_EQ(b, align_batches(modes, seed));
  }
  EXPECT_NE(align_batches(modes, 1), align_batches(modes, 2));
  EXPECT_EQ(align_batches(modes, 1, 6).size(), 4u);
  EXPECT_THROW(align_batches({}, 1), ContractError);
}

TEST(AlignBatches, ModesInterleave) {
  std::vector<Mode> modes(10, Mode::text);
  modes.resize(20, Mode::multimodal);
  double dev = 0, count = 0, mean = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto b = align_batches(modes, seed);
    for (std::size_t start = 0; start + 8 <= b.size(); ++start) {
      double text = 0;
      for (std::size_t k = start; k < start + 8; ++k) text += modes[b[k][0]] == Mode::text;
      dev += std::abs(text - 4.0);
      mean += text;
      ++count;
    }
  }
  EXPECT_NEAR(mean / count, 4.0, 0.15);
  EXPECT_LT(dev / count, 1.5);
}

TEST(Train, RequiresExactlyOneTrainableAdapter) {
  const auto v = toy_vocab();
  auto m = Model::init(tiny_config(v.size()), 1);
  std::vector<EncodedExample> data{encode(text_example("user : hello there assistant :", "hello there friend ."), v, 0.5)};
  EXPECT_THROW(train(m, data, {}), ContractError);
  m.set_stack(push_adapter(push_adapter(m.stack(), 2, 1), 2, 2));
  m.stack().adapters[0].trainable = true;  // two trainable adapters
  EXPECT_THROW(train(m, data, {}), ContractError);
  auto f = fine_tune_ready(v, 1);
  EXPECT_THROW(train(f, {}, {}), ContractError);
}

TEST(Train, ZeroLearningRateIsBitIdentical) {
  const auto v = toy_vocab();
  auto m = fine_tune_ready(v, 2);
  const auto before = tensor_digests(m);
  std::vector<EncodedExample> data{encode(mm_example("user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", 3), v, 0.5),
                                   encode(text_example("user : hello there assistant :", "hello there friend ."), v, 0.5)};
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 2;
  train(m, data, cfg);
  EXPECT_EQ(tensor_digests(m), before);
}

TEST(Train, BaseWeightsStayFrozen) {
  const auto v = toy_vocab();
  auto m = fine_tune_ready(v, 3);
  const auto frozen = frozen_digests(m);
  const auto all = tensor_digests(m);
  std::vector<EncodedExample> data{encode(mm_example("user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", 4), v, 0.5),
                                   encode(text_example("user : load now ? assistant :", "interval: 7 ; value: 20.25 kW"), v, 0.5)};
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.lambda = 0.01;
  train(m, data, cfg);
  EXPECT_EQ(frozen_digests(m), frozen);
  const auto after = tensor_digests(m);
  EXPECT_NE(after.at("lora.0.q.B.0"), all.at("lora.0.q.B.0"));
  EXPECT_NE(after.at("prefix.0.w1"), all.at("prefix.0.w1"));
}

TEST(Train, OverfitsOneExample) {
  const auto v = toy_vocab();
  auto m = pretrained(v, 4);
  std::vector<EncodedExample> data{encode(mm_example("user : power now ? assistant :", "interval: 7 ; value: 20.25 kW", 5), v, 0.5)};
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 200;
  auto r = train(m, data, cfg);
  ASSERT_EQ(r.epoch_mean.size(), 200u);
  const double first = r.epoch_mean.front(), last = r.epoch_mean.back();
  EXPECT_LT(last, 0.1 * first);
  // smoothed curve (20-step means) decreases
  for (std::size_t k = 20; k + 20 <= 200; k += 20) {
    double prev = 0, cur = 0;
    for (std::size_t i = 0; i < 20; ++i) {
      prev += r.epoch_mean[k - 20 + i];
      cur += r.epoch_mean[k + i];
    }
    EXPECT_LT(cur, prev) << k;
  }
}

TEST(Train, SameSeedSameCheckpointBytes) {
  const auto v = toy_vocab();
  TempDir d("train_repro");
  for (const char* leaf : {"a", "b"}) {
    auto m = fine_tune_ready(v, 5);
    std::vector<EncodedExample> data{encode(mm_example("user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", 6), v, 0.5),
                                     encode(text_example("user : hello there assistant :", "hello there friend ."), v, 0.5)};
    TrainConfig cfg;
    cfg.lr = 5e-3;
    cfg.epochs = 3;
    train(m, data, cfg);
    save_checkpoint(m, v, d.str(leaf));
  }
  EXPECT_EQ(read_file(d.str("a/model.eflm")), read_file(d.str("b/model.eflm")));
}

TEST(Train, NonFiniteWindowAbortsWithDiagnostic) {
  const auto v = toy_vocab();
  auto m = fine_tune_ready(v, 6);
  auto ex = mm_example("user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", 7);
  ex.normalized[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<EncodedExample> data{encode(ex, v, 0.5)};
  try {
    train(m, data, {});
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
  }
}

TEST(Train, LossCsv) {
  TempDir d("loss_csv");
  TrainResult r;
  r.steps.push_back({0, 0, 1.5, 1.0, 2.0, 0.25});
  write_loss_csv(r, d.str("loss.csv"));
  EXPECT_EQ(read_file(d.str("loss.csv")), "epoch,step,loss,loss_task1,loss_task2,frob_penalty\n0,0,1.500000,1.000000,2.000000,0.25000000\n");
}

TEST(ContinualUpdate, EmptyDataLeavesOutputsUnchanged) {
  const auto v = toy_vocab();
  auto m = fine_tune_ready(v, 7);
  std::vector<EncodedExample> data{encode(mm_example("user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", 8), v, 0.5)};
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 5;
  train(m, data, cfg);
  const auto before = mean_loss(m, data);
  continual_update(m, {}, cfg);
  EXPECT_EQ(m.stack().adapters.size(), 2u);
  EXPECT_EQ(m.prefixes().size(), 2u);
  EXPECT_EQ(mean_loss(m, data), before);
}

TEST(ContinualUpdate, OnlyNewAdapterAndPrefixMove) {
  const auto v = toy_vocab();
  auto m = fine_tune_ready(v, 8);
  std::vector<EncodedExample> old_data{encode(mm_example("user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", 9), v, 0.5)};
  std::vector<EncodedExample> new_data{encode(mm_example("user : load now ? assistant :", "interval: 7 ; value: 20.25 kW", 10), v, 0.5)};
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 10;
  train(m, old_data, cfg);
  const auto digests = tensor_digests(m);
  const double new_before = mean_loss(m, new_data);
  continual_update(m, new_data, cfg);
  const auto after = tensor_digests(m);
  for (const auto& [n, d] : digests) EXPECT_EQ(after.at(n), d) << n;  // base, first adapter, first prefix block
  EXPECT_NE(after.at("lora.0.q.B.1"), std::string());
  EXPECT_NE(after.at("prefix.1.w1"), digests.at("prefix.0.w1"));
  EXPECT_LT(mean_loss(m, new_data), new_before);
}

TEST(ContinualUpdate, KeepsPrefixWhenNotCloning) {
  const auto v = toy_vocab();
  auto m = fine_tune_ready(v, 9);
  std::vector<EncodedExample> data{encode(mm_example("user : load now ? assistant :", "interval: 7 ; value: 20.25 kW", 11), v, 0.5)};
  const auto prefix_before = tensor_digests(m).at("prefix.0.wq");
  TrainConfig cfg;
  cfg.lr = 1e-2;
  continual_update(m, data, cfg, false);
  EXPECT_EQ(m.prefixes().size(), 1u);
  EXPECT_EQ(tensor_digests(m).at("prefix.0.wq"), prefix_before);
}

TEST(ContinualUpdate, NeedsAFineTunedModel) {
  const auto v = toy_vocab();
  auto m = Model::init(tiny_config(v.size()), 10);
  EXPECT_THROW(continual_update(m, {}, {}), ContractError);
}

TEST(ContinualUpdate, RetainsOldResponses) {
  const auto v = toy_vocab();
  auto m = pretrained(v, 11);
  std::vector<EncodedExample> old_data, new_data;
  for (std::uint64_t s = 0; s < 6; ++s)
    old_data.push_back(encode(mm_example("user : power now ? assistant :", "interval: 3 ; value: 1.50 kW", 100 + s), v, 0.5));
  for (std::uint64_t s = 0; s < 3; ++s)
    new_data.push_back(encode(mm_example("user : load now ? assistant :", "interval: 7 ; value: 20.25 kW", 200 + s), v, 0.5));
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 20;
  train(m, old_data, cfg);
  auto respond_all = [&](const Model& mm) {
    std::vector<std::string> out;
    for (std::uint64_t s = 0; s < 10; ++s) {
      auto ex = mm_example("user : power now ? assistant :", "", 300 + s);
      auto w = window_tensor<float>(ex.normalized, ex.window->length(), ex.window->width());
      out.push_back(detokenize(generate(mm, std::optional<Tensor>(w), prompt_ids(ex.prompt, v), DecodeOptions::greedy(12)), v));
    }
    return out;
  };
  const auto before = respond_all(m);
  const double new_before = mean_loss(m, new_data);
  TrainConfig upd;  // default learning rate
  upd.epochs = 5;
  continual_update(m, new_data, upd);
  EXPECT_LT(mean_loss(m, new_data), new_before);
  const auto after = respond_all(m);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < before.size(); ++i)
    kept += similarity(before[i], after[i], m.base().tok_emb, v).similarity >= 0.9;
  EXPECT_GE(kept, 8u);
}
