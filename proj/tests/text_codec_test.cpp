#include "test_util.hpp"

using namespace efllm;
using efllm::testing::TempDir;

namespace {

std::vector<std::string> toks(const TokenSequence& s, const Vocabulary& v) {
  std::vector<std::string> out;
  for (auto id : s.ids) out.push_back(v.token(id));
  return out;
}

}  // namespace

TEST(Vocab, FrequencyRule) {
  auto v = build_vocab({"a b", "a c"});
  EXPECT_TRUE(v.find("a"));
  EXPECT_TRUE(v.find("b"));  // character fallback
  auto w = build_vocab({"ab x", "ab y", "cd z"});
  EXPECT_TRUE(w.find("ab"));
  EXPECT_FALSE(w.find("cd"));
  EXPECT_TRUE(w.find("##d"));
  EXPECT_EQ(toks(tokenize("cd", w), w), (std::vector<std::string>{"c", "##d"}));
}

TEST(Vocab, EmptyCorpusRejected) {
  EXPECT_THROW(build_vocab(std::vector<std::string>{}), ContractError);
  EXPECT_THROW(build_vocab(std::vector<std::string>{"   "}), ContractError);
}

TEST(Vocab, ReservedBlockFirstAndSorted) {
  auto v = build_vocab({"the power is high", "the power is low"});
  const auto r = Vocabulary::reserved_tokens();
  ASSERT_GE(v.size(), r.size());
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(v.token(i), r[i]);
  EXPECT_EQ(v.token(Vocabulary::kResultId), "<result>");
  EXPECT_TRUE(std::is_sorted(v.tokens().begin() + r.size(), v.tokens().end()));
}

TEST(Vocab, FileIsByteIdenticalAcrossBuilds) {
  TempDir d("vocab");
  std::vector<std::string> corpus{"interval: 3 ; value: 12.50 kW", "interval: 7 ; value: 0.00 kW", "sunny hot day"};
  save_vocab(build_vocab(corpus), d.str("a.txt"));
  save_vocab(build_vocab(corpus), d.str("b.txt"));
  EXPECT_EQ(read_file(d.str("a.txt")), read_file(d.str("b.txt")));
  EXPECT_EQ(load_vocab(d.str("a.txt")), build_vocab(corpus));
}

TEST(Vocab, CorruptFileRejected) {
  TempDir d("vocab_bad");
  write_file(d.str("v.txt"), "hello\nworld\n");
  EXPECT_THROW(load_vocab(d.str("v.txt")), SchemaError);
  EXPECT_THROW(load_vocab(d.str("missing.txt")), IoError);
}

TEST(Tokenize, EmptyText) {
  auto v = build_vocab({"a a"});
  EXPECT_TRUE(tokenize("", v).ids.empty());
  EXPECT_EQ(detokenize(std::span<const std::size_t>{}, v), "");
}

TEST(Tokenize, DigitsSplit) {
  auto v = build_vocab({"power 1", "power 2.5"});
  EXPECT_EQ(toks(tokenize("power 798", v), v), (std::vector<std::string>{"power", "7", "##9", "##8"}));
  EXPECT_EQ(detokenize(tokenize("power 798", v), v), "power 798");
  EXPECT_EQ(toks(tokenize("12.50", v), v), (std::vector<std::string>{"1", "##2", "##.", "##5", "##0"}));
}

TEST(Tokenize, UnknownCharacterBecomesUnk) {
  auto v = build_vocab({"ab ab"});
  auto s = tokenize("az", v);
  EXPECT_EQ(s.ids.front(), v.id("a"));
  EXPECT_EQ(s.ids.back(), Vocabulary::kUnkId);
}

TEST(Tokenize, RoundTripOverCorpus) {
  CorpusOptions o;
  o.value_sentences = 80;
  o.function_dialogues = 20;
  const auto corpus = base_corpus(o);
  auto v = build_vocab(corpus);
  for (const auto& s : corpus) {
    auto seq = tokenize(s, v);
    for (auto id : seq.ids) ASSERT_NE(id, Vocabulary::kUnkId) << s;
    EXPECT_EQ(detokenize(seq, v), s);
  }
}

TEST(Tokenize, DetokenizeIsAFixedPointOnRandomIds) {
  auto v = build_vocab({"the output is 42 kW", "the output is 7 kW", "clouds ."});
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> ids(1 + rng.below(12));
    for (auto& id : ids) id = Vocabulary::kUnkId + 1 + rng.below(v.size() - Vocabulary::kUnkId - 1);
    const auto text = detokenize(std::span<const std::size_t>(ids), v);
    EXPECT_EQ(detokenize(tokenize(text, v), v), text);
  }
}

TEST(Detokenize, StopsAtEos) {
  auto v = build_vocab({"class 1", "class 2"});
  std::vector<std::size_t> ids{v.id("class"), v.id("4"), v.id("##2"), Vocabulary::kEosId, v.id("class")};
  EXPECT_EQ(detokenize(std::span<const std::size_t>(ids), v), "class 42");
}

TEST(Embed, GatherRows) {
  TensorD eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  TokenSequence s{{2}, ""};
  auto r = embed(s, eye);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 1}));
  auto table = efllm::testing::rand_d({8, 4}, 3, 1.0, false);
  auto two = embed(TokenSequence{{5, 5}, ""}, table);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(two.at(0, c), table.at(5, c));
    EXPECT_EQ(two.at(1, c), table.at(5, c));
  }
  EXPECT_THROW(embed(TokenSequence{{8}, ""}, table), IndexError);
}

TEST(Embed, ArgmaxRows) {
  TensorD l({2, 3}, {0.1, 0.9, 0.0, 2.0, -1.0, 1.0});
  EXPECT_EQ(argmax_rows(l), (std::vector<std::size_t>{1, 0}));
}
