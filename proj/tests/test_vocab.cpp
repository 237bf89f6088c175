#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "support/fixtures.hpp"

using namespace perslm;
using perslm::testing::TempDir;

namespace {
std::vector<TokenSequence> split_words(std::initializer_list<const char*> lines) {
  std::vector<TokenSequence> out;
  for (auto* l : lines) out.push_back(tokenize(l));
  return out;
}
}  // namespace

TEST(BuildVocab, TopByCount) {
  const auto c = split_words({"a a b"});
  EXPECT_EQ(build_vocab(c, 1).tokens(), (std::vector<std::string>{"a"}));
}

TEST(BuildVocab, LexicographicTieBreak) {
  const auto c = split_words({"b a"});
  EXPECT_EQ(build_vocab(c, 1).tokens(), (std::vector<std::string>{"a"}));
  EXPECT_EQ(build_vocab(split_words({"c b b a a"}), 3).tokens(), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(BuildVocab, KeepsAllWhenNExceedsDistinct) {
  const auto v = build_vocab(split_words({"x y", "y z"}), 10);
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.tokens().front(), "y");
}

TEST(BuildVocab, Errors) {
  EXPECT_THROW(build_vocab(std::vector<TokenSequence>{}, 5), InvalidArgument);
  EXPECT_THROW(build_vocab(split_words({"a"}), 0), InvalidArgument);
}

TEST(BuildVocab, SpecialFormsAreNotCounted) {
  const auto v = build_vocab(split_words({"<unk> <unk> </s> <s> a"}), 5);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"a"}));
}

TEST(BuildVocab, MonotoneInSize) {
  const auto corpus = perslm::testing::random_corpus(200, 60, 12, 4);
  for (std::size_t n = 1; n < 70; ++n) {
    const auto small = build_vocab(corpus, n).tokens();
    const auto big = build_vocab(corpus, n + 1).tokens();
    const std::set<std::string> bs(big.begin(), big.end());
    for (const auto& t : small) EXPECT_TRUE(bs.count(t)) << t << " at n=" << n;
  }
}

TEST(BuildVocab, CounterMergeEqualsSinglePass) {
  const auto corpus = perslm::testing::random_corpus(100, 30, 8, 5);
  TokenCounter a, b, all;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    (i % 2 ? a : b).add(corpus[i]);
    all.add(corpus[i]);
  }
  a.merge(b);
  EXPECT_EQ(a.top(20), all.top(20));
}

TEST(Vocabulary, SpecialIdLayout) {
  const Vocabulary v({"a", "b"});
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(v.oov(), 2u);
  EXPECT_EQ(v.eos(), 3u);
  EXPECT_EQ(v.bos(), 4u);
  EXPECT_EQ(v.scorable_size(), 4u);
  EXPECT_EQ(v.surface(v.oov()), "<unk>");
  EXPECT_EQ(v.surface(v.eos()), "</s>");
  EXPECT_EQ(v.surface(v.bos()), "<s>");
}

TEST(Vocabulary, RejectsBadTokens) {
  EXPECT_THROW(Vocabulary({"a", "a"}), InvalidArgument);
  EXPECT_THROW(Vocabulary({"a b"}), InvalidArgument);
  EXPECT_THROW(Vocabulary({""}), InvalidArgument);
  EXPECT_THROW(Vocabulary({"<unk>"}), InvalidArgument);
}

TEST(Encode, MapsUnknownToOov) {
  const Vocabulary v({"a", "b"});
  const auto e = encode(v, {"a", "c", "b"});
  EXPECT_EQ(e.ids, (std::vector<TokenId>{0, v.oov(), 1}));
  EXPECT_EQ(e.oov_mask, (std::vector<bool>{false, true, false}));
}

TEST(Encode, Empty) {
  const Vocabulary v({"a"});
  const auto e = encode(v, {});
  EXPECT_TRUE(e.ids.empty());
  EXPECT_TRUE(e.oov_mask.empty());
}

TEST(Encode, OovExampleSentence) {
  const Vocabulary v({"the", "only", "a"});
  const auto e = encode(v, tokenize("re-titled jaff ransomware only fivnin."));
  EXPECT_EQ(decode(v, e.ids), (TokenSequence{"<unk>", "<unk>", "<unk>", "only", "<unk>"}));
  EXPECT_EQ(e.oov_mask, (std::vector<bool>{true, true, true, false, true}));
}

TEST(Encode, MaskMatchesOovIds) {
  const auto corpus = perslm::testing::random_corpus(50, 40, 10, 6);
  const auto v = build_vocab(corpus, 15);
  for (const auto& seq : corpus) {
    const auto e = encode(v, seq);
    ASSERT_EQ(e.ids.size(), e.oov_mask.size());
    for (std::size_t i = 0; i < e.ids.size(); ++i) EXPECT_EQ(e.ids[i] == v.oov(), e.oov_mask[i]);
  }
}

TEST(Encode, DecodeInvertsInVocabulary) {
  const auto corpus = perslm::testing::random_corpus(50, 20, 10, 7);
  const auto v = build_vocab(corpus, 100);
  for (const auto& seq : corpus) EXPECT_EQ(decode(v, encode(v, seq).ids), seq);
}

TEST(Encode, PadAddsBosAndEos) {
  const Vocabulary v({"a"});
  const auto p = pad(v, encode(v, {"a", "z"}));
  EXPECT_EQ(p.ids, (std::vector<TokenId>{v.bos(), 0, v.oov(), v.eos()}));
  EXPECT_EQ(p.oov_mask, (std::vector<bool>{false, false, true, false}));
}

TEST(OovRate, Counts) {
  const Vocabulary v({"a", "b"});
  EXPECT_DOUBLE_EQ(oov_rate(v, std::vector<TokenSequence>{{"a", "b", "c"}}), 1.0 / 3.0);
  EXPECT_EQ(oov_rate(v, std::vector<TokenSequence>{{"a"}, {"b", "a"}}), 0.0);
  EXPECT_THROW(oov_rate(v, std::vector<TokenSequence>{}), InvalidArgument);
  EXPECT_THROW(oov_rate(v, std::vector<TokenSequence>{{}}), InvalidArgument);
}

TEST(OovRate, SpecialsExcluded) {
  const Vocabulary v({"a"});
  EXPECT_DOUBLE_EQ(oov_rate(v, std::vector<TokenSequence>{{"a", "x", "<s>", "</s>"}}), 0.5);
}

TEST(OovRate, PermutationInvariant) {
  auto corpus = perslm::testing::random_corpus(80, 50, 10, 8);
  const auto v = build_vocab(corpus, 20);
  const double r = oov_rate(v, corpus);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    std::shuffle(corpus.begin(), corpus.end(), rng);
    for (auto& s : corpus) std::shuffle(s.begin(), s.end(), rng);
    EXPECT_EQ(oov_rate(v, corpus), r);
  }
}

TEST(VocabFile, RoundTripIsBitExact) {
  TempDir dir("vocab");
  const auto v = build_vocab(perslm::testing::random_corpus(80, 50, 10, 9), 30);
  v.save(dir.path() / "vocab.txt");
  const auto text = detail::read_text_file(dir.path() / "vocab.txt");
  EXPECT_EQ(text.substr(0, text.find('\n')), "#perslm-vocab v1 V=30 oov=30 eos=31 bos=32");
  const auto back = Vocabulary::load(dir.path() / "vocab.txt");
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.serialize(), text);
  EXPECT_EQ(back.fingerprint(), v.fingerprint());
}

TEST(VocabFile, RejectsDamage) {
  const Vocabulary v({"a", "b"});
  const auto text = v.serialize();
  EXPECT_THROW(Vocabulary::parse(""), FormatError);
  EXPECT_THROW(Vocabulary::parse(text.substr(0, text.size() - 2)), FormatError);
  EXPECT_THROW(Vocabulary::parse(text + "c\n"), FormatError);
  EXPECT_THROW(Vocabulary::parse("#perslm-vocab v1 V=2 oov=3 eos=4 bos=5\na\nb\n"), FormatError);
  EXPECT_THROW(Vocabulary::parse("#perslm-vocab v1 V=2 oov=2 eos=3 bos=4\na\na\n"), FormatError);
}
