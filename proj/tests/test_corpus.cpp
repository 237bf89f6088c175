#include <gtest/gtest.h>

#include <map>
#include <set>

#include "support/fixtures.hpp"

using namespace perslm;
using perslm::testing::TempDir;

TEST(Tokenize, SplitsOnWhitespaceRuns) {
  EXPECT_EQ(tokenize("Hello  world"), (TokenSequence{"hello", "world"}));
}

TEST(Tokenize, EmptyText) { EXPECT_TRUE(tokenize("").empty()); }

TEST(Tokenize, KeepsAttachedPunctuation) {
  EXPECT_EQ(tokenize("re-titled jaff ransomware only fivnin."),
            (TokenSequence{"re-titled", "jaff", "ransomware", "only", "fivnin."}));
}

TEST(Tokenize, UnicodeWhitespaceAndCase) {
  // U+00A0 no-break space, U+3000 ideographic space, U+2003 em space
  EXPECT_EQ(tokenize("\xC3\x84pfel\xC2\xA0\xCE\xA3\xCE\xB1\xE3\x80\x80Straße\xE2\x80\x83\tX"),
            (TokenSequence{"\xC3\xA4pfel", "\xCF\x83\xCE\xB1", "straße", "x"}));
}

TEST(Tokenize, InvalidBytesPassThrough) {
  const auto t = tokenize("ab\xFF" "c d");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0], "ab\xFF" "c");
}

TEST(Tokenize, OnlyWhitespace) { EXPECT_TRUE(tokenize(" \t\n ").empty()); }

TEST(LoadComments, AuthorLineMapsFields) {
  auto c = detail::parse_comment_line(R"({"author":"u1","created_utc":1451606400,"body":"hi there"})");
  ASSERT_TRUE(c);
  EXPECT_EQ(c->user_id, "u1");
  EXPECT_EQ(c->timestamp, 1451606400);
  EXPECT_EQ(c->text, "hi there");
}

TEST(LoadComments, AcceptsUserIdAndStringTimestamp) {
  auto c = detail::parse_comment_line(R"({"user_id":"u2","created_utc":"1483228800","body":""})");
  ASSERT_TRUE(c);
  EXPECT_EQ(c->user_id, "u2");
  EXPECT_EQ(c->timestamp, 1483228800);
  EXPECT_EQ(c->text, "");
}

TEST(LoadComments, SkipsMalformedLines) {
  TempDir dir("load");
  const auto p = dir.path() / "c.jsonl";
  detail::write_text_file(p,
                          "{\"author\":\"u1\",\"created_utc\":1451606400,\"body\":\"hi there\"}\n"
                          "not json\n"
                          "{\"author\":\"\",\"created_utc\":1,\"body\":\"x\"}\n"
                          "{\"author\":\"u3\",\"body\":\"no time\"}\n"
                          "\n"
                          "{\"author\":\"u2\",\"created_utc\":1.5e9,\"body\":\"ok\"}\n");
  std::ostringstream warnings;
  const auto load = load_comments(p, &warnings);
  ASSERT_EQ(load.comments.size(), 2u);
  EXPECT_EQ(load.skipped, 3u);
  EXPECT_EQ(load.comments[0].user_id, "u1");
  EXPECT_EQ(load.comments[1].timestamp, 1500000000);
  EXPECT_FALSE(warnings.str().empty());
}

TEST(LoadComments, EmptyFile) {
  TempDir dir("load");
  const auto p = dir.path() / "empty.jsonl";
  detail::write_text_file(p, "");
  const auto load = load_comments(p);
  EXPECT_TRUE(load.comments.empty());
  EXPECT_EQ(load.skipped, 0u);
}

TEST(LoadComments, MissingFileIsFatal) {
  EXPECT_THROW(load_comments("/nonexistent/perslm/none.jsonl"), IoError);
}

TEST(LoadComments, JsonlRoundTrip) {
  const Comment c{"we\"ird", 1514764800, "line\nbreak \xC3\xA4"};
  const auto back = detail::parse_comment_line(comment_to_jsonl(c));
  ASSERT_TRUE(back);
  EXPECT_EQ(back->user_id, c.user_id);
  EXPECT_EQ(back->timestamp, c.timestamp);
  EXPECT_EQ(back->text, c.text);
}

namespace {

std::vector<Comment> yearly(const std::string& user, bool y16, bool y17, bool y18) {
  std::vector<Comment> out;
  if (y16) out.push_back({user, kStartOf2016 + 100, "a b c"});
  if (y17) out.push_back({user, kStartOf2017 + 100, "d e"});
  if (y18) out.push_back({user, kStartOf2018 + 100, "f"});
  return out;
}

}  // namespace

TEST(SplitUsers, RequiresEveryInterval) {
  std::vector<Comment> cs = yearly("full", true, true, true);
  for (auto& c : yearly("trainonly", true, false, false)) cs.push_back(c);
  for (auto& c : yearly("notest", true, true, false)) cs.push_back(c);
  const auto r = split_users(cs, SplitSpec{}, 1);
  ASSERT_EQ(r.users.size(), 1u);
  EXPECT_EQ(r.users[0].user_id, "full");
  EXPECT_EQ(r.partition.size(), 3u);
}

TEST(SplitUsers, TenUsersSplitSevenTwoOne) {
  std::vector<Comment> cs;
  for (int u = 0; u < 10; ++u)
    for (auto& c : yearly("user" + std::to_string(u), true, true, true)) cs.push_back(c);
  const auto r = split_users(cs, SplitSpec{}, 42);
  std::map<Partition, int> sizes;
  for (const auto& [user, p] : r.partition) ++sizes[p];
  EXPECT_EQ(sizes[Partition::Train], 7);
  EXPECT_EQ(sizes[Partition::Valid], 2);
  EXPECT_EQ(sizes[Partition::Test], 1);
  EXPECT_EQ(r.users.size(), 10u);
}

TEST(SplitUsers, DeterministicAndSeedDependent) {
  std::vector<Comment> cs;
  for (int u = 0; u < 40; ++u)
    for (auto& c : yearly("u" + std::to_string(u), true, true, true)) cs.push_back(c);
  const auto a = split_users(cs, SplitSpec{}, 7);
  const auto b = split_users(cs, SplitSpec{}, 7);
  EXPECT_EQ(a.partition, b.partition);
  EXPECT_EQ(a.global.train, b.global.train);
  bool differs = false;
  for (std::uint64_t s = 8; s < 20 && !differs; ++s) differs = split_users(cs, SplitSpec{}, s).partition != a.partition;
  EXPECT_TRUE(differs);
}

TEST(SplitUsers, IntervalDisciplineAndPartition) {
  const auto sc = synth_corpus(SynthConfig{.vocab_size = 100, .user_count = 5, .train_comments = 5,
                                           .valid_comments = 3, .test_comments = 3, .global_users = 30,
                                           .global_comments_per_user = 6},
                               5);
  SplitSpec spec;
  const auto r = split_users(sc.global, spec, 3);
  std::set<std::string> users;
  for (const auto& c : sc.global) users.insert(c.user_id);
  EXPECT_EQ(r.partition.size(), users.size());
  // Global splits hold exactly the comments of their partition's users in
  // the matching interval.
  std::size_t expect_train = 0, expect_valid = 0, expect_test = 0;
  for (const auto& c : sc.global) {
    const auto p = r.partition.at(c.user_id);
    if (p == Partition::Train && spec.train.contains(c.timestamp)) ++expect_train;
    if (p == Partition::Valid && spec.valid.contains(c.timestamp)) ++expect_valid;
    if (p == Partition::Test && spec.test.contains(c.timestamp)) ++expect_test;
  }
  EXPECT_EQ(r.global.train.size(), expect_train);
  EXPECT_EQ(r.global.valid.size(), expect_valid);
  EXPECT_EQ(r.global.test.size(), expect_test);

  const auto ur = split_users(sc.users, spec, 3);
  ASSERT_EQ(ur.users.size(), 5u);
  for (const auto& u : ur.users) {
    std::size_t train = 0, valid = 0, test = 0;
    for (const auto& c : sc.users) {
      if (c.user_id != u.user_id) continue;
      train += spec.train.contains(c.timestamp);
      valid += spec.valid.contains(c.timestamp);
      test += spec.test.contains(c.timestamp);
    }
    EXPECT_EQ(u.train.size(), train);
    EXPECT_EQ(u.valid.size(), valid);
    EXPECT_EQ(u.test.size(), test);
  }
}

TEST(SplitUsers, DropsEmptyCommentsAndOrdersByTime) {
  std::vector<Comment> cs = {{"u", kStartOf2016 + 50, "second"},
                             {"u", kStartOf2016 + 10, "first"},
                             {"u", kStartOf2016 + 20, "   "},
                             {"u", kStartOf2016 + 30, ""},
                             {"u", kStartOf2017, "v"},
                             {"u", kStartOf2018, "t"}};
  const auto r = split_users(cs, SplitSpec{}, 1);
  ASSERT_EQ(r.users.size(), 1u);
  EXPECT_EQ(r.users[0].train, (std::vector<TokenSequence>{{"first"}, {"second"}}));
}

TEST(SplitUsers, InvalidSpec) {
  SplitSpec s;
  s.valid = s.train;
  EXPECT_THROW(split_users({}, s, 1), InvalidArgument);
  SplitSpec f;
  f.train_users = 0.9;
  f.valid_users = 0.2;
  EXPECT_THROW(split_users({}, f, 1), InvalidArgument);
}

TEST(UserStats, EmptyTrainSplit) {
  UserCorpus uc;
  const auto s = user_stats(uc);
  EXPECT_EQ(s.comment_count, 0u);
  EXPECT_FALSE(s.mean_comment_length.has_value());
}

TEST(UserStats, MeanLength) {
  UserCorpus uc;
  uc.train = {{"a", "b", "c"}, {"a", "b", "c", "d", "e"}};
  uc.valid = {{"x"}};
  const auto s = user_stats(uc);
  EXPECT_EQ(s.comment_count, 2u);
  EXPECT_DOUBLE_EQ(*s.mean_comment_length, 4.0);
}

TEST(Storage, SequencesRoundTrip) {
  TempDir dir("seq");
  const std::vector<TokenSequence> seqs = {{"a", "b."}, {"\xC3\xA4"}, {"c", "d", "e"}};
  write_sequences(dir.path() / "x" / "train.txt", seqs);
  EXPECT_EQ(read_sequences(dir.path() / "x" / "train.txt"), seqs);
}

TEST(Storage, UserDirNamesAreReversible) {
  for (std::string id : {"plain_user-1", "a/b", "..", ".hidden", "sp ace", "per%cent", "\xC3\xA4"}) {
    const auto name = user_dir_name(id);
    EXPECT_EQ(name.find('/'), std::string::npos);
    EXPECT_NE(name, "..");
    EXPECT_NE(name.front(), '.');
    EXPECT_EQ(user_id_from_dir_name(name), id);
  }
  EXPECT_THROW(user_id_from_dir_name("bad%4"), FormatError);
}

TEST(Synth, ZeroVocabIsAnError) {
  SynthConfig c;
  c.vocab_size = 0;
  EXPECT_THROW(synth_corpus(c, 1), InvalidArgument);
}

TEST(Synth, DeterministicInSeed) {
  SynthConfig c;
  c.user_count = 4;
  c.global_users = 20;
  auto dump = [](const SynthCorpus& s) {
    std::string out;
    for (const auto& x : s.global) out += comment_to_jsonl(x) + '\n';
    for (const auto& x : s.users) out += comment_to_jsonl(x) + '\n';
    return out;
  };
  EXPECT_EQ(dump(synth_corpus(c, 9)), dump(synth_corpus(c, 9)));
  EXPECT_NE(dump(synth_corpus(c, 9)), dump(synth_corpus(c, 10)));
}

TEST(Synth, EveryUserQualifiesForPersonalization) {
  SynthConfig c;
  c.user_count = 6;
  c.global_users = 10;
  const auto s = synth_corpus(c, 2);
  EXPECT_EQ(split_users(s.users, c.split, 1).users.size(), 6u);
}

namespace {

// Two-sample chi-square statistic over the first token of each comment
// (i.i.d. unigram draws when a user has no private component).
double first_token_chi2(const std::vector<Comment>& a, const std::vector<Comment>& b, std::size_t ranks,
                        std::size_t* df) {
  auto bucket = [&](const Comment& c) {
    const auto t = tokenize(c.text);
    if (t.empty() || t[0][0] != 'w') return ranks;
    const auto r = static_cast<std::size_t>(std::stoul(t[0].substr(1)));
    return std::min(r, ranks);
  };
  std::vector<double> ca(ranks + 1, 0.0), cb(ranks + 1, 0.0);
  for (const auto& c : a) ++ca[bucket(c)];
  for (const auto& c : b) ++cb[bucket(c)];
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  double chi2 = 0.0;
  *df = 0;
  for (std::size_t i = 0; i <= ranks; ++i) {
    const double tot = ca[i] + cb[i];
    if (tot == 0.0) continue;
    const double ea = tot * na / (na + nb), eb = tot * nb / (na + nb);
    chi2 += (ca[i] - ea) * (ca[i] - ea) / ea + (cb[i] - eb) * (cb[i] - eb) / eb;
    ++*df;
  }
  --*df;
  return chi2;
}

}  // namespace

TEST(Synth, ZeroSkewMatchesGlobalDistribution) {
  SynthConfig c;
  c.skew = 0.0;
  c.oov_rate = 0.0;
  c.global_oov_rate = 0.0;
  c.user_count = 60;
  std::size_t df = 0;
  const auto s = synth_corpus(c, 11);
  const double chi2 = first_token_chi2(s.global, s.users, 30, &df);
  ASSERT_EQ(df, 30u);
  EXPECT_LT(chi2, 59.70);  // chi-square 0.999 quantile, 30 degrees of freedom

  c.skew = 0.5;
  const auto skewed = synth_corpus(c, 11);
  EXPECT_GT(first_token_chi2(skewed.global, skewed.users, 30, &df), 59.70);
}
