#include <gtest/gtest.h>

#include <random>

#include "support/fixtures.hpp"

using namespace perslm;

namespace {

CurveSet make_curves(std::vector<double> alphas, std::vector<std::vector<double>> pps,
                     std::vector<double> baselines, std::vector<double> oov = {}) {
  CurveSet c;
  c.alphas = std::move(alphas);
  for (std::size_t u = 0; u < pps.size(); ++u) {
    UserCurve uc;
    uc.user_id = "u" + std::to_string(u);
    uc.baseline_pp = baselines[u];
    uc.oov_rate = oov.empty() ? 0.0 : oov[u];
    uc.scored = 10;
    uc.pp = pps[u];
    c.users.push_back(std::move(uc));
  }
  return c;
}

CurveSet random_curves(std::size_t users, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> base(50, 300), depth(0.0, 0.4), where(0.0, 1.0), oov(0.0, 0.5);
  CurveSet c;
  c.alphas = AlphaGrid{0.0, 1.0, 0.01}.points();
  for (std::size_t u = 0; u < users; ++u) {
    UserCurve uc;
    uc.user_id = "user" + std::to_string(u);
    uc.baseline_pp = base(rng);
    uc.oov_rate = oov(rng);
    const double d = depth(rng), m = where(rng);
    for (double a : c.alphas) uc.pp.push_back(uc.baseline_pp * (1.0 - d * (1.0 - (a - m) * (a - m) / std::max(m * m, 1e-9))) + 5.0 * a * a * a);
    uc.pp[0] = uc.baseline_pp;
    c.users.push_back(std::move(uc));
  }
  return c;
}

}  // namespace

TEST(AlphaGridTest, IncludesEndpointsAndThreeDecimalValues) {
  const auto g = AlphaGrid{}.points();
  ASSERT_EQ(g.size(), 1001u);
  EXPECT_EQ(g.front(), 0.0);
  EXPECT_EQ(g.back(), 1.0);
  EXPECT_EQ(g[105], 0.105);
  EXPECT_EQ(g[41], 0.041);
  const auto odd = AlphaGrid{0.0, 1.0, 0.3}.points();
  EXPECT_EQ(odd, (std::vector<double>{0.0, 0.3, 0.6, 0.9, 1.0}));
}

TEST(AlphaGridTest, ParseAndValidate) {
  const auto g = AlphaGrid::parse("0:0.5:0.25");
  EXPECT_EQ(g.points(), (std::vector<double>{0.0, 0.25, 0.5}));
  EXPECT_THROW(AlphaGrid::parse("0:1"), InvalidArgument);
  EXPECT_THROW(AlphaGrid::parse("1:0:0.1"), InvalidArgument);
  EXPECT_THROW(AlphaGrid::parse("0:1:0"), InvalidArgument);
  EXPECT_THROW(AlphaGrid::parse("a:b:c"), InvalidArgument);
}

TEST(ConstantAlpha, SingleUserEqualsOracle) {
  const auto c = random_curves(1, 3);
  EXPECT_EQ(constant_alpha(c, Objective::MinMeanPP).index, oracle_index(c.users[0]));
  EXPECT_EQ(constant_alpha(c, Objective::MaxMeanLift).index, oracle_index(c.users[0]));
}

TEST(ConstantAlpha, FlatCurvesTieToZero) {
  const auto c = make_curves({0.0, 0.5, 1.0}, {{80, 80, 80}, {90, 90, 90}}, {80, 90});
  EXPECT_EQ(constant_alpha(c, Objective::MinMeanPP).alpha, 0.0);
  EXPECT_EQ(constant_alpha(c, Objective::MaxMeanLift).alpha, 0.0);
  EXPECT_EQ(oracle_alphas(c).entries[0].alpha, 0.0);
}

TEST(ConstantAlpha, RoundingNoiseCountsAsTie) {
  const auto c = make_curves({0.0, 0.5, 1.0}, {{80, 80 * (1 - 1e-15), 80}}, {80});
  EXPECT_EQ(constant_alpha(c, Objective::MinMeanPP).alpha, 0.0);
  EXPECT_EQ(oracle_alphas(c).entries[0].alpha, 0.0);
}

TEST(ConstantAlpha, EmptyIsAnError) {
  CurveSet c;
  c.alphas = {0.0, 1.0};
  EXPECT_THROW(constant_alpha(c, Objective::MinMeanPP), InvalidArgument);
}

TEST(ConstantAlpha, ObjectivesCanDisagree) {
  // A high-perplexity user gains little relatively but dominates the mean PP;
  // a low-perplexity user gains a lot relatively at a different alpha.
  const auto c = make_curves({0.0, 0.5, 1.0}, {{1000, 900, 950}, {10, 9.5, 5}}, {1000, 10});
  const auto pp = constant_alpha(c, Objective::MinMeanPP);
  const auto lift = constant_alpha(c, Objective::MaxMeanLift);
  // Brute force over the grid.
  std::size_t best_pp = 0, best_lift = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double mp = (c.users[0].pp[i] + c.users[1].pp[i]) / 2;
    const double ml = (c.users[0].lift_at(i) + c.users[1].lift_at(i)) / 2;
    if (mp < (c.users[0].pp[best_pp] + c.users[1].pp[best_pp]) / 2) best_pp = i;
    if (ml > (c.users[0].lift_at(best_lift) + c.users[1].lift_at(best_lift)) / 2) best_lift = i;
  }
  EXPECT_EQ(pp.index, best_pp);
  EXPECT_EQ(lift.index, best_lift);
  EXPECT_NE(pp.alpha, lift.alpha);
}

TEST(Oracle, DominatesEveryGridPointAndSelector) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = random_curves(30, seed);
    const auto o = oracle_alphas(c);
    ASSERT_TRUE(oracle_dominates(c, o));
    for (std::size_t u = 0; u < c.users.size(); ++u)
      for (double v : c.users[u].pp) EXPECT_LE(o.entries[u].pp, v);
    const auto members = all_members(c);
    const auto os = summarize(c, members, o.indices());
    for (auto obj : {Objective::MinMeanPP, Objective::MaxMeanLift})
      EXPECT_GE(os.mean_lift, constant_alpha(c, obj).summary.mean_lift);
    HeuristicOptions h;
    h.k_grid = AlphaGrid{0, 1, 0.01};
    h.seed = seed;
    const auto fit = fit_heuristic(c, c, h);
    EXPECT_GE(fit.oracle.mean_lift, fit.heuristic.mean_lift);
  }
}

TEST(Oracle, DetectsViolation) {
  const auto c = make_curves({0.0, 0.5}, {{10, 9}}, {10});
  OracleTable bad;
  bad.entries.push_back({"u0", 0.0, 0, 10});
  EXPECT_FALSE(oracle_dominates(c, bad));
}

TEST(Heuristic, ClampsAndSnaps) {
  EXPECT_EQ(heuristic_alpha(3.0, 0.1), 1.0);
  EXPECT_EQ(heuristic_alpha(0.5, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(heuristic_alpha(0.5, 0.2), 0.4);
  const std::vector<double> grid = {0.0, 0.1, 0.2};
  EXPECT_EQ(nearest_grid_index(grid, 0.14), 1u);
  EXPECT_EQ(nearest_grid_index(grid, 0.16), 2u);
  EXPECT_EQ(nearest_grid_index(grid, 5.0), 2u);
  EXPECT_EQ(nearest_grid_index(grid, -1.0), 0u);
}

TEST(Heuristic, ZeroOovReducesToConstantAlpha) {
  auto c = random_curves(20, 7);
  for (auto& u : c.users) u.oov_rate = 0.0;
  HeuristicOptions h;
  h.k_grid = AlphaGrid{0, 1, 0.01};
  h.repetitions = 4;
  h.seed = 11;
  const auto r = fit_heuristic(c, c, h);
  for (const auto& f : r.repetitions) {
    std::vector<std::size_t> fit;
    for (const auto& id : f.fit_users)
      for (std::size_t u = 0; u < c.users.size(); ++u)
        if (c.users[u].user_id == id) fit.push_back(u);
    EXPECT_EQ(f.k, constant_alpha(c, Objective::MinMeanPP, fit).alpha);
    EXPECT_EQ(f.heuristic.mean_pp, f.constant_min_pp.summary.mean_pp);
  }
}

TEST(Heuristic, DeterministicAndPartitioned) {
  const auto c = random_curves(21, 8);
  HeuristicOptions h;
  h.k_grid = AlphaGrid{0, 2, 0.01};
  h.seed = 5;
  const auto a = fit_heuristic(c, c, h);
  const auto b = fit_heuristic(c, c, h);
  ASSERT_EQ(a.repetitions.size(), 10u);
  for (std::size_t r = 0; r < a.repetitions.size(); ++r) {
    EXPECT_EQ(a.repetitions[r].k, b.repetitions[r].k);
    EXPECT_EQ(a.repetitions[r].fit_users, b.repetitions[r].fit_users);
    EXPECT_EQ(a.repetitions[r].fit_users.size() + a.repetitions[r].eval_users.size(), 21u);
    for (double alpha : a.repetitions[r].eval_alphas) {
      EXPECT_GE(alpha, 0.0);
      EXPECT_LE(alpha, 1.0);
    }
  }
  h.seed = 6;
  const auto d = fit_heuristic(c, c, h);
  bool differs = false;
  for (std::size_t r = 0; r < d.repetitions.size(); ++r) differs |= d.repetitions[r].fit_users != a.repetitions[r].fit_users;
  EXPECT_TRUE(differs);
}

TEST(Heuristic, NeedsTwoUsers) {
  const auto c = random_curves(1, 9);
  EXPECT_THROW(fit_heuristic(c, c, HeuristicOptions{}), InvalidArgument);
}

TEST(Sweep, MatchesDirectPerplexity) {
  const auto corpus = perslm::testing::random_corpus(60, 20, 10, 51);
  const auto v = build_vocab(corpus, 14);
  std::vector<UserProfile> profiles;
  for (int u = 0; u < 3; ++u) {
    UserCorpus uc;
    uc.user_id = "p" + std::to_string(u);
    uc.train.assign(corpus.begin() + u * 20, corpus.begin() + u * 20 + 10);
    uc.test.assign(corpus.begin() + u * 20 + 10, corpus.begin() + u * 20 + 20);
    profiles.push_back(build_user_profile(uc, v, NGramConfig{}));
  }
  const auto global = train_ngram(encode_padded(v, corpus), NGramConfig{}, v);
  const AlphaGrid grid{0.0, 1.0, 0.05};
  for (auto st : {OovStrategy::base(), OovStrategy::backoff(0.01)}) {
    const auto curves = alpha_sweep(std::span<const UserProfile>(profiles), global, grid, st);
    ASSERT_EQ(curves.users.size(), 3u);
    for (std::size_t u = 0; u < 3; ++u) {
      EXPECT_EQ(curves.users[u].pp[0], curves.users[u].baseline_pp);
      for (std::size_t i = 0; i < curves.alphas.size(); ++i) {
        const double direct =
            *perplexity(profiles[u].personal, global, InterpolationWeight(curves.alphas[i]), st, profiles[u].test).pp;
        EXPECT_NEAR(curves.users[u].pp[i], direct, 1e-9 * direct);
      }
    }
  }
}

TEST(Sweep, UndefinedUsersListedSeparately) {
  std::vector<ScoredTokens> scores(2);
  scores[0] = {{0.2}, {0.1}, {true}};
  scores[1] = {{0.2}, {0.1}, {false}};
  const std::vector<std::string> ids = {"a", "b"};
  const std::vector<double> oov = {1.0, 0.0};
  const auto c = sweep_scored(ids, oov, scores, AlphaGrid{0, 1, 0.5}, OovStrategy::skip());
  ASSERT_EQ(c.users.size(), 1u);
  EXPECT_EQ(c.users[0].user_id, "b");
  EXPECT_EQ(c.undefined_users, (std::vector<std::string>{"a"}));
}

TEST(Personalization, SkewedUsersBeatGlobalOnHeldOutText) {
  SynthConfig sc;
  sc.global_users = 200;
  sc.user_count = 12;
  sc.skew = 0.5;
  const auto corpus = synth_corpus(sc, 3);
  const auto g = split_users(corpus.global, sc.split, 1);
  const auto users = split_users(corpus.users, sc.split, 1).users;
  const auto v = build_vocab(g.global.train, 2000);
  const auto global = train_ngram(encode_padded(v, g.global.train), NGramConfig{}, v);
  std::size_t better = 0;
  for (const auto& uc : users) {
    const auto prof = build_user_profile(uc, v, NGramConfig{});
    const auto st = OovStrategy::backoff_for(v);
    const auto personal = *perplexity(prof.personal, global, InterpolationWeight(1.0), st, prof.test).pp;
    const auto base = *perplexity(prof.personal, global, InterpolationWeight(0.0), st, prof.test).pp;
    better += personal < base;
  }
  EXPECT_GT(2 * better, users.size());
}
