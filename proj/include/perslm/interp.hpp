#pragma once

// Per-token linear interpolation of a personal and a global model, perplexity
// under the three OOV scoring strategies, and perplexity lift.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "perslm/corpus.hpp"
#include "perslm/error.hpp"
#include "perslm/language_model.hpp"
#include "perslm/ngram.hpp"
#include "perslm/vocab.hpp"

namespace perslm {

/// Mixing weight of the personal model, in [0, 1].
class InterpolationWeight {
 public:
  explicit InterpolationWeight(double alpha) : alpha_(alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("interpolation weight outside [0,1]");
  }
  double value() const { return alpha_; }

 private:
  double alpha_;
};

/// alpha * p_personal + (1 - alpha) * p_global.
inline double interp_prob(double p_personal, double p_global, InterpolationWeight alpha) {
  const double a = alpha.value();
  return a * p_personal + (1.0 - a) * p_global;
}

enum class OovMode { Base, Skip, Backoff };

/// How OOV targets enter perplexity. Base scores them with the model's OOV
/// probability, Skip leaves them out of the average, Backoff charges a fixed
/// probability phi. Contexts always advance over OOV tokens.
class OovStrategy {
 public:
  static OovStrategy base() { return OovStrategy(OovMode::Base, 0.0); }
  static OovStrategy skip() { return OovStrategy(OovMode::Skip, 0.0); }
  static OovStrategy backoff(double phi) {
    if (!(phi > 0.0 && phi < 1.0)) throw InvalidArgument("phi must lie in (0,1)");
    return OovStrategy(OovMode::Backoff, phi);
  }
  /// phi = 1/V with V the number of real tokens.
  static OovStrategy backoff_for(const Vocabulary& v) {
    if (v.size() < 2) throw InvalidArgument("phi = 1/V needs V >= 2");
    return backoff(1.0 / static_cast<double>(v.size()));
  }

  OovMode mode() const { return mode_; }
  double phi() const { return phi_; }

  std::string_view name() const {
    switch (mode_) {
      case OovMode::Base: return "base";
      case OovMode::Skip: return "skip";
      case OovMode::Backoff: return "backoff";
    }
    return "?";
  }

  /// "base", "skip" or "backoff"; phi applies to backoff only.
  static OovStrategy parse(std::string_view name, double phi) {
    if (name == "base") return base();
    if (name == "skip") return skip();
    if (name == "backoff") return backoff(phi);
    throw InvalidArgument("unknown OOV strategy: " + std::string(name));
  }

 private:
  OovStrategy(OovMode m, double phi) : mode_(m), phi_(phi) {}
  OovMode mode_;
  double phi_;
};

/// Component probabilities of every scored position (all non-BOS positions)
/// of a test set. These do not depend on alpha, so one scoring pass serves any
/// number of mixing weights.
struct ScoredTokens {
  std::vector<double> personal;
  std::vector<double> global;
  std::vector<bool> oov;

  std::size_t size() const { return global.size(); }
};

template <SequenceScorer Personal, SequenceScorer Global>
ScoredTokens score_tokens(const Personal& personal, const Global& global,
                          std::span<const EncodedSequence> padded_test) {
  ScoredTokens out;
  for (const auto& seq : padded_test) {
    auto pp = personal.sequence_probs(seq);
    auto pg = global.sequence_probs(seq);
    if (pp.size() != pg.size()) throw InvalidArgument("models disagree on scored positions");
    if (pp.size() > seq.ids.size()) throw InvalidArgument("more scores than positions");
    // BOS only occurs as a leading run, so the scored positions are the tail.
    const std::size_t first = seq.ids.size() - pp.size();
    out.oov.insert(out.oov.end(), seq.oov_mask.begin() + static_cast<std::ptrdiff_t>(first),
                   seq.oov_mask.end());
    out.personal.insert(out.personal.end(), pp.begin(), pp.end());
    out.global.insert(out.global.end(), pg.begin(), pg.end());
  }
  return out;
}

struct PerplexityResult {
  std::optional<double> pp;  // empty: undefined (Skip over an all-OOV set)
  std::size_t scored = 0;

  bool defined() const { return pp.has_value(); }
};

namespace detail {

template <class ProbAt>
PerplexityResult accumulate_perplexity(const ScoredTokens& s, const OovStrategy& strategy,
                                       ProbAt&& prob_at) {
  // Extended precision keeps exp(mean) within rounding of the exact value.
  long double log_sum = 0.0L;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.oov[i]) {
      if (strategy.mode() == OovMode::Skip) continue;
      if (strategy.mode() == OovMode::Backoff) {
        log_sum += std::log(static_cast<long double>(strategy.phi()));
        ++n;
        continue;
      }
    }
    log_sum += std::log(static_cast<long double>(prob_at(i)));
    ++n;
  }
  PerplexityResult r;
  r.scored = n;
  if (n > 0) r.pp = static_cast<double>(std::exp(-log_sum / static_cast<long double>(n)));
  return r;
}

}  // namespace detail

/// PP = exp(-(1/N) sum ln P_i) over the scored tokens, with P_i the
/// interpolated probability.
inline PerplexityResult perplexity(const ScoredTokens& s, InterpolationWeight alpha,
                                   const OovStrategy& strategy) {
  return detail::accumulate_perplexity(
      s, strategy, [&](std::size_t i) { return interp_prob(s.personal[i], s.global[i], alpha); });
}

/// Perplexity of the global model alone.
inline PerplexityResult global_perplexity(const ScoredTokens& s, const OovStrategy& strategy) {
  return detail::accumulate_perplexity(s, strategy, [&](std::size_t i) { return s.global[i]; });
}

template <SequenceScorer Personal, SequenceScorer Global>
PerplexityResult perplexity(const Personal& personal, const Global& global, InterpolationWeight alpha,
                            const OovStrategy& strategy, std::span<const EncodedSequence> padded_test) {
  if (padded_test.empty()) throw InvalidArgument("perplexity of an empty test set");
  return perplexity(score_tokens(personal, global, padded_test), alpha, strategy);
}

/// (PP_global - PP_interpolated) / PP_global; positive when interpolation helps.
inline double pp_lift(double pp_global, double pp_interpolated) {
  if (!(pp_global > 0.0)) throw InvalidArgument("global perplexity must be positive");
  return (pp_global - pp_interpolated) / pp_global;
}

// ---------------------------------------------------------------------------

/// One user's encoded splits (padded), personal model and training OOV rate.
struct UserProfile {
  std::string user_id;
  std::vector<EncodedSequence> train, valid, test;
  NGramModel personal;
  double oov_rate = 0.0;
  UserStats stats;
};

inline UserProfile build_user_profile(const UserCorpus& uc, const Vocabulary& vocab,
                                      const NGramConfig& cfg) {
  UserProfile p;
  p.user_id = uc.user_id;
  p.train = encode_padded(vocab, uc.train);
  p.valid = encode_padded(vocab, uc.valid);
  p.test = encode_padded(vocab, uc.test);
  p.personal = train_ngram(p.train, cfg, vocab);
  p.oov_rate = oov_rate(vocab, uc.train);
  p.stats = user_stats(uc);
  return p;
}

struct StrategyEval {
  OovStrategy strategy;
  PerplexityResult interpolated;
  PerplexityResult global;      // alpha = 0 baseline under the same strategy
  std::optional<double> lift;   // empty when either perplexity is undefined
};

struct EvalResult {
  std::string user_id;
  double alpha = 0.0;
  double oov_rate = 0.0;
  std::vector<StrategyEval> strategies;
};

inline EvalResult evaluate_scored(const std::string& user_id, double oov, const ScoredTokens& s,
                                  InterpolationWeight alpha, std::span<const OovStrategy> strategies) {
  EvalResult r;
  r.user_id = user_id;
  r.alpha = alpha.value();
  r.oov_rate = oov;
  for (const auto& st : strategies) {
    StrategyEval e{st, perplexity(s, alpha, st), global_perplexity(s, st), std::nullopt};
    if (e.interpolated.defined() && e.global.defined()) e.lift = pp_lift(*e.global.pp, *e.interpolated.pp);
    r.strategies.push_back(e);
  }
  return r;
}

/// Scores the user's test split once and reports every requested strategy,
/// with lift against the global model under the same strategy.
template <SequenceScorer Global>
EvalResult evaluate_user(const UserProfile& profile, const Global& global, InterpolationWeight alpha,
                         std::span<const OovStrategy> strategies) {
  if (profile.test.empty()) throw InvalidArgument("user has an empty test split");
  const auto scored = score_tokens(profile.personal, global, profile.test);
  return evaluate_scored(profile.user_id, profile.oov_rate, scored, alpha, strategies);
}

}  // namespace perslm
