#pragma once

// Desk-scale stand-in for a comment archive.
//
// Word types w0 .. w{V-1} have Zipfian unigram weights. The global generator
// is a bigram chain: after word a, the next word comes from a's small
// successor set with probability `bigram_weight`, otherwise from the unigram.
// Each personalization user mixes that chain with a private component,
//
//   P_u(b | a) = (1 - skew_u) P_global(b | a) + skew_u Q_u(b | a),
//
// where Q_u draws from the user's topic words and favours a fixed
// user-specific successor for each topic word. Finally every emitted token is
// replaced, with the user's OOV rate, by a word from a private pool that never
// occurs in global data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "perslm/corpus.hpp"
#include "perslm/error.hpp"

namespace perslm {

struct SynthConfig {
  std::size_t vocab_size = 2200;        // word types in the generator
  double zipf_exponent = 1.0;
  std::size_t bigram_successors = 8;
  double bigram_weight = 0.6;

  double skew = 0.3;                    // mean per-user mixing weight of the private component
  double skew_spread = 0.1;             // skew_u = skew * (1 + spread * U(-1, 1)), clamped to [0,1]
  std::size_t topic_size = 100;
  double topic_successor_weight = 0.6;

  std::size_t user_count = 50;
  std::size_t train_comments = 100;     // per user, mean
  std::size_t valid_comments = 30;
  std::size_t test_comments = 30;
  double comment_count_spread = 0.3;    // per-user multiplier U(1 - s, 1 + s)
  double tokens_per_comment = 13.0;     // mean length
  double oov_rate = 0.3;                // mean per-user injection rate
  std::size_t oov_pool = 30;

  std::size_t global_users = 600;
  std::size_t global_comments_per_user = 60;
  double global_oov_rate = 0.01;

  SplitSpec split;

  void validate() const {
    if (vocab_size == 0) throw InvalidArgument("synthetic vocabulary size must be positive");
    if (!(zipf_exponent >= 0.0)) throw InvalidArgument("zipf exponent must be >= 0");
    for (double f : {bigram_weight, skew, skew_spread, topic_successor_weight, comment_count_spread,
                     oov_rate, global_oov_rate})
      if (!(f >= 0.0 && f <= 1.0)) throw InvalidArgument("synthetic rates must lie in [0,1]");
    if (!(tokens_per_comment >= 1.0)) throw InvalidArgument("tokens_per_comment must be >= 1");
    if (topic_size == 0 || oov_pool == 0 || bigram_successors == 0)
      throw InvalidArgument("topic_size, oov_pool and bigram_successors must be positive");
    split.validate();
  }
};

struct SynthCorpus {
  std::vector<Comment> global;
  std::vector<Comment> users;
};

namespace detail {

class SynthWorld {
 public:
  SynthWorld(const SynthConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    std::vector<double> w(cfg.vocab_size);
    for (std::size_t r = 0; r < w.size(); ++r)
      w[r] = 1.0 / std::pow(static_cast<double>(r + 1), cfg.zipf_exponent);
    unigram_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    successors_.resize(cfg.vocab_size);
    successor_dist_.resize(cfg.vocab_size);
    std::uniform_real_distribution<double> weight(0.1, 1.0);
    for (std::size_t a = 0; a < cfg.vocab_size; ++a) {
      std::vector<double> sw;
      for (std::size_t j = 0; j < cfg.bigram_successors; ++j) {
        successors_[a].push_back(unigram_(rng));
        sw.push_back(weight(rng));
      }
      successor_dist_[a] = std::discrete_distribution<std::size_t>(sw.begin(), sw.end());
    }
  }

  /// Next word of the global chain; `prev` is npos at comment start.
  std::size_t next_global(std::size_t prev, std::mt19937_64& rng) {
    if (prev != kStart && std::bernoulli_distribution(cfg_.bigram_weight)(rng))
      return successors_[prev][successor_dist_[prev](rng)];
    return unigram_(rng);
  }

  static std::string word(std::size_t r) { return "w" + std::to_string(r); }

  static constexpr std::size_t kStart = static_cast<std::size_t>(-1);

 private:
  const SynthConfig& cfg_;
  std::discrete_distribution<std::size_t> unigram_;
  std::vector<std::vector<std::size_t>> successors_;
  std::vector<std::discrete_distribution<std::size_t>> successor_dist_;
};

struct SynthUser {
  std::string id;
  double skew = 0.0;
  double oov_rate = 0.0;
  std::vector<std::size_t> topic;
  std::discrete_distribution<std::size_t> topic_dist;
  std::vector<std::size_t> topic_successor;  // parallel to topic
  std::discrete_distribution<std::size_t> pool_dist;
};

inline std::size_t comment_length(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::poisson_distribution<std::size_t> extra(cfg.tokens_per_comment - 1.0);
  return 1 + extra(rng);
}

inline std::int64_t timestamp_in(const TimeRange& r, std::mt19937_64& rng) {
  if (r.end <= r.begin) return r.begin;
  std::uniform_int_distribution<std::int64_t> t(r.begin, r.end - 1);
  return t(rng);
}

}  // namespace detail

/// Deterministic in (config, seed). Personalization users get comments in all
/// three split intervals; global users spread theirs evenly over the three.
inline SynthCorpus synth_corpus(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  detail::SynthWorld world(cfg, rng);
  SynthCorpus out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Global background users.
  std::uint64_t novel = 0;
  const TimeRange* ranges[] = {&cfg.split.train, &cfg.split.valid, &cfg.split.test};
  for (std::size_t g = 0; g < cfg.global_users; ++g) {
    char id[32];
    std::snprintf(id, sizeof id, "g%05zu", g);
    for (std::size_t c = 0; c < cfg.global_comments_per_user; ++c) {
      const std::size_t len = detail::comment_length(cfg, rng);
      std::string text;
      std::size_t prev = detail::SynthWorld::kStart;
      for (std::size_t i = 0; i < len; ++i) {
        prev = world.next_global(prev, rng);
        if (i) text += ' ';
        if (unit(rng) < cfg.global_oov_rate) text += "x" + std::to_string(novel++);
        else text += detail::SynthWorld::word(prev);
      }
      out.global.push_back({id, detail::timestamp_in(*ranges[c % 3], rng), std::move(text)});
    }
  }

  // Personalization users.
  std::uniform_int_distribution<std::size_t> any_word(0, cfg.vocab_size - 1);
  std::uniform_real_distribution<double> topic_weight(0.2, 1.0);
  for (std::size_t u = 0; u < cfg.user_count; ++u) {
    detail::SynthUser user;
    char id[32];
    std::snprintf(id, sizeof id, "user%04zu", u);
    user.id = id;
    user.skew = std::clamp(cfg.skew * (1.0 + cfg.skew_spread * (2.0 * unit(rng) - 1.0)), 0.0, 1.0);
    user.oov_rate = std::clamp(cfg.oov_rate * 2.0 * unit(rng), 0.0, 0.9);
    std::vector<double> tw;
    for (std::size_t i = 0; i < cfg.topic_size; ++i) {
      user.topic.push_back(any_word(rng));
      tw.push_back(topic_weight(rng));
    }
    user.topic_dist = std::discrete_distribution<std::size_t>(tw.begin(), tw.end());
    std::uniform_int_distribution<std::size_t> any_topic(0, cfg.topic_size - 1);
    for (std::size_t i = 0; i < cfg.topic_size; ++i) user.topic_successor.push_back(user.topic[any_topic(rng)]);
    std::vector<double> pw;
    for (std::size_t i = 0; i < cfg.oov_pool; ++i) pw.push_back(1.0 / static_cast<double>(i + 1));
    user.pool_dist = std::discrete_distribution<std::size_t>(pw.begin(), pw.end());

    const double multiplier = 1.0 + cfg.comment_count_spread * (2.0 * unit(rng) - 1.0);
    const std::size_t counts[] = {
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(multiplier * static_cast<double>(cfg.train_comments)))),
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(multiplier * static_cast<double>(cfg.valid_comments)))),
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(multiplier * static_cast<double>(cfg.test_comments))))};

    for (int split = 0; split < 3; ++split) {
      for (std::size_t c = 0; c < counts[split]; ++c) {
        const std::size_t len = detail::comment_length(cfg, rng);
        std::string text;
        std::size_t prev = detail::SynthWorld::kStart;
        std::size_t prev_topic = cfg.topic_size;  // index into topic, or none
        for (std::size_t i = 0; i < len; ++i) {
          std::size_t word;
          std::size_t topic_index = cfg.topic_size;
          if (unit(rng) < user.skew) {
            if (prev_topic < cfg.topic_size && unit(rng) < cfg.topic_successor_weight) {
              word = user.topic_successor[prev_topic];
            } else {
              topic_index = user.topic_dist(rng);
              word = user.topic[topic_index];
            }
            if (topic_index == cfg.topic_size) {
              auto it = std::find(user.topic.begin(), user.topic.end(), word);
              topic_index = static_cast<std::size_t>(it - user.topic.begin());
            }
          } else {
            word = world.next_global(prev, rng);
            auto it = std::find(user.topic.begin(), user.topic.end(), word);
            topic_index = static_cast<std::size_t>(it - user.topic.begin());
          }
          prev = word;
          prev_topic = topic_index;
          if (i) text += ' ';
          if (unit(rng) < user.oov_rate) text += user.id + "_x" + std::to_string(user.pool_dist(rng));
          else text += detail::SynthWorld::word(word);
        }
        out.users.push_back({user.id, detail::timestamp_in(*ranges[split], rng), std::move(text)});
      }
    }
  }
  return out;
}

}  // namespace perslm
