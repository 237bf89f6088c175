#pragma once

// Run configuration: a key=value or JSON file plus command-line overrides.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "perslm/alphaopt.hpp"
#include "perslm/corpus.hpp"
#include "perslm/detail/files.hpp"
#include "perslm/detail/hash.hpp"
#include "perslm/error.hpp"
#include "perslm/interp.hpp"
#include "perslm/neural.hpp"
#include "perslm/ngram.hpp"
#include "perslm/synth.hpp"

namespace perslm {

using KeyValues = std::map<std::string, std::string>;

/// Lines of `key = value`; '#' starts a comment. A file whose first
/// non-blank character is '{' is read as a flat JSON object instead (arrays
/// become comma-separated lists).
inline KeyValues parse_config_text(const std::string& text) {
  KeyValues kv;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(std::string("bad JSON config: ") + e.what());
    }
    for (const auto& [key, value] : doc.items()) {
      if (value.is_string()) {
        kv[key] = value.get<std::string>();
      } else if (value.is_array()) {
        std::string joined;
        for (const auto& item : value) {
          if (!joined.empty()) joined += ',';
          joined += item.is_string() ? item.get<std::string>() : item.dump();
        }
        kv[key] = joined;
      } else if (value.is_primitive()) {
        kv[key] = value.dump();
      } else {
        throw InvalidArgument("config value for " + key + " must be a scalar or a list");
      }
    }
    return kv;
  }
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("config line " + std::to_string(line_no) + " lacks '='");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues load_config_file(const std::filesystem::path& path) {
  return parse_config_text(detail::read_text_file(path));
}

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::filesystem::path out_dir = "out";
  std::filesystem::path global_corpus;  // default: <out>/synth/global.jsonl
  std::filesystem::path user_corpus;    // default: global_corpus

  SplitSpec split;
  std::size_t vocab_size = 50000;
  std::size_t histogram_scale = 20;
  double oov_histogram_bin = 0.05;

  NGramConfig ngram;
  NeuralConfig neural;
  Backend backend = Backend::Lstm;

  AlphaGrid grid{0.0, 1.0, 0.001};
  AlphaGrid k_grid{0.0, 1.0, 0.001};
  std::vector<OovMode> strategies{OovMode::Base, OovMode::Skip, OovMode::Backoff};
  std::optional<double> phi;  // default 1/V
  OovMode selection_strategy = OovMode::Backoff;
  std::size_t heuristic_repetitions = 10;
  double heuristic_fit_fraction = 0.5;

  std::optional<double> report_alpha;  // default: the constant alpha minimizing mean PP
  double length_bin_width = 5.0;
  double count_bin_width = 20.0;
  double oracle_bin_width = 0.05;

  std::size_t threads = 0;
  SynthConfig synth;

  std::uint64_t require_seed() const {
    if (!seed) throw InvalidArgument("a seed is required (set seed= in the config or pass --seed)");
    return *seed;
  }
  /// Independent stream for one pipeline stage.
  std::uint64_t stage_seed(std::string_view stage) const {
    return detail::seeded_hash(require_seed(), stage);
  }
  std::filesystem::path global_corpus_path() const {
    return global_corpus.empty() ? out_dir / "synth" / "global.jsonl" : global_corpus;
  }
  std::filesystem::path user_corpus_path() const {
    if (!user_corpus.empty()) return user_corpus;
    return global_corpus.empty() ? out_dir / "synth" / "users.jsonl" : global_corpus;
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw InvalidArgument("config " + key + ": not a number: " + v);
  return d;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long u = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    u = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw InvalidArgument("config " + key + ": not a non-negative integer: " + v);
  return u;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InvalidArgument("config " + key + ": not a boolean: " + v);
}

inline TimeRange to_range(const std::string& key, const std::string& v) {
  const auto parts = split_list(v);
  if (parts.size() != 2) throw InvalidArgument("config " + key + ": expected begin,end");
  std::int64_t b = 0, e = 0;
  try {
    b = std::stoll(parts[0]);
    e = std::stoll(parts[1]);
  } catch (const std::exception&) {
    throw InvalidArgument("config " + key + ": expected integer begin,end");
  }
  return {b, e};
}

inline OovMode to_mode(const std::string& v) {
  if (v == "base") return OovMode::Base;
  if (v == "skip") return OovMode::Skip;
  if (v == "backoff") return OovMode::Backoff;
  throw InvalidArgument("unknown OOV strategy: " + v);
}

}  // namespace detail

/// Applies key/value settings on top of cfg. Unknown keys are errors.
inline void apply_settings(RunConfig& cfg, const KeyValues& kv) {
  using namespace detail;
  for (const auto& [key, v] : kv) {
    auto num = [&] { return to_double(key, v); };
    auto uint = [&] { return static_cast<std::size_t>(to_uint(key, v)); };
    auto& syn = cfg.synth;
    if (key == "seed") cfg.seed = to_uint(key, v);
    else if (key == "out") cfg.out_dir = v;
    else if (key == "global_corpus") cfg.global_corpus = v;
    else if (key == "user_corpus") cfg.user_corpus = v;
    else if (key == "train_range") cfg.split.train = syn.split.train = to_range(key, v);
    else if (key == "valid_range") cfg.split.valid = syn.split.valid = to_range(key, v);
    else if (key == "test_range") cfg.split.test = syn.split.test = to_range(key, v);
    else if (key == "global_user_fractions") {
      const auto parts = split_list(v);
      if (parts.size() != 3) throw InvalidArgument("global_user_fractions needs three values");
      cfg.split.train_users = to_double(key, parts[0]);
      cfg.split.valid_users = to_double(key, parts[1]);
      cfg.split.test_users = to_double(key, parts[2]);
    }
    else if (key == "vocab_size") cfg.vocab_size = uint();
    else if (key == "histogram_scale") cfg.histogram_scale = uint();
    else if (key == "oov_histogram_bin") cfg.oov_histogram_bin = num();
    else if (key == "ngram_order") cfg.ngram.order = uint();
    else if (key == "ngram_discounts") {
      cfg.ngram.discounts.clear();
      for (const auto& p : split_list(v)) cfg.ngram.discounts.push_back(to_double(key, p));
    }
    else if (key == "backend") {
      if (v == "lstm") cfg.backend = Backend::Lstm;
      else if (v == "ngram") cfg.backend = Backend::NGram;
      else throw InvalidArgument("backend must be lstm or ngram");
    }
    else if (key == "lstm_embedding") cfg.neural.embedding_dim = uint();
    else if (key == "lstm_hidden") {
      cfg.neural.hidden_dims.clear();
      for (const auto& p : split_list(v)) cfg.neural.hidden_dims.push_back(to_uint(key, p));
    }
    else if (key == "lstm_projection") cfg.neural.projection_dim = uint();
    else if (key == "lstm_dropout_keep") cfg.neural.dropout_keep = num();
    else if (key == "lstm_learning_rate") cfg.neural.adam.learning_rate = num();
    else if (key == "lstm_beta1") cfg.neural.adam.beta1 = num();
    else if (key == "lstm_beta2") cfg.neural.adam.beta2 = num();
    else if (key == "lstm_epsilon") cfg.neural.adam.epsilon = num();
    else if (key == "lstm_batch") cfg.neural.batch_size = uint();
    else if (key == "lstm_unroll") cfg.neural.unroll = uint();
    else if (key == "lstm_epochs") cfg.neural.epochs = uint();
    else if (key == "lstm_clip") cfg.neural.clip_norm = num();
    else if (key == "lstm_early_stopping") cfg.neural.early_stopping = to_bool(key, v);
    else if (key == "grid") cfg.grid = AlphaGrid::parse(v);
    else if (key == "k_grid") cfg.k_grid = AlphaGrid::parse(v);
    else if (key == "strategies") {
      cfg.strategies.clear();
      for (const auto& p : split_list(v)) cfg.strategies.push_back(to_mode(p));
      if (cfg.strategies.empty()) throw InvalidArgument("strategies must not be empty");
    }
    else if (key == "phi") cfg.phi = num();
    else if (key == "selection_strategy") cfg.selection_strategy = to_mode(v);
    else if (key == "heuristic_repetitions") cfg.heuristic_repetitions = uint();
    else if (key == "heuristic_fit_fraction") cfg.heuristic_fit_fraction = num();
    else if (key == "report_alpha") cfg.report_alpha = num();
    else if (key == "length_bin_width") cfg.length_bin_width = num();
    else if (key == "count_bin_width") cfg.count_bin_width = num();
    else if (key == "oracle_bin_width") cfg.oracle_bin_width = num();
    else if (key == "threads") cfg.threads = uint();
    else if (key == "synth_vocab_size") syn.vocab_size = uint();
    else if (key == "synth_zipf_exponent") syn.zipf_exponent = num();
    else if (key == "synth_bigram_successors") syn.bigram_successors = uint();
    else if (key == "synth_bigram_weight") syn.bigram_weight = num();
    else if (key == "synth_skew") syn.skew = num();
    else if (key == "synth_skew_spread") syn.skew_spread = num();
    else if (key == "synth_topic_size") syn.topic_size = uint();
    else if (key == "synth_topic_successor_weight") syn.topic_successor_weight = num();
    else if (key == "synth_users") syn.user_count = uint();
    else if (key == "synth_train_comments") syn.train_comments = uint();
    else if (key == "synth_valid_comments") syn.valid_comments = uint();
    else if (key == "synth_test_comments") syn.test_comments = uint();
    else if (key == "synth_comment_count_spread") syn.comment_count_spread = num();
    else if (key == "synth_tokens_per_comment") syn.tokens_per_comment = num();
    else if (key == "synth_oov_rate") syn.oov_rate = num();
    else if (key == "synth_oov_pool") syn.oov_pool = uint();
    else if (key == "synth_global_users") syn.global_users = uint();
    else if (key == "synth_global_comments_per_user") syn.global_comments_per_user = uint();
    else if (key == "synth_global_oov_rate") syn.global_oov_rate = num();
    else throw InvalidArgument("unknown config key: " + key);
  }
}

/// Checks everything that can be checked before a command touches data.
inline void validate(const RunConfig& cfg) {
  cfg.require_seed();
  cfg.split.validate();
  cfg.ngram.validate();
  cfg.neural.validate();
  cfg.grid.validate();
  cfg.k_grid.validate();
  cfg.synth.validate();
  if (cfg.vocab_size < 1) throw InvalidArgument("vocab_size must be >= 1");
  if (cfg.histogram_scale < 1) throw InvalidArgument("histogram_scale must be >= 1");
  for (double w : {cfg.oov_histogram_bin, cfg.length_bin_width, cfg.count_bin_width, cfg.oracle_bin_width})
    if (!(w > 0.0)) throw InvalidArgument("bin widths must be positive");
  if (cfg.phi && !(*cfg.phi > 0.0 && *cfg.phi < 1.0)) throw InvalidArgument("phi must lie in (0,1)");
  if (cfg.grid.start < 0.0 || cfg.grid.stop > 1.0) throw InvalidArgument("alpha grid must lie in [0,1]");
  if (cfg.report_alpha && !(*cfg.report_alpha >= 0.0 && *cfg.report_alpha <= 1.0))
    throw InvalidArgument("report_alpha must lie in [0,1]");
}

}  // namespace perslm
