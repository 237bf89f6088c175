#pragma once

// The end-to-end commands behind the CLI. Each command reads what earlier
// commands wrote under the output directory and stages its own files, which
// are moved into place only when the whole command succeeds.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "perslm/alphaopt.hpp"
#include "perslm/config.hpp"
#include "perslm/corpus.hpp"
#include "perslm/detail/files.hpp"
#include "perslm/detail/parallel.hpp"
#include "perslm/error.hpp"
#include "perslm/interp.hpp"
#include "perslm/language_model.hpp"
#include "perslm/neural.hpp"
#include "perslm/ngram.hpp"
#include "perslm/synth.hpp"
#include "perslm/vocab.hpp"

namespace perslm {

namespace fs = std::filesystem;

/// Files written by one command. Content goes to "<path>.partial" and is
/// renamed on commit(); without a commit the staged files are deleted.
class OutputBatch {
 public:
  explicit OutputBatch(fs::path root) : root_(std::move(root)) {}
  OutputBatch(const OutputBatch&) = delete;
  OutputBatch& operator=(const OutputBatch&) = delete;
  ~OutputBatch() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& f : staged_) fs::remove(partial(f), ec);
  }

  void write_text(const fs::path& rel, const std::string& text) {
    const auto target = root_ / rel;
    staged_.push_back(target);
    detail::write_text_file(partial(target), text);
  }
  void write_bytes(const fs::path& rel, std::span<const std::byte> bytes) {
    const auto target = root_ / rel;
    staged_.push_back(target);
    detail::write_binary_file(partial(target), bytes);
  }

  void commit() {
    for (const auto& f : staged_) fs::rename(partial(f), f);
    committed_ = true;
  }

  const std::vector<fs::path>& files() const { return staged_; }

 private:
  static fs::path partial(const fs::path& p) { return fs::path(p.string() + ".partial"); }

  fs::path root_;
  std::vector<fs::path> staged_;
  bool committed_ = false;
};

// ---------------------------------------------------------------------------
// Layout of the output directory.

namespace layout {
inline fs::path synth_global() { return "synth/global.jsonl"; }
inline fs::path synth_users() { return "synth/users.jsonl"; }
inline fs::path vocab() { return "vocab.txt"; }
inline fs::path global_split(std::string_view split) { return fs::path("corpus/global") / (std::string(split) + ".txt"); }
inline fs::path user_split(const std::string& user, std::string_view split) {
  return fs::path("corpus/users") / user_dir_name(user) / (std::string(split) + ".txt");
}
inline fs::path global_model() { return "models/global.model"; }
inline fs::path user_model(const std::string& user) {
  return fs::path("models/users") / (user_dir_name(user) + ".ngram");
}
inline fs::path report(std::string_view name) { return fs::path("reports") / name; }
inline fs::path curves(std::string_view split, std::string_view strategy) {
  return fs::path("curves") / (std::string(split) + "_" + std::string(strategy) + ".csv");
}
inline fs::path baselines(std::string_view split, std::string_view strategy) {
  return fs::path("curves") / (std::string(split) + "_" + std::string(strategy) + "_baseline.csv");
}
}  // namespace layout

// ---------------------------------------------------------------------------
// CSV helpers

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}
inline std::string exact(double v) { return fmt("%.17g", v); }
inline std::string num(double v) { return fmt("%.10g", v); }

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

/// Rows of a CSV file written by csv_field (quoted fields may contain commas
/// and doubled quotes, but not newlines). The header row is checked and
/// dropped.
inline std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::string& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header)
    throw FormatError(path.string() + ": expected header " + header);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        row.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    row.push_back(std::move(cur));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline double parse_double(const std::string& s, const fs::path& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw FormatError(where.string() + ": bad number " + s);
  return v;
}

inline void require_file(const fs::path& p, std::string_view what) {
  if (!fs::is_regular_file(p))
    throw IoError("missing " + std::string(what) + ": " + p.string());
}

inline std::vector<OovStrategy> strategies_of(const RunConfig& cfg, const Vocabulary& vocab) {
  const double phi = cfg.phi ? *cfg.phi : 1.0 / static_cast<double>(std::max<std::size_t>(vocab.size(), 2));
  std::vector<OovStrategy> out;
  for (auto m : cfg.strategies) {
    switch (m) {
      case OovMode::Base: out.push_back(OovStrategy::base()); break;
      case OovMode::Skip: out.push_back(OovStrategy::skip()); break;
      case OovMode::Backoff: out.push_back(OovStrategy::backoff(phi)); break;
    }
  }
  return out;
}

inline std::string_view mode_name(OovMode m) {
  switch (m) {
    case OovMode::Base: return "base";
    case OovMode::Skip: return "skip";
    case OovMode::Backoff: return "backoff";
  }
  return "?";
}

/// Bin index of v for bins [i*w, (i+1)*w); values at or above `top` land in the
/// last of `count` bins.
inline std::size_t bin_of(double v, double w, std::size_t count) {
  if (count == 0) return 0;
  const auto i = static_cast<std::size_t>(std::max(0.0, std::floor(v / w)));
  return std::min(i, count - 1);
}

inline std::size_t bins_to_cover(double top, double w) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(top / w - 1e-12)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Curve files

inline std::string curves_csv(const CurveSet& c) {
  std::string out = "user_id,alpha,pp\n";
  for (const auto& u : c.users) {
    const auto id = detail::csv_field(u.user_id);
    for (std::size_t i = 0; i < c.alphas.size(); ++i)
      out += id + ',' + detail::exact(c.alphas[i]) + ',' + detail::exact(u.pp[i]) + '\n';
  }
  return out;
}

inline std::string baselines_csv(const CurveSet& c) {
  std::string out = "user_id,oov_rate,scored_tokens,global_pp\n";
  for (const auto& u : c.users)
    out += detail::csv_field(u.user_id) + ',' + detail::exact(u.oov_rate) + ',' + std::to_string(u.scored) +
           ',' + detail::exact(u.baseline_pp) + '\n';
  for (const auto& id : c.undefined_users) out += detail::csv_field(id) + ",,0,undefined\n";
  return out;
}

inline CurveSet read_curves(const fs::path& curves_path, const fs::path& baseline_path) {
  CurveSet c;
  std::map<std::string, std::size_t> index;
  for (auto& row : detail::read_csv(baseline_path, "user_id,oov_rate,scored_tokens,global_pp")) {
    if (row.size() != 4) throw FormatError(baseline_path.string() + ": expected 4 fields");
    if (row[3] == "undefined") {
      c.undefined_users.push_back(row[0]);
      continue;
    }
    UserCurve u;
    u.user_id = row[0];
    u.oov_rate = detail::parse_double(row[1], baseline_path);
    u.scored = static_cast<std::size_t>(detail::parse_double(row[2], baseline_path));
    u.baseline_pp = detail::parse_double(row[3], baseline_path);
    index[u.user_id] = c.users.size();
    c.users.push_back(std::move(u));
  }
  bool first = true;
  std::string current;
  std::vector<double> alphas;
  for (auto& row : detail::read_csv(curves_path, "user_id,alpha,pp")) {
    if (row.size() != 3) throw FormatError(curves_path.string() + ": expected 3 fields");
    auto it = index.find(row[0]);
    if (it == index.end()) throw FormatError(curves_path.string() + ": unknown user " + row[0]);
    if (row[0] != current) {
      if (!first && c.alphas.empty()) c.alphas = alphas;
      current = row[0];
      first = false;
      alphas.clear();
    }
    const double a = detail::parse_double(row[1], curves_path);
    alphas.push_back(a);
    c.users[it->second].pp.push_back(detail::parse_double(row[2], curves_path));
  }
  if (c.alphas.empty()) c.alphas = alphas;
  for (const auto& u : c.users)
    if (u.pp.size() != c.alphas.size()) throw FormatError(curves_path.string() + ": ragged curves");
  return c;
}

/// Users of `a` that also occur in `b`, in the same order in both results.
inline std::pair<CurveSet, CurveSet> common_users(const CurveSet& a, const CurveSet& b) {
  std::map<std::string, const UserCurve*> in_b;
  for (const auto& u : b.users) in_b[u.user_id] = &u;
  CurveSet ra, rb;
  ra.alphas = a.alphas;
  rb.alphas = b.alphas;
  for (const auto& u : a.users) {
    auto it = in_b.find(u.user_id);
    if (it == in_b.end()) continue;
    ra.users.push_back(u);
    rb.users.push_back(*it->second);
  }
  return {std::move(ra), std::move(rb)};
}

// ---------------------------------------------------------------------------
// Commands

struct CommandContext {
  RunConfig config;
  std::ostream* log = &std::cerr;
};

inline void cmd_synth(const CommandContext& ctx) {
  const auto& cfg = ctx.config;
  const auto corpus = synth_corpus(cfg.synth, cfg.stage_seed("synth"));
  OutputBatch out(cfg.out_dir);
  std::string g, u;
  for (const auto& c : corpus.global) g += comment_to_jsonl(c) + '\n';
  for (const auto& c : corpus.users) u += comment_to_jsonl(c) + '\n';
  out.write_text(layout::synth_global(), g);
  out.write_text(layout::synth_users(), u);
  out.commit();
  *ctx.log << "synth: " << corpus.global.size() << " global comments, " << corpus.users.size()
           << " personalization comments\n";
}

namespace detail {

inline std::vector<Comment> load_corpus_file(const fs::path& p, std::ostream* log) {
  require_file(p, "corpus");
  std::vector<Comment> out;
  const auto skipped = for_each_comment(p, [&](Comment&& c) { out.push_back(std::move(c)); }, log);
  if (skipped) *log << p.string() << ": skipped " << skipped << " malformed lines\n";
  return out;
}

inline std::string sequences_text(const std::vector<TokenSequence>& seqs) {
  std::string out;
  for (const auto& seq : seqs) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += seq[i];
    }
    out += '\n';
  }
  return out;
}

inline std::string oov_histogram_csv(std::size_t vocab_size, const std::vector<double>& rates, double w) {
  const std::size_t bins = bins_to_cover(1.0, w);
  std::vector<std::size_t> counts(bins, 0);
  for (double r : rates) ++counts[bin_of(r, w, bins)];
  std::string out = "vocab_size,bin_lo,bin_hi,users\n";
  for (std::size_t b = 0; b < bins; ++b)
    out += std::to_string(vocab_size) + ',' + num(static_cast<double>(b) * w) + ',' +
           num(std::min(1.0, static_cast<double>(b + 1) * w)) + ',' + std::to_string(counts[b]) + '\n';
  return out;
}

/// Personalization users listed in corpus/users, read back from disk.
struct StoredUser {
  std::string id;
  std::vector<TokenSequence> train, valid, test;
};

}  // namespace detail

/// Splits the corpora, stores them, builds the vocabulary from the global
/// training split, and writes per-user OOV rates at two vocabulary sizes.
inline void cmd_build_vocab(const CommandContext& ctx) {
  const auto& cfg = ctx.config;
  auto& log = *ctx.log;
  const auto gpath = cfg.global_corpus_path();
  const auto upath = cfg.user_corpus_path();
  detail::require_file(gpath, "global corpus");
  detail::require_file(upath, "user corpus");
  const std::uint64_t split_seed = cfg.stage_seed("split");

  const auto global_comments = detail::load_corpus_file(gpath, &log);
  auto global = split_users(global_comments, cfg.split, split_seed);
  std::vector<UserCorpus> users;
  if (fs::equivalent(gpath, upath)) {
    users = std::move(global.users);
  } else {
    const auto user_comments = detail::load_corpus_file(upath, &log);
    users = split_users(user_comments, cfg.split, split_seed).users;
  }
  if (global.global.train.empty()) throw InvalidArgument("global training split is empty");

  TokenCounter counter;
  for (const auto& s : global.global.train) counter.add(s);
  if (cfg.vocab_size > counter.distinct())
    log << "warning: vocab_size " << cfg.vocab_size << " exceeds the " << counter.distinct()
        << " distinct training tokens; keeping all of them\n";
  const Vocabulary vocab = counter.top(cfg.vocab_size);
  const std::size_t large_n = cfg.vocab_size * cfg.histogram_scale;
  const Vocabulary large = counter.top(large_n);

  OutputBatch out(cfg.out_dir);
  out.write_text(layout::vocab(), vocab.serialize());
  out.write_text(layout::global_split("train"), detail::sequences_text(global.global.train));
  out.write_text(layout::global_split("valid"), detail::sequences_text(global.global.valid));
  out.write_text(layout::global_split("test"), detail::sequences_text(global.global.test));

  std::string rates_csv = "user_id,vocab_size,oov_rate\n";
  std::vector<double> small_rates, large_rates;
  for (const auto& u : users) {
    out.write_text(layout::user_split(u.user_id, "train"), detail::sequences_text(u.train));
    out.write_text(layout::user_split(u.user_id, "valid"), detail::sequences_text(u.valid));
    out.write_text(layout::user_split(u.user_id, "test"), detail::sequences_text(u.test));
    small_rates.push_back(oov_rate(vocab, u.train));
    large_rates.push_back(oov_rate(large, u.train));
    const auto id = detail::csv_field(u.user_id);
    rates_csv += id + ',' + std::to_string(cfg.vocab_size) + ',' + detail::exact(small_rates.back()) + '\n';
    rates_csv += id + ',' + std::to_string(large_n) + ',' + detail::exact(large_rates.back()) + '\n';
  }
  std::string roster;
  for (const auto& u : users) roster += u.user_id + '\n';
  out.write_text("corpus/users.txt", roster);
  out.write_text(layout::report("user_oov_rates.csv"), rates_csv);
  out.write_text(layout::report("fig1_oov_histogram.csv"),
                 detail::oov_histogram_csv(cfg.vocab_size, small_rates, cfg.oov_histogram_bin));
  out.write_text(layout::report("fig2_oov_histogram.csv"),
                 detail::oov_histogram_csv(large_n, large_rates, cfg.oov_histogram_bin));
  out.commit();
  log << "build-vocab: V=" << vocab.size() << ", " << users.size() << " personalization users, "
      << global.global.train.size() << "/" << global.global.valid.size() << "/" << global.global.test.size()
      << " global train/valid/test comments\n";
}

namespace detail {

inline std::vector<std::string> read_roster(const RunConfig& cfg) {
  const auto p = cfg.out_dir / "corpus/users.txt";
  require_file(p, "user roster (run build-vocab first)");
  std::vector<std::string> ids;
  std::istringstream in(read_text_file(p));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ids.push_back(line);
  return ids;
}

inline Vocabulary load_vocab(const RunConfig& cfg) {
  const auto p = cfg.out_dir / layout::vocab();
  require_file(p, "vocabulary (run build-vocab first)");
  return Vocabulary::load(p);
}

inline std::vector<TokenSequence> load_split(const RunConfig& cfg, const fs::path& rel) {
  const auto p = cfg.out_dir / rel;
  require_file(p, "corpus split");
  return read_sequences(p);
}

}  // namespace detail

inline void cmd_train_global(const CommandContext& ctx) {
  const auto& cfg = ctx.config;
  auto& log = *ctx.log;
  const auto vocab = detail::load_vocab(cfg);
  const auto train = encode_padded(vocab, detail::load_split(cfg, layout::global_split("train")));
  const auto valid = encode_padded(vocab, detail::load_split(cfg, layout::global_split("valid")));
  if (train.empty()) throw InvalidArgument("global training split is empty");

  OutputBatch out(cfg.out_dir);
  if (cfg.backend == Backend::Lstm) {
    NeuralConfig nc = cfg.neural;
    nc.seed = cfg.stage_seed("train-global");
    auto model = NeuralLM::init(nc, vocab);
    TrainReport report = train_neural(model, train, valid, &log);
    out.write_bytes(layout::global_model(), model.serialize());
    out.write_text(layout::report("train_report.csv"), report.to_csv());
  } else {
    const auto model = train_ngram(train, cfg.ngram, vocab);
    EpochStats stats;
    stats.epoch = 1;
    double nll = 0.0;
    std::size_t n = 0;
    for (const auto& s : train)
      for (double lp : model.sequence_logprob(s)) {
        nll -= lp;
        ++n;
      }
    stats.train_xent = nll / static_cast<double>(n);
    if (!valid.empty()) {
      nll = 0.0;
      n = 0;
      for (const auto& s : valid)
        for (double lp : model.sequence_logprob(s)) {
          nll -= lp;
          ++n;
        }
      if (n) stats.valid_pp = std::exp(nll / static_cast<double>(n));
    }
    TrainReport report;
    report.epochs.push_back(stats);
    report.best_epoch = 1;
    out.write_bytes(layout::global_model(), model.serialize());
    out.write_text(layout::report("train_report.csv"), report.to_csv());
    log << "train-global: n-gram order " << cfg.ngram.order << ", train xent " << stats.train_xent << "\n";
  }
  out.commit();
}

/// One personal model per roster user with a non-empty training split.
inline void cmd_train_users(const CommandContext& ctx) {
  const auto& cfg = ctx.config;
  auto& log = *ctx.log;
  const auto vocab = detail::load_vocab(cfg);
  const auto roster = detail::read_roster(cfg);

  struct Trained {
    bool skipped = true;
    std::vector<std::byte> bytes;
    UserStats stats;
    double oov = 0.0;
    std::size_t tokens = 0;
  };
  std::vector<Trained> results(roster.size());
  detail::parallel_for(roster.size(), cfg.threads, [&](std::size_t i) {
    UserCorpus uc;
    uc.user_id = roster[i];
    uc.train = detail::load_split(cfg, layout::user_split(roster[i], "train"));
    auto& r = results[i];
    if (uc.train.empty()) return;
    const auto padded = encode_padded(vocab, uc.train);
    const auto model = train_ngram(padded, cfg.ngram, vocab);
    // Spot-check normalization at the sentence-start context.
    const auto dist = model.next_distribution({});
    double sum = 0.0;
    for (double p : dist) sum += p;
    if (std::abs(sum - 1.0) > 1e-6)
      throw Error("personal model for " + roster[i] + " is not normalized");
    r.skipped = false;
    r.bytes = model.serialize();
    r.stats = user_stats(uc);
    r.oov = oov_rate(vocab, uc.train);
    for (const auto& s : uc.train) r.tokens += s.size();
  });

  OutputBatch out(cfg.out_dir);
  std::string csv = "user_id,comment_count,mean_comment_length,train_tokens,oov_rate\n";
  std::size_t trained = 0;
  for (std::size_t i = 0; i < roster.size(); ++i) {
    const auto& r = results[i];
    if (r.skipped) {
      log << "train-users: skipping " << roster[i] << " (empty training split)\n";
      continue;
    }
    ++trained;
    out.write_bytes(layout::user_model(roster[i]), r.bytes);
    csv += detail::csv_field(roster[i]) + ',' + std::to_string(r.stats.comment_count) + ',' +
           (r.stats.mean_comment_length ? detail::exact(*r.stats.mean_comment_length) : std::string()) + ',' +
           std::to_string(r.tokens) + ',' + detail::exact(r.oov) + '\n';
  }
  out.write_text(layout::report("user_stats.csv"), csv);
  out.commit();
  log << "train-users: " << trained << " models, " << roster.size() - trained << " skipped\n";
}

struct UserStatsRow {
  std::string user_id;
  std::size_t comment_count = 0;
  std::optional<double> mean_comment_length;
  std::size_t train_tokens = 0;
  double oov_rate = 0.0;
};

inline std::vector<UserStatsRow> read_user_stats(const RunConfig& cfg) {
  const auto p = cfg.out_dir / layout::report("user_stats.csv");
  detail::require_file(p, "user statistics (run train-users first)");
  std::vector<UserStatsRow> rows;
  for (auto& r : detail::read_csv(p, "user_id,comment_count,mean_comment_length,train_tokens,oov_rate")) {
    if (r.size() != 5) throw FormatError(p.string() + ": expected 5 fields");
    UserStatsRow s;
    s.user_id = r[0];
    s.comment_count = static_cast<std::size_t>(detail::parse_double(r[1], p));
    if (!r[2].empty()) s.mean_comment_length = detail::parse_double(r[2], p);
    s.train_tokens = static_cast<std::size_t>(detail::parse_double(r[3], p));
    s.oov_rate = detail::parse_double(r[4], p);
    rows.push_back(std::move(s));
  }
  return rows;
}

/// Scores validation and test splits of every trained user once, then writes
/// PP curves over the grid for every strategy, the per-row evaluation table,
/// and the mean-curve reports.
inline void cmd_evaluate(const CommandContext& ctx) {
  const auto& cfg = ctx.config;
  auto& log = *ctx.log;
  const auto vocab = detail::load_vocab(cfg);
  const auto model_path = cfg.out_dir / layout::global_model();
  detail::require_file(model_path, "global model (run train-global first)");
  const auto global = LanguageModel::load(model_path, vocab);
  const auto stats = read_user_stats(cfg);
  if (stats.empty()) throw InvalidArgument("no trained personal models");
  for (const auto& s : stats)
    detail::require_file(cfg.out_dir / layout::user_model(s.user_id), "personal model");

  std::vector<ScoredTokens> valid_scores(stats.size()), test_scores(stats.size());
  detail::parallel_for(stats.size(), cfg.threads, [&](std::size_t i) {
    const auto personal = NGramModel::load(cfg.out_dir / layout::user_model(stats[i].user_id), vocab);
    const auto valid = encode_padded(vocab, detail::load_split(cfg, layout::user_split(stats[i].user_id, "valid")));
    const auto test = encode_padded(vocab, detail::load_split(cfg, layout::user_split(stats[i].user_id, "test")));
    if (valid.empty() || test.empty())
      throw InvalidArgument("user " + stats[i].user_id + " has an empty validation or test split");
    valid_scores[i] = score_tokens(personal, global, valid);
    test_scores[i] = score_tokens(personal, global, test);
  });

  std::vector<std::string> ids;
  std::vector<double> oov;
  for (const auto& s : stats) {
    ids.push_back(s.user_id);
    oov.push_back(s.oov_rate);
  }

  const auto strategies = detail::strategies_of(cfg, vocab);
  OutputBatch out(cfg.out_dir);
  std::string eval_csv = "user_id,alpha,strategy,pp,lift,scored_tokens,oov_rate\n";
  std::string fig3 = "split,strategy,alpha,mean_pp,users\n";
  std::string fig4 = "split,strategy,alpha,mean_pp,mean_lift,fraction_improved,users\n";
  for (const auto& st : strategies) {
    for (std::string_view split : {"valid", "test"}) {
      const auto& scores = split == "valid" ? valid_scores : test_scores;
      const auto curves = sweep_scored(ids, oov, scores, cfg.grid, st, cfg.threads);
      out.write_text(layout::curves(split, st.name()), curves_csv(curves));
      out.write_text(layout::baselines(split, st.name()), baselines_csv(curves));

      const auto members = all_members(curves);
      for (std::size_t a = 0; a < curves.alphas.size(); ++a) {
        std::vector<std::size_t> idx(members.size(), a);
        const auto s = summarize(curves, members, idx);
        const std::string prefix = std::string(split) + ',' + std::string(st.name()) + ',' +
                                   detail::num(curves.alphas[a]) + ',';
        fig3 += prefix + (s.users ? detail::exact(s.mean_pp) : std::string()) + ',' + std::to_string(s.users) + '\n';
        if (st.mode() == cfg.selection_strategy)
          fig4 += prefix + (s.users ? detail::exact(s.mean_pp) + ',' + detail::exact(s.mean_lift) + ',' +
                                          detail::exact(s.fraction_improved)
                                    : std::string(",,")) +
                  ',' + std::to_string(s.users) + '\n';
      }

      if (split != "test") continue;
      std::map<std::string, const UserCurve*> by_id;
      for (const auto& c : curves.users) by_id[c.user_id] = &c;
      for (std::size_t u = 0; u < ids.size(); ++u) {
        const auto id = detail::csv_field(ids[u]);
        auto it = by_id.find(ids[u]);
        for (std::size_t a = 0; a < curves.alphas.size(); ++a) {
          eval_csv += id + ',' + detail::num(curves.alphas[a]) + ',' + std::string(st.name()) + ',';
          if (it == by_id.end()) {
            eval_csv += "undefined,undefined,0," + detail::exact(oov[u]) + '\n';
            continue;
          }
          const auto& c = *it->second;
          eval_csv += detail::exact(c.pp[a]) + ',' + detail::exact(c.lift_at(a)) + ',' + std::to_string(c.scored) +
                      ',' + detail::exact(oov[u]) + '\n';
        }
      }
      if (!curves.undefined_users.empty())
        log << "evaluate: " << curves.undefined_users.size() << " users have no scorable tokens under "
            << st.name() << "\n";
    }
  }
  out.write_text(layout::report("evaluation.csv"), eval_csv);
  out.write_text(layout::report("fig3_pp_vs_alpha.csv"), fig3);
  out.write_text(layout::report("fig4_alpha_lift.csv"), fig4);
  out.commit();
  log << "evaluate: " << stats.size() << " users, " << strategies.size() << " strategies, "
      << cfg.grid.points().size() << " grid points\n";
}

namespace detail {

inline nlohmann::json summary_json(const SelectionSummary& s) {
  return {{"users", s.users}, {"mean_pp", s.mean_pp}, {"mean_lift", s.mean_lift},
          {"fraction_improved", s.fraction_improved}};
}

inline std::pair<CurveSet, CurveSet> load_selection_curves(const RunConfig& cfg) {
  const auto name = mode_name(cfg.selection_strategy);
  auto load = [&](std::string_view split) {
    const auto c = cfg.out_dir / layout::curves(split, name);
    const auto b = cfg.out_dir / layout::baselines(split, name);
    require_file(c, "curves (run evaluate first)");
    require_file(b, "baselines (run evaluate first)");
    return read_curves(c, b);
  };
  return common_users(load("valid"), load("test"));
}

}  // namespace detail

/// Selection protocol: constant alpha and the heuristic's k are chosen on
/// validation curves and reported on test curves; oracle alphas are computed on
/// the split they are reported on.
inline void cmd_optimize_alpha(const CommandContext& ctx) {
  const auto& cfg = ctx.config;
  auto& log = *ctx.log;
  const auto [valid, test] = detail::load_selection_curves(cfg);
  if (valid.users.size() < 2) throw InvalidArgument("alpha selection needs at least two users");

  const auto members = all_members(test);
  auto constant_on_test = [&](Objective objective) {
    auto c = constant_alpha(valid, objective);
    const nlohmann::json valid_summary = detail::summary_json(c.summary);
    c.summary = summarize(test, members, std::vector<std::size_t>(members.size(), c.index));
    return std::pair{c, valid_summary};
  };
  const auto [min_pp, min_pp_valid] = constant_on_test(Objective::MinMeanPP);
  const auto [max_lift, max_lift_valid] = constant_on_test(Objective::MaxMeanLift);

  const auto oracle = oracle_alphas(test);
  if (!oracle_dominates(test, oracle)) throw Error("oracle dominance violated on the test curves");
  const auto oracle_valid = oracle_alphas(valid);
  if (!oracle_dominates(valid, oracle_valid)) throw Error("oracle dominance violated on the validation curves");
  const auto oracle_summary = summarize(test, members, oracle.indices());

  HeuristicOptions hopt;
  hopt.k_grid = cfg.k_grid;
  hopt.repetitions = cfg.heuristic_repetitions;
  hopt.fit_fraction = cfg.heuristic_fit_fraction;
  hopt.seed = cfg.stage_seed("optimize-alpha");
  const auto heur = fit_heuristic(valid, test, hopt);

  nlohmann::json reps = nlohmann::json::array();
  std::string rep_csv =
      "repetition,k,fit_users,eval_users,heuristic_mean_pp,heuristic_mean_lift,heuristic_fraction_improved,"
      "constant_min_pp_alpha,constant_min_pp_mean_lift,constant_max_lift_alpha,constant_max_lift_mean_lift,"
      "oracle_mean_lift\n";
  for (std::size_t r = 0; r < heur.repetitions.size(); ++r) {
    const auto& f = heur.repetitions[r];
    log << "optimize-alpha: repetition " << r + 1 << " k=" << f.k << " held-out lift " << f.heuristic.mean_lift
        << " improved " << f.heuristic.fraction_improved << "\n";
    reps.push_back({{"repetition", r + 1},
                    {"k", f.k},
                    {"fit_users", f.fit_users},
                    {"eval_users", f.eval_users},
                    {"heuristic", detail::summary_json(f.heuristic)},
                    {"constant_min_pp", {{"alpha", f.constant_min_pp.alpha}, {"summary", detail::summary_json(f.constant_min_pp.summary)}}},
                    {"constant_max_lift", {{"alpha", f.constant_max_lift.alpha}, {"summary", detail::summary_json(f.constant_max_lift.summary)}}},
                    {"oracle", detail::summary_json(f.oracle)}});
    rep_csv += std::to_string(r + 1) + ',' + detail::exact(f.k) + ',' + std::to_string(f.fit_users.size()) + ',' +
               std::to_string(f.eval_users.size()) + ',' + detail::exact(f.heuristic.mean_pp) + ',' +
               detail::exact(f.heuristic.mean_lift) + ',' + detail::exact(f.heuristic.fraction_improved) + ',' +
               detail::exact(f.constant_min_pp.alpha) + ',' + detail::exact(f.constant_min_pp.summary.mean_lift) +
               ',' + detail::exact(f.constant_max_lift.alpha) + ',' +
               detail::exact(f.constant_max_lift.summary.mean_lift) + ',' + detail::exact(f.oracle.mean_lift) + '\n';
  }

  nlohmann::json sel;
  sel["strategy"] = std::string(detail::mode_name(cfg.selection_strategy));
  sel["selection_split"] = "valid";
  sel["report_split"] = "test";
  sel["users"] = test.users.size();
  sel["constant"] = {
      {"min_mean_pp", {{"alpha", min_pp.alpha}, {"valid", min_pp_valid}, {"test", detail::summary_json(min_pp.summary)}}},
      {"max_mean_lift", {{"alpha", max_lift.alpha}, {"valid", max_lift_valid}, {"test", detail::summary_json(max_lift.summary)}}}};
  sel["oracle"] = {{"test", detail::summary_json(oracle_summary)},
                   {"valid", detail::summary_json(summarize(valid, members, oracle_valid.indices()))}};
  sel["heuristic"] = {{"mean_k", heur.mean_k},
                      {"repetitions_count", heur.repetitions.size()},
                      {"fit_fraction", cfg.heuristic_fit_fraction},
                      {"held_out",
                       {{"heuristic", detail::summary_json(heur.heuristic)},
                        {"constant_min_pp", detail::summary_json(heur.constant_min_pp)},
                        {"constant_max_lift", detail::summary_json(heur.constant_max_lift)},
                        {"oracle", detail::summary_json(heur.oracle)}}},
                      {"repetitions", reps}};

  // Per-user test perplexities under each method.
  std::string fig5 = "method,repetition,user_id,alpha,pp,lift\n";
  auto emit = [&](std::string_view method, const std::string& rep, std::size_t u, std::size_t idx) {
    const auto& c = test.users[u];
    fig5 += std::string(method) + ',' + rep + ',' + detail::csv_field(c.user_id) + ',' +
            detail::num(test.alphas[idx]) + ',' + detail::exact(c.pp[idx]) + ',' + detail::exact(c.lift_at(idx)) + '\n';
  };
  for (std::size_t u = 0; u < test.users.size(); ++u) {
    const auto& c = test.users[u];
    fig5 += "global,," + detail::csv_field(c.user_id) + ",0," + detail::exact(c.baseline_pp) + ",0\n";
  }
  for (std::size_t u = 0; u < test.users.size(); ++u) emit("constant_min_pp", "", u, min_pp.index);
  for (std::size_t u = 0; u < test.users.size(); ++u) emit("constant_max_lift", "", u, max_lift.index);
  for (std::size_t u = 0; u < test.users.size(); ++u) emit("oracle", "", u, oracle.entries[u].index);
  std::map<std::string, std::size_t> pos;
  for (std::size_t u = 0; u < test.users.size(); ++u) pos[test.users[u].user_id] = u;
  for (std::size_t r = 0; r < heur.repetitions.size(); ++r) {
    const auto& f = heur.repetitions[r];
    for (std::size_t j = 0; j < f.eval_users.size(); ++j)
      emit("heuristic", std::to_string(r + 1), pos.at(f.eval_users[j]),
           nearest_grid_index(test.alphas, f.eval_alphas[j]));
  }

  // Oracle alpha histogram on the test split.
  const double w = cfg.oracle_bin_width;
  const double top = test.alphas.back();
  const std::size_t bins = detail::bins_to_cover(top > 0.0 ? top : w, w);
  std::vector<std::size_t> counts(bins, 0);
  for (const auto& e : oracle.entries) ++counts[detail::bin_of(e.alpha, w, bins)];
  std::string fig8 = "bin_lo,bin_hi,users\n";
  for (std::size_t b = 0; b < bins; ++b)
    fig8 += detail::num(static_cast<double>(b) * w) + ',' + detail::num(static_cast<double>(b + 1) * w) + ',' +
            std::to_string(counts[b]) + '\n';

  OutputBatch out(cfg.out_dir);
  out.write_text(layout::report("selections.json"), sel.dump(2) + "\n");
  out.write_text(layout::report("heuristic_repetitions.csv"), rep_csv);
  out.write_text(layout::report("fig5_pp_distribution.csv"), fig5);
  out.write_text(layout::report("fig8_oracle_alpha_histogram.csv"), fig8);
  out.commit();
  log << "optimize-alpha: constant " << min_pp.alpha << " (min PP) / " << max_lift.alpha
      << " (max lift), mean k " << heur.mean_k << "; held-out lift heuristic " << heur.heuristic.mean_lift
      << ", oracle " << heur.oracle.mean_lift << "\n";
}

namespace detail {

inline std::string lift_bins_csv(const std::vector<double>& keys, const std::vector<double>& lifts, double w) {
  double top = 0.0;
  for (double k : keys) top = std::max(top, k);
  const std::size_t bins = static_cast<std::size_t>(std::floor(top / w)) + 1;
  std::vector<std::size_t> users(bins, 0), improved(bins, 0);
  std::vector<double> sum(bins, 0.0);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const auto b = bin_of(keys[i], w, bins);
    ++users[b];
    sum[b] += lifts[i];
    if (lifts[i] > 0.0) ++improved[b];
  }
  std::string out = "bin_lo,bin_hi,users,mean_lift,improved\n";
  for (std::size_t b = 0; b < bins; ++b) {
    out += num(static_cast<double>(b) * w) + ',' + num(static_cast<double>(b + 1) * w) + ',' +
           std::to_string(users[b]) + ',' +
           (users[b] ? exact(sum[b] / static_cast<double>(users[b])) : std::string()) + ',' +
           std::to_string(improved[b]) + '\n';
  }
  return out;
}

}  // namespace detail

/// Lift at one alpha, binned by mean comment length and by comment count.
inline void cmd_report(const CommandContext& ctx) {
  const auto& cfg = ctx.config;
  auto& log = *ctx.log;
  double alpha = 0.0;
  if (cfg.report_alpha) {
    alpha = *cfg.report_alpha;
  } else {
    const auto p = cfg.out_dir / layout::report("selections.json");
    detail::require_file(p, "selections (run optimize-alpha first or set report_alpha)");
    try {
      alpha = nlohmann::json::parse(detail::read_text_file(p)).at("constant").at("min_mean_pp").at("alpha").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
  }
  const auto name = detail::mode_name(cfg.selection_strategy);
  const auto cpath = cfg.out_dir / layout::curves("test", name);
  const auto bpath = cfg.out_dir / layout::baselines("test", name);
  detail::require_file(cpath, "evaluation curves (run evaluate first)");
  detail::require_file(bpath, "evaluation baselines (run evaluate first)");
  const auto curves = read_curves(cpath, bpath);
  const auto stats = read_user_stats(cfg);
  std::map<std::string, const UserStatsRow*> by_id;
  for (const auto& s : stats) by_id[s.user_id] = &s;

  const auto idx = nearest_grid_index(curves.alphas, alpha);
  std::vector<double> lengths, counts, lifts;
  for (const auto& c : curves.users) {
    auto it = by_id.find(c.user_id);
    if (it == by_id.end()) throw FormatError("no statistics for user " + c.user_id);
    lengths.push_back(it->second->mean_comment_length.value_or(0.0));
    counts.push_back(static_cast<double>(it->second->comment_count));
    lifts.push_back(c.lift_at(idx));
  }
  OutputBatch out(cfg.out_dir);
  out.write_text(layout::report("fig6_lift_by_length.csv"), detail::lift_bins_csv(lengths, lifts, cfg.length_bin_width));
  out.write_text(layout::report("fig7_lift_by_count.csv"), detail::lift_bins_csv(counts, lifts, cfg.count_bin_width));
  out.commit();
  log << "report: " << curves.users.size() << " users at alpha " << curves.alphas[idx] << "\n";
}

inline const std::vector<std::string>& figure_files() {
  static const std::vector<std::string> files = {
      "fig1_oov_histogram.csv",  "fig2_oov_histogram.csv",    "fig3_pp_vs_alpha.csv",
      "fig4_alpha_lift.csv",     "fig5_pp_distribution.csv",  "fig6_lift_by_length.csv",
      "fig7_lift_by_count.csv",  "fig8_oracle_alpha_histogram.csv"};
  return files;
}

}  // namespace perslm
