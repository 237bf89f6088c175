#pragma once

// Comment ingestion, tokenization and the per-user / global time splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "perslm/detail/hash.hpp"
#include "perslm/detail/utf8.hpp"
#include "perslm/error.hpp"

namespace perslm {

struct Comment {
  std::string user_id;
  std::int64_t timestamp = 0;  // seconds since epoch
  std::string text;

  friend bool operator==(const Comment&, const Comment&) = default;
};

/// Surface tokens of one comment. Tokens are non-empty and hold no whitespace.
using TokenSequence = std::vector<std::string>;

/// Lowercases, then splits on Unicode whitespace. Punctuation stays attached
/// to its word ("fivnin." is one token).
inline TokenSequence tokenize(std::string_view text) {
  TokenSequence out;
  std::string current;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto cp = detail::decode_utf8(text, pos);
    if (cp.valid && detail::is_unicode_space(cp.value)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else if (cp.valid) {
      detail::append_utf8(current, detail::to_lower(cp.value));
    } else {
      current.append(text.substr(pos, cp.length));  // invalid byte kept verbatim
    }
    pos += cp.length;
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

// ---------------------------------------------------------------------------
// JSONL ingestion

struct CommentLoad {
  std::vector<Comment> comments;
  std::size_t skipped = 0;
};

namespace detail {

inline std::optional<Comment> parse_comment_line(std::string_view line) {
  auto doc = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (!doc.is_object()) return std::nullopt;

  Comment c;
  const nlohmann::json* user = nullptr;
  if (auto it = doc.find("user_id"); it != doc.end()) user = &*it;
  else if (auto it2 = doc.find("author"); it2 != doc.end()) user = &*it2;
  if (user == nullptr || !user->is_string()) return std::nullopt;
  c.user_id = user->get<std::string>();
  if (c.user_id.empty()) return std::nullopt;

  auto ts = doc.find("created_utc");
  if (ts == doc.end()) return std::nullopt;
  if (ts->is_number_integer()) {
    c.timestamp = ts->get<std::int64_t>();
  } else if (ts->is_number_float()) {
    const double v = ts->get<double>();
    if (!std::isfinite(v)) return std::nullopt;
    c.timestamp = static_cast<std::int64_t>(std::floor(v));
  } else if (ts->is_string()) {
    // pushshift dumps store created_utc as a string in some years
    const auto& s = ts->get_ref<const std::string&>();
    std::size_t used = 0;
    try {
      c.timestamp = std::stoll(s, &used);
    } catch (const std::exception&) {
      return std::nullopt;
    }
    if (used != s.size()) return std::nullopt;
  } else {
    return std::nullopt;
  }

  auto body = doc.find("body");
  if (body == doc.end() || !body->is_string()) return std::nullopt;
  c.text = body->get<std::string>();
  return c;
}

}  // namespace detail

/// Streams comments from a JSONL file in file order. Blank lines are ignored;
/// malformed lines are counted, reported to `warnings` and skipped. Returns the
/// skip count.
inline std::size_t for_each_comment(const std::filesystem::path& path,
                                    const std::function<void(Comment&&)>& sink,
                                    std::ostream* warnings = &std::cerr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::string line;
  std::size_t skipped = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto c = detail::parse_comment_line(line);
    if (!c) {
      ++skipped;
      if (warnings != nullptr && skipped <= 10)
        *warnings << "warning: " << path.string() << ":" << line_no
                  << ": malformed comment skipped\n";
      continue;
    }
    sink(std::move(*c));
  }
  if (in.bad()) throw IoError("read error on " + path.string());
  if (warnings != nullptr && skipped > 10)
    *warnings << "warning: " << path.string() << ": " << skipped
              << " malformed lines skipped in total\n";
  return skipped;
}

inline CommentLoad load_comments(const std::filesystem::path& path,
                                 std::ostream* warnings = &std::cerr) {
  CommentLoad out;
  out.skipped = for_each_comment(
      path, [&](Comment&& c) { out.comments.push_back(std::move(c)); }, warnings);
  return out;
}

/// One JSON object per line with the keys the loader reads back.
inline std::string comment_to_jsonl(const Comment& c) {
  nlohmann::json j;
  j["author"] = c.user_id;
  j["created_utc"] = c.timestamp;
  j["body"] = c.text;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Splits

/// Half-open timestamp interval [begin, end).
struct TimeRange {
  std::int64_t begin = 0;
  std::int64_t end = 0;

  bool contains(std::int64_t t) const { return t >= begin && t < end; }
  bool overlaps(const TimeRange& o) const { return begin < o.end && o.begin < end; }
  friend bool operator==(const TimeRange&, const TimeRange&) = default;
};

inline constexpr std::int64_t kStartOf2016 = 1451606400;
inline constexpr std::int64_t kStartOf2017 = 1483228800;
inline constexpr std::int64_t kStartOf2018 = 1514764800;
inline constexpr std::int64_t kStartOf2019 = 1546300800;

struct SplitSpec {
  TimeRange train{kStartOf2016, kStartOf2017};
  TimeRange valid{kStartOf2017, kStartOf2018};
  TimeRange test{kStartOf2018, kStartOf2019};
  double train_users = 0.7;
  double valid_users = 0.2;
  double test_users = 0.1;

  void validate() const {
    for (const auto* r : {&train, &valid, &test})
      if (r->begin > r->end) throw InvalidArgument("split interval with begin > end");
    if (train.overlaps(valid) || train.overlaps(test) || valid.overlaps(test))
      throw InvalidArgument("split intervals must be pairwise disjoint");
    for (double f : {train_users, valid_users, test_users})
      if (!(f >= 0.0 && f <= 1.0)) throw InvalidArgument("user fractions must lie in [0,1]");
    if (train_users + valid_users + test_users > 1.0 + 1e-9)
      throw InvalidArgument("user fractions sum to more than 1");
  }
};

enum class Partition { Train, Valid, Test, Unassigned };

struct UserCorpus {
  std::string user_id;
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> valid;
  std::vector<TokenSequence> test;
};

struct GlobalSplits {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> valid;
  std::vector<TokenSequence> test;
};

struct SplitResult {
  GlobalSplits global;
  /// Users with at least one comment in every interval, ordered by user id.
  std::vector<UserCorpus> users;
  std::map<std::string, Partition> partition;
};

/// Assigns users to global train/valid/test by ranking them on a seeded hash
/// of their id and cutting the ranking at the cumulative user fractions.
/// Personalization users are those with at least one non-empty comment in each
/// of the three intervals; their comments are split by timestamp.
inline SplitResult split_users(const std::vector<Comment>& comments, const SplitSpec& spec,
                               std::uint64_t seed) {
  spec.validate();

  struct Dated {
    std::int64_t t;
    TokenSequence tokens;
  };
  std::map<std::string, std::vector<Dated>> by_user;
  for (const auto& c : comments) {
    if (c.text.empty()) continue;
    auto tokens = tokenize(c.text);
    if (tokens.empty()) continue;
    by_user[c.user_id].push_back({c.timestamp, std::move(tokens)});
  }
  for (auto& [user, items] : by_user)
    std::stable_sort(items.begin(), items.end(),
                     [](const Dated& a, const Dated& b) { return a.t < b.t; });

  SplitResult out;

  std::vector<std::pair<std::uint64_t, const std::string*>> ranked;
  ranked.reserve(by_user.size());
  for (const auto& [user, items] : by_user)
    ranked.emplace_back(detail::seeded_hash(seed, user), &user);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : *a.second < *b.second;
  });
  const double n = static_cast<double>(ranked.size());
  auto cut = [&](double frac) {
    return std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(std::llround(n * frac)));
  };
  const std::size_t b1 = cut(spec.train_users);
  const std::size_t b2 = cut(spec.train_users + spec.valid_users);
  const std::size_t b3 = cut(spec.train_users + spec.valid_users + spec.test_users);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    Partition p = i < b1 ? Partition::Train
                : i < b2 ? Partition::Valid
                : i < b3 ? Partition::Test
                         : Partition::Unassigned;
    out.partition.emplace(*ranked[i].second, p);
  }

  for (auto& [user, items] : by_user) {
    const Partition p = out.partition.at(user);
    UserCorpus uc;
    uc.user_id = user;
    for (const auto& d : items) {
      if (spec.train.contains(d.t)) {
        uc.train.push_back(d.tokens);
        if (p == Partition::Train) out.global.train.push_back(d.tokens);
      } else if (spec.valid.contains(d.t)) {
        uc.valid.push_back(d.tokens);
        if (p == Partition::Valid) out.global.valid.push_back(d.tokens);
      } else if (spec.test.contains(d.t)) {
        uc.test.push_back(d.tokens);
        if (p == Partition::Test) out.global.test.push_back(d.tokens);
      }
    }
    if (!uc.train.empty() && !uc.valid.empty() && !uc.test.empty())
      out.users.push_back(std::move(uc));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct UserStats {
  std::size_t comment_count = 0;
  std::optional<double> mean_comment_length;  // empty when there are no comments
};

/// Counts over the training split.
inline UserStats user_stats(const UserCorpus& uc) {
  UserStats s;
  s.comment_count = uc.train.size();
  if (s.comment_count == 0) return s;
  std::size_t tokens = 0;
  for (const auto& seq : uc.train) tokens += seq.size();
  s.mean_comment_length = static_cast<double>(tokens) / static_cast<double>(s.comment_count);
  return s;
}

// ---------------------------------------------------------------------------
// On-disk corpora: one token sequence per line, tokens separated by a space.

inline void write_sequences(const std::filesystem::path& path,
                            const std::vector<TokenSequence>& seqs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& seq : seqs) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out << ' ';
      out << seq[i];
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<TokenSequence> read_sequences(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TokenSequence> out;
  std::string line;
  while (std::getline(in, line)) {
    TokenSequence seq;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) seq.push_back(std::move(tok));
    if (!seq.empty()) out.push_back(std::move(seq));
  }
  return out;
}

/// Filesystem-safe directory name for a user id. Characters outside
/// [A-Za-z0-9_-] (and a leading '.') are percent-escaped, so the mapping is
/// reversible.
inline std::string user_dir_name(std::string_view user_id) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : user_id) {
    const bool plain = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                       (c >= '0' && c <= '9') || c == '_' || c == '-';
    if (plain) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 0xf]);
    }
  }
  return out;
}

inline std::string user_id_from_dir_name(std::string_view name) {
  auto hex = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw FormatError("bad escape in user directory name");
  };
  std::string out;
  for (std::size_t i = 0; i < name.size(); ++i) {
    if (name[i] == '%') {
      if (i + 2 >= name.size()) throw FormatError("bad escape in user directory name");
      out.push_back(static_cast<char>(hex(name[i + 1]) * 16 + hex(name[i + 2])));
      i += 2;
    } else {
      out.push_back(name[i]);
    }
  }
  return out;
}

}  // namespace perslm
