#pragma once

// Shared global vocabulary, sequence encoding and OOV rates.
//
// Id layout for a vocabulary with V real tokens:
//   0 .. V-1   real tokens, most frequent first
//   V          OOV
//   V+1        EOS   (scored)
//   V+2        BOS   (context only, never predicted)
// The scorable symbols are therefore exactly the ids [0, V+2).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "perslm/corpus.hpp"
#include "perslm/detail/files.hpp"
#include "perslm/detail/hash.hpp"
#include "perslm/error.hpp"

namespace perslm {

using TokenId = std::uint32_t;

inline constexpr std::string_view kOovSurface = "<unk>";
inline constexpr std::string_view kEosSurface = "</s>";
inline constexpr std::string_view kBosSurface = "<s>";

inline bool is_special_surface(std::string_view s) {
  return s == kOovSurface || s == kEosSurface || s == kBosSurface;
}

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Tokens in id order. They must be unique, non-empty, free of whitespace
  /// and distinct from the special surface forms.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const auto& t = tokens_[i];
      if (t.empty()) throw InvalidArgument("empty vocabulary token");
      if (t.find_first_of(" \t\n\r\v\f") != std::string::npos)
        throw InvalidArgument("vocabulary token contains whitespace: " + t);
      if (is_special_surface(t)) throw InvalidArgument("vocabulary token collides with special: " + t);
      if (!index_.emplace(t, static_cast<TokenId>(i)).second)
        throw InvalidArgument("duplicate vocabulary token: " + t);
    }
  }

  /// V: number of real tokens.
  std::size_t size() const { return tokens_.size(); }
  TokenId oov() const { return static_cast<TokenId>(tokens_.size()); }
  TokenId eos() const { return static_cast<TokenId>(tokens_.size() + 1); }
  TokenId bos() const { return static_cast<TokenId>(tokens_.size() + 2); }
  /// V + 2: real tokens plus OOV and EOS.
  std::size_t scorable_size() const { return tokens_.size() + 2; }
  /// V + 3: every id, BOS included.
  std::size_t symbol_count() const { return tokens_.size() + 3; }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::string_view surface(TokenId id) const {
    if (id < tokens_.size()) return tokens_[id];
    if (id == oov()) return kOovSurface;
    if (id == eos()) return kEosSurface;
    if (id == bos()) return kBosSurface;
    throw InvalidArgument("token id out of range");
  }

  /// Identity used to tie saved models to the vocabulary they were trained on.
  std::uint64_t fingerprint() const {
    std::uint64_t h = detail::fnv1a("perslm-vocab");
    for (const auto& t : tokens_) {
      h = detail::fnv1a(t, h);
      h = detail::fnv1a("\n", h);
    }
    return detail::splitmix64(h ^ tokens_.size());
  }

  /// Text form: a header line, then one token per line; the k-th token line
  /// (counting from 0) holds id k.
  std::string serialize() const {
    std::string out = header_line(size());
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  static Vocabulary parse(std::string_view text) {
    const auto nl = text.find('\n');
    if (nl == std::string_view::npos) throw FormatError("vocabulary file lacks header");
    const std::string_view header = text.substr(0, nl + 1);
    std::size_t v = 0;
    {
      constexpr std::string_view prefix = "#perslm-vocab v1 V=";
      if (header.substr(0, prefix.size()) != prefix) throw FormatError("bad vocabulary header");
      std::size_t i = prefix.size();
      if (i >= header.size() || header[i] < '0' || header[i] > '9')
        throw FormatError("bad vocabulary header");
      while (i < header.size() && header[i] >= '0' && header[i] <= '9')
        v = v * 10 + static_cast<std::size_t>(header[i++] - '0');
      if (header != header_line(v)) throw FormatError("bad vocabulary header");
    }
    std::vector<std::string> tokens;
    tokens.reserve(v);
    std::size_t pos = nl + 1;
    while (pos < text.size()) {
      const auto end = text.find('\n', pos);
      if (end == std::string_view::npos) throw FormatError("vocabulary file not newline-terminated");
      tokens.emplace_back(text.substr(pos, end - pos));
      pos = end + 1;
    }
    if (tokens.size() != v) throw FormatError("vocabulary token count does not match header");
    try {
      return Vocabulary(std::move(tokens));
    } catch (const InvalidArgument& e) {
      throw FormatError(e.what());
    }
  }

  void save(const std::filesystem::path& path) const { detail::write_text_file(path, serialize()); }
  static Vocabulary load(const std::filesystem::path& path) {
    return parse(detail::read_text_file(path));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  static std::string header_line(std::size_t v) {
    return "#perslm-vocab v1 V=" + std::to_string(v) + " oov=" + std::to_string(v) +
           " eos=" + std::to_string(v + 1) + " bos=" + std::to_string(v + 2) + "\n";
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Mergeable token counts.
class TokenCounter {
 public:
  void add(const TokenSequence& seq) {
    for (const auto& t : seq) {
      if (is_special_surface(t)) continue;  // reserved surface forms
      ++counts_[t];
    }
  }
  void merge(const TokenCounter& other) {
    for (const auto& [t, c] : other.counts_) counts_[t] += c;
  }
  std::size_t distinct() const { return counts_.size(); }

  /// The n most frequent tokens; ties broken lexicographically ascending.
  Vocabulary top(std::size_t n) const {
    if (n < 1) throw InvalidArgument("vocabulary size must be at least 1");
    if (counts_.empty()) throw InvalidArgument("cannot build a vocabulary from an empty corpus");
    std::vector<std::pair<const std::string*, std::uint64_t>> items;
    items.reserve(counts_.size());
    for (const auto& [t, c] : counts_) items.emplace_back(&t, c);
    const std::size_t keep = std::min(n, items.size());
    auto order = [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : *a.first < *b.first;
    };
    std::partial_sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(keep), items.end(), order);
    std::vector<std::string> tokens;
    tokens.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) tokens.push_back(*items[i].first);
    return Vocabulary(std::move(tokens));
  }

 private:
  std::unordered_map<std::string, std::uint64_t> counts_;
};

inline Vocabulary build_vocab(std::span<const TokenSequence> corpus, std::size_t n) {
  TokenCounter counter;
  for (const auto& seq : corpus) counter.add(seq);
  return counter.top(n);
}

struct EncodedSequence {
  std::vector<TokenId> ids;
  std::vector<bool> oov_mask;  // true where the surface token was out of vocabulary

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const EncodedSequence&, const EncodedSequence&) = default;
};

inline EncodedSequence encode(const Vocabulary& v, const TokenSequence& ts) {
  EncodedSequence out;
  out.ids.reserve(ts.size());
  out.oov_mask.reserve(ts.size());
  for (const auto& t : ts) {
    const auto id = v.find(t);
    out.ids.push_back(id ? *id : v.oov());
    out.oov_mask.push_back(!id);
  }
  return out;
}

inline std::vector<EncodedSequence> encode_all(const Vocabulary& v,
                                               std::span<const TokenSequence> seqs) {
  std::vector<EncodedSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(encode(v, s));
  return out;
}

inline TokenSequence decode(const Vocabulary& v, std::span<const TokenId> ids) {
  TokenSequence out;
  out.reserve(ids.size());
  for (TokenId id : ids) out.emplace_back(v.surface(id));
  return out;
}

/// Model-ready form: one leading BOS and a trailing EOS. Models that need
/// longer histories treat positions before the start as BOS.
inline EncodedSequence pad(const Vocabulary& v, const EncodedSequence& seq) {
  EncodedSequence out;
  out.ids.reserve(seq.size() + 2);
  out.oov_mask.reserve(seq.size() + 2);
  out.ids.push_back(v.bos());
  out.oov_mask.push_back(false);
  out.ids.insert(out.ids.end(), seq.ids.begin(), seq.ids.end());
  out.oov_mask.insert(out.oov_mask.end(), seq.oov_mask.begin(), seq.oov_mask.end());
  out.ids.push_back(v.eos());
  out.oov_mask.push_back(false);
  return out;
}

inline std::vector<EncodedSequence> encode_padded(const Vocabulary& v,
                                                  std::span<const TokenSequence> seqs) {
  std::vector<EncodedSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(pad(v, encode(v, s)));
  return out;
}

/// Fraction of surface tokens that fall outside the vocabulary. Literal
/// special forms are left out of both counts.
inline double oov_rate(const Vocabulary& v, std::span<const TokenSequence> corpus) {
  std::size_t total = 0;
  std::size_t oov = 0;
  for (const auto& seq : corpus) {
    for (const auto& t : seq) {
      if (is_special_surface(t)) continue;
      ++total;
      if (!v.find(t)) ++oov;
    }
  }
  if (total == 0) throw InvalidArgument("OOV rate of a corpus with no tokens");
  return static_cast<double>(oov) / static_cast<double>(total);
}

}  // namespace perslm
