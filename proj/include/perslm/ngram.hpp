#pragma once

// Back-off n-gram model with per-order absolute discounts and Kneser-Ney
// continuation counts below the top order.
//
// For order k with context h (k-1 ids) and discount D_k:
//
//   P_k(w | h) = max(c_k(h,w) - D_k, 0) / c_k(h) + gamma(h) * P_{k-1}(w | h')
//   gamma(h)   = sum_w' min(c_k(h,w'), D_k) / c_k(h)
//
// where c_n are raw counts, c_k (k < n) count distinct left extensions, h' is
// h without its first id, and P_0 is uniform over the V+2 scorable symbols.
// gamma is exactly the mass the discount removed, so every P_k(. | h) sums to
// one even when D_k > 1 zeroes out singletons. Unseen contexts back off with
// weight one.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "perslm/detail/binary_io.hpp"
#include "perslm/detail/files.hpp"
#include "perslm/error.hpp"
#include "perslm/vocab.hpp"

namespace perslm {

inline constexpr std::size_t kMaxNGramOrder = 8;

struct NGramConfig {
  std::size_t order = 3;
  std::vector<double> discounts{0.5, 1.0, 1.5};  // D_1 .. D_n

  void validate() const {
    if (order < 1 || order > kMaxNGramOrder)
      throw InvalidArgument("n-gram order must be in [1, " + std::to_string(kMaxNGramOrder) + "]");
    if (discounts.size() != order) throw InvalidArgument("need exactly one discount per order");
    for (double d : discounts)
      if (!(d >= 0.0) || !std::isfinite(d)) throw InvalidArgument("discounts must be finite and >= 0");
  }
};

/// Fixed-capacity id tuple used as a hash key.
struct NGramKey {
  std::array<TokenId, kMaxNGramOrder> ids{};
  std::uint32_t length = 0;

  NGramKey() = default;
  explicit NGramKey(std::span<const TokenId> s) : length(static_cast<std::uint32_t>(s.size())) {
    std::copy(s.begin(), s.end(), ids.begin());
  }
  std::span<const TokenId> view() const { return {ids.data(), length}; }

  friend bool operator==(const NGramKey& a, const NGramKey& b) {
    return a.length == b.length && std::equal(a.ids.begin(), a.ids.begin() + a.length, b.ids.begin());
  }
  friend bool operator<(const NGramKey& a, const NGramKey& b) {
    return std::lexicographical_compare(a.ids.begin(), a.ids.begin() + a.length, b.ids.begin(),
                                        b.ids.begin() + b.length);
  }
};

struct NGramKeyHash {
  std::size_t operator()(const NGramKey& k) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ k.length;
    for (std::uint32_t i = 0; i < k.length; ++i) {
      h ^= k.ids[i];
      h *= 0x100000001b3ULL;
      h ^= h >> 29;
    }
    return static_cast<std::size_t>(h);
  }
};

/// Aggregates of one context's row, kept in integers so that the back-off
/// weight is reproduced bit-for-bit whatever order the row was built in.
struct ContextStats {
  std::uint64_t total = 0;      // c(h)
  std::uint64_t small_sum = 0;  // sum of counts below D
  std::uint64_t at_least_d = 0; // number of entries with count >= D

  double removed_mass(double d) const {
    return static_cast<double>(small_sum) + d * static_cast<double>(at_least_d);
  }
};

/// Count tables for orders 1..n.
struct CountTables {
  using Table = std::unordered_map<NGramKey, std::uint64_t, NGramKeyHash>;
  using ContextTable = std::unordered_map<NGramKey, ContextStats, NGramKeyHash>;

  std::vector<Table> ngrams;          // [k-1]: k-gram -> count
  std::vector<ContextTable> contexts; // [k-1]: (k-1)-gram context -> row stats

  std::size_t order() const { return ngrams.size(); }

  void rebuild_contexts(std::span<const double> discounts) {
    contexts.assign(ngrams.size(), {});
    for (std::size_t k = 0; k < ngrams.size(); ++k) {
      const double d = discounts[k];
      for (const auto& [key, c] : ngrams[k]) {
        NGramKey h(key.view().first(key.length - 1));
        auto& s = contexts[k][h];
        s.total += c;
        if (static_cast<double>(c) < d) s.small_sum += c;
        else ++s.at_least_d;
      }
    }
  }
};

class NGramModel {
 public:
  static constexpr std::string_view kMagic{"PLMNGRM\0", 8};
  static constexpr std::uint32_t kFormatVersion = 1;

  NGramModel() = default;

  const NGramConfig& config() const { return config_; }
  std::size_t order() const { return config_.order; }
  std::size_t scorable_size() const { return scorable_; }
  TokenId bos() const { return bos_; }
  std::uint64_t vocab_fingerprint() const { return fingerprint_; }
  const CountTables& tables() const { return tables_; }

  /// P(w | context) using the last n-1 ids of the context; shorter contexts are
  /// left-filled with BOS.
  double prob(std::span<const TokenId> context, TokenId w) const {
    return prob_at_order(config_.order, context, w);
  }

  /// The order-k distribution P_k of this model (k in [0, n]).
  double prob_at_order(std::size_t k, std::span<const TokenId> context, TokenId w) const {
    if (w >= scorable_) throw InvalidArgument("predicted id is not a scorable symbol");
    if (k > config_.order) throw InvalidArgument("order above model order");
    std::array<TokenId, kMaxNGramOrder> gram{};
    const std::size_t n = config_.order;
    // gram[0 .. n-2] = history (BOS-filled), gram[n-1] = w
    const std::size_t take = std::min(context.size(), n - 1);
    std::fill(gram.begin(), gram.begin() + static_cast<std::ptrdiff_t>(n - 1 - take), bos_);
    std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
              gram.begin() + static_cast<std::ptrdiff_t>(n - 1 - take));
    gram[n - 1] = w;

    double p = 1.0 / static_cast<double>(scorable_);
    for (std::size_t order = 1; order <= k; ++order) {
      const std::span<const TokenId> kgram(gram.data() + n - order, order);
      const auto ctx = tables_.contexts[order - 1].find(NGramKey(kgram.first(order - 1)));
      if (ctx == tables_.contexts[order - 1].end()) continue;  // full back-off
      const auto& row = ctx->second;
      const double d = config_.discounts[order - 1];
      const double total = static_cast<double>(row.total);
      double count = 0.0;
      if (auto it = tables_.ngrams[order - 1].find(NGramKey(kgram));
          it != tables_.ngrams[order - 1].end())
        count = static_cast<double>(it->second);
      p = std::max(count - d, 0.0) / total + row.removed_mass(d) / total * p;
    }
    return p;
  }

  /// Distribution over all scorable symbols after BOS + prefix.
  std::vector<double> next_distribution(std::span<const TokenId> prefix) const {
    std::vector<TokenId> ctx;
    ctx.reserve(prefix.size() + 1);
    ctx.push_back(bos_);
    ctx.insert(ctx.end(), prefix.begin(), prefix.end());
    std::vector<double> out(scorable_);
    for (std::size_t w = 0; w < scorable_; ++w) out[w] = prob(ctx, static_cast<TokenId>(w));
    return out;
  }

  /// Probability of every non-BOS position of a padded sequence, in order.
  std::vector<double> sequence_probs(const EncodedSequence& padded) const {
    check_padded(padded);
    std::vector<double> out;
    out.reserve(padded.size());
    const auto& ids = padded.ids;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] == bos_) continue;
      const std::size_t from = t >= config_.order - 1 ? t - (config_.order - 1) : 0;
      out.push_back(prob(std::span(ids).subspan(from, t - from), ids[t]));
    }
    return out;
  }

  /// Natural-log probability of every non-BOS position.
  std::vector<double> sequence_logprob(const EncodedSequence& padded) const {
    auto p = sequence_probs(padded);
    for (auto& x : p) x = std::log(x);
    return p;
  }

  /// Copy with the top-order table removed; its prob() equals this model's
  /// order n-1 distribution.
  NGramModel without_top_order() const {
    NGramModel m = *this;
    m.tables_.ngrams.back().clear();
    m.tables_.contexts.back().clear();
    return m;
  }

  // -- serialization -------------------------------------------------------

  std::vector<std::byte> serialize() const {
    detail::BinaryWriter w;
    w.bytes(kMagic);
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(config_.order));
    for (double d : config_.discounts) w.f64(d);
    w.u64(fingerprint_);
    w.u64(scorable_);
    for (const auto& table : tables_.ngrams) {
      std::vector<std::pair<NGramKey, std::uint64_t>> rows(table.begin(), table.end());
      std::sort(rows.begin(), rows.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
      w.u64(rows.size());
      for (const auto& [key, c] : rows) {
        for (TokenId id : key.view()) w.u32(id);
        w.u64(c);
      }
    }
    return w.take();
  }

  /// Throws FormatError on truncation, version mismatch or a model trained
  /// against a different vocabulary.
  static NGramModel deserialize(std::span<const std::byte> bytes, const Vocabulary& vocab) {
    detail::BinaryReader r(bytes);
    r.expect_bytes(kMagic, "n-gram model");
    if (r.u32() != kFormatVersion) throw FormatError("unsupported n-gram model version");
    NGramModel m;
    m.config_.order = r.u32();
    if (m.config_.order < 1 || m.config_.order > kMaxNGramOrder)
      throw FormatError("n-gram order out of range");
    m.config_.discounts.resize(m.config_.order);
    for (auto& d : m.config_.discounts) d = r.f64();
    try {
      m.config_.validate();
    } catch (const InvalidArgument& e) {
      throw FormatError(e.what());
    }
    m.fingerprint_ = r.u64();
    m.scorable_ = r.u64();
    if (m.fingerprint_ != vocab.fingerprint() || m.scorable_ != vocab.scorable_size())
      throw FormatError("n-gram model was trained with a different vocabulary");
    m.bos_ = vocab.bos();
    m.tables_.ngrams.resize(m.config_.order);
    for (std::size_t k = 1; k <= m.config_.order; ++k) {
      const std::uint64_t rows = r.u64();
      if (rows > r.remaining() / (4 * k + 8)) throw FormatError("truncated model file");
      auto& table = m.tables_.ngrams[k - 1];
      table.reserve(rows);
      for (std::uint64_t i = 0; i < rows; ++i) {
        NGramKey key;
        key.length = static_cast<std::uint32_t>(k);
        for (std::size_t j = 0; j < k; ++j) {
          key.ids[j] = r.u32();
          if (key.ids[j] > m.bos_ || (j + 1 == k && key.ids[j] == m.bos_))
            throw FormatError("n-gram id out of range");
        }
        const std::uint64_t c = r.u64();
        if (c == 0) throw FormatError("zero count stored");
        if (!table.emplace(key, c).second) throw FormatError("duplicate n-gram");
      }
    }
    r.expect_end();
    m.tables_.rebuild_contexts(m.config_.discounts);
    return m;
  }

  void save(const std::filesystem::path& path) const { detail::write_binary_file(path, serialize()); }
  static NGramModel load(const std::filesystem::path& path, const Vocabulary& vocab) {
    return deserialize(detail::read_binary_file(path), vocab);
  }

 private:
  friend NGramModel train_ngram(std::span<const EncodedSequence>, const NGramConfig&,
                                const Vocabulary&);

  void check_padded(const EncodedSequence& s) const {
    if (s.ids.empty() || s.ids.front() != bos_)
      throw InvalidArgument("sequence must start with BOS");
  }

  NGramConfig config_;
  std::uint64_t fingerprint_ = 0;
  std::size_t scorable_ = 0;
  TokenId bos_ = 0;
  CountTables tables_;
};

/// Trains on padded sequences (leading BOS, trailing EOS). BOS may appear only
/// as a leading run.
inline NGramModel train_ngram(std::span<const EncodedSequence> corpus, const NGramConfig& cfg,
                              const Vocabulary& vocab) {
  cfg.validate();
  if (corpus.empty()) throw InvalidArgument("cannot train an n-gram model on an empty corpus");
  NGramModel m;
  m.config_ = cfg;
  m.fingerprint_ = vocab.fingerprint();
  m.scorable_ = vocab.scorable_size();
  m.bos_ = vocab.bos();
  const std::size_t n = cfg.order;
  m.tables_.ngrams.assign(n, {});

  std::vector<TokenId> ext;
  for (const auto& seq : corpus) {
    m.check_padded(seq);
    std::size_t first = 0;
    while (first < seq.ids.size() && seq.ids[first] == m.bos_) ++first;
    ext.assign(n - 1, m.bos_);
    for (std::size_t i = first; i < seq.ids.size(); ++i) {
      const TokenId id = seq.ids[i];
      if (id == m.bos_) throw InvalidArgument("BOS inside a sequence");
      if (id >= m.scorable_) throw InvalidArgument("token id out of vocabulary range");
      ext.push_back(id);
    }
    for (std::size_t t = n - 1; t < ext.size(); ++t)
      ++m.tables_.ngrams[n - 1][NGramKey(std::span(ext).subspan(t + 1 - n, n))];
  }
  // Lower orders: number of distinct one-word left extensions.
  for (std::size_t k = n - 1; k >= 1; --k) {
    auto& lower = m.tables_.ngrams[k - 1];
    for (const auto& [key, c] : m.tables_.ngrams[k]) ++lower[NGramKey(key.view().subspan(1))];
  }
  m.tables_.rebuild_contexts(cfg.discounts);
  return m;
}

}  // namespace perslm
