#pragma once

// Reference back-off probability computed straight from the training
// sequences on every call: no count tables, no caching. Used only to check the
// table-backed model.

#include <algorithm>
#include <set>
#include <span>
#include <vector>

#include "perslm/vocab.hpp"

namespace perslm::testing {

class NaiveNGram {
 public:
  NaiveNGram(std::vector<EncodedSequence> padded, std::size_t order, std::vector<double> discounts,
             std::size_t scorable, TokenId bos)
      : corpus_(std::move(padded)), n_(order), d_(std::move(discounts)), scorable_(scorable), bos_(bos) {}

  double prob(std::vector<TokenId> context, TokenId w) const {
    while (context.size() < n_ - 1) context.insert(context.begin(), bos_);
    context.erase(context.begin(), context.end() - static_cast<std::ptrdiff_t>(n_ - 1));
    return recurse(context, w);
  }

 private:
  // Every n-token window of every sequence, each re-padded to n-1 BOS.
  std::vector<std::vector<TokenId>> windows() const {
    std::vector<std::vector<TokenId>> out;
    for (const auto& s : corpus_) {
      std::vector<TokenId> body;
      for (TokenId id : s.ids)
        if (id != bos_) body.push_back(id);
      std::vector<TokenId> ext(n_ - 1, bos_);
      ext.insert(ext.end(), body.begin(), body.end());
      for (std::size_t t = 0; t + n_ <= ext.size(); ++t) out.emplace_back(ext.begin() + t, ext.begin() + t + n_);
    }
    return out;
  }

  static bool ends_with(const std::vector<TokenId>& win, const std::vector<TokenId>& g) {
    return std::equal(g.rbegin(), g.rend(), win.rbegin());
  }

  // Raw occurrence count at the top order; below it, the number of distinct
  // ids seen immediately to the left of g.
  double count(const std::vector<TokenId>& g) const {
    const auto ws = windows();
    if (g.size() == n_) return static_cast<double>(std::count(ws.begin(), ws.end(), g));
    std::set<TokenId> left;
    for (const auto& win : ws)
      if (ends_with(win, g)) left.insert(win[n_ - g.size() - 1]);
    return static_cast<double>(left.size());
  }

  // P over the order |h|+1 given history h.
  double recurse(const std::vector<TokenId>& h, TokenId w) const {
    const double uniform = 1.0 / static_cast<double>(scorable_);
    const std::size_t k = h.size() + 1;
    const double lower =
        h.empty() ? uniform : recurse(std::vector<TokenId>(h.begin() + 1, h.end()), w);
    const double d = d_[k - 1];
    double total = 0.0, removed = 0.0;
    for (std::size_t v = 0; v < scorable_; ++v) {
      auto g = h;
      g.push_back(static_cast<TokenId>(v));
      const double c = count(g);
      total += c;
      removed += std::min(c, d);
    }
    if (total == 0.0) return lower;
    auto g = h;
    g.push_back(w);
    return std::max(count(g) - d, 0.0) / total + removed / total * lower;
  }

  std::vector<EncodedSequence> corpus_;
  std::size_t n_;
  std::vector<double> d_;
  std::size_t scorable_;
  TokenId bos_;
};

}  // namespace perslm::testing
