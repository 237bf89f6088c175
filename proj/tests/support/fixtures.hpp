#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "perslm/perslm.hpp"

namespace perslm::testing {

/// Random corpus over "t0".."t{types-1}" with lengths 1..max_len.
inline std::vector<TokenSequence> random_corpus(std::size_t sequences, std::size_t types, std::size_t max_len,
                                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(0, types - 1), len(1, max_len);
  std::vector<TokenSequence> out;
  for (std::size_t s = 0; s < sequences; ++s) {
    TokenSequence seq;
    for (std::size_t i = len(rng); i > 0; --i) seq.push_back("t" + std::to_string(tok(rng)));
    out.push_back(std::move(seq));
  }
  return out;
}

/// Corpus of about `tokens` tokens (EOS included) over `types` types.
inline std::vector<TokenSequence> corpus_of_tokens(std::size_t tokens, std::size_t types, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(0, types - 1), len(3, 9);
  std::vector<TokenSequence> out;
  std::size_t total = 0;
  while (total < tokens) {
    TokenSequence seq;
    const std::size_t l = std::min(len(rng), std::max<std::size_t>(tokens - total, 2) - 1);
    for (std::size_t i = 0; i < l; ++i) seq.push_back("t" + std::to_string(tok(rng)));
    total += seq.size() + 1;
    out.push_back(std::move(seq));
  }
  return out;
}

/// Same probability 1/size for every scorable symbol.
struct UniformScorer {
  std::size_t size;
  TokenId bos;

  std::vector<double> sequence_probs(const EncodedSequence& s) const {
    std::vector<double> out;
    for (TokenId id : s.ids)
      if (id != bos) out.push_back(1.0 / static_cast<double>(size));
    return out;
  }
  std::vector<double> next_distribution(std::span<const TokenId>) const {
    return std::vector<double>(size, 1.0 / static_cast<double>(size));
  }
  std::size_t scorable_size() const { return size; }
};

inline NeuralConfig tiny_neural(std::uint64_t seed = 3) {
  NeuralConfig c;
  c.embedding_dim = 4;
  c.hidden_dims = {5, 3};
  c.projection_dim = 3;
  c.seed = seed;
  return c;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("perslm_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace perslm::testing
