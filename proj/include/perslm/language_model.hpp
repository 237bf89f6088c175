#pragma once

// A global background model that is either an LSTM or an n-gram model. Both
// backends score through the same interface, so evaluation code is written
// once against SequenceScorer.

#include <concepts>
#include <filesystem>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "perslm/detail/files.hpp"
#include "perslm/error.hpp"
#include "perslm/neural.hpp"
#include "perslm/ngram.hpp"
#include "perslm/vocab.hpp"

namespace perslm {

template <class M>
concept SequenceScorer = requires(const M& m, const EncodedSequence& s, std::span<const TokenId> prefix) {
  { m.sequence_probs(s) } -> std::convertible_to<std::vector<double>>;
  { m.next_distribution(prefix) } -> std::convertible_to<std::vector<double>>;
  { m.scorable_size() } -> std::convertible_to<std::size_t>;
};

static_assert(SequenceScorer<NGramModel>);
static_assert(SequenceScorer<NeuralLM>);

enum class Backend { Lstm, NGram };

class LanguageModel {
 public:
  LanguageModel(NGramModel m) : model_(std::move(m)) {}
  LanguageModel(NeuralLM m) : model_(std::move(m)) {}

  Backend backend() const {
    return std::holds_alternative<NeuralLM>(model_) ? Backend::Lstm : Backend::NGram;
  }

  std::vector<double> sequence_probs(const EncodedSequence& s) const {
    return std::visit([&](const auto& m) { return m.sequence_probs(s); }, model_);
  }
  std::vector<double> next_distribution(std::span<const TokenId> prefix) const {
    return std::visit([&](const auto& m) { return m.next_distribution(prefix); }, model_);
  }
  std::size_t scorable_size() const {
    return std::visit([](const auto& m) { return m.scorable_size(); }, model_);
  }

  std::vector<std::byte> serialize() const {
    return std::visit([](const auto& m) { return m.serialize(); }, model_);
  }
  void save(const std::filesystem::path& path) const { detail::write_binary_file(path, serialize()); }

  /// Picks the backend from the file magic.
  static LanguageModel deserialize(std::span<const std::byte> bytes, const Vocabulary& vocab) {
    auto starts_with = [&](std::string_view magic) {
      if (bytes.size() < magic.size()) return false;
      for (std::size_t i = 0; i < magic.size(); ++i)
        if (static_cast<char>(bytes[i]) != magic[i]) return false;
      return true;
    };
    if (starts_with(NeuralLM::kMagic)) return LanguageModel(NeuralLM::deserialize(bytes, vocab));
    if (starts_with(NGramModel::kMagic)) return LanguageModel(NGramModel::deserialize(bytes, vocab));
    throw FormatError("unrecognized model file");
  }
  static LanguageModel load(const std::filesystem::path& path, const Vocabulary& vocab) {
    return deserialize(detail::read_binary_file(path), vocab);
  }

  const std::variant<NeuralLM, NGramModel>& variant() const { return model_; }

 private:
  std::variant<NeuralLM, NGramModel> model_;
};

static_assert(SequenceScorer<LanguageModel>);

}  // namespace perslm
