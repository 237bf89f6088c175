#pragma once

// Stacked LSTM language model with a linear projection bottleneck before the
// softmax, trained from scratch with truncated BPTT, dropout and Adam.
//
//   x_0      = E[input]                     (dropout)
//   h_l, c_l = LSTM_l(x_l, h_l, c_l)        gates ordered i, f, g, o
//   x_{l+1}  = h_l                          (dropout between layers)
//   p        = W_p h_L
//   P(. | .) = softmax(W_o p + b_o)         over the V+2 scorable symbols

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "perslm/detail/binary_io.hpp"
#include "perslm/detail/files.hpp"
#include "perslm/error.hpp"
#include "perslm/vocab.hpp"

namespace perslm {

struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct NeuralConfig {
  std::size_t embedding_dim = 300;
  std::vector<std::size_t> hidden_dims{256, 128};
  std::size_t projection_dim = 100;
  double dropout_keep = 0.9;
  AdamConfig adam;
  std::size_t batch_size = 32;  // unroll windows per update
  std::size_t unroll = 32;
  std::size_t epochs = 5;
  double clip_norm = 5.0;       // 0 disables clipping
  bool early_stopping = true;   // keep the epoch with the best validation PP
  std::uint64_t seed = 1;

  /// 16 / {16, 8} / 8: small enough to train on one core in seconds.
  static NeuralConfig desk_scale() {
    NeuralConfig c;
    c.embedding_dim = 16;
    c.hidden_dims = {16, 8};
    c.projection_dim = 8;
    return c;
  }

  void validate() const {
    if (embedding_dim < 1 || projection_dim < 1 || hidden_dims.empty())
      throw InvalidArgument("neural dimensions must be >= 1");
    for (auto h : hidden_dims)
      if (h < 1) throw InvalidArgument("neural dimensions must be >= 1");
    if (!(dropout_keep > 0.0 && dropout_keep <= 1.0))
      throw InvalidArgument("dropout_keep must be in (0, 1]");
    if (batch_size < 1 || unroll < 1) throw InvalidArgument("batch_size and unroll must be >= 1");
    if (!(adam.learning_rate > 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) ||
        !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.epsilon > 0.0))
      throw InvalidArgument("invalid Adam hyperparameters");
    if (!(clip_norm >= 0.0)) throw InvalidArgument("clip_norm must be >= 0");
  }
};

/// All trainable tensors, biases stored as single-column matrices.
struct ParameterSet {
  std::vector<Eigen::MatrixXd> tensors;

  ParameterSet zeros_like() const {
    ParameterSet z;
    z.tensors.reserve(tensors.size());
    for (const auto& t : tensors) z.tensors.push_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
    return z;
  }
  void set_zero() {
    for (auto& t : tensors) t.setZero();
  }
  double squared_norm() const {
    double s = 0.0;
    for (const auto& t : tensors) s += t.squaredNorm();
    return s;
  }
  void scale(double f) {
    for (auto& t : tensors) t *= f;
  }
  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.allFinite()) return false;
    return true;
  }
  std::size_t coefficient_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }
  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      const auto& x = a.tensors[i];
      const auto& y = b.tensors[i];
      if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
      if (std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0)
        return false;
    }
    return true;
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_xent = 0.0;           // mean nats per scored training token
  std::optional<double> valid_pp;    // absent without a validation corpus
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;

  /// "epoch,train_xent,valid_pp" rows. Wall-clock is left out so that reruns
  /// produce identical files.
  std::string to_csv() const {
    std::string out = "epoch,train_xent,valid_pp\n";
    char buf[96];
    for (const auto& e : epochs) {
      if (e.valid_pp)
        std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g\n", e.epoch, e.train_xent, *e.valid_pp);
      else
        std::snprintf(buf, sizeof buf, "%zu,%.10g,\n", e.epoch, e.train_xent);
      out += buf;
    }
    return out;
  }
};

/// Raised when the training loss stops being finite.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, TrainReport report)
      : Error(what), report_(std::move(report)) {}
  const TrainReport& report() const { return report_; }

 private:
  TrainReport report_;
};

class NeuralLM {
 public:
  static constexpr std::string_view kMagic{"PLMLSTM\0", 8};
  static constexpr std::uint32_t kFormatVersion = 1;

  NeuralLM() = default;

  /// Uniform(-s, s) with s = 1/sqrt(fan-in) for every matrix, zero biases and
  /// forget-gate bias 1. Deterministic in cfg.seed.
  static NeuralLM init(const NeuralConfig& cfg, const Vocabulary& vocab) {
    cfg.validate();
    NeuralLM m;
    m.config_ = cfg;
    m.fingerprint_ = vocab.fingerprint();
    m.symbols_ = vocab.symbol_count();
    m.allocate();
    std::mt19937_64 rng(cfg.seed);
    auto fill = [&](Eigen::MatrixXd& t, double fan_in) {
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
      for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = u(rng);
    };
    auto& ts = m.params_.tensors;
    fill(ts[kEmbedding], static_cast<double>(cfg.embedding_dim));
    for (std::size_t l = 0; l < m.layers(); ++l) {
      auto& w = ts[m.weight_index(l)];
      fill(w, static_cast<double>(w.cols()));
      auto& b = ts[m.bias_index(l)];
      const auto h = static_cast<Eigen::Index>(cfg.hidden_dims[l]);
      b.setZero();
      b.middleRows(h, h).setOnes();  // forget gate
    }
    fill(ts[m.projection_index()], static_cast<double>(cfg.hidden_dims.back()));
    fill(ts[m.output_weight_index()], static_cast<double>(cfg.projection_dim));
    ts[m.output_bias_index()].setZero();
    return m;
  }

  const NeuralConfig& config() const { return config_; }
  std::size_t scorable_size() const { return symbols_ - 1; }
  TokenId bos() const { return static_cast<TokenId>(symbols_ - 1); }
  std::uint64_t vocab_fingerprint() const { return fingerprint_; }
  std::size_t layers() const { return config_.hidden_dims.size(); }

  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  Eigen::MatrixXd& output_weights() { return params_.tensors[output_weight_index()]; }
  Eigen::MatrixXd& output_bias() { return params_.tensors[output_bias_index()]; }

  /// Distribution over the V+2 scorable symbols after consuming BOS and then
  /// the prefix. Dropout is never applied here.
  std::vector<double> next_distribution(std::span<const TokenId> prefix) const {
    State st = zero_state();
    Step step;
    forward(bos(), st, step, nullptr);
    for (TokenId id : prefix) {
      check_input(id);
      forward(id, st, step, nullptr);
    }
    return {step.probs.data(), step.probs.data() + step.probs.size()};
  }

  /// Probability of every non-BOS position of a padded sequence.
  std::vector<double> sequence_probs(const EncodedSequence& padded) const {
    check_padded(padded);
    std::vector<double> out;
    out.reserve(padded.size());
    State st = zero_state();
    Step step;
    const auto& ids = padded.ids;
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      check_input(ids[t]);
      forward(ids[t], st, step, nullptr);
      const TokenId target = ids[t + 1];
      if (target == bos()) continue;
      out.push_back(step.probs[target]);
    }
    return out;
  }

  std::vector<double> sequence_logprob(const EncodedSequence& padded) const {
    auto p = sequence_probs(padded);
    for (auto& x : p) x = std::log(x);
    return p;
  }

  /// Summed negative log-likelihood of a padded sequence without dropout or
  /// truncation. Gradients are accumulated into grad when it is non-null.
  double loss_and_gradient(const EncodedSequence& padded, ParameterSet* grad) const {
    check_padded(padded);
    if (padded.size() < 2) return 0.0;
    State st = zero_state();
    const auto ids = std::span(padded.ids);
    return run_window(st, ids.first(ids.size() - 1), ids.subspan(1), nullptr, grad, nullptr);
  }

  double loss(const EncodedSequence& padded) const { return loss_and_gradient(padded, nullptr); }

  // -- serialization -------------------------------------------------------

  std::vector<std::byte> serialize() const {
    detail::BinaryWriter w;
    w.bytes(kMagic);
    w.u32(kFormatVersion);
    w.u64(config_.embedding_dim);
    w.u64(config_.hidden_dims.size());
    for (auto h : config_.hidden_dims) w.u64(h);
    w.u64(config_.projection_dim);
    w.f64(config_.dropout_keep);
    w.f64(config_.adam.learning_rate);
    w.f64(config_.adam.beta1);
    w.f64(config_.adam.beta2);
    w.f64(config_.adam.epsilon);
    w.u64(config_.batch_size);
    w.u64(config_.unroll);
    w.u64(config_.epochs);
    w.f64(config_.clip_norm);
    w.u32(config_.early_stopping ? 1 : 0);
    w.u64(config_.seed);
    w.u64(symbols_);
    w.u64(fingerprint_);
    for (const auto& t : params_.tensors) {
      w.u64(static_cast<std::uint64_t>(t.rows()));
      w.u64(static_cast<std::uint64_t>(t.cols()));
      for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) w.f64(t(r, c));
    }
    return w.take();
  }

  static NeuralLM deserialize(std::span<const std::byte> bytes, const Vocabulary& vocab) {
    detail::BinaryReader r(bytes);
    r.expect_bytes(kMagic, "LSTM model");
    if (r.u32() != kFormatVersion) throw FormatError("unsupported LSTM model version");
    NeuralLM m;
    auto& c = m.config_;
    c.embedding_dim = r.u64();
    const auto layers = r.u64();
    if (layers == 0 || layers > 64) throw FormatError("bad LSTM layer count");
    c.hidden_dims.resize(layers);
    for (auto& h : c.hidden_dims) h = r.u64();
    c.projection_dim = r.u64();
    c.dropout_keep = r.f64();
    c.adam.learning_rate = r.f64();
    c.adam.beta1 = r.f64();
    c.adam.beta2 = r.f64();
    c.adam.epsilon = r.f64();
    c.batch_size = r.u64();
    c.unroll = r.u64();
    c.epochs = r.u64();
    c.clip_norm = r.f64();
    c.early_stopping = r.u32() != 0;
    c.seed = r.u64();
    try {
      c.validate();
    } catch (const InvalidArgument& e) {
      throw FormatError(e.what());
    }
    m.symbols_ = r.u64();
    m.fingerprint_ = r.u64();
    if (m.fingerprint_ != vocab.fingerprint() || m.symbols_ != vocab.symbol_count())
      throw FormatError("LSTM model was trained with a different vocabulary");
    // Guard the allocation below against absurd headers.
    const double expected = static_cast<double>(c.embedding_dim) * static_cast<double>(m.symbols_) +
                            static_cast<double>(c.projection_dim + 1) * static_cast<double>(m.symbols_);
    if (expected * 8.0 > static_cast<double>(r.remaining())) throw FormatError("truncated model file");
    m.allocate();
    for (auto& t : m.params_.tensors) {
      const auto rows = r.u64();
      const auto cols = r.u64();
      if (rows != static_cast<std::uint64_t>(t.rows()) || cols != static_cast<std::uint64_t>(t.cols()))
        throw FormatError("LSTM parameter shape mismatch");
      for (Eigen::Index i = 0; i < t.rows(); ++i)
        for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = r.f64();
    }
    r.expect_end();
    if (!m.params_.all_finite()) throw FormatError("non-finite LSTM parameter");
    return m;
  }

  void save(const std::filesystem::path& path) const { detail::write_binary_file(path, serialize()); }
  static NeuralLM load(const std::filesystem::path& path, const Vocabulary& vocab) {
    return deserialize(detail::read_binary_file(path), vocab);
  }

 private:
  friend TrainReport train_neural(NeuralLM&, std::span<const EncodedSequence>,
                                  std::span<const EncodedSequence>, std::ostream*);

  static constexpr std::size_t kEmbedding = 0;
  std::size_t weight_index(std::size_t l) const { return 1 + 2 * l; }
  std::size_t bias_index(std::size_t l) const { return 2 + 2 * l; }
  std::size_t projection_index() const { return 1 + 2 * layers(); }
  std::size_t output_weight_index() const { return 2 + 2 * layers(); }
  std::size_t output_bias_index() const { return 3 + 2 * layers(); }

  void allocate() {
    const auto& c = config_;
    auto& ts = params_.tensors;
    ts.clear();
    const auto sym = static_cast<Eigen::Index>(symbols_);
    ts.emplace_back(Eigen::MatrixXd::Zero(sym, static_cast<Eigen::Index>(c.embedding_dim)));
    std::size_t in = c.embedding_dim;
    for (auto h : c.hidden_dims) {
      ts.emplace_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(4 * h),
                                            static_cast<Eigen::Index>(in + h)));
      ts.emplace_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(4 * h), 1));
      in = h;
    }
    ts.emplace_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c.projection_dim),
                                          static_cast<Eigen::Index>(in)));
    ts.emplace_back(Eigen::MatrixXd::Zero(sym - 1, static_cast<Eigen::Index>(c.projection_dim)));
    ts.emplace_back(Eigen::MatrixXd::Zero(sym - 1, 1));
  }

  struct State {
    std::vector<Eigen::VectorXd> h, c;
  };

  struct LayerCache {
    Eigen::VectorXd x, mask, h_prev, c_prev, i, f, g, o, c, tanh_c, h;
  };

  struct Step {
    TokenId input = 0;
    TokenId target = 0;
    bool scored = false;
    std::vector<LayerCache> layers;
    Eigen::VectorXd proj, probs;
  };

  struct Dropout {
    std::mt19937_64* rng;
    double keep;
    Eigen::VectorXd mask(Eigen::Index n) const {
      std::bernoulli_distribution keep_unit(keep);
      Eigen::VectorXd m(n);
      for (Eigen::Index i = 0; i < n; ++i) m[i] = keep_unit(*rng) ? 1.0 / keep : 0.0;
      return m;
    }
  };

  State zero_state() const {
    State st;
    for (auto h : config_.hidden_dims) {
      st.h.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(h)));
      st.c.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(h)));
    }
    return st;
  }

  static Eigen::VectorXd sigmoid(const Eigen::VectorXd& a) {
    return (1.0 + (-a.array()).exp()).inverse().matrix();
  }

  void forward(TokenId input, State& st, Step& s, const Dropout* drop) const {
    const auto& ts = params_.tensors;
    s.input = input;
    s.layers.resize(layers());
    Eigen::VectorXd x = ts[kEmbedding].row(input).transpose();
    for (std::size_t l = 0; l < layers(); ++l) {
      auto& lc = s.layers[l];
      if (drop != nullptr) {
        lc.mask = drop->mask(x.size());
        x = x.cwiseProduct(lc.mask);
      } else {
        lc.mask.resize(0);
      }
      const auto h = static_cast<Eigen::Index>(config_.hidden_dims[l]);
      const auto& w = ts[weight_index(l)];
      lc.x = std::move(x);
      lc.h_prev = st.h[l];
      lc.c_prev = st.c[l];
      const Eigen::VectorXd a = w.leftCols(lc.x.size()) * lc.x + w.rightCols(h) * lc.h_prev +
                                ts[bias_index(l)].col(0);
      lc.i = sigmoid(a.segment(0, h));
      lc.f = sigmoid(a.segment(h, h));
      lc.g = a.segment(2 * h, h).array().tanh().matrix();
      lc.o = sigmoid(a.segment(3 * h, h));
      lc.c = lc.f.cwiseProduct(lc.c_prev) + lc.i.cwiseProduct(lc.g);
      lc.tanh_c = lc.c.array().tanh().matrix();
      lc.h = lc.o.cwiseProduct(lc.tanh_c);
      st.h[l] = lc.h;
      st.c[l] = lc.c;
      x = lc.h;
    }
    s.proj = ts[projection_index()] * x;
    Eigen::VectorXd logits = ts[output_weight_index()] * s.proj + ts[output_bias_index()].col(0);
    const double mx = logits.maxCoeff();
    s.probs = (logits.array() - mx).exp().matrix();
    s.probs /= s.probs.sum();
  }

  /// Forward over one window, then (if grad) backward with the recurrence cut
  /// at both window ends. Returns the summed NLL of the scored targets.
  double run_window(State& st, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                    const Dropout* drop, ParameterSet* grad, std::size_t* scored) const {
    std::vector<Step> steps(inputs.size());
    double loss = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      check_input(inputs[t]);
      forward(inputs[t], st, steps[t], drop);
      steps[t].target = targets[t];
      steps[t].scored = targets[t] != bos();
      if (steps[t].scored) {
        if (targets[t] >= scorable_size()) throw InvalidArgument("target id out of range");
        loss -= std::log(steps[t].probs[targets[t]]);
        if (scored != nullptr) ++*scored;
      }
    }
    if (grad != nullptr) backward(steps, *grad);
    return loss;
  }

  void backward(const std::vector<Step>& steps, ParameterSet& grad) const {
    const auto& ts = params_.tensors;
    auto& gs = grad.tensors;
    const std::size_t L = layers();
    std::vector<Eigen::VectorXd> dh_next, dc_next;
    for (auto h : config_.hidden_dims) {
      dh_next.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(h)));
      dc_next.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(h)));
    }
    for (std::size_t t = steps.size(); t-- > 0;) {
      const Step& s = steps[t];
      Eigen::VectorXd dh_above = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(config_.hidden_dims.back()));
      if (s.scored) {
        Eigen::VectorXd dlogits = s.probs;
        dlogits[s.target] -= 1.0;
        gs[output_weight_index()].noalias() += dlogits * s.proj.transpose();
        gs[output_bias_index()].col(0) += dlogits;
        const Eigen::VectorXd dproj = ts[output_weight_index()].transpose() * dlogits;
        gs[projection_index()].noalias() += dproj * s.layers[L - 1].h.transpose();
        dh_above = ts[projection_index()].transpose() * dproj;
      }
      for (std::size_t l = L; l-- > 0;) {
        const auto& lc = s.layers[l];
        const auto h = static_cast<Eigen::Index>(config_.hidden_dims[l]);
        const Eigen::VectorXd dh = dh_above + dh_next[l];
        const Eigen::VectorXd d_o = dh.cwiseProduct(lc.tanh_c);
        const Eigen::VectorXd dc =
            dh.cwiseProduct(lc.o).cwiseProduct((1.0 - lc.tanh_c.array().square()).matrix()) + dc_next[l];
        Eigen::VectorXd da(4 * h);
        da.segment(0, h) = dc.cwiseProduct(lc.g).cwiseProduct((lc.i.array() * (1.0 - lc.i.array())).matrix());
        da.segment(h, h) = dc.cwiseProduct(lc.c_prev).cwiseProduct((lc.f.array() * (1.0 - lc.f.array())).matrix());
        da.segment(2 * h, h) = dc.cwiseProduct(lc.i).cwiseProduct((1.0 - lc.g.array().square()).matrix());
        da.segment(3 * h, h) = d_o.cwiseProduct((lc.o.array() * (1.0 - lc.o.array())).matrix());
        dc_next[l] = dc.cwiseProduct(lc.f);

        const auto& w = ts[weight_index(l)];
        auto& gw = gs[weight_index(l)];
        const auto in = lc.x.size();
        gw.leftCols(in).noalias() += da * lc.x.transpose();
        gw.rightCols(h).noalias() += da * lc.h_prev.transpose();
        gs[bias_index(l)].col(0) += da;
        Eigen::VectorXd dx = w.leftCols(in).transpose() * da;
        dh_next[l] = w.rightCols(h).transpose() * da;
        if (lc.mask.size() != 0) dx = dx.cwiseProduct(lc.mask);
        if (l > 0) dh_above = std::move(dx);
        else gs[kEmbedding].row(s.input) += dx.transpose();
      }
    }
  }

  void check_input(TokenId id) const {
    if (id >= symbols_) throw InvalidArgument("token id out of range");
  }
  void check_padded(const EncodedSequence& s) const {
    if (s.ids.empty() || s.ids.front() != bos())
      throw InvalidArgument("sequence must start with BOS");
  }

  NeuralConfig config_;
  std::uint64_t fingerprint_ = 0;
  std::size_t symbols_ = 0;  // V + 3
  ParameterSet params_;
};

/// Mean-per-token perplexity of the model on padded sequences.
inline double neural_perplexity(const NeuralLM& m, std::span<const EncodedSequence> corpus) {
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& s : corpus) {
    for (double p : m.sequence_probs(s)) {
      nll -= std::log(p);
      ++n;
    }
  }
  if (n == 0) throw InvalidArgument("perplexity of an empty corpus");
  return std::exp(nll / static_cast<double>(n));
}

/// Trains in place. Each padded sequence is cut into unroll-length windows;
/// the recurrent state is carried between windows of one sequence and reset at
/// sequence boundaries. Gradients are averaged per scored token over
/// batch_size windows, clipped by global norm, and applied with Adam. Throws
/// TrainingDiverged if the epoch loss becomes non-finite.
inline TrainReport train_neural(NeuralLM& m, std::span<const EncodedSequence> train,
                                std::span<const EncodedSequence> valid,
                                std::ostream* log = nullptr) {
  if (train.empty()) throw InvalidArgument("cannot train on an empty corpus");
  const NeuralConfig& cfg = m.config_;
  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eedULL);
  const NeuralLM::Dropout dropout{&rng, cfg.dropout_keep};
  const NeuralLM::Dropout* drop = cfg.dropout_keep < 1.0 ? &dropout : nullptr;

  ParameterSet grad = m.params_.zeros_like();
  ParameterSet adam_m = m.params_.zeros_like();
  ParameterSet adam_v = m.params_.zeros_like();
  std::uint64_t adam_t = 0;

  auto apply_update = [&](std::size_t scored) {
    if (scored == 0) return;
    grad.scale(1.0 / static_cast<double>(scored));
    if (cfg.clip_norm > 0.0) {
      const double norm = std::sqrt(grad.squared_norm());
      if (norm > cfg.clip_norm) grad.scale(cfg.clip_norm / norm);
    }
    ++adam_t;
    const auto& a = cfg.adam;
    const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(adam_t));
    const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(adam_t));
    for (std::size_t i = 0; i < grad.tensors.size(); ++i) {
      auto g = grad.tensors[i].array();
      auto mm = adam_m.tensors[i].array();
      auto vv = adam_v.tensors[i].array();
      mm = a.beta1 * mm + (1.0 - a.beta1) * g;
      vv = a.beta2 * vv + (1.0 - a.beta2) * g.square();
      m.params_.tensors[i].array() -=
          a.learning_rate * (mm / c1) / ((vv / c2).sqrt() + a.epsilon);
    }
    grad.set_zero();
  };

  TrainReport report;
  std::optional<ParameterSet> best;
  double best_pp = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_scored = 0;
    std::size_t batch_windows = 0;
    std::size_t batch_scored = 0;
    for (std::size_t idx : order) {
      const auto& seq = train[idx];
      m.check_padded(seq);
      auto st = m.zero_state();
      const auto ids = std::span(seq.ids);
      for (std::size_t pos = 0; pos + 1 < ids.size(); pos += cfg.unroll) {
        const std::size_t len = std::min(cfg.unroll, ids.size() - 1 - pos);
        epoch_loss += m.run_window(st, ids.subspan(pos, len), ids.subspan(pos + 1, len), drop,
                                   &grad, &batch_scored);
        if (++batch_windows == cfg.batch_size) {
          epoch_scored += batch_scored;
          apply_update(batch_scored);
          batch_windows = 0;
          batch_scored = 0;
        }
      }
    }
    epoch_scored += batch_scored;
    apply_update(batch_scored);

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_xent = epoch_scored ? epoch_loss / static_cast<double>(epoch_scored) : 0.0;
    if (!std::isfinite(stats.train_xent) || !m.params_.all_finite()) {
      report.epochs.push_back(stats);
      throw TrainingDiverged("training loss diverged in epoch " + std::to_string(epoch), report);
    }
    if (!valid.empty()) {
      stats.valid_pp = neural_perplexity(m, valid);
      if (cfg.early_stopping && *stats.valid_pp < best_pp) {
        best_pp = *stats.valid_pp;
        best = m.params_;
        report.best_epoch = epoch;
      }
    }
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    report.epochs.push_back(stats);
    if (log != nullptr) {
      *log << "epoch " << epoch << " train_xent " << stats.train_xent;
      if (stats.valid_pp) *log << " valid_pp " << *stats.valid_pp;
      *log << " (" << stats.seconds << " s)\n";
    }
  }
  if (best) m.params_ = std::move(*best);
  else report.best_epoch = cfg.epochs;
  return report;
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares loss_and_gradient against central finite differences on every
/// parameter coordinate. The relative error of a coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|), falling back to the
/// absolute difference when both are below `tiny`. Central differences on a
/// summed loss carry roundoff near eps * loss / step (about 4e-11 at step 1e-4),
/// so gradients much below 1e-6 cannot be resolved to 1e-4 relative.
inline GradCheckResult grad_check(const NeuralLM& model, const EncodedSequence& sample,
                                  double step = 1e-4, double tiny = 1e-6) {
  GradCheckResult out;
  std::size_t scored = 0;
  for (std::size_t i = 1; i < sample.ids.size(); ++i)
    if (sample.ids[i] != model.bos()) ++scored;
  if (scored == 0) return out;

  ParameterSet analytic = model.parameters().zeros_like();
  model.loss_and_gradient(sample, &analytic);

  NeuralLM probe = model;
  auto& ps = probe.parameters().tensors;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    for (Eigen::Index j = 0; j < ps[k].size(); ++j) {
      double& theta = ps[k].data()[j];
      const double saved = theta;
      theta = saved + step;
      const double up = probe.loss(sample);
      theta = saved - step;
      const double down = probe.loss(sample);
      theta = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.tensors[k].data()[j];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double err = scale < tiny ? std::abs(a - numeric) : std::abs(a - numeric) / scale;
      out.max_relative_error = std::max(out.max_relative_error, err);
      ++out.coordinates;
    }
  }
  return out;
}

}  // namespace perslm
