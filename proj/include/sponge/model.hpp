// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sponge/autodiff.hpp"
#include "sponge/random.hpp"
#include "sponge/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sponge {

/// Decoder-only transformer that reads `prefix_len` continuous vectors
/// followed by token embeddings.
struct ModelConfig {
  int num_layers = 2;
  int hidden_dim = 32;
  int num_heads = 2;
  int vocab_size = 64;
  int max_context = 320;
  int prefix_len = 4;
  int mlp_dim = 128;
  TokenId eos_id = 0;

  int head_dim() const { return hidden_dim / num_heads; }
  void validate() const;
  bool operator==(const ModelConfig &) const = default;
};

class ContextOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

// ---------------------------------------------------------------------------
// Parameter containers. `Field` is Matrix<Scalar> for stored weights and
// Var<Scalar> once bound to a tape, so the same field list drives
// checkpoint IO, optimizer state and the taped forward pass.
// ---------------------------------------------------------------------------

template <typename Field>
struct BlockTensors {
  Field ln1_gain, ln1_bias;
  Field wq, bq, wk, bk, wv, bv, wo, bo;
  Field ln2_gain, ln2_bias;
  Field w_up, b_up, w_down, b_down;

  static constexpr std::array fields{
      std::pair{"ln1_gain", &BlockTensors::ln1_gain}, std::pair{"ln1_bias", &BlockTensors::ln1_bias},
      std::pair{"wq", &BlockTensors::wq},             std::pair{"bq", &BlockTensors::bq},
      std::pair{"wk", &BlockTensors::wk},             std::pair{"bk", &BlockTensors::bk},
      std::pair{"wv", &BlockTensors::wv},             std::pair{"bv", &BlockTensors::bv},
      std::pair{"wo", &BlockTensors::wo},             std::pair{"bo", &BlockTensors::bo},
      std::pair{"ln2_gain", &BlockTensors::ln2_gain}, std::pair{"ln2_bias", &BlockTensors::ln2_bias},
      std::pair{"w_up", &BlockTensors::w_up},         std::pair{"b_up", &BlockTensors::b_up},
      std::pair{"w_down", &BlockTensors::w_down},     std::pair{"b_down", &BlockTensors::b_down},
  };
};

template <typename Field>
struct ModelTensors {
  Field token_embedding;
  Field position_embedding;
  std::vector<BlockTensors<Field>> blocks;
  Field lnf_gain, lnf_bias;
  Field w_out, b_out;

  /// Calls `f(name, field)` for every tensor in a fixed order.
  template <typename F>
  void for_each(F &&f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F &&f) const {
    visit(*this, f);
  }

  /// Builds the same structure with every field mapped through `g`.
  template <typename G>
  auto map(G &&g) const {
    using Out = std::decay_t<decltype(g(std::declval<const Field &>()))>;
    ModelTensors<Out> out;
    out.token_embedding = g(token_embedding);
    out.position_embedding = g(position_embedding);
    out.blocks.resize(blocks.size());
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      for (std::size_t k = 0; k < BlockTensors<Field>::fields.size(); ++k) {
        out.blocks[l].*(BlockTensors<Out>::fields[k].second) = g(blocks[l].*(BlockTensors<Field>::fields[k].second));
      }
    }
    out.lnf_gain = g(lnf_gain);
    out.lnf_bias = g(lnf_bias);
    out.w_out = g(w_out);
    out.b_out = g(b_out);
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self &self, F &f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      for (const auto &[name, member] : BlockTensors<Field>::fields) {
        f("blocks." + std::to_string(l) + "." + name, self.blocks[l].*member);
      }
    }
    f(std::string("lnf_gain"), self.lnf_gain);
    f(std::string("lnf_bias"), self.lnf_bias);
    f(std::string("w_out"), self.w_out);
    f(std::string("b_out"), self.b_out);
  }
};

template <typename Scalar>
struct ModelParams : ModelTensors<Matrix<Scalar>> {
  ModelConfig config;

  template <typename To>
  ModelParams<To> cast() const {
    ModelParams<To> out;
    static_cast<ModelTensors<Matrix<To>> &>(out) =
        this->map([](const Matrix<Scalar> &m) -> Matrix<To> { return m.template cast<To>(); });
    out.config = config;
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    this->for_each([&n](const std::string &, const Matrix<Scalar> &m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    this->for_each([&ok](const std::string &, const Matrix<Scalar> &m) { ok = ok && m.allFinite(); });
    return ok;
  }
};

template <typename Scalar>
using BoundParams = ModelTensors<Var<Scalar>>;

/// Random initialization (GPT-2 style: N(0, 0.02) weights, unit gains).
ModelParams<float> init_params(const ModelConfig &config, std::uint64_t seed);

/// Records every weight on `tape`; as variables when `trainable`, otherwise
/// as constants that the reverse sweep skips.
template <typename Scalar>
BoundParams<Scalar> bind(Tape<Scalar> &tape, const ModelParams<Scalar> &params, bool trainable) {
  return params.map([&tape, trainable](const Matrix<Scalar> &m) {
    return trainable ? tape.variable(m) : tape.constant(m);
  });
}

// ---------------------------------------------------------------------------
// Taped forward pass
// ---------------------------------------------------------------------------

template <typename Scalar>
struct ForwardResult {
  /// One row per query position (see `forward`), vocab_size columns.
  Var<Scalar> logits;
  /// Output of each transformer block at the query positions; one entry
  /// per layer, each rows x hidden_dim.
  std::vector<Var<Scalar>> hidden;
};

/// Runs the decoder over [prefix rows, token embeddings]. Query positions
/// are the token positions, or the last prefix position when `tokens` is
/// empty (the logits for the first generated token).
template <typename Scalar>
ForwardResult<Scalar> forward(Tape<Scalar> &, const BoundParams<Scalar> &p, const ModelConfig &cfg,
                              Var<Scalar> prefix, std::span<const TokenId> tokens) {
  const Eigen::Index plen = prefix.rows();
  const Eigen::Index n = plen + static_cast<Eigen::Index>(tokens.size());
  if (n > cfg.max_context) {
    throw ContextOverflow("forward: sequence length " + std::to_string(n) + " exceeds max_context " +
                          std::to_string(cfg.max_context));
  }
  if (prefix.cols() != cfg.hidden_dim) {
    throw_shape_mismatch("forward(prefix)", prefix.rows(), prefix.cols(), plen, cfg.hidden_dim);
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary");
    }
  }

  Var<Scalar> x = prefix;
  if (!tokens.empty()) {
    x = concat_rows(prefix, gather_rows(p.token_embedding, tokens));
  }
  x = add(x, slice_rows(p.position_embedding, 0, n));

  const int heads = cfg.num_heads;
  const Eigen::Index dh = cfg.head_dim();
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const Eigen::Index first_query = tokens.empty() ? plen - 1 : plen;
  const Eigen::Index num_query = n - first_query;

  ForwardResult<Scalar> out;
  for (const auto &b : p.blocks) {
    Var<Scalar> a = layer_norm(x, b.ln1_gain, b.ln1_bias);
    Var<Scalar> q = add(matmul(a, b.wq), b.bq);
    Var<Scalar> k = add(matmul(a, b.wk), b.bk);
    Var<Scalar> v = add(matmul(a, b.wv), b.bv);
    std::vector<Var<Scalar>> head_out;
    head_out.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Var<Scalar> qh = slice_cols(q, h * dh, dh);
      Var<Scalar> kh = slice_cols(k, h * dh, dh);
      Var<Scalar> vh = slice_cols(v, h * dh, dh);
      Var<Scalar> att = causal_softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      head_out.push_back(matmul(att, vh));
    }
    Var<Scalar> attn = add(matmul(concat_cols<Scalar>(head_out), b.wo), b.bo);
    x = add(x, attn);
    Var<Scalar> m = layer_norm(x, b.ln2_gain, b.ln2_bias);
    Var<Scalar> mlp = add(matmul(gelu(add(matmul(m, b.w_up), b.b_up)), b.w_down), b.b_down);
    x = add(x, mlp);
    out.hidden.push_back(slice_rows(x, first_query, num_query));
  }
  Var<Scalar> xq = slice_rows(x, first_query, num_query);
  out.logits = add(matmul(layer_norm(xq, p.lnf_gain, p.lnf_bias), p.w_out), p.b_out);
  return out;
}

/// Value-only convenience wrapper around the taped forward pass.
template <typename Scalar>
struct ForwardValues {
  Matrix<Scalar> logits;
  std::vector<Matrix<Scalar>> hidden;
};

template <typename Scalar>
ForwardValues<Scalar> forward(const ModelParams<Scalar> &params, const Matrix<Scalar> &prefix,
                              std::span<const TokenId> tokens) {
  Tape<Scalar> tape;
  auto bound = bind(tape, params, false);
  auto res = forward(tape, bound, params.config, tape.constant(prefix), tokens);
  ForwardValues<Scalar> out{res.logits.value(), {}};
  for (const auto &h : res.hidden) {
    out.hidden.push_back(h.value());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

enum class DecodeMode { greedy, sampled };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  double top_p = 1.0;
  double repetition_penalty = 1.0;
  int no_repeat_ngram_size = 0;
  int max_new_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Termination { eos, cap };

const char *to_string(Termination t);

/// Everything recorded while decoding one input.
struct GenerationTrace {
  std::vector<TokenId> tokens;
  /// Raw model logits z_i, one row per generated step.
  Matrix<float> logits;
  /// softmax(z_i)[EOS] for each step.
  std::vector<float> eos_prob;
  /// ||h_i^(l)||_2 for each step (rows) and block (columns).
  Matrix<float> hidden_norms;
  Termination terminated_by = Termination::cap;

  int n_out() const { return static_cast<int>(tokens.size()); }
  /// Layer-averaged norm of step k.
  double mean_layer_norm(int k) const { return static_cast<double>(hidden_norms.row(k).mean()); }
};

/// Stable softmax in double precision for a single logit row.
std::vector<double> softmax(std::span<const float> logits);

/// EOS coordinate of softmax(logits), computed in float with max subtraction.
float eos_probability(std::span<const float> logits, TokenId eos_id);

/// Divides positive logits of previously seen tokens by `penalty` and
/// multiplies non-positive ones by it. Identity at penalty 1.
void apply_repetition_penalty(std::span<float> logits, std::span<const TokenId> history, double penalty);

/// Sets to -inf every token that would complete an n-gram already present
/// in `history`. n = 0 disables the ban.
void ban_repeated_ngrams(std::span<float> logits, std::span<const TokenId> history, int n);

TokenId argmax(std::span<const float> logits);

/// Temperature + nucleus sampling. Throws when every logit is -inf.
TokenId sample_step(std::span<const float> logits, const DecodeConfig &cfg, Rng &rng);

/// Incremental decoder with per-layer key/value caches. Produces the same
/// numbers as the taped forward up to float reassociation.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ModelParams<float> &params);

  void reset();
  int position() const { return pos_; }

  /// Feeds one input row (embedding without position) and returns the
  /// logits at that position; block output norms go to `hidden_norms`.
  const RowVector<float> &step(const RowVector<float> &input, std::span<float> hidden_norms);
  const RowVector<float> &step_token(TokenId token, std::span<float> hidden_norms);

 private:
  const ModelParams<float> &params_;
  std::vector<Matrix<float>> keys_;
  std::vector<Matrix<float>> values_;
  RowVector<float> logits_;
  int pos_ = 0;
};

/// Autoregressive decode from prefix `x` and prompt tokens, stopping at EOS
/// or after `cfg.max_new_tokens` tokens.
GenerationTrace generate(const ModelParams<float> &params, const Matrix<float> &prefix,
                         std::span<const TokenId> prompt, const DecodeConfig &cfg);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingExample {
  Matrix<float> prefix;
  /// Target continuation after the prompt, ending in EOS.
  std::vector<TokenId> tokens;
};

/// Teacher-forced next-token loss over the target tokens of one example.
template <typename Scalar>
Var<Scalar> sequence_loss(Tape<Scalar> &tape, const BoundParams<Scalar> &p, const ModelConfig &cfg,
                          Var<Scalar> prefix, std::span<const TokenId> prompt,
                          std::span<const TokenId> targets) {
  if (targets.empty()) {
    throw std::invalid_argument("sequence_loss: empty target sequence");
  }
  std::vector<TokenId> input(prompt.begin(), prompt.end());
  input.insert(input.end(), targets.begin(), targets.end() - 1);
  auto res = forward(tape, p, cfg, prefix, input);
  const Eigen::Index first = prompt.empty() ? 0 : static_cast<Eigen::Index>(prompt.size()) - 1;
  Var<Scalar> z = slice_rows(res.logits, first, static_cast<Eigen::Index>(targets.size()));
  return cross_entropy(z, targets);
}

struct AdamConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double grad_clip = 1.0;
};

/// Owns the optimizer moments for one model.
class Trainer {
 public:
  Trainer(const ModelParams<float> &params, AdamConfig cfg);

  /// One optimizer step on the mean loss of `batch`; returns that loss.
  double train_step(ModelParams<float> &params, std::span<const TrainingExample> batch,
                    std::span<const TokenId> prompt);

  int steps() const { return step_; }

 private:
  AdamConfig cfg_;
  ModelTensors<Matrix<float>> m_;
  ModelTensors<Matrix<float>> v_;
  int step_ = 0;
};

/// Mean teacher-forced cross-entropy over `examples` without updating.
double evaluate_loss(const ModelParams<float> &params, std::span<const TrainingExample> examples,
                     std::span<const TokenId> prompt);

}  // namespace sponge
