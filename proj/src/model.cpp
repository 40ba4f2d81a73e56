// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sponge/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace sponge {

void ModelConfig::validate() const {
  if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || vocab_size < 2 || prefix_len < 1 || mlp_dim < 1) {
    throw std::invalid_argument("ModelConfig: sizes must be positive (prefix_len >= 1, vocab_size >= 2)");
  }
  if (hidden_dim % num_heads != 0) {
    throw std::invalid_argument("ModelConfig: hidden_dim " + std::to_string(hidden_dim) +
                                " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (eos_id < 0 || eos_id >= vocab_size) {
    throw std::invalid_argument("ModelConfig: eos_id outside vocabulary");
  }
  if (max_context <= prefix_len) {
    throw std::invalid_argument("ModelConfig: max_context must exceed prefix_len");
  }
}

ModelParams<float> init_params(const ModelConfig &config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int d = config.hidden_dim;
  auto normal = [&rng](int r, int c, double std) {
    Matrix<float> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<float>(std * rng.normal());
    }
    return m;
  };
  auto zeros = [](int r, int c) { return Matrix<float>::Zero(r, c).eval(); };
  auto ones = [](int r, int c) { return Matrix<float>::Ones(r, c).eval(); };
  const double proj_std = 0.02 / std::sqrt(2.0 * config.num_layers);

  ModelParams<float> p;
  p.config = config;
  p.token_embedding = normal(config.vocab_size, d, 0.02);
  p.position_embedding = normal(config.max_context, d, 0.01);
  p.blocks.resize(static_cast<std::size_t>(config.num_layers));
  for (auto &b : p.blocks) {
    b.ln1_gain = ones(1, d);
    b.ln1_bias = zeros(1, d);
    b.wq = normal(d, d, 0.02);
    b.bq = zeros(1, d);
    b.wk = normal(d, d, 0.02);
    b.bk = zeros(1, d);
    b.wv = normal(d, d, 0.02);
    b.bv = zeros(1, d);
    b.wo = normal(d, d, proj_std);
    b.bo = zeros(1, d);
    b.ln2_gain = ones(1, d);
    b.ln2_bias = zeros(1, d);
    b.w_up = normal(d, config.mlp_dim, 0.02);
    b.b_up = zeros(1, config.mlp_dim);
    b.w_down = normal(config.mlp_dim, d, proj_std);
    b.b_down = zeros(1, d);
  }
  p.lnf_gain = ones(1, d);
  p.lnf_bias = zeros(1, d);
  p.w_out = normal(d, config.vocab_size, 0.02);
  p.b_out = zeros(1, config.vocab_size);
  return p;
}

// ---------------------------------------------------------------------------
// Logit processing
// ---------------------------------------------------------------------------

void DecodeConfig::validate() const {
  if (mode == DecodeMode::sampled) {
    if (!(temperature > 0.0)) {
      throw std::invalid_argument("DecodeConfig: temperature must be > 0");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
      throw std::invalid_argument("DecodeConfig: top_p must be in (0, 1]");
    }
  }
  if (!(repetition_penalty >= 1.0)) {
    throw std::invalid_argument("DecodeConfig: repetition_penalty must be >= 1");
  }
  if (no_repeat_ngram_size < 0) {
    throw std::invalid_argument("DecodeConfig: no_repeat_ngram_size must be >= 0");
  }
  if (max_new_tokens < 1) {
    throw std::invalid_argument("DecodeConfig: max_new_tokens must be >= 1");
  }
}

const char *to_string(Termination t) { return t == Termination::eos ? "eos" : "cap"; }

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  double m = -std::numeric_limits<double>::infinity();
  for (float z : logits) {
    m = std::max(m, static_cast<double>(z));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::isinf(logits[i]) && logits[i] < 0 ? 0.0 : std::exp(static_cast<double>(logits[i]) - m);
    s += p[i];
  }
  for (double &v : p) {
    v /= s;
  }
  return p;
}

float eos_probability(std::span<const float> logits, TokenId eos_id) {
  float m = -std::numeric_limits<float>::infinity();
  for (float z : logits) {
    m = std::max(m, z);
  }
  float s = 0.0f;
  for (float z : logits) {
    s += std::exp(z - m);
  }
  return std::exp(logits[static_cast<std::size_t>(eos_id)] - m) / s;
}

void apply_repetition_penalty(std::span<float> logits, std::span<const TokenId> history, double penalty) {
  if (penalty == 1.0) {
    return;
  }
  std::vector<bool> seen(logits.size(), false);
  for (TokenId t : history) {
    if (t >= 0 && static_cast<std::size_t>(t) < logits.size()) {
      seen[static_cast<std::size_t>(t)] = true;
    }
  }
  const auto p = static_cast<float>(penalty);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (seen[i]) {
      logits[i] = logits[i] > 0.0f ? logits[i] / p : logits[i] * p;
    }
  }
}

void ban_repeated_ngrams(std::span<float> logits, std::span<const TokenId> history, int n) {
  if (n <= 0) {
    return;
  }
  const auto len = history.size();
  const auto un = static_cast<std::size_t>(n);
  if (len + 1 < un) {
    return;
  }
  // The candidate n-gram is history[len-n+1 .. len) followed by the new token.
  const std::size_t ctx = un - 1;
  for (std::size_t start = 0; start + un <= len; ++start) {
    bool match = true;
    for (std::size_t j = 0; j < ctx; ++j) {
      if (history[start + j] != history[len - ctx + j]) {
        match = false;
        break;
      }
    }
    if (match) {
      const TokenId banned = history[start + ctx];
      if (banned >= 0 && static_cast<std::size_t>(banned) < logits.size()) {
        logits[static_cast<std::size_t>(banned)] = -std::numeric_limits<float>::infinity();
      }
    }
  }
}

TokenId argmax(std::span<const float> logits) {
  if (logits.empty()) {
    throw std::invalid_argument("argmax: empty logits");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) {
      best = i;
    }
  }
  if (std::isinf(logits[best]) && logits[best] < 0) {
    throw std::runtime_error("argmax: every token is banned");
  }
  return static_cast<TokenId>(best);
}

TokenId sample_step(std::span<const float> logits, const DecodeConfig &cfg, Rng &rng) {
  if (cfg.mode != DecodeMode::sampled) {
    throw std::invalid_argument("sample_step: decode mode is not sampled");
  }
  std::vector<float> scaled(logits.begin(), logits.end());
  bool any = false;
  for (float &z : scaled) {
    any = any || !(std::isinf(z) && z < 0);
    z = static_cast<float>(static_cast<double>(z) / cfg.temperature);
  }
  if (!any) {
    throw std::runtime_error("sample_step: every token is banned");
  }
  const std::vector<double> p = softmax(scaled);
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&p](std::size_t a, std::size_t b) { return p[a] > p[b]; });

  std::size_t keep = order.size();
  if (cfg.top_p < 1.0) {
    keep = 1;
    double cum = p[order[0]];
    while (keep < order.size() && cum + p[order[keep]] <= cfg.top_p) {
      cum += p[order[keep]];
      ++keep;
    }
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    mass += p[order[i]];
  }
  double u = rng.uniform() * mass;
  for (std::size_t i = 0; i < keep; ++i) {
    u -= p[order[i]];
    if (u < 0.0) {
      return static_cast<TokenId>(order[i]);
    }
  }
  // Rounding left a sliver of mass; fall back to the last kept token with
  // nonzero probability.
  for (std::size_t i = keep; i-- > 0;) {
    if (p[order[i]] > 0.0) {
      return static_cast<TokenId>(order[i]);
    }
  }
  return static_cast<TokenId>(order[0]);
}

// ---------------------------------------------------------------------------
// Incremental decoder
// ---------------------------------------------------------------------------

namespace {

void layer_norm_row(const RowVector<float> &x, const Matrix<float> &gain, const Matrix<float> &bias,
                    RowVector<float> &out) {
  const float mu = x.mean();
  const float var = (x.array() - mu).square().mean();
  const float inv = 1.0f / std::sqrt(var + 1e-5f);
  out = ((x.array() - mu) * inv) * gain.row(0).array() + bias.row(0).array();
}

float gelu_scalar(float x) {
  constexpr float c = 0.7978845608028654f;
  constexpr float a = 0.044715f;
  return 0.5f * x * (1.0f + std::tanh(c * (x + a * x * x * x)));
}

}  // namespace

IncrementalDecoder::IncrementalDecoder(const ModelParams<float> &params) : params_(params) {
  params.config.validate();
  reset();
}

void IncrementalDecoder::reset() {
  const auto &c = params_.config;
  keys_.assign(static_cast<std::size_t>(c.num_layers), Matrix<float>(c.max_context, c.hidden_dim));
  values_.assign(static_cast<std::size_t>(c.num_layers), Matrix<float>(c.max_context, c.hidden_dim));
  pos_ = 0;
}

const RowVector<float> &IncrementalDecoder::step_token(TokenId token, std::span<float> hidden_norms) {
  const auto &c = params_.config;
  if (token < 0 || token >= c.vocab_size) {
    throw std::out_of_range("decoder: token id " + std::to_string(token) + " outside vocabulary");
  }
  RowVector<float> row = params_.token_embedding.row(token);
  return step(row, hidden_norms);
}

const RowVector<float> &IncrementalDecoder::step(const RowVector<float> &input, std::span<float> hidden_norms) {
  const auto &c = params_.config;
  if (pos_ >= c.max_context) {
    throw ContextOverflow("decoder: position " + std::to_string(pos_) + " exceeds max_context " +
                          std::to_string(c.max_context));
  }
  const int d = c.hidden_dim;
  const int dh = c.head_dim();
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  RowVector<float> x = input + params_.position_embedding.row(pos_);
  RowVector<float> a, q, attn(d), scores;
  for (int l = 0; l < c.num_layers; ++l) {
    const auto &b = params_.blocks[static_cast<std::size_t>(l)];
    auto &K = keys_[static_cast<std::size_t>(l)];
    auto &V = values_[static_cast<std::size_t>(l)];
    layer_norm_row(x, b.ln1_gain, b.ln1_bias, a);
    q = a * b.wq + b.bq;
    K.row(pos_) = a * b.wk + b.bk;
    V.row(pos_) = a * b.wv + b.bv;
    for (int h = 0; h < c.num_heads; ++h) {
      scores = (q.segment(h * dh, dh) * K.block(0, h * dh, pos_ + 1, dh).transpose()) * inv_sqrt;
      const float m = scores.maxCoeff();
      scores = (scores.array() - m).exp();
      scores /= scores.sum();
      attn.segment(h * dh, dh) = scores * V.block(0, h * dh, pos_ + 1, dh);
    }
    x += attn * b.wo + b.bo;
    layer_norm_row(x, b.ln2_gain, b.ln2_bias, a);
    RowVector<float> up = a * b.w_up + b.b_up;
    for (Eigen::Index i = 0; i < up.size(); ++i) {
      up(i) = gelu_scalar(up(i));
    }
    x += up * b.w_down + b.b_down;
    if (static_cast<std::size_t>(l) < hidden_norms.size()) {
      hidden_norms[static_cast<std::size_t>(l)] = x.norm();
    }
  }
  layer_norm_row(x, params_.lnf_gain, params_.lnf_bias, a);
  logits_ = a * params_.w_out + params_.b_out;
  ++pos_;
  return logits_;
}

GenerationTrace generate(const ModelParams<float> &params, const Matrix<float> &prefix,
                         std::span<const TokenId> prompt, const DecodeConfig &cfg) {
  cfg.validate();
  const auto &c = params.config;
  if (prefix.cols() != c.hidden_dim || prefix.rows() < 1) {
    throw_shape_mismatch("generate(prefix)", prefix.rows(), prefix.cols(), c.prefix_len, c.hidden_dim);
  }
  const Eigen::Index needed = prefix.rows() + static_cast<Eigen::Index>(prompt.size()) + cfg.max_new_tokens - 1;
  if (needed > c.max_context) {
    throw ContextOverflow("generate: prefix + prompt + max_new_tokens needs " + std::to_string(needed) +
                          " positions, max_context is " + std::to_string(c.max_context));
  }

  IncrementalDecoder dec(params);
  std::vector<float> norms(static_cast<std::size_t>(c.num_layers));
  RowVector<float> logits;
  for (Eigen::Index r = 0; r < prefix.rows(); ++r) {
    RowVector<float> row = prefix.row(r);
    logits = dec.step(row, norms);
  }
  for (TokenId t : prompt) {
    logits = dec.step_token(t, norms);
  }

  GenerationTrace trace;
  trace.logits.resize(cfg.max_new_tokens, c.vocab_size);
  trace.hidden_norms.resize(cfg.max_new_tokens, c.num_layers);
  std::vector<TokenId> history(prompt.begin(), prompt.end());
  std::vector<float> work(static_cast<std::size_t>(c.vocab_size));
  Rng rng(cfg.seed);

  for (int i = 0; i < cfg.max_new_tokens; ++i) {
    trace.logits.row(i) = logits;
    for (int l = 0; l < c.num_layers; ++l) {
      trace.hidden_norms(i, l) = norms[static_cast<std::size_t>(l)];
    }
    trace.eos_prob.push_back(eos_probability(std::span<const float>(logits.data(), work.size()), c.eos_id));

    std::copy(logits.data(), logits.data() + logits.size(), work.begin());
    apply_repetition_penalty(work, history, cfg.repetition_penalty);
    ban_repeated_ngrams(work, history, cfg.no_repeat_ngram_size);
    const TokenId next = cfg.mode == DecodeMode::greedy ? argmax(work) : sample_step(work, cfg, rng);
    trace.tokens.push_back(next);
    history.push_back(next);
    if (next == c.eos_id) {
      trace.terminated_by = Termination::eos;
      break;
    }
    if (i + 1 == cfg.max_new_tokens) {
      trace.terminated_by = Termination::cap;
      break;
    }
    logits = dec.step_token(next, norms);
  }
  trace.logits.conservativeResize(trace.n_out(), c.vocab_size);
  trace.hidden_norms.conservativeResize(trace.n_out(), c.num_layers);
  return trace;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

Trainer::Trainer(const ModelParams<float> &params, AdamConfig cfg) : cfg_(cfg) {
  auto zeros = [](const Matrix<float> &m) { return Matrix<float>::Zero(m.rows(), m.cols()).eval(); };
  m_ = params.map(zeros);
  v_ = params.map(zeros);
}

double Trainer::train_step(ModelParams<float> &params, std::span<const TrainingExample> batch,
                           std::span<const TokenId> prompt) {
  if (batch.empty()) {
    throw std::invalid_argument("train_step: empty batch");
  }
  auto zeros = [](const Matrix<float> &m) { return Matrix<float>::Zero(m.rows(), m.cols()).eval(); };
  ModelTensors<Matrix<float>> grads = params.map(zeros);
  double total = 0.0;
  for (const auto &ex : batch) {
    Tape<float> tape;
    BoundParams<float> bound = bind(tape, params, true);
    Var<float> loss = sequence_loss(tape, bound, params.config, tape.constant(ex.prefix), prompt, ex.tokens);
    tape.backward(loss);
    total += loss.value()(0, 0);
    std::vector<Matrix<float> *> gptr;
    grads.for_each([&gptr](const std::string &, Matrix<float> &g) { gptr.push_back(&g); });
    std::size_t k = 0;
    bound.for_each([&](const std::string &, const Var<float> &v) { *gptr[k++] += tape.grad(v); });
  }
  const auto inv_b = 1.0f / static_cast<float>(batch.size());
  double sq = 0.0;
  grads.for_each([&](const std::string &, Matrix<float> &g) {
    g *= inv_b;
    sq += static_cast<double>(g.squaredNorm());
  });
  const double norm = std::sqrt(sq);
  const float clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? static_cast<float>(cfg_.grad_clip / norm) : 1.0f;

  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
  const auto lr = static_cast<float>(cfg_.learning_rate * std::sqrt(bc2) / bc1);
  const auto b1 = static_cast<float>(cfg_.beta1);
  const auto b2 = static_cast<float>(cfg_.beta2);
  const auto eps = static_cast<float>(cfg_.eps);

  std::vector<Matrix<float> *> pm, gm, mm, vm;
  params.for_each([&pm](const std::string &, Matrix<float> &x) { pm.push_back(&x); });
  grads.for_each([&gm](const std::string &, Matrix<float> &x) { gm.push_back(&x); });
  m_.for_each([&mm](const std::string &, Matrix<float> &x) { mm.push_back(&x); });
  v_.for_each([&vm](const std::string &, Matrix<float> &x) { vm.push_back(&x); });
  for (std::size_t k = 0; k < pm.size(); ++k) {
    const Matrix<float> g = *gm[k] * clip;
    *mm[k] = b1 * *mm[k] + (1.0f - b1) * g;
    *vm[k] = b2 * *vm[k] + (1.0f - b2) * g.cwiseProduct(g);
    *pm[k] -= (lr * mm[k]->array() / (vm[k]->array().sqrt() + eps)).matrix();
  }
  return total / static_cast<double>(batch.size());
}

double evaluate_loss(const ModelParams<float> &params, std::span<const TrainingExample> examples,
                     std::span<const TokenId> prompt) {
  if (examples.empty()) {
    throw std::invalid_argument("evaluate_loss: no examples");
  }
  double total = 0.0;
  for (const auto &ex : examples) {
    Tape<float> tape;
    BoundParams<float> bound = bind(tape, params, false);
    total += sequence_loss(tape, bound, params.config, tape.constant(ex.prefix), prompt, ex.tokens).value()(0, 0);
  }
  return total / static_cast<double>(examples.size());
}

}  // namespace sponge
