// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "sponge/model.hpp"

#include <limits>
#include <set>

using namespace sponge;

namespace {
ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.max_context = 80;
  return cfg;
}

Matrix<float> random_prefix(const ModelConfig &cfg, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Matrix<float> x(cfg.prefix_len, cfg.hidden_dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = static_cast<float>(scale * rng.normal());
  }
  return x;
}

// Scales the random init up so an untrained model has varied, confident
// predictions instead of near-uniform ones.
ModelParams<float> lively_params(const ModelConfig &cfg, std::uint64_t seed) {
  auto p = init_params(cfg, seed);
  p.for_each([](const std::string &name, Matrix<float> &m) {
    if (name.find("gain") == std::string::npos && name.find("bias") == std::string::npos) {
      m *= 25.0f;
    }
  });
  return p;
}

bool has_repeated_ngram(const std::vector<TokenId> &tokens, std::size_t n) {
  std::set<std::vector<TokenId>> seen;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    if (!seen.emplace(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))
             .second) {
      return true;
    }
  }
  return false;
}
}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.num_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.prefix_len = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("forward shapes") {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 1);
  const auto x = random_prefix(cfg, 2);

  SUBCASE("empty token sequence yields logits for the first generated position") {
    auto out = forward(p, x, {});
    CHECK(out.logits.rows() == 1);
    CHECK(out.logits.cols() == cfg.vocab_size);
  }
  SUBCASE("one hidden record per position and layer") {
    const std::vector<TokenId> tokens{1, 2, 3, 4, 5};
    auto out = forward(p, x, tokens);
    std::size_t vectors = 0;
    for (const auto &h : out.hidden) {
      vectors += static_cast<std::size_t>(h.rows());
      CHECK(h.cols() == cfg.hidden_dim);
    }
    CHECK(out.hidden.size() == 2);
    CHECK(vectors == 10);
  }
  SUBCASE("context overflow names the limit") {
    std::vector<TokenId> tokens(static_cast<std::size_t>(cfg.max_context), 1);
    try {
      forward(p, x, tokens);
      FAIL("expected ContextOverflow");
    } catch (const ContextOverflow &e) {
      CHECK(std::string(e.what()).find("max_context 80") != std::string::npos);
    }
  }
}

TEST_CASE("causal masking: later tokens do not affect earlier logits") {
  const auto cfg = small_config();
  const auto p = lively_params(cfg, 3);
  const auto x = random_prefix(cfg, 4);
  std::vector<TokenId> tokens{3, 7, 1, 9, 2, 5};
  const auto before = forward(p, x, tokens);
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    auto changed = tokens;
    changed[k] = (changed[k] + 4) % cfg.vocab_size;
    const auto after = forward(p, x, changed);
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(k); ++r) {
      CHECK(after.logits.row(r) == before.logits.row(r));
    }
  }
}

TEST_CASE("incremental decoder agrees with the taped forward") {
  const auto cfg = small_config();
  const auto p = lively_params(cfg, 5);
  const auto x = random_prefix(cfg, 6);
  const std::vector<TokenId> tokens{4, 8, 1, 1, 11};
  const auto ref = forward(p, x, tokens);

  IncrementalDecoder dec(p);
  std::vector<float> norms(static_cast<std::size_t>(cfg.num_layers));
  for (int r = 0; r < cfg.prefix_len; ++r) {
    dec.step(x.row(r), norms);
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto &z = dec.step_token(tokens[i], norms);
    const auto row = static_cast<Eigen::Index>(i);
    CHECK((z - ref.logits.row(row)).cwiseAbs().maxCoeff() < 1e-4f);
    for (int l = 0; l < cfg.num_layers; ++l) {
      CHECK(norms[static_cast<std::size_t>(l)] == doctest::Approx(ref.hidden[static_cast<std::size_t>(l)].row(row).norm()).epsilon(1e-5));
    }
  }
}

TEST_CASE("generate termination") {
  auto cfg = small_config();
  const std::vector<TokenId> prompt{2, 3};
  const auto x = random_prefix(cfg, 7);

  SUBCASE("EOS dominating everywhere stops after one token") {
    auto p = init_params(cfg, 8);
    p.b_out(0, cfg.eos_id) = 50.0f;
    auto tr = generate(p, x, prompt, DecodeConfig{});
    CHECK(tr.n_out() == 1);
    CHECK(tr.tokens.back() == cfg.eos_id);
    CHECK(tr.terminated_by == Termination::eos);
  }
  SUBCASE("a model that never emits EOS hits the cap") {
    auto p = init_params(cfg, 9);
    p.b_out(0, cfg.eos_id) = -50.0f;
    DecodeConfig dc;
    dc.max_new_tokens = 8;
    auto tr = generate(p, x, prompt, dc);
    CHECK(tr.n_out() == 8);
    CHECK(tr.terminated_by == Termination::cap);
    CHECK(tr.logits.rows() == 8);
    CHECK(tr.hidden_norms.rows() == 8);
    CHECK(tr.hidden_norms.cols() == cfg.num_layers);
  }
}

TEST_CASE("trace EOS probabilities match the recorded logits") {
  const auto cfg = small_config();
  const auto p = lively_params(cfg, 10);
  DecodeConfig dc;
  dc.max_new_tokens = 30;
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto tr = generate(p, random_prefix(cfg, 100 + s), std::vector<TokenId>{1}, dc);
    REQUIRE(tr.n_out() >= 1);
    for (int i = 0; i < tr.n_out(); ++i) {
      const Matrix<float> z = tr.logits.row(i);
      const auto probs = softmax(std::span<const float>(z.data(), static_cast<std::size_t>(z.size())));
      CHECK(std::abs(static_cast<double>(tr.eos_prob[static_cast<std::size_t>(i)]) - probs[0]) < 1e-6);
    }
  }
}

TEST_CASE("greedy decoding is bit-identical across runs") {
  const auto cfg = small_config();
  const auto p = lively_params(cfg, 12);
  const auto x = random_prefix(cfg, 13);
  DecodeConfig dc;
  dc.max_new_tokens = 40;
  const auto a = generate(p, x, std::vector<TokenId>{1, 2}, dc);
  const auto b = generate(p, x, std::vector<TokenId>{1, 2}, dc);
  CHECK(a.tokens == b.tokens);
  CHECK(a.logits == b.logits);
  CHECK(a.hidden_norms == b.hidden_norms);
}

TEST_CASE("repetition penalty") {
  std::vector<float> z{2.0f, -1.0f, 0.5f};
  const std::vector<TokenId> seen{0, 1};

  SUBCASE("identity at 1") {
    auto w = z;
    apply_repetition_penalty(w, seen, 1.0);
    CHECK(w == z);
  }
  SUBCASE("divide positive, multiply negative") {
    auto w = z;
    apply_repetition_penalty(w, seen, 2.0);
    CHECK(w[0] == 1.0f);
    CHECK(w[1] == -2.0f);
    CHECK(w[2] == 0.5f);
  }
  SUBCASE("seen token probability falls as the penalty grows") {
    double prev = 1.0;
    for (double pen : {1.0, 1.05, 1.1, 1.5, 2.0, 4.0}) {
      auto w = z;
      apply_repetition_penalty(w, seen, pen);
      const double p0 = softmax(w)[0];
      CHECK(p0 <= prev);
      prev = p0;
    }
  }
}

TEST_CASE("n-gram ban") {
  const float inf = std::numeric_limits<float>::infinity();
  SUBCASE("disabled at 0") {
    std::vector<float> z{1, 2, 3};
    ban_repeated_ngrams(z, std::vector<TokenId>{0, 1, 0}, 0);
    CHECK(z == std::vector<float>{1, 2, 3});
  }
  SUBCASE("history a b a bans b") {
    std::vector<float> z{1, 2, 3};
    ban_repeated_ngrams(z, std::vector<TokenId>{0, 1, 0}, 2);
    CHECK(z[1] == -inf);
    CHECK(z[0] == 1.0f);
    CHECK(z[2] == 3.0f);
  }
  SUBCASE("greedy decodes never repeat a bigram") {
    auto cfg = small_config();
    auto p = lively_params(cfg, 14);
    p.b_out(0, cfg.eos_id) = -50.0f;
    DecodeConfig dc;
    dc.no_repeat_ngram_size = 2;
    dc.max_new_tokens = 40;
    for (std::uint64_t s = 0; s < 10; ++s) {
      const std::vector<TokenId> prompt{1, 2};
      auto tr = generate(p, random_prefix(cfg, 200 + s), prompt, dc);
      std::vector<TokenId> all(prompt);
      all.insert(all.end(), tr.tokens.begin(), tr.tokens.end());
      CHECK_FALSE(has_repeated_ngram(all, 2));
    }
  }
}

TEST_CASE("sampling") {
  DecodeConfig dc;
  dc.mode = DecodeMode::sampled;

  SUBCASE("near-zero temperature picks the argmax") {
    dc.temperature = 1e-4;
    Rng rng(1);
    const std::vector<float> z{0.1f, 0.3f, 0.29f, -1.0f};
    for (int i = 0; i < 200; ++i) {
      CHECK(sample_step(z, dc, rng) == 1);
    }
  }
  SUBCASE("tiny nucleus is deterministic") {
    dc.top_p = 1e-6;
    Rng rng(2);
    const std::vector<float> z{0.0f, 0.2f, 0.1f, 0.15f};
    for (int i = 0; i < 200; ++i) {
      CHECK(sample_step(z, dc, rng) == 1);
    }
  }
  SUBCASE("uniform logits sample uniformly") {
    Rng rng(3);
    const std::vector<float> z(4, 0.0f);
    std::array<int, 4> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      ++counts[static_cast<std::size_t>(sample_step(z, dc, rng))];
    }
    for (int c : counts) {
      CHECK(std::abs(c / static_cast<double>(n) - 0.25) <= 0.01);
    }
  }
  SUBCASE("all logits banned is an error") {
    Rng rng(4);
    const std::vector<float> z(4, -std::numeric_limits<float>::infinity());
    CHECK_THROWS(sample_step(z, dc, rng));
  }
}

TEST_CASE("input gradient of a composite model loss matches finite differences") {
  const auto cfg = small_config();
  const auto p = lively_params(cfg, 15).cast<double>();
  const Matrix<double> x = random_prefix(cfg, 16).cast<double>();
  const std::vector<TokenId> tokens{1, 5, 7};
  auto f = [&](Tape<double> &t, Var<double> xv) {
    auto bound = bind(t, p, false);
    auto out = forward(t, bound, cfg, xv, tokens);
    auto probs = softmax_rows(out.logits);
    Var<double> loss = mean(slice_cols(probs, 0, 1));
    for (const auto &h : out.hidden) {
      loss = add(loss, scale(mean(row_l2norm(h)), 0.01));
    }
    return loss;
  };
  auto r = finite_difference_check(f, x, 1e-5);
  INFO("analytic " << r.analytic_at_worst << " numeric " << r.numeric_at_worst);
  CHECK(r.max_relative_error < 1e-3);
}

TEST_CASE("training memorizes a single example") {
  const auto cfg = small_config();
  auto p = init_params(cfg, 17);
  const std::vector<TokenId> prompt{1, 2};
  const TrainingExample ex{random_prefix(cfg, 18), {5, 7, 9, 4, 0}};
  AdamConfig ac;
  ac.learning_rate = 1e-2;
  Trainer trainer(p, ac);
  const double first = trainer.train_step(p, std::span(&ex, 1), prompt);
  double last = first;
  for (int i = 0; i < 150; ++i) {
    last = trainer.train_step(p, std::span(&ex, 1), prompt);
  }
  CHECK(last < 0.1 * first);
  CHECK(p.all_finite());
  auto tr = generate(p, ex.prefix, prompt, DecodeConfig{});
  CHECK(tr.tokens == ex.tokens);
}
