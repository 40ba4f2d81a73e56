// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "sponge/attack.hpp"
#include "sponge/objective.hpp"
#include "sponge/random.hpp"

#include <cmath>

using namespace sponge;

namespace {

Var<double> column(Tape<double> &tape, std::vector<double> v) {
  Matrix<double> m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) {
    m(static_cast<Eigen::Index>(i), 0) = v[i];
  }
  return tape.variable(m);
}

ModelParams<double> lively_params(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.max_context = 40;
  auto p = init_params(cfg, seed);
  p.for_each([](const std::string &name, Matrix<float> &m) {
    if (name.find("gain") == std::string::npos && name.find("bias") == std::string::npos) {
      m *= 10.0f;
    }
  });
  return p.cast<double>();
}

Matrix<double> random_prefix(const ModelConfig &cfg, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<double> x(cfg.prefix_len, cfg.hidden_dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = rng.normal();
  }
  return x;
}

WeightPool test_pool() {
  WeightPool pool;
  for (PosTag t : kAllPosTags) {
    pool[t] = {1e-4 * (1 + static_cast<int>(t)), 10, 0.1};
  }
  pool[PosTag::PUNCT_SENT].mean_eos_prob = 0.5;
  return pool;
}

}  // namespace

TEST_CASE("lps loss is a weighted mean of EOS probabilities") {
  Tape<double> tape;
  const std::vector<double> ones{1.0, 1.0};
  CHECK(lps_loss(column(tape, {0.2, 0.4}), ones).value()(0, 0) == doctest::Approx(0.3).epsilon(1e-15));
  const std::vector<double> w{2.0, 0.0};
  CHECK(lps_loss(column(tape, {0.5, 0.9}), w).value()(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS(lps_loss(column(tape, {0.5}), w));
  CHECK_THROWS(lps_loss(tape.variable(Matrix<double>(0, 1)), std::span<const double>{}));
}

TEST_CASE("rep loss") {
  Tape<double> tape;
  Matrix<double> h1(1, 2), h2(1, 2);
  h1 << 3.0, 0.0;
  h2 << 3.0, 4.0;
  std::vector<Var<double>> hidden{tape.variable(h1), tape.variable(h2)};
  CHECK(rep_loss<double>(hidden, 0.5).value()(0, 0) == doctest::Approx(2.0).epsilon(1e-15));

  SUBCASE("zero strength gives zero loss and gradient") {
    auto loss = rep_loss<double>(hidden, 0.0);
    CHECK(loss.value()(0, 0) == 0.0);
    tape.backward(loss);
    CHECK(tape.grad(hidden[1]).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("linear in strength") {
    Tape<double> a, b;
    auto ha = a.variable(h2), hb = b.variable(h2);
    std::vector<Var<double>> va{ha}, vb{hb};
    auto la = rep_loss<double>(va, 0.3), lb = rep_loss<double>(vb, 0.6);
    CHECK(lb.value()(0, 0) == 2.0 * la.value()(0, 0));
    a.backward(la);
    b.backward(lb);
    CHECK((b.grad(hb) - 2.0 * a.grad(ha)).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK_THROWS(rep_loss<double>(std::span<const Var<double>>{}, 0.5));
}

TEST_CASE("dynamic lambda") {
  ObjectiveConfig cfg;
  cfg.lambda_ema = 0.0;
  DynamicWeightState st;

  SUBCASE("decay is clamped at the floor for small t") {
    CHECK(decay(1, cfg) == 1.0);
    st.lps_magnitude = 2.0;
    st.rep_magnitude = 1.0;
    CHECK(dynamic_lambda(st, 1, cfg) == 2.0);
  }
  SUBCASE("t = 10") {
    st.lps_magnitude = 3.0;
    st.rep_magnitude = 1.0;
    CHECK(dynamic_lambda(st, 10, cfg) == doctest::Approx(0.9914566412757917).epsilon(1e-12));
  }
  SUBCASE("ema smooths from the second call") {
    cfg.lambda_ema = 0.9;
    st.lps_magnitude = 2.0;
    st.rep_magnitude = 1.0;
    CHECK(dynamic_lambda(st, 1, cfg) == 2.0);
    st.lps_magnitude = 12.0;
    CHECK(dynamic_lambda(st, 1, cfg) == doctest::Approx(0.9 * 2.0 + 0.1 * 12.0));
  }
  SUBCASE("positive and non-increasing in t once past the floor") {
    st.lps_magnitude = 0.0;
    st.rep_magnitude = 0.0;
    CHECK(dynamic_lambda(st, 5, cfg) > 0.0);
    st = {};
    st.lps_magnitude = 1.0;
    st.rep_magnitude = 0.25;
    double prev = std::numeric_limits<double>::infinity();
    for (int t = 1; t <= 300; ++t) {
      DynamicWeightState fresh = st;
      const double l = dynamic_lambda(fresh, t, cfg);
      CHECK(l > 0.0);
      CHECK(l <= prev);
      prev = l;
    }
  }
  CHECK_THROWS(decay(0, cfg));
}

TEST_CASE("step weights follow the predecessor tag") {
  const auto vocab = make_caption_vocabulary();
  const WeightPool pool = test_pool();
  ObjectiveConfig cfg;
  const std::vector<TokenId> gen{vocab.id_of("a"), vocab.id_of("dog"), vocab.id_of("."), vocab.eos()};
  const auto w = step_weights(vocab, vocab.prompt(), gen, pool, cfg);
  REQUIRE(w.size() == 4);
  CHECK(w[0] == weight_of(pool, PosTag::PUNCT_OTHER, cfg.theta_w));
  CHECK(w[1] == weight_of(pool, PosTag::DET, cfg.theta_w));
  CHECK(w[2] == weight_of(pool, PosTag::NOUN, cfg.theta_w));
  CHECK(w[3] == weight_of(pool, PosTag::PUNCT_SENT, cfg.theta_w));
  cfg.uniform_weights = true;
  for (double v : step_weights(vocab, vocab.prompt(), gen, pool, cfg)) {
    CHECK(v == 1.0);
  }
}

TEST_CASE("total loss composition") {
  const auto vocab = make_caption_vocabulary();
  const auto params = lively_params(3);
  const WeightPool pool = test_pool();
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<TokenId> gen;
    for (int i = 0; i < 6; ++i) {
      gen.push_back(static_cast<TokenId>(1 + rng.below(63)));
    }
    ObjectiveConfig cfg;
    const auto weights = step_weights(vocab, vocab.prompt(), gen, pool, cfg);
    const Matrix<double> x = random_prefix(params.config, 100 + trial);
    auto run = [&](const ObjectiveConfig &c) {
      Tape<double> tape;
      auto bp = bind(tape, params, false);
      auto tf = teacher_force(tape, bp, params.config, tape.constant(x), vocab.prompt(), gen);
      DynamicWeightState st;
      return total_loss(tf, weights, st, 1 + trial * 7, c).breakdown;
    };
    const auto b = run(cfg);
    CHECK(std::abs(b.total - (cfg.alpha * b.l_lps + b.lambda_t * b.l_rep)) <= 1e-6);
    CHECK(b.weights.size() == gen.size());
    CHECK(b.token_norms.size() == gen.size());

    ObjectiveConfig no_lps = cfg;
    no_lps.alpha = 0.0;
    const auto r = run(no_lps);
    CHECK(r.total == doctest::Approx(r.lambda_t * r.l_rep).epsilon(1e-12));

    ObjectiveConfig no_rep = cfg;
    no_rep.lambda_rep = 0.0;
    const auto l = run(no_rep);
    CHECK(l.l_rep == 0.0);
    CHECK(l.total == doctest::Approx(cfg.alpha * l.l_lps).epsilon(1e-12));
  }
}

TEST_CASE("weights ignore EOS probabilities") {
  const auto vocab = make_caption_vocabulary();
  const WeightPool pool = test_pool();
  const std::vector<TokenId> gen{vocab.id_of("the"), vocab.id_of("red"), vocab.id_of("cat")};
  const auto w = step_weights(vocab, vocab.prompt(), gen, pool, ObjectiveConfig{});
  Tape<double> tape;
  const double a = lps_loss(column(tape, {0.1, 0.2, 0.3}), w).value()(0, 0);
  const double b = lps_loss(column(tape, {0.3, 0.1, 0.2}), w).value()(0, 0);
  CHECK(w == step_weights(vocab, vocab.prompt(), gen, pool, ObjectiveConfig{}));
  CHECK(a != b);
}

TEST_CASE("prefix gradients of each loss match finite differences") {
  const auto vocab = make_caption_vocabulary();
  const auto params = lively_params(11);
  const WeightPool pool = test_pool();
  const std::vector<TokenId> gen{vocab.id_of("a"), vocab.id_of("small"), vocab.id_of("dog"), vocab.id_of("runs"),
                                 vocab.id_of(".")};
  ObjectiveConfig cfg;
  const auto weights = step_weights(vocab, vocab.prompt(), gen, pool, cfg);
  const Matrix<double> x = random_prefix(params.config, 21);
  for (int which = 0; which < 3; ++which) {
    auto f = [&](Tape<double> &tape, Var<double> xv) {
      auto bp = bind(tape, params, false);
      auto tf = teacher_force(tape, bp, params.config, xv, vocab.prompt(), gen);
      auto lps = lps_loss(tf.eos_probs, weights);
      auto rep = rep_loss<double>(tf.hidden, cfg.lambda_rep);
      return which == 0 ? lps : which == 1 ? rep : add(scale(lps, cfg.alpha), scale(rep, 0.37));
    };
    const auto r = finite_difference_check(f, x, 1e-6);
    INFO("loss " << which << " analytic " << r.analytic_at_worst << " numeric " << r.numeric_at_worst);
    CHECK(r.max_relative_error < 1e-3);
  }
}

TEST_CASE("float objective gradient agrees with the double tape") {
  const auto vocab = make_caption_vocabulary();
  const auto pd = lively_params(12);
  const auto pf = pd.cast<float>();
  const WeightPool pool = test_pool();
  const std::vector<TokenId> gen{vocab.id_of("the"), vocab.id_of("cat"), vocab.id_of("sits"), vocab.id_of("!")};
  ObjectiveConfig cfg;
  const auto weights = step_weights(vocab, vocab.prompt(), gen, pool, cfg);
  const Matrix<double> x = random_prefix(pd.config, 22);
  DynamicWeightState sf;
  const auto g = objective_gradient(pf, x.cast<float>(), vocab.prompt(), gen, weights, sf, 3, cfg);

  Tape<double> tape;
  auto bp = bind(tape, pd, false);
  auto xv = tape.variable(x);
  auto tf = teacher_force(tape, bp, pd.config, xv, vocab.prompt(), gen);
  DynamicWeightState sd;
  auto terms = total_loss(tf, weights, sd, 3, cfg);
  tape.backward(terms.total);
  const Matrix<double> ref = tape.grad(xv);
  const double rel = (g.grad.cast<double>() - ref).norm() / ref.norm();
  CHECK(rel < 1e-3);
  CHECK(g.breakdown.lambda_t == doctest::Approx(terms.breakdown.lambda_t).epsilon(1e-4));
}

TEST_CASE("variant objectives") {
  ObjectiveConfig base;
  const auto u = variant_objective(Variant::uniform_eos, base);
  CHECK(u.uniform_weights);
  CHECK(u.lambda_rep == 0.0);
  const auto l = variant_objective(Variant::lps_only, base);
  CHECK_FALSE(l.uniform_weights);
  CHECK(l.lambda_rep == 0.0);
  const auto r = variant_objective(Variant::rep_only, base);
  CHECK(r.alpha == 0.0);
  CHECK(r.lambda_rep == base.lambda_rep);
  const auto full = variant_objective(Variant::lingoloop, base);
  CHECK(full.alpha == base.alpha);
  CHECK(full.lambda_rep == base.lambda_rep);
  CHECK_THROWS(variant_objective(Variant::noise, base));
}

TEST_CASE("objective config validation") {
  ObjectiveConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda_ema = 1.0;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.lambda_rep = -0.1;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.decay_floor = 0.0;
  CHECK_THROWS(cfg.validate());
}
