// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "sponge/attack.hpp"
#include "sponge/random.hpp"

#include <cmath>

using namespace sponge;

namespace {

struct Fixture {
  Vocabulary vocab = make_caption_vocabulary();
  ModelParams<float> params;
  WeightPool pool;
  Matrix<float> x;

  Fixture() {
    ModelConfig cfg;
    cfg.max_context = 64;
    params = init_params(cfg, 8);
    params.for_each([](const std::string &name, Matrix<float> &m) {
      if (name.find("gain") == std::string::npos && name.find("bias") == std::string::npos) {
        m *= 10.0f;
      }
    });
    for (PosTag t : kAllPosTags) {
      pool[t] = {1e-3, 5, 0.1};
    }
    pool[PosTag::PUNCT_SENT].mean_eos_prob = 0.4;
    Rng rng(9);
    x.resize(cfg.prefix_len, cfg.hidden_dim);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x.data()[i] = static_cast<float>(rng.normal());
    }
  }

  AttackContext ctx() const { return {params, vocab, vocab.prompt(), pool}; }
};

AttackConfig small_attack() {
  AttackConfig cfg;
  cfg.iterations = 4;
  cfg.max_new_tokens = 24;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("projection examples") {
  Matrix<float> x = Matrix<float>::Zero(1, 3);
  Matrix<float> c(1, 3);
  c << 0.9f, -0.2f, -3.0f;
  const auto p = project_linf(x, c, 0.5);
  CHECK(p(0, 0) == 0.5f);
  CHECK(p(0, 1) == -0.2f);
  CHECK(p(0, 2) == -0.5f);
  CHECK(project_linf(x, p, 0.5) == p);
  CHECK_THROWS(project_linf(x, Matrix<float>::Zero(2, 3), 0.5));
}

TEST_CASE("projection is exact and idempotent on awkward values") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const double eps = rng.uniform(1e-3, 2.0);
    Matrix<float> x(3, 7), c(3, 7);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x.data()[i] = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform(-3, 3)));
      c.data()[i] = static_cast<float>(x.data()[i] + rng.normal() * 3.0 * eps);
    }
    const auto p = project_linf(x, c, eps);
    CHECK(linf_distance(x, p) <= eps);
    CHECK(project_linf(x, p, eps) == p);
  }
}

TEST_CASE("initial perturbation and noise baseline") {
  const Fixture f;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto s = init_perturbation(f.x, 0.5, seed);
    REQUIRE(linf_distance(f.x, s.current) <= 0.5);
  }
  const auto a = init_perturbation(f.x, 0.5, 77);
  const auto b = init_perturbation(f.x, 0.5, 77);
  CHECK(a.current == b.current);
  CHECK(a.momentum.cwiseAbs().maxCoeff() == 0.0f);
  CHECK(a.t == 0);
  CHECK(init_perturbation(f.x, 0.5, 78).current != a.current);
  CHECK(baseline_noise(f.x, 0.0, 5) == f.x);
  CHECK(baseline_noise(f.x, 0.5, 77) == a.current);
  CHECK_THROWS(baseline_noise(f.x, -1.0, 5));
}

TEST_CASE("signed step of size epsilon lands on the ball boundary") {
  const Fixture f;
  AttackConfig cfg = small_attack();
  cfg.momentum = 0.0;
  cfg.step_size = cfg.epsilon;
  cfg.early_stop = false;
  PerturbationState s = init_perturbation(f.x, cfg.epsilon, 1);
  s.current = f.x;
  const auto rec = attack_step(s, f.ctx(), ObjectiveConfig{}, cfg);
  REQUIRE(rec.loss.has_value());
  int moved = 0;
  for (Eigen::Index i = 0; i < f.x.size(); ++i) {
    if (s.momentum.data()[i] != 0.0f) {
      ++moved;
      const double d = std::abs(static_cast<double>(s.current.data()[i]) - f.x.data()[i]);
      CHECK(d <= cfg.epsilon);
      CHECK(d >= cfg.epsilon - 1e-6);
    }
  }
  CHECK(moved > 0);
  CHECK(rec.linf_distance <= cfg.epsilon);
}

TEST_CASE("zero gradient keeps the momentum and drifts until clamped") {
  const Fixture f;
  AttackConfig cfg = small_attack();
  cfg.momentum = 1.0;
  cfg.step_size = 0.2;
  cfg.early_stop = false;
  ObjectiveConfig obj;
  obj.alpha = 0.0;
  obj.lambda_rep = 0.0;
  PerturbationState s = init_perturbation(f.x, cfg.epsilon, 1);
  s.current = f.x;
  s.momentum = Matrix<float>::Ones(f.x.rows(), f.x.cols());
  s.momentum(0, 0) = -1.0f;
  const Matrix<float> g0 = s.momentum;
  attack_step(s, f.ctx(), obj, cfg);
  CHECK(s.momentum == g0);
  CHECK(s.current(0, 0) == doctest::Approx(f.x(0, 0) + 0.2));
  CHECK(s.current(1, 1) == doctest::Approx(f.x(1, 1) - 0.2));
  attack_step(s, f.ctx(), obj, cfg);
  attack_step(s, f.ctx(), obj, cfg);
  CHECK(s.momentum == g0);
  CHECK(s.t == 3);
  CHECK(linf_distance(f.x, s.current) <= cfg.epsilon);
  CHECK(std::abs(s.current(1, 1) - f.x(1, 1)) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("one-iteration run equals a single step") {
  const Fixture f;
  AttackConfig cfg = small_attack();
  cfg.iterations = 1;
  const auto r = run_attack(f.x, f.ctx(), ObjectiveConfig{}, cfg);
  PerturbationState s = init_perturbation(f.x, cfg.epsilon, cfg.seed);
  const auto rec = attack_step(s, f.ctx(), variant_objective(cfg.variant, ObjectiveConfig{}), cfg);
  REQUIRE(r.log.size() == 1);
  CHECK(r.adversarial == s.current);
  CHECK(r.log[0].n_out == rec.n_out);
  CHECK(r.final_trace.tokens == generate(f.params, s.current, f.vocab.prompt(), attack_decode_config(cfg)).tokens);
}

TEST_CASE("early exit when the first decode already reaches the cap") {
  const Fixture f;
  AttackConfig cfg = small_attack();
  const PerturbationState s0 = init_perturbation(f.x, cfg.epsilon, cfg.seed);
  const int natural = generate(f.params, s0.current, f.vocab.prompt(), attack_decode_config(cfg)).n_out();
  REQUIRE(natural >= 2);
  cfg.max_new_tokens = 2;
  const auto r = run_attack(f.x, f.ctx(), ObjectiveConfig{}, cfg);
  REQUIRE(r.log.size() == 1);
  CHECK_FALSE(r.log[0].loss.has_value());
  CHECK(r.log[0].reached_cap);
  CHECK(r.adversarial == s0.current);
  CHECK(r.stop_reason == "reached max_new_tokens");

  cfg.early_stop = false;
  const auto full = run_attack(f.x, f.ctx(), ObjectiveConfig{}, cfg);
  CHECK(full.log.size() == static_cast<std::size_t>(cfg.iterations));
  for (const auto &rec : full.log) {
    CHECK(rec.loss.has_value());
  }
}

TEST_CASE("attacks are deterministic and stay inside the ball") {
  const Fixture f;
  for (Variant v : kAllVariants) {
    AttackConfig cfg = small_attack();
    cfg.variant = v;
    const auto a = run_attack(f.x, f.ctx(), ObjectiveConfig{}, cfg);
    const auto b = run_attack(f.x, f.ctx(), ObjectiveConfig{}, cfg);
    CHECK(a.adversarial == b.adversarial);
    CHECK(a.final_trace.tokens == b.final_trace.tokens);
    CHECK(linf_distance(f.x, a.adversarial) <= cfg.epsilon);
    CHECK(a.log.size() <= static_cast<std::size_t>(cfg.iterations));
    for (std::size_t i = 0; i < a.log.size(); ++i) {
      CHECK(a.log[i].linf_distance <= cfg.epsilon);
      if (a.log[i].reached_cap) {
        CHECK(i + 1 == a.log.size());
      }
    }
    if (v == Variant::noise) {
      CHECK(a.log.empty());
      CHECK(a.stop_reason == "single uniform draw");
    }
  }
}

TEST_CASE("variant names round-trip") {
  for (Variant v : kAllVariants) {
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK_THROWS(parse_variant("loop"));
}

TEST_CASE("attack config validation") {
  AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.epsilon = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.iterations = 0;
  CHECK_THROWS(cfg.validate());
  cfg = {};
  cfg.momentum = -1.0;
  CHECK_THROWS(cfg.validate());
}
