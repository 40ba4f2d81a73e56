// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sponge/attack.hpp"

#include "sponge/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace sponge {

namespace {
constexpr std::array<std::string_view, 5> kVariantNames{"lingoloop", "uniform_eos", "lps_only", "rep_only", "noise"};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}
}  // namespace

std::string_view to_string(Variant v) { return kVariantNames.at(static_cast<std::size_t>(v)); }

Variant parse_variant(std::string_view name) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i) {
    if (kVariantNames[i] == name) {
      return kAllVariants[i];
    }
  }
  throw std::invalid_argument("unknown variant '" + std::string(name) + "'");
}

ObjectiveConfig variant_objective(Variant v, ObjectiveConfig base) {
  switch (v) {
    case Variant::lingoloop:
      return base;
    case Variant::uniform_eos:
      base.uniform_weights = true;
      base.lambda_rep = 0.0;
      return base;
    case Variant::lps_only:
      base.uniform_weights = false;
      base.lambda_rep = 0.0;
      return base;
    case Variant::rep_only:
      base.alpha = 0.0;
      return base;
    case Variant::noise:
      break;
  }
  throw std::invalid_argument("variant '" + std::string(to_string(v)) + "' has no objective");
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw std::invalid_argument("attack: epsilon must be > 0");
  }
  if (!(step_size > 0.0) || !std::isfinite(step_size)) {
    throw std::invalid_argument("attack: step_size must be > 0");
  }
  if (!(momentum >= 0.0)) {
    throw std::invalid_argument("attack: momentum must be >= 0");
  }
  if (iterations < 1) {
    throw std::invalid_argument("attack: iterations must be >= 1");
  }
  if (max_new_tokens < 1) {
    throw std::invalid_argument("attack: max_new_tokens must be >= 1");
  }
}

DecodeConfig attack_decode_config(const AttackConfig &cfg) {
  DecodeConfig dc;
  dc.mode = DecodeMode::greedy;
  dc.max_new_tokens = cfg.max_new_tokens;
  return dc;
}

Matrix<float> project_linf(const Matrix<float> &x, const Matrix<float> &candidate, double epsilon) {
  if (x.rows() != candidate.rows() || x.cols() != candidate.cols()) {
    throw_shape_mismatch("project_linf", x.rows(), x.cols(), candidate.rows(), candidate.cols());
  }
  const float inf = std::numeric_limits<float>::infinity();
  Matrix<float> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const float c = x.data()[i];
    float hi = static_cast<float>(static_cast<double>(c) + epsilon);
    while (static_cast<double>(hi) - static_cast<double>(c) > epsilon) {
      hi = std::nextafter(hi, -inf);
    }
    float lo = static_cast<float>(static_cast<double>(c) - epsilon);
    while (static_cast<double>(c) - static_cast<double>(lo) > epsilon) {
      lo = std::nextafter(lo, inf);
    }
    out.data()[i] = std::clamp(candidate.data()[i], lo, hi);
  }
  return out;
}

double linf_distance(const Matrix<float> &x, const Matrix<float> &y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw_shape_mismatch("linf_distance", x.rows(), x.cols(), y.rows(), y.cols());
  }
  double m = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(y.data()[i]) - static_cast<double>(x.data()[i])));
  }
  return m;
}

Matrix<float> baseline_noise(const Matrix<float> &x, double epsilon, std::uint64_t seed) {
  if (!(epsilon >= 0.0)) {
    throw std::invalid_argument("baseline_noise: epsilon must be >= 0");
  }
  Rng rng(seed);
  Matrix<float> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    out.data()[i] = static_cast<float>(static_cast<double>(x.data()[i]) + rng.uniform(-epsilon, epsilon));
  }
  return project_linf(x, out, epsilon);
}

PerturbationState init_perturbation(const Matrix<float> &x, double epsilon, std::uint64_t seed) {
  PerturbationState s;
  s.clean = x;
  s.current = baseline_noise(x, epsilon, seed);
  s.momentum = Matrix<float>::Zero(x.rows(), x.cols());
  return s;
}

IterationRecord attack_step(PerturbationState &state, const AttackContext &ctx, const ObjectiveConfig &obj,
                            const AttackConfig &cfg, AttackTiming *timing) {
  const int t = state.t + 1;
  IterationRecord rec;
  rec.iteration = t;

  auto start = std::chrono::steady_clock::now();
  const GenerationTrace trace = generate(ctx.params, state.current, ctx.prompt, attack_decode_config(cfg));
  if (timing) {
    timing->decode_seconds += seconds_since(start);
  }
  rec.n_out = trace.n_out();
  state.t = t;
  rec.reached_cap = rec.n_out >= cfg.max_new_tokens;
  if (rec.reached_cap && cfg.early_stop) {
    rec.linf_distance = linf_distance(state.clean, state.current);
    return rec;
  }

  start = std::chrono::steady_clock::now();
  const auto weights = step_weights(ctx.vocab, ctx.prompt, trace.tokens, ctx.pool, obj);
  auto g = objective_gradient(ctx.params, state.current, ctx.prompt, trace.tokens, weights, state.weights, t, obj);
  if (!g.grad.allFinite()) {
    throw std::runtime_error("attack_step: non-finite gradient at iteration " + std::to_string(t));
  }
  if (cfg.normalize_gradient) {
    const float l1 = g.grad.cwiseAbs().mean();
    if (l1 > 0.0f) {
      g.grad /= l1;
    }
  }
  state.momentum = static_cast<float>(cfg.momentum) * state.momentum + g.grad;
  const Matrix<float> stepped =
      state.current - static_cast<float>(cfg.step_size) * state.momentum.unaryExpr([](float v) {
        return static_cast<float>((v > 0.0f) - (v < 0.0f));
      });
  state.current = project_linf(state.clean, stepped, cfg.epsilon);
  if (timing) {
    timing->gradient_seconds += seconds_since(start);
  }
  rec.loss = std::move(g.breakdown);
  rec.linf_distance = linf_distance(state.clean, state.current);
  return rec;
}

AttackResult run_attack(const Matrix<float> &x, const AttackContext &ctx, const ObjectiveConfig &obj,
                        const AttackConfig &cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  AttackResult result;
  if (cfg.variant == Variant::noise) {
    result.adversarial = baseline_noise(x, cfg.epsilon, cfg.seed);
    result.stop_reason = "single uniform draw";
  } else {
    const ObjectiveConfig vobj = variant_objective(cfg.variant, obj);
    vobj.validate();
    PerturbationState state = init_perturbation(x, cfg.epsilon, cfg.seed);
    result.stop_reason = "iteration budget exhausted";
    for (int i = 0; i < cfg.iterations; ++i) {
      auto rec = attack_step(state, ctx, vobj, cfg, &result.timing);
      const bool stop = rec.reached_cap && cfg.early_stop;
      result.log.push_back(std::move(rec));
      if (stop) {
        result.stop_reason = "reached max_new_tokens";
        break;
      }
    }
    result.adversarial = state.current;
  }
  const auto dstart = std::chrono::steady_clock::now();
  result.final_trace = generate(ctx.params, result.adversarial, ctx.prompt, attack_decode_config(cfg));
  result.timing.decode_seconds += seconds_since(dstart);
  result.timing.total_seconds = seconds_since(start);
  return result;
}

}  // namespace sponge
