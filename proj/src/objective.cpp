// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sponge/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sponge {

void ObjectiveConfig::validate() const {
  if (!(lambda_rep >= 0.0)) {
    throw std::invalid_argument("objective: lambda_rep must be >= 0");
  }
  if (!(decay_floor > 0.0)) {
    throw std::invalid_argument("objective: decay_floor must be > 0");
  }
  if (!(lambda_ema >= 0.0 && lambda_ema < 1.0)) {
    throw std::invalid_argument("objective: lambda_ema must lie in [0, 1)");
  }
  if (!(theta_w > 0.0)) {
    throw std::invalid_argument("objective: theta_w must be > 0");
  }
  if (!std::isfinite(alpha) || !std::isfinite(decay_a) || !std::isfinite(decay_b) || !(stability_eps >= 0.0)) {
    throw std::invalid_argument("objective: alpha, decay_a, decay_b must be finite and stability_eps >= 0");
  }
}

std::vector<double> step_weights(const Vocabulary &vocab, std::span<const TokenId> prompt,
                                 std::span<const TokenId> generated, const WeightPool &pool,
                                 const ObjectiveConfig &cfg) {
  if (prompt.empty()) {
    throw std::invalid_argument("step_weights: prompt must not be empty");
  }
  std::vector<double> w(generated.size());
  for (std::size_t i = 0; i < generated.size(); ++i) {
    if (cfg.uniform_weights) {
      w[i] = 1.0;
      continue;
    }
    const TokenId pred = i == 0 ? prompt.back() : generated[i - 1];
    w[i] = weight_of(pool, pos_of(vocab, pred), cfg.theta_w, cfg.stability_eps);
  }
  return w;
}

double decay(int t, const ObjectiveConfig &cfg) {
  if (t < 1) {
    throw std::invalid_argument("decay: iteration must be >= 1");
  }
  return std::max(cfg.decay_a * std::log(static_cast<double>(t)) + cfg.decay_b, cfg.decay_floor);
}

double dynamic_lambda(DynamicWeightState &state, int t, const ObjectiveConfig &cfg) {
  const double raw = (state.lps_magnitude / std::max(state.rep_magnitude, 1e-12)) / decay(t, cfg);
  double lambda = raw;
  if (state.initialized) {
    lambda = cfg.lambda_ema * state.lambda + (1.0 - cfg.lambda_ema) * raw;
  }
  state.lambda = std::max(lambda, kMinLambda);
  state.initialized = true;
  return state.lambda;
}

ObjectiveGradient objective_gradient(const ModelParams<float> &params, const Matrix<float> &prefix,
                                     std::span<const TokenId> prompt, std::span<const TokenId> generated,
                                     std::span<const double> weights, DynamicWeightState &state, int t,
                                     const ObjectiveConfig &cfg) {
  Tape<float> tape;
  const auto bound = bind(tape, params, false);
  Var<float> x = tape.variable(prefix);
  const auto tf = teacher_force(tape, bound, params.config, x, prompt, generated);
  auto terms = total_loss(tf, weights, state, t, cfg);
  tape.backward(terms.total);
  return {tape.grad(x), std::move(terms.breakdown)};
}

}  // namespace sponge
