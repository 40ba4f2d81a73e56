// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sponge/autodiff.hpp"
#include "sponge/linguistics.hpp"
#include "sponge/model.hpp"

#include <span>
#include <vector>

namespace sponge {

struct ObjectiveConfig {
  /// Scale on the EOS-suppression term.
  double alpha = 1.0;
  /// Strength of the hidden-norm term.
  double lambda_rep = 0.5;
  /// Decay T(t) = decay_a * ln(t) + decay_b, clamped below at decay_floor.
  double decay_a = 10.0;
  double decay_b = -20.0;
  double decay_floor = 1.0;
  /// EMA coefficient on lambda(t); 0 disables smoothing.
  double lambda_ema = 0.9;
  double theta_w = 1e5;
  double stability_eps = kWeightStabilityEps;
  /// Every step weight is 1 instead of the pool weight.
  bool uniform_weights = false;
  /// Use alpha * |L_lps| instead of |L_lps| in the lambda ratio.
  bool ratio_uses_scaled_lps = false;

  void validate() const;
};

/// Loss magnitudes carried between attack iterations.
struct DynamicWeightState {
  double lps_magnitude = 0.0;
  double rep_magnitude = 0.0;
  double lambda = 0.0;
  bool initialized = false;
};

struct LossBreakdown {
  double l_lps = 0.0;
  double l_rep = 0.0;
  double lambda_t = 0.0;
  double total = 0.0;
  std::vector<double> weights;
  std::vector<double> token_norms;
};

inline constexpr double kMinLambda = 1e-30;

/// w_i for every generated step: the weight of the tag of y_{i-1}, with the
/// last prompt token standing in for y_0.
std::vector<double> step_weights(const Vocabulary &vocab, std::span<const TokenId> prompt,
                                 std::span<const TokenId> generated, const WeightPool &pool,
                                 const ObjectiveConfig &cfg);

/// T(t) clamped at the floor.
double decay(int t, const ObjectiveConfig &cfg);

/// Updates `state.lambda` from the magnitudes currently held in `state`
/// and returns it.
double dynamic_lambda(DynamicWeightState &state, int t, const ObjectiveConfig &cfg);

/// (1/N) sum_i w_i f_i for an N x 1 column of EOS probabilities.
template <typename Scalar>
Var<Scalar> lps_loss(Var<Scalar> eos_probs, std::span<const double> weights) {
  const Eigen::Index n = eos_probs.rows();
  if (n == 0) {
    throw std::invalid_argument("lps_loss: no generated steps");
  }
  if (eos_probs.cols() != 1 || static_cast<Eigen::Index>(weights.size()) != n) {
    throw ShapeError("lps_loss: " + std::to_string(weights.size()) + " weights for EOS column " +
                     shape_string(eos_probs.value()));
  }
  Matrix<Scalar> w(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    w(i, 0) = static_cast<Scalar>(weights[static_cast<std::size_t>(i)]);
  }
  return mean(mul(eos_probs.tape->constant(std::move(w)), eos_probs));
}

/// Layer-averaged L2 norm per output token (N x 1).
template <typename Scalar>
Var<Scalar> token_mean_norms(std::span<const Var<Scalar>> hidden) {
  if (hidden.empty()) {
    throw std::invalid_argument("rep_loss: no hidden states recorded");
  }
  Var<Scalar> acc = row_l2norm(hidden[0]);
  for (std::size_t l = 1; l < hidden.size(); ++l) {
    acc = add(acc, row_l2norm(hidden[l]));
  }
  return scale(acc, Scalar(1) / static_cast<Scalar>(hidden.size()));
}

/// lambda_rep * mean_k rbar_k.
template <typename Scalar>
Var<Scalar> rep_loss(std::span<const Var<Scalar>> hidden, double lambda_rep) {
  Var<Scalar> r = token_mean_norms(hidden);
  if (r.rows() == 0) {
    throw std::invalid_argument("rep_loss: no generated steps");
  }
  return scale(mean(r), static_cast<Scalar>(lambda_rep));
}

/// Differentiable quantities for one decoded sequence, recomputed by
/// teacher forcing over (x', prompt, y).
template <typename Scalar>
struct TeacherForced {
  Var<Scalar> eos_probs;
  std::vector<Var<Scalar>> hidden;
};

template <typename Scalar>
TeacherForced<Scalar> teacher_force(Tape<Scalar> &tape, const BoundParams<Scalar> &params, const ModelConfig &cfg,
                                    Var<Scalar> prefix, std::span<const TokenId> prompt,
                                    std::span<const TokenId> generated) {
  if (prompt.empty()) {
    throw std::invalid_argument("teacher_force: prompt must not be empty");
  }
  if (generated.empty()) {
    throw std::invalid_argument("teacher_force: no generated steps");
  }
  std::vector<TokenId> input(prompt.begin(), prompt.end());
  input.insert(input.end(), generated.begin(), generated.end() - 1);
  auto res = forward(tape, params, cfg, prefix, input);
  const auto first = static_cast<Eigen::Index>(prompt.size()) - 1;
  const auto n = static_cast<Eigen::Index>(generated.size());
  TeacherForced<Scalar> out;
  out.eos_probs = slice_cols(softmax_rows(slice_rows(res.logits, first, n)), cfg.eos_id, 1);
  for (const auto &h : res.hidden) {
    out.hidden.push_back(slice_rows(h, first, n));
  }
  return out;
}

template <typename Scalar>
struct ObjectiveTerms {
  Var<Scalar> lps;
  Var<Scalar> rep;
  Var<Scalar> total;
  LossBreakdown breakdown;
};

/// alpha * L_lps + lambda(t) * L_rep. Stores the magnitudes of this
/// evaluation in `state` and combines them into lambda(t).
template <typename Scalar>
ObjectiveTerms<Scalar> total_loss(const TeacherForced<Scalar> &tf, std::span<const double> weights,
                                  DynamicWeightState &state, int t, const ObjectiveConfig &cfg) {
  ObjectiveTerms<Scalar> out;
  out.lps = lps_loss(tf.eos_probs, weights);
  out.rep = rep_loss<Scalar>(tf.hidden, cfg.lambda_rep);
  const double l_lps = static_cast<double>(out.lps.value()(0, 0));
  const double l_rep = static_cast<double>(out.rep.value()(0, 0));
  state.lps_magnitude = std::abs(cfg.ratio_uses_scaled_lps ? cfg.alpha * l_lps : l_lps);
  state.rep_magnitude = std::abs(l_rep);
  const double lambda = dynamic_lambda(state, t, cfg);
  out.total = add(scale(out.lps, static_cast<Scalar>(cfg.alpha)), scale(out.rep, static_cast<Scalar>(lambda)));

  auto &b = out.breakdown;
  b.l_lps = l_lps;
  b.l_rep = l_rep;
  b.lambda_t = lambda;
  b.total = static_cast<double>(out.total.value()(0, 0));
  b.weights.assign(weights.begin(), weights.end());
  const auto norms = token_mean_norms<Scalar>(tf.hidden).value();
  b.token_norms.resize(static_cast<std::size_t>(norms.rows()));
  for (Eigen::Index k = 0; k < norms.rows(); ++k) {
    b.token_norms[static_cast<std::size_t>(k)] = static_cast<double>(norms(k, 0));
  }
  return out;
}

/// Gradient of the total objective with respect to the prefix, evaluated
/// for an already-decoded sequence.
struct ObjectiveGradient {
  Matrix<float> grad;
  LossBreakdown breakdown;
};

ObjectiveGradient objective_gradient(const ModelParams<float> &params, const Matrix<float> &prefix,
                                     std::span<const TokenId> prompt, std::span<const TokenId> generated,
                                     std::span<const double> weights, DynamicWeightState &state, int t,
                                     const ObjectiveConfig &cfg);

}  // namespace sponge
