// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sponge/linguistics.hpp"
#include "sponge/model.hpp"
#include "sponge/objective.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sponge {

enum class Variant { lingoloop, uniform_eos, lps_only, rep_only, noise };

inline constexpr std::array<Variant, 5> kAllVariants{Variant::lingoloop, Variant::uniform_eos, Variant::lps_only,
                                                     Variant::rep_only, Variant::noise};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

/// Objective used by an optimizing variant. `noise` has none and throws.
ObjectiveConfig variant_objective(Variant v, ObjectiveConfig base);

struct AttackConfig {
  double epsilon = 0.5;
  double step_size = 0.0625;
  double momentum = 1.0;
  int iterations = 300;
  int max_new_tokens = 64;
  std::uint64_t seed = 0;
  Variant variant = Variant::lingoloop;
  /// Divide each gradient by its mean absolute value before accumulating
  /// it into the momentum buffer.
  bool normalize_gradient = false;
  /// Stop as soon as a decode reaches max_new_tokens.
  bool early_stop = true;

  void validate() const;
};

struct PerturbationState {
  Matrix<float> clean;
  Matrix<float> current;
  Matrix<float> momentum;
  /// Iterations completed so far.
  int t = 0;
  DynamicWeightState weights;
};

struct IterationRecord {
  int iteration = 0;
  int n_out = 0;
  /// Absent when the decode already reached the cap and no update ran.
  std::optional<LossBreakdown> loss;
  bool reached_cap = false;
  /// max |x' - x| after this iteration's update.
  double linf_distance = 0.0;
};

struct AttackTiming {
  double decode_seconds = 0.0;
  double gradient_seconds = 0.0;
  double total_seconds = 0.0;
};

struct AttackResult {
  Matrix<float> adversarial;
  std::vector<IterationRecord> log;
  GenerationTrace final_trace;
  std::string stop_reason;
  AttackTiming timing;
};

/// Read-only inputs shared by every iteration of an attack.
struct AttackContext {
  const ModelParams<float> &params;
  const Vocabulary &vocab;
  std::span<const TokenId> prompt;
  const WeightPool &pool;
};

/// x' = clip(x + U(-eps, eps)), g = 0.
PerturbationState init_perturbation(const Matrix<float> &x, double epsilon, std::uint64_t seed);

/// Coordinate-wise clamp into [x - eps, x + eps]. Bounds are tightened by
/// one ulp where float rounding of x +/- eps would leave the ball, so
/// |x' - x| <= eps holds exactly.
Matrix<float> project_linf(const Matrix<float> &x, const Matrix<float> &candidate, double epsilon);

/// Decode at x', stop if the cap is reached, otherwise take one signed
/// momentum step on the teacher-forced objective.
IterationRecord attack_step(PerturbationState &state, const AttackContext &ctx, const ObjectiveConfig &obj,
                            const AttackConfig &cfg, AttackTiming *timing = nullptr);

AttackResult run_attack(const Matrix<float> &x, const AttackContext &ctx, const ObjectiveConfig &obj,
                        const AttackConfig &cfg);

/// max_i |y_i - x_i| evaluated in double.
double linf_distance(const Matrix<float> &x, const Matrix<float> &y);

/// Single uniform draw inside the ball, no optimization.
Matrix<float> baseline_noise(const Matrix<float> &x, double epsilon, std::uint64_t seed);

/// Greedy decode configuration used during attacks.
DecodeConfig attack_decode_config(const AttackConfig &cfg);

}  // namespace sponge
