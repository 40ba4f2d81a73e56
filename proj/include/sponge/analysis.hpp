// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sponge/model.hpp"

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace sponge {

inline constexpr int kMaxReportedNgram = 8;

struct RepetitionReport {
  /// max_repeat[n - 1]: occurrences (overlapping) of the most frequent
  /// n-gram; 0 when the text is shorter than n.
  std::array<int, kMaxReportedNgram> max_repeat{};
  /// Smallest p whose last 3p tokens are p-periodic; 0 if none.
  int loop_period = 0;
  /// Share of positions covered by an n-gram (3 <= n <= 8) that occurs at
  /// least 3 times.
  double repetition_fraction = 0.0;

  int max_count(int n) const;
};

RepetitionReport repetition_report(std::span<const TokenId> tokens);

struct NormStats {
  double mean = 0.0;
  double variance = 0.0;
};

/// Mean and population variance over output tokens of the layer-averaged
/// hidden norm.
NormStats norm_stats(const GenerationTrace &trace);

/// Per-trace monitor statistic: the mean over tokens of the layer-averaged
/// norm (tokens averaged after layers).
double monitor_statistic(const GenerationTrace &trace);

struct MonitorBaseline {
  double mu = 0.0;
  /// Population standard deviation.
  double sigma = 0.0;
  std::size_t count = 0;
};

struct DefenseVerdict {
  bool flagged = false;
  std::string rule;
  double statistic = 0.0;
};

MonitorBaseline norm_monitor_baseline(std::span<const double> statistics);
MonitorBaseline norm_monitor_baseline(std::span<const GenerationTrace> clean);

/// Flags when the statistic falls strictly below mu - n_sigma * sigma.
DefenseVerdict norm_monitor(const MonitorBaseline &baseline, double statistic, double n_sigma);
DefenseVerdict norm_monitor(const MonitorBaseline &baseline, const GenerationTrace &trace, double n_sigma);

/// Flags when the most frequent n-gram occurs more than `threshold` times.
DefenseVerdict ngram_filter(const RepetitionReport &report, int n,
                            double threshold = 5.0);

struct DetectionRates {
  double tpr = 0.0;
  double fpr = 0.0;
};

DetectionRates detection_rates(std::span<const DefenseVerdict> attacked, std::span<const DefenseVerdict> clean);

struct MixingRow {
  int m_adv = 0;
  double norm_mean = 0.0;
  double norm_variance = 0.0;
  double mean_n_out = 0.0;
  double mean_repetition_fraction = 0.0;
};

/// Batch statistics for already-decoded traces: per-input NormStats are
/// averaged over the batch.
MixingRow batch_statistics(std::span<const GenerationTrace *const> batch, int m_adv);

/// For each M in `sweep`, decodes a batch of B inputs whose first M are the
/// adversarial versions and the rest clean, and summarizes it.
std::vector<MixingRow> batch_mixing_experiment(const ModelParams<float> &params, std::span<const TokenId> prompt,
                                               std::span<const Matrix<float>> clean,
                                               std::span<const Matrix<float>> adversarial, int batch_size,
                                               std::span<const int> sweep, const DecodeConfig &cfg);

struct ResourceProxy {
  int n_out = 0;
  int decode_steps = 0;
  /// Multiply-accumulates for the prefix and prompt positions.
  double mac_prefill = 0.0;
  /// Multiply-accumulates for positions fed back during generation.
  double mac_decode = 0.0;
  double mac_total = 0.0;
  double wall_seconds = 0.0;
};

/// Forward cost of one position attending over `context` positions.
double position_macs(const ModelConfig &cfg, int context);

ResourceProxy resource_proxy(const ModelConfig &cfg, int prompt_len, int n_out, double wall_seconds = 0.0);

// ---------------------------------------------------------------------------
// Statistics helpers
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

/// Fraction of paired bootstrap resamples whose mean difference a - b is
/// >= 0 (or > 0 when `strict`).
double paired_bootstrap_confidence(std::span<const double> a, std::span<const double> b, int resamples,
                                   std::uint64_t seed, bool strict);

double mean_of(std::span<const double> v);
double median_of(std::vector<double> v);

}  // namespace sponge
