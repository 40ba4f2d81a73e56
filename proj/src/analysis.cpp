// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sponge/analysis.hpp"

#include "sponge/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string_view>
#include <unordered_map>

namespace sponge {

int RepetitionReport::max_count(int n) const {
  if (n < 1 || n > kMaxReportedNgram) {
    throw std::out_of_range("RepetitionReport: n must lie in [1, 8]");
  }
  return max_repeat[static_cast<std::size_t>(n - 1)];
}

namespace {
std::string_view ngram_key(std::span<const TokenId> tokens, std::size_t start, std::size_t n) {
  return {reinterpret_cast<const char *>(tokens.data() + start), n * sizeof(TokenId)};
}
}  // namespace

RepetitionReport repetition_report(std::span<const TokenId> tokens) {
  if (tokens.empty()) {
    throw std::invalid_argument("repetition_report: empty token list");
  }
  RepetitionReport r;
  const std::size_t len = tokens.size();
  std::vector<char> covered(len, 0);
  std::unordered_map<std::string_view, int> counts;
  for (std::size_t n = 1; n <= kMaxReportedNgram && n <= len; ++n) {
    counts.clear();
    int best = 0;
    for (std::size_t i = 0; i + n <= len; ++i) {
      best = std::max(best, ++counts[ngram_key(tokens, i, n)]);
    }
    r.max_repeat[n - 1] = best;
    if (n >= 3) {
      for (std::size_t i = 0; i + n <= len; ++i) {
        if (counts[ngram_key(tokens, i, n)] >= 3) {
          std::fill(covered.begin() + static_cast<std::ptrdiff_t>(i),
                    covered.begin() + static_cast<std::ptrdiff_t>(i + n), 1);
        }
      }
    }
  }
  r.repetition_fraction =
      static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / static_cast<double>(len);
  for (std::size_t p = 1; 3 * p <= len; ++p) {
    const std::size_t start = len - 3 * p;
    bool periodic = true;
    for (std::size_t i = start; i + p < len && periodic; ++i) {
      periodic = tokens[i] == tokens[i + p];
    }
    if (periodic) {
      r.loop_period = static_cast<int>(p);
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

NormStats norm_stats(const GenerationTrace &trace) {
  const int n = trace.n_out();
  if (n == 0 || trace.hidden_norms.rows() != n) {
    throw std::invalid_argument("norm_stats: trace has no hidden-norm records");
  }
  double sum = 0.0;
  for (int k = 0; k < n; ++k) {
    sum += trace.mean_layer_norm(k);
  }
  NormStats s;
  s.mean = sum / n;
  double sq = 0.0;
  for (int k = 0; k < n; ++k) {
    const double d = trace.mean_layer_norm(k) - s.mean;
    sq += d * d;
  }
  s.variance = sq / n;
  return s;
}

double monitor_statistic(const GenerationTrace &trace) { return norm_stats(trace).mean; }

MonitorBaseline norm_monitor_baseline(std::span<const double> statistics) {
  if (statistics.size() < 2) {
    throw std::invalid_argument("norm_monitor_baseline: need at least 2 clean traces");
  }
  MonitorBaseline b;
  b.count = statistics.size();
  b.mu = mean_of(statistics);
  double sq = 0.0;
  for (double s : statistics) {
    sq += (s - b.mu) * (s - b.mu);
  }
  b.sigma = std::sqrt(sq / static_cast<double>(statistics.size()));
  return b;
}

MonitorBaseline norm_monitor_baseline(std::span<const GenerationTrace> clean) {
  std::vector<double> stats;
  stats.reserve(clean.size());
  for (const auto &tr : clean) {
    stats.push_back(monitor_statistic(tr));
  }
  return norm_monitor_baseline(stats);
}

DefenseVerdict norm_monitor(const MonitorBaseline &baseline, double statistic, double n_sigma) {
  if (!(n_sigma >= 0.0)) {
    throw std::invalid_argument("norm_monitor: N must be >= 0");
  }
  DefenseVerdict v;
  v.rule = "norm_monitor(N=" + std::to_string(n_sigma) + ")";
  v.statistic = statistic;
  v.flagged = statistic < baseline.mu - n_sigma * baseline.sigma;
  return v;
}

DefenseVerdict norm_monitor(const MonitorBaseline &baseline, const GenerationTrace &trace, double n_sigma) {
  return norm_monitor(baseline, monitor_statistic(trace), n_sigma);
}

DefenseVerdict ngram_filter(const RepetitionReport &report, int n, double threshold) {
  if (n < 1) {
    throw std::invalid_argument("ngram_filter: n must be >= 1");
  }
  DefenseVerdict v;
  v.rule = "ngram_filter(n=" + std::to_string(n) + ")";
  v.statistic = n <= kMaxReportedNgram ? report.max_count(n) : 0.0;
  v.flagged = v.statistic > threshold;
  return v;
}

DetectionRates detection_rates(std::span<const DefenseVerdict> attacked, std::span<const DefenseVerdict> clean) {
  auto rate = [](std::span<const DefenseVerdict> vs) {
    if (vs.empty()) {
      return 0.0;
    }
    return static_cast<double>(std::count_if(vs.begin(), vs.end(), [](const auto &v) { return v.flagged; })) /
           static_cast<double>(vs.size());
  };
  return {rate(attacked), rate(clean)};
}

// ---------------------------------------------------------------------------

MixingRow batch_statistics(std::span<const GenerationTrace *const> batch, int m_adv) {
  if (batch.empty()) {
    throw std::invalid_argument("batch_statistics: empty batch");
  }
  MixingRow row;
  row.m_adv = m_adv;
  for (const GenerationTrace *tr : batch) {
    const NormStats s = norm_stats(*tr);
    row.norm_mean += s.mean;
    row.norm_variance += s.variance;
    row.mean_n_out += tr->n_out();
    row.mean_repetition_fraction += repetition_report(tr->tokens).repetition_fraction;
  }
  const auto b = static_cast<double>(batch.size());
  row.norm_mean /= b;
  row.norm_variance /= b;
  row.mean_n_out /= b;
  row.mean_repetition_fraction /= b;
  return row;
}

std::vector<MixingRow> batch_mixing_experiment(const ModelParams<float> &params, std::span<const TokenId> prompt,
                                               std::span<const Matrix<float>> clean,
                                               std::span<const Matrix<float>> adversarial, int batch_size,
                                               std::span<const int> sweep, const DecodeConfig &cfg) {
  if (batch_size < 1) {
    throw std::invalid_argument("batch_mixing_experiment: batch size must be >= 1");
  }
  const auto b = static_cast<std::size_t>(batch_size);
  if (clean.size() < b || adversarial.size() < b) {
    throw std::invalid_argument("batch_mixing_experiment: need " + std::to_string(b) +
                                " clean and adversarial inputs, got " + std::to_string(clean.size()) + " and " +
                                std::to_string(adversarial.size()));
  }
  // Each input is decoded once per kind; mixtures reuse the traces.
  std::vector<GenerationTrace> clean_traces, adv_traces;
  for (std::size_t i = 0; i < b; ++i) {
    clean_traces.push_back(generate(params, clean[i], prompt, cfg));
    adv_traces.push_back(generate(params, adversarial[i], prompt, cfg));
  }
  std::vector<MixingRow> rows;
  for (int m : sweep) {
    if (m < 0 || m > batch_size) {
      throw std::invalid_argument("batch_mixing_experiment: M_adv " + std::to_string(m) + " outside [0, B]");
    }
    std::vector<const GenerationTrace *> batch;
    for (std::size_t i = 0; i < b; ++i) {
      batch.push_back(static_cast<int>(i) < m ? &adv_traces[i] : &clean_traces[i]);
    }
    rows.push_back(batch_statistics(batch, m));
  }
  return rows;
}

// ---------------------------------------------------------------------------

double position_macs(const ModelConfig &cfg, int context) {
  const double d = cfg.hidden_dim;
  const double per_layer = 4.0 * d * d + 2.0 * d * cfg.mlp_dim + 2.0 * d * context;
  return cfg.num_layers * per_layer + d * cfg.vocab_size;
}

ResourceProxy resource_proxy(const ModelConfig &cfg, int prompt_len, int n_out, double wall_seconds) {
  if (prompt_len < 0 || n_out < 0) {
    throw std::invalid_argument("resource_proxy: negative length");
  }
  ResourceProxy r;
  r.n_out = n_out;
  r.decode_steps = n_out;
  r.wall_seconds = wall_seconds;
  const int prefill = cfg.prefix_len + prompt_len;
  for (int c = 1; c <= prefill; ++c) {
    r.mac_prefill += position_macs(cfg, c);
  }
  // The last generated token is never fed back.
  for (int i = 1; i < n_out; ++i) {
    r.mac_decode += position_macs(cfg, prefill + i);
  }
  r.mac_total = r.mac_prefill + r.mac_decode;
  return r;
}

// ---------------------------------------------------------------------------

namespace {
std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) {
      ++j;
    }
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      ranks[idx[k]] = r;
    }
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length samples of size >= 2");
  }
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = mean_of(rx);
  const double my = mean_of(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return sxy / std::sqrt(sxx * syy);
}

double paired_bootstrap_confidence(std::span<const double> a, std::span<const double> b, int resamples,
                                   std::uint64_t seed, bool strict) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("paired_bootstrap_confidence: need equal-length non-empty samples");
  }
  if (resamples < 1) {
    throw std::invalid_argument("paired_bootstrap_confidence: resamples must be >= 1");
  }
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff[i] = a[i] - b[i];
  }
  Rng rng(seed);
  int hits = 0;
  for (int r = 0; r < resamples; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < diff.size(); ++i) {
      s += diff[rng.below(diff.size())];
    }
    if (strict ? s > 0.0 : s >= 0.0) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / resamples;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) {
    throw std::invalid_argument("mean_of: empty sample");
  }
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) {
    throw std::invalid_argument("median_of: empty sample");
  }
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace sponge
