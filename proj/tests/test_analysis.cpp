// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "sponge/analysis.hpp"
#include "sponge/random.hpp"

#include "repetition_oracle.hpp"

#include <cmath>
#include <limits>

using namespace sponge;

namespace {

GenerationTrace trace_with_norms(std::vector<TokenId> tokens, std::vector<std::array<float, 2>> norms) {
  GenerationTrace t;
  t.tokens = std::move(tokens);
  t.hidden_norms.resize(static_cast<Eigen::Index>(norms.size()), 2);
  for (std::size_t k = 0; k < norms.size(); ++k) {
    t.hidden_norms(static_cast<Eigen::Index>(k), 0) = norms[k][0];
    t.hidden_norms(static_cast<Eigen::Index>(k), 1) = norms[k][1];
  }
  return t;
}

std::vector<TokenId> random_tokens(Rng &rng, std::size_t n, std::uint64_t alphabet) {
  std::vector<TokenId> t(n);
  for (auto &x : t) {
    x = static_cast<TokenId>(rng.below(alphabet));
  }
  return t;
}

}  // namespace

TEST_CASE("repetition report examples") {
  const std::vector<TokenId> ab{1, 2, 1, 2, 1, 2};
  const auto r = repetition_report(ab);
  CHECK(r.loop_period == 2);
  CHECK(r.max_count(2) == 3);
  CHECK(r.max_count(1) == 3);
  CHECK(r.max_count(7) == 0);

  const std::vector<TokenId> distinct{1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto d = repetition_report(distinct);
  CHECK(d.loop_period == 0);
  for (int n = 1; n <= 8; ++n) {
    CHECK(d.max_count(n) == 1);
  }
  CHECK(d.repetition_fraction == 0.0);

  const std::vector<TokenId> loop{5, 6, 7, 1, 2, 3, 1, 2, 3, 1, 2, 3};
  const auto l = repetition_report(loop);
  CHECK(l.loop_period == 3);
  CHECK(l.max_count(3) == 3);
  CHECK(l.repetition_fraction == doctest::Approx(9.0 / 12.0));

  CHECK_THROWS(repetition_report(std::vector<TokenId>{}));
  CHECK_THROWS(r.max_count(0));
  CHECK_THROWS(r.max_count(9));
}

TEST_CASE("repetition report matches the brute-force oracle") {
  std::vector<TokenId> s;
  for (int len = 1; len <= 8; ++len) {
    s.assign(static_cast<std::size_t>(len), 0);
    for (std::uint32_t code = 0; code < (1u << (2 * len)); ++code) {
      for (int k = 0; k < len; ++k) {
        s[static_cast<std::size_t>(k)] = static_cast<TokenId>((code >> (2 * k)) & 3u);
      }
      REQUIRE(oracle::same_report(repetition_report(s), oracle::repetition(s)));
    }
  }
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto t = random_tokens(rng, 200, i % 2 == 0 ? 4 : 64);
    REQUIRE(oracle::same_report(repetition_report(t), oracle::repetition(t)));
  }
}

TEST_CASE("n-gram filter") {
  const std::vector<TokenId> t{1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3};
  const auto r = repetition_report(t);
  REQUIRE(r.max_count(3) == 6);
  CHECK(ngram_filter(r, 3).flagged);
  CHECK(ngram_filter(r, 3).statistic == 6.0);
  CHECK_FALSE(ngram_filter(r, 3, 6.0).flagged);
  CHECK_FALSE(ngram_filter(r, 3, std::numeric_limits<double>::infinity()).flagged);

  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const auto rep = repetition_report(random_tokens(rng, 60, 3));
    for (int n = 1; n <= 8; ++n) {
      for (double tau = 0; tau < 20; ++tau) {
        if (ngram_filter(rep, n, tau + 1).flagged) {
          CHECK(ngram_filter(rep, n, tau).flagged);
        }
      }
    }
  }
}

TEST_CASE("norm statistics average layers before tokens") {
  const auto t = trace_with_norms({1, 2, 3}, {{{1.0f, 3.0f}}, {{2.0f, 2.0f}}, {{6.0f, 6.0f}}});
  const NormStats s = norm_stats(t);
  CHECK(s.mean == doctest::Approx(10.0 / 3.0));
  CHECK(s.variance == doctest::Approx(((2 - 10.0 / 3) * (2 - 10.0 / 3) * 2 + (6 - 10.0 / 3) * (6 - 10.0 / 3)) / 3));
  CHECK(monitor_statistic(t) == s.mean);
  CHECK_THROWS(norm_stats(GenerationTrace{}));
}

TEST_CASE("monitor baseline") {
  const std::vector<double> two{4.0, 6.0};
  const auto b = norm_monitor_baseline(two);
  CHECK(b.mu == 5.0);
  CHECK(b.sigma == 1.0);
  CHECK(b.count == 2);
  const std::vector<double> same{3.5, 3.5, 3.5};
  CHECK(norm_monitor_baseline(same).sigma == 0.0);
  const std::vector<double> one{1.0};
  CHECK_THROWS(norm_monitor_baseline(one));

  const auto t1 = trace_with_norms({1}, {{{4.0f, 4.0f}}});
  const auto t2 = trace_with_norms({1}, {{{6.0f, 6.0f}}});
  const std::vector<GenerationTrace> traces{t1, t2};
  const auto bt = norm_monitor_baseline(traces);
  CHECK(bt.mu == 5.0);
  CHECK(bt.sigma == 1.0);
}

TEST_CASE("norm monitor thresholds") {
  const MonitorBaseline b{5.0, 2.0, 10};
  CHECK(norm_monitor(b, 4.0, 0.0).flagged);
  CHECK_FALSE(norm_monitor(b, 4.0, 1.0).flagged);
  CHECK(norm_monitor(b, 4.0, 0.0).statistic == 4.0);
  const MonitorBaseline flat{5.0, 0.0, 10};
  for (double n : {0.0, 1.0, 2.0, 3.0}) {
    CHECK_FALSE(norm_monitor(flat, 5.0, n).flagged);
  }
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const double stat = rng.uniform(0.0, 10.0);
    for (double n = 0.25; n <= 4.0; n += 0.25) {
      if (norm_monitor(b, stat, n).flagged) {
        CHECK(norm_monitor(b, stat, n - 0.25).flagged);
      }
    }
  }
}

TEST_CASE("detection rates") {
  const std::vector<DefenseVerdict> attacked{{true, "m", 1}, {true, "m", 1}, {false, "m", 1}, {true, "m", 1}};
  const std::vector<DefenseVerdict> clean{{false, "m", 1}, {true, "m", 1}};
  const auto r = detection_rates(attacked, clean);
  CHECK(r.tpr == 0.75);
  CHECK(r.fpr == 0.5);
}

TEST_CASE("resource proxy") {
  ModelConfig cfg;
  const auto none = resource_proxy(cfg, 4, 0);
  CHECK(none.mac_decode == 0.0);
  CHECK(none.mac_prefill > 0.0);
  CHECK(none.mac_total == none.mac_prefill);
  CHECK(resource_proxy(cfg, 4, 1).mac_total == none.mac_total);
  double prev = none.mac_total;
  for (int n = 2; n <= 128; ++n) {
    const auto r = resource_proxy(cfg, 4, n);
    CHECK(r.mac_total > prev);
    prev = r.mac_total;
    CHECK(resource_proxy(cfg, 4, 2 * n).mac_decode > 2.0 * r.mac_decode);
  }
  CHECK(position_macs(cfg, 20) > position_macs(cfg, 10));
  CHECK_THROWS(resource_proxy(cfg, -1, 3));
}

TEST_CASE("spearman") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> up{2, 4, 8, 16, 32};
  const std::vector<double> down{9, 7, 5, 3, 1};
  CHECK(spearman(x, up) == doctest::Approx(1.0));
  CHECK(spearman(x, down) == doctest::Approx(-1.0));
  // Ranks of {1, 2, 2, 3} are {1, 2.5, 2.5, 4}.
  const std::vector<double> a{1, 2, 3, 4};
  const std::vector<double> tied{1, 2, 2, 3};
  CHECK(spearman(a, tied) == doctest::Approx(0.9486832980505138));
  const std::vector<double> flat{3, 3, 3, 3};
  CHECK(std::isnan(spearman(a, flat)));
}

TEST_CASE("paired bootstrap confidence") {
  const std::vector<double> a{3, 4, 5, 6};
  const std::vector<double> b{1, 2, 3, 4};
  CHECK(paired_bootstrap_confidence(a, b, 500, 1, true) == 1.0);
  CHECK(paired_bootstrap_confidence(b, a, 500, 1, false) == 0.0);
  CHECK(paired_bootstrap_confidence(a, a, 500, 1, false) == 1.0);
  CHECK(paired_bootstrap_confidence(a, a, 500, 1, true) == 0.0);
  const std::vector<double> c{5, 0, 5, 0};
  const std::vector<double> d{0, 5, 0, 5};
  const double p = paired_bootstrap_confidence(c, d, 4000, 3, true);
  CHECK(p > 0.2);
  CHECK(p < 0.5);
  CHECK(paired_bootstrap_confidence(c, d, 4000, 3, true) == p);
  CHECK_THROWS(paired_bootstrap_confidence(a, std::vector<double>{1.0}, 10, 1, true));
}

TEST_CASE("batch mixing endpoints equal the pure batches") {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.max_context = 48;
  auto params = init_params(cfg, 31);
  params.for_each([](const std::string &name, Matrix<float> &m) {
    if (name.find("gain") == std::string::npos && name.find("bias") == std::string::npos) {
      m *= 20.0f;
    }
  });
  Rng rng(32);
  std::vector<Matrix<float>> clean, adv;
  for (int i = 0; i < 8; ++i) {
    Matrix<float> x(cfg.prefix_len, cfg.hidden_dim), y(cfg.prefix_len, cfg.hidden_dim);
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      x.data()[k] = static_cast<float>(rng.normal());
      y.data()[k] = static_cast<float>(rng.normal() * 2.0);
    }
    clean.push_back(x);
    adv.push_back(y);
  }
  const std::vector<TokenId> prompt{1, 2};
  DecodeConfig dc;
  dc.max_new_tokens = 20;
  const std::vector<int> sweep{0, 2, 4};
  const auto rows = batch_mixing_experiment(params, prompt, clean, adv, 4, sweep, dc);
  REQUIRE(rows.size() == 3);

  std::vector<GenerationTrace> ct, at;
  for (int i = 0; i < 4; ++i) {
    ct.push_back(generate(params, clean[static_cast<std::size_t>(i)], prompt, dc));
    at.push_back(generate(params, adv[static_cast<std::size_t>(i)], prompt, dc));
  }
  std::vector<const GenerationTrace *> cp, ap;
  for (int i = 0; i < 4; ++i) {
    cp.push_back(&ct[static_cast<std::size_t>(i)]);
    ap.push_back(&at[static_cast<std::size_t>(i)]);
  }
  const auto pure_clean = batch_statistics(cp, 0);
  const auto pure_adv = batch_statistics(ap, 4);
  CHECK(rows[0].norm_mean == pure_clean.norm_mean);
  CHECK(rows[0].norm_variance == pure_clean.norm_variance);
  CHECK(rows[0].mean_n_out == pure_clean.mean_n_out);
  CHECK(rows[2].norm_mean == pure_adv.norm_mean);
  CHECK(rows[2].norm_variance == pure_adv.norm_variance);
  CHECK(rows[2].mean_repetition_fraction == pure_adv.mean_repetition_fraction);
  CHECK(rows[1].m_adv == 2);

  CHECK_THROWS(batch_mixing_experiment(params, prompt, clean, adv, 9, sweep, dc));
  const std::vector<int> bad{5};
  CHECK_THROWS(batch_mixing_experiment(params, prompt, clean, adv, 4, bad, dc));
}

TEST_CASE("mean and median") {
  CHECK(mean_of(std::vector<double>{1, 2, 6}) == 3.0);
  CHECK(median_of({5, 1, 3}) == 3.0);
  CHECK(median_of({4, 1, 3, 2}) == 2.5);
  CHECK_THROWS(mean_of(std::vector<double>{}));
  CHECK_THROWS(median_of({}));
}
