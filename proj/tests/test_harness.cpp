// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "sponge/harness.hpp"
#include "sponge/io.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <set>

using namespace sponge;
namespace fs = std::filesystem;

namespace {

const fs::path kSmokeConfig = fs::path(SPONGE_SOURCE_DIR) / "configs" / "smoke.json";

fs::path scratch_dir(const char *name) {
  const fs::path p = fs::temp_directory_path() / "sponge-test-harness" / name;
  fs::remove_all(p);
  return p;
}

ExperimentConfig smoke(const fs::path &out) {
  const std::vector<std::string> overrides{"out_dir=" + nlohmann::json(out.string()).dump()};
  return load_config(kSmokeConfig, overrides);
}

// The smoke pipeline, run once per process.
const RunManifest &smoke_run(const fs::path &out) {
  static const RunManifest m = [&] {
    fs::remove_all(out);
    return cmd_pipeline(smoke(out));
  }();
  return m;
}

fs::path copy_of(const fs::path &from, const char *name) {
  const fs::path to = scratch_dir(name);
  fs::copy(from, to, fs::copy_options::recursive);
  return to;
}

std::string message_of(const std::function<void()> &f) {
  try {
    f();
  } catch (const std::exception &e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("config json round-trip") {
  const ExperimentConfig cfg;
  const std::string text = config_to_json(cfg);
  CHECK(config_to_json(config_from_json(text)) == text);
  CHECK(config_from_json("{}").attack.epsilon == cfg.attack.epsilon);
}

TEST_CASE("config rejects unknown keys and wrong types") {
  CHECK(message_of([] { config_from_json(R"({"attack": {"epsilonn": 1}})"); }).find("attack.epsilonn") !=
        std::string::npos);
  CHECK_THROWS_AS(config_from_json(R"({"seed": "one"})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"seed": -1})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"attack": {"variant": "loop"}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json(R"({"corpus": {"grammar": {"sentence_count_probs": [1, 0]}}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(config_from_json("{"), ConfigError);
}

TEST_CASE("config overrides") {
  ExperimentConfig cfg;
  apply_override(cfg, "attack.epsilon=0.25");
  CHECK(cfg.attack.epsilon == 0.25);
  apply_override(cfg, "attack.variant=rep_only");
  CHECK(cfg.attack.variant == Variant::rep_only);
  apply_override(cfg, "ablation.lambda_rep=[0.2, 0.4]");
  CHECK(cfg.ablation.lambda_rep == std::vector<double>{0.2, 0.4});
  apply_override(cfg, "out_dir=runs/x");
  CHECK(cfg.out_dir == "runs/x");
  CHECK_THROWS_AS(apply_override(cfg, "attack.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "attack=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "seed"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "train.batch_size=big"), ConfigError);
}

TEST_CASE("config validation") {
  ExperimentConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.kind = "everything";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.corpus.eval_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.corpus.pool_size = 1 << 20;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.transfer.caps = {1000};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.decode.mode = DecodeMode::sampled;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.attack.epsilon = -1;
  CHECK_THROWS(cfg.validate());
  CHECK_NOTHROW(smoke("unused").validate());
}

TEST_CASE("corpus splits are disjoint") {
  const ExperimentConfig cfg;
  Setup setup(cfg);
  std::set<std::uint64_t> offsets;
  for (Split s : {Split::pool, Split::eval, Split::validation, Split::train}) {
    offsets.insert(split_offset(s));
  }
  CHECK(offsets.size() == 4);
  const auto pool = corpus_split(setup.corpus, 7, Split::pool, 100);
  const auto eval = corpus_split(setup.corpus, 7, Split::eval, 100);
  for (const auto &p : pool) {
    for (const auto &e : eval) {
      REQUIRE(p.prefix != e.prefix);
    }
  }
  const auto again = corpus_split(setup.corpus, 7, Split::eval, 10, 5);
  for (std::size_t i = 0; i < again.size(); ++i) {
    CHECK(again[i].prefix == eval[i + 5].prefix);
    CHECK(again[i].tokens == eval[i + 5].tokens);
  }
}

TEST_CASE("run manifests") {
  RunManifest m;
  m.command = "ablate";
  m.argument = "epsilon";
  m.config_json = config_to_json(ExperimentConfig{});
  m.code_version = std::string(kCodeVersion);
  m.started_at = "2026-01-01T00:00:00Z";
  m.finished_at = "2026-01-01T00:00:01Z";
  m.inputs = {{"pool.txt", "ab"}};
  m.outputs = {{"ablate_epsilon.csv", "cd"}};
  m.volatile_outputs = {"ablate-epsilon.timing.json"};
  const auto r = RunManifest::parse(m.to_json());
  CHECK(r.to_json() == m.to_json());
  CHECK(config_to_json(config_from_json(r.config_json)) == m.config_json);
  CHECK(manifest_path("out", "ablate", "epsilon") == fs::path("out") / "ablate-epsilon.manifest.json");
  CHECK(manifest_path("out", "train") == fs::path("out") / "train.manifest.json");
  CHECK_THROWS_AS(RunManifest::parse("{}"), FormatError);
  CHECK_THROWS_AS(RunManifest::parse("not json"), FormatError);
}

TEST_CASE("parallel_for") {
  for (int threads : {1, 3, 64}) {
    std::vector<std::atomic<int>> hits(50);
    parallel_for(50, threads, [&](std::size_t i) { ++hits[i]; });
    for (auto &h : hits) {
      CHECK(h.load() == 1);
    }
    CHECK(message_of([&] {
            parallel_for(10, threads, [](std::size_t i) {
              if (i == 3 || i == 7) {
                throw std::runtime_error("input " + std::to_string(i));
              }
            });
          }) == "input 3");
  }
  parallel_for(0, 4, [](std::size_t) { FAIL("called"); });
  CHECK(input_seed(0xf0, 0x0f) == 0xff);
}

TEST_CASE("pos ordering check") {
  WeightPool pool;
  pool[PosTag::PUNCT_SENT].mean_eos_prob = 0.4;
  pool[PosTag::ADJ].mean_eos_prob = 0.1;
  CHECK(pos_ordering_holds(pool));
  pool[PosTag::VERB].mean_eos_prob = 0.4;
  CHECK_FALSE(pos_ordering_holds(pool));
}

TEST_CASE("pipeline outputs, replay and artifact checks") {
  const fs::path out = fs::temp_directory_path() / "sponge-test-harness" / "run";
  const ExperimentConfig cfg = smoke(out);
  const RunManifest &m = smoke_run(out);
  CHECK(m.command == "pipeline");
  for (const char *f : {"model.manifest", "model.bin", "train_log.csv", "train_summary.json", "pool.txt",
                        "pool_table.csv", "attack/clean.csv", "attack/summary.json", "transfer.csv",
                        "defend_decoding.csv", "defend_ngram.csv", "defend_monitor.csv", "mixing.csv", "report.json",
                        "report.txt"}) {
    CHECK_MESSAGE(m.outputs.count(f) == 1, f);
  }
  for (Variant v : kAllVariants) {
    CHECK(m.outputs.count(paths::results(v)) == 1);
    CHECK(m.outputs.count(paths::adversarial(v)) == 1);
  }
  CHECK_NOTHROW(verify_outputs(m, out));

  const auto summary = nlohmann::json::parse(read_file(out / "attack/summary.json"));
  CHECK(summary["schema_version"] == kSummarySchemaVersion);
  CHECK(summary["variants"].size() == kAllVariants.size());

  const auto monitor = parse_csv(read_file(out / "defend_monitor.csv"));
  CHECK(monitor.size() == 5);
  CHECK(monitor[0] == std::vector<std::string>{"n_sigma", "tpr", "fpr"});

  const auto pool_rows = parse_csv(read_file(out / "pool_table.csv"));
  for (std::size_t i = 1; i < pool_rows.size(); ++i) {
    CHECK(std::stoll(pool_rows[i][3]) > 0);
  }

  SUBCASE("replay reproduces every output") {
    const fs::path other = scratch_dir("replay");
    const RunManifest r = replay(manifest_path(out, "pipeline"), other);
    CHECK(r.outputs == m.outputs);
    CHECK_NOTHROW(verify_outputs(m, other));
  }
  SUBCASE("ablations emit one row per sweep value and variant") {
    for (std::string_view which : kAblations) {
      const RunManifest a = cmd_ablate(cfg, which);
      const auto rows = parse_csv(read_file(out / ("ablate_" + std::string(which) + ".csv")));
      if (which == "lambda_rep") {
        CHECK(rows.size() == 1 + 2 * 2);
      } else if (which == "convergence") {
        CHECK(rows.size() == 1 + 2 * 3);
      } else if (which == "temperature" || which == "top_p") {
        CHECK(rows.size() == 1 + 3);
      } else {
        CHECK(rows.size() == 1 + 2 * 3);
      }
      CHECK(a.inputs.count("pool.txt") == 1);
    }
    CHECK_THROWS_AS(cmd_ablate(cfg, "nothing"), ConfigError);
  }
  SUBCASE("a modified artifact is refused") {
    const fs::path dir = copy_of(out, "modified");
    write_file_atomic(dir / "pool.txt", read_file(dir / "pool.txt") + "\n");
    CHECK_THROWS_AS(cmd_attack(smoke(dir)), CommandError);
  }
  SUBCASE("a missing checkpoint is reported") {
    const fs::path dir = copy_of(out, "missing");
    fs::remove(dir / "model.bin");
    CHECK(message_of([&] { cmd_build_pool(smoke(dir)); }).find("model.bin") != std::string::npos);
  }
}

TEST_CASE("fitness gate failure still writes outputs") {
  const fs::path out = scratch_dir("gate");
  ExperimentConfig cfg = smoke(out);
  cfg.train.max_steps = 1;
  cfg.train.min_steps = 0;
  cfg.train.fitness_threshold = 1.0;
  CHECK_THROWS_AS(cmd_train(cfg), CommandError);
  CHECK(fs::exists(out / "train_summary.json"));
  CHECK(fs::exists(manifest_path(out, "train")));
}
