// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point: train, build-pool, attack, ablate, transfer,
// defend, report, pipeline and replay.

#include "sponge/harness.hpp"
#include "sponge/io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace {

struct Options {
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<int> threads;
  std::vector<std::string> overrides;
};

void add_common(CLI::App *app, Options &o) {
  app->add_option("-c,--config", o.config, "JSON config file");
  app->add_option("-o,--out", o.out, "Output directory");
  app->add_option("--seed", o.seed, "Master seed");
  app->add_option("--threads", o.threads, "Worker threads (0 = all cores)");
  app->add_option("--set", o.overrides, "Override a config key: dotted.path=value")->take_all();
}

sponge::ExperimentConfig resolve(const Options &o) {
  std::vector<std::string> overrides;
  if (o.out) {
    overrides.push_back("out_dir=" + nlohmann::json(*o.out).dump());
  }
  if (o.seed) {
    overrides.push_back("seed=" + std::to_string(*o.seed));
  }
  if (o.threads) {
    overrides.push_back("threads=" + std::to_string(*o.threads));
  }
  if (o.variant) {
    overrides.push_back("attack.variant=" + nlohmann::json(*o.variant).dump());
    overrides.push_back("kind=\"attack\"");
  }
  overrides.insert(overrides.end(), o.overrides.begin(), o.overrides.end());
  std::optional<std::filesystem::path> path;
  if (o.config) {
    path = *o.config;
  }
  return sponge::load_config(path, overrides);
}

void report_error(std::string_view kind, std::string_view message) {
  nlohmann::json j{{"status", "error"}, {"kind", kind}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Sponge-attack experiments on a small captioning language model"};
  app.require_subcommand(1);

  Options opts;
  std::string ablation;
  std::string manifest;
  std::optional<std::string> replay_out;

  const std::pair<const char *, const char *> commands[] = {
      {"train", "Train the captioning model"},
      {"build-pool", "Measure per-tag EOS probabilities on the pool split"},
      {"attack", "Craft adversarial prefixes for the eval split"},
      {"transfer", "Re-decode crafted prefixes at larger token caps"},
      {"defend", "Evaluate decoding constraints, n-gram filter and norm monitor"},
      {"report", "Batch-mixing sweep and summary tables"},
      {"pipeline", "Run train through report in one manifest"},
  };
  for (const auto &[name, help] : commands) {
    auto *sub = app.add_subcommand(name, help);
    add_common(sub, opts);
    if (std::string_view(name) == "attack") {
      sub->add_option("--variant", opts.variant,
                      "Run a single variant: lingoloop, lps_only, uniform_eos, rep_only, noise");
    }
  }
  auto *ablate = app.add_subcommand("ablate", "Sweep one attack or decoding setting");
  add_common(ablate, opts);
  ablate->add_option("which", ablation, "lambda_rep, max_tokens, epsilon, temperature, top_p or convergence")
      ->required();
  auto *replay = app.add_subcommand("replay", "Re-run the command recorded in a run manifest");
  replay->add_option("--manifest", manifest, "Run manifest (*.manifest.json)")->required();
  replay->add_option("-o,--out", replay_out, "Write into this directory instead");

  CLI11_PARSE(app, argc, argv);

  try {
    sponge::RunManifest result;
    CLI::App *sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    if (command == "replay") {
      std::optional<std::filesystem::path> out;
      if (replay_out) {
        out = *replay_out;
      }
      result = sponge::replay(manifest, out);
    } else {
      result = sponge::run_command(resolve(opts), command, command == "ablate" ? ablation : "");
    }
    nlohmann::json j{{"status", "ok"},
                     {"command", result.command},
                     {"argument", result.argument},
                     {"outputs", result.outputs.size()}};
    std::cout << j.dump() << "\n";
    return 0;
  } catch (const sponge::ConfigError &e) {
    report_error("config", e.what());
    return 2;
  } catch (const sponge::CommandError &e) {
    report_error("command", e.what());
    return 3;
  } catch (const sponge::FormatError &e) {
    report_error("format", e.what());
    return 4;
  } catch (const std::exception &e) {
    report_error("internal", e.what());
    return 1;
  }
}
