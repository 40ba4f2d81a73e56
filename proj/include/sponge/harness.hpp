// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sponge/analysis.hpp"
#include "sponge/attack.hpp"
#include "sponge/linguistics.hpp"
#include "sponge/model.hpp"
#include "sponge/objective.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sponge {

inline constexpr int kSummarySchemaVersion = 1;
inline constexpr std::string_view kCodeVersion = "0.3.0";

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by a command after its partial outputs have been written.
class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct CorpusConfig {
  std::uint64_t seed = 7;
  int pool_size = 500;
  int eval_size = 50;
  int validation_size = 200;
  CaptionGrammar grammar;
};

struct TrainConfig {
  int batch_size = 16;
  double learning_rate = 3e-3;
  double grad_clip = 1.0;
  int eval_every = 100;
  /// Stop once validation loss has not improved by `plateau_tolerance`
  /// for this many steps.
  int plateau_steps = 200;
  double plateau_tolerance = 1e-3;
  int min_steps = 1500;
  int max_steps = 5000;
  /// Required share of grammatical greedy decodes on validation prefixes.
  double fitness_threshold = 0.9;
};

struct AblationConfig {
  int inputs = 20;
  std::vector<Variant> variants{Variant::lingoloop, Variant::uniform_eos};
  std::vector<double> lambda_rep{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<int> max_tokens{64, 128, 256};
  std::vector<double> epsilon{0.25, 0.5, 1.0};
  std::vector<double> temperature{0.5, 0.7, 1.0};
  std::vector<double> top_p{0.2, 0.7, 1.0};
  int convergence_every = 10;
};

struct TransferConfig {
  Variant variant = Variant::lingoloop;
  std::vector<int> caps{64, 128, 256};
};

struct DefenseConfig {
  Variant variant = Variant::lingoloop;
  std::vector<double> repetition_penalties{1.05, 1.10, 1.15};
  std::vector<int> no_repeat_ngram_sizes{0, 2};
  std::vector<int> ngram_orders{3, 4, 5, 6, 7};
  double ngram_threshold = 5.0;
  std::vector<double> monitor_n{0.0, 1.0, 2.0, 3.0};
  /// Clean validation traces used to fit the monitor baseline.
  int calibration_size = 50;
};

struct MixingConfig {
  Variant variant = Variant::lingoloop;
  int batch_size = 20;
  std::vector<int> sweep{0, 4, 8, 12, 16, 20};
};

struct ExperimentConfig {
  /// Master seed: model initialization and per-input attack seeds.
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  /// "attack" runs attack.variant; "ablation-table3" runs every variant.
  std::string kind = "ablation-table3";
  /// Worker threads for per-input work; 0 uses the hardware count.
  int threads = 0;
  ModelConfig model;
  CorpusConfig corpus;
  TrainConfig train;
  ObjectiveConfig objective;
  AttackConfig attack;
  DecodeConfig decode;
  AblationConfig ablation;
  TransferConfig transfer;
  DefenseConfig defense;
  MixingConfig mixing;

  void validate() const;
  int thread_count() const;
};

std::string config_to_json(const ExperimentConfig &cfg);
/// Missing keys take their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(std::string_view text);
/// Applies "dotted.path=value"; value is parsed as JSON, else taken as a
/// string. The path must name an existing key.
void apply_override(ExperimentConfig &cfg, std::string_view assignment);
ExperimentConfig load_config(const std::optional<std::filesystem::path> &path,
                             std::span<const std::string> overrides);

// ---------------------------------------------------------------------------
// Corpus splits. Each split draws sample indices from its own range, so the
// splits are disjoint for any sizes below 2^20.
// ---------------------------------------------------------------------------

enum class Split { pool, eval, validation, train };

std::uint64_t split_offset(Split split);
std::vector<CaptionSample> corpus_split(const CaptionCorpus &corpus, std::uint64_t seed, Split split,
                                        std::size_t count, std::size_t start = 0);
std::vector<Matrix<float>> prefixes_of(std::span<const CaptionSample> samples);

/// Vocabulary plus the corpus that references it.
struct Setup {
  explicit Setup(const ExperimentConfig &cfg);
  Setup(const Setup &) = delete;
  Setup &operator=(const Setup &) = delete;

  Vocabulary vocab;
  CaptionCorpus corpus;
};

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string command;
  /// Extra positional argument (the sweep name for ablate).
  std::string argument;
  std::string config_json;
  std::string code_version;
  std::string started_at;
  std::string finished_at;
  /// Relative path -> SHA-256 of files read.
  std::map<std::string, std::string> inputs;
  /// Relative path -> SHA-256 of deterministic outputs.
  std::map<std::string, std::string> outputs;
  /// Wall-clock files; listed but not hashed.
  std::vector<std::string> volatile_outputs;

  std::string to_json() const;
  static RunManifest parse(std::string_view text);
};

std::filesystem::path manifest_path(const std::filesystem::path &out_dir, std::string_view command,
                                    std::string_view argument = {});
RunManifest read_manifest(const std::filesystem::path &path);
/// Throws CommandError when a listed output is missing or its hash differs.
void verify_outputs(const RunManifest &manifest, const std::filesystem::path &out_dir);

// ---------------------------------------------------------------------------
// Campaigns
// ---------------------------------------------------------------------------

/// Runs f(i) for i in [0, n) on `threads` workers. The first exception (by
/// index) is rethrown after all workers finish.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)> &f);

std::uint64_t input_seed(std::uint64_t base, std::size_t index);

struct CampaignOutcome {
  std::vector<std::optional<AttackResult>> results;
  /// Empty where the input completed.
  std::vector<std::string> errors;

  std::size_t completed() const;
};

CampaignOutcome run_campaign(const AttackContext &ctx, std::span<const Matrix<float>> inputs,
                             const ObjectiveConfig &obj, const AttackConfig &cfg, std::uint64_t seed_base,
                             int threads);

std::vector<GenerationTrace> decode_all(const ModelParams<float> &params, std::span<const Matrix<float>> prefixes,
                                        std::span<const TokenId> prompt, const DecodeConfig &cfg, int threads);

/// PUNCT_SENT mean EOS probability strictly above ADJ, ADV and VERB.
bool pos_ordering_holds(const WeightPool &pool);

// ---------------------------------------------------------------------------
// Commands. Each writes its outputs under cfg.out_dir plus a manifest and
// returns that manifest.
// ---------------------------------------------------------------------------

RunManifest cmd_train(const ExperimentConfig &cfg);
RunManifest cmd_build_pool(const ExperimentConfig &cfg);
RunManifest cmd_attack(const ExperimentConfig &cfg);
RunManifest cmd_ablate(const ExperimentConfig &cfg, std::string_view which);
RunManifest cmd_transfer(const ExperimentConfig &cfg);
RunManifest cmd_defend(const ExperimentConfig &cfg);
RunManifest cmd_report(const ExperimentConfig &cfg);
/// train, build-pool, attack, transfer, defend and report in order, under
/// one manifest listing every stage's outputs.
RunManifest cmd_pipeline(const ExperimentConfig &cfg);

/// Dispatches on a command name as used by the CLI and manifests.
RunManifest run_command(const ExperimentConfig &cfg, std::string_view command, std::string_view argument = {});

/// Re-runs the command recorded in `manifest`, optionally into another
/// directory.
RunManifest replay(const std::filesystem::path &manifest, const std::optional<std::filesystem::path> &out_dir);

inline constexpr std::array<std::string_view, 6> kAblations{"lambda_rep", "max_tokens", "epsilon",
                                                            "temperature", "top_p", "convergence"};

// Output locations relative to out_dir.
namespace paths {
inline constexpr std::string_view kCheckpoint = "model.manifest";
inline constexpr std::string_view kPool = "pool.txt";
inline constexpr std::string_view kAttackDir = "attack";
std::string adversarial(Variant v);
std::string results(Variant v);
}  // namespace paths

}  // namespace sponge
