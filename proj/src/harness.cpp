// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sponge/harness.hpp"

#include "sponge/io.hpp"
#include "sponge/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace sponge {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kAttackStream = 2;
constexpr std::uint64_t kSampleStream = 3;
constexpr std::string_view kManifestSchema = "sponge-run/1";

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// Writes files under out_dir and records their hashes for the manifest.
class Recorder {
 public:
  Recorder(const ExperimentConfig &cfg, std::string command, std::string argument = {})
      : out_(cfg.out_dir), start_(std::chrono::steady_clock::now()) {
    m_.command = std::move(command);
    m_.argument = std::move(argument);
    m_.config_json = config_to_json(cfg);
    m_.code_version = std::string(kCodeVersion);
    m_.started_at = utc_now();
    fs::create_directories(out_);
  }

  fs::path path(std::string_view rel) const { return out_ / rel; }

  void write(const std::string &rel, std::string_view contents) {
    fs::create_directories(path(rel).parent_path());
    write_file_atomic(path(rel), contents);
    m_.outputs[rel] = sha256_hex(contents);
  }

  void write_volatile(const std::string &rel, std::string_view contents) {
    fs::create_directories(path(rel).parent_path());
    write_file_atomic(path(rel), contents);
    m_.volatile_outputs.push_back(rel);
  }

  void mark_volatile(const std::string &rel) { m_.volatile_outputs.push_back(rel); }

  /// Records a file some other routine already wrote.
  void record(const std::string &rel) { m_.outputs[rel] = sha256_file(path(rel)); }

  void record_input(const std::string &rel) { m_.inputs[rel] = sha256_file(path(rel)); }

  double elapsed() const { return seconds_since(start_); }

  RunManifest finish() {
    m_.finished_at = utc_now();
    const fs::path p = manifest_path(out_, m_.command, m_.argument);
    write_file_atomic(p, m_.to_json());
    return m_;
  }

 private:
  fs::path out_;
  std::chrono::steady_clock::time_point start_;
  RunManifest m_;
};

std::string dump(const json &j) { return j.dump(2) + "\n"; }

/// Checks `rel` against the manifest of the command that produced it, when
/// that manifest exists.
void check_artifact(const fs::path &out, std::string_view producer, const std::string &rel) {
  const fs::path mp = manifest_path(out, producer);
  if (!fs::exists(out / rel)) {
    throw CommandError("missing artifact " + (out / rel).string() + " (run '" + std::string(producer) + "' first)");
  }
  if (!fs::exists(mp)) {
    return;
  }
  const RunManifest m = read_manifest(mp);
  auto it = m.outputs.find(rel);
  if (it != m.outputs.end() && it->second != sha256_file(out / rel)) {
    throw CommandError("artifact " + rel + " does not match the hash recorded in " + mp.filename().string());
  }
}

ModelParams<float> load_model(const ExperimentConfig &cfg, Recorder &rec) {
  const fs::path out(cfg.out_dir);
  const std::string manifest(paths::kCheckpoint);
  const std::string payload = payload_path(fs::path(manifest)).string();
  check_artifact(out, "train", manifest);
  check_artifact(out, "train", payload);
  rec.record_input(manifest);
  rec.record_input(payload);
  auto params = load_checkpoint(out / manifest);
  if (!(params.config == cfg.model)) {
    throw CommandError("checkpoint model config differs from the experiment config");
  }
  return params;
}

WeightPool load_pool(const ExperimentConfig &cfg, Recorder &rec) {
  const fs::path out(cfg.out_dir);
  const std::string rel(paths::kPool);
  check_artifact(out, "build-pool", rel);
  rec.record_input(rel);
  std::istringstream is(read_file(out / rel));
  return read_pool(is);
}

struct Adversarial {
  std::vector<std::size_t> indices;
  std::vector<Matrix<float>> prefixes;
  int crafted_cap = 0;
};

Adversarial load_adversarial(const ExperimentConfig &cfg, Variant v, Recorder &rec) {
  const fs::path out(cfg.out_dir);
  const std::string rel = paths::adversarial(v);
  check_artifact(out, "attack", rel);
  check_artifact(out, "attack", payload_path(fs::path(rel)).string());
  rec.record_input(rel);
  rec.record_input(payload_path(fs::path(rel)).string());
  const TensorBundle b = load_bundle(out / rel);
  Adversarial a;
  a.crafted_cap = std::stoi(b.metadata.at("max_new_tokens"));
  for (const auto &[name, m] : b.tensors) {
    if (name.rfind("input_", 0) != 0) {
      throw FormatError("adversarial bundle: unexpected tensor '" + name + "'");
    }
    a.indices.push_back(static_cast<std::size_t>(std::stoul(name.substr(6))));
    a.prefixes.push_back(m);
  }
  return a;
}

std::vector<TrainingExample> to_examples(std::span<const CaptionSample> samples) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const auto &s : samples) {
    out.push_back({s.prefix, s.tokens});
  }
  return out;
}

DecodeConfig clean_decode(const ExperimentConfig &cfg, int cap) {
  DecodeConfig d = cfg.decode;
  d.max_new_tokens = cap;
  return d;
}

json pool_json(const WeightPool &pool) {
  json j = json::object();
  for (PosTag t : kAllPosTags) {
    j[std::string(to_string(t))] = {{"mean_eos_prob", pool[t].mean_eos_prob}, {"count", pool[t].count}};
  }
  return j;
}

// Per-output metrics shared by several reports.
struct OutputMetrics {
  int n_out = 0;
  bool reached_cap = false;
  RepetitionReport repetition;
  NormStats norms;
  double monitor = 0.0;
  ResourceProxy cost;
};

OutputMetrics metrics_of(const GenerationTrace &t, const ModelConfig &mc, int prompt_len, int cap) {
  OutputMetrics m;
  m.n_out = t.n_out();
  m.reached_cap = t.n_out() >= cap;
  if (!t.tokens.empty()) {
    m.repetition = repetition_report(t.tokens);
    m.norms = norm_stats(t);
    m.monitor = monitor_statistic(t);
  }
  m.cost = resource_proxy(mc, prompt_len, t.n_out());
  return m;
}

struct Aggregate {
  std::size_t count = 0;
  double mean_n_out = 0.0;
  double median_n_out = 0.0;
  double cap_rate = 0.0;
  double loop_rate = 0.0;
  double mean_repetition_fraction = 0.0;
  double mean_norm = 0.0;
  double mean_mac = 0.0;
};

Aggregate aggregate(std::span<const OutputMetrics> ms) {
  Aggregate a;
  a.count = ms.size();
  if (ms.empty()) {
    return a;
  }
  std::vector<double> n;
  for (const auto &m : ms) {
    n.push_back(m.n_out);
    a.cap_rate += m.reached_cap;
    a.loop_rate += m.repetition.loop_period > 0;
    a.mean_repetition_fraction += m.repetition.repetition_fraction;
    a.mean_norm += m.monitor;
    a.mean_mac += m.cost.mac_total;
  }
  const double k = static_cast<double>(ms.size());
  a.mean_n_out = mean_of(n);
  a.median_n_out = median_of(n);
  a.cap_rate /= k;
  a.loop_rate /= k;
  a.mean_repetition_fraction /= k;
  a.mean_norm /= k;
  a.mean_mac /= k;
  return a;
}

json aggregate_json(const Aggregate &a) {
  return {{"count", a.count},
          {"mean_n_out", a.mean_n_out},
          {"median_n_out", a.median_n_out},
          {"cap_rate", a.cap_rate},
          {"loop_rate", a.loop_rate},
          {"mean_repetition_fraction", a.mean_repetition_fraction},
          {"mean_monitor_statistic", a.mean_norm},
          {"mean_mac_total", a.mean_mac}};
}

std::vector<std::string> output_header() {
  return {"input",         "n_out",     "reached_cap",       "terminated_by", "loop_period",
          "max_trigram",   "repetition_fraction", "norm_mean", "norm_variance", "mac_total"};
}

std::vector<std::string> output_row(std::size_t input, const GenerationTrace &t, const OutputMetrics &m) {
  return {std::to_string(input),
          std::to_string(m.n_out),
          m.reached_cap ? "true" : "false",
          to_string(t.terminated_by),
          std::to_string(m.repetition.loop_period),
          std::to_string(m.repetition.max_count(3)),
          CsvWriter::number(m.repetition.repetition_fraction),
          CsvWriter::number(m.norms.mean),
          CsvWriter::number(m.norms.variance),
          CsvWriter::number(m.cost.mac_total)};
}

std::vector<Variant> campaign_variants(const ExperimentConfig &cfg) {
  if (cfg.kind == "attack") {
    return {cfg.attack.variant};
  }
  return {kAllVariants.begin(), kAllVariants.end()};
}

std::string variant_dir(Variant v) { return std::string(paths::kAttackDir) + "/" + std::string(to_string(v)); }

std::uint64_t attack_seed_base(const ExperimentConfig &cfg) { return derive_seed(cfg.seed, kAttackStream); }

int count_repeated_bigram_outputs(std::span<const GenerationTrace> traces) {
  int bad = 0;
  for (const auto &t : traces) {
    if (t.tokens.size() >= 2 && repetition_report(t.tokens).max_count(2) > 1) {
      ++bad;
    }
  }
  return bad;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string paths::adversarial(Variant v) { return variant_dir(v) + "/adversarial.manifest"; }
std::string paths::results(Variant v) { return variant_dir(v) + "/results.csv"; }

std::uint64_t split_offset(Split split) {
  switch (split) {
    case Split::pool:
      return 0;
    case Split::eval:
      return std::uint64_t{1} << 20;
    case Split::validation:
      return std::uint64_t{2} << 20;
    case Split::train:
      return std::uint64_t{3} << 20;
  }
  throw std::invalid_argument("split_offset: unknown split");
}

std::vector<CaptionSample> corpus_split(const CaptionCorpus &corpus, std::uint64_t seed, Split split,
                                        std::size_t count, std::size_t start) {
  return corpus.generate(seed, split_offset(split) + start, count);
}

std::vector<Matrix<float>> prefixes_of(std::span<const CaptionSample> samples) {
  std::vector<Matrix<float>> out;
  out.reserve(samples.size());
  for (const auto &s : samples) {
    out.push_back(s.prefix);
  }
  return out;
}

Setup::Setup(const ExperimentConfig &cfg)
    : vocab(make_caption_vocabulary()),
      corpus(vocab, cfg.corpus.grammar, cfg.model.prefix_len, cfg.model.hidden_dim) {}

// ---------------------------------------------------------------------------

std::string RunManifest::to_json() const {
  json j;
  j["schema"] = kManifestSchema;
  j["command"] = command;
  j["argument"] = argument;
  j["code_version"] = code_version;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  j["config"] = json::parse(config_json);
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["volatile_outputs"] = volatile_outputs;
  return dump(j);
}

RunManifest RunManifest::parse(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error &e) {
    throw FormatError(std::string("run manifest: ") + e.what());
  }
  if (!j.is_object() || j.value("schema", "") != kManifestSchema) {
    throw FormatError("run manifest: missing or unsupported schema");
  }
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.argument = j.value("argument", "");
    m.code_version = j.at("code_version").get<std::string>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.config_json = j.at("config").dump(2) + "\n";
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.volatile_outputs = j.at("volatile_outputs").get<std::vector<std::string>>();
  } catch (const json::exception &e) {
    throw FormatError(std::string("run manifest: ") + e.what());
  }
  return m;
}

fs::path manifest_path(const fs::path &out_dir, std::string_view command, std::string_view argument) {
  std::string name(command);
  if (!argument.empty()) {
    name += "-" + std::string(argument);
  }
  return out_dir / (name + ".manifest.json");
}

RunManifest read_manifest(const fs::path &path) { return RunManifest::parse(read_file(path)); }

void verify_outputs(const RunManifest &manifest, const fs::path &out_dir) {
  for (const auto &[rel, hash] : manifest.outputs) {
    if (!fs::exists(out_dir / rel)) {
      throw CommandError("output " + rel + " is missing");
    }
    if (sha256_file(out_dir / rel) != hash) {
      throw CommandError("output " + rel + " does not match its recorded hash");
    }
  }
}

// ---------------------------------------------------------------------------

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)> &f) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back(work);
    }
    for (auto &t : pool) {
      t.join();
    }
  }
  for (const auto &e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
}

std::uint64_t input_seed(std::uint64_t base, std::size_t index) { return base ^ static_cast<std::uint64_t>(index); }

std::size_t CampaignOutcome::completed() const {
  return static_cast<std::size_t>(std::count_if(results.begin(), results.end(), [](const auto &r) { return r.has_value(); }));
}

CampaignOutcome run_campaign(const AttackContext &ctx, std::span<const Matrix<float>> inputs,
                             const ObjectiveConfig &obj, const AttackConfig &cfg, std::uint64_t seed_base,
                             int threads) {
  CampaignOutcome out;
  out.results.resize(inputs.size());
  out.errors.resize(inputs.size());
  parallel_for(inputs.size(), threads, [&](std::size_t i) {
    AttackConfig ac = cfg;
    ac.seed = input_seed(seed_base, i);
    try {
      out.results[i] = run_attack(inputs[i], ctx, obj, ac);
    } catch (const std::exception &e) {
      out.errors[i] = e.what();
    }
  });
  return out;
}

std::vector<GenerationTrace> decode_all(const ModelParams<float> &params, std::span<const Matrix<float>> prefixes,
                                        std::span<const TokenId> prompt, const DecodeConfig &cfg, int threads) {
  std::vector<GenerationTrace> out(prefixes.size());
  parallel_for(prefixes.size(), threads, [&](std::size_t i) {
    DecodeConfig d = cfg;
    d.seed = input_seed(cfg.seed, i);
    out[i] = generate(params, prefixes[i], prompt, d);
  });
  return out;
}

bool pos_ordering_holds(const WeightPool &pool) {
  const double punct = pool[PosTag::PUNCT_SENT].mean_eos_prob;
  return punct > pool[PosTag::ADJ].mean_eos_prob && punct > pool[PosTag::ADV].mean_eos_prob &&
         punct > pool[PosTag::VERB].mean_eos_prob;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

RunManifest cmd_train(const ExperimentConfig &cfg) {
  cfg.validate();
  Setup setup(cfg);
  Recorder rec(cfg, "train");
  const auto &prompt = setup.vocab.prompt();
  const int threads = cfg.thread_count();

  auto params = init_params(cfg.model, derive_seed(cfg.seed, kInitStream));
  const auto validation = corpus_split(setup.corpus, cfg.corpus.seed, Split::validation,
                                       static_cast<std::size_t>(cfg.corpus.validation_size));
  const auto val_examples = to_examples(validation);
  const auto val_prefixes = prefixes_of(validation);
  const DecodeConfig greedy = clean_decode(cfg, cfg.decode.max_new_tokens);

  const WeightPool pool_before =
      pool_from_traces(setup.vocab, prompt, decode_all(params, val_prefixes, prompt, greedy, threads));

  AdamConfig adam;
  adam.learning_rate = cfg.train.learning_rate;
  adam.grad_clip = cfg.train.grad_clip;
  Trainer trainer(params, adam);

  CsvWriter log({"step", "mean_train_loss", "validation_loss"});
  double best = std::numeric_limits<double>::infinity();
  int best_step = 0;
  int step = 0;
  bool converged = false;
  double interval_loss = 0.0;
  double last_val = std::numeric_limits<double>::quiet_NaN();
  const auto bs = static_cast<std::size_t>(cfg.train.batch_size);
  while (step < cfg.train.max_steps) {
    ++step;
    const auto batch = to_examples(
        corpus_split(setup.corpus, cfg.corpus.seed, Split::train, bs, static_cast<std::size_t>(step - 1) * bs));
    const double loss = trainer.train_step(params, batch, prompt);
    if (!std::isfinite(loss) || !params.all_finite()) {
      rec.write("train_log.csv", log.str());
      rec.finish();
      throw CommandError("training diverged at step " + std::to_string(step) + ": loss " + std::to_string(loss) +
                         ", last validation loss " + std::to_string(last_val));
    }
    interval_loss += loss;
    if (step % cfg.train.eval_every == 0) {
      last_val = evaluate_loss(params, val_examples, prompt);
      log.row(step, interval_loss / cfg.train.eval_every, last_val);
      interval_loss = 0.0;
      if (last_val < best - cfg.train.plateau_tolerance) {
        best = last_val;
        best_step = step;
      }
      if (step >= cfg.train.min_steps && step - best_step >= cfg.train.plateau_steps) {
        converged = true;
        break;
      }
    }
  }

  save_checkpoint(rec.path(paths::kCheckpoint), params);
  rec.record(std::string(paths::kCheckpoint));
  rec.record(payload_path(fs::path(paths::kCheckpoint)).string());
  rec.write("train_log.csv", log.str());

  const auto traces = decode_all(params, val_prefixes, prompt, greedy, threads);
  int grammatical = 0;
  for (const auto &t : traces) {
    grammatical += is_grammatical(setup.vocab, t.tokens);
  }
  const double fitness = static_cast<double>(grammatical) / static_cast<double>(traces.size());
  const WeightPool pool_after = pool_from_traces(setup.vocab, prompt, traces);

  json summary;
  summary["schema_version"] = kSummarySchemaVersion;
  summary["steps"] = step;
  summary["converged"] = converged;
  summary["best_validation_loss"] = best;
  summary["final_validation_loss"] = last_val;
  summary["parameter_count"] = params.parameter_count();
  summary["grammatical_fraction"] = fitness;
  summary["fitness_threshold"] = cfg.train.fitness_threshold;
  summary["pos_ordering_untrained"] = pos_ordering_holds(pool_before);
  summary["pos_ordering_trained"] = pos_ordering_holds(pool_after);
  summary["validation_pool"] = pool_json(pool_after);
  rec.write("train_summary.json", dump(summary));
  rec.write_volatile("train.timing.json", dump(json{{"wall_seconds", rec.elapsed()}}));
  RunManifest m = rec.finish();
  if (fitness < cfg.train.fitness_threshold) {
    throw CommandError("fitness gate failed: " + std::to_string(grammatical) + "/" + std::to_string(traces.size()) +
                       " grammatical greedy decodes, need " + std::to_string(cfg.train.fitness_threshold));
  }
  return m;
}

// ---------------------------------------------------------------------------
// build-pool
// ---------------------------------------------------------------------------

RunManifest cmd_build_pool(const ExperimentConfig &cfg) {
  cfg.validate();
  Setup setup(cfg);
  Recorder rec(cfg, "build-pool");
  const auto params = load_model(cfg, rec);
  const auto inputs = prefixes_of(
      corpus_split(setup.corpus, cfg.corpus.seed, Split::pool, static_cast<std::size_t>(cfg.corpus.pool_size)));
  const auto traces = decode_all(params, inputs, setup.vocab.prompt(), clean_decode(cfg, cfg.decode.max_new_tokens),
                                 cfg.thread_count());
  const WeightPool pool = pool_from_traces(setup.vocab, setup.vocab.prompt(), traces);

  std::ostringstream os;
  write_pool(os, pool);
  rec.write(std::string(paths::kPool), os.str());

  std::vector<PosTag> tags;
  for (PosTag t : kAllPosTags) {
    if (pool[t].count > 0) {
      tags.push_back(t);
    }
  }
  std::stable_sort(tags.begin(), tags.end(),
                   [&pool](PosTag a, PosTag b) { return pool[a].mean_eos_prob > pool[b].mean_eos_prob; });
  CsvWriter table({"rank", "tag", "mean_eos_prob", "count", "frequency"});
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto &e = pool[tags[i]];
    table.row(i + 1, to_string(tags[i]), e.mean_eos_prob, e.count, e.frequency);
  }
  rec.write("pool_table.csv", table.str());
  rec.write_volatile("build-pool.timing.json", dump(json{{"wall_seconds", rec.elapsed()}}));
  return rec.finish();
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

RunManifest cmd_attack(const ExperimentConfig &cfg) {
  cfg.validate();
  Setup setup(cfg);
  Recorder rec(cfg, "attack");
  const auto params = load_model(cfg, rec);
  const WeightPool pool = load_pool(cfg, rec);
  const auto &prompt = setup.vocab.prompt();
  const int plen = static_cast<int>(prompt.size());
  const int cap = cfg.attack.max_new_tokens;
  const int threads = cfg.thread_count();
  const auto inputs = prefixes_of(
      corpus_split(setup.corpus, cfg.corpus.seed, Split::eval, static_cast<std::size_t>(cfg.corpus.eval_size)));

  const auto clean = decode_all(params, inputs, prompt, clean_decode(cfg, cap), threads);
  std::vector<OutputMetrics> clean_metrics;
  CsvWriter clean_csv(output_header());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    clean_metrics.push_back(metrics_of(clean[i], cfg.model, plen, cap));
    clean_csv.add_row(output_row(i, clean[i], clean_metrics.back()));
  }
  rec.write(std::string(paths::kAttackDir) + "/clean.csv", clean_csv.str());
  const Aggregate clean_agg = aggregate(clean_metrics);

  json summary;
  summary["schema_version"] = kSummarySchemaVersion;
  summary["kind"] = cfg.kind;
  summary["inputs"] = inputs.size();
  summary["max_new_tokens"] = cap;
  summary["epsilon"] = cfg.attack.epsilon;
  summary["cost_model"] = "multiply-accumulate proxy; energy and latency scale with generated tokens";
  summary["clean"] = aggregate_json(clean_agg);
  summary["variants"] = json::object();
  json timing = json::object();
  std::vector<std::string> failures;

  const AttackContext ctx{params, setup.vocab, prompt, pool};
  for (Variant v : campaign_variants(cfg)) {
    AttackConfig ac = cfg.attack;
    ac.variant = v;
    const auto start = std::chrono::steady_clock::now();
    const CampaignOutcome outcome = run_campaign(ctx, inputs, cfg.objective, ac, attack_seed_base(cfg), threads);
    const double wall = seconds_since(start);

    CsvWriter results({"input", "n_out", "reached_cap", "terminated_by", "loop_period", "max_trigram",
                       "repetition_fraction", "norm_mean", "norm_variance", "mac_total", "iterations",
                       "stop_reason"});
    CsvWriter iterations({"input", "iteration", "n_out", "l_lps", "l_rep", "lambda_t", "total", "linf_distance"});
    TensorBundle bundle;
    bundle.metadata = {{"kind", "adversarial"},
                       {"variant", std::string(to_string(v))},
                       {"max_new_tokens", std::to_string(cap)},
                       {"epsilon", CsvWriter::number(ac.epsilon)}};
    std::vector<OutputMetrics> ms;
    AttackTiming t_sum;
    std::string failed;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!outcome.results[i]) {
        failed += "input " + std::to_string(i) + ": " + outcome.errors[i] + "\n";
        continue;
      }
      const AttackResult &r = *outcome.results[i];
      ms.push_back(metrics_of(r.final_trace, cfg.model, plen, cap));
      auto row = output_row(i, r.final_trace, ms.back());
      row.push_back(std::to_string(r.log.size()));
      row.push_back(r.stop_reason);
      results.add_row(std::move(row));
      for (const auto &it : r.log) {
        if (it.loss) {
          iterations.row(i, it.iteration, it.n_out, it.loss->l_lps, it.loss->l_rep, it.loss->lambda_t,
                         it.loss->total, it.linf_distance);
        } else {
          iterations.row(i, it.iteration, it.n_out, "", "", "", "", it.linf_distance);
        }
      }
      bundle.tensors.emplace_back("input_" + std::to_string(i), r.adversarial);
      t_sum.decode_seconds += r.timing.decode_seconds;
      t_sum.gradient_seconds += r.timing.gradient_seconds;
      t_sum.total_seconds += r.timing.total_seconds;
    }
    const std::string dir = variant_dir(v);
    rec.write(dir + "/results.csv", results.str());
    rec.write(dir + "/iterations.csv", iterations.str());
    fs::create_directories(rec.path(dir));
    save_bundle(rec.path(paths::adversarial(v)), bundle);
    rec.record(paths::adversarial(v));
    rec.record(payload_path(fs::path(paths::adversarial(v))).string());
    if (!failed.empty()) {
      rec.write(dir + "/FAILED", failed);
      failures.push_back(std::string(to_string(v)));
    }

    json entry = aggregate_json(aggregate(ms));
    entry["total"] = inputs.size();
    entry["completed"] = ms.size();
    entry["mean_n_out_ratio_to_clean"] =
        clean_agg.mean_n_out > 0.0 ? aggregate(ms).mean_n_out / clean_agg.mean_n_out : 0.0;
    entry["mac_ratio_to_clean"] = clean_agg.mean_mac > 0.0 ? aggregate(ms).mean_mac / clean_agg.mean_mac : 0.0;
    summary["variants"][std::string(to_string(v))] = entry;
    timing[std::string(to_string(v))] = {{"wall_seconds", wall},
                                         {"attack_seconds", t_sum.total_seconds},
                                         {"decode_seconds", t_sum.decode_seconds},
                                         {"gradient_seconds", t_sum.gradient_seconds}};
  }
  summary["failed_variants"] = failures;
  rec.write(std::string(paths::kAttackDir) + "/summary.json", dump(summary));
  rec.write_volatile("attack.timing.json", dump(timing));
  RunManifest m = rec.finish();
  if (!failures.empty()) {
    throw CommandError("attack failed on some inputs for variant(s): " + failures.front() +
                       (failures.size() > 1 ? " and others" : "") + "; see FAILED markers");
  }
  return m;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

RunManifest cmd_ablate(const ExperimentConfig &cfg, std::string_view which) {
  cfg.validate();
  if (std::find(kAblations.begin(), kAblations.end(), which) == kAblations.end()) {
    throw ConfigError("unknown ablation '" + std::string(which) + "'");
  }
  Setup setup(cfg);
  Recorder rec(cfg, "ablate", std::string(which));
  const auto params = load_model(cfg, rec);
  const WeightPool pool = load_pool(cfg, rec);
  const auto &prompt = setup.vocab.prompt();
  const int plen = static_cast<int>(prompt.size());
  const int threads = cfg.thread_count();
  const auto inputs = prefixes_of(
      corpus_split(setup.corpus, cfg.corpus.seed, Split::eval, static_cast<std::size_t>(cfg.ablation.inputs)));
  const AttackContext ctx{params, setup.vocab, prompt, pool};
  const auto &ab = cfg.ablation;

  CsvWriter csv(which == "convergence"
                    ? std::vector<std::string>{"iteration", "variant", "inputs", "mean_n_out", "cap_rate"}
                    : std::vector<std::string>{"value", "variant", "inputs", "mean_n_out", "median_n_out", "cap_rate",
                                               "loop_rate"});
  auto emit = [&](double value, std::string_view variant, std::span<const GenerationTrace> traces, int cap) {
    std::vector<OutputMetrics> ms;
    for (const auto &t : traces) {
      ms.push_back(metrics_of(t, cfg.model, plen, cap));
    }
    const Aggregate a = aggregate(ms);
    csv.row(value, variant, a.count, a.mean_n_out, a.median_n_out, a.cap_rate, a.loop_rate);
  };
  auto final_traces = [](const CampaignOutcome &o) {
    std::vector<GenerationTrace> t;
    for (std::size_t i = 0; i < o.results.size(); ++i) {
      if (!o.results[i]) {
        throw CommandError("ablation attack failed on input " + std::to_string(i) + ": " + o.errors[i]);
      }
      t.push_back(o.results[i]->final_trace);
    }
    return t;
  };
  auto campaign = [&](Variant v, AttackConfig ac, const ObjectiveConfig &obj) {
    ac.variant = v;
    return run_campaign(ctx, inputs, obj, ac, attack_seed_base(cfg), threads);
  };

  if (which == "lambda_rep") {
    for (double value : ab.lambda_rep) {
      ObjectiveConfig obj = cfg.objective;
      obj.lambda_rep = value;
      for (Variant v : ab.variants) {
        emit(value, to_string(v), final_traces(campaign(v, cfg.attack, obj)), cfg.attack.max_new_tokens);
      }
    }
  } else if (which == "max_tokens" || which == "epsilon") {
    const bool caps = which == "max_tokens";
    const std::vector<double> values =
        caps ? std::vector<double>(ab.max_tokens.begin(), ab.max_tokens.end()) : ab.epsilon;
    for (double value : values) {
      AttackConfig ac = cfg.attack;
      if (caps) {
        ac.max_new_tokens = static_cast<int>(value);
      } else {
        ac.epsilon = value;
        ac.step_size = value / 8.0;
      }
      emit(value, "clean", decode_all(params, inputs, prompt, clean_decode(cfg, ac.max_new_tokens), threads),
           ac.max_new_tokens);
      for (Variant v : ab.variants) {
        emit(value, to_string(v), final_traces(campaign(v, ac, cfg.objective)), ac.max_new_tokens);
      }
    }
  } else if (which == "temperature" || which == "top_p") {
    std::vector<std::pair<std::string, std::vector<Matrix<float>>>> sources{{"clean", inputs}};
    for (Variant v : ab.variants) {
      std::vector<Matrix<float>> adv;
      for (auto &t : campaign(v, cfg.attack, cfg.objective).results) {
        if (!t) {
          throw CommandError("ablation attack failed");
        }
        adv.push_back(t->adversarial);
      }
      sources.emplace_back(std::string(to_string(v)), std::move(adv));
    }
    const auto &values = which == "temperature" ? ab.temperature : ab.top_p;
    for (double value : values) {
      DecodeConfig d = clean_decode(cfg, cfg.attack.max_new_tokens);
      d.mode = DecodeMode::sampled;
      d.seed = derive_seed(cfg.seed, kSampleStream);
      (which == "temperature" ? d.temperature : d.top_p) = value;
      for (const auto &[name, prefixes] : sources) {
        emit(value, name, decode_all(params, prefixes, prompt, d, threads), d.max_new_tokens);
      }
    }
  } else {
    const int cap = cfg.attack.max_new_tokens;
    for (Variant v : ab.variants) {
      if (v == Variant::noise) {
        continue;
      }
      const CampaignOutcome o = campaign(v, cfg.attack, cfg.objective);
      for (int t = ab.convergence_every; t <= cfg.attack.iterations; t += ab.convergence_every) {
        std::vector<double> n;
        double capped = 0.0;
        for (const auto &r : o.results) {
          if (!r) {
            throw CommandError("ablation attack failed");
          }
          // After an early stop the output stays at the cap.
          const int k = std::min<int>(t, static_cast<int>(r->log.size()));
          const int value = r->log.at(static_cast<std::size_t>(k - 1)).n_out;
          n.push_back(value);
          capped += value >= cap;
        }
        csv.row(t, to_string(v), n.size(), mean_of(n), capped / static_cast<double>(n.size()));
      }
    }
  }
  rec.write("ablate_" + std::string(which) + ".csv", csv.str());
  rec.write_volatile("ablate-" + std::string(which) + ".timing.json", dump(json{{"wall_seconds", rec.elapsed()}}));
  return rec.finish();
}

// ---------------------------------------------------------------------------
// transfer
// ---------------------------------------------------------------------------

RunManifest cmd_transfer(const ExperimentConfig &cfg) {
  cfg.validate();
  Setup setup(cfg);
  Recorder rec(cfg, "transfer");
  const auto params = load_model(cfg, rec);
  const Adversarial adv = load_adversarial(cfg, cfg.transfer.variant, rec);
  const auto &prompt = setup.vocab.prompt();
  const int threads = cfg.thread_count();
  const auto eval = corpus_split(setup.corpus, cfg.corpus.seed, Split::eval,
                                 static_cast<std::size_t>(cfg.corpus.eval_size));
  std::vector<Matrix<float>> clean;
  for (std::size_t i : adv.indices) {
    clean.push_back(eval.at(i).prefix);
  }

  const auto crafted = decode_all(params, adv.prefixes, prompt, clean_decode(cfg, adv.crafted_cap), threads);
  const auto clean_crafted = decode_all(params, clean, prompt, clean_decode(cfg, adv.crafted_cap), threads);
  std::vector<int> loop(crafted.size());
  std::vector<bool> persistent(crafted.size());
  for (std::size_t i = 0; i < crafted.size(); ++i) {
    loop[i] = crafted[i].tokens.empty() ? 0 : repetition_report(crafted[i].tokens).loop_period;
    persistent[i] = crafted[i].n_out() >= adv.crafted_cap && loop[i] > 0;
  }

  CsvWriter csv({"source", "input", "cap", "n_out", "crafted_n_out", "crafted_loop_period", "looping_at_crafting_cap"});
  json caps = json::array();
  for (int cap : cfg.transfer.caps) {
    const auto a = decode_all(params, adv.prefixes, prompt, clean_decode(cfg, cap), threads);
    const auto c = decode_all(params, clean, prompt, clean_decode(cfg, cap), threads);
    std::vector<double> an, cn, pn;
    double max_change = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      csv.row("adversarial", adv.indices[i], cap, a[i].n_out(), crafted[i].n_out(), loop[i], persistent[i]);
      csv.row("clean", adv.indices[i], cap, c[i].n_out(), clean_crafted[i].n_out(), 0, false);
      an.push_back(a[i].n_out());
      cn.push_back(c[i].n_out());
      if (persistent[i]) {
        pn.push_back(a[i].n_out());
      }
      const double base = std::max(1, clean_crafted[i].n_out());
      max_change = std::max(max_change, std::abs(c[i].n_out() - clean_crafted[i].n_out()) / base);
    }
    caps.push_back({{"cap", cap},
                    {"adversarial_mean_n_out", mean_of(an)},
                    {"clean_mean_n_out", mean_of(cn)},
                    {"looping_count", pn.size()},
                    {"looping_mean_n_out", pn.empty() ? 0.0 : mean_of(pn)},
                    {"clean_max_relative_change", max_change}});
  }
  rec.write("transfer.csv", csv.str());
  json summary{{"schema_version", kSummarySchemaVersion},
               {"variant", std::string(to_string(cfg.transfer.variant))},
               {"crafting_cap", adv.crafted_cap},
               {"caps", caps}};
  rec.write("transfer_summary.json", dump(summary));
  rec.write_volatile("transfer.timing.json", dump(json{{"wall_seconds", rec.elapsed()}}));
  return rec.finish();
}

// ---------------------------------------------------------------------------
// defend
// ---------------------------------------------------------------------------

RunManifest cmd_defend(const ExperimentConfig &cfg) {
  cfg.validate();
  Setup setup(cfg);
  Recorder rec(cfg, "defend");
  const auto params = load_model(cfg, rec);
  const Adversarial adv = load_adversarial(cfg, cfg.defense.variant, rec);
  const auto &prompt = setup.vocab.prompt();
  const int threads = cfg.thread_count();
  const int cap = adv.crafted_cap;
  const auto &df = cfg.defense;
  const auto eval = corpus_split(setup.corpus, cfg.corpus.seed, Split::eval,
                                 static_cast<std::size_t>(cfg.corpus.eval_size));
  const auto clean = prefixes_of(eval);

  // Decoding knobs.
  CsvWriter knobs({"repetition_penalty", "no_repeat_ngram_size", "source", "mean_n_out", "cap_rate",
                   "outputs_with_repeated_bigram"});
  std::vector<double> penalties{1.0};
  penalties.insert(penalties.end(), df.repetition_penalties.begin(), df.repetition_penalties.end());
  for (double p1 : penalties) {
    for (int p2 : df.no_repeat_ngram_sizes) {
      DecodeConfig d = clean_decode(cfg, cap);
      d.repetition_penalty = p1;
      d.no_repeat_ngram_size = p2;
      for (const auto &[name, prefixes] :
           {std::pair<const char *, const std::vector<Matrix<float>> *>{"adversarial", &adv.prefixes},
            {"clean", &clean}}) {
        const auto traces = decode_all(params, *prefixes, prompt, d, threads);
        std::vector<double> n;
        double capped = 0.0;
        for (const auto &t : traces) {
          n.push_back(t.n_out());
          capped += t.n_out() >= cap;
        }
        knobs.row(p1, p2, name, mean_of(n), capped / static_cast<double>(n.size()),
                  count_repeated_bigram_outputs(traces));
      }
    }
  }
  rec.write("defend_decoding.csv", knobs.str());

  const auto attacked = decode_all(params, adv.prefixes, prompt, clean_decode(cfg, cap), threads);
  const auto clean_traces = decode_all(params, clean, prompt, clean_decode(cfg, cap), threads);

  // n-gram filter.
  CsvWriter ngram({"n", "threshold", "tpr", "fpr"});
  for (int n : df.ngram_orders) {
    std::vector<DefenseVerdict> a, c;
    auto verdict = [&](const GenerationTrace &t) {
      return t.tokens.empty() ? DefenseVerdict{} : ngram_filter(repetition_report(t.tokens), n, df.ngram_threshold);
    };
    for (const auto &t : attacked) {
      a.push_back(verdict(t));
    }
    for (const auto &t : clean_traces) {
      c.push_back(verdict(t));
    }
    const auto r = detection_rates(a, c);
    ngram.row(n, df.ngram_threshold, r.tpr, r.fpr);
  }
  rec.write("defend_ngram.csv", ngram.str());

  // Norm monitor, fit on clean validation traces.
  const auto calibration = prefixes_of(corpus_split(setup.corpus, cfg.corpus.seed, Split::validation,
                                                    static_cast<std::size_t>(df.calibration_size)));
  const auto calib_traces = decode_all(params, calibration, prompt, clean_decode(cfg, cap), threads);
  const MonitorBaseline baseline = norm_monitor_baseline(std::span<const GenerationTrace>(calib_traces));
  CsvWriter monitor({"n_sigma", "tpr", "fpr"});
  CsvWriter verdicts({"source", "input", "n_sigma", "statistic", "flagged"});
  for (double n_sigma : df.monitor_n) {
    std::vector<DefenseVerdict> a, c;
    for (std::size_t i = 0; i < attacked.size(); ++i) {
      a.push_back(norm_monitor(baseline, attacked[i], n_sigma));
      verdicts.row("adversarial", adv.indices[i], n_sigma, a.back().statistic, a.back().flagged);
    }
    for (std::size_t i = 0; i < clean_traces.size(); ++i) {
      c.push_back(norm_monitor(baseline, clean_traces[i], n_sigma));
      verdicts.row("clean", i, n_sigma, c.back().statistic, c.back().flagged);
    }
    const auto r = detection_rates(a, c);
    monitor.row(n_sigma, r.tpr, r.fpr);
  }
  rec.write("defend_monitor.csv", monitor.str());
  rec.write("defend_monitor_verdicts.csv", verdicts.str());

  json summary{{"schema_version", kSummarySchemaVersion},
               {"variant", std::string(to_string(df.variant))},
               {"cap", cap},
               {"monitor_baseline",
                {{"mu", baseline.mu},
                 {"sigma", baseline.sigma},
                 {"count", baseline.count},
                 {"sigma_convention", "population"},
                 {"statistic", "per-token layer-averaged norm, then averaged over tokens"}}},
               {"ngram_threshold", df.ngram_threshold}};
  rec.write("defend_summary.json", dump(summary));
  rec.write_volatile("defend.timing.json", dump(json{{"wall_seconds", rec.elapsed()}}));
  return rec.finish();
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

RunManifest cmd_report(const ExperimentConfig &cfg) {
  cfg.validate();
  Setup setup(cfg);
  Recorder rec(cfg, "report");
  const fs::path out(cfg.out_dir);
  const auto params = load_model(cfg, rec);
  const Adversarial adv = load_adversarial(cfg, cfg.mixing.variant, rec);
  const auto &prompt = setup.vocab.prompt();
  const auto eval = corpus_split(setup.corpus, cfg.corpus.seed, Split::eval,
                                 static_cast<std::size_t>(cfg.corpus.eval_size));
  const auto clean = prefixes_of(eval);
  const auto b = static_cast<std::size_t>(cfg.mixing.batch_size);
  if (adv.prefixes.size() < b) {
    throw CommandError("report: mixing needs " + std::to_string(b) + " adversarial inputs, found " +
                       std::to_string(adv.prefixes.size()));
  }
  std::vector<Matrix<float>> mix_clean;
  for (std::size_t i = 0; i < b; ++i) {
    mix_clean.push_back(eval.at(adv.indices[i]).prefix);
  }
  const auto rows = batch_mixing_experiment(params, prompt, mix_clean,
                                            std::span(adv.prefixes).subspan(0, b), cfg.mixing.batch_size,
                                            cfg.mixing.sweep, clean_decode(cfg, adv.crafted_cap));
  CsvWriter mixing({"m_adv", "norm_mean", "norm_variance", "mean_n_out", "mean_repetition_fraction"});
  std::vector<double> m, nm, nv, no;
  for (const auto &r : rows) {
    mixing.row(r.m_adv, r.norm_mean, r.norm_variance, r.mean_n_out, r.mean_repetition_fraction);
    m.push_back(r.m_adv);
    nm.push_back(r.norm_mean);
    nv.push_back(r.norm_variance);
    no.push_back(r.mean_n_out);
  }
  rec.write("mixing.csv", mixing.str());

  json report;
  report["schema_version"] = kSummarySchemaVersion;
  report["mixing"] = {{"variant", std::string(to_string(cfg.mixing.variant))},
                      {"batch_size", cfg.mixing.batch_size},
                      {"spearman_norm_mean", spearman(m, nm)},
                      {"spearman_norm_variance", spearman(m, nv)},
                      {"spearman_mean_n_out", spearman(m, no)}};
  auto include = [&](const char *key, const std::string &rel, std::string_view producer) {
    if (fs::exists(out / rel)) {
      check_artifact(out, producer, rel);
      rec.record_input(rel);
      report[key] = json::parse(read_file(out / rel));
    }
  };
  include("attack", std::string(paths::kAttackDir) + "/summary.json", "attack");
  include("transfer", "transfer_summary.json", "transfer");
  include("defense", "defend_summary.json", "defend");
  include("training", "train_summary.json", "train");
  if (fs::exists(out / paths::kPool)) {
    rec.record_input(std::string(paths::kPool));
    std::istringstream is(read_file(out / paths::kPool));
    report["pool"] = pool_json(read_pool(is));
  }
  rec.write("report.json", dump(report));

  std::ostringstream txt;
  if (report.contains("attack")) {
    const auto &a = report["attack"];
    txt << "variant        mean_n_out  median  cap_rate  loop_rate  mac_ratio\n";
    char line[160];
    std::snprintf(line, sizeof line, "%-14s %10.2f %7.1f %9.2f %10.2f %10s\n", "clean",
                  a["clean"]["mean_n_out"].get<double>(), a["clean"]["median_n_out"].get<double>(),
                  a["clean"]["cap_rate"].get<double>(), a["clean"]["loop_rate"].get<double>(), "1.00");
    txt << line;
    for (const auto &[name, v] : a["variants"].items()) {
      std::snprintf(line, sizeof line, "%-14s %10.2f %7.1f %9.2f %10.2f %10.2f\n", name.c_str(),
                    v["mean_n_out"].get<double>(), v["median_n_out"].get<double>(), v["cap_rate"].get<double>(),
                    v["loop_rate"].get<double>(), v["mac_ratio_to_clean"].get<double>());
      txt << line;
    }
    txt << "\n";
  }
  txt << "batch mixing (B=" << cfg.mixing.batch_size << ")\nm_adv  norm_mean  norm_variance  mean_n_out\n";
  for (const auto &r : rows) {
    char line[120];
    std::snprintf(line, sizeof line, "%5d %10.4f %14.4f %11.2f\n", r.m_adv, r.norm_mean, r.norm_variance,
                  r.mean_n_out);
    txt << line;
  }
  rec.write("report.txt", txt.str());
  return rec.finish();
}

// ---------------------------------------------------------------------------

RunManifest cmd_pipeline(const ExperimentConfig &cfg) {
  cfg.validate();
  Recorder rec(cfg, "pipeline");
  for (auto *stage : {&cmd_train, &cmd_build_pool, &cmd_attack, &cmd_transfer, &cmd_defend, &cmd_report}) {
    const RunManifest m = stage(cfg);
    for (const auto &[rel, hash] : m.outputs) {
      rec.record(rel);
    }
    for (const auto &rel : m.volatile_outputs) {
      rec.mark_volatile(rel);
    }
  }
  return rec.finish();
}

RunManifest run_command(const ExperimentConfig &cfg, std::string_view command, std::string_view argument) {
  if (command == "train") {
    return cmd_train(cfg);
  }
  if (command == "build-pool") {
    return cmd_build_pool(cfg);
  }
  if (command == "attack") {
    return cmd_attack(cfg);
  }
  if (command == "ablate") {
    return cmd_ablate(cfg, argument);
  }
  if (command == "transfer") {
    return cmd_transfer(cfg);
  }
  if (command == "defend") {
    return cmd_defend(cfg);
  }
  if (command == "report") {
    return cmd_report(cfg);
  }
  if (command == "pipeline") {
    return cmd_pipeline(cfg);
  }
  throw ConfigError("unknown command '" + std::string(command) + "'");
}

RunManifest replay(const fs::path &manifest, const std::optional<fs::path> &out_dir) {
  const RunManifest m = read_manifest(manifest);
  ExperimentConfig cfg = config_from_json(m.config_json);
  if (out_dir) {
    cfg.out_dir = out_dir->string();
  }
  return run_command(cfg, m.command, m.argument);
}

}  // namespace sponge
