// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sponge/harness.hpp"
#include "sponge/io.hpp"

#include <json.hpp>

#include <set>
#include <thread>
#include <type_traits>

namespace sponge {

namespace {

using json = nlohmann::ordered_json;

template <typename T>
struct is_vector : std::false_type {};
template <typename T>
struct is_vector<std::vector<T>> : std::true_type {};
template <typename T>
struct is_array : std::false_type {};
template <typename T, std::size_t N>
struct is_array<std::array<T, N>> : std::true_type {};

DecodeMode parse_decode_mode(std::string_view s) {
  if (s == "greedy") {
    return DecodeMode::greedy;
  }
  if (s == "sampled") {
    return DecodeMode::sampled;
  }
  throw ConfigError("unknown decode mode '" + std::string(s) + "'");
}

const char *to_string(DecodeMode m) { return m == DecodeMode::greedy ? "greedy" : "sampled"; }

template <typename T>
void read_value(const json &j, const std::string &where, T &out) {
  auto fail = [&where](const char *want) { throw ConfigError("config key '" + where + "' must be " + want); };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) {
      fail("a boolean");
    }
    out = j.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) {
      fail("an integer");
    }
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned()) {
        out = j.get<T>();
      } else if (j.get<std::int64_t>() < 0) {
        fail("non-negative");
      } else {
        out = static_cast<T>(j.get<std::int64_t>());
      }
    } else {
      out = j.get<T>();
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) {
      fail("a number");
    }
    out = j.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) {
      fail("a string");
    }
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, Variant>) {
    if (!j.is_string()) {
      fail("a variant name");
    }
    try {
      out = parse_variant(j.get<std::string>());
    } catch (const std::invalid_argument &e) {
      throw ConfigError("config key '" + where + "': " + e.what());
    }
  } else if constexpr (std::is_same_v<T, DecodeMode>) {
    if (!j.is_string()) {
      fail("\"greedy\" or \"sampled\"");
    }
    out = parse_decode_mode(j.get<std::string>());
  } else if constexpr (is_vector<T>::value) {
    if (!j.is_array()) {
      fail("an array");
    }
    out.clear();
    for (std::size_t i = 0; i < j.size(); ++i) {
      typename T::value_type v{};
      read_value(j[i], where + "[" + std::to_string(i) + "]", v);
      out.push_back(v);
    }
  } else if constexpr (is_array<T>::value) {
    if (!j.is_array() || j.size() != out.size()) {
      fail(("an array of " + std::to_string(out.size())).c_str());
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      read_value(j[i], where + "[" + std::to_string(i) + "]", out[i]);
    }
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

class Reader {
 public:
  Reader(const json &j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError("config key '" + (path_.empty() ? std::string("<root>") : path_) + "' must be an object");
    }
  }

  template <typename T>
  void get(const char *key, T &out) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      read_value(*it, where(key), out);
    }
  }

  template <typename F>
  void section(const char *key, F &&f) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      Reader r(*it, where(key));
      f(r);
      r.finish();
    }
  }

  void finish() const {
    for (const auto &item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw ConfigError("unknown config key '" + where(item.key()) + "'");
      }
    }
  }

 private:
  std::string where(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  const json &j_;
  std::string path_;
  std::set<std::string, std::less<>> seen_;
};

json variants_json(const std::vector<Variant> &vs) {
  json a = json::array();
  for (Variant v : vs) {
    a.push_back(std::string(to_string(v)));
  }
  return a;
}

json to_json(const ExperimentConfig &c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["kind"] = c.kind;
  j["threads"] = c.threads;
  j["model"] = {{"num_layers", c.model.num_layers}, {"hidden_dim", c.model.hidden_dim},
                {"num_heads", c.model.num_heads},   {"vocab_size", c.model.vocab_size},
                {"max_context", c.model.max_context}, {"prefix_len", c.model.prefix_len},
                {"mlp_dim", c.model.mlp_dim},       {"eos_id", c.model.eos_id}};
  const auto &g = c.corpus.grammar;
  j["corpus"] = {{"seed", c.corpus.seed},
                 {"pool_size", c.corpus.pool_size},
                 {"eval_size", c.corpus.eval_size},
                 {"validation_size", c.corpus.validation_size},
                 {"grammar",
                  {{"sentence_count_probs", g.sentence_count_probs},
                   {"adjective_count_probs", g.adjective_count_probs},
                   {"adverb_prob", g.adverb_prob},
                   {"prep_phrase_prob", g.prep_phrase_prob},
                   {"exclaim_prob", g.exclaim_prob},
                   {"code_scale", g.code_scale},
                   {"prefix_noise", g.prefix_noise},
                   {"codebook_seed", g.codebook_seed}}}};
  const auto &t = c.train;
  j["train"] = {{"batch_size", t.batch_size},       {"learning_rate", t.learning_rate},
                {"grad_clip", t.grad_clip},         {"eval_every", t.eval_every},
                {"plateau_steps", t.plateau_steps}, {"plateau_tolerance", t.plateau_tolerance},
                {"min_steps", t.min_steps},         {"max_steps", t.max_steps},
                {"fitness_threshold", t.fitness_threshold}};
  const auto &o = c.objective;
  j["objective"] = {{"alpha", o.alpha},
                    {"lambda_rep", o.lambda_rep},
                    {"decay_a", o.decay_a},
                    {"decay_b", o.decay_b},
                    {"decay_floor", o.decay_floor},
                    {"lambda_ema", o.lambda_ema},
                    {"theta_w", o.theta_w},
                    {"stability_eps", o.stability_eps},
                    {"ratio_uses_scaled_lps", o.ratio_uses_scaled_lps}};
  const auto &a = c.attack;
  j["attack"] = {{"epsilon", a.epsilon},
                 {"step_size", a.step_size},
                 {"momentum", a.momentum},
                 {"iterations", a.iterations},
                 {"max_new_tokens", a.max_new_tokens},
                 {"variant", std::string(to_string(a.variant))},
                 {"normalize_gradient", a.normalize_gradient},
                 {"early_stop", a.early_stop}};
  const auto &d = c.decode;
  j["decode"] = {{"mode", to_string(d.mode)},
                 {"temperature", d.temperature},
                 {"top_p", d.top_p},
                 {"repetition_penalty", d.repetition_penalty},
                 {"no_repeat_ngram_size", d.no_repeat_ngram_size},
                 {"max_new_tokens", d.max_new_tokens},
                 {"seed", d.seed}};
  const auto &ab = c.ablation;
  j["ablation"] = {{"inputs", ab.inputs},
                   {"variants", variants_json(ab.variants)},
                   {"lambda_rep", ab.lambda_rep},
                   {"max_tokens", ab.max_tokens},
                   {"epsilon", ab.epsilon},
                   {"temperature", ab.temperature},
                   {"top_p", ab.top_p},
                   {"convergence_every", ab.convergence_every}};
  j["transfer"] = {{"variant", std::string(to_string(c.transfer.variant))}, {"caps", c.transfer.caps}};
  const auto &df = c.defense;
  j["defense"] = {{"variant", std::string(to_string(df.variant))},
                  {"repetition_penalties", df.repetition_penalties},
                  {"no_repeat_ngram_sizes", df.no_repeat_ngram_sizes},
                  {"ngram_orders", df.ngram_orders},
                  {"ngram_threshold", df.ngram_threshold},
                  {"monitor_n", df.monitor_n},
                  {"calibration_size", df.calibration_size}};
  j["mixing"] = {{"variant", std::string(to_string(c.mixing.variant))},
                 {"batch_size", c.mixing.batch_size},
                 {"sweep", c.mixing.sweep}};
  return j;
}

ExperimentConfig from_json(const json &j) {
  ExperimentConfig c;
  Reader r(j, "");
  r.get("seed", c.seed);
  r.get("out_dir", c.out_dir);
  r.get("kind", c.kind);
  r.get("threads", c.threads);
  r.section("model", [&c](Reader &m) {
    m.get("num_layers", c.model.num_layers);
    m.get("hidden_dim", c.model.hidden_dim);
    m.get("num_heads", c.model.num_heads);
    m.get("vocab_size", c.model.vocab_size);
    m.get("max_context", c.model.max_context);
    m.get("prefix_len", c.model.prefix_len);
    m.get("mlp_dim", c.model.mlp_dim);
    m.get("eos_id", c.model.eos_id);
  });
  r.section("corpus", [&c](Reader &s) {
    s.get("seed", c.corpus.seed);
    s.get("pool_size", c.corpus.pool_size);
    s.get("eval_size", c.corpus.eval_size);
    s.get("validation_size", c.corpus.validation_size);
    s.section("grammar", [&c](Reader &g) {
      auto &gr = c.corpus.grammar;
      g.get("sentence_count_probs", gr.sentence_count_probs);
      g.get("adjective_count_probs", gr.adjective_count_probs);
      g.get("adverb_prob", gr.adverb_prob);
      g.get("prep_phrase_prob", gr.prep_phrase_prob);
      g.get("exclaim_prob", gr.exclaim_prob);
      g.get("code_scale", gr.code_scale);
      g.get("prefix_noise", gr.prefix_noise);
      g.get("codebook_seed", gr.codebook_seed);
    });
  });
  r.section("train", [&c](Reader &s) {
    auto &t = c.train;
    s.get("batch_size", t.batch_size);
    s.get("learning_rate", t.learning_rate);
    s.get("grad_clip", t.grad_clip);
    s.get("eval_every", t.eval_every);
    s.get("plateau_steps", t.plateau_steps);
    s.get("plateau_tolerance", t.plateau_tolerance);
    s.get("min_steps", t.min_steps);
    s.get("max_steps", t.max_steps);
    s.get("fitness_threshold", t.fitness_threshold);
  });
  r.section("objective", [&c](Reader &s) {
    auto &o = c.objective;
    s.get("alpha", o.alpha);
    s.get("lambda_rep", o.lambda_rep);
    s.get("decay_a", o.decay_a);
    s.get("decay_b", o.decay_b);
    s.get("decay_floor", o.decay_floor);
    s.get("lambda_ema", o.lambda_ema);
    s.get("theta_w", o.theta_w);
    s.get("stability_eps", o.stability_eps);
    s.get("ratio_uses_scaled_lps", o.ratio_uses_scaled_lps);
  });
  r.section("attack", [&c](Reader &s) {
    auto &a = c.attack;
    s.get("epsilon", a.epsilon);
    s.get("step_size", a.step_size);
    s.get("momentum", a.momentum);
    s.get("iterations", a.iterations);
    s.get("max_new_tokens", a.max_new_tokens);
    s.get("variant", a.variant);
    s.get("normalize_gradient", a.normalize_gradient);
    s.get("early_stop", a.early_stop);
  });
  r.section("decode", [&c](Reader &s) {
    auto &d = c.decode;
    s.get("mode", d.mode);
    s.get("temperature", d.temperature);
    s.get("top_p", d.top_p);
    s.get("repetition_penalty", d.repetition_penalty);
    s.get("no_repeat_ngram_size", d.no_repeat_ngram_size);
    s.get("max_new_tokens", d.max_new_tokens);
    s.get("seed", d.seed);
  });
  r.section("ablation", [&c](Reader &s) {
    auto &a = c.ablation;
    s.get("inputs", a.inputs);
    s.get("variants", a.variants);
    s.get("lambda_rep", a.lambda_rep);
    s.get("max_tokens", a.max_tokens);
    s.get("epsilon", a.epsilon);
    s.get("temperature", a.temperature);
    s.get("top_p", a.top_p);
    s.get("convergence_every", a.convergence_every);
  });
  r.section("transfer", [&c](Reader &s) {
    s.get("variant", c.transfer.variant);
    s.get("caps", c.transfer.caps);
  });
  r.section("defense", [&c](Reader &s) {
    auto &d = c.defense;
    s.get("variant", d.variant);
    s.get("repetition_penalties", d.repetition_penalties);
    s.get("no_repeat_ngram_sizes", d.no_repeat_ngram_sizes);
    s.get("ngram_orders", d.ngram_orders);
    s.get("ngram_threshold", d.ngram_threshold);
    s.get("monitor_n", d.monitor_n);
    s.get("calibration_size", d.calibration_size);
  });
  r.section("mixing", [&c](Reader &s) {
    s.get("variant", c.mixing.variant);
    s.get("batch_size", c.mixing.batch_size);
    s.get("sweep", c.mixing.sweep);
  });
  r.finish();
  return c;
}

json parse_json(std::string_view text, const std::string &what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error &e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  objective.validate();
  attack.validate();
  decode.validate();
  if (kind != "attack" && kind != "ablation-table3") {
    throw ConfigError("kind must be \"attack\" or \"ablation-table3\", got \"" + kind + "\"");
  }
  if (threads < 0) {
    throw ConfigError("threads must be >= 0");
  }
  if (corpus.pool_size < 1 || corpus.eval_size < 1 || corpus.validation_size < 1) {
    throw ConfigError("corpus sizes must be >= 1");
  }
  constexpr int kSplitSpan = 1 << 20;
  if (corpus.pool_size >= kSplitSpan || corpus.eval_size >= kSplitSpan || corpus.validation_size >= kSplitSpan) {
    throw ConfigError("corpus sizes must stay below 2^20 to keep the splits disjoint");
  }
  if (train.batch_size < 1 || train.eval_every < 1 || train.plateau_steps < 1 || train.min_steps < 0 ||
      train.max_steps < train.min_steps || !(train.learning_rate > 0.0)) {
    throw ConfigError("train: batch_size, eval_every, plateau_steps >= 1; 0 <= min_steps <= max_steps; "
                      "learning_rate > 0");
  }
  if (decode.mode != DecodeMode::greedy) {
    throw ConfigError("decode.mode must be greedy: pool building and clean baselines decode greedily");
  }
  if (model.vocab_size != 64 || model.eos_id != 0) {
    throw ConfigError("model.vocab_size and model.eos_id must match the caption vocabulary (64, 0)");
  }
  if (ablation.inputs < 1 || ablation.inputs > corpus.eval_size) {
    throw ConfigError("ablation.inputs must lie in [1, corpus.eval_size]");
  }
  if (ablation.convergence_every < 1) {
    throw ConfigError("ablation.convergence_every must be >= 1");
  }
  if (mixing.batch_size < 1 || mixing.batch_size > corpus.eval_size) {
    throw ConfigError("mixing.batch_size must lie in [1, corpus.eval_size]");
  }
  for (int m : mixing.sweep) {
    if (m < 0 || m > mixing.batch_size) {
      throw ConfigError("mixing.sweep entries must lie in [0, mixing.batch_size]");
    }
  }
  for (int cap : transfer.caps) {
    if (cap < 1 || model.prefix_len + 4 + cap > model.max_context) {
      throw ConfigError("transfer.caps entry " + std::to_string(cap) + " does not fit max_context");
    }
  }
  if (defense.calibration_size < 2 || defense.calibration_size > corpus.validation_size) {
    throw ConfigError("defense.calibration_size must lie in [2, corpus.validation_size]");
  }
}

int ExperimentConfig::thread_count() const {
  if (threads > 0) {
    return threads;
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

std::string config_to_json(const ExperimentConfig &cfg) { return to_json(cfg).dump(2) + "\n"; }

ExperimentConfig config_from_json(std::string_view text) { return from_json(parse_json(text, "config")); }

void apply_override(ExperimentConfig &cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' must look like key.path=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json doc = to_json(cfg);
  json *node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) {
      break;
    }
    start = dot + 1;
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error &) {
    value = raw;
  }
  *node = value;
  cfg = from_json(doc);
}

ExperimentConfig load_config(const std::optional<std::filesystem::path> &path,
                             std::span<const std::string> overrides) {
  ExperimentConfig cfg;
  if (path) {
    cfg = from_json(parse_json(read_file(*path), path->string()));
  }
  for (const auto &o : overrides) {
    apply_override(cfg, o);
  }
  cfg.validate();
  return cfg;
}

}  // namespace sponge
