// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sponge/linguistics.hpp"

#include "sponge/random.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace sponge {

namespace {
constexpr std::array<std::string_view, kNumPosTags> kTagNames{
    "DET", "NOUN", "ADJ", "VERB", "ADV", "PREP", "CONJ", "PUNCT_SENT", "PUNCT_OTHER", "OTHER"};

std::size_t tag_index(PosTag tag) { return static_cast<std::size_t>(tag); }
}  // namespace

std::string_view to_string(PosTag tag) { return kTagNames.at(tag_index(tag)); }

PosTag parse_pos_tag(std::string_view name) {
  for (std::size_t i = 0; i < kTagNames.size(); ++i) {
    if (kTagNames[i] == name) {
      return kAllPosTags[i];
    }
  }
  throw std::invalid_argument("unknown POS tag '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<Entry> entries, TokenId eos, std::vector<TokenId> prompt)
    : entries_(std::move(entries)), eos_(eos), prompt_(std::move(prompt)) {
  if (eos_ < 0 || eos_ >= size()) {
    throw std::invalid_argument("Vocabulary: EOS id out of range");
  }
  for (TokenId id = 0; id < size(); ++id) {
    const auto &e = entries_[static_cast<std::size_t>(id)];
    if (id == eos_) {
      if (e.tag) {
        throw std::invalid_argument("Vocabulary: EOS must not carry a POS tag");
      }
    } else {
      if (!e.tag) {
        throw std::invalid_argument("Vocabulary: token '" + e.surface + "' has no POS tag");
      }
      by_tag_[tag_index(*e.tag)].push_back(id);
    }
    if (!by_surface_.emplace(e.surface, id).second) {
      throw std::invalid_argument("Vocabulary: duplicate surface '" + e.surface + "'");
    }
  }
  for (TokenId t : prompt_) {
    if (t < 0 || t >= size() || t == eos_) {
      throw std::invalid_argument("Vocabulary: prompt contains an invalid token");
    }
  }
  if (prompt_.empty()) {
    throw std::invalid_argument("Vocabulary: prompt must end in a tagged token");
  }
}

const std::string &Vocabulary::surface(TokenId id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("Vocabulary: token id " + std::to_string(id) + " out of range");
  }
  return entries_[static_cast<std::size_t>(id)].surface;
}

TokenId Vocabulary::id_of(std::string_view s) const {
  auto it = by_surface_.find(std::string(s));
  if (it == by_surface_.end()) {
    throw std::out_of_range("Vocabulary: unknown token '" + std::string(s) + "'");
  }
  return it->second;
}

const std::vector<TokenId> &Vocabulary::tokens_with_tag(PosTag tag) const { return by_tag_[tag_index(tag)]; }

std::optional<PosTag> Vocabulary::tag_entry(TokenId id) const {
  if (id < 0 || id >= size()) {
    return std::nullopt;
  }
  return entries_[static_cast<std::size_t>(id)].tag;
}

std::string Vocabulary::render(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (!out.empty()) {
      out += ' ';
    }
    out += surface(t);
  }
  return out;
}

Vocabulary make_caption_vocabulary() {
  std::vector<Vocabulary::Entry> e;
  auto add = [&e](std::initializer_list<const char *> words, std::optional<PosTag> tag) {
    for (const char *w : words) {
      e.push_back({w, tag});
    }
  };
  add({"<eos>"}, std::nullopt);
  add({"describe", "image"}, PosTag::OTHER);
  add({":", ","}, PosTag::PUNCT_OTHER);
  add({"and"}, PosTag::CONJ);
  add({"the", "a", "this", "one"}, PosTag::DET);
  add({"red", "blue", "green", "small", "big", "old", "young", "bright", "dark", "tall"}, PosTag::ADJ);
  add({"cat", "dog", "bird", "car", "tree", "house", "boat", "man", "woman", "child", "horse", "ball", "bike",
       "flower", "kite", "train", "cow", "sheep", "fish", "girl", "boy"},
      PosTag::NOUN);
  add({"sits", "runs", "stands", "jumps", "sleeps", "waits", "flies", "rests", "plays", "walks"}, PosTag::VERB);
  add({"quietly", "quickly", "slowly", "calmly", "happily"}, PosTag::ADV);
  add({"near", "on", "under", "by", "behind", "beside"}, PosTag::PREP);
  add({".", "!"}, PosTag::PUNCT_SENT);

  std::vector<TokenId> prompt;
  for (const char *w : {"describe", "the", "image", ":"}) {
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (e[i].surface == w) {
        prompt.push_back(static_cast<TokenId>(i));
      }
    }
  }
  return Vocabulary(std::move(e), 0, std::move(prompt));
}

PosTag pos_of(const Vocabulary &vocab, TokenId id) {
  if (id == vocab.eos()) {
    throw std::out_of_range("pos_of: EOS has no POS tag");
  }
  auto tag = vocab.tag_entry(id);
  if (!tag) {
    throw std::out_of_range("pos_of: token id " + std::to_string(id) + " out of range");
  }
  return *tag;
}

bool is_grammatical(const Vocabulary &vocab, std::span<const TokenId> tokens) {
  if (tokens.size() < 2 || tokens.back() != vocab.eos()) {
    return false;
  }
  std::vector<PosTag> tags;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (tokens[i] == vocab.eos()) {
      return false;
    }
    tags.push_back(pos_of(vocab, tokens[i]));
  }
  std::size_t i = 0;
  auto take = [&](PosTag t) {
    if (i < tags.size() && tags[i] == t) {
      ++i;
      return true;
    }
    return false;
  };
  int sentences = 0;
  while (i < tags.size()) {
    if (!take(PosTag::DET)) {
      return false;
    }
    while (take(PosTag::ADJ)) {
    }
    if (!take(PosTag::NOUN) || !take(PosTag::VERB)) {
      return false;
    }
    take(PosTag::ADV);
    if (take(PosTag::PREP)) {
      if (!take(PosTag::DET) || !take(PosTag::NOUN)) {
        return false;
      }
    }
    if (!take(PosTag::PUNCT_SENT)) {
      return false;
    }
    ++sentences;
  }
  return sentences > 0;
}

// ---------------------------------------------------------------------------

CaptionCorpus::CaptionCorpus(const Vocabulary &vocab, CaptionGrammar grammar, int prefix_len, int dim)
    : vocab_(vocab), grammar_(grammar), prefix_len_(prefix_len), dim_(dim) {
  if (prefix_len < 1 || dim < 1) {
    throw std::invalid_argument("CaptionCorpus: prefix_len and dim must be positive");
  }
  max_sentences_ = std::max(1, std::min(3, prefix_len - 1));
  Rng rng(grammar_.codebook_seed);
  auto gaussian = [&rng, this](int r, int c) {
    Matrix<float> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<float>(grammar_.code_scale * rng.normal());
    }
    return m;
  };
  word_codes_ = gaussian(vocab.size(), dim);
  count_codes_ = gaussian(4, dim);
  empty_code_ = gaussian(1, dim).row(0);
}

RowVector<float> CaptionCorpus::code(TokenId id) const { return word_codes_.row(id); }

CaptionSample CaptionCorpus::sample(std::uint64_t seed, std::uint64_t index) const {
  Rng rng(derive_seed(seed, index));
  auto pick = [&rng](const std::vector<TokenId> &ids) { return ids[rng.below(ids.size())]; };
  auto categorical = [&rng](std::span<const double> probs) {
    double u = rng.uniform();
    for (std::size_t i = 0; i < probs.size(); ++i) {
      u -= probs[i];
      if (u < 0.0) {
        return static_cast<int>(i);
      }
    }
    return static_cast<int>(probs.size()) - 1;
  };
  const auto &det = vocab_.tokens_with_tag(PosTag::DET);
  const auto &adj = vocab_.tokens_with_tag(PosTag::ADJ);
  const auto &noun = vocab_.tokens_with_tag(PosTag::NOUN);
  const auto &verb = vocab_.tokens_with_tag(PosTag::VERB);
  const auto &adv = vocab_.tokens_with_tag(PosTag::ADV);
  const auto &prep = vocab_.tokens_with_tag(PosTag::PREP);
  const TokenId period = vocab_.id_of(".");
  const TokenId bang = vocab_.id_of("!");

  CaptionSample s;
  s.sentences = std::min(categorical(grammar_.sentence_count_probs) + 1, max_sentences_);
  s.prefix.resize(prefix_len_, dim_);
  const int content_slots = prefix_len_ - 1;
  for (int j = 0; j < s.sentences; ++j) {
    s.tokens.push_back(pick(det));
    const int n_adj = categorical(grammar_.adjective_count_probs);
    std::optional<TokenId> first_adj;
    for (int a = 0; a < n_adj; ++a) {
      const TokenId t = pick(adj);
      if (!first_adj) {
        first_adj = t;
      }
      s.tokens.push_back(t);
    }
    const TokenId subject = pick(noun);
    const TokenId action = pick(verb);
    s.tokens.push_back(subject);
    s.tokens.push_back(action);
    std::vector<TokenId> coded{subject, action};
    if (first_adj) {
      coded.push_back(*first_adj);
    }
    if (rng.bernoulli(grammar_.adverb_prob)) {
      s.tokens.push_back(pick(adv));
      coded.push_back(s.tokens.back());
    }
    if (rng.bernoulli(grammar_.prep_phrase_prob)) {
      s.tokens.push_back(pick(prep));
      coded.push_back(s.tokens.back());
      s.tokens.push_back(pick(det));
      s.tokens.push_back(pick(noun));
    }
    s.tokens.push_back(rng.bernoulli(grammar_.exclaim_prob) ? bang : period);
    if (j < content_slots) {
      RowVector<float> c = RowVector<float>::Zero(dim_);
      for (TokenId t : coded) {
        c += code(t);
      }
      s.prefix.row(j) = c / std::sqrt(static_cast<float>(coded.size()));
    }
  }
  for (int j = s.sentences; j < content_slots; ++j) {
    s.prefix.row(j) = empty_code_;
  }
  s.prefix.row(prefix_len_ - 1) = count_codes_.row(s.sentences);
  for (Eigen::Index i = 0; i < s.prefix.size(); ++i) {
    s.prefix.data()[i] += static_cast<float>(grammar_.prefix_noise * rng.normal());
  }
  s.tokens.push_back(vocab_.eos());
  return s;
}

std::vector<CaptionSample> CaptionCorpus::generate(std::uint64_t seed, std::uint64_t first_index,
                                                   std::size_t size) const {
  std::vector<CaptionSample> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    out.push_back(sample(seed, first_index + i));
  }
  return out;
}

std::array<double, kNumPosTags> CaptionCorpus::expected_tag_frequencies() const {
  // Sentence count is independent of sentence content, so token shares are
  // ratios of per-sentence expected counts.
  double adj = 0.0;
  for (std::size_t k = 0; k < grammar_.adjective_count_probs.size(); ++k) {
    adj += static_cast<double>(k) * grammar_.adjective_count_probs[k];
  }
  std::array<double, kNumPosTags> c{};
  c[tag_index(PosTag::DET)] = 1.0 + grammar_.prep_phrase_prob;
  c[tag_index(PosTag::ADJ)] = adj;
  c[tag_index(PosTag::NOUN)] = 1.0 + grammar_.prep_phrase_prob;
  c[tag_index(PosTag::VERB)] = 1.0;
  c[tag_index(PosTag::ADV)] = grammar_.adverb_prob;
  c[tag_index(PosTag::PREP)] = grammar_.prep_phrase_prob;
  c[tag_index(PosTag::PUNCT_SENT)] = 1.0;
  double total = 0.0;
  for (double v : c) {
    total += v;
  }
  for (double &v : c) {
    v /= total;
  }
  return c;
}

std::vector<CaptionSample> generate_corpus(const CaptionCorpus &corpus, std::uint64_t seed, std::size_t size) {
  if (size < 1) {
    throw std::invalid_argument("generate_corpus: size must be >= 1");
  }
  return corpus.generate(seed, 0, size);
}

// ---------------------------------------------------------------------------

std::int64_t WeightPool::total_count() const {
  std::int64_t n = 0;
  for (const auto &e : entries) {
    n += e.count;
  }
  return n;
}

void WeightPool::normalize() {
  const auto total = static_cast<double>(total_count());
  for (auto &e : entries) {
    e.frequency = total > 0 ? static_cast<double>(e.count) / total : 0.0;
  }
}

WeightPool pool_from_traces(const Vocabulary &vocab, std::span<const TokenId> prompt,
                            std::span<const GenerationTrace> traces) {
  if (prompt.empty()) {
    throw std::invalid_argument("pool_from_traces: prompt must not be empty");
  }
  std::array<double, kNumPosTags> sums{};
  WeightPool pool;
  for (const auto &tr : traces) {
    for (int i = 0; i < tr.n_out(); ++i) {
      const TokenId pred = i == 0 ? prompt.back() : tr.tokens[static_cast<std::size_t>(i - 1)];
      const auto k = tag_index(pos_of(vocab, pred));
      sums[k] += static_cast<double>(tr.eos_prob[static_cast<std::size_t>(i)]);
      pool.entries[k].count += 1;
    }
  }
  if (pool.total_count() == 0) {
    throw std::invalid_argument("pool_from_traces: no generated tokens, pool undefined");
  }
  for (std::size_t k = 0; k < kNumPosTags; ++k) {
    if (pool.entries[k].count > 0) {
      pool.entries[k].mean_eos_prob = sums[k] / static_cast<double>(pool.entries[k].count);
    }
  }
  pool.normalize();
  return pool;
}

WeightPool build_weight_pool(const ModelParams<float> &params, const Vocabulary &vocab,
                             std::span<const Matrix<float>> inputs, const DecodeConfig &cfg) {
  if (inputs.empty()) {
    throw std::invalid_argument("build_weight_pool: no inputs");
  }
  if (cfg.mode != DecodeMode::greedy) {
    throw std::invalid_argument("build_weight_pool: pool statistics require greedy decoding");
  }
  std::vector<GenerationTrace> traces;
  traces.reserve(inputs.size());
  for (const auto &x : inputs) {
    traces.push_back(generate(params, x, vocab.prompt(), cfg));
  }
  return pool_from_traces(vocab, vocab.prompt(), traces);
}

WeightPool merge_pools(const WeightPool &a, const WeightPool &b) {
  WeightPool out;
  for (std::size_t k = 0; k < kNumPosTags; ++k) {
    const auto &x = a.entries[k];
    const auto &y = b.entries[k];
    auto &z = out.entries[k];
    z.count = x.count + y.count;
    if (z.count > 0) {
      z.mean_eos_prob = (static_cast<double>(x.count) * x.mean_eos_prob +
                         static_cast<double>(y.count) * y.mean_eos_prob) /
                        static_cast<double>(z.count);
    }
  }
  out.normalize();
  return out;
}

double weight_of(const WeightPool &pool, PosTag tag, double theta_w, double eps) {
  const auto &e = pool[tag];
  const double mean = e.count > 0 ? e.mean_eos_prob : 0.0;
  return (mean + eps) * theta_w;
}

void write_pool(std::ostream &os, const WeightPool &pool) {
  os << "# tag mean_eos_prob count frequency\n";
  char buf[128];
  for (PosTag tag : kAllPosTags) {
    const auto &e = pool[tag];
    std::snprintf(buf, sizeof buf, "%s %.9g %lld %.9g\n", std::string(to_string(tag)).c_str(), e.mean_eos_prob,
                  static_cast<long long>(e.count), e.frequency);
    os << buf;
  }
}

WeightPool read_pool(std::istream &is) {
  WeightPool pool;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::istringstream ls(line);
    std::string name;
    WeightPool::Entry e;
    if (!(ls >> name >> e.mean_eos_prob >> e.count >> e.frequency)) {
      throw std::runtime_error("read_pool: malformed line " + std::to_string(line_no));
    }
    if (e.count < 0 || e.mean_eos_prob < 0.0 || e.mean_eos_prob > 1.0) {
      throw std::runtime_error("read_pool: out-of-range values on line " + std::to_string(line_no));
    }
    pool[parse_pos_tag(name)] = e;
  }
  return pool;
}

}  // namespace sponge
