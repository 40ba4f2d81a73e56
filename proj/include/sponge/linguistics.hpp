// Copyright 2026 The sponge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sponge/model.hpp"
#include "sponge/tensor.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sponge {

enum class PosTag { DET, NOUN, ADJ, VERB, ADV, PREP, CONJ, PUNCT_SENT, PUNCT_OTHER, OTHER };

inline constexpr std::size_t kNumPosTags = 10;

inline constexpr std::array<PosTag, kNumPosTags> kAllPosTags{
    PosTag::DET,  PosTag::NOUN, PosTag::ADJ,        PosTag::VERB,        PosTag::ADV,
    PosTag::PREP, PosTag::CONJ, PosTag::PUNCT_SENT, PosTag::PUNCT_OTHER, PosTag::OTHER};

std::string_view to_string(PosTag tag);
PosTag parse_pos_tag(std::string_view name);

/// Token inventory with a fixed part-of-speech per token. The EOS token is
/// the only untagged entry.
class Vocabulary {
 public:
  struct Entry {
    std::string surface;
    std::optional<PosTag> tag;
  };

  Vocabulary(std::vector<Entry> entries, TokenId eos, std::vector<TokenId> prompt);

  int size() const { return static_cast<int>(entries_.size()); }
  TokenId eos() const { return eos_; }
  const std::vector<TokenId> &prompt() const { return prompt_; }
  const std::string &surface(TokenId id) const;
  TokenId id_of(std::string_view surface) const;
  const std::vector<TokenId> &tokens_with_tag(PosTag tag) const;
  std::optional<PosTag> tag_entry(TokenId id) const;

  std::string render(std::span<const TokenId> tokens) const;

 private:
  std::vector<Entry> entries_;
  TokenId eos_;
  std::vector<TokenId> prompt_;
  std::unordered_map<std::string, TokenId> by_surface_;
  std::array<std::vector<TokenId>, kNumPosTags> by_tag_;
};

/// The 64-token caption vocabulary used throughout the lab; prompt is
/// "describe the image :".
Vocabulary make_caption_vocabulary();

/// Throws std::out_of_range for EOS or ids outside [0, V).
PosTag pos_of(const Vocabulary &vocab, TokenId id);

/// Accepts (DET ADJ* NOUN VERB ADV? (PREP DET NOUN)? PUNCT_SENT)+ EOS.
bool is_grammatical(const Vocabulary &vocab, std::span<const TokenId> tokens);

// ---------------------------------------------------------------------------
// Synthetic caption corpus
// ---------------------------------------------------------------------------

struct CaptionGrammar {
  std::array<double, 3> sentence_count_probs{1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::array<double, 3> adjective_count_probs{0.4, 0.4, 0.2};
  double adverb_prob = 0.3;
  double prep_phrase_prob = 0.4;
  double exclaim_prob = 0.2;
  /// Per-coordinate std-dev of the word and count codes.
  double code_scale = 0.2;
  /// Std-dev of the Gaussian jitter added to every prefix coordinate.
  double prefix_noise = 0.1;
  std::uint64_t codebook_seed = 0x5eed;
};

struct CaptionSample {
  Matrix<float> prefix;
  /// Caption tokens, ending PUNCT_SENT then EOS.
  std::vector<TokenId> tokens;
  int sentences = 0;
};

/// Generates captions from the template grammar together with prefix
/// vectors that encode each sentence's noun/adjective/verb and the number
/// of sentences. Sample `index` under `seed` is a pure function of both, so
/// disjoint index ranges give disjoint splits.
class CaptionCorpus {
 public:
  CaptionCorpus(const Vocabulary &vocab, CaptionGrammar grammar, int prefix_len, int dim);

  CaptionSample sample(std::uint64_t seed, std::uint64_t index) const;
  std::vector<CaptionSample> generate(std::uint64_t seed, std::uint64_t first_index, std::size_t size) const;

  /// Analytic share of each tag among caption tokens (EOS excluded).
  std::array<double, kNumPosTags> expected_tag_frequencies() const;

  int max_sentences() const { return max_sentences_; }
  const Vocabulary &vocab() const { return vocab_; }

 private:
  RowVector<float> code(TokenId id) const;

  const Vocabulary &vocab_;
  CaptionGrammar grammar_;
  int prefix_len_;
  int dim_;
  int max_sentences_;
  Matrix<float> word_codes_;
  Matrix<float> count_codes_;
  RowVector<float> empty_code_;
};

std::vector<CaptionSample> generate_corpus(const CaptionCorpus &corpus, std::uint64_t seed, std::size_t size);

// ---------------------------------------------------------------------------
// Weight pool: per-tag mean probability that EOS follows a token of that tag
// ---------------------------------------------------------------------------

struct WeightPool {
  struct Entry {
    double mean_eos_prob = 0.0;
    std::int64_t count = 0;
    double frequency = 0.0;
  };
  std::array<Entry, kNumPosTags> entries{};

  const Entry &operator[](PosTag tag) const { return entries[static_cast<std::size_t>(tag)]; }
  Entry &operator[](PosTag tag) { return entries[static_cast<std::size_t>(tag)]; }

  std::int64_t total_count() const;
  /// Recomputes frequencies from counts.
  void normalize();
};

/// Accumulates (predecessor tag, next-step EOS probability) pairs from
/// traces; the predecessor of the first generated token is the last prompt
/// token.
WeightPool pool_from_traces(const Vocabulary &vocab, std::span<const TokenId> prompt,
                            std::span<const GenerationTrace> traces);

WeightPool build_weight_pool(const ModelParams<float> &params, const Vocabulary &vocab,
                             std::span<const Matrix<float>> inputs, const DecodeConfig &cfg);

/// Count-weighted merge.
WeightPool merge_pools(const WeightPool &a, const WeightPool &b);

inline constexpr double kWeightStabilityEps = 1e-10;

/// (mean + eps) * theta_w.
double weight_of(const WeightPool &pool, PosTag tag, double theta_w, double eps = kWeightStabilityEps);

/// Text table: `tag mean count frequency`, 9 significant digits.
void write_pool(std::ostream &os, const WeightPool &pool);
WeightPool read_pool(std::istream &is);

}  // namespace sponge
