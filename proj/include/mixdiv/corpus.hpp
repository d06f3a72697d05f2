#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mixdiv/rng.hpp"

namespace mixdiv {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

using Tokens = std::vector<std::string>;
using TokenIds = std::vector<int>;

Tokens tokenize(std::string_view line);
std::string detokenize(const Tokens& tokens);

class Vocab {
 public:
  Vocab();

  // Reserved symbols first, then tokens by descending frequency with ties
  // broken lexicographically.
  static Vocab build(const std::vector<Tokens>& sentences);

  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }

  TokenIds encode(const Tokens& tokens) const;
  // Drops reserved symbols and stops at the first <eos>.
  Tokens decode(const TokenIds& ids) const;

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct SentencePair {
  TokenIds source;  // no <bos>/<eos>
  TokenIds target;
  std::size_t id = 0;
};

// Whitespace-tokenized parallel text before vocabulary mapping.
struct ParallelText {
  std::vector<Tokens> source;
  std::vector<Tokens> target;
  std::size_t skipped_empty = 0;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;  // pairs[i].id == i
  Vocab source_vocab;
  Vocab target_vocab;
  std::size_t skipped_empty = 0;
};

// Reads two line-aligned files. CRLF is treated as LF; a line pair where
// either side is empty is skipped and counted. Throws AlignmentError when
// the files have different line counts and IoError when unreadable.
ParallelText read_parallel_text(const std::string& src_path, const std::string& tgt_path);

// Builds both vocabularies from the text itself.
ParallelCorpus build_corpus(const ParallelText& text);
// Maps text through existing vocabularies (unknown tokens become <unk>).
ParallelCorpus build_corpus(const ParallelText& text, const Vocab& source_vocab, const Vocab& target_vocab);

ParallelCorpus load_parallel(const std::string& src_path, const std::string& tgt_path);

class LengthBuckets {
 public:
  explicit LengthBuckets(const ParallelCorpus& corpus);

  // Pair ids with exactly this source length (empty when none).
  std::span<const std::size_t> bucket(std::size_t length) const;
  const std::map<std::size_t, std::vector<std::size_t>>& all() const { return buckets_; }
  std::size_t min_length() const;
  std::size_t max_length() const;

 private:
  std::map<std::size_t, std::vector<std::size_t>> buckets_;
};

LengthBuckets bucket_by_source_length(const ParallelCorpus& corpus);

struct PartnerSample {
  std::vector<std::size_t> ids;
  bool shortfall = false;  // fewer than K eligible pairs in the whole corpus
  std::size_t window = 1;  // 1 is the plain [I-1, I] window
};

/// Draws K distinct pair ids uniformly without replacement from the source
/// lengths [I-1, I], skipping `exclude`. A sparse window is widened to
/// [I-w, I+w-1] for w = 2, 3, ... until it holds K candidates.
PartnerSample sample_partners(const LengthBuckets& buckets, std::size_t input_length, std::size_t k,
                              RngStream& rng, std::span<const std::size_t> exclude = {});

// Same contract without length selection: the pool is the whole corpus.
PartnerSample sample_partners_uniform(const ParallelCorpus& corpus, std::size_t k, RngStream& rng,
                                      std::span<const std::size_t> exclude = {});

struct SynthSpec {
  std::size_t vocab_size = 50;  // concepts per side
  std::size_t num_pairs = 2000;
  std::size_t min_len = 3;
  std::size_t max_len = 12;
  std::size_t synonyms = 1;  // surface forms per target concept
  std::uint64_t seed = 7;

  // Throws ContractError; max_model_len bounds the target length plus <bos>/<eos>.
  void validate(std::size_t max_model_len = 64) const;
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
};

struct SyntheticCorpus {
  ParallelText train;
  ParallelText held_out;
  std::vector<int> concept_map;  // source concept -> target concept
};

// Source sentences are random concept sequences; each concept maps through
// a fixed permutation to a target concept whose surface token is one of
// `synonyms` forms picked uniformly. Pairs whose index hashes to 0 mod 10
// are held out.
SyntheticCorpus generate_synthetic_corpus(const SynthSpec& spec);

std::string synthetic_source_token(std::size_t concept_id);
std::string synthetic_target_token(std::size_t concept_id, std::size_t synonym);

// Writes train.src, train.tgt, test.src, test.tgt and spec.txt into dir.
void write_synthetic_corpus(const std::string& dir, const SynthSpec& spec, const SyntheticCorpus& corpus);
void write_lines(const std::string& path, const std::vector<Tokens>& sentences);

}  // namespace mixdiv
