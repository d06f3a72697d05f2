#include "mixdiv/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mixdiv/errors.hpp"

namespace mixdiv {

Tokens tokenize(std::string_view line) {
  Tokens out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f'; };
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string detokenize(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
}

void Vocab::add(const std::string& token) {
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<Tokens>& sentences) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& s : sentences)
    for (const auto& t : s) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  for (const auto& [token, count] : ordered) {
    if (v.ids_.count(token)) continue;  // literal "<unk>" etc. in text
    v.add(token);
  }
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("vocab: id " + std::to_string(id) + " out of range");
  }
  return tokens_[id];
}

TokenIds Vocab::encode(const Tokens& tokens) const {
  TokenIds out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

Tokens Vocab::decode(const TokenIds& ids) const {
  Tokens out;
  for (int i : ids) {
    if (i == kEos) break;
    if (i == kPad || i == kBos) continue;
    out.push_back(token(i));
  }
  return out;
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace

ParallelText read_parallel_text(const std::string& src_path, const std::string& tgt_path) {
  auto src = read_lines(src_path);
  auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size()) {
    throw AlignmentError("line counts differ: " + src_path + " has " + std::to_string(src.size()) + " lines, " +
                         tgt_path + " has " + std::to_string(tgt.size()));
  }
  ParallelText text;
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto s = tokenize(src[i]);
    auto t = tokenize(tgt[i]);
    if (s.empty() || t.empty()) {
      ++text.skipped_empty;
      continue;
    }
    text.source.push_back(std::move(s));
    text.target.push_back(std::move(t));
  }
  return text;
}

ParallelCorpus build_corpus(const ParallelText& text, const Vocab& source_vocab, const Vocab& target_vocab) {
  if (text.source.size() != text.target.size()) {
    throw AlignmentError("parallel text has " + std::to_string(text.source.size()) + " sources and " +
                         std::to_string(text.target.size()) + " targets");
  }
  ParallelCorpus corpus;
  corpus.source_vocab = source_vocab;
  corpus.target_vocab = target_vocab;
  corpus.skipped_empty = text.skipped_empty;
  for (std::size_t i = 0; i < text.source.size(); ++i) {
    if (text.source[i].empty() || text.target[i].empty()) {
      throw ContractError("sentence pair " + std::to_string(i) + " has an empty side");
    }
    corpus.pairs.push_back({source_vocab.encode(text.source[i]), target_vocab.encode(text.target[i]), i});
  }
  return corpus;
}

ParallelCorpus build_corpus(const ParallelText& text) {
  return build_corpus(text, Vocab::build(text.source), Vocab::build(text.target));
}

ParallelCorpus load_parallel(const std::string& src_path, const std::string& tgt_path) {
  return build_corpus(read_parallel_text(src_path, tgt_path));
}

// ---------------------------------------------------------------------------

LengthBuckets::LengthBuckets(const ParallelCorpus& corpus) {
  for (const auto& p : corpus.pairs) buckets_[p.source.size()].push_back(p.id);
}

std::span<const std::size_t> LengthBuckets::bucket(std::size_t length) const {
  auto it = buckets_.find(length);
  if (it == buckets_.end()) return {};
  return it->second;
}

std::size_t LengthBuckets::min_length() const { return buckets_.empty() ? 0 : buckets_.begin()->first; }
std::size_t LengthBuckets::max_length() const { return buckets_.empty() ? 0 : buckets_.rbegin()->first; }

LengthBuckets bucket_by_source_length(const ParallelCorpus& corpus) { return LengthBuckets(corpus); }

namespace {

// Uniform draw of k items without replacement (partial Fisher-Yates).
std::vector<std::size_t> draw_without_replacement(std::vector<std::size_t> pool, std::size_t k, RngStream& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

bool excluded(std::span<const std::size_t> exclude, std::size_t id) {
  return std::find(exclude.begin(), exclude.end(), id) != exclude.end();
}

}  // namespace

PartnerSample sample_partners(const LengthBuckets& buckets, std::size_t input_length, std::size_t k,
                              RngStream& rng, std::span<const std::size_t> exclude) {
  if (k == 0) throw ContractError("sample_partners: K must be at least 1");
  const long long length = static_cast<long long>(input_length);
  const long long lo_bound = static_cast<long long>(buckets.min_length());
  const long long hi_bound = static_cast<long long>(buckets.max_length());

  PartnerSample sample;
  std::vector<std::size_t> pool;
  for (std::size_t w = 1;; ++w) {
    const long long lo = length - static_cast<long long>(w);
    const long long hi = length + static_cast<long long>(w) - 1;
    pool.clear();
    for (const auto& [len, ids] : buckets.all()) {
      const long long l = static_cast<long long>(len);
      if (l < lo || l > hi) continue;
      for (auto id : ids)
        if (!excluded(exclude, id)) pool.push_back(id);
    }
    sample.window = w;
    const bool covers_everything = lo <= lo_bound && hi >= hi_bound;
    if (pool.size() >= k || covers_everything) break;
  }
  std::sort(pool.begin(), pool.end());
  sample.shortfall = pool.size() < k;
  sample.ids = draw_without_replacement(std::move(pool), k, rng);
  return sample;
}

PartnerSample sample_partners_uniform(const ParallelCorpus& corpus, std::size_t k, RngStream& rng,
                                      std::span<const std::size_t> exclude) {
  if (k == 0) throw ContractError("sample_partners: K must be at least 1");
  std::vector<std::size_t> pool;
  for (const auto& p : corpus.pairs)
    if (!excluded(exclude, p.id)) pool.push_back(p.id);
  PartnerSample sample;
  sample.window = 0;
  sample.shortfall = pool.size() < k;
  sample.ids = draw_without_replacement(std::move(pool), k, rng);
  return sample;
}

// ---------------------------------------------------------------------------

void SynthSpec::validate(std::size_t max_model_len) const {
  if (vocab_size == 0) throw ContractError("synth: vocab_size must be positive");
  if (num_pairs == 0) throw ContractError("synth: num_pairs must be positive");
  if (synonyms == 0) throw ContractError("synth: synonyms must be at least 1");
  if (min_len == 0 || min_len > max_len) {
    throw ContractError("synth: invalid length range [" + std::to_string(min_len) + ", " + std::to_string(max_len) + "]");
  }
  if (max_len + 1 > max_model_len) {
    throw ContractError("synth: max_len " + std::to_string(max_len) + " does not fit the model length " +
                        std::to_string(max_model_len));
  }
}

std::vector<std::pair<std::string, std::string>> SynthSpec::to_key_values() const {
  return {{"vocab_size", std::to_string(vocab_size)}, {"num_pairs", std::to_string(num_pairs)},
          {"min_len", std::to_string(min_len)},       {"max_len", std::to_string(max_len)},
          {"synonyms", std::to_string(synonyms)},     {"seed", std::to_string(seed)}};
}

std::string synthetic_source_token(std::size_t concept_id) { return "s" + std::to_string(concept_id); }

std::string synthetic_target_token(std::size_t concept_id, std::size_t synonym) {
  return "t" + std::to_string(concept_id) + "_" + std::to_string(synonym);
}

SyntheticCorpus generate_synthetic_corpus(const SynthSpec& spec) {
  spec.validate();
  RngStream master(spec.seed);
  SyntheticCorpus out;

  out.concept_map.resize(spec.vocab_size);
  std::iota(out.concept_map.begin(), out.concept_map.end(), 0);
  RngStream perm = master.derive("concept_map");
  std::shuffle(out.concept_map.begin(), out.concept_map.end(), perm.engine());

  for (std::size_t i = 0; i < spec.num_pairs; ++i) {
    RngStream pair_rng = master.derive("pair", i);
    const std::size_t len = spec.min_len + pair_rng.uniform_index(spec.max_len - spec.min_len + 1);
    Tokens src, tgt;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t c = pair_rng.uniform_index(spec.vocab_size);
      const std::size_t syn = spec.synonyms == 1 ? 0 : pair_rng.uniform_index(spec.synonyms);
      src.push_back(synthetic_source_token(c));
      tgt.push_back(synthetic_target_token(static_cast<std::size_t>(out.concept_map[c]), syn));
    }
    const bool held_out = splitmix64(spec.seed ^ splitmix64(i)) % 10 == 0;
    auto& split = held_out ? out.held_out : out.train;
    split.source.push_back(std::move(src));
    split.target.push_back(std::move(tgt));
  }
  return out;
}

void write_lines(const std::string& path, const std::vector<Tokens>& sentences) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& s : sentences) out << detokenize(s) << '\n';
  if (!out) throw IoError("failed while writing " + path);
}

void write_synthetic_corpus(const std::string& dir, const SynthSpec& spec, const SyntheticCorpus& corpus) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  const std::filesystem::path base(dir);
  write_lines((base / "train.src").string(), corpus.train.source);
  write_lines((base / "train.tgt").string(), corpus.train.target);
  write_lines((base / "test.src").string(), corpus.held_out.source);
  write_lines((base / "test.tgt").string(), corpus.held_out.target);
  std::ofstream out(base / "spec.txt", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write spec.txt in " + dir);
  for (const auto& [k, v] : spec.to_key_values()) out << k << " = " << v << '\n';
}

}  // namespace mixdiv
