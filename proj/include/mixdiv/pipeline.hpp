#pragma once

// Orchestration shared by the command line, the acceptance suite and the
// Python module: resumable training sessions, batch decoding into
// hypotheses files, and tau/seed sweeps.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mixdiv/adam.hpp"
#include "mixdiv/corpus.hpp"
#include "mixdiv/metrics.hpp"
#include "mixdiv/mixup_decode.hpp"
#include "mixdiv/mixup_train.hpp"
#include "mixdiv/model.hpp"

namespace mixdiv {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Shortest text that parses back to the same double.
std::string format_number(double value);

// Hash of the token list; ties a checkpoint to the corpus it was trained on.
std::uint64_t vocab_fingerprint(const Vocab& vocab);

// train.src / train.tgt in `dir`; vocabularies come from this split only.
ParallelCorpus load_training_corpus(const std::string& dir);
// Another split of the same directory mapped through the training vocabularies.
ParallelCorpus load_split(const std::string& dir, const std::string& split, const ParallelCorpus& train);

struct TrainOptions {
  ModelConfig model;  // vocab sizes are taken from the corpus
  AdamConfig adam{1e-3, 1e-7, 500, 0.9, 0.98, 1e-9};
  TrainConfig train;
  std::size_t steps = 2000;
  std::uint64_t seed = 1;

  KeyValues to_key_values() const;
};

/// A model, its optimizer state and the position in the data stream.
/// Training is a pure function of (corpus, options): stopping after any
/// step and resuming from the checkpoint gives bitwise the same result as
/// an uninterrupted run.
class TrainingSession {
 public:
  TrainingSession(const ParallelCorpus& corpus, TrainOptions options);
  // Throws FormatError when the checkpoint does not match the corpus.
  static TrainingSession resume(const ParallelCorpus& corpus, const Checkpoint& checkpoint);

  // Trains until the optimizer step reaches `until` (default: options.steps).
  void run(std::ostream* log = nullptr, std::optional<std::size_t> until = std::nullopt);

  Checkpoint checkpoint() const;
  const Transformer<float>& model() const { return model_; }
  const TrainOptions& options() const { return options_; }
  void set_total_steps(std::size_t steps) { options_.steps = steps; }
  std::size_t step() const { return adam_.step; }
  const AdamState<float>& adam() const { return adam_; }
  const std::vector<double>& losses() const { return losses_; }

 private:
  TrainingSession(const ParallelCorpus& corpus, TrainOptions options, Transformer<float> model);

  const ParallelCorpus* corpus_;
  TrainOptions options_;
  Transformer<float> model_;
  AdamState<float> adam_;
  std::size_t epoch_ = 0;
  std::size_t next_batch_ = 0;
  std::vector<double> losses_;
};

// Rebuilds the model from a checkpoint; checks it against the corpus
// vocabularies when one is given.
Transformer<float> load_model(const Checkpoint& checkpoint, const ParallelCorpus* corpus = nullptr);

enum class DecodeMode { beam, mixdiv };

struct DecodeRequest {
  DecodeMode mode = DecodeMode::mixdiv;
  DecodeConfig config;
  std::size_t top_n = 1;  // beam mode only

  KeyValues to_key_values() const;
};

// Per-input seed for diverse decoding, derived from the master seed.
std::uint64_t input_seed(std::uint64_t master_seed, std::size_t input_index);

/// Decodes every input; `workers` threads split the inputs, the result is
/// the same for any worker count. `outputs[i][k]` is hypothesis k of input i.
HypothesesFile decode_inputs(const Transformer<float>& model, const ParallelCorpus& train, const LengthBuckets& buckets,
                             const std::vector<TokenIds>& inputs, const DecodeRequest& request,
                             std::size_t workers = 1);

// "# mixdiv <command>" followed by one "# key = value" line per entry.
std::string header_text(const std::string& command, const KeyValues& kv);

// Writes the header text followed by the hypothesis rows.
void write_hypotheses(const std::string& path, const std::string& header, const HypothesesFile& file);

// Corpus BLEU of top-1 beam search (beam 4, length penalty 0.6).
double baseline_bleu(const Transformer<float>& model, const std::vector<TokenIds>& inputs,
                     const std::vector<Tokens>& references, const Vocab& target_vocab, std::size_t workers = 1);

struct SweepOptions {
  std::vector<double> taus{0.1, 0.3, 0.5};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  DecodeConfig base;  // tau and seed are overridden per cell
  std::optional<double> baseline;  // computed with baseline_bleu when absent
  BleuLevel level = BleuLevel::corpus;
  std::size_t workers = 1;

  KeyValues to_key_values() const;
};

struct SweepRow {
  double tau = 0.0;
  std::uint64_t seed = 0;
  MetricsReport report;
};

/// One CSV row per (tau, seed) cell in tau-major order, flushed as soon as
/// every earlier row is written. An existing file with the same header is
/// resumed after its last complete row; a different header is an error.
/// Cells run on `workers` threads; the file is identical for any count.
std::vector<SweepRow> run_sweep(const Transformer<float>& model, const ParallelCorpus& train,
                                const LengthBuckets& buckets, const std::vector<TokenIds>& inputs,
                                const std::vector<Tokens>& references, const SweepOptions& options,
                                const std::string& csv_path, const KeyValues& header = {});

}  // namespace mixdiv
