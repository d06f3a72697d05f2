#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "mixdiv/adam.hpp"
#include "mixdiv/corpus.hpp"
#include "mixdiv/model.hpp"
#include "mixdiv/rng.hpp"

namespace mixdiv {

struct MixupConfig {
  double alpha = 1.0;  // Beta(alpha, alpha) concentration
  bool enabled = false;
  // Test hook: bypasses sampling and uses this weight for every example.
  std::optional<double> forced_lambda;

  void validate() const;
};

// One interpolation weight per training example, lambda ~ Beta(alpha, alpha).
double sample_pair_lambda(double alpha, RngStream& rng);

template <typename T>
struct MixedBatch {
  TrainBatch<T> batch;
  std::vector<double> lambdas;  // per example, in [0, 1]
};

/// Standard teacher-forcing batch: source ids, <bos>-shifted target inputs,
/// label smoothing eps applied to one-hot labels.
template <typename T>
TrainBatch<T> build_plain_batch(const Transformer<T>& model, std::span<const SentencePair* const> pairs, double eps);

/// Interpolates pairs_i[b] and pairs_j[b] with weight lambdas[b] on both
/// sides. Shorter constituents are padded with <pad> (embedding and label),
/// labels are mixed before smoothing, and a position is live when it is a
/// real token of a constituent that carries nonzero weight.
template <typename T>
MixedBatch<T> build_mixed_batch(const Transformer<T>& model, std::span<const SentencePair* const> pairs_i,
                                std::span<const SentencePair* const> pairs_j, std::span<const double> lambdas,
                                double eps);

struct TrainConfig {
  std::size_t batch_tokens = 1024;  // target tokens (with <eos>) per step
  std::size_t max_steps = 0;        // 0: run the full epoch
  std::size_t log_every = 100;
  MixupConfig mixup;
};

struct EpochStats {
  std::size_t steps = 0;
  double mean_loss = 0.0;
  std::size_t target_tokens = 0;
  std::vector<double> step_losses;
  std::size_t next_batch = 0;  // first batch not yet trained on
  bool finished = false;       // every batch of the epoch was used
};

// Greedy packing of a visiting order into batches of at most `batch_tokens`
// target tokens (with <eos>); a single longer pair gets a batch of its own.
// Returns the end offset of each batch.
std::vector<std::size_t> pack_batches(const ParallelCorpus& corpus, std::span<const std::size_t> order,
                                      std::size_t batch_tokens);

/// One pass over a shuffled copy of the corpus, starting at batch
/// `start_batch`, until the optimizer reaches config.max_steps. With mixup
/// on, a second, independently shuffled stream supplies the partner of each
/// example. Batch b draws its dropout masks and lambdas from streams derived
/// from (rng, b), so resuming at a batch boundary continues bitwise. Writes
/// `step loss lr tokens_per_step` lines to `log` every log_every steps.
/// Throws NumericalError on a non-finite loss.
template <typename T>
EpochStats train_epoch(const ParallelCorpus& corpus, Transformer<T>& model, const TrainConfig& config,
                       AdamState<T>& adam, const RngStream& rng, std::ostream* log = nullptr,
                       std::size_t start_batch = 0);

// Mean per-token negative log-likelihood of the targets (with <eos>),
// without label smoothing or dropout.
template <typename T>
double mean_token_nll(const ParallelCorpus& corpus, const Transformer<T>& model, std::size_t batch_tokens = 1024);

}  // namespace mixdiv
