#include "mixdiv/mixup_train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mixdiv {

void MixupConfig::validate() const {
  if (!(alpha > 0.0)) throw ContractError("mixup: alpha must be positive");
  if (forced_lambda && !(*forced_lambda >= 0.0 && *forced_lambda <= 1.0)) {
    throw ContractError("mixup: forced lambda must lie in [0, 1]");
  }
}

double sample_pair_lambda(double alpha, RngStream& rng) {
  if (!(alpha > 0.0)) throw ContractError("sample_pair_lambda: alpha must be positive");
  return rng.beta(alpha);
}

namespace {

struct Constituent {
  const SentencePair* pair;
  double weight;
};

// Padded id grids for one constituent: source [len], decoder input
// [<bos> y...], labels [y... <eos>].
void append_ids(const SentencePair& p, std::size_t src_len, std::size_t tgt_len, std::vector<int>& src,
                std::vector<int>& tgt_in, std::vector<int>& labels) {
  for (std::size_t t = 0; t < src_len; ++t) src.push_back(t < p.source.size() ? p.source[t] : kPad);
  for (std::size_t t = 0; t < tgt_len; ++t) {
    tgt_in.push_back(t == 0 ? kBos : (t - 1 < p.target.size() ? p.target[t - 1] : kPad));
    labels.push_back(t < p.target.size() ? p.target[t] : (t == p.target.size() ? kEos : kPad));
  }
}

// examples[b] lists the (pair, weight) constituents of example b.
template <typename T>
MixedBatch<T> assemble(const Transformer<T>& model, const std::vector<std::vector<Constituent>>& examples, double eps) {
  if (examples.empty()) throw ContractError("training batch is empty");
  if (!(eps >= 0.0 && eps < 1.0)) throw ContractError("label smoothing must lie in [0, 1)");
  const std::size_t batch = examples.size();
  const std::size_t parts = examples.front().size();
  const std::size_t vocab = model.config().tgt_vocab;

  std::size_t src_len = 0, tgt_len = 0;
  for (const auto& ex : examples) {
    for (const auto& c : ex) {
      if (c.weight == 0.0) continue;
      src_len = std::max(src_len, c.pair->source.size());
      tgt_len = std::max(tgt_len, c.pair->target.size() + 1);
    }
  }

  MixedBatch<T> out;
  auto& tb = out.batch;
  tb.batch = batch;
  tb.src_len = src_len;
  tb.tgt_len = tgt_len;
  tb.src_mask.assign(batch * src_len, 0);
  tb.tgt_mask.assign(batch * tgt_len, 0);
  std::vector<double> labels(batch * tgt_len * vocab, 0.0);

  Tensor<T> src_sum, tgt_sum;
  for (std::size_t k = 0; k < parts; ++k) {
    std::vector<int> src, tgt_in, label_ids;
    Buffer<T> src_w, tgt_w;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& c = examples[b][k];
      append_ids(*c.pair, src_len, tgt_len, src, tgt_in, label_ids);
      src_w.insert(src_w.end(), src_len, static_cast<T>(c.weight));
      tgt_w.insert(tgt_w.end(), tgt_len, static_cast<T>(c.weight));
      if (c.weight == 0.0) continue;
      for (std::size_t t = 0; t < src_len && t < c.pair->source.size(); ++t) tb.src_mask[b * src_len + t] = 1;
      for (std::size_t t = 0; t < tgt_len && t <= c.pair->target.size(); ++t) tb.tgt_mask[b * tgt_len + t] = 1;
      for (std::size_t t = 0; t < tgt_len; ++t)
        labels[(b * tgt_len + t) * vocab + label_ids[b * tgt_len + t]] += c.weight;
    }
    auto src_emb = model.embed_source(src);
    auto tgt_emb = model.embed_target(tgt_in);
    if (parts > 1) {
      src_emb = scale_rows<T>(src_emb, src_w);
      tgt_emb = scale_rows<T>(tgt_emb, tgt_w);
    }
    src_sum = k == 0 ? src_emb : add(src_sum, src_emb);
    tgt_sum = k == 0 ? tgt_emb : add(tgt_sum, tgt_emb);
  }

  const double uniform = eps / static_cast<double>(vocab);
  Buffer<T> smoothed(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) smoothed[i] = static_cast<T>((1.0 - eps) * labels[i] + uniform);

  tb.src_embeddings = src_sum;
  tb.tgt_inputs = tgt_sum;
  tb.soft_labels = Tensor<T>::from({batch * tgt_len, vocab}, std::move(smoothed));
  for (const auto& ex : examples) out.lambdas.push_back(ex.front().weight);
  return out;
}

}  // namespace

template <typename T>
TrainBatch<T> build_plain_batch(const Transformer<T>& model, std::span<const SentencePair* const> pairs, double eps) {
  std::vector<std::vector<Constituent>> examples;
  for (const auto* p : pairs) examples.push_back({{p, 1.0}});
  return assemble(model, examples, eps).batch;
}

template <typename T>
MixedBatch<T> build_mixed_batch(const Transformer<T>& model, std::span<const SentencePair* const> pairs_i,
                                std::span<const SentencePair* const> pairs_j, std::span<const double> lambdas,
                                double eps) {
  if (pairs_i.size() != pairs_j.size() || pairs_i.size() != lambdas.size()) {
    throw DimensionError("build_mixed_batch: batch sizes differ (" + std::to_string(pairs_i.size()) + ", " +
                         std::to_string(pairs_j.size()) + ", " + std::to_string(lambdas.size()) + " lambdas)");
  }
  std::vector<std::vector<Constituent>> examples;
  for (std::size_t b = 0; b < pairs_i.size(); ++b) {
    if (!(lambdas[b] >= 0.0 && lambdas[b] <= 1.0)) throw ContractError("build_mixed_batch: lambda outside [0, 1]");
    examples.push_back({{pairs_i[b], lambdas[b]}, {pairs_j[b], 1.0 - lambdas[b]}});
  }
  return assemble(model, examples, eps);
}

std::vector<std::size_t> pack_batches(const ParallelCorpus& corpus, std::span<const std::size_t> order,
                                      std::size_t batch_tokens) {
  if (batch_tokens == 0) throw ContractError("batch_tokens must be positive");
  std::vector<std::size_t> ends;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t need = corpus.pairs[order[i]].target.size() + 1;
    if (tokens > 0 && tokens + need > batch_tokens) {
      ends.push_back(i);
      tokens = 0;
    }
    tokens += need;
  }
  if (tokens > 0) ends.push_back(order.size());
  return ends;
}

template <typename T>
EpochStats train_epoch(const ParallelCorpus& corpus, Transformer<T>& model, const TrainConfig& config,
                       AdamState<T>& adam, const RngStream& rng, std::ostream* log, std::size_t start_batch) {
  if (corpus.pairs.empty()) throw ContractError("train_epoch: corpus is empty");
  config.mixup.validate();

  auto shuffled = [&corpus](RngStream stream) {
    std::vector<std::size_t> order(corpus.pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), stream.engine());
    return order;
  };
  const auto order_i = shuffled(rng.derive("stream_i"));
  const auto order_j = config.mixup.enabled ? shuffled(rng.derive("stream_j")) : std::vector<std::size_t>{};
  const auto ends = pack_batches(corpus, order_i, config.batch_tokens);
  if (start_batch > ends.size()) throw ContractError("train_epoch: start batch beyond the end of the epoch");

  auto params = model.params().tensors();
  const double eps = model.config().label_smoothing;
  EpochStats stats;
  double loss_sum = 0.0;
  std::size_t b = start_batch;
  for (; b < ends.size(); ++b) {
    if (config.max_steps > 0 && adam.step >= config.max_steps) break;
    const std::size_t begin = b == 0 ? 0 : ends[b - 1];
    std::vector<const SentencePair*> batch_i, batch_j;
    std::size_t tokens = 0;
    for (std::size_t k = begin; k < ends[b]; ++k) {
      batch_i.push_back(&corpus.pairs[order_i[k]]);
      if (config.mixup.enabled) batch_j.push_back(&corpus.pairs[order_j[k]]);
      tokens += corpus.pairs[order_i[k]].target.size() + 1;
    }

    const RngStream step_rng = rng.derive("batch", b);
    RngStream dropout_rng = step_rng.derive("dropout");
    ForwardOptions options{true, &dropout_rng, true};
    Tensor<T> loss;
    if (config.mixup.enabled) {
      RngStream lambda_rng = step_rng.derive("lambda");
      std::vector<double> lambdas;
      for (std::size_t k = 0; k < batch_i.size(); ++k) {
        lambdas.push_back(config.mixup.forced_lambda ? *config.mixup.forced_lambda
                                                     : sample_pair_lambda(config.mixup.alpha, lambda_rng));
      }
      loss = model.forward_train(build_mixed_batch<T>(model, batch_i, batch_j, lambdas, eps).batch, options);
    } else {
      loss = model.forward_train(build_plain_batch<T>(model, batch_i, eps), options);
    }
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      throw NumericalError("non-finite training loss at step " + std::to_string(adam.step + 1));
    }
    model.params().zero_grad();
    loss.backward();
    adam_step<T>(params, adam);

    stats.step_losses.push_back(value);
    stats.target_tokens += tokens;
    loss_sum += value;
    ++stats.steps;
    if (log && config.log_every > 0 && adam.step % config.log_every == 0) {
      *log << adam.step << ' ' << value << ' ' << learning_rate(adam.config, adam.step) << ' ' << tokens << '\n';
    }
  }
  stats.next_batch = b;
  stats.finished = b == ends.size();
  stats.mean_loss = stats.steps ? loss_sum / static_cast<double>(stats.steps) : 0.0;
  return stats;
}

template <typename T>
double mean_token_nll(const ParallelCorpus& corpus, const Transformer<T>& model, std::size_t batch_tokens) {
  if (corpus.pairs.empty()) throw ContractError("mean_token_nll: corpus is empty");
  NoGradGuard no_grad;
  std::vector<std::size_t> order(corpus.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const auto ends = pack_batches(corpus, order, batch_tokens);
  double total = 0.0;
  std::size_t tokens = 0;
  std::size_t begin = 0;
  for (std::size_t end : ends) {
    std::vector<const SentencePair*> batch;
    std::size_t batch_tokens_used = 0;
    for (std::size_t k = begin; k < end; ++k) {
      batch.push_back(&corpus.pairs[k]);
      batch_tokens_used += corpus.pairs[k].target.size() + 1;
    }
    const double loss = static_cast<double>(model.forward_train(build_plain_batch<T>(model, batch, 0.0)).item());
    total += loss * static_cast<double>(batch_tokens_used);
    tokens += batch_tokens_used;
    begin = end;
  }
  return total / static_cast<double>(tokens);
}

template TrainBatch<float> build_plain_batch(const Transformer<float>&, std::span<const SentencePair* const>, double);
template TrainBatch<double> build_plain_batch(const Transformer<double>&, std::span<const SentencePair* const>, double);
template MixedBatch<float> build_mixed_batch(const Transformer<float>&, std::span<const SentencePair* const>,
                                             std::span<const SentencePair* const>, std::span<const double>, double);
template MixedBatch<double> build_mixed_batch(const Transformer<double>&, std::span<const SentencePair* const>,
                                              std::span<const SentencePair* const>, std::span<const double>, double);
template EpochStats train_epoch(const ParallelCorpus&, Transformer<float>&, const TrainConfig&, AdamState<float>&,
                                const RngStream&, std::ostream*, std::size_t);
template EpochStats train_epoch(const ParallelCorpus&, Transformer<double>&, const TrainConfig&, AdamState<double>&,
                                const RngStream&, std::ostream*, std::size_t);
template double mean_token_nll(const ParallelCorpus&, const Transformer<float>&, std::size_t);
template double mean_token_nll(const ParallelCorpus&, const Transformer<double>&, std::size_t);

}  // namespace mixdiv
