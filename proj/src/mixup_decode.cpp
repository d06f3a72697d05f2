#include "mixdiv/mixup_decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mixdiv {

void DecodeConfig::validate() const {
  if (k == 0) throw ContractError("decode: K must be at least 1");
  if (!(tau > 0.0)) throw ContractError("decode: tau must be positive");
  if (beam == 0) throw ContractError("decode: beam size must be at least 1");
  if (fixed_alpha && !(*fixed_alpha > 0.0)) throw ContractError("decode: fixed alpha must be positive");
  if (forced_lambda && !(*forced_lambda >= 0.0 && *forced_lambda <= 1.0)) {
    throw ContractError("decode: forced lambda must lie in [0, 1]");
  }
}

template <typename T>
std::vector<double> sentence_embedding(std::span<const int> tokens, const Tensor<T>& table) {
  if (tokens.empty()) throw ContractError("sentence_embedding: empty token sequence");
  const std::size_t d = table.dim(1);
  std::vector<double> mean(d, 0.0);
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
      throw ContractError("sentence_embedding: token id " + std::to_string(id) + " out of range");
    }
    for (std::size_t c = 0; c < d; ++c) mean[c] += static_cast<double>(table.data()[id * d + c]);
  }
  for (auto& v : mean) v /= static_cast<double>(tokens.size());
  return mean;
}

template <typename T>
PartnerWeight partner_alpha(std::span<const int> x, std::span<const int> partner, double tau, const Tensor<T>& table) {
  if (!(tau > 0.0)) throw ContractError("partner_alpha: tau must be positive");
  const auto a = sentence_embedding(x, table);
  const auto b = sentence_embedding(partner, table);
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  const double d = std::max(std::sqrt(sq), kMinPartnerDistance);
  return {tau + tau / d, d};
}

double sample_step_lambda(double alpha, RngStream& rng) {
  if (!(alpha > 0.0)) throw ContractError("sample_step_lambda: alpha must be positive");
  const double b = rng.beta(alpha);
  return std::max(b, 1.0 - b);
}

template <typename T>
Tensor<T> mix_source(const Transformer<T>& model, std::span<const int> x, std::span<const int> partner,
                     std::span<const double> lambdas) {
  if (lambdas.size() != x.size()) {
    throw DimensionError("mix_source: " + std::to_string(lambdas.size()) + " weights for " +
                         std::to_string(x.size()) + " positions");
  }
  std::vector<int> aligned(x.size(), kPad);
  std::copy_n(partner.begin(), std::min(partner.size(), x.size()), aligned.begin());
  Buffer<T> w_input(lambdas.begin(), lambdas.end());
  Buffer<T> w_partner(lambdas.size());
  for (std::size_t t = 0; t < lambdas.size(); ++t) w_partner[t] = static_cast<T>(1.0 - lambdas[t]);
  return add(scale_rows<T>(model.embed_source(x), w_input), scale_rows<T>(model.embed_source(aligned), w_partner));
}

double length_normalized_score(double logprob, std::size_t length, double length_penalty) {
  return logprob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), length_penalty);
}

std::vector<Hypothesis> beam_search_core(StepScorer& scorer, const BeamOptions& options) {
  if (options.beam == 0) throw ContractError("beam search: beam size must be at least 1");
  if (options.top_n == 0 || options.top_n > options.beam) {
    throw ContractError("beam search: top_n must lie in [1, beam]");
  }
  if (options.max_len == 0) throw ContractError("beam search: max_len must be positive");
  const std::size_t vocab = scorer.vocab_size();

  struct Live {
    TokenIds tokens;
    double logprob;
  };
  struct Candidate {
    double logprob;
    std::size_t beam;
    int token;
  };
  std::vector<Live> live{{{}, 0.0}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 1; step <= options.max_len; ++step) {
    std::vector<int> prev;
    for (const auto& b : live) prev.push_back(b.tokens.empty() ? kBos : b.tokens.back());
    const auto logp = scorer.step(prev);

    std::vector<Candidate> cands;
    cands.reserve(live.size() * vocab);
    for (std::size_t b = 0; b < live.size(); ++b) {
      for (std::size_t v = 0; v < vocab; ++v) {
        if (v == static_cast<std::size_t>(kPad) || v == static_cast<std::size_t>(kBos)) continue;
        const double lp = logp[b * vocab + v];
        if (lp == -std::numeric_limits<double>::infinity()) continue;
        cands.push_back({live[b].logprob + lp, b, static_cast<int>(v)});
      }
    }
    const std::size_t keep = std::min(cands.size(), 2 * options.beam);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.logprob != b.logprob) return a.logprob > b.logprob;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });

    std::vector<Live> next;
    std::vector<std::size_t> sources;
    for (std::size_t r = 0; r < keep; ++r) {
      const auto& c = cands[r];
      TokenIds tokens = live[c.beam].tokens;
      tokens.push_back(c.token);
      if (c.token == kEos) {
        if (r < options.beam) {
          const double score = length_normalized_score(c.logprob, tokens.size(), options.length_penalty);
          finished.push_back({std::move(tokens), c.logprob, score, true});
        }
      } else if (next.size() < options.beam) {
        next.push_back({std::move(tokens), c.logprob});
        sources.push_back(c.beam);
      }
    }
    live = std::move(next);
    if (finished.size() >= options.beam || live.empty() || step == options.max_len) break;
    scorer.reorder(sources);
  }

  auto by_score = [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; };
  if (finished.empty()) {
    for (const auto& b : live) {
      finished.push_back(
          {b.tokens, b.logprob, length_normalized_score(b.logprob, b.tokens.size(), options.length_penalty), false});
    }
  }
  std::stable_sort(finished.begin(), finished.end(), by_score);
  if (finished.size() > options.top_n) finished.resize(options.top_n);
  return finished;
}

namespace {

// Scores beams with the incremental decoder; optionally mixes each previous
// token embedding with a partner target token.
template <typename T>
class ModelScorer final : public StepScorer {
 public:
  ModelScorer(const Transformer<T>& model, const EncoderOutput<T>& enc, std::span<const int> partner_target,
              bool mix, std::optional<double> forced_lambda, double alpha, RngStream* rng,
              std::vector<double>* lambda_trace)
      : model_(model),
        decoder_(model.start_decoding(enc, 1)),
        partner_(partner_target.begin(), partner_target.end()),
        mix_(mix),
        forced_lambda_(forced_lambda),
        alpha_(alpha),
        rng_(rng),
        trace_(lambda_trace) {}

  std::size_t vocab_size() const override { return model_.config().tgt_vocab; }

  std::vector<double> step(std::span<const int> prev_tokens) override {
    NoGradGuard no_grad;
    const std::size_t beams = prev_tokens.size();
    Tensor<T> inputs = model_.embed_target(prev_tokens);
    if (mix_) {
      // Step t consumes token t-1 of both sequences; index 0 is <bos>.
      const std::size_t t_minus_1 = decoder_.position();
      int partner_token = kEos;
      if (t_minus_1 == 0) {
        partner_token = kBos;
      } else if (t_minus_1 <= partner_.size()) {
        partner_token = partner_[t_minus_1 - 1];
      }
      const double lambda = forced_lambda_ ? *forced_lambda_ : sample_step_lambda(alpha_, *rng_);
      if (trace_) trace_->push_back(lambda);
      std::vector<int> partner_ids(beams, partner_token);
      Buffer<T> w_self(beams, static_cast<T>(lambda));
      Buffer<T> w_partner(beams, static_cast<T>(1.0 - lambda));
      inputs = add(scale_rows<T>(inputs, w_self), scale_rows<T>(model_.embed_target(partner_ids), w_partner));
    }
    const auto logits = decoder_.step(inputs);
    const std::size_t vocab = vocab_size();
    std::vector<double> out(beams * vocab);
    for (std::size_t b = 0; b < beams; ++b) {
      const T* row = logits.data().data() + b * vocab;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double total = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) total += std::exp(static_cast<double>(row[v]) - mx);
      const double log_total = std::log(total) + mx;
      for (std::size_t v = 0; v < vocab; ++v) out[b * vocab + v] = static_cast<double>(row[v]) - log_total;
    }
    return out;
  }

  void reorder(std::span<const std::size_t> sources) override { decoder_.reorder(sources); }

 private:
  const Transformer<T>& model_;
  IncrementalDecoder<T> decoder_;
  TokenIds partner_;
  bool mix_;
  std::optional<double> forced_lambda_;
  double alpha_;
  RngStream* rng_;
  std::vector<double>* trace_;
};

std::size_t resolve_max_len(std::size_t requested, std::size_t input_len, std::size_t model_max) {
  std::size_t limit = requested ? requested : 2 * input_len + 10;
  return std::min(limit, model_max);
}

}  // namespace

template <typename T>
std::vector<Hypothesis> beam_search(const Transformer<T>& model, std::span<const int> x, std::size_t beam,
                                    double length_penalty, std::size_t top_n, std::size_t max_output_len) {
  if (x.empty()) throw ContractError("beam_search: empty input");
  NoGradGuard no_grad;
  auto enc = model.encode(model.embed_source(x), 1, Mask(x.size(), 1));
  ModelScorer<T> scorer(model, enc, {}, false, std::nullopt, 1.0, nullptr, nullptr);
  BeamOptions opts{beam, length_penalty, resolve_max_len(max_output_len, x.size(), model.config().max_len), top_n};
  return beam_search_core(scorer, opts);
}

template <typename T>
Hypothesis mixup_beam_search(const Transformer<T>& model, const EncoderOutput<T>& enc_mixed,
                             std::span<const int> partner_target, const DecodeConfig& config, double alpha,
                             RngStream& rng, std::size_t max_output_len, std::vector<double>* lambda_trace) {
  NoGradGuard no_grad;
  ModelScorer<T> scorer(model, enc_mixed, partner_target, true, config.forced_lambda, alpha, &rng, lambda_trace);
  BeamOptions opts{config.beam, config.length_penalty, std::min(max_output_len, model.config().max_len), 1};
  return beam_search_core(scorer, opts).front();
}

template <typename T>
DiverseOutput diverse_translate(const Transformer<T>& model, const ParallelCorpus& corpus,
                                const LengthBuckets& buckets, std::span<const int> x, const DecodeConfig& config,
                                std::uint64_t master_seed) {
  config.validate();
  if (x.empty()) throw ContractError("diverse_translate: empty input");
  NoGradGuard no_grad;
  const RngStream master(master_seed);

  // The input itself, when present in the corpus, is never its own partner.
  std::vector<std::size_t> exclude;
  for (auto id : buckets.bucket(x.size()))
    if (std::equal(x.begin(), x.end(), corpus.pairs[id].source.begin(), corpus.pairs[id].source.end()))
      exclude.push_back(id);

  RngStream partner_rng = master.derive("partners");
  const PartnerSample sample =
      config.length_selection ? sample_partners(buckets, x.size(), config.k, partner_rng, exclude)
                              : sample_partners_uniform(corpus, config.k, partner_rng, exclude);

  DiverseOutput out;
  out.input.assign(x.begin(), x.end());
  out.shortfall = sample.shortfall;
  const std::size_t max_len = resolve_max_len(config.max_output_len, x.size(), model.config().max_len);
  const auto& table = model.params().src_embed;

  for (std::size_t i = 0; i < sample.ids.size(); ++i) {
    const auto& pair = corpus.pairs.at(sample.ids[i]);
    Partner partner{pair.id, pair.source, pair.target, config.fixed_alpha.value_or(config.tau), 0.0};
    if (config.similarity_weighting) {
      const auto w = partner_alpha<T>(x, pair.source, config.tau, table);
      partner.alpha = w.alpha;
      partner.distance = w.distance;
    }

    const RngStream stream = master.derive("partner", i);
    RngStream enc_rng = stream.derive("encoder");
    RngStream dec_rng = stream.derive("decoder");
    std::vector<double> enc_lambdas(x.size());
    for (auto& l : enc_lambdas) l = config.forced_lambda ? *config.forced_lambda : sample_step_lambda(partner.alpha, enc_rng);

    auto enc = model.encode(mix_source(model, x, pair.source, enc_lambdas), 1, Mask(x.size(), 1));
    std::vector<double> trace;
    out.hypotheses.push_back(mixup_beam_search(model, enc, pair.target, config, partner.alpha, dec_rng, max_len, &trace));
    out.lambda_traces.push_back(std::move(trace));
    out.partners.push_back(std::move(partner));
  }
  return out;
}

#define MIXDIV_INSTANTIATE_DECODE(T)                                                                              \
  template std::vector<double> sentence_embedding(std::span<const int>, const Tensor<T>&);                        \
  template PartnerWeight partner_alpha(std::span<const int>, std::span<const int>, double, const Tensor<T>&);     \
  template Tensor<T> mix_source(const Transformer<T>&, std::span<const int>, std::span<const int>,                \
                                std::span<const double>);                                                         \
  template std::vector<Hypothesis> beam_search(const Transformer<T>&, std::span<const int>, std::size_t, double,  \
                                               std::size_t, std::size_t);                                         \
  template Hypothesis mixup_beam_search(const Transformer<T>&, const EncoderOutput<T>&, std::span<const int>,      \
                                        const DecodeConfig&, double, RngStream&, std::size_t,                     \
                                        std::vector<double>*);                                                    \
  template DiverseOutput diverse_translate(const Transformer<T>&, const ParallelCorpus&, const LengthBuckets&,    \
                                           std::span<const int>, const DecodeConfig&, std::uint64_t);

MIXDIV_INSTANTIATE_DECODE(float)
MIXDIV_INSTANTIATE_DECODE(double)

}  // namespace mixdiv
