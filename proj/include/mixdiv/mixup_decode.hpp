#pragma once

// Diverse decoding by interpolating the input with sampled training pairs.
//
// For partner i the encoder sees lambda_t * e(x_t) + (1 - lambda_t) * e(x^i_t)
// at every source position, and at decoder step t each beam's previous
// token embedding is mixed the same way with the partner target's token
// t-1. Each lambda is a folded Beta(alpha_i, alpha_i) draw with
// alpha_i = tau + tau / d(x, x^i), d being the distance between mean
// source embeddings.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mixdiv/corpus.hpp"
#include "mixdiv/model.hpp"
#include "mixdiv/rng.hpp"

namespace mixdiv {

inline constexpr double kMinPartnerDistance = 1e-6;

struct DecodeConfig {
  std::size_t k = 5;
  double tau = 0.3;
  std::size_t beam = 4;
  double length_penalty = 0.6;
  std::size_t max_output_len = 0;  // 0: min(model max_len, 2 * |x| + 10)
  bool similarity_weighting = true;
  bool length_selection = true;
  std::optional<double> fixed_alpha;  // used without similarity weighting; defaults to tau
  std::uint64_t seed = 1;
  // Test hook: every interpolation weight (encoder and decoder) takes this value.
  std::optional<double> forced_lambda;

  void validate() const;
};

struct Partner {
  std::size_t pair_id = 0;
  TokenIds source;
  TokenIds target;
  double alpha = 0.0;
  double distance = 0.0;
};

struct Hypothesis {
  TokenIds tokens;  // generated tokens, ending in <eos> unless truncated
  double logprob = 0.0;
  double score = 0.0;  // logprob / length^length_penalty
  bool finished = true;
};

struct DiverseOutput {
  TokenIds input;
  std::vector<Hypothesis> hypotheses;  // partner order
  std::vector<Partner> partners;
  std::vector<std::vector<double>> lambda_traces;  // decoder weights per hypothesis
  bool shortfall = false;
};

// Mean of the (unscaled) embedding rows of the tokens, in double precision.
template <typename T>
std::vector<double> sentence_embedding(std::span<const int> tokens, const Tensor<T>& table);

struct PartnerWeight {
  double alpha;
  double distance;
};

template <typename T>
PartnerWeight partner_alpha(std::span<const int> x, std::span<const int> partner, double tau, const Tensor<T>& table);

// max(b, 1 - b) with b ~ Beta(alpha, alpha); always in [0.5, 1].
double sample_step_lambda(double alpha, RngStream& rng);

// Tokenwise interpolation over the |x| input positions. Partner positions
// past its end use <pad>; extra partner tokens are ignored.
template <typename T>
Tensor<T> mix_source(const Transformer<T>& model, std::span<const int> x, std::span<const int> partner,
                     std::span<const double> lambdas);

double length_normalized_score(double logprob, std::size_t length, double length_penalty);

// Supplies next-token log-probabilities for a set of live beams.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  // prev_tokens[b] is beam b's last token; returns [beams x vocab] log-probs.
  virtual std::vector<double> step(std::span<const int> prev_tokens) = 0;
  virtual void reorder(std::span<const std::size_t> sources) = 0;
};

struct BeamOptions {
  std::size_t beam = 4;
  double length_penalty = 0.6;
  std::size_t max_len = 64;
  std::size_t top_n = 1;
};

/// Beam search over any scorer. At each step the best 2*beam expansions
/// are ranked; an <eos> expansion among the first `beam` ranks finalizes a
/// hypothesis, the rest refill up to `beam` live beams. Stops once `beam`
/// hypotheses are final or at max_len; if nothing finished, the best
/// unfinished beams come back with finished == false. <pad> and <bos> are
/// never generated.
std::vector<Hypothesis> beam_search_core(StepScorer& scorer, const BeamOptions& options);

template <typename T>
std::vector<Hypothesis> beam_search(const Transformer<T>& model, std::span<const int> x, std::size_t beam,
                                    double length_penalty, std::size_t top_n, std::size_t max_output_len = 0);

/// Beam search where each step's previous-token embedding is mixed with the
/// partner target's token at the same step. One lambda per step is shared
/// by all beams; past the partner's end the partner operand is <eos>.
template <typename T>
Hypothesis mixup_beam_search(const Transformer<T>& model, const EncoderOutput<T>& enc_mixed,
                             std::span<const int> partner_target, const DecodeConfig& config, double alpha,
                             RngStream& rng, std::size_t max_output_len, std::vector<double>* lambda_trace = nullptr);

/// K translations of x, one per sampled partner, in partner order. The rng
/// for partner i is derived from (master_seed, i) so results do not depend
/// on the order the decodes run in.
template <typename T>
DiverseOutput diverse_translate(const Transformer<T>& model, const ParallelCorpus& corpus,
                                const LengthBuckets& buckets, std::span<const int> x, const DecodeConfig& config,
                                std::uint64_t master_seed);

}  // namespace mixdiv
