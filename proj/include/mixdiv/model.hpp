#pragma once

// Post-norm encoder-decoder transformer. Both stacks take embedding
// sequences rather than token ids so callers can mix embeddings before the
// network sees them; sinusoidal positions are added inside encode/decode.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixdiv/rng.hpp"
#include "mixdiv/tensor.hpp"

namespace mixdiv {

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t max_len = 64;
  double dropout = 0.1;
  double label_smoothing = 0.1;

  // Throws ContractError on an inconsistent configuration.
  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  static ModelConfig from_key_values(const std::map<std::string, std::string>& kv);
};

// Keys carry no bias: softmax is invariant to it.
template <typename T>
struct AttentionWeights {
  Tensor<T> wq, bq, wk, wv, bv, wo, bo;
};

template <typename T>
struct FeedForwardWeights {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct NormWeights {
  Tensor<T> gain, bias;
};

template <typename T>
struct EncoderLayerWeights {
  AttentionWeights<T> self_attn;
  NormWeights<T> norm1;
  FeedForwardWeights<T> ffn;
  NormWeights<T> norm2;
};

template <typename T>
struct DecoderLayerWeights {
  AttentionWeights<T> self_attn;
  NormWeights<T> norm1;
  AttentionWeights<T> cross_attn;
  NormWeights<T> norm2;
  FeedForwardWeights<T> ffn;
  NormWeights<T> norm3;
};

template <typename T>
struct Parameters {
  Tensor<T> src_embed;  // [V_src x d_model]
  Tensor<T> tgt_embed;  // [V_tgt x d_model]
  std::vector<EncoderLayerWeights<T>> encoder;
  std::vector<DecoderLayerWeights<T>> decoder;
  Tensor<T> out_w;  // [d_model x V_tgt]
  Tensor<T> out_b;

  // Handles share storage with the fields, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
  std::vector<Tensor<T>> tensors() const;
  void zero_grad();
  bool all_finite() const;

  static Parameters initialize(const ModelConfig& config, RngStream rng);
  // Builds the structure from named tensors (e.g. a checkpoint); throws
  // FormatError when a tensor is missing or has the wrong shape.
  static Parameters from_named(const ModelConfig& config,
                               const std::vector<std::pair<std::string, Tensor<T>>>& tensors);
  template <typename U>
  Parameters<U> cast(const ModelConfig& config) const;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> hidden;  // [batch*length x d_model]
  Mask key_valid;    // batch*length
  std::size_t batch = 1;
  std::size_t length = 0;
};

struct ForwardOptions {
  bool train = false;
  RngStream* dropout_rng = nullptr;  // required when train && dropout > 0
  bool positional = true;
};

// One batch in model space: embeddings are already mixed (or plain).
template <typename T>
struct TrainBatch {
  Tensor<T> src_embeddings;  // [batch*src_len x d_model]
  Tensor<T> tgt_inputs;      // [batch*tgt_len x d_model], shifted right
  Tensor<T> soft_labels;     // [batch*tgt_len x V_tgt]
  Mask src_mask;
  Mask tgt_mask;  // positions that contribute to the loss
  std::size_t batch = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
};

template <typename T>
class IncrementalDecoder;

template <typename T>
class Transformer {
 public:
  Transformer(ModelConfig config, Parameters<T> params);

  const ModelConfig& config() const { return config_; }
  Parameters<T>& params() { return params_; }
  const Parameters<T>& params() const { return params_; }

  // Table rows scaled by sqrt(d_model); no positions yet.
  Tensor<T> embed_source(std::span<const int> tokens) const;
  Tensor<T> embed_target(std::span<const int> tokens) const;

  EncoderOutput<T> encode(const Tensor<T>& embeddings, std::size_t batch, const Mask& padding_mask,
                          const ForwardOptions& options = {}) const;
  // Teacher-forced decoder over a [batch*len x d] prefix; logits for every
  // position, each depending only on positions at or before it.
  Tensor<T> decode_full(const EncoderOutput<T>& enc, const Tensor<T>& prefix, std::size_t len,
                        const ForwardOptions& options = {}) const;
  // Logits [V_tgt] following a single prefix of length t >= 1.
  Tensor<T> decode_step(const EncoderOutput<T>& enc, const Tensor<T>& prefix) const;
  Tensor<T> forward_train(const TrainBatch<T>& batch, const ForwardOptions& options = {}) const;

  IncrementalDecoder<T> start_decoding(const EncoderOutput<T>& enc, std::size_t beams) const;

 private:
  friend class IncrementalDecoder<T>;

  Tensor<T> add_positions(const Tensor<T>& x, std::size_t batch, std::size_t len, std::size_t offset) const;
  Tensor<T> attention_block(const Tensor<T>& queries, const Tensor<T>& keys_values, const AttentionWeights<T>& w,
                            const AttentionSpec& spec) const;
  Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& w) const;
  Tensor<T> residual_norm(const Tensor<T>& x, const Tensor<T>& sublayer, const NormWeights<T>& norm,
                          const ForwardOptions& options) const;
  Tensor<T> embed(const Tensor<T>& table, std::span<const int> tokens) const;

  ModelConfig config_;
  Parameters<T> params_;
  Buffer<T> positions_;  // [max_len x d_model]
};

/// Cached step-by-step decoding for a single source sentence and a set of
/// beams. Keeps per-layer self-attention keys/values so each step costs one
/// position instead of recomputing the whole prefix.
template <typename T>
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Transformer<T>& model, const EncoderOutput<T>& enc, std::size_t beams);

  // embeddings: [beams x d_model] inputs at the next position.
  // Returns logits [beams x V_tgt].
  Tensor<T> step(const Tensor<T>& embeddings);
  // New beam b continues from the state of old beam sources[b].
  void reorder(std::span<const std::size_t> sources);
  std::size_t position() const { return position_; }
  std::size_t beams() const { return beams_; }

 private:
  Tensor<T> replicate(const Buffer<T>& rows, std::size_t count) const;

  const Transformer<T>* model_;
  std::size_t beams_;
  std::size_t position_ = 0;
  std::size_t src_len_;
  Mask cross_valid_;
  std::vector<Buffer<T>> cross_keys_, cross_values_;    // per layer [src_len x d]
  std::vector<Buffer<T>> self_keys_, self_values_;      // per layer [beams x position x d]
};

// MIXDIV1 checkpoint: header line, `key = value` config lines, blank line,
// then per tensor a `name dim0 dim1 ...` line followed by raw little-endian
// float32 values in row-major order.
struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const std::string* find(const std::string& key) const;
  std::map<std::string, std::string> config_map() const;
};

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace mixdiv
