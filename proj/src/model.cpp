#include "mixdiv/model.hpp"

#include <charconv>
#include <cmath>

namespace mixdiv {

void ModelConfig::validate() const {
  if (num_layers == 0) throw ContractError("model: num_layers must be positive");
  if (num_heads == 0 || d_model % num_heads != 0) {
    throw ContractError("model: d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
  }
  if (d_ff == 0) throw ContractError("model: d_ff must be positive");
  if (src_vocab == 0 || tgt_vocab == 0) throw ContractError("model: vocabulary sizes must be positive");
  if (max_len == 0) throw ContractError("model: max_len must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("model: dropout must lie in [0, 1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ContractError("model: label_smoothing must lie in [0, 1)");
  }
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_key_values() const {
  auto num = [](double v) {
    char buf[32];
    return std::string(buf, std::to_chars(buf, buf + sizeof(buf), v).ptr);
  };
  return {{"num_layers", std::to_string(num_layers)}, {"num_heads", std::to_string(num_heads)},
          {"d_model", std::to_string(d_model)},       {"d_ff", std::to_string(d_ff)},
          {"src_vocab", std::to_string(src_vocab)},   {"tgt_vocab", std::to_string(tgt_vocab)},
          {"max_len", std::to_string(max_len)},       {"dropout", num(dropout)},
          {"label_smoothing", num(label_smoothing)}};
}

ModelConfig ModelConfig::from_key_values(const std::map<std::string, std::string>& kv) {
  auto get = [&kv](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("model config is missing key '" + key + "'");
    return it->second;
  };
  ModelConfig c;
  try {
    c.num_layers = std::stoul(get("num_layers"));
    c.num_heads = std::stoul(get("num_heads"));
    c.d_model = std::stoul(get("d_model"));
    c.d_ff = std::stoul(get("d_ff"));
    c.src_vocab = std::stoul(get("src_vocab"));
    c.tgt_vocab = std::stoul(get("tgt_vocab"));
    c.max_len = std::stoul(get("max_len"));
    c.dropout = std::stod(get("dropout"));
    c.label_smoothing = std::stod(get("label_smoothing"));
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const FormatError*>(&e)) throw;
    throw FormatError(std::string("model config has a malformed number: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

enum class Init { Embedding, Matrix, Zero, One };

// Calls f(name, tensor_slot, shape, init) for every parameter in a fixed order.
template <typename P, typename F>
void visit_parameters(P& p, const ModelConfig& c, F&& f) {
  const std::size_t d = c.d_model;
  auto attention = [&](const std::string& prefix, auto& a) {
    f(prefix + ".wq", a.wq, Shape{d, d}, Init::Matrix);
    f(prefix + ".bq", a.bq, Shape{d}, Init::Zero);
    f(prefix + ".wk", a.wk, Shape{d, d}, Init::Matrix);
    f(prefix + ".wv", a.wv, Shape{d, d}, Init::Matrix);
    f(prefix + ".bv", a.bv, Shape{d}, Init::Zero);
    f(prefix + ".wo", a.wo, Shape{d, d}, Init::Matrix);
    f(prefix + ".bo", a.bo, Shape{d}, Init::Zero);
  };
  auto norm = [&](const std::string& prefix, auto& n) {
    f(prefix + ".gain", n.gain, Shape{d}, Init::One);
    f(prefix + ".bias", n.bias, Shape{d}, Init::Zero);
  };
  auto ffn = [&](const std::string& prefix, auto& w) {
    f(prefix + ".w1", w.w1, Shape{d, c.d_ff}, Init::Matrix);
    f(prefix + ".b1", w.b1, Shape{c.d_ff}, Init::Zero);
    f(prefix + ".w2", w.w2, Shape{c.d_ff, d}, Init::Matrix);
    f(prefix + ".b2", w.b2, Shape{d}, Init::Zero);
  };
  f("src_embed", p.src_embed, Shape{c.src_vocab, d}, Init::Embedding);
  f("tgt_embed", p.tgt_embed, Shape{c.tgt_vocab, d}, Init::Embedding);
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    const std::string prefix = "enc." + std::to_string(l);
    attention(prefix + ".self_attn", p.encoder[l].self_attn);
    norm(prefix + ".norm1", p.encoder[l].norm1);
    ffn(prefix + ".ffn", p.encoder[l].ffn);
    norm(prefix + ".norm2", p.encoder[l].norm2);
  }
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const std::string prefix = "dec." + std::to_string(l);
    attention(prefix + ".self_attn", p.decoder[l].self_attn);
    norm(prefix + ".norm1", p.decoder[l].norm1);
    attention(prefix + ".cross_attn", p.decoder[l].cross_attn);
    norm(prefix + ".norm2", p.decoder[l].norm2);
    ffn(prefix + ".ffn", p.decoder[l].ffn);
    norm(prefix + ".norm3", p.decoder[l].norm3);
  }
  f("out_w", p.out_w, Shape{d, c.tgt_vocab}, Init::Matrix);
  f("out_b", p.out_b, Shape{c.tgt_vocab}, Init::Zero);
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Parameters<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  ModelConfig shape_free;  // shapes are not needed to enumerate
  shape_free.src_vocab = shape_free.tgt_vocab = 1;
  visit_parameters(*this, shape_free,
                   [&out](const std::string& name, const Tensor<T>& t, const Shape&, Init) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
std::vector<Tensor<T>> Parameters<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
void Parameters<T>::zero_grad() {
  for (auto& t : tensors()) t.zero_grad();
}

template <typename T>
bool Parameters<T>::all_finite() const {
  for (const auto& t : tensors())
    for (T v : t.data())
      if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
Parameters<T> Parameters<T>::initialize(const ModelConfig& config, RngStream rng) {
  config.validate();
  Parameters p;
  p.encoder.resize(config.num_layers);
  p.decoder.resize(config.num_layers);
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  visit_parameters(p, config, [&](const std::string& name, Tensor<T>& slot, const Shape& shape, Init init) {
    RngStream local = rng.derive(name);
    Buffer<T> values(shape_numel(shape), T(0));
    switch (init) {
      case Init::Embedding:
        for (auto& v : values) v = static_cast<T>(local.normal(0.0, embed_std));
        break;
      case Init::Matrix: {
        const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
        for (auto& v : values) v = static_cast<T>((2.0 * local.uniform() - 1.0) * limit);
        break;
      }
      case Init::One:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case Init::Zero:
        break;
    }
    slot = Tensor<T>::from(shape, std::move(values), true);
  });
  return p;
}

template <typename T>
Parameters<T> Parameters<T>::from_named(const ModelConfig& config,
                                        const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  config.validate();
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  Parameters p;
  p.encoder.resize(config.num_layers);
  p.decoder.resize(config.num_layers);
  visit_parameters(p, config, [&](const std::string& name, Tensor<T>& slot, const Shape& shape, Init) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                        shape_str(shape));
    }
    slot = Tensor<T>::from(shape, Buffer<T>(it->second->data().begin(), it->second->data().end()), true);
  });
  return p;
}

template <typename T>
template <typename U>
Parameters<U> Parameters<T>::cast(const ModelConfig& config) const {
  std::vector<std::pair<std::string, Tensor<U>>> converted;
  for (const auto& [name, t] : named()) converted.emplace_back(name, t.template cast<U>());
  return Parameters<U>::from_named(config, converted);
}

// ---------------------------------------------------------------------------

template <typename T>
Transformer<T>::Transformer(ModelConfig config, Parameters<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  if (params_.encoder.size() != config_.num_layers || params_.decoder.size() != config_.num_layers) {
    throw ContractError("transformer: parameter layer count does not match the config");
  }
  const std::size_t d = config_.d_model;
  positions_.resize(config_.max_len * d);
  for (std::size_t pos = 0; pos < config_.max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      positions_[pos * d + i] = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < d) positions_[pos * d + i + 1] = static_cast<T>(std::cos(pos * freq));
    }
  }
}

template <typename T>
Tensor<T> Transformer<T>::embed(const Tensor<T>& table, std::span<const int> tokens) const {
  return scale(embedding_lookup(table, tokens), static_cast<T>(std::sqrt(static_cast<double>(config_.d_model))));
}

template <typename T>
Tensor<T> Transformer<T>::embed_source(std::span<const int> tokens) const {
  return embed(params_.src_embed, tokens);
}

template <typename T>
Tensor<T> Transformer<T>::embed_target(std::span<const int> tokens) const {
  return embed(params_.tgt_embed, tokens);
}

template <typename T>
Tensor<T> Transformer<T>::add_positions(const Tensor<T>& x, std::size_t batch, std::size_t len,
                                        std::size_t offset) const {
  if (offset + len > config_.max_len) {
    throw ContractError("sequence of length " + std::to_string(offset + len) + " exceeds max_len " +
                        std::to_string(config_.max_len));
  }
  const std::size_t d = config_.d_model;
  Buffer<T> pe(batch * len * d);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(positions_.data() + offset * d, len * d, pe.data() + b * len * d);
  return add(x, Tensor<T>::from({batch * len, d}, std::move(pe)));
}

template <typename T>
Tensor<T> Transformer<T>::attention_block(const Tensor<T>& queries, const Tensor<T>& keys_values,
                                          const AttentionWeights<T>& w, const AttentionSpec& spec) const {
  auto q = add_bias(matmul(queries, w.wq), w.bq);
  auto k = matmul(keys_values, w.wk);
  auto v = add_bias(matmul(keys_values, w.wv), w.bv);
  return add_bias(matmul(attention(q, k, v, spec), w.wo), w.bo);
}

template <typename T>
Tensor<T> Transformer<T>::feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& w) const {
  return add_bias(matmul(gelu(add_bias(matmul(x, w.w1), w.b1)), w.w2), w.b2);
}

template <typename T>
Tensor<T> Transformer<T>::residual_norm(const Tensor<T>& x, const Tensor<T>& sublayer, const NormWeights<T>& norm,
                                        const ForwardOptions& options) const {
  Tensor<T> branch = sublayer;
  if (options.train && config_.dropout > 0.0) {
    if (!options.dropout_rng) throw ContractError("training forward pass needs a dropout rng");
    branch = dropout(sublayer, config_.dropout, *options.dropout_rng);
  }
  return layer_norm(add(x, branch), norm.gain, norm.bias);
}

template <typename T>
EncoderOutput<T> Transformer<T>::encode(const Tensor<T>& embeddings, std::size_t batch, const Mask& padding_mask,
                                        const ForwardOptions& options) const {
  if (embeddings.rank() != 2 || embeddings.dim(1) != config_.d_model || batch == 0 ||
      embeddings.dim(0) % batch != 0) {
    throw DimensionError("encode: embeddings " + shape_str(embeddings.shape()) + " do not split into " +
                         std::to_string(batch) + " sequences of width " + std::to_string(config_.d_model));
  }
  if (padding_mask.size() != embeddings.dim(0)) {
    throw DimensionError("encode: mask length " + std::to_string(padding_mask.size()) + " does not match " +
                         std::to_string(embeddings.dim(0)) + " positions");
  }
  const std::size_t len = embeddings.dim(0) / batch;
  Tensor<T> x = options.positional ? add_positions(embeddings, batch, len, 0) : embeddings;
  if (options.train && config_.dropout > 0.0) x = dropout(x, config_.dropout, *options.dropout_rng);
  AttentionSpec spec{batch, len, len, config_.num_heads, false, 0, padding_mask};
  for (const auto& layer : params_.encoder) {
    x = residual_norm(x, attention_block(x, x, layer.self_attn, spec), layer.norm1, options);
    x = residual_norm(x, feed_forward(x, layer.ffn), layer.norm2, options);
  }
  return EncoderOutput<T>{x, padding_mask, batch, len};
}

template <typename T>
Tensor<T> Transformer<T>::decode_full(const EncoderOutput<T>& enc, const Tensor<T>& prefix, std::size_t len,
                                      const ForwardOptions& options) const {
  if (prefix.rank() != 2 || prefix.dim(1) != config_.d_model || prefix.dim(0) != enc.batch * len) {
    throw DimensionError("decode: prefix " + shape_str(prefix.shape()) + " does not match " +
                         std::to_string(enc.batch) + " sequences of length " + std::to_string(len));
  }
  Tensor<T> x = options.positional ? add_positions(prefix, enc.batch, len, 0) : prefix;
  if (options.train && config_.dropout > 0.0) x = dropout(x, config_.dropout, *options.dropout_rng);
  AttentionSpec self_spec{enc.batch, len, len, config_.num_heads, true, 0, {}};
  AttentionSpec cross_spec{enc.batch, len, enc.length, config_.num_heads, false, 0, enc.key_valid};
  for (const auto& layer : params_.decoder) {
    x = residual_norm(x, attention_block(x, x, layer.self_attn, self_spec), layer.norm1, options);
    x = residual_norm(x, attention_block(x, enc.hidden, layer.cross_attn, cross_spec), layer.norm2, options);
    x = residual_norm(x, feed_forward(x, layer.ffn), layer.norm3, options);
  }
  return add_bias(matmul(x, params_.out_w), params_.out_b);
}

template <typename T>
Tensor<T> Transformer<T>::decode_step(const EncoderOutput<T>& enc, const Tensor<T>& prefix) const {
  if (enc.batch != 1) throw ContractError("decode_step works on a single sentence");
  if (prefix.rank() != 2 || prefix.dim(0) == 0) throw ContractError("decode_step needs a non-empty prefix");
  const std::size_t t = prefix.dim(0);
  if (t > config_.max_len) {
    throw ContractError("decode_step: prefix length " + std::to_string(t) + " exceeds max_len " +
                        std::to_string(config_.max_len));
  }
  auto logits = decode_full(enc, prefix, t);
  auto last = slice_rows(logits, t - 1, t);
  return Tensor<T>::from({config_.tgt_vocab}, Buffer<T>(last.data().begin(), last.data().end()));
}

template <typename T>
Tensor<T> Transformer<T>::forward_train(const TrainBatch<T>& batch, const ForwardOptions& options) const {
  auto enc = encode(batch.src_embeddings, batch.batch, batch.src_mask, options);
  auto logits = decode_full(enc, batch.tgt_inputs, batch.tgt_len, options);
  return cross_entropy_soft(logits, batch.soft_labels, batch.tgt_mask);
}

template <typename T>
IncrementalDecoder<T> Transformer<T>::start_decoding(const EncoderOutput<T>& enc, std::size_t beams) const {
  return IncrementalDecoder<T>(*this, enc, beams);
}

// ---------------------------------------------------------------------------

template <typename T>
IncrementalDecoder<T>::IncrementalDecoder(const Transformer<T>& model, const EncoderOutput<T>& enc, std::size_t beams)
    : model_(&model), beams_(beams), src_len_(enc.length), cross_valid_(enc.key_valid) {
  if (enc.batch != 1) throw ContractError("incremental decoding works on a single sentence");
  if (beams == 0) throw ContractError("incremental decoding needs at least one beam");
  NoGradGuard no_grad;
  const auto& layers = model.params().decoder;
  for (const auto& layer : layers) {
    auto k = matmul(enc.hidden, layer.cross_attn.wk);
    auto v = add_bias(matmul(enc.hidden, layer.cross_attn.wv), layer.cross_attn.bv);
    cross_keys_.emplace_back(k.data().begin(), k.data().end());
    cross_values_.emplace_back(v.data().begin(), v.data().end());
  }
  self_keys_.resize(layers.size());
  self_values_.resize(layers.size());
}

template <typename T>
Tensor<T> IncrementalDecoder<T>::replicate(const Buffer<T>& rows, std::size_t count) const {
  Buffer<T> out;
  out.reserve(rows.size() * count);
  for (std::size_t i = 0; i < count; ++i) out.insert(out.end(), rows.begin(), rows.end());
  const std::size_t d = model_->config_.d_model;
  return Tensor<T>::from({count * rows.size() / d, d}, std::move(out));
}

template <typename T>
Tensor<T> IncrementalDecoder<T>::step(const Tensor<T>& embeddings) {
  NoGradGuard no_grad;
  const auto& cfg = model_->config_;
  const std::size_t d = cfg.d_model;
  if (embeddings.rank() != 2 || embeddings.dim(0) != beams_ || embeddings.dim(1) != d) {
    throw DimensionError("incremental step: expected [" + std::to_string(beams_) + "x" + std::to_string(d) +
                         "] inputs, got " + shape_str(embeddings.shape()));
  }
  Tensor<T> x = model_->add_positions(embeddings, beams_, 1, position_);
  const std::size_t len = position_ + 1;

  Mask cross_valid;
  for (std::size_t b = 0; b < beams_; ++b) cross_valid.insert(cross_valid.end(), cross_valid_.begin(), cross_valid_.end());
  AttentionSpec self_spec{beams_, 1, len, cfg.num_heads, false, 0, {}};
  AttentionSpec cross_spec{beams_, 1, src_len_, cfg.num_heads, false, 0, std::move(cross_valid)};
  ForwardOptions eval;

  const auto& layers = model_->params_.decoder;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l].self_attn;
    auto q = add_bias(matmul(x, w.wq), w.bq);
    auto k = matmul(x, w.wk);
    auto v = add_bias(matmul(x, w.wv), w.bv);
    // Append the new position to each beam's cache: [beams x len x d].
    Buffer<T> keys(beams_ * len * d), values(beams_ * len * d);
    for (std::size_t b = 0; b < beams_; ++b) {
      if (position_ > 0) {
        std::copy_n(self_keys_[l].data() + b * position_ * d, position_ * d, keys.data() + b * len * d);
        std::copy_n(self_values_[l].data() + b * position_ * d, position_ * d, values.data() + b * len * d);
      }
      std::copy_n(k.data().data() + b * d, d, keys.data() + (b * len + position_) * d);
      std::copy_n(v.data().data() + b * d, d, values.data() + (b * len + position_) * d);
    }
    self_keys_[l] = keys;
    self_values_[l] = values;
    auto attended = attention(q, Tensor<T>::from({beams_ * len, d}, std::move(keys)),
                              Tensor<T>::from({beams_ * len, d}, std::move(values)), self_spec);
    x = model_->residual_norm(x, add_bias(matmul(attended, w.wo), w.bo), layers[l].norm1, eval);

    const auto& cw = layers[l].cross_attn;
    auto cq = add_bias(matmul(x, cw.wq), cw.bq);
    auto cross = attention(cq, replicate(cross_keys_[l], beams_), replicate(cross_values_[l], beams_), cross_spec);
    x = model_->residual_norm(x, add_bias(matmul(cross, cw.wo), cw.bo), layers[l].norm2, eval);
    x = model_->residual_norm(x, model_->feed_forward(x, layers[l].ffn), layers[l].norm3, eval);
  }
  ++position_;
  return add_bias(matmul(x, model_->params_.out_w), model_->params_.out_b);
}

template <typename T>
void IncrementalDecoder<T>::reorder(std::span<const std::size_t> sources) {
  const std::size_t d = model_->config_.d_model;
  const std::size_t stride = position_ * d;
  for (std::size_t l = 0; l < self_keys_.size(); ++l) {
    Buffer<T> keys(sources.size() * stride), values(sources.size() * stride);
    for (std::size_t b = 0; b < sources.size(); ++b) {
      if (sources[b] >= beams_) throw ContractError("reorder: beam index out of range");
      std::copy_n(self_keys_[l].data() + sources[b] * stride, stride, keys.data() + b * stride);
      std::copy_n(self_values_[l].data() + sources[b] * stride, stride, values.data() + b * stride);
    }
    self_keys_[l] = std::move(keys);
    self_values_[l] = std::move(values);
  }
  beams_ = sources.size();
  if (beams_ == 0) throw ContractError("reorder: no beams left");
}

template struct Parameters<float>;
template struct Parameters<double>;
template Parameters<double> Parameters<float>::cast<double>(const ModelConfig&) const;
template Parameters<float> Parameters<double>::cast<float>(const ModelConfig&) const;
template class Transformer<float>;
template class Transformer<double>;
template class IncrementalDecoder<float>;
template class IncrementalDecoder<double>;

}  // namespace mixdiv
