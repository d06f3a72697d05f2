#include "mixdiv/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "mixdiv/errors.hpp"

namespace mixdiv {

std::string format_number(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw ContractError("cannot format number");
  return std::string(buf, ptr);
}

std::uint64_t vocab_fingerprint(const Vocab& vocab) {
  std::string joined;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    joined += vocab.token(static_cast<int>(i));
    joined += '\n';
  }
  return fnv1a64(joined);
}

namespace {

std::string path_in(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

std::string hex(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << v;
  return out.str();
}

const std::string& require_key(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("checkpoint is missing config key '" + key + "'");
  return it->second;
}

double parse_double(const std::string& text, const std::string& key) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw FormatError("config key '" + key + "': expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_unsigned(const std::string& text, const std::string& key) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw FormatError("config key '" + key + "': expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

void check_corpus(const std::map<std::string, std::string>& kv, const ParallelCorpus& corpus) {
  if (require_key(kv, "corpus.source_vocab") != hex(vocab_fingerprint(corpus.source_vocab)) ||
      require_key(kv, "corpus.target_vocab") != hex(vocab_fingerprint(corpus.target_vocab))) {
    throw FormatError("checkpoint was trained on a corpus with different vocabularies");
  }
}

// Runs fn(i) for i in [0, n) on `workers` threads.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

ParallelCorpus load_training_corpus(const std::string& dir) {
  return load_parallel(path_in(dir, "train.src"), path_in(dir, "train.tgt"));
}

ParallelCorpus load_split(const std::string& dir, const std::string& split, const ParallelCorpus& train) {
  const auto text = read_parallel_text(path_in(dir, split + ".src"), path_in(dir, split + ".tgt"));
  return build_corpus(text, train.source_vocab, train.target_vocab);
}

KeyValues TrainOptions::to_key_values() const {
  KeyValues kv = model.to_key_values();
  kv.emplace_back("adam.peak_lr", format_number(adam.peak_lr));
  kv.emplace_back("adam.init_lr", format_number(adam.init_lr));
  kv.emplace_back("adam.warmup_steps", std::to_string(adam.warmup_steps));
  kv.emplace_back("adam.beta1", format_number(adam.beta1));
  kv.emplace_back("adam.beta2", format_number(adam.beta2));
  kv.emplace_back("adam.eps", format_number(adam.eps));
  kv.emplace_back("train.steps", std::to_string(steps));
  kv.emplace_back("train.batch_tokens", std::to_string(train.batch_tokens));
  kv.emplace_back("train.log_every", std::to_string(train.log_every));
  kv.emplace_back("train.mixup", train.mixup.enabled ? "on" : "off");
  kv.emplace_back("train.alpha", format_number(train.mixup.alpha));
  kv.emplace_back("seed", std::to_string(seed));
  return kv;
}

namespace {

TrainOptions options_from(const std::map<std::string, std::string>& kv) {
  TrainOptions o;
  o.model = ModelConfig::from_key_values(kv);
  o.adam.peak_lr = parse_double(require_key(kv, "adam.peak_lr"), "adam.peak_lr");
  o.adam.init_lr = parse_double(require_key(kv, "adam.init_lr"), "adam.init_lr");
  o.adam.warmup_steps = parse_unsigned(require_key(kv, "adam.warmup_steps"), "adam.warmup_steps");
  o.adam.beta1 = parse_double(require_key(kv, "adam.beta1"), "adam.beta1");
  o.adam.beta2 = parse_double(require_key(kv, "adam.beta2"), "adam.beta2");
  o.adam.eps = parse_double(require_key(kv, "adam.eps"), "adam.eps");
  o.steps = parse_unsigned(require_key(kv, "train.steps"), "train.steps");
  o.train.batch_tokens = parse_unsigned(require_key(kv, "train.batch_tokens"), "train.batch_tokens");
  o.train.log_every = parse_unsigned(require_key(kv, "train.log_every"), "train.log_every");
  const auto& mixup = require_key(kv, "train.mixup");
  if (mixup != "on" && mixup != "off") throw FormatError("config key 'train.mixup' must be on or off");
  o.train.mixup.enabled = mixup == "on";
  o.train.mixup.alpha = parse_double(require_key(kv, "train.alpha"), "train.alpha");
  o.seed = parse_unsigned(require_key(kv, "seed"), "seed");
  return o;
}

TrainOptions prepare_options(const ParallelCorpus& corpus, TrainOptions options) {
  if (corpus.pairs.empty()) throw ContractError("train: corpus is empty");
  options.model.src_vocab = corpus.source_vocab.size();
  options.model.tgt_vocab = corpus.target_vocab.size();
  options.model.validate();
  options.train.mixup.validate();
  if (options.train.batch_tokens == 0) throw ContractError("train: batch_tokens must be positive");
  for (const auto& p : corpus.pairs) {
    if (p.source.size() > options.model.max_len || p.target.size() + 1 > options.model.max_len) {
      throw ContractError("train: pair " + std::to_string(p.id) + " is longer than max_len " +
                          std::to_string(options.model.max_len));
    }
  }
  return options;
}

}  // namespace

TrainingSession::TrainingSession(const ParallelCorpus& corpus, TrainOptions options, Transformer<float> model)
    : corpus_(&corpus), options_(std::move(options)), model_(std::move(model)) {
  adam_ = AdamState<float>(options_.adam, model_.params().tensors());
}

TrainingSession::TrainingSession(const ParallelCorpus& corpus, TrainOptions options)
    : corpus_(&corpus),
      options_(prepare_options(corpus, std::move(options))),
      model_(options_.model, Parameters<float>::initialize(options_.model, RngStream(options_.seed).derive("init"))) {
  adam_ = AdamState<float>(options_.adam, model_.params().tensors());
}

TrainingSession TrainingSession::resume(const ParallelCorpus& corpus, const Checkpoint& checkpoint) {
  const auto kv = checkpoint.config_map();
  check_corpus(kv, corpus);
  TrainOptions options = options_from(kv);
  TrainingSession session(corpus, options, load_model(checkpoint));
  auto& adam = session.adam_;
  adam.step = parse_unsigned(require_key(kv, "train.step"), "train.step");
  session.epoch_ = parse_unsigned(require_key(kv, "train.epoch"), "train.epoch");
  session.next_batch_ = parse_unsigned(require_key(kv, "train.next_batch"), "train.next_batch");
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : checkpoint.tensors) by_name[name] = &t;
  const auto named = session.model_.params().named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    for (auto [prefix, moment] : {std::pair{"adam.m.", &adam.first_moment}, std::pair{"adam.v.", &adam.second_moment}}) {
      const std::string name = prefix + named[i].first;
      auto it = by_name.find(name);
      if (it == by_name.end()) throw FormatError("checkpoint is missing optimizer state '" + name + "'");
      if (it->second->numel() != named[i].second.numel()) {
        throw FormatError("optimizer state '" + name + "' has the wrong size");
      }
      (*moment)[i].assign(it->second->data().begin(), it->second->data().end());
    }
  }
  return session;
}

void TrainingSession::run(std::ostream* log, std::optional<std::size_t> until) {
  const std::size_t target = until.value_or(options_.steps);
  const RngStream master(options_.seed);
  TrainConfig config = options_.train;
  config.max_steps = target;
  while (adam_.step < target) {
    const auto stats = train_epoch(*corpus_, model_, config, adam_, master.derive("epoch", epoch_), log, next_batch_);
    losses_.insert(losses_.end(), stats.step_losses.begin(), stats.step_losses.end());
    if (stats.finished) {
      ++epoch_;
      next_batch_ = 0;
    } else {
      next_batch_ = stats.next_batch;
    }
  }
}

Checkpoint TrainingSession::checkpoint() const {
  Checkpoint c;
  c.config = options_.to_key_values();
  c.config.emplace_back("train.step", std::to_string(adam_.step));
  c.config.emplace_back("train.epoch", std::to_string(epoch_));
  c.config.emplace_back("train.next_batch", std::to_string(next_batch_));
  c.config.emplace_back("corpus.pairs", std::to_string(corpus_->pairs.size()));
  c.config.emplace_back("corpus.source_vocab", hex(vocab_fingerprint(corpus_->source_vocab)));
  c.config.emplace_back("corpus.target_vocab", hex(vocab_fingerprint(corpus_->target_vocab)));
  const auto named = model_.params().named();
  for (const auto& [name, t] : named) c.tensors.emplace_back(name, t.detach());
  for (std::size_t i = 0; i < named.size(); ++i) {
    const Shape flat{named[i].second.numel()};
    c.tensors.emplace_back("adam.m." + named[i].first, Tensor<float>::from(flat, adam_.first_moment[i]));
    c.tensors.emplace_back("adam.v." + named[i].first, Tensor<float>::from(flat, adam_.second_moment[i]));
  }
  return c;
}

Transformer<float> load_model(const Checkpoint& checkpoint, const ParallelCorpus* corpus) {
  const auto kv = checkpoint.config_map();
  if (corpus) check_corpus(kv, *corpus);
  const auto config = ModelConfig::from_key_values(kv);
  return Transformer<float>(config, Parameters<float>::from_named(config, checkpoint.tensors));
}

KeyValues DecodeRequest::to_key_values() const {
  KeyValues kv;
  kv.emplace_back("mode", mode == DecodeMode::beam ? "beam" : "mixdiv");
  kv.emplace_back("beam", std::to_string(config.beam));
  kv.emplace_back("length_penalty", format_number(config.length_penalty));
  kv.emplace_back("max_output_len", std::to_string(config.max_output_len));
  if (mode == DecodeMode::beam) {
    kv.emplace_back("top_n", std::to_string(top_n));
    return kv;
  }
  kv.emplace_back("k", std::to_string(config.k));
  kv.emplace_back("tau", format_number(config.tau));
  kv.emplace_back("sim_weight", config.similarity_weighting ? "on" : "off");
  kv.emplace_back("len_selection", config.length_selection ? "on" : "off");
  if (config.fixed_alpha) kv.emplace_back("fixed_alpha", format_number(*config.fixed_alpha));
  if (config.forced_lambda) kv.emplace_back("forced_lambda", format_number(*config.forced_lambda));
  kv.emplace_back("seed", std::to_string(config.seed));
  return kv;
}

std::uint64_t input_seed(std::uint64_t master_seed, std::size_t input_index) {
  return RngStream(master_seed).derive("input", input_index).key();
}

HypothesesFile decode_inputs(const Transformer<float>& model, const ParallelCorpus& train, const LengthBuckets& buckets,
                             const std::vector<TokenIds>& inputs, const DecodeRequest& request, std::size_t workers) {
  if (request.mode == DecodeMode::mixdiv) request.config.validate();
  if (request.mode == DecodeMode::beam && (request.top_n == 0 || request.top_n > request.config.beam)) {
    throw ContractError("decode: top_n must lie in [1, beam]");
  }
  HypothesesFile file;
  file.outputs.resize(inputs.size());
  file.partners.resize(inputs.size());
  const Vocab& vocab = train.target_vocab;
  parallel_for(inputs.size(), workers, [&](std::size_t i) {
    if (request.mode == DecodeMode::beam) {
      const auto hyps = beam_search(model, inputs[i], request.config.beam, request.config.length_penalty,
                                    request.top_n, request.config.max_output_len);
      for (const auto& h : hyps) {
        file.outputs[i].push_back(vocab.decode(h.tokens));
        file.partners[i].push_back(std::nullopt);
      }
    } else {
      const auto out = diverse_translate(model, train, buckets, inputs[i], request.config,
                                         input_seed(request.config.seed, i));
      for (std::size_t k = 0; k < out.hypotheses.size(); ++k) {
        file.outputs[i].push_back(vocab.decode(out.hypotheses[k].tokens));
        file.partners[i].push_back(out.partners[k].pair_id);
      }
    }
  });
  return file;
}

std::string header_text(const std::string& command, const KeyValues& kv) {
  std::string out = "# mixdiv " + command + "\n";
  for (const auto& [k, v] : kv) out += "# " + k + " = " + v + "\n";
  return out;
}

void write_hypotheses(const std::string& path, const std::string& header, const HypothesesFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << header;
  for (std::size_t i = 0; i < file.outputs.size(); ++i) {
    for (std::size_t k = 0; k < file.outputs[i].size(); ++k) {
      out << format_hypothesis_row({i, k, file.partners[i][k], file.outputs[i][k]}) << '\n';
    }
  }
  if (!out) throw IoError("failed while writing " + path);
}

double baseline_bleu(const Transformer<float>& model, const std::vector<TokenIds>& inputs,
                     const std::vector<Tokens>& references, const Vocab& target_vocab, std::size_t workers) {
  std::vector<Tokens> hyps(inputs.size());
  parallel_for(inputs.size(), workers, [&](std::size_t i) {
    hyps[i] = target_vocab.decode(beam_search(model, inputs[i], 4, 0.6, 1).front().tokens);
  });
  return corpus_bleu(hyps, references);
}

KeyValues SweepOptions::to_key_values() const {
  std::string tau_list, seed_list;
  for (double t : taus) tau_list += (tau_list.empty() ? "" : " ") + format_number(t);
  for (auto s : seeds) seed_list += (seed_list.empty() ? "" : " ") + std::to_string(s);
  KeyValues kv{{"taus", tau_list},
               {"seeds", seed_list},
               {"k", std::to_string(base.k)},
               {"beam", std::to_string(base.beam)},
               {"length_penalty", format_number(base.length_penalty)},
               {"max_output_len", std::to_string(base.max_output_len)},
               {"sim_weight", base.similarity_weighting ? "on" : "off"},
               {"len_selection", base.length_selection ? "on" : "off"},
               {"bleu_level", level == BleuLevel::corpus ? "corpus" : "sentence"}};
  if (base.fixed_alpha) kv.emplace_back("fixed_alpha", format_number(*base.fixed_alpha));
  if (base.forced_lambda) kv.emplace_back("forced_lambda", format_number(*base.forced_lambda));
  return kv;
}

namespace {

// Complete rows already present in a sweep CSV with a matching header.
std::vector<SweepRow> read_existing_sweep(const std::string& path, const std::string& expected_header,
                                          std::size_t max_rows) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  if (text.empty()) return {};
  if (text.compare(0, expected_header.size(), expected_header) != 0) {
    throw ContractError(path + " holds a sweep with a different configuration; remove it or choose another output");
  }
  std::vector<SweepRow> rows;
  std::size_t pos = expected_header.size();
  while (pos < text.size() && rows.size() < max_rows) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;  // partial last line
    std::istringstream line(text.substr(pos, nl - pos));
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(line, field, ',')) fields.push_back(field);
    if (fields.size() != 7) throw FormatError(path + ": malformed sweep row '" + text.substr(pos, nl - pos) + "'");
    SweepRow row;
    row.tau = parse_double(fields[0], "tau");
    row.seed = parse_unsigned(fields[1], "seed");
    row.report.systems = parse_unsigned(fields[2], "K");
    row.report.rfb = parse_double(fields[3], "rfb");
    row.report.pwb = parse_double(fields[4], "pwb");
    row.report.eda = parse_double(fields[5], "eda");
    row.report.baseline = parse_double(fields[6], "R");
    row.report.omega = row.report.baseline / row.report.ceiling;
    rows.push_back(row);
    pos = nl + 1;
  }
  return rows;
}

}  // namespace

std::vector<SweepRow> run_sweep(const Transformer<float>& model, const ParallelCorpus& train,
                                const LengthBuckets& buckets, const std::vector<TokenIds>& inputs,
                                const std::vector<Tokens>& references, const SweepOptions& options,
                                const std::string& csv_path, const KeyValues& header) {
  if (options.taus.empty() || options.seeds.empty()) throw ContractError("sweep: empty tau or seed list");
  if (inputs.size() != references.size()) {
    throw ContractError("sweep: " + std::to_string(inputs.size()) + " inputs for " +
                        std::to_string(references.size()) + " references");
  }
  if (inputs.empty()) throw ContractError("sweep: no inputs");
  std::vector<std::pair<double, std::uint64_t>> cells;
  for (double tau : options.taus)
    for (auto seed : options.seeds) cells.emplace_back(tau, seed);

  const double baseline = options.baseline
                              ? *options.baseline
                              : baseline_bleu(model, inputs, references, train.target_vocab, options.workers);
  if (!(baseline > 0.0)) {
    throw ContractError("sweep: baseline BLEU R is " + format_number(baseline) + "; EDA needs R > 0");
  }

  std::string head;
  KeyValues echo = header;
  for (const auto& kv : options.to_key_values()) echo.push_back(kv);
  echo.emplace_back("R", format_number(baseline));
  for (const auto& [k, v] : echo) head += "# " + k + " = " + v + "\n";
  head += std::string(kReportCsvHeader) + "\n";

  std::vector<SweepRow> rows = read_existing_sweep(csv_path, head, cells.size());
  const std::size_t done = rows.size();
  {
    // Rewrite header and complete rows, dropping any partial trailing line.
    std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + csv_path + " for writing");
    out << head;
    for (const auto& r : rows) out << report_csv_row(r.report, r.tau, r.seed) << '\n';
    if (!out) throw IoError("failed while writing " + csv_path);
  }
  std::ofstream out(csv_path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open " + csv_path + " for appending");

  const std::size_t pending = cells.size() - done;
  std::vector<std::optional<SweepRow>> results(pending);
  std::mutex mutex;
  std::condition_variable ready;
  std::exception_ptr failure;

  auto compute = [&](std::size_t c) {
    const auto [tau, seed] = cells[done + c];
    DecodeRequest request;
    request.mode = DecodeMode::mixdiv;
    request.config = options.base;
    request.config.tau = tau;
    request.config.seed = seed;
    const auto decoded = decode_inputs(model, train, buckets, inputs, request, 1);
    SweepRow row{tau, seed, evaluate(decoded.outputs, references, baseline, options.level)};
    std::lock_guard lock(mutex);
    results[c] = row;
    ready.notify_all();
  };

  std::thread pool([&] {
    try {
      parallel_for(pending, options.workers, compute);
    } catch (...) {
      std::lock_guard lock(mutex);
      failure = std::current_exception();
      ready.notify_all();
    }
  });
  for (std::size_t c = 0; c < pending; ++c) {
    std::unique_lock lock(mutex);
    ready.wait(lock, [&] { return results[c].has_value() || failure; });
    if (!results[c]) break;
    const SweepRow row = *results[c];
    lock.unlock();
    out << report_csv_row(row.report, row.tau, row.seed) << '\n';
    out.flush();
    if (!out) {
      pool.join();
      throw IoError("failed while writing " + csv_path);
    }
    rows.push_back(row);
  }
  pool.join();
  if (failure) std::rethrow_exception(failure);
  return rows;
}

}  // namespace mixdiv
