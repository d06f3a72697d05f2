#include "mixdiv/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mixdiv/errors.hpp"
#include "mixdiv/gradcheck.hpp"
#include "mixdiv/pipeline.hpp"

namespace mixdiv {
namespace {

namespace fs = std::filesystem;

// Bad invocation detected after parsing (missing files, bad lists).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

void require_dir(const std::string& path, const std::string& what) {
  if (!fs::is_directory(path)) throw UsageError(what + " not found: " + path);
}

void require_output(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) throw UsageError("output directory does not exist: " + parent.string());
}

void require_corpus(const std::string& dir) {
  require_dir(dir, "corpus directory");
  require_file((fs::path(dir) / "train.src").string(), "training source");
  require_file((fs::path(dir) / "train.tgt").string(), "training target");
}

bool on_off(const std::string& value) { return value == "on"; }

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw UsageError(what + ": empty list entry");
    item = item.substr(b, e - b + 1);
    T value{};
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
    if (ec != std::errc() || ptr != item.data() + item.size()) throw UsageError(what + ": cannot parse '" + item + "'");
    out.push_back(value);
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

// `key = value` lines become `--key value` arguments placed before the
// command-line flags, so the flags (parsed later, last one wins) override.
std::vector<std::string> config_arguments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config file not found: " + path);
  std::vector<std::string> args;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(line_no) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t") - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || key == "config") {
      throw UsageError(path + ":" + std::to_string(line_no) + ": invalid key '" + key + "'");
    }
    args.push_back("--" + key);
    args.push_back(value);
  }
  return args;
}

// Effective value of every option of a subcommand, as `key = value`.
KeyValues echo_options(const CLI::App& sub) {
  KeyValues kv;
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      value = opt->results().back();
    } else {
      value = opt->get_default_str();
    }
    if (!value.empty()) kv.emplace_back(name, value);
  }
  return kv;
}

std::vector<TokenIds> read_inputs(const std::string& path, const Vocab& vocab, std::size_t limit) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<TokenIds> inputs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line) && (limit == 0 || inputs.size() < limit)) {
    ++line_no;
    const auto tokens = tokenize(line);
    if (tokens.empty()) throw FormatError(path + ":" + std::to_string(line_no) + ": empty input line");
    inputs.push_back(vocab.encode(tokens));
  }
  if (inputs.empty()) throw FormatError(path + ": no input lines");
  return inputs;
}

const std::vector<std::string> kOnOff{"on", "off"};

struct DecodeFlags {
  std::size_t k = 5;
  double tau = 0.3;
  std::size_t beam = 4;
  double length_penalty = 0.6;
  std::size_t max_output_len = 0;
  std::string sim_weight = "on";
  std::string len_selection = "on";
  std::optional<double> fixed_alpha;
  std::optional<double> force_lambda;

  void add_to(CLI::App& sub, bool with_tau) {
    sub.add_option("--k", k, "Translations per input")->capture_default_str()->check(CLI::PositiveNumber);
    if (with_tau) sub.add_option("--tau", tau, "Weight-control hyperparameter")->capture_default_str();
    sub.add_option("--beam", beam, "Beam size")->capture_default_str()->check(CLI::PositiveNumber);
    sub.add_option("--length-penalty", length_penalty, "Length penalty exponent")->capture_default_str();
    sub.add_option("--max-output-len", max_output_len, "Output length cap (0: 2|x|+10)")->capture_default_str();
    sub.add_option("--sim-weight", sim_weight, "Similarity-weighted alpha")->capture_default_str()->check(
        CLI::IsMember(kOnOff));
    sub.add_option("--len-selection", len_selection, "Length-matched partners")->capture_default_str()->check(
        CLI::IsMember(kOnOff));
    sub.add_option("--fixed-alpha", fixed_alpha, "Alpha when sim-weight is off (default: tau)");
    sub.add_option("--force-lambda", force_lambda)->group("");
  }

  DecodeConfig config() const {
    DecodeConfig c;
    c.k = k;
    c.tau = tau;
    c.beam = beam;
    c.length_penalty = length_penalty;
    c.max_output_len = max_output_len;
    c.similarity_weighting = on_off(sim_weight);
    c.length_selection = on_off(len_selection);
    c.fixed_alpha = fixed_alpha;
    c.forced_lambda = force_lambda;
    return c;
  }
};

int cmd_synth(const SynthSpec& spec, const std::string& out_dir, std::ostream& out) {
  spec.validate();
  const auto corpus = generate_synthetic_corpus(spec);
  write_synthetic_corpus(out_dir, spec, corpus);
  out << "wrote " << corpus.train.source.size() << " training and " << corpus.held_out.source.size()
      << " held-out pairs to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diverse machine translation by mixup decoding", "mixdiv"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cipher corpus");
  SynthSpec spec;
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--vocab-size", spec.vocab_size, "Concepts per side")->capture_default_str();
  synth->add_option("--pairs", spec.num_pairs, "Number of sentence pairs")->capture_default_str();
  synth->add_option("--min-len", spec.min_len, "Shortest sentence")->capture_default_str();
  synth->add_option("--max-len", spec.max_len, "Longest sentence")->capture_default_str();
  synth->add_option("--synonyms", spec.synonyms, "Surface forms per target concept")->capture_default_str();
  synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  TrainOptions topt;
  std::string corpus_dir, ckpt_out, resume_path, log_path, mixup = "off";
  train->add_option("--corpus", corpus_dir, "Corpus directory with train.src/train.tgt")->required();
  train->add_option("--out", ckpt_out, "Checkpoint to write")->required();
  train->add_option("--resume", resume_path, "Continue from this checkpoint (its hyperparameters are kept)");
  train->add_option("--log", log_path, "Training log (default: <out>.log)");
  train->add_option("--steps", topt.steps, "Total optimizer steps")->capture_default_str();
  train->add_option("--batch-tokens", topt.train.batch_tokens, "Target tokens per batch")->capture_default_str();
  train->add_option("--log-every", topt.train.log_every, "Steps between log lines")->capture_default_str();
  train->add_option("--mixup", mixup, "Mixup training")->capture_default_str()->check(CLI::IsMember(kOnOff));
  train->add_option("--alpha", topt.train.mixup.alpha, "Beta concentration for mixup")->capture_default_str();
  train->add_option("--peak-lr", topt.adam.peak_lr, "Learning rate after warmup")->capture_default_str();
  train->add_option("--init-lr", topt.adam.init_lr, "Learning rate at step 0")->capture_default_str();
  train->add_option("--warmup", topt.adam.warmup_steps, "Warmup steps")->capture_default_str();
  train->add_option("--layers", topt.model.num_layers, "Layers per stack")->capture_default_str();
  train->add_option("--heads", topt.model.num_heads, "Attention heads")->capture_default_str();
  train->add_option("--d-model", topt.model.d_model, "Model width")->capture_default_str();
  train->add_option("--d-ff", topt.model.d_ff, "Feed-forward width")->capture_default_str();
  train->add_option("--max-len", topt.model.max_len, "Maximum sequence length")->capture_default_str();
  train->add_option("--dropout", topt.model.dropout, "Dropout rate")->capture_default_str();
  train->add_option("--label-smoothing", topt.model.label_smoothing, "Label smoothing")->capture_default_str();
  train->add_option("--seed", topt.seed, "Master seed")->capture_default_str();

  // decode
  auto* decode = app.add_subcommand("decode", "Translate inputs with beam search or diverse decoding");
  std::string checkpoint_path, input_path, hyp_out, mode = "mixdiv";
  std::uint64_t seed = 1;
  std::size_t workers = 1, top_n = 1, limit = 0;
  DecodeFlags dflags;
  decode->add_option("--corpus", corpus_dir, "Training corpus directory (vocabularies and partners)")->required();
  decode->add_option("--checkpoint", checkpoint_path, "Trained checkpoint")->required();
  decode->add_option("--input", input_path, "Source sentences (default: <corpus>/test.src)");
  decode->add_option("--out", hyp_out, "Hypotheses file to write")->required();
  decode->add_option("--mode", mode, "beam or mixdiv")->capture_default_str()->check(CLI::IsMember({"beam", "mixdiv"}));
  decode->add_option("--top-n", top_n, "Hypotheses per input in beam mode")->capture_default_str();
  dflags.add_to(*decode, true);
  decode->add_option("--seed", seed, "Master seed")->capture_default_str();
  decode->add_option("--workers", workers, "Decoding threads")->capture_default_str()->check(CLI::PositiveNumber);
  decode->add_option("--limit", limit, "Use only the first N inputs (0: all)")->capture_default_str();

  // evaluate
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a hypotheses file: rfb, pwb, EDA");
  std::string hyp_path, ref_path, csv_path, level = "corpus";
  std::optional<double> baseline;
  evaluate_cmd->add_option("--hyp", hyp_path, "Hypotheses file")->required();
  evaluate_cmd->add_option("--ref", ref_path, "Reference file")->required();
  evaluate_cmd->add_option("--baseline", baseline, "Baseline BLEU R of the same model (needed when K > 1)");
  evaluate_cmd->add_option("--bleu-level", level, "corpus or sentence")->capture_default_str()->check(
      CLI::IsMember({"corpus", "sentence"}));
  evaluate_cmd->add_option("--csv", csv_path, "Append a CSV row to this file");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Decode and score a grid of tau values and seeds");
  std::string taus = "0.1,0.3,0.5", seeds = "1,2,3,4,5";
  std::optional<double> sweep_baseline;
  sweep->add_option("--corpus", corpus_dir, "Training corpus directory")->required();
  sweep->add_option("--checkpoint", checkpoint_path, "Trained checkpoint")->required();
  sweep->add_option("--input", input_path, "Source sentences (default: <corpus>/test.src)");
  sweep->add_option("--ref", ref_path, "References (default: <corpus>/test.tgt)");
  sweep->add_option("--out", csv_path, "CSV to write or resume")->required();
  sweep->add_option("--taus", taus, "Comma-separated tau values")->capture_default_str();
  sweep->add_option("--seeds", seeds, "Comma-separated seeds")->capture_default_str();
  dflags.add_to(*sweep, false);
  sweep->add_option("--baseline", sweep_baseline, "Baseline BLEU R (default: computed by beam search)");
  sweep->add_option("--bleu-level", level, "corpus or sentence")->capture_default_str()->check(
      CLI::IsMember({"corpus", "sentence"}));
  sweep->add_option("--workers", workers, "Cells decoded in parallel")->capture_default_str()->check(
      CLI::PositiveNumber);
  sweep->add_option("--limit", limit, "Use only the first N inputs (0: all)")->capture_default_str();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  GradcheckConfig gc;
  std::string stencil = "five-point", gc_mixup = "on", corrupt = "off";
  gradcheck->add_option("--seed", gc.seed, "Initialization seed")->capture_default_str();
  gradcheck->add_option("--step", gc.step, "Finite-difference step")->capture_default_str();
  gradcheck->add_option("--tolerance", gc.tolerance, "Elementwise relative error bound")->capture_default_str();
  gradcheck->add_option("--stencil", stencil, "five-point or central")->capture_default_str()->check(
      CLI::IsMember({"five-point", "central"}));
  gradcheck->add_option("--mixup", gc_mixup, "Also check a mixup batch")->capture_default_str()->check(
      CLI::IsMember(kOnOff));
  gradcheck->add_option("--corrupt-gelu-gradient", corrupt, "Negative control: perturb one backward rule")
      ->capture_default_str()
      ->check(CLI::IsMember(kOnOff));
  gradcheck->add_option("--layers", gc.num_layers, "Layers per stack")->capture_default_str();
  gradcheck->add_option("--heads", gc.num_heads, "Attention heads")->capture_default_str();
  gradcheck->add_option("--d-model", gc.d_model, "Model width")->capture_default_str();
  gradcheck->add_option("--d-ff", gc.d_ff, "Feed-forward width")->capture_default_str();

  for (auto* sub : {synth, train, decode, evaluate_cmd, sweep, gradcheck}) {
    sub->add_option("--config", config_path, "File of `key = value` lines; flags override it");
  }

  try {
    // Splice config-file arguments in front of the subcommand's own flags.
    std::vector<std::string> args(argv, argv + argc);
    std::size_t sub_index = 0;
    for (std::size_t i = 1; i < args.size(); ++i) {
      if (!args[i].empty() && args[i][0] != '-') {
        sub_index = i;
        break;
      }
    }
    if (sub_index > 0) {
      std::string path;
      for (std::size_t i = sub_index + 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
      }
      if (!path.empty()) {
        auto extra = config_arguments(path);
        args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_index) + 1, extra.begin(), extra.end());
      }
    }
    std::vector<const char*> cargs;
    for (const auto& a : args) cargs.push_back(a.c_str());
    try {
      app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp&) {
      const auto subs = app.get_subcommands();
      out << (subs.empty() ? app.help() : subs.front()->help());
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err << "mixdiv: " << e.what() << "\n";
      return kExitUsage;
    }

    if (synth->parsed()) return cmd_synth(spec, synth_out, out);

    if (train->parsed()) {
      require_corpus(corpus_dir);
      require_output(ckpt_out);
      if (!resume_path.empty()) require_file(resume_path, "checkpoint");
      if (log_path.empty()) log_path = ckpt_out + ".log";
      require_output(log_path);
      topt.train.mixup.enabled = on_off(mixup);
      const auto corpus = load_training_corpus(corpus_dir);
      std::optional<TrainingSession> session;
      if (resume_path.empty()) {
        session.emplace(corpus, topt);
      } else {
        session.emplace(TrainingSession::resume(corpus, read_checkpoint(resume_path)));
        if (train->get_option("--steps")->count() > 0) session->set_total_steps(topt.steps);
      }
      std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
      if (!log) throw IoError("cannot open " + log_path + " for writing");
      log << header_text("train", echo_options(*train));
      for (const auto& [k, v] : session->options().to_key_values()) log << "# effective." << k << " = " << v << "\n";
      log << "# step loss lr tokens_per_step\n";
      const std::size_t start = session->step();
      session->run(&log);
      write_checkpoint(ckpt_out, session->checkpoint());
      const auto& losses = session->losses();
      out << "trained steps " << start << ".." << session->step();
      if (!losses.empty()) out << ", last loss " << losses.back();
      out << "\ncheckpoint " << ckpt_out << "\nlog " << log_path << "\n";
      return kExitOk;
    }

    if (decode->parsed()) {
      require_corpus(corpus_dir);
      require_file(checkpoint_path, "checkpoint");
      if (input_path.empty()) input_path = (fs::path(corpus_dir) / "test.src").string();
      require_file(input_path, "input file");
      require_output(hyp_out);
      DecodeRequest request;
      request.mode = mode == "beam" ? DecodeMode::beam : DecodeMode::mixdiv;
      request.config = dflags.config();
      request.config.seed = seed;
      request.top_n = top_n;
      if (request.mode == DecodeMode::mixdiv) request.config.validate();
      const auto corpus = load_training_corpus(corpus_dir);
      const auto model = load_model(read_checkpoint(checkpoint_path), &corpus);
      const LengthBuckets buckets(corpus);
      const auto inputs = read_inputs(input_path, corpus.source_vocab, limit);
      const auto file = decode_inputs(model, corpus, buckets, inputs, request, workers);
      write_hypotheses(hyp_out, header_text("decode", echo_options(*decode)), file);
      out << "decoded " << inputs.size() << " inputs into " << hyp_out << "\n";
      return kExitOk;
    }

    if (evaluate_cmd->parsed()) {
      require_file(hyp_path, "hypotheses file");
      require_file(ref_path, "reference file");
      if (!csv_path.empty()) require_output(csv_path);
      const auto bleu_level = level == "corpus" ? BleuLevel::corpus : BleuLevel::sentence;
      const auto file = read_hypotheses(hyp_path);
      const auto refs = read_references(ref_path);
      if (refs.size() != file.outputs.size()) {
        throw AlignmentError(ref_path + ": " + std::to_string(refs.size()) + " references for " +
                             std::to_string(file.outputs.size()) + " inputs in " + hyp_path);
      }
      if (system_count(file.outputs) == 1) {
        // A single system, e.g. plain beam search: this is how R is measured.
        if (!csv_path.empty()) throw UsageError("--csv needs at least 2 hypotheses per input");
        std::vector<Tokens> hyps;
        for (const auto& row : file.outputs) hyps.push_back(row.front());
        const double bleu = bleu_level == BleuLevel::corpus ? corpus_bleu(hyps, refs) : sentence_level_bleu(hyps, refs);
        out << "inputs  " << refs.size() << "\nBLEU    " << format_number(bleu) << "\n";
        return kExitOk;
      }
      if (!baseline) throw UsageError("--baseline is required when the file holds several hypotheses per input");
      const auto report = evaluate(file.outputs, refs, *baseline, bleu_level);
      out << format_report(report);
      if (!csv_path.empty()) {
        double tau = 0.0;
        std::uint64_t run_seed = 0;
        for (const auto& line : file.header) {
          const auto eq = line.find('=');
          if (eq == std::string::npos) continue;
          std::string key = line.substr(0, eq);
          std::string value = line.substr(eq + 1);
          key.erase(0, key.find_first_not_of(' '));
          key.erase(key.find_last_not_of(' ') + 1);
          value.erase(0, value.find_first_not_of(' '));
          if (key == "tau") std::from_chars(value.data(), value.data() + value.size(), tau);
          if (key == "seed") std::from_chars(value.data(), value.data() + value.size(), run_seed);
        }
        const bool fresh = !fs::exists(csv_path) || fs::file_size(csv_path) == 0;
        std::ofstream csv(csv_path, std::ios::binary | std::ios::app);
        if (!csv) throw IoError("cannot open " + csv_path);
        if (fresh) csv << kReportCsvHeader << '\n';
        csv << report_csv_row(report, tau, run_seed) << '\n';
        if (!csv) throw IoError("failed while writing " + csv_path);
      }
      return kExitOk;
    }

    if (sweep->parsed()) {
      require_corpus(corpus_dir);
      require_file(checkpoint_path, "checkpoint");
      if (input_path.empty()) input_path = (fs::path(corpus_dir) / "test.src").string();
      if (ref_path.empty()) ref_path = (fs::path(corpus_dir) / "test.tgt").string();
      require_file(input_path, "input file");
      require_file(ref_path, "reference file");
      require_output(csv_path);
      SweepOptions options;
      options.taus = parse_list<double>(taus, "--taus");
      options.seeds = parse_list<std::uint64_t>(seeds, "--seeds");
      options.base = dflags.config();
      for (double t : options.taus) {
        DecodeConfig c = options.base;
        c.tau = t;
        c.validate();
      }
      options.baseline = sweep_baseline;
      options.level = level == "corpus" ? BleuLevel::corpus : BleuLevel::sentence;
      options.workers = workers;
      const auto corpus = load_training_corpus(corpus_dir);
      const auto model = load_model(read_checkpoint(checkpoint_path), &corpus);
      const LengthBuckets buckets(corpus);
      const auto inputs = read_inputs(input_path, corpus.source_vocab, limit);
      auto refs = read_references(ref_path);
      if (limit > 0 && refs.size() > limit) refs.resize(limit);
      if (refs.size() != inputs.size()) {
        throw AlignmentError(ref_path + ": " + std::to_string(refs.size()) + " references for " +
                             std::to_string(inputs.size()) + " inputs");
      }
      KeyValues header;
      header.emplace_back("checkpoint", checkpoint_path);
      header.emplace_back("corpus", corpus_dir);
      header.emplace_back("input", input_path);
      header.emplace_back("ref", ref_path);
      header.emplace_back("limit", std::to_string(limit));
      const auto rows = run_sweep(model, corpus, buckets, inputs, refs, options, csv_path, header);
      out << "wrote " << rows.size() << " rows to " << csv_path << "\n";
      return kExitOk;
    }

    if (gradcheck->parsed()) {
      gc.stencil = stencil == "central" ? Stencil::central : Stencil::five_point;
      gc.mixup = on_off(gc_mixup);
      debug::set_corrupt_gelu_gradient(on_off(corrupt));
      GradcheckReport report;
      try {
        report = run_gradcheck(gc);
      } catch (...) {
        debug::set_corrupt_gelu_gradient(false);
        throw;
      }
      debug::set_corrupt_gelu_gradient(false);
      out << header_text("gradcheck", echo_options(*gradcheck));
      out << format_gradcheck_report(report, gc.tolerance);
      return report.passed ? kExitOk : kExitNumerical;
    }
  } catch (const UsageError& e) {
    err << "mixdiv: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "mixdiv: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "mixdiv: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "mixdiv: numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    err << "mixdiv: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    err << "mixdiv: " << e.what() << "\n";
    return kExitIo;
  } catch (const AlignmentError& e) {
    err << "mixdiv: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}

}  // namespace mixdiv
