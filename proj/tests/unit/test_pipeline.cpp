#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "mixdiv/errors.hpp"
#include "mixdiv/pipeline.hpp"

using namespace mixdiv;

namespace {

struct Fixture {
  std::string dir;
  ParallelCorpus train;
  ParallelCorpus test;
  TrainOptions options;

  explicit Fixture(const std::string& name) : dir(testing::scratch_dir(name)) {
    SynthSpec spec;
    spec.vocab_size = 10;
    spec.num_pairs = 300;
    spec.min_len = 2;
    spec.max_len = 6;
    spec.synonyms = 2;
    write_synthetic_corpus(dir + "/corpus", spec, generate_synthetic_corpus(spec));
    train = load_training_corpus(dir + "/corpus");
    test = load_split(dir + "/corpus", "test", train);
    options.model.num_layers = 1;
    options.model.num_heads = 2;
    options.model.d_model = 16;
    options.model.d_ff = 32;
    options.model.max_len = 16;
    options.adam = AdamConfig{3e-3, 1e-7, 10, 0.9, 0.98, 1e-9};
    options.train.batch_tokens = 64;
    options.steps = 12;
    options.seed = 5;
  }

  std::vector<TokenIds> inputs(std::size_t n) const {
    std::vector<TokenIds> out;
    for (std::size_t i = 0; i < n && i < test.pairs.size(); ++i) out.push_back(test.pairs[i].source);
    return out;
  }
  std::vector<Tokens> references(std::size_t n) const {
    std::vector<Tokens> out;
    for (std::size_t i = 0; i < n && i < test.pairs.size(); ++i) out.push_back(test.target_vocab.decode(test.pairs[i].target));
    return out;
  }
};

SweepOptions small_sweep() {
  SweepOptions s;
  s.taus = {0.2, 0.5};
  s.seeds = {1, 2, 3};
  s.base.k = 3;
  s.base.beam = 2;
  s.baseline = 30.0;
  return s;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("numbers print in their shortest round-trip form") {
    CHECK(format_number(0.1) == "0.1");
    CHECK(format_number(3.0) == "3");
    CHECK(format_number(1e-7) == "1e-07");
  }

  TEST_CASE("training resumes bitwise from a checkpoint") {
    Fixture f("pipe_resume");
    TrainingSession whole(f.train, f.options);
    whole.run();
    CHECK(whole.step() == 12);

    TrainingSession first(f.train, f.options);
    first.run(nullptr, 5);
    const auto path = f.dir + "/half.ckpt";
    write_checkpoint(path, first.checkpoint());
    auto resumed = TrainingSession::resume(f.train, read_checkpoint(path));
    CHECK(resumed.step() == 5);
    resumed.run();
    CHECK(resumed.step() == 12);

    const auto a = whole.checkpoint(), b = resumed.checkpoint();
    CHECK(a.config == b.config);
    REQUIRE(a.tensors.size() == b.tensors.size());
    for (std::size_t i = 0; i < a.tensors.size(); ++i)
      CHECK(testing::max_abs_diff(a.tensors[i].second.data(), b.tensors[i].second.data()) == 0.0);
  }

  TEST_CASE("training logs one line per interval") {
    Fixture f("pipe_log");
    f.options.train.log_every = 4;
    TrainingSession session(f.train, f.options);
    std::ostringstream log;
    session.run(&log);
    std::istringstream lines(log.str());
    std::string line;
    std::vector<std::size_t> steps;
    while (std::getline(lines, line)) {
      std::istringstream fields(line);
      std::size_t step, tokens;
      double loss, lr;
      REQUIRE(static_cast<bool>(fields >> step >> loss >> lr >> tokens));
      steps.push_back(step);
    }
    CHECK(steps == std::vector<std::size_t>{4, 8, 12});
  }

  TEST_CASE("checkpoints are tied to their corpus") {
    Fixture f("pipe_tie");
    TrainingSession session(f.train, f.options);
    session.run(nullptr, 2);
    const auto ckpt = session.checkpoint();
    ParallelText other{{{"a", "b"}}, {{"c"}}, 0};
    const auto wrong = build_corpus(other);
    CHECK_THROWS_AS(TrainingSession::resume(wrong, ckpt), FormatError);
    CHECK_THROWS_AS(load_model(ckpt, &wrong), FormatError);
    CHECK_NOTHROW(load_model(ckpt, &f.train));
    CHECK_THROWS_AS(TrainingSession(ParallelCorpus{}, f.options), ContractError);
  }

  TEST_CASE("decoding gives the same file for any worker count") {
    Fixture f("pipe_decode");
    TrainingSession session(f.train, f.options);
    session.run();
    const auto buckets = bucket_by_source_length(f.train);
    DecodeRequest request;
    request.config.k = 3;
    request.config.beam = 2;
    const auto inputs = f.inputs(12);
    const auto one = decode_inputs(session.model(), f.train, buckets, inputs, request, 1);
    const auto three = decode_inputs(session.model(), f.train, buckets, inputs, request, 3);
    CHECK(one.outputs == three.outputs);
    CHECK(one.partners == three.partners);
    CHECK(one.outputs.size() == 12);

    write_hypotheses(f.dir + "/a.tsv", header_text("decode", request.to_key_values()), one);
    const auto back = read_hypotheses(f.dir + "/a.tsv");
    CHECK(back.outputs == one.outputs);
    CHECK(back.header.front() == " mixdiv decode");

    request.mode = DecodeMode::beam;
    request.top_n = 2;
    const auto beam = decode_inputs(session.model(), f.train, buckets, inputs, request, 2);
    CHECK(beam.outputs.front().size() == 2);
    CHECK_FALSE(beam.partners.front().front().has_value());
  }

  TEST_CASE("sweep files do not depend on worker count and resume cleanly") {
    Fixture f("pipe_sweep");
    TrainingSession session(f.train, f.options);
    session.run();
    const auto buckets = bucket_by_source_length(f.train);
    const auto inputs = f.inputs(15);
    const auto refs = f.references(15);
    auto options = small_sweep();

    options.workers = 1;
    const auto rows = run_sweep(session.model(), f.train, buckets, inputs, refs, options, f.dir + "/w1.csv");
    CHECK(rows.size() == 6);
    CHECK(rows[0].tau == 0.2);
    CHECK(rows[3].seed == 1);
    CHECK(rows[3].tau == 0.5);
    options.workers = 3;
    run_sweep(session.model(), f.train, buckets, inputs, refs, options, f.dir + "/w3.csv");
    const auto full = testing::read_file(f.dir + "/w1.csv");
    CHECK(full == testing::read_file(f.dir + "/w3.csv"));

    // Cut the file inside the fourth row and rerun.
    std::size_t cut = full.find(kReportCsvHeader);
    for (int row = 0; row < 4; ++row) cut = full.find('\n', cut) + 1;
    cut += 5;
    testing::write_file(f.dir + "/partial.csv", full.substr(0, cut));
    options.workers = 2;
    const auto resumed = run_sweep(session.model(), f.train, buckets, inputs, refs, options, f.dir + "/partial.csv");
    CHECK(resumed.size() == 6);
    CHECK(testing::read_file(f.dir + "/partial.csv") == full);

    // A file written with other settings is refused.
    auto other = options;
    other.taus = {0.3};
    CHECK_THROWS_AS(run_sweep(session.model(), f.train, buckets, inputs, refs, other, f.dir + "/w1.csv"),
                    ContractError);
    CHECK(testing::read_file(f.dir + "/w1.csv") == full);
  }
}
