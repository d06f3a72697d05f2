#include <cmath>
#include <map>

#include "bleu_oracle.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "mixdiv/errors.hpp"
#include "mixdiv/metrics.hpp"

using namespace mixdiv;

namespace {

using oracle::column;
double reference_bleu(const std::vector<Tokens>& h, const std::vector<Tokens>& r) { return oracle::bleu(h, r); }
double brute_force_pwb(const DiverseSet& set) { return oracle::pairwise_bleu(set); }

Tokens random_sentence(RngStream& rng, std::size_t vocab, std::size_t min_len, std::size_t max_len) {
  Tokens s;
  const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
  for (std::size_t i = 0; i < len; ++i) s.push_back("w" + std::to_string(rng.uniform_index(vocab)));
  return s;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("identical corpora score 100") {
    const std::vector<Tokens> h{{"a", "b", "c", "d"}, {"e", "f", "g", "h", "i"}};
    CHECK(corpus_bleu(h, h) == doctest::Approx(100.0).epsilon(1e-12));
  }

  TEST_CASE("clipped unigram precision of the repeated-word candidate") {
    const Tokens cand{"the", "the", "the", "the", "the", "the", "the"};
    const Tokens ref{"the", "cat", "is", "on", "the", "mat"};
    const auto st = sentence_stats(cand, ref);
    CHECK(st.matches[0] == 2);
    CHECK(st.totals[0] == 7);
    CHECK(st.matches[1] == 0);
    CHECK(st.totals[1] == 6);
    CHECK(st.hyp_len == 7);
    CHECK(st.ref_len == 6);
    CHECK(bleu_from_stats(st) == 0.0);
  }

  TEST_CASE("brevity penalty") {
    const std::vector<Tokens> h{{"a", "b", "c", "d"}};
    const std::vector<Tokens> r{{"a", "b", "c", "d", "e", "f"}};
    CHECK(corpus_bleu(h, r) == doctest::Approx(100.0 * std::exp(1.0 - 6.0 / 4.0)).epsilon(1e-12));
  }

  TEST_CASE("corpus BLEU matches an independent implementation") {
    RngStream rng(31);
    int nonzero = 0;
    for (int corpus = 0; corpus < 50; ++corpus) {
      std::vector<Tokens> hyps, refs;
      const std::size_t lines = 5 + rng.uniform_index(30);
      for (std::size_t i = 0; i < lines; ++i) {
        refs.push_back(random_sentence(rng, 6, 3, 14));
        Tokens h = refs.back();
        // Perturb so scores spread across the range.
        for (auto& t : h)
          if (rng.uniform() < 0.3) t = "w" + std::to_string(rng.uniform_index(6));
        if (rng.uniform() < 0.3) h.resize(1 + rng.uniform_index(h.size()));
        if (rng.uniform() < 0.2) h.push_back("w0");
        hyps.push_back(h);
      }
      const double expect = reference_bleu(hyps, refs);
      nonzero += expect > 0;
      CHECK(std::abs(corpus_bleu(hyps, refs) - expect) < 1e-9);
    }
    CHECK(nonzero > 40);
  }

  TEST_CASE("stats accumulation is order independent") {
    RngStream rng(2);
    std::vector<Tokens> h, r;
    for (int i = 0; i < 20; ++i) {
      h.push_back(random_sentence(rng, 5, 2, 9));
      r.push_back(random_sentence(rng, 5, 2, 9));
    }
    const double forward = corpus_bleu(h, r);
    std::reverse(h.begin(), h.end());
    std::reverse(r.begin(), r.end());
    CHECK(corpus_bleu(h, r) == forward);
    CHECK_THROWS_AS(corpus_bleu({}, {}), ContractError);
    CHECK_THROWS(corpus_bleu(h, std::vector<Tokens>(3)));
  }

  TEST_CASE("rfb averages per-system scores") {
    const std::vector<Tokens> refs{{"a", "b", "c", "d"}, {"e", "f", "g", "h"}};
    DiverseSet perfect{{refs[0], refs[0]}, {refs[1], refs[1]}};
    CHECK(rfb(perfect, refs) == doctest::Approx(100.0));
    DiverseSet mixed{{refs[0], {"x", "y", "z", "q"}}, {refs[1], {"x", "y", "z", "q"}}};
    CHECK(rfb(mixed, refs) == doctest::Approx(50.0));
    DiverseSet single{{{"a", "b", "c", "x"}}, {refs[1]}};
    CHECK(rfb(single, refs) == doctest::Approx(corpus_bleu(column(single, 0), refs)));
    DiverseSet ragged{{refs[0], refs[0]}, {refs[1]}};
    CHECK_THROWS_AS(rfb(ragged, refs), ContractError);
  }

  TEST_CASE("pwb of identical and disjoint systems") {
    const Tokens s{"a", "b", "c", "d", "e"};
    DiverseSet same{{s, s, s}, {s, s, s}};
    CHECK(pwb(same) == 100.0);
    DiverseSet disjoint{{{"a", "b", "c", "d"}, {"w", "x", "y", "z"}}};
    CHECK(pwb(disjoint) == 0.0);
    DiverseSet one{{s}};
    CHECK_THROWS_AS(pwb(one), ContractError);
  }

  TEST_CASE("pwb matches brute-force pair enumeration") {
    RngStream rng(12);
    for (int fixture = 0; fixture < 10; ++fixture) {
      DiverseSet set;
      for (int i = 0; i < 15; ++i) {
        const Tokens base = random_sentence(rng, 5, 4, 10);
        std::vector<Tokens> row;
        for (int k = 0; k < 3; ++k) {
          Tokens t = base;
          for (auto& w : t)
            if (rng.uniform() < 0.25) w = "w" + std::to_string(rng.uniform_index(5));
          row.push_back(t);
        }
        set.push_back(row);
      }
      const double expect = brute_force_pwb(set);
      CHECK(std::abs(pwb(set) - expect) < 1e-9);
      // Relabeling the systems leaves the mean unchanged.
      DiverseSet relabeled = set;
      for (auto& row : relabeled) std::rotate(row.begin(), row.begin() + 1, row.end());
      CHECK(std::abs(pwb(relabeled) - expect) < 1e-9);
    }
  }

  TEST_CASE("EDA golden values") {
    CHECK(std::abs(eda(25.50, 57.50, 27.70) - 17.79) <= 0.01);
    CHECK(std::abs(eda(25.12, 60.02, 27.43) - 18.49) <= 0.01);
    CHECK(std::abs(eda(25.24, 59.43, 27.43) - 18.15) <= 0.01);
    CHECK(eda(27.7, 0.0, 27.7) == 0.0);
    CHECK_THROWS_AS(eda(10, 10, 0.0), ContractError);
  }

  TEST_CASE("EDA is monotone in both coordinates") {
    double last = 1e9;
    for (double r = 0; r <= 27.0; r += 0.5) {
      const double e = eda(r, 50.0, 27.0);
      CHECK(e < last);
      last = e;
    }
    last = -1;
    for (double p = 0; p <= 100.0; p += 2.5) {
      const double e = eda(20.0, p, 27.0);
      CHECK(e > last);
      last = e;
    }
  }

  TEST_CASE("collapsed outputs are dominated by the pairwise term") {
    const std::vector<Tokens> refs{{"a", "b", "c", "d"}, {"e", "f", "g", "h"}};
    DiverseSet collapsed{{refs[0], refs[0], refs[0]}, {refs[1], refs[1], refs[1]}};
    const auto report = evaluate(collapsed, refs, 80.0);
    CHECK(report.pwb == 100.0);
    CHECK(report.omega == 80.0 / 100.0);
    CHECK(report.rfb_exceeds_baseline);
    // (R - rfb)/R = -0.25, omega * pwb / P = 0.8
    CHECK(report.eda == doctest::Approx(100.0 * std::sqrt(0.25 * 0.25 + 0.8 * 0.8)));
  }

  TEST_CASE("ten-sentence fixture matches a hand-assembled report") {
    const auto dir = testing::scratch_dir("metrics_fixture");
    RngStream rng(44);
    std::vector<Tokens> refs;
    DiverseSet set;
    std::string hyp_text = "# mixdiv decode\n# tau = 0.3\n";
    std::string ref_text;
    for (std::size_t i = 0; i < 10; ++i) {
      refs.push_back(random_sentence(rng, 6, 4, 9));
      ref_text += detokenize(refs.back()) + "\n";
      std::vector<Tokens> row;
      for (std::size_t k = 0; k < 3; ++k) {
        Tokens t = refs.back();
        for (auto& w : t)
          if (rng.uniform() < 0.2) w = "w" + std::to_string(rng.uniform_index(6));
        row.push_back(t);
        hyp_text += format_hypothesis_row({i, k, i + k, t}) + "\n";
      }
      set.push_back(row);
    }
    testing::write_file(dir + "/h.tsv", hyp_text);
    testing::write_file(dir + "/r.txt", ref_text);

    const auto file = read_hypotheses(dir + "/h.tsv");
    CHECK(file.header == std::vector<std::string>{" mixdiv decode", " tau = 0.3"});
    CHECK(file.outputs == set);
    CHECK(file.partners[2][1] == std::optional<std::size_t>(3));

    const auto report = evaluate_run(dir + "/h.tsv", dir + "/r.txt", 40.0);
    double expect_rfb = 0;
    for (std::size_t k = 0; k < 3; ++k) expect_rfb += reference_bleu(column(set, k), refs) / 3.0;
    const double expect_pwb = brute_force_pwb(set);
    const double expect_eda =
        100.0 * std::sqrt(std::pow((40.0 - expect_rfb) / 40.0, 2) + std::pow(0.4 * expect_pwb / 100.0, 2));
    CHECK(report.rfb == doctest::Approx(expect_rfb).epsilon(1e-12));
    CHECK(report.pwb == doctest::Approx(expect_pwb).epsilon(1e-12));
    CHECK(report.eda == doctest::Approx(expect_eda).epsilon(1e-12));
    CHECK(report.inputs == 10);
    CHECK(report.systems == 3);
    CHECK(report.omega == 0.4);

    const auto row = report_csv_row(report, 0.3, 2);
    CHECK(row.rfind("0.3,2,3,", 0) == 0);
    CHECK(std::count(row.begin(), row.end(), ',') == 6);
    const auto text = format_report(report);
    CHECK(text.find("EDA") != std::string::npos);
  }

  TEST_CASE("malformed hypotheses files name the line") {
    const auto dir = testing::scratch_dir("metrics_bad");
    auto expect_line = [&](const std::string& text, const std::string& needle) {
      testing::write_file(dir + "/h.tsv", text);
      try {
        read_hypotheses(dir + "/h.tsv");
        FAIL("expected FormatError");
      } catch (const FormatError& e) {
        CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
      }
    };
    expect_line("0\t0\t-\ta b\n0\t1\t-\ta\nx\t0\t-\tb\n", ":3");
    expect_line("0\t0\t-\ta b\n\n", ":2");
    expect_line("0\t0\t-\ta b\n0\t0\t-\tb\n", ":2");
    expect_line("0\t0\t-\ta\n0\t1\t-\tb\n1\t0\t-\tc\n", "1 has");
    expect_line("0\t0 a b\n", ":1");
    expect_line("# only a header\n", "no hypothesis rows");
    CHECK_THROWS_AS(read_hypotheses(dir + "/missing.tsv"), IoError);

    testing::write_file(dir + "/ok.tsv", "0\t0\t-\ta b\n1\t0\t-\tc\n");
    testing::write_file(dir + "/refs.txt", "a b\n");
    CHECK_THROWS_AS(evaluate_run(dir + "/ok.tsv", dir + "/refs.txt", 30.0), FormatError);
  }
}
