#pragma once

// Corpus BLEU and the diversity suite built on it: reference BLEU (rfb),
// pairwise BLEU (pwb) and the distance of (rfb, pwb) from the ideal point
// (R, 0), where R is the plain beam-search BLEU of the same model.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mixdiv/corpus.hpp"

namespace mixdiv {

inline constexpr int kBleuOrder = 4;

struct BleuStats {
  std::array<std::uint64_t, kBleuOrder> matches{};  // clipped
  std::array<std::uint64_t, kBleuOrder> totals{};
  std::uint64_t hyp_len = 0;
  std::uint64_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& other);
  friend bool operator==(const BleuStats&, const BleuStats&) = default;
};

BleuStats sentence_stats(const Tokens& hypothesis, const Tokens& reference);

// Percent; 0 when any order has no matches or no candidate n-grams.
double bleu_from_stats(const BleuStats& stats);

// How rfb and pwb turn sentences into one number per system (pair).
enum class BleuLevel {
  corpus,    // accumulate stats over the corpus, then score
  sentence,  // mean of per-sentence scores (sensitivity checks only)
};

double corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references);
double sentence_level_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references);

// outputs[i][k] is the k-th translation of input i.
using DiverseSet = std::vector<std::vector<Tokens>>;

// Number of systems K; throws ContractError on an empty or ragged set.
std::size_t system_count(const DiverseSet& outputs);

double rfb(const DiverseSet& outputs, const std::vector<Tokens>& references, BleuLevel level = BleuLevel::corpus);
double pwb(const DiverseSet& outputs, BleuLevel level = BleuLevel::corpus);

inline constexpr double kPairwiseCeiling = 100.0;

double eda(double rfb, double pwb, double baseline, double ceiling = kPairwiseCeiling);

struct MetricsReport {
  double rfb = 0.0;
  double pwb = 0.0;
  double eda = 0.0;
  double baseline = 0.0;  // R
  double ceiling = kPairwiseCeiling;  // P
  double omega = 0.0;     // R / P
  bool rfb_exceeds_baseline = false;
  std::size_t inputs = 0;
  std::size_t systems = 0;
};

MetricsReport evaluate(const DiverseSet& outputs, const std::vector<Tokens>& references, double baseline,
                       BleuLevel level = BleuLevel::corpus);

// Hypotheses file: `#` header lines, then `input\thyp\tpartner\ttranslation`
// rows grouped by input in order, hyp indices 0..K-1 within each group.
// Partner is a pair id or `-` for plain beam search.
struct HypothesisRow {
  std::size_t input = 0;
  std::size_t hyp = 0;
  std::optional<std::size_t> partner;
  Tokens translation;
};

struct HypothesesFile {
  std::vector<std::string> header;  // without the leading '#'
  DiverseSet outputs;
  std::vector<std::vector<std::optional<std::size_t>>> partners;
};

// Throws FormatError naming the offending line, IoError when unreadable.
HypothesesFile read_hypotheses(const std::string& path);
std::string format_hypothesis_row(const HypothesisRow& row);

std::vector<Tokens> read_references(const std::string& path);

MetricsReport evaluate_run(const std::string& hypotheses_path, const std::string& references_path, double baseline,
                           BleuLevel level = BleuLevel::corpus);

std::string format_report(const MetricsReport& report);
inline constexpr const char* kReportCsvHeader = "tau,seed,K,rfb,pwb,eda,R";
std::string report_csv_row(const MetricsReport& report, double tau, std::uint64_t seed);

}  // namespace mixdiv
