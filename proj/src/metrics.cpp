#include "mixdiv/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "mixdiv/errors.hpp"

namespace mixdiv {

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  for (int n = 0; n < kBleuOrder; ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  hyp_len += other.hyp_len;
  ref_len += other.ref_len;
  return *this;
}

namespace {

using NgramCounts = std::unordered_map<std::string, std::uint64_t>;

NgramCounts count_ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (std::size_t j = 1; j < n; ++j) {
      key += '\x1f';
      key += tokens[i + j];
    }
    ++counts[key];
  }
  return counts;
}

void require_aligned(std::size_t hyps, std::size_t refs) {
  if (hyps != refs) {
    throw ContractError("BLEU: " + std::to_string(hyps) + " hypotheses for " + std::to_string(refs) + " references");
  }
  if (hyps == 0) throw ContractError("BLEU: empty corpus");
}

}  // namespace

BleuStats sentence_stats(const Tokens& hypothesis, const Tokens& reference) {
  BleuStats s;
  s.hyp_len = hypothesis.size();
  s.ref_len = reference.size();
  for (std::size_t n = 1; n <= static_cast<std::size_t>(kBleuOrder); ++n) {
    const auto hyp = count_ngrams(hypothesis, n);
    const auto ref = count_ngrams(reference, n);
    std::uint64_t matched = 0;
    for (const auto& [gram, count] : hyp) {
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(count, it->second);
    }
    s.matches[n - 1] = matched;
    s.totals[n - 1] = hypothesis.size() >= n ? hypothesis.size() - n + 1 : 0;
  }
  return s;
}

double bleu_from_stats(const BleuStats& stats) {
  double log_precision = 0.0;
  for (int n = 0; n < kBleuOrder; ++n) {
    if (stats.totals[n] == 0 || stats.matches[n] == 0) return 0.0;
    log_precision += std::log(static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]));
  }
  const double ratio = static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len);
  const double brevity = std::exp(std::min(0.0, 1.0 - ratio));
  return 100.0 * brevity * std::exp(log_precision / kBleuOrder);
}

double corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references) {
  require_aligned(hypotheses.size(), references.size());
  BleuStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) total += sentence_stats(hypotheses[i], references[i]);
  return bleu_from_stats(total);
}

double sentence_level_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references) {
  require_aligned(hypotheses.size(), references.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) sum += bleu_from_stats(sentence_stats(hypotheses[i], references[i]));
  return sum / static_cast<double>(hypotheses.size());
}

std::size_t system_count(const DiverseSet& outputs) {
  if (outputs.empty()) throw ContractError("diverse output set is empty");
  const std::size_t k = outputs.front().size();
  if (k == 0) throw ContractError("input 0 has no hypotheses");
  for (std::size_t i = 1; i < outputs.size(); ++i) {
    if (outputs[i].size() != k) {
      throw ContractError("ragged diverse output: input " + std::to_string(i) + " has " +
                          std::to_string(outputs[i].size()) + " hypotheses, expected " + std::to_string(k));
    }
  }
  return k;
}

namespace {

std::vector<Tokens> system(const DiverseSet& outputs, std::size_t k) {
  std::vector<Tokens> out;
  out.reserve(outputs.size());
  for (const auto& group : outputs) out.push_back(group[k]);
  return out;
}

double score(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs, BleuLevel level) {
  return level == BleuLevel::corpus ? corpus_bleu(hyps, refs) : sentence_level_bleu(hyps, refs);
}

}  // namespace

double rfb(const DiverseSet& outputs, const std::vector<Tokens>& references, BleuLevel level) {
  const std::size_t k = system_count(outputs);
  require_aligned(outputs.size(), references.size());
  double sum = 0.0;
  for (std::size_t s = 0; s < k; ++s) sum += score(system(outputs, s), references, level);
  return sum / static_cast<double>(k);
}

double pwb(const DiverseSet& outputs, BleuLevel level) {
  const std::size_t k = system_count(outputs);
  if (k < 2) throw ContractError("pairwise BLEU needs at least 2 hypotheses per input, got " + std::to_string(k));
  std::vector<std::vector<Tokens>> systems;
  for (std::size_t s = 0; s < k; ++s) systems.push_back(system(outputs, s));
  double sum = 0.0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b)
      if (a != b) sum += score(systems[a], systems[b], level);
  return sum / static_cast<double>(k * (k - 1));
}

double eda(double rfb_value, double pwb_value, double baseline, double ceiling) {
  if (!(baseline > 0.0)) throw ContractError("EDA: baseline BLEU must be positive");
  if (!(ceiling > 0.0)) throw ContractError("EDA: pairwise ceiling must be positive");
  if (rfb_value < 0.0 || pwb_value < 0.0 || pwb_value > ceiling) {
    throw ContractError("EDA: scores outside their range");
  }
  const double omega = baseline / ceiling;
  const double faithfulness = (baseline - rfb_value) / baseline;
  const double similarity = omega * pwb_value / ceiling;
  return 100.0 * std::sqrt(faithfulness * faithfulness + similarity * similarity);
}

MetricsReport evaluate(const DiverseSet& outputs, const std::vector<Tokens>& references, double baseline,
                       BleuLevel level) {
  MetricsReport r;
  r.systems = system_count(outputs);
  r.inputs = outputs.size();
  r.baseline = baseline;
  r.ceiling = kPairwiseCeiling;
  r.omega = baseline / kPairwiseCeiling;
  r.rfb = rfb(outputs, references, level);
  r.pwb = pwb(outputs, level);
  r.eda = eda(r.rfb, r.pwb, baseline);
  r.rfb_exceeds_baseline = r.rfb > baseline;
  return r;
}

namespace {

std::size_t parse_index(std::string_view field, const std::string& where) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw FormatError(where + ": expected a non-negative integer, got '" + std::string(field) + "'");
  }
  return value;
}

}  // namespace

std::string format_hypothesis_row(const HypothesisRow& row) {
  std::string out = std::to_string(row.input) + '\t' + std::to_string(row.hyp) + '\t' +
                    (row.partner ? std::to_string(*row.partner) : std::string("-")) + '\t' + detokenize(row.translation);
  return out;
}

HypothesesFile read_hypotheses(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  HypothesesFile file;
  std::string line;
  std::size_t line_no = 0;
  std::size_t expected_k = 0;
  auto close_group = [&](const std::string& where) {
    if (file.outputs.empty()) return;
    const std::size_t got = file.outputs.back().size();
    if (expected_k == 0) expected_k = got;
    if (got != expected_k) {
      throw FormatError(where + ": input " + std::to_string(file.outputs.size() - 1) + " has " +
                        std::to_string(got) + " hypotheses, expected " + std::to_string(expected_k));
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = path + ":" + std::to_string(line_no);
    if (!line.empty() && line.front() == '#') {
      if (!file.outputs.empty()) throw FormatError(where + ": header line after hypothesis rows");
      file.header.push_back(line.substr(1));
      continue;
    }
    if (line.empty()) throw FormatError(where + ": empty line");
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    for (int f = 0; f < 3; ++f) {
      auto tab = rest.find('\t');
      if (tab == std::string_view::npos) throw FormatError(where + ": expected 4 tab-separated fields");
      fields.push_back(rest.substr(0, tab));
      rest.remove_prefix(tab + 1);
    }
    fields.push_back(rest);
    const std::size_t input = parse_index(fields[0], where);
    const std::size_t hyp = parse_index(fields[1], where);
    std::optional<std::size_t> partner;
    if (fields[2] != "-") partner = parse_index(fields[2], where);

    if (input == file.outputs.size()) {
      close_group(where);
      file.outputs.emplace_back();
      file.partners.emplace_back();
    } else if (file.outputs.empty() || input != file.outputs.size() - 1) {
      throw FormatError(where + ": input index " + std::to_string(input) + " out of order");
    }
    if (hyp != file.outputs.back().size()) {
      throw FormatError(where + ": hypothesis index " + std::to_string(hyp) + " out of order");
    }
    file.outputs.back().push_back(tokenize(fields[3]));
    file.partners.back().push_back(partner);
  }
  close_group(path + ":" + std::to_string(line_no));
  if (file.outputs.empty()) throw FormatError(path + ": no hypothesis rows");
  return file;
}

std::vector<Tokens> read_references(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Tokens> refs;
  std::string line;
  while (std::getline(in, line)) refs.push_back(tokenize(line));
  return refs;
}

MetricsReport evaluate_run(const std::string& hypotheses_path, const std::string& references_path, double baseline,
                           BleuLevel level) {
  const auto file = read_hypotheses(hypotheses_path);
  const auto refs = read_references(references_path);
  if (refs.size() != file.outputs.size()) {
    throw FormatError(references_path + ": " + std::to_string(refs.size()) + " references for " +
                      std::to_string(file.outputs.size()) + " inputs in " + hypotheses_path);
  }
  return evaluate(file.outputs, refs, baseline, level);
}

std::string format_report(const MetricsReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "inputs  " << r.inputs << "\n";
  out << "K       " << r.systems << "\n";
  out << "rfb     " << r.rfb << (r.rfb_exceeds_baseline ? "  (above R)" : "") << "\n";
  out << "pwb     " << r.pwb << "\n";
  out << "EDA     " << r.eda << "\n";
  out << "R       " << r.baseline << "\n";
  out << "P       " << r.ceiling << "\n";
  out << std::setprecision(4) << "omega   " << r.omega << "\n";
  return out.str();
}

std::string report_csv_row(const MetricsReport& r, double tau, std::uint64_t seed) {
  std::ostringstream out;
  out << std::setprecision(6) << tau << ',' << seed << ',' << r.systems << ',' << std::fixed << std::setprecision(4)
      << r.rfb << ',' << r.pwb << ',' << r.eda << ',' << r.baseline;
  return out.str();
}

}  // namespace mixdiv
