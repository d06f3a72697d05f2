#pragma once

// Straightforward BLEU written independently of the library: n-gram
// multisets in ordered maps, precisions combined in log space.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace oracle {

using Sentence = std::vector<std::string>;

inline double bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  double matches[4] = {0, 0, 0, 0}, totals[4] = {0, 0, 0, 0};
  double hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    hyp_len += double(hyps[s].size());
    ref_len += double(refs[s].size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<Sentence, int> h, r;
      for (std::size_t i = 0; i + n <= hyps[s].size(); ++i) ++h[Sentence(hyps[s].begin() + i, hyps[s].begin() + i + n)];
      for (std::size_t i = 0; i + n <= refs[s].size(); ++i) ++r[Sentence(refs[s].begin() + i, refs[s].begin() + i + n)];
      for (const auto& [gram, count] : h) {
        totals[n - 1] += count;
        auto it = r.find(gram);
        if (it != r.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0;
  for (int n = 0; n < 4; ++n) {
    if (matches[n] == 0 || totals[n] == 0) return 0.0;
    log_sum += std::log(matches[n] / totals[n]);
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

// set[i][k]: hypothesis k of input i.
inline std::vector<Sentence> column(const std::vector<std::vector<Sentence>>& set, std::size_t k) {
  std::vector<Sentence> out;
  for (const auto& row : set) out.push_back(row[k]);
  return out;
}

// Mean corpus BLEU over every ordered pair of distinct systems.
inline double pairwise_bleu(const std::vector<std::vector<Sentence>>& set) {
  const std::size_t k = set.front().size();
  double sum = 0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b)
      if (a != b) sum += bleu(column(set, a), column(set, b));
  return sum / double(k * (k - 1));
}

}  // namespace oracle
