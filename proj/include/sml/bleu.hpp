#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sml/io.hpp"

namespace sml::eval {

enum class BleuMode { word, character };

inline std::vector<std::string> bleu_tokens(const std::string& sentence, BleuMode mode) {
  if (mode == BleuMode::word) return io::split_ws(sentence);
  std::vector<std::string> chars;
  for (const auto& tok : io::split_ws(sentence))
    for (auto& cp : io::split_codepoints(tok)) chars.push_back(std::move(cp));
  return chars;
}

namespace detail {

// n-gram multiset, keyed by '\x1f'-joined tokens.
inline std::unordered_map<std::string, long> ngram_counts(const std::vector<std::string>& toks,
                                                          int n) {
  std::unordered_map<std::string, long> counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += toks[i + j];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace detail

// Corpus BLEU in percent: geometric mean of clipped n-gram precisions times
// the brevity penalty. Orders the hypotheses cannot form are dropped from the
// mean; zero-match orders get exponential smoothing, except that zero unigram
// matches floor the whole score to 0.
inline double corpus_bleu(std::span<const std::string> hyps, std::span<const std::string> refs,
                          int max_n = 4, BleuMode mode = BleuMode::word) {
  if (hyps.empty()) throw std::runtime_error("corpus_bleu: empty hypothesis set");
  if (hyps.size() != refs.size())
    throw std::runtime_error("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                             std::to_string(refs.size()) + " references");
  if (max_n < 1) throw std::invalid_argument("corpus_bleu: max_n must be >= 1");

  std::vector<long> matches(max_n, 0), totals(max_n, 0);
  long hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto h = bleu_tokens(hyps[i], mode);
    const auto r = bleu_tokens(refs[i], mode);
    if (r.empty()) throw std::runtime_error("corpus_bleu: empty reference at line " +
                                            std::to_string(i + 1));
    hyp_len += static_cast<long>(h.size());
    ref_len += static_cast<long>(r.size());
    for (int n = 1; n <= max_n; ++n) {
      auto hc = detail::ngram_counts(h, n);
      if (hc.empty()) continue;
      auto rc = detail::ngram_counts(r, n);
      for (const auto& [gram, cnt] : hc) {
        totals[n - 1] += cnt;
        auto it = rc.find(gram);
        if (it != rc.end()) matches[n - 1] += std::min(cnt, it->second);
      }
    }
  }

  if (hyp_len == 0) return 0.0;
  if (totals[0] > 0 && matches[0] == 0) return 0.0;

  double log_sum = 0.0;
  int orders = 0;
  double smooth = 1.0;
  for (int n = 0; n < max_n; ++n) {
    if (totals[n] == 0) continue;  // every hypothesis shorter than n+1
    double p;
    if (matches[n] > 0) {
      p = static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
    } else {
      smooth *= 2.0;
      p = 1.0 / (smooth * static_cast<double>(totals[n]));
    }
    log_sum += std::log(p);
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double geo = std::exp(log_sum / orders);
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * geo;
}

}  // namespace sml::eval
