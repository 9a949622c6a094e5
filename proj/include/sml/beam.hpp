#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "sml/corpus.hpp"
#include "sml/model.hpp"

namespace sml::eval {

struct BeamConfig {
  int beam_size = 4;
  double length_penalty = 0.6;
  int max_len = 64;

  void validate() const {
    if (beam_size < 1) throw std::invalid_argument("beam: beam_size must be >= 1");
    if (max_len < 1) throw std::invalid_argument("beam: max_len must be >= 1");
  }
};

// GNMT-style length normalization; len counts generated tokens including the
// closing EOS of finished hypotheses.
inline double length_penalty(long len, double penalty) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, penalty);
}

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, EOS excluded
  double sum_logprob = 0.0;
  bool finished = false;

  // Penalized score used for final ranking.
  double score(double penalty) const {
    const long len = static_cast<long>(tokens.size()) + (finished ? 1 : 0);
    return sum_logprob / length_penalty(std::max<long>(len, 1), penalty);
  }
};

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> finished;  // every finished hypothesis explored
};

// Standard beam search over the model's next-token distribution. Returns the
// best finished hypothesis by penalized score, or the best live one when
// nothing finished within max_len.
inline BeamResult beam_search(const model::Nct& model, const diff::ParamStore& params,
                              const corpus::ContextWindow& window, const BeamConfig& cfg) {
  cfg.validate();
  const int vocab = model.config().vocab;

  std::vector<Hypothesis> live(1);
  std::vector<Hypothesis> finished;

  for (int step = 0; step < cfg.max_len && !live.empty(); ++step) {
    // Expand every live hypothesis by every token, keep the top beam_size by
    // running log probability; EOS continuations among them finish. With
    // beam_size 1 this is exactly greedy decoding.
    std::vector<Hypothesis> candidates;
    for (const Hypothesis& h : live) {
      const std::vector<double> dist = model.decode_step(params, window, h.tokens);
      for (int tok = 0; tok < vocab; ++tok) {
        const double lp = std::log(dist[static_cast<std::size_t>(tok)]);
        Hypothesis next = h;
        next.sum_logprob += lp;
        if (tok == corpus::kEos)
          next.finished = true;
        else
          next.tokens.push_back(tok);
        candidates.push_back(std::move(next));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hypothesis& a, const Hypothesis& b) {
                       return a.sum_logprob > b.sum_logprob;
                     });
    if (static_cast<int>(candidates.size()) > cfg.beam_size) candidates.resize(cfg.beam_size);
    live.clear();
    for (Hypothesis& h : candidates)
      (h.finished ? finished : live).push_back(std::move(h));
  }

  BeamResult result;
  result.finished = finished;
  const Hypothesis* best = nullptr;
  for (const Hypothesis& h : finished)
    if (!best || h.score(cfg.length_penalty) > best->score(cfg.length_penalty)) best = &h;
  if (!best)
    for (const Hypothesis& h : live)
      if (!best || h.score(cfg.length_penalty) > best->score(cfg.length_penalty)) best = &h;
  if (!best) throw std::runtime_error("beam_search: no hypothesis produced");
  result.best = *best;
  return result;
}

inline std::vector<int> beam_decode(const model::Nct& model, const diff::ParamStore& params,
                                    const corpus::ContextWindow& window, const BeamConfig& cfg) {
  return beam_search(model, params, window, cfg).best.tokens;
}

}  // namespace sml::eval
