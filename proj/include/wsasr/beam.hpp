// wsasr: length-expanding beam search over per-step token log-probabilities.
// The step function is abstracted so the search can be driven by the real
// decoder or by toy distributions in tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "wsasr/model.hpp"

namespace wsasr {

struct Hypothesis {
  std::vector<int> tokens;  // emitted tokens, EOS included when finished
  double sum_logp = 0;
  bool finished = false;
  bool truncated = false;  // hit max_len without EOS

  // Length-normalized score used for ranking.
  double score() const {
    return sum_logp / double(std::max<size_t>(1, tokens.size()));
  }
};

namespace detail {

inline bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score() != b.score()) return a.score() > b.score();
  return a.tokens < b.tokens;  // ties: lexicographically smaller token ids
}

}  // namespace detail

// step(prefix) returns log-probabilities over the vocabulary for the next
// token given the prefix (prefix[0] is BOS). Hypotheses finalize on EOS or,
// flagged as truncated, at max_len. Fully deterministic.
template <typename StepFn>
std::vector<Hypothesis> beam_search_core(StepFn&& step, int beam, int max_len,
                                         int bos = SpecialIds::bos, int eos = SpecialIds::eos) {
  require(beam >= 1, "beam_search: beam must be >= 1");
  require(max_len >= 1, "beam_search: max_len must be >= 1");
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;

  for (int len = 0; len < max_len && !live.empty(); ++len) {
    std::vector<Hypothesis> candidates;
    for (const auto& hyp : live) {
      std::vector<int> prefix{bos};
      prefix.insert(prefix.end(), hyp.tokens.begin(), hyp.tokens.end());
      std::vector<double> logp = step(prefix);
      candidates.reserve(candidates.size() + logp.size());
      for (int tok = 0; tok < int(logp.size()); ++tok) {
        Hypothesis ext = hyp;
        ext.tokens.push_back(tok);
        ext.sum_logp += logp[size_t(tok)];
        candidates.push_back(std::move(ext));
      }
    }
    // Same-length candidates: cumulative score ordering equals normalized.
    std::sort(candidates.begin(), candidates.end(), [](const Hypothesis& a, const Hypothesis& b) {
      if (a.sum_logp != b.sum_logp) return a.sum_logp > b.sum_logp;
      return a.tokens < b.tokens;
    });
    if (int(candidates.size()) > beam) candidates.resize(size_t(beam));
    live.clear();
    for (auto& c : candidates) {
      if (!c.tokens.empty() && c.tokens.back() == eos) {
        c.finished = true;
        finished.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }
  for (auto& h : live) {
    h.finished = true;
    h.truncated = true;
    finished.push_back(std::move(h));
  }
  std::sort(finished.begin(), finished.end(), detail::better);
  return finished;
}

// Beam search over the encoder-decoder model. The encoder runs once; each
// step re-runs the decoder on the prefix (no state caching).
template <typename T>
std::vector<Hypothesis> beam_search(const NamedTensors<T>& params, const ModelConfig& cfg,
                                    const Tensor<T>& features, int beam = 20, int max_len = 64) {
  Tape<T> tp;
  tp.grad_enabled = false;
  auto p = lift_params(tp, params);
  auto enc = encoder_forward(tp, p, cfg, features);
  size_t mark = tp.size();
  auto step = [&](const std::vector<int>& prefix) {
    auto logits = decoder_forward(tp, p, cfg, enc, prefix);
    const Tensor<T>& L = tp.val(logits);
    int64_t last = L.rows() - 1;
    // Log-softmax of the last row in double for stable beam arithmetic.
    double mx = double(L.at(last, 0));
    for (int64_t j = 1; j < L.cols(); ++j) mx = std::max(mx, double(L.at(last, j)));
    double z = 0;
    for (int64_t j = 0; j < L.cols(); ++j) z += std::exp(double(L.at(last, j)) - mx);
    double lse = mx + std::log(z);
    std::vector<double> out(size_t(L.cols()));
    for (int64_t j = 0; j < L.cols(); ++j) out[size_t(j)] = double(L.at(last, j)) - lse;
    tp.truncate(mark);  // reclaim this step's decoder graph
    return out;
  };
  return beam_search_core(step, beam, max_len);
}

// Convenience: best hypothesis tokens with EOS stripped.
inline std::vector<int> strip_eos(const std::vector<int>& tokens) {
  std::vector<int> out;
  for (int t : tokens)
    if (t != SpecialIds::eos) out.push_back(t);
  return out;
}

}  // namespace wsasr
