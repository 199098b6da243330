#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "seqlab/model.hpp"
#include "seqlab/rng.hpp"
#include "seqlab/vocab.hpp"

namespace seqlab {

// One decoded hypothesis. eos, when present, is always the last token.
struct DecodeOutput {
  TokenSeq tokens;
  bool terminated = false;
  std::vector<double> step_log_probs;

  double sum_log_prob() const {
    double s = 0.0;
    for (double v : step_log_probs) s += v;
    return s;
  }
};

// Addressable stream of uniform(0,1) draws: draw i is a pure function of
// (seed, i). Sampling becomes the deterministic map (θ, X, ε) -> Ŷ.
class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t seed) : seed_(seed) {}

  double next() {
    return double(mix_key(seed_, stream_tag::decode, cursor_++) >> 11) *
           0x1.0p-53;
  }

  std::uint64_t cursor() const { return cursor_; }

 private:
  std::uint64_t seed_;
  std::uint64_t cursor_ = 0;
};

inline DecodeOutput decode_greedy(const ModelParams& p, const TokenSeq& x,
                                  std::size_t max_len,
                                  std::size_t eos_index) {
  if (max_len < 1) throw std::invalid_argument("decode: max_len must be >= 1");
  DecodeOutput out;
  DecoderState ds(p, x, eos_index);
  while (out.tokens.size() < max_len) {
    std::vector<double> lp = ds.log_probs();
    // argmax, ties to the lowest index
    std::size_t best = 0;
    for (std::size_t v = 1; v < lp.size(); ++v)
      if (lp[v] > lp[best]) best = v;
    out.tokens.push_back(best);
    out.step_log_probs.push_back(lp[best]);
    if (best == eos_index) {
      out.terminated = true;
      break;
    }
    if (out.tokens.size() < max_len) ds.advance(best);
  }
  return out;
}

// Inverse CDF over token indices: the first v whose cumulative probability
// exceeds the uniform draw. Zero-probability tokens can never be chosen
// (their mass adds nothing to the CDF); u near 1 falls back to the last
// positive-mass token if roundoff leaves the total below u.
inline std::size_t inverse_cdf_pick(const std::vector<double>& log_probs,
                                    double u) {
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t v = 0; v < log_probs.size(); ++v) {
    double mass = std::exp(log_probs[v]);
    if (mass > 0.0) last_positive = v;
    cum += mass;
    if (cum > u) return v;
  }
  return last_positive;
}

inline DecodeOutput decode_ancestral(const ModelParams& p, const TokenSeq& x,
                                     NoiseStream& noise, std::size_t max_len,
                                     std::size_t eos_index) {
  if (max_len < 1) throw std::invalid_argument("decode: max_len must be >= 1");
  DecodeOutput out;
  DecoderState ds(p, x, eos_index);
  while (out.tokens.size() < max_len) {
    std::vector<double> lp = ds.log_probs();
    std::size_t pick = inverse_cdf_pick(lp, noise.next());
    out.tokens.push_back(pick);
    out.step_log_probs.push_back(lp[pick]);
    if (pick == eos_index) {
      out.terminated = true;
      break;
    }
    if (out.tokens.size() < max_len) ds.advance(pick);
  }
  return out;
}

// Beam search. Hypotheses are ranked by summed log-prob while searching and
// by length-normalized score (sum / length) at finalization. Ties break
// deterministically: stable expansion order, then lexicographically smaller
// token sequence at the final pick. width=1 reproduces decode_greedy.
inline DecodeOutput decode_beam(const ModelParams& p, const TokenSeq& x,
                                std::size_t width, std::size_t max_len,
                                std::size_t eos_index) {
  if (width < 1) throw std::invalid_argument("decode_beam: width must be >= 1");
  if (max_len < 1) throw std::invalid_argument("decode: max_len must be >= 1");

  struct Hyp {
    TokenSeq tokens;
    std::vector<double> step_lps;
    double sum_lp = 0.0;
    std::vector<double> h;
    bool terminated = false;
  };

  DecoderState seed_state(p, x, eos_index);
  std::vector<Hyp> active{{{}, {}, 0.0, seed_state.state(), false}};
  std::vector<Hyp> finished;

  while (!active.empty()) {
    struct Cand {
      std::size_t parent;
      std::size_t token;
      double lp;
      double sum;
    };
    std::vector<Cand> cands;
    cands.reserve(active.size() * p.vocab);
    for (std::size_t i = 0; i < active.size(); ++i) {
      std::vector<double> lp = output_log_probs(p, active[i].h);
      for (std::size_t v = 0; v < p.vocab; ++v)
        cands.push_back({i, v, lp[v], active[i].sum_lp + lp[v]});
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.sum > b.sum; });
    if (cands.size() > width) cands.resize(width);

    std::vector<Hyp> next;
    for (const Cand& c : cands) {
      const Hyp& par = active[c.parent];
      Hyp h;
      h.tokens = par.tokens;
      h.tokens.push_back(c.token);
      h.step_lps = par.step_lps;
      h.step_lps.push_back(c.lp);
      h.sum_lp = c.sum;
      if (c.token == eos_index) {
        h.terminated = true;
        finished.push_back(std::move(h));
      } else if (h.tokens.size() >= max_len) {
        finished.push_back(std::move(h));
      } else {
        h.h = decoder_advance(p, par.h, c.token);
        next.push_back(std::move(h));
      }
    }
    active = std::move(next);
  }

  auto norm = [](const Hyp& h) {
    return h.sum_lp / double(h.tokens.size());
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    double a = norm(finished[i]), b = norm(finished[best]);
    if (a > b || (a == b && finished[i].tokens < finished[best].tokens))
      best = i;
  }
  DecodeOutput out;
  out.tokens = std::move(finished[best].tokens);
  out.terminated = finished[best].terminated;
  out.step_log_probs = std::move(finished[best].step_lps);
  return out;
}

// Training-time decode budget: a third over the longest target in the
// batch, so runaway generations stay cheap while leaving headroom to
// overshoot the gold length.
inline std::size_t train_time_cap(const std::vector<Example>& batch) {
  std::size_t longest = 1;
  for (const Example& ex : batch) longest = std::max(longest, ex.y.size());
  return std::size_t(std::ceil(1.3 * double(longest)));
}

}  // namespace seqlab
