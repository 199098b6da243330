#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "seqlab/decode.hpp"
#include "seqlab/losses.hpp"
#include "seqlab/mgs.hpp"
#include "seqlab/model.hpp"

namespace seqlab {

// Bounds for exhaustive sequence enumeration. Exponential in max_len, so
// hard caps keep oracle runs at desk scale.
struct EnumerationSpec {
  std::size_t vocab_size = 3;
  std::size_t max_len = 4;
  bool include_unterminated = true;

  void validate() const {
    if (vocab_size > 4)
      throw std::invalid_argument("enumeration: vocab_size must be <= 4");
    if (max_len > 5)
      throw std::invalid_argument("enumeration: max_len must be <= 5");
    double count = std::pow(double(vocab_size), double(max_len));
    if (count > 1e6)
      throw std::invalid_argument("enumeration: sequence count over 1e6");
  }
};

struct EnumeratedSeq {
  TokenSeq tokens;
  double log_prob = 0.0;
  bool terminated = false;
};

// Every sequence the capped sampling process can produce, with exact mass:
// eos-terminated sequences up to max_len, plus (optionally) length-capped
// unterminated stubs carrying their residual probability. With stubs
// included the masses sum to 1 by construction, which is what makes
// enumerated expectations exact rather than truncated.
inline std::vector<EnumeratedSeq> enumerate_sequences(
    const ModelParams& params, const TokenSeq& x, const EnumerationSpec& spec,
    std::size_t eos_index) {
  spec.validate();
  if (params.vocab != spec.vocab_size)
    throw std::invalid_argument("enumeration: vocab size mismatch");

  std::vector<EnumeratedSeq> out;
  std::function<void(const DecoderState&, TokenSeq, double)> walk =
      [&](const DecoderState& ds, TokenSeq prefix, double lp) {
        std::vector<double> step = ds.log_probs();
        for (std::size_t v = 0; v < params.vocab; ++v) {
          TokenSeq ext = prefix;
          ext.push_back(v);
          double lp2 = lp + step[v];
          if (v == eos_index) {
            out.push_back({ext, lp2, true});
          } else if (ext.size() == spec.max_len) {
            if (spec.include_unterminated) out.push_back({ext, lp2, false});
          } else {
            DecoderState next = ds;
            next.advance(v);
            walk(next, std::move(ext), lp2);
          }
        }
      };
  walk(DecoderState(params, x, eos_index), {}, 0.0);
  return out;
}

// ∇_θ log p_θ(tokens|x) as a flat vector. Works for full sequences and
// unterminated prefixes alike (the factors present are the factors scored).
inline std::vector<double> sequence_log_prob_gradient(
    const ModelParams& params, const TokenSeq& x, const TokenSeq& tokens,
    std::size_t eos_index) {
  Graph g;
  GraphModel m = register_model(g, params);
  std::vector<Graph::NodeId> picks;
  sequence_log_prob_graph(g, m, {x, tokens}, eos_index, picks);
  g.backward(g.add_n(picks));
  return flatten_grads(params, g.param_grads());
}

// Exact policy-gradient direction Σ_Ŷ p_θ(Ŷ|X) c(Ŷ,Y) ∇ log p_θ(Ŷ|X)
// over the capped outcome space.
inline std::vector<double> exact_pg_gradient(const ModelParams& params,
                                             const Example& ex,
                                             const SeqCostFn& loss,
                                             const EnumerationSpec& spec,
                                             std::size_t eos_index) {
  std::vector<double> acc(params.param_count(), 0.0);
  for (const EnumeratedSeq& seq :
       enumerate_sequences(params, ex.x, spec, eos_index)) {
    DecodeOutput out{seq.tokens, seq.terminated, {}};
    double pc = std::exp(seq.log_prob) * loss(out, ex);
    if (pc == 0.0) continue;
    std::vector<double> g =
        sequence_log_prob_gradient(params, ex.x, seq.tokens, eos_index);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += pc * g[i];
  }
  return acc;
}

// Exact expected cost Σ_Ŷ p_θ(Ŷ|X) c(Ŷ,Y); finite differences of this
// function give an independent check on exact_pg_gradient.
inline double exact_expected_cost(const ModelParams& params, const Example& ex,
                                  const SeqCostFn& loss,
                                  const EnumerationSpec& spec,
                                  std::size_t eos_index) {
  double acc = 0.0;
  for (const EnumeratedSeq& seq :
       enumerate_sequences(params, ex.x, spec, eos_index)) {
    DecodeOutput out{seq.tokens, seq.terminated, {}};
    acc += std::exp(seq.log_prob) * loss(out, ex);
  }
  return acc;
}

// Dense-grid quadrature for the exact update target on a 2-parameter cost:
//   Δ_* = ∫ Δ p̃_*(Δ) dΔ / ∫ p̃_*(Δ) dΔ,  p̃_*(Δ) = exp(α (C(θ) - C(θ+Δ))),
// restricted to a box of ±6σ around the two proposal means (the support
// carrying all but a vanishing fraction of proposal-reachable mass). The
// grid is refined 2x and a shift above 0.5% is treated as non-convergence.
inline std::vector<double> exact_mgs_target(
    const std::function<double(const std::vector<double>&)>& cost_fn,
    const std::vector<double>& theta, double alpha,
    const std::vector<double>& center, const ProposalConfig& cfg,
    std::size_t grid = 200) {
  if (theta.size() != 2)
    throw std::invalid_argument("exact_mgs_target: 2-parameter costs only");
  cfg.validate(2);

  double lo[2], hi[2];
  for (int i = 0; i < 2; ++i) {
    double s = 6.0 * std::sqrt(cfg.noise.coord_sigma2[i]);
    lo[i] = std::min(0.0, center[i]) - s;
    hi[i] = std::max(0.0, center[i]) + s;
  }
  double base = cost_fn(theta);

  auto integrate = [&](std::size_t n) {
    // midpoint rule; the common cell area cancels in the ratio
    double mass = 0.0, num0 = 0.0, num1 = 0.0;
    std::vector<double> at(2);
    for (std::size_t i = 0; i < n; ++i) {
      double d0 = lo[0] + (hi[0] - lo[0]) * (double(i) + 0.5) / double(n);
      for (std::size_t j = 0; j < n; ++j) {
        double d1 = lo[1] + (hi[1] - lo[1]) * (double(j) + 0.5) / double(n);
        at[0] = theta[0] + d0;
        at[1] = theta[1] + d1;
        double w = std::exp(alpha * (base - cost_fn(at)));
        mass += w;
        num0 += w * d0;
        num1 += w * d1;
      }
    }
    if (!(mass > 0.0) || !std::isfinite(mass))
      throw std::runtime_error("exact_mgs_target: degenerate mass");
    return std::vector<double>{num0 / mass, num1 / mass};
  };

  std::vector<double> coarse = integrate(grid);
  std::vector<double> fine = integrate(grid * 2);
  double scale = std::max({std::fabs(fine[0]), std::fabs(fine[1]), 1e-12});
  for (int i = 0; i < 2; ++i)
    if (std::fabs(fine[i] - coarse[i]) / scale > 0.005)
      throw std::runtime_error(
          "exact_mgs_target: quadrature did not converge under refinement");
  return fine;
}

// Explicit minimum-risk gradient α [E_q(c ∇logp) - E_q(c) E_q(∇logp)] with
// q(Ŷ) ∝ p_θ(Ŷ|X)^α over the candidate set S. Evaluated term by term so it
// shares nothing with autodiff-through-the-objective.
inline std::vector<double> mrt_gradient_oracle(
    const ModelParams& params, const Example& ex,
    const std::vector<DecodeOutput>& s, double alpha, const SeqCostFn& loss,
    std::size_t eos_index) {
  if (s.empty()) throw std::invalid_argument("mrt oracle: empty S");
  std::size_t n = s.size(), dim = params.param_count();

  std::vector<double> lp(n), q(n), c(n);
  for (std::size_t i = 0; i < n; ++i) {
    lp[i] = 0.0;
    DecoderState ds(params, ex.x, eos_index);
    for (std::size_t t = 0; t < s[i].tokens.size(); ++t) {
      lp[i] += ds.log_probs()[s[i].tokens[t]];
      if (t + 1 < s[i].tokens.size()) ds.advance(s[i].tokens[t]);
    }
    c[i] = loss(s[i], ex);
  }
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, alpha * lp[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(alpha * lp[i] - m);
  for (std::size_t i = 0; i < n; ++i) q[i] = std::exp(alpha * lp[i] - m) / z;

  std::vector<double> e_cg(dim, 0.0), e_g(dim, 0.0);
  double e_c = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> g =
        sequence_log_prob_gradient(params, ex.x, s[i].tokens, eos_index);
    e_c += q[i] * c[i];
    for (std::size_t d = 0; d < dim; ++d) {
      e_cg[d] += q[i] * c[i] * g[d];
      e_g[d] += q[i] * g[d];
    }
  }
  std::vector<double> out(dim);
  for (std::size_t d = 0; d < dim; ++d)
    out[d] = alpha * (e_cg[d] - e_c * e_g[d]);
  return out;
}

}  // namespace seqlab
