#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqlab/rng.hpp"
#include "seqlab/tensor.hpp"

namespace seqlab {

// (tensor name, size) pairs describing a flat parameter vector.
using ParamLayout = std::vector<std::pair<std::string, std::size_t>>;

enum class NoiseMode { global, per_tensor };

// Proposal variance derived from the (clipped) MLE gradient so candidate
// perturbations live on the same scale as a likelihood step. Global mode
// uses one variance; per-tensor mode rescales by each tensor's size so
// small tensors (biases) are not drowned out by large ones. mult is the
// grid-searched noise level applied on top of the derived scale.
struct NoiseScale {
  NoiseMode mode = NoiseMode::global;
  double global_sigma2 = 0.0;
  std::map<std::string, double> per_tensor;
  std::vector<double> coord_sigma2;  // expanded to |θ| entries
};

inline NoiseScale noise_scale(const std::vector<double>& grad, NoiseMode mode,
                              const ParamLayout& layout, double mult = 1.0) {
  if (grad.empty()) throw std::invalid_argument("noise_scale: empty gradient");
  if (!(mult > 0.0))
    throw std::invalid_argument("noise_scale: mult must be positive");
  double l1 = l1_norm(grad);
  if (l1 == 0.0)
    throw std::invalid_argument(
        "noise_scale: zero gradient gives a degenerate proposal");
  l1 *= mult;

  NoiseScale out;
  out.mode = mode;
  out.coord_sigma2.reserve(grad.size());
  if (mode == NoiseMode::global) {
    out.global_sigma2 = l1 / double(grad.size());
    out.coord_sigma2.assign(grad.size(), out.global_sigma2);
  } else {
    std::size_t total = 0;
    for (auto& [name, size] : layout) {
      double s2 = l1 / double(size);
      out.per_tensor[name] = s2;
      out.coord_sigma2.insert(out.coord_sigma2.end(), size, s2);
      total += size;
    }
    if (total != grad.size())
      throw std::invalid_argument("noise_scale: layout/gradient mismatch");
  }
  return out;
}

// Mixture proposal q(Δ) = π N(Δ|0, D) + (1-π) N(Δ|center, D) with shared
// diagonal covariance D = diag(coord_sigma2). The center is the descent
// step the MLE trainer would take (-η times the clipped gradient), i.e. a
// perturbation that on its own is expected to improve the likelihood.
struct ProposalConfig {
  NoiseScale noise;
  double pi = 0.5;

  void validate(std::size_t dim) const {
    if (pi < 0.0 || pi > 1.0)
      throw std::invalid_argument("proposal: pi must lie in [0,1]");
    if (noise.coord_sigma2.size() != dim)
      throw std::invalid_argument("proposal: noise dimension mismatch");
    for (double s2 : noise.coord_sigma2)
      if (!(s2 > 0.0))
        throw std::invalid_argument("proposal: sigma2 must be positive");
  }
};

enum class ProposalComponent { zero, mle };

inline std::pair<std::vector<double>, ProposalComponent> sample_proposal(
    const std::vector<double>& mle_step, const ProposalConfig& cfg,
    CounterRng& rng) {
  cfg.validate(mle_step.size());
  bool from_zero = rng.uniform() < cfg.pi;
  std::vector<double> delta(mle_step.size());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double draw = std::sqrt(cfg.noise.coord_sigma2[i]) * rng.gaussian();
    delta[i] = from_zero ? draw : mle_step[i] + draw;
  }
  return {std::move(delta),
          from_zero ? ProposalComponent::zero : ProposalComponent::mle};
}

namespace detail {

// log N(Δ | μ, diag(σ²)) for one component
inline double diag_gaussian_log_density(const std::vector<double>& delta,
                                        const std::vector<double>* mean,
                                        const std::vector<double>& sigma2) {
  constexpr double log_2pi = 1.8378770664093454836;
  double acc = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double d = mean ? delta[i] - (*mean)[i] : delta[i];
    acc += std::log(sigma2[i]) + log_2pi + d * d / sigma2[i];
  }
  return -0.5 * acc;
}

}  // namespace detail

// log q(Δ) via log-sum-exp of the two component log densities. In ~1e4
// dimensions each component density underflows any direct exponentiation,
// so everything stays in log space.
inline double mixture_log_density(const std::vector<double>& delta,
                                  const std::vector<double>& mle_step,
                                  const ProposalConfig& cfg) {
  cfg.validate(delta.size());
  const auto& s2 = cfg.noise.coord_sigma2;
  double ninf = -std::numeric_limits<double>::infinity();
  double lz = cfg.pi > 0.0
                  ? std::log(cfg.pi) +
                        detail::diag_gaussian_log_density(delta, nullptr, s2)
                  : ninf;
  double lm = cfg.pi < 1.0
                  ? std::log1p(-cfg.pi) +
                        detail::diag_gaussian_log_density(delta, &mle_step, s2)
                  : ninf;
  return log_sum_exp(lz, lm);
}

// One scored candidate direction.
struct CandidateEvaluation {
  std::vector<double> delta;
  ProposalComponent component = ProposalComponent::zero;
  double log_q = 0.0;
  double cost = 0.0;
  double weight = 0.0;  // normalized across the candidate set
};

// Normalized self-normalized-importance weights:
//   log w_k = α (C(θ) - C(θ+Δ_k)) - log q̃(Δ_k),  w̃_k = softmax(log w).
// Shifting all costs or all log densities by a constant cancels exactly.
inline std::vector<double> candidate_weights(
    double base_cost, const std::vector<std::pair<double, double>>& cand,
    double alpha) {
  if (cand.empty())
    throw std::invalid_argument("candidate_weights: no candidates");
  if (alpha < 0.0)
    throw std::invalid_argument("candidate_weights: alpha must be >= 0");
  std::vector<double> lw(cand.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cand.size(); ++k) {
    auto [cost, log_q] = cand[k];
    lw[k] = alpha * (base_cost - cost) - log_q;
    m = std::max(m, lw[k]);
  }
  if (!std::isfinite(m))
    throw std::runtime_error(
        "candidate_weights: all weights non-finite (alpha or sigma mis-set)");
  double z = 0.0;
  for (double v : lw) z += std::exp(v - m);
  std::vector<double> w(cand.size());
  for (std::size_t k = 0; k < cand.size(); ++k) w[k] = std::exp(lw[k] - m) / z;
  return w;
}

// Δ_MGS = Σ_k w̃_k Δ_k (weights must already be normalized).
inline std::vector<double> combine(
    const std::vector<CandidateEvaluation>& candidates) {
  if (candidates.empty())
    throw std::invalid_argument("combine: no candidates");
  std::vector<double> out(candidates[0].delta.size(), 0.0);
  for (const CandidateEvaluation& c : candidates)
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] += c.weight * c.delta[i];
  return out;
}

// Elementwise SNIS variance estimate: Σ_k w̃_k (Δ_k - Δ_MGS)².
inline std::vector<double> snis_variance(
    const std::vector<CandidateEvaluation>& candidates,
    const std::vector<double>& delta_mgs) {
  std::vector<double> var(delta_mgs.size(), 0.0);
  for (const CandidateEvaluation& c : candidates)
    for (std::size_t i = 0; i < var.size(); ++i) {
      double d = c.delta[i] - delta_mgs[i];
      var[i] += c.weight * d * d;
    }
  return var;
}

}  // namespace seqlab
