#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <utility>
#include <vector>

#include "seqlab/decode.hpp"
#include "seqlab/losses.hpp"
#include "seqlab/mgs.hpp"
#include "seqlab/model.hpp"
#include "seqlab/rng.hpp"

namespace seqlab {

enum class Algorithm { mle, mgs, pg, mrt };

// Candidate-set recipes for minimum-risk training: ancestral samples,
// optionally joined by the greedy decode and/or the gold target.
enum class MrtCandidates {
  samples,
  samples_greedy,
  samples_gold,
  samples_greedy_gold
};

// Proposal ablations: the full two-component mixture, or either component
// alone (pi forced to 1 or 0; densities stay consistent with the ablated
// mixture, so the weights remain properly corrected).
enum class ProposalAblation { mgs, zero_only, mle_only };

struct TrainerConfig {
  Algorithm algorithm = Algorithm::mle;
  std::size_t k = 4;         // candidates (mgs) or samples per example (pg/mrt)
  double alpha = 1.0;        // cost temperature (mgs) / sharpness (mrt)
  double pi = 0.5;           // zero-component weight of the proposal
  NoiseMode noise_mode = NoiseMode::global;
  double noise_mult = 1.0;   // multiplier on the derived proposal variance
  double mix_rate = 1.0;     // P(sequence-level step) in mixed training
  MrtCandidates mrt_candidates = MrtCandidates::samples;
  double ema_decay = 0.9;    // pg baseline decay
  double step_size = 1e-2;   // eta
  double mle_mix_step_size = 1e-2;  // eta for the mixed-in MLE steps
  double clip_norm = 1.0;
  ProposalAblation proposal_ablation = ProposalAblation::mgs;
  bool use_adam = false;     // plain SGD unless switched on
  std::size_t decode_cap = 0;  // 0: derive train_time_cap from each batch

  // Per-algorithm starting points. MGS applies the combined direction
  // directly (candidates already live at gradient scale), so its default
  // step size is 1; the gradient-based trainers default to 1e-2.
  static TrainerConfig defaults(Algorithm a) {
    TrainerConfig cfg;
    cfg.algorithm = a;
    if (a == Algorithm::mgs) cfg.step_size = 1.0;
    return cfg;
  }

  void validate() const {
    if (k < 1) throw std::invalid_argument("trainer: k must be >= 1");
    if (alpha < 0.0) throw std::invalid_argument("trainer: alpha must be >= 0");
    if (pi < 0.0 || pi > 1.0)
      throw std::invalid_argument("trainer: pi must lie in [0,1]");
    if (!(noise_mult > 0.0))
      throw std::invalid_argument("trainer: noise_mult must be positive");
    if (mix_rate < 0.0 || mix_rate > 1.0)
      throw std::invalid_argument("trainer: mix_rate must lie in [0,1]");
    if (ema_decay < 0.0 || ema_decay >= 1.0)
      throw std::invalid_argument("trainer: ema_decay must lie in [0,1)");
    if (!(step_size > 0.0) || !(mle_mix_step_size > 0.0))
      throw std::invalid_argument("trainer: step sizes must be positive");
    if (!(clip_norm > 0.0))
      throw std::invalid_argument("trainer: clip_norm must be positive");
  }
};

// Everything a monitoring plot could want from one step. Fields outside a
// step's algorithm keep their zero defaults.
struct StepDiagnostics {
  double pooled_cost_before = 0.0;  // C(theta) for decoding steps, mean nll for mle
  std::vector<double> weights;      // mgs: normalized candidate weights
  double weight_stddev = 0.0;
  double mle_component_total_weight = 0.0;
  ProposalComponent highest_weight_component = ProposalComponent::zero;
  bool underflow_flag = false;  // every raw candidate weight would underflow exp
  double grad_norm = 0.0;       // pre-clip L2
  double baseline = 0.0;        // pg: baseline used this step
  std::size_t candidate_count = 0;   // mgs: K; pg: N*K; mrt: total |S| after dedup
  std::size_t sentinel_count = 0;    // mgs: candidates that decoded non-finite
  double snis_variance_mean = 0.0;   // mgs: mean per-coordinate SNIS variance
  bool took_mle_branch = false;      // mixed_step drew z = 0
};

// Cross-step trainer memory. Steps never mutate model parameters in place;
// this struct is the only thing they update.
struct TrainerState {
  std::size_t step = 0;
  double baseline = 0.0;
  bool baseline_set = false;
  std::vector<double> adam_m, adam_v;
  std::size_t adam_t = 0;
};

namespace detail {

inline double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// theta - eta * g, either plain or through adaptive moments. A zero
// gradient leaves the parameters bit-identical on both paths.
inline ModelParams descend(const ModelParams& p, const std::vector<double>& g,
                           double eta, bool use_adam, TrainerState& st) {
  std::vector<double> flat = p.flat_view();
  if (g.size() != flat.size())
    throw std::invalid_argument("descend: gradient length mismatch");
  if (use_adam) {
    if (st.adam_m.empty()) {
      st.adam_m.assign(flat.size(), 0.0);
      st.adam_v.assign(flat.size(), 0.0);
    }
    if (st.adam_m.size() != flat.size())
      throw std::invalid_argument("descend: optimizer state size mismatch");
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++st.adam_t;
    double c1 = 1.0 - std::pow(b1, double(st.adam_t));
    double c2 = 1.0 - std::pow(b2, double(st.adam_t));
    for (std::size_t i = 0; i < flat.size(); ++i) {
      st.adam_m[i] = b1 * st.adam_m[i] + (1.0 - b1) * g[i];
      st.adam_v[i] = b2 * st.adam_v[i] + (1.0 - b2) * g[i] * g[i];
      flat[i] -= eta * (st.adam_m[i] / c1) / (std::sqrt(st.adam_v[i] / c2) + eps);
    }
  } else {
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= eta * g[i];
  }
  ModelParams out = p;
  out.set_flat(flat);
  return out;
}

}  // namespace detail

// One likelihood step: theta <- theta - eta * clip(grad nll).
inline std::pair<ModelParams, StepDiagnostics> mle_step(
    const ModelParams& params, const std::vector<Example>& batch,
    std::size_t eos_index, const TrainerConfig& cfg, TrainerState& st) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("mle_step: empty batch");
  NllResult r = nll_and_gradient(params, batch, eos_index);
  StepDiagnostics d;
  d.pooled_cost_before = r.value / double(batch.size());
  d.grad_norm = detail::l2(r.grad);
  ModelParams out = detail::descend(params, clip_gradient(r.grad, cfg.clip_norm),
                                    cfg.step_size, cfg.use_adam, st);
  ++st.step;
  return {std::move(out), std::move(d)};
}

// One guided-search step:
//   decode the batch at theta and pool the task loss into C(theta);
//   center the proposal's guided component on -clip(grad nll);
//   draw K candidate moves, re-decode and pool at each theta + delta_k;
//   weight by exp(alpha * improvement) / proposal density, normalized;
//   move along the weighted average of the candidates.
// Candidate evaluations touch only read-only state, so they run on a small
// thread pool; the decoder must therefore be safe to call concurrently
// (greedy decoding and per-call-seeded sampling both are).
inline std::pair<ModelParams, StepDiagnostics> mgs_step(
    const ModelParams& params, const std::vector<Example>& batch,
    std::size_t eos_index, const TrainerConfig& cfg, const SeqCostFn& loss,
    const DecodeFn& decoder, TrainerState& st, std::uint64_t seed) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("mgs_step: empty batch");

  double base_cost = pooled_cost(params, batch, decoder, loss);
  NllResult r = nll_and_gradient(params, batch, eos_index);
  std::vector<double> clipped = clip_gradient(r.grad, cfg.clip_norm);
  std::vector<double> center(clipped.size());
  for (std::size_t i = 0; i < center.size(); ++i) center[i] = -clipped[i];

  ProposalConfig pcfg;
  pcfg.noise =
      noise_scale(clipped, cfg.noise_mode, params.layout(), cfg.noise_mult);
  pcfg.pi = cfg.proposal_ablation == ProposalAblation::zero_only  ? 1.0
            : cfg.proposal_ablation == ProposalAblation::mle_only ? 0.0
                                                                  : cfg.pi;

  std::vector<CandidateEvaluation> cands(cfg.k);
  std::vector<char> hit_sentinel(cfg.k, 0);
  auto eval_candidate = [&](std::size_t k) {
    CounterRng rng(mix_key(seed, stream_tag::proposal, st.step), k);
    auto [delta, comp] = sample_proposal(center, pcfg, rng);
    CandidateEvaluation& c = cands[k];
    c.component = comp;
    c.log_q = mixture_log_density(delta, center, pcfg);
    try {
      c.cost = pooled_cost(apply_perturbation(params, delta), batch, decoder,
                           loss);
    } catch (const NonFiniteError&) {
      // worst-cost sentinel: a weight factor of e^-10 effectively drops the
      // candidate while keeping the step well defined
      c.cost = cfg.alpha > 0.0 ? base_cost + 10.0 / cfg.alpha : base_cost + 1.0;
      hit_sentinel[k] = 1;
    }
    c.delta = std::move(delta);
  };

  unsigned hw = std::thread::hardware_concurrency();
  std::size_t workers = std::min<std::size_t>(cfg.k, hw == 0 ? 1 : hw);
  if (workers <= 1) {
    for (std::size_t k = 0; k < cfg.k; ++k) eval_candidate(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t k = next.fetch_add(1);
          if (k >= cfg.k) return;
          try {
            eval_candidate(k);
          } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!err) err = std::current_exception();
          }
        }
      });
    for (std::thread& t : pool) t.join();
    if (err) std::rethrow_exception(err);
  }

  std::vector<std::pair<double, double>> scored(cfg.k);
  double max_raw = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cfg.k; ++k) {
    scored[k] = {cands[k].cost, cands[k].log_q};
    max_raw = std::max(max_raw,
                       cfg.alpha * (base_cost - cands[k].cost) - cands[k].log_q);
  }
  std::vector<double> w = candidate_weights(base_cost, scored, cfg.alpha);
  for (std::size_t k = 0; k < cfg.k; ++k) cands[k].weight = w[k];

  std::vector<double> delta_mgs = combine(cands);
  std::vector<double> move(delta_mgs.size());
  for (std::size_t i = 0; i < move.size(); ++i)
    move[i] = cfg.step_size * delta_mgs[i];

  StepDiagnostics d;
  d.pooled_cost_before = base_cost;
  d.grad_norm = detail::l2(r.grad);
  d.candidate_count = cfg.k;
  d.weights = w;
  double mean_w = 1.0 / double(cfg.k), ss = 0.0;
  std::size_t best = 0;
  for (std::size_t k = 0; k < cfg.k; ++k) {
    ss += (w[k] - mean_w) * (w[k] - mean_w);
    if (w[k] > w[best]) best = k;
    if (cands[k].component == ProposalComponent::mle)
      d.mle_component_total_weight += w[k];
    d.sentinel_count += hit_sentinel[k];
  }
  d.weight_stddev = std::sqrt(ss / double(cfg.k));
  d.highest_weight_component = cands[best].component;
  d.underflow_flag = max_raw < -700.0;  // exp underflows below ~-745
  std::vector<double> var = snis_variance(cands, delta_mgs);
  for (double v : var) d.snis_variance_mean += v;
  d.snis_variance_mean /= double(var.size());

  ModelParams out = apply_perturbation(params, move);
  ++st.step;
  return {std::move(out), std::move(d)};
}

// One score-function step: K ancestral samples per example, costs centered
// by an exponential-moving-average baseline, a single backward pass over
// the weighted sum of sample log-probs.
inline std::pair<ModelParams, StepDiagnostics> pg_step(
    const ModelParams& params, const std::vector<Example>& batch,
    std::size_t eos_index, const TrainerConfig& cfg, const SeqCostFn& loss,
    TrainerState& st, std::uint64_t seed) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("pg_step: empty batch");
  std::size_t cap = cfg.decode_cap ? cfg.decode_cap : train_time_cap(batch);

  struct Sample {
    std::size_t example;
    DecodeOutput out;
    double cost;
  };
  std::vector<Sample> samples;
  samples.reserve(batch.size() * cfg.k);
  double mean_cost = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t k = 0; k < cfg.k; ++k) {
      NoiseStream noise{mix_key(mix_key(seed, st.step, i), k)};
      DecodeOutput out = decode_ancestral(params, batch[i].x, noise, cap,
                                          eos_index);
      double c = loss(out, batch[i]);
      mean_cost += c;
      samples.push_back({i, std::move(out), c});
    }
  mean_cost /= double(samples.size());

  if (!st.baseline_set) {
    st.baseline = mean_cost;
    st.baseline_set = true;
  }
  double b = st.baseline;
  st.baseline = cfg.ema_decay * st.baseline + (1.0 - cfg.ema_decay) * mean_cost;

  // (1/NK) sum (c - b) grad log p, built as one graph so a single backward
  // pass covers every sample
  std::vector<double> grad(params.param_count(), 0.0);
  {
    Graph g;
    GraphModel m = register_model(g, params);
    std::vector<Graph::NodeId> terms;
    for (const Sample& s : samples) {
      double wt = (s.cost - b) / double(samples.size());
      if (wt == 0.0) continue;
      std::vector<Graph::NodeId> picks;
      sequence_log_prob_graph(g, m, {batch[s.example].x, s.out.tokens},
                              eos_index, picks);
      terms.push_back(g.scale(g.add_n(picks), wt));
    }
    if (!terms.empty()) {
      g.backward(g.add_n(terms));
      grad = flatten_grads(params, g.param_grads());
    }
  }

  StepDiagnostics d;
  d.pooled_cost_before = mean_cost;
  d.baseline = b;
  d.grad_norm = detail::l2(grad);
  d.candidate_count = samples.size();
  ModelParams out = detail::descend(params, clip_gradient(grad, cfg.clip_norm),
                                    cfg.step_size, cfg.use_adam, st);
  ++st.step;
  return {std::move(out), std::move(d)};
}

// Candidate set for one example: K ancestral samples deduplicated by exact
// token equality, optionally joined by the greedy decode and the gold
// target (first occurrence wins, so duplicates of gold keep the sample's
// slot).
inline std::vector<DecodeOutput> build_mrt_candidates(
    const ModelParams& params, const Example& ex, std::size_t eos_index,
    const TrainerConfig& cfg, std::uint64_t seed, std::size_t step,
    std::size_t example_index, std::size_t cap) {
  std::vector<DecodeOutput> s;
  auto push_unique = [&](DecodeOutput o) {
    for (const DecodeOutput& have : s)
      if (have.tokens == o.tokens) return;
    s.push_back(std::move(o));
  };
  for (std::size_t k = 0; k < cfg.k; ++k) {
    NoiseStream noise{mix_key(mix_key(seed, step, example_index), k)};
    push_unique(decode_ancestral(params, ex.x, noise, cap, eos_index));
  }
  if (cfg.mrt_candidates == MrtCandidates::samples_greedy ||
      cfg.mrt_candidates == MrtCandidates::samples_greedy_gold)
    push_unique(decode_greedy(params, ex.x, cap, eos_index));
  if (cfg.mrt_candidates == MrtCandidates::samples_gold ||
      cfg.mrt_candidates == MrtCandidates::samples_greedy_gold)
    push_unique({ex.y, true, {}});
  return s;
}

struct MrtObjective {
  double risk = 0.0;
  std::vector<double> grad;  // flat canonical order
};

// Expected loss under the renormalized candidate distribution
//   q(Y) = p(Y|X)^alpha / sum_S p(Y'|X)^alpha,
// differentiated through the renormalization (q moves with theta; the
// costs are constants).
inline MrtObjective mrt_objective_gradient(const ModelParams& params,
                                           const Example& ex,
                                           const std::vector<DecodeOutput>& s,
                                           const std::vector<double>& costs,
                                           double alpha,
                                           std::size_t eos_index) {
  if (s.size() < 2)
    throw std::invalid_argument("mrt: need at least two distinct candidates");
  if (costs.size() != s.size())
    throw std::invalid_argument("mrt: one cost per candidate");
  Graph g;
  GraphModel m = register_model(g, params);
  std::vector<Graph::NodeId> seq_lps;
  seq_lps.reserve(s.size());
  for (const DecodeOutput& cand : s) {
    std::vector<Graph::NodeId> picks;
    sequence_log_prob_graph(g, m, {ex.x, cand.tokens}, eos_index, picks);
    seq_lps.push_back(g.add_n(picks));
  }
  Graph::NodeId q = g.exp(g.log_softmax(g.scale(g.stack(seq_lps), alpha)));
  Graph::NodeId risk =
      g.sum(g.mul(q, g.constant(Tensor({1, s.size()}, costs))));
  g.backward(risk);
  return {g.value(risk).data[0], flatten_grads(params, g.param_grads())};
}

// One minimum-risk step: per-example candidate sets, risk averaged over the
// batch, descent on the clipped risk gradient.
inline std::pair<ModelParams, StepDiagnostics> mrt_step(
    const ModelParams& params, const std::vector<Example>& batch,
    std::size_t eos_index, const TrainerConfig& cfg, const SeqCostFn& loss,
    TrainerState& st, std::uint64_t seed) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("mrt_step: empty batch");
  std::size_t cap = cfg.decode_cap ? cfg.decode_cap : train_time_cap(batch);

  std::vector<double> grad(params.param_count(), 0.0);
  StepDiagnostics d;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::vector<DecodeOutput> s = build_mrt_candidates(
        params, batch[i], eos_index, cfg, seed, st.step, i, cap);
    if (s.size() < 2)
      throw std::runtime_error(
          "mrt_step: candidate set collapsed to one sequence");
    std::vector<double> costs(s.size());
    for (std::size_t j = 0; j < s.size(); ++j) costs[j] = loss(s[j], batch[i]);
    MrtObjective obj =
        mrt_objective_gradient(params, batch[i], s, costs, cfg.alpha,
                               eos_index);
    d.pooled_cost_before += obj.risk / double(batch.size());
    d.candidate_count += s.size();
    for (std::size_t j = 0; j < grad.size(); ++j)
      grad[j] += obj.grad[j] / double(batch.size());
  }

  d.grad_norm = detail::l2(grad);
  ModelParams out = detail::descend(params, clip_gradient(grad, cfg.clip_norm),
                                    cfg.step_size, cfg.use_adam, st);
  ++st.step;
  return {std::move(out), std::move(d)};
}

// Bernoulli gate in front of the configured sequence-level step: z = 1 with
// probability mix_rate runs it, z = 0 falls back to an MLE step at the MLE
// step size. Pure-MLE configs always take the MLE branch.
inline std::pair<ModelParams, StepDiagnostics> mixed_step(
    const ModelParams& params, const std::vector<Example>& batch,
    std::size_t eos_index, const TrainerConfig& cfg, const SeqCostFn& loss,
    const DecodeFn& decoder, TrainerState& st, std::uint64_t seed) {
  cfg.validate();
  double u = CounterRng(mix_key(seed, stream_tag::mix, st.step)).uniform();
  bool sequence_branch =
      cfg.algorithm != Algorithm::mle && u < cfg.mix_rate;
  if (!sequence_branch) {
    TrainerConfig mle_cfg = cfg;
    if (cfg.algorithm != Algorithm::mle)
      mle_cfg.step_size = cfg.mle_mix_step_size;
    auto [p2, d] = mle_step(params, batch, eos_index, mle_cfg, st);
    d.took_mle_branch = true;
    return {std::move(p2), std::move(d)};
  }
  switch (cfg.algorithm) {
    case Algorithm::mgs:
      return mgs_step(params, batch, eos_index, cfg, loss, decoder, st, seed);
    case Algorithm::pg:
      return pg_step(params, batch, eos_index, cfg, loss, st, seed);
    case Algorithm::mrt:
      return mrt_step(params, batch, eos_index, cfg, loss, st, seed);
    case Algorithm::mle:
      break;
  }
  throw std::logic_error("mixed_step: unreachable");
}

}  // namespace seqlab
