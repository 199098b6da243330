#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "seqlab/checkpoint.hpp"
#include "seqlab/config.hpp"
#include "seqlab/data.hpp"
#include "seqlab/decode.hpp"
#include "seqlab/losses.hpp"
#include "seqlab/model.hpp"
#include "seqlab/rng.hpp"
#include "seqlab/trainers.hpp"

namespace seqlab {

enum class DecoderKind { greedy, ancestral, beam };

inline DecoderKind parse_decoder_kind(const std::string& name) {
  if (name == "greedy") return DecoderKind::greedy;
  if (name == "ancestral") return DecoderKind::ancestral;
  if (name == "beam") return DecoderKind::beam;
  throw std::invalid_argument("unknown decoder: " + name);
}

inline DecodeOutput run_decoder(const ModelParams& p, const TokenSeq& x,
                                DecoderKind kind, std::size_t width,
                                std::size_t max_len, std::size_t eos_index,
                                std::uint64_t stream_seed) {
  switch (kind) {
    case DecoderKind::greedy:
      return decode_greedy(p, x, max_len, eos_index);
    case DecoderKind::ancestral: {
      NoiseStream noise{stream_seed};
      return decode_ancestral(p, x, noise, max_len, eos_index);
    }
    case DecoderKind::beam:
      return decode_beam(p, x, width, max_len, eos_index);
  }
  throw std::logic_error("run_decoder: unreachable");
}

// Dataset-level evaluation summary. avg_len counts content tokens, so a
// model that terminates immediately scores 0 even though its output holds
// the eos token.
struct EvalMetrics {
  double task_loss = 0.0;
  double perplexity = 0.0;
  double nonterm_rate = 0.0;
  double repetition_rate = 0.0;
  double avg_len = 0.0;
};

// Decodes every example and averages the sequence-level metrics; perplexity
// is teacher-forced on the references and independent of the decoder. The
// ancestral noise stream is re-seeded per example from (seed, index), so
// the result is a pure function of the dataset and seed; how evaluation is
// chunked cannot change it.
inline EvalMetrics run_eval(const ModelParams& params,
                            const std::vector<Example>& data,
                            const SeqCostFn& loss, DecoderKind kind,
                            std::size_t width, std::size_t max_len,
                            std::size_t eos_index, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("run_eval: empty dataset");
  EvalMetrics m;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Example& ex = data[i];
    DecodeOutput out = run_decoder(params, ex.x, kind, width, max_len,
                                   eos_index, mix_key(seed, i));
    m.task_loss += loss(out, ex);
    m.nonterm_rate += out.terminated ? 0.0 : 1.0;
    m.repetition_rate += repetition(out.tokens, eos_index);
    m.avg_len += double(out.tokens.size() - (out.terminated ? 1 : 0));
  }
  double n = double(data.size());
  m.task_loss /= n;
  m.nonterm_rate /= n;
  m.repetition_rate /= n;
  m.avg_len /= n;
  m.perplexity = perplexity(params, data, eos_index);
  return m;
}

inline Algorithm parse_algorithm(const std::string& name) {
  if (name == "mle") return Algorithm::mle;
  if (name == "mgs") return Algorithm::mgs;
  if (name == "pg") return Algorithm::pg;
  if (name == "mrt") return Algorithm::mrt;
  throw std::invalid_argument("unknown algorithm: " + name);
}

inline LossKind parse_loss_kind(const std::string& name) {
  if (name == "lm") return LossKind::lm;
  if (name == "edit") return LossKind::edit;
  if (name == "sbleu") return LossKind::sbleu;
  throw std::invalid_argument("unknown loss: " + name);
}

inline NoiseMode parse_noise_mode(const std::string& name) {
  if (name == "global") return NoiseMode::global;
  if (name == "per_tensor") return NoiseMode::per_tensor;
  throw std::invalid_argument("unknown noise_mode: " + name);
}

inline MrtCandidates parse_mrt_candidates(const std::string& name) {
  if (name == "samples") return MrtCandidates::samples;
  if (name == "samples_greedy") return MrtCandidates::samples_greedy;
  if (name == "samples_gold") return MrtCandidates::samples_gold;
  if (name == "samples_greedy_gold") return MrtCandidates::samples_greedy_gold;
  throw std::invalid_argument("unknown mrt_candidates: " + name);
}

inline ProposalAblation parse_proposal_ablation(const std::string& name) {
  if (name == "mgs") return ProposalAblation::mgs;
  if (name == "zero_only") return ProposalAblation::zero_only;
  if (name == "mle_only") return ProposalAblation::mle_only;
  throw std::invalid_argument("unknown proposal_ablation: " + name);
}

// Everything a training run needs beyond the dataset bytes. Defaults are
// deliberately small; reference configs override what matters.
struct TrainOptions {
  std::string data_dir;
  TrainerConfig trainer;
  LossKind loss_kind = LossKind::edit;
  std::string scorer_ckpt;  // frozen scorer for loss=lm
  std::string init_ckpt;    // warm start; empty trains from scratch
  std::size_t emb = 16;
  std::size_t hidden = 32;
  std::size_t batch_size = 16;
  std::size_t max_steps = 2000;
  std::size_t eval_interval = 100;
  std::size_t patience = 10;
  std::size_t eval_max_len = 100;
  std::uint64_t seed = 1;  // a train-command seed flag overrides this
};

// Reads every recognized key and then rejects the rest, so a typo in a
// sweep grid fails loudly instead of silently training the default.
inline TrainOptions parse_train_options(const Config& cfg) {
  TrainOptions o;
  o.data_dir = cfg.require_string("data_dir");

  o.trainer = TrainerConfig::defaults(
      parse_algorithm(cfg.get_string("algorithm", "mle")));
  TrainerConfig& t = o.trainer;
  t.k = cfg.get_size("k", t.k);
  t.alpha = cfg.get_double("alpha", t.alpha);
  t.pi = cfg.get_double("pi", t.pi);
  t.noise_mode = parse_noise_mode(cfg.get_string("noise_mode", "global"));
  t.noise_mult = cfg.get_double("noise_mult", t.noise_mult);
  t.mix_rate = cfg.get_double("mix_rate", t.mix_rate);
  t.mrt_candidates =
      parse_mrt_candidates(cfg.get_string("mrt_candidates", "samples"));
  t.ema_decay = cfg.get_double("ema_decay", t.ema_decay);
  t.step_size = cfg.get_double("step_size", t.step_size);
  t.mle_mix_step_size =
      cfg.get_double("mle_mix_step_size", t.mle_mix_step_size);
  t.clip_norm = cfg.get_double("clip_norm", t.clip_norm);
  t.proposal_ablation =
      parse_proposal_ablation(cfg.get_string("proposal_ablation", "mgs"));
  t.use_adam = cfg.get_bool("use_adam", t.use_adam);
  t.decode_cap = cfg.get_size("decode_cap", t.decode_cap);
  t.validate();

  o.loss_kind = parse_loss_kind(cfg.get_string("loss", "edit"));
  o.scorer_ckpt = cfg.get_string("scorer_ckpt", "");
  if (o.loss_kind == LossKind::lm && o.scorer_ckpt.empty())
    throw std::runtime_error("config: loss=lm requires scorer_ckpt");
  o.init_ckpt = cfg.get_string("init_ckpt", "");
  o.emb = cfg.get_size("emb", o.emb);
  o.hidden = cfg.get_size("hidden", o.hidden);
  o.batch_size = cfg.get_size("batch_size", o.batch_size);
  o.max_steps = cfg.get_size("max_steps", o.max_steps);
  o.eval_interval = cfg.get_size("eval_interval", o.eval_interval);
  o.patience = cfg.get_size("patience", o.patience);
  o.eval_max_len = cfg.get_size("eval_max_len", o.eval_max_len);
  o.seed = cfg.get_size("seed", o.seed);
  if (o.emb < 1 || o.hidden < 1)
    throw std::runtime_error("config: emb and hidden must be >= 1");
  if (o.batch_size < 1 || o.max_steps < 1)
    throw std::runtime_error("config: batch_size and max_steps must be >= 1");
  if (o.eval_interval < 1 || o.patience < 1 || o.eval_max_len < 1)
    throw std::runtime_error(
        "config: eval_interval, patience and eval_max_len must be >= 1");

  cfg.reject_unknown_keys();
  return o;
}

// Cross-step run memory: the trainer state plus early-stopping bookkeeping.
// Persisted next to the checkpoints so an interrupted run can resume and
// reproduce the uninterrupted run bit for bit.
struct RunState {
  TrainerState trainer;
  double best_metric = std::numeric_limits<double>::infinity();
  EvalMetrics best_valid;
  std::size_t evals_done = 0;
  std::size_t evals_since_best = 0;
  bool stopped_early = false;
};

namespace detail {
constexpr char kRunStateMagic[] = "SEQLABST";
constexpr std::uint32_t kRunStateVersion = 1;
}  // namespace detail

inline std::string serialize_run_state(const RunState& rs) {
  if (rs.trainer.adam_m.size() != rs.trainer.adam_v.size())
    throw std::invalid_argument("run state: adam moment size mismatch");
  std::string out;
  out.append(detail::kRunStateMagic, 8);
  detail::put_u32(out, detail::kRunStateVersion);
  detail::put_u64(out, rs.trainer.step);
  detail::put_f64(out, rs.trainer.baseline);
  detail::put_u32(out, rs.trainer.baseline_set ? 1 : 0);
  detail::put_u64(out, rs.trainer.adam_t);
  detail::put_u64(out, rs.trainer.adam_m.size());
  for (double d : rs.trainer.adam_m) detail::put_f64(out, d);
  for (double d : rs.trainer.adam_v) detail::put_f64(out, d);
  detail::put_f64(out, rs.best_metric);
  detail::put_f64(out, rs.best_valid.task_loss);
  detail::put_f64(out, rs.best_valid.perplexity);
  detail::put_f64(out, rs.best_valid.nonterm_rate);
  detail::put_f64(out, rs.best_valid.repetition_rate);
  detail::put_f64(out, rs.best_valid.avg_len);
  detail::put_u64(out, rs.evals_done);
  detail::put_u64(out, rs.evals_since_best);
  detail::put_u32(out, rs.stopped_early ? 1 : 0);
  return out;
}

inline RunState deserialize_run_state(const std::string& buf,
                                      const std::string& what) {
  detail::ByteReader r(buf, what);
  if (r.bytes(8) != std::string(detail::kRunStateMagic, 8))
    throw std::runtime_error(what + ": not a run-state file");
  std::uint32_t version = r.u32();
  if (version != detail::kRunStateVersion)
    throw std::runtime_error(what + ": unsupported run-state version " +
                             std::to_string(version));
  RunState rs;
  rs.trainer.step = r.u64();
  rs.trainer.baseline = r.f64();
  rs.trainer.baseline_set = r.u32() != 0;
  rs.trainer.adam_t = r.u64();
  std::size_t n = r.u64();
  rs.trainer.adam_m.resize(n);
  for (double& d : rs.trainer.adam_m) d = r.f64();
  rs.trainer.adam_v.resize(n);
  for (double& d : rs.trainer.adam_v) d = r.f64();
  rs.best_metric = r.f64();
  rs.best_valid.task_loss = r.f64();
  rs.best_valid.perplexity = r.f64();
  rs.best_valid.nonterm_rate = r.f64();
  rs.best_valid.repetition_rate = r.f64();
  rs.best_valid.avg_len = r.f64();
  rs.evals_done = r.u64();
  rs.evals_since_best = r.u64();
  rs.stopped_early = r.u32() != 0;
  if (!r.exhausted())
    throw std::runtime_error(what + ": trailing bytes after run state");
  return rs;
}

inline void save_run_state(const RunState& rs, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write run state: " + path);
  std::string buf = serialize_run_state(rs);
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

inline RunState load_run_state(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read run state: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  return deserialize_run_state(buf, path);
}

namespace detail {

// The per-step weights vector is dropped from the metrics stream: it is
// K numbers per step and the summary fields already cover it.
inline nlohmann::ordered_json diagnostics_json(const StepDiagnostics& d) {
  nlohmann::ordered_json j;
  j["grad_norm"] = d.grad_norm;
  j["took_mle_branch"] = d.took_mle_branch;
  j["candidate_count"] = d.candidate_count;
  j["baseline"] = d.baseline;
  j["weight_stddev"] = d.weight_stddev;
  j["mle_component_total_weight"] = d.mle_component_total_weight;
  j["highest_weight_component"] =
      d.highest_weight_component == ProposalComponent::mle ? "mle" : "zero";
  j["underflow_flag"] = d.underflow_flag;
  j["sentinel_count"] = d.sentinel_count;
  j["snis_variance_mean"] = d.snis_variance_mean;
  return j;
}

inline nlohmann::ordered_json eval_json(std::size_t step,
                                        const std::string& split,
                                        const EvalMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["split"] = split;
  j["task_loss"] = m.task_loss;
  j["perplexity"] = m.perplexity;
  j["nonterm_rate"] = m.nonterm_rate;
  j["repetition_rate"] = m.repetition_rate;
  j["avg_len"] = m.avg_len;
  return j;
}

}  // namespace detail

inline TaskLoss build_task_loss(LossKind kind, const std::string& scorer_ckpt,
                                const Vocabulary& vocab) {
  switch (kind) {
    case LossKind::edit:
      return TaskLoss::edit(vocab.eos_index);
    case LossKind::sbleu:
      return TaskLoss::sbleu(vocab.eos_index);
    case LossKind::lm: {
      Checkpoint ck = load_checkpoint(scorer_ckpt);
      if (ck.vocab.tokens != vocab.tokens)
        throw std::runtime_error(
            "scorer checkpoint vocabulary does not match the dataset");
      return TaskLoss::lm(std::make_shared<ModelParams>(std::move(ck.params)),
                          vocab.eos_index);
    }
  }
  throw std::logic_error("build_task_loss: unreachable");
}

struct TrainResult {
  ModelParams best_params;
  ModelParams last_params;
  EvalMetrics best_valid;
  double best_metric = std::numeric_limits<double>::infinity();
  std::size_t steps_done = 0;
  bool stopped_early = false;
};

// Runs one training job into out_dir: metrics.jsonl (one JSON object per
// line), best.ckpt / last.ckpt, and state.bin for resumption. Everything
// random is keyed from (seed, step), never from call order, so a resumed
// run continues the exact stream the uninterrupted run would have used.
// Selection: lowest validation task loss for the sequence-level trainers,
// lowest validation perplexity for MLE. Early stop after `patience`
// evaluations without a new best.
inline TrainResult run_training(
    const Config& cfg, const std::string& out_dir, bool resume = false,
    std::optional<std::uint64_t> seed_override = std::nullopt) {
  TrainOptions o = parse_train_options(cfg);
  const std::uint64_t seed = seed_override.value_or(o.seed);
  std::filesystem::create_directories(out_dir);

  Vocabulary vocab = load_vocab(o.data_dir + "/vocab.txt");
  std::vector<Example> train_set =
      load_examples(o.data_dir + "/train.tsv", vocab);
  std::vector<Example> valid_set =
      load_examples(o.data_dir + "/valid.tsv", vocab);
  if (train_set.empty() || valid_set.empty())
    throw std::runtime_error("empty train or valid split in " + o.data_dir);
  const std::size_t eos = vocab.eos_index;

  SeqCostFn cost = build_task_loss(o.loss_kind, o.scorer_ckpt, vocab);

  const std::string best_path = out_dir + "/best.ckpt";
  const std::string last_path = out_dir + "/last.ckpt";
  const std::string state_path = out_dir + "/state.bin";
  const std::string metrics_path = out_dir + "/metrics.jsonl";

  ModelParams params;
  RunState rs;
  if (resume) {
    Checkpoint ck = load_checkpoint(last_path);
    if (ck.vocab.tokens != vocab.tokens)
      throw std::runtime_error(
          "resume: checkpoint vocabulary does not match " + o.data_dir);
    params = std::move(ck.params);
    rs = load_run_state(state_path);
  } else if (!o.init_ckpt.empty()) {
    Checkpoint ck = load_checkpoint(o.init_ckpt);
    if (ck.vocab.tokens != vocab.tokens)
      throw std::runtime_error(
          "init_ckpt vocabulary does not match " + o.data_dir);
    params = std::move(ck.params);
  } else {
    params = ModelParams::init(vocab.size(), o.emb, o.hidden, seed);
  }

  std::ofstream metrics(metrics_path,
                        resume ? std::ios::binary | std::ios::app
                               : std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path);

  // Checkpoints and state always land together, right after the metrics
  // lines they correspond to, so state.bin never points past the stream.
  auto persist = [&]() {
    save_checkpoint({seed, vocab, params}, last_path);
    metrics.flush();
    save_run_state(rs, state_path);
  };

  auto evaluate = [&]() {
    EvalMetrics em = run_eval(params, valid_set, cost, DecoderKind::greedy, 1,
                              o.eval_max_len, eos, seed);
    metrics << detail::eval_json(rs.trainer.step, "valid", em).dump() << '\n';
    ++rs.evals_done;
    double metric = o.trainer.algorithm == Algorithm::mle ? em.perplexity
                                                          : em.task_loss;
    // the first eval always sets a best so best.ckpt exists even when the
    // metric is non-finite (an untrained model can overflow perplexity)
    if (rs.evals_done == 1 || metric < rs.best_metric) {
      rs.best_metric = metric;
      rs.best_valid = em;
      rs.evals_since_best = 0;
      save_checkpoint({seed, vocab, params}, best_path);
    } else if (++rs.evals_since_best >= o.patience) {
      rs.stopped_early = true;
    }
    persist();
  };

  bool did_work = false;
  while (rs.trainer.step < o.max_steps && !rs.stopped_early) {
    did_work = true;
    const std::size_t t = rs.trainer.step;

    CounterRng batch_rng(mix_key(seed, stream_tag::batch, t));
    std::vector<std::size_t> picks = sample_indices(
        train_set.size(), std::min(o.batch_size, train_set.size()),
        batch_rng);
    std::vector<Example> batch;
    batch.reserve(picks.size());
    for (std::size_t i : picks) batch.push_back(train_set[i]);

    const std::size_t cap =
        o.trainer.decode_cap ? o.trainer.decode_cap : train_time_cap(batch);
    DecodeFn decoder = [cap, eos](const ModelParams& p, const TokenSeq& x) {
      return decode_greedy(p, x, cap, eos);
    };

    auto [next, diag] =
        mixed_step(params, batch, eos, o.trainer, cost, decoder, rs.trainer,
                   seed);
    params = std::move(next);

    nlohmann::ordered_json j;
    j["step"] = t;
    j["split"] = "train";
    j["task_loss"] = diag.pooled_cost_before;
    j["diagnostics"] = detail::diagnostics_json(diag);
    metrics << j.dump() << '\n';

    if (rs.trainer.step % o.eval_interval == 0) evaluate();
  }

  // A run that ends between evaluation boundaries still gets a final eval,
  // and every run produces a best checkpoint even if it never reached the
  // first boundary. A no-op resume re-persists identical bytes only.
  if (did_work && !rs.stopped_early && rs.trainer.step % o.eval_interval != 0)
    evaluate();
  if (rs.evals_done == 0) evaluate();
  persist();

  TrainResult result;
  result.last_params = std::move(params);
  result.best_metric = rs.best_metric;
  result.best_valid = rs.best_valid;
  result.steps_done = rs.trainer.step;
  result.stopped_early = rs.stopped_early;
  result.best_params = load_checkpoint(best_path).params;
  return result;
}

struct SweepRun {
  std::string dir;
  std::map<std::string, std::string> overrides;
  bool ok = false;
  double best_metric = std::numeric_limits<double>::infinity();
  std::string error;  // empty when ok
};

// Grid file: same key=value syntax as a config, values comma-separated.
// The product is enumerated in key order, innermost axis last.
inline std::vector<std::map<std::string, std::string>> grid_combinations(
    const Config& grid) {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& [key, joined] : grid.entries()) {
    std::vector<std::string> values;
    std::stringstream ss(joined);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail::trim(item);
      if (!item.empty()) values.push_back(item);
    }
    if (values.empty())
      throw std::runtime_error("sweep grid: key '" + key + "' has no values");
    axes.emplace_back(key, std::move(values));
  }
  if (axes.empty()) throw std::runtime_error("sweep grid: no axes");

  std::vector<std::map<std::string, std::string>> combos(1);
  for (const auto& [key, values] : axes) {
    std::vector<std::map<std::string, std::string>> next;
    next.reserve(combos.size() * values.size());
    for (const auto& combo : combos)
      for (const std::string& v : values) {
        next.push_back(combo);
        next.back()[key] = v;
      }
    combos = std::move(next);
  }
  return combos;
}

// Runs the full grid sequentially, one subdirectory per combination, and
// writes index.jsonl mapping directories to overrides and outcomes. A
// failing combination is recorded and does not stop the sweep.
inline std::vector<SweepRun> run_sweep(const Config& base, const Config& grid,
                                       const std::string& out_dir) {
  std::vector<std::map<std::string, std::string>> combos =
      grid_combinations(grid);
  std::filesystem::create_directories(out_dir);
  std::ofstream index(out_dir + "/index.jsonl",
                      std::ios::binary | std::ios::trunc);
  if (!index) throw std::runtime_error("cannot write " + out_dir +
                                       "/index.jsonl");

  std::vector<SweepRun> runs;
  runs.reserve(combos.size());
  for (std::size_t i = 0; i < combos.size(); ++i) {
    SweepRun run;
    run.overrides = combos[i];
    std::ostringstream name;
    name << "run_" << std::setw(3) << std::setfill('0') << i;
    run.dir = out_dir + "/" + name.str();
    std::filesystem::create_directories(run.dir);

    Config merged = base;
    for (const auto& [k, v] : combos[i]) merged.set(k, v);
    {
      std::ofstream cf(run.dir + "/config.cfg",
                       std::ios::binary | std::ios::trunc);
      if (!cf) throw std::runtime_error("cannot write " + run.dir +
                                        "/config.cfg");
      for (const auto& [k, v] : merged.entries()) cf << k << " = " << v << '\n';
    }

    try {
      TrainResult res = run_training(merged, run.dir);
      run.ok = true;
      run.best_metric = res.best_metric;
    } catch (const std::exception& e) {
      run.ok = false;
      run.error = e.what();
    }

    nlohmann::ordered_json j;
    j["run"] = i;
    j["dir"] = name.str();
    j["overrides"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : run.overrides) j["overrides"][k] = v;
    j["ok"] = run.ok;
    if (run.ok)
      j["best_metric"] = run.best_metric;
    else
      j["error"] = run.error;
    index << j.dump() << '\n';
    index.flush();

    runs.push_back(std::move(run));
  }
  return runs;
}

}  // namespace seqlab
