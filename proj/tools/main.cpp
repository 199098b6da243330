// Command-line driver: dataset generation, training, evaluation, oracle
// verification, and grid sweeps. Every subcommand funnels its randomness
// through a seed, so any invocation repeated with the same arguments
// produces byte-identical output files.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqlab/data.hpp"
#include "seqlab/harness.hpp"
#include "seqlab/verify.hpp"

namespace {

int cmd_gen_data(const std::string& task, std::size_t n_train,
                 std::size_t n_valid, std::size_t n_test, std::uint64_t seed,
                 const std::string& out_dir) {
  seqlab::Dataset ds =
      seqlab::gen_task(seqlab::parse_task(task), n_train, n_valid, n_test,
                       seed);
  seqlab::save_dataset(ds, out_dir);
  std::cout << "wrote " << ds.train.size() << "/" << ds.valid.size() << "/"
            << ds.test.size() << " train/valid/test examples to " << out_dir
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path,
              std::optional<std::uint64_t> seed, const std::string& out_dir,
              bool resume) {
  seqlab::Config cfg = seqlab::Config::parse_file(config_path);
  seqlab::TrainResult r = seqlab::run_training(cfg, out_dir, resume, seed);
  nlohmann::ordered_json line;
  line["steps"] = r.steps_done;
  line["best_metric"] = r.best_metric;
  line["stopped_early"] = r.stopped_early;
  line["out"] = out_dir;
  std::cout << line.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& decoder, std::size_t width,
             std::size_t max_len, std::uint64_t seed, const std::string& loss,
             const std::string& scorer_path) {
  seqlab::LossKind kind = seqlab::parse_loss_kind(loss);
  if (kind == seqlab::LossKind::lm && scorer_path.empty())
    throw std::runtime_error("eval: loss=lm requires --scorer");

  seqlab::Checkpoint ck = seqlab::load_checkpoint(ckpt_path);
  std::vector<seqlab::Example> data =
      seqlab::load_examples(data_path, ck.vocab);
  seqlab::TaskLoss cost = seqlab::build_task_loss(kind, scorer_path, ck.vocab);
  seqlab::EvalMetrics m = seqlab::run_eval(
      ck.params, data, cost, seqlab::parse_decoder_kind(decoder), width,
      max_len, ck.vocab.eos_index, seed);

  nlohmann::ordered_json line;
  line["task_loss"] = m.task_loss;
  line["perplexity"] = m.perplexity;
  line["nonterm_rate"] = m.nonterm_rate;
  line["repetition_rate"] = m.repetition_rate;
  line["avg_len"] = m.avg_len;
  std::cout << line.dump() << "\n";
  return 0;
}

int cmd_verify(const std::string& suite) {
  bool all_passed = true;
  for (const seqlab::CheckResult& r : seqlab::run_verify(suite)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail
              << "\n";
    all_passed = all_passed && r.passed;
  }
  return all_passed ? 0 : 1;
}

int cmd_sweep(const std::string& config_path, const std::string& grid_path,
              const std::string& out_dir) {
  seqlab::Config base = seqlab::Config::parse_file(config_path);
  seqlab::Config grid = seqlab::Config::parse_file(grid_path);
  std::vector<seqlab::SweepRun> runs =
      seqlab::run_sweep(base, grid, out_dir);
  std::size_t ok = 0;
  for (const seqlab::SweepRun& r : runs) {
    if (r.ok) {
      ++ok;
      std::cout << r.dir << " best_metric=" << r.best_metric << "\n";
    } else {
      std::cout << r.dir << " failed: " << r.error << "\n";
    }
  }
  std::cout << ok << "/" << runs.size() << " runs succeeded\n";
  return ok == runs.size() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sequence-level task-loss laboratory"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_task_name, gen_out;
  std::size_t gen_train = 512, gen_valid = 64, gen_test = 64;
  std::uint64_t gen_seed = 1;
  gen->add_option("--task", gen_task_name, "copy, reverse, trap, or toy_mt")
      ->required();
  gen->add_option("--train", gen_train, "training examples")
      ->capture_default_str();
  gen->add_option("--valid", gen_valid, "validation examples")
      ->capture_default_str();
  gen->add_option("--test", gen_test, "test examples")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generation seed")
      ->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model from a config");
  std::string train_config, train_out;
  std::uint64_t train_seed = 0;
  bool train_resume = false;
  train->add_option("--config", train_config, "key=value config file")
      ->required();
  CLI::Option* train_seed_opt =
      train->add_option("--seed", train_seed, "overrides the config's seed");
  train->add_option("--out", train_out, "run directory")->required();
  train->add_flag("--resume", train_resume,
                  "continue from the run directory's last checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a file");
  std::string eval_ckpt, eval_data, eval_decoder = "greedy",
              eval_loss = "edit", eval_scorer;
  std::size_t eval_width = 4, eval_max_len = 100;
  std::uint64_t eval_seed = 1;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "examples file (tab-separated)")
      ->required();
  eval->add_option("--decoder", eval_decoder, "greedy, ancestral, or beam")
      ->capture_default_str();
  eval->add_option("--width", eval_width, "beam width")->capture_default_str();
  eval->add_option("--max-len", eval_max_len, "decode length cap")
      ->capture_default_str();
  eval->add_option("--seed", eval_seed, "ancestral sampling seed")
      ->capture_default_str();
  eval->add_option("--loss", eval_loss, "edit, sbleu, or lm")
      ->capture_default_str();
  eval->add_option("--scorer", eval_scorer,
                   "frozen scorer checkpoint (loss=lm only)");

  auto* verify = app.add_subcommand("verify", "run oracle suites");
  std::string verify_suite = "all";
  verify->add_option("--suite", verify_suite, "grad, snis, pg, mrt, or all")
      ->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "cartesian grid of training runs");
  std::string sweep_config, sweep_grid, sweep_out;
  sweep->add_option("--config", sweep_config, "base config file")->required();
  sweep->add_option("--grid", sweep_grid,
                    "grid file (config syntax, comma-separated values)")
      ->required();
  sweep->add_option("--out", sweep_out, "sweep directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_task_name, gen_train, gen_valid, gen_test,
                          gen_seed, gen_out);
    if (train->parsed()) {
      std::optional<std::uint64_t> seed;
      if (train_seed_opt->count() > 0) seed = train_seed;
      return cmd_train(train_config, seed, train_out, train_resume);
    }
    if (eval->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_decoder, eval_width,
                      eval_max_len, eval_seed, eval_loss, eval_scorer);
    if (verify->parsed()) return cmd_verify(verify_suite);
    if (sweep->parsed()) return cmd_sweep(sweep_config, sweep_grid, sweep_out);
  } catch (const std::exception& e) {
    std::cerr << "seqlab: " << e.what() << "\n";
    return 1;
  }
  return 1;  // unreachable while require_subcommand holds
}
