#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqlab/rng.hpp"
#include "seqlab/vocab.hpp"

namespace seqlab {

enum class Task { copy, reverse, trap, toy_mt };

inline Task parse_task(const std::string& name) {
  if (name == "copy") return Task::copy;
  if (name == "reverse") return Task::reverse;
  if (name == "trap") return Task::trap;
  if (name == "toy_mt") return Task::toy_mt;
  throw std::invalid_argument("unknown task: " + name);
}

inline const char* task_name(Task t) {
  switch (t) {
    case Task::copy: return "copy";
    case Task::reverse: return "reverse";
    case Task::trap: return "trap";
    case Task::toy_mt: return "toy_mt";
  }
  throw std::logic_error("task_name: bad task");
}

struct Dataset {
  Task task = Task::copy;
  Vocabulary vocab;
  std::vector<Example> train, valid, test;
};

// copy/reverse/trap share an 8-symbol alphabet; toy_mt splits source and
// target halves so the substitution is visible in the token names.
inline Vocabulary task_vocab(Task t) {
  std::vector<std::string> toks;
  if (t == Task::toy_mt) {
    for (int i = 0; i < 6; ++i) toks.push_back("s" + std::to_string(i));
    for (int i = 0; i < 6; ++i) toks.push_back("u" + std::to_string(i));
  } else {
    for (int i = 0; i < 8; ++i) toks.push_back("t" + std::to_string(i));
  }
  return Vocabulary::with_specials(toks);
}

namespace detail {

// Trap grammar over states 0..7 (token id = state + 2). From state i the
// chain moves to i+1 with probability .55, i+3 with .10, i+5 with .05, or
// ends with .30. The cycle successor is always the argmax yet holds just
// over half the mass, so a model that fits this distribution decodes
// greedily into an endless +1 walk while typical data sequences stop
// quickly. The .25 argmax-vs-end margin is wide enough that fitting noise
// cannot flip it, so the greedy trap fires for any converged model.
struct TrapStep {
  std::size_t state = 0;
  bool ended = false;
};

inline TrapStep trap_step(std::size_t state, CounterRng& rng,
                          bool allow_end) {
  double u = rng.uniform();
  if (!allow_end) u *= 0.70;  // renormalize over the three moves
  if (u < 0.55) return {(state + 1) % 8, false};
  if (u < 0.65) return {(state + 3) % 8, false};
  if (u < 0.70) return {(state + 5) % 8, false};
  return {state, true};
}

inline Example draw_example(Task task, const Vocabulary& vocab,
                            CounterRng& rng) {
  const std::size_t base = 2;  // first content token id
  Example ex;
  switch (task) {
    case Task::copy:
    case Task::reverse: {
      std::size_t len = 3 + rng.index(6);
      for (std::size_t i = 0; i < len; ++i)
        ex.x.push_back(base + rng.index(8));
      ex.y = ex.x;
      if (task == Task::reverse) std::reverse(ex.y.begin(), ex.y.end());
      break;
    }
    case Task::trap: {
      std::size_t state = rng.index(8);
      ex.x.push_back(base + state);
      for (int i = 0; i < 2; ++i) {
        state = trap_step(state, rng, false).state;
        ex.x.push_back(base + state);
      }
      // The first target step cannot end: references always carry at least
      // one content token, so length-normalized losses stay well defined.
      for (std::size_t n = 0; n < 16; ++n) {
        TrapStep s = trap_step(state, rng, n > 0);
        if (s.ended) break;
        state = s.state;
        ex.y.push_back(base + state);
      }
      break;
    }
    case Task::toy_mt: {
      std::size_t len = 3 + rng.index(5);
      for (std::size_t i = 0; i < len; ++i)
        ex.x.push_back(base + rng.index(6));
      ex.y = ex.x;
      for (std::size_t& t : ex.y) t += 6;  // s_i -> u_i
      for (std::size_t i = 0; i + 1 < ex.y.size(); i += 2)
        std::swap(ex.y[i], ex.y[i + 1]);  // local reordering
      break;
    }
  }
  ex.y.push_back(vocab.eos_index);
  validate_example(ex, vocab);
  return ex;
}

}  // namespace detail

// Draw train/valid/test splits that are disjoint by example content. The
// generator keeps sampling until each split fills, so requested sizes must
// stay well under the task's distinct-example count.
inline Dataset gen_task(Task task, std::size_t n_train, std::size_t n_valid,
                        std::size_t n_test, std::uint64_t seed) {
  if (n_train == 0 || n_valid == 0 || n_test == 0)
    throw std::invalid_argument("gen_task: split sizes must be positive");
  Dataset ds;
  ds.task = task;
  ds.vocab = task_vocab(task);

  CounterRng rng(mix_key(seed, stream_tag::data, std::uint64_t(task)));
  std::set<std::vector<std::size_t>> seen;
  std::size_t want = n_train + n_valid + n_test;
  std::size_t attempts = 0, budget = 200 * want + 10000;
  while (ds.train.size() + ds.valid.size() + ds.test.size() < want) {
    if (++attempts > budget)
      throw std::runtime_error(
          "gen_task: task space too small for the requested split sizes");
    Example ex = detail::draw_example(task, ds.vocab, rng);
    std::vector<std::size_t> key = ex.x;
    key.push_back(SIZE_MAX);  // separator; never a token
    key.insert(key.end(), ex.y.begin(), ex.y.end());
    if (!seen.insert(std::move(key)).second) continue;
    if (ds.train.size() < n_train)
      ds.train.push_back(std::move(ex));
    else if (ds.valid.size() < n_valid)
      ds.valid.push_back(std::move(ex));
    else
      ds.test.push_back(std::move(ex));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk form: vocab.txt (one token per line, index order) and one TSV per
// split with two tab-separated fields, space-joined X and space-joined Y
// without the trailing eos. The eos comes back on load.

inline void save_vocab(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const std::string& t : vocab.tokens) out << t << "\n";
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) v.tokens.push_back(line);
  }
  v.pad_index = v.index_of("<pad>");
  v.eos_index = v.index_of("<eos>");
  v.validate();
  return v;
}

inline void save_examples(const std::vector<Example>& examples,
                          const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const Example& ex : examples) {
    for (std::size_t i = 0; i < ex.x.size(); ++i)
      out << (i ? " " : "") << vocab.token(ex.x[i]);
    out << "\t";
    for (std::size_t i = 0; i + 1 < ex.y.size(); ++i)
      out << (i ? " " : "") << vocab.token(ex.y[i]);
    out << "\n";
  }
}

inline std::vector<Example> load_examples(const std::string& path,
                                          const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected two tab-separated fields");
    Example ex;
    auto parse_side = [&](const std::string& field, TokenSeq& dst) {
      std::istringstream ss(field);
      std::string tok;
      while (ss >> tok) dst.push_back(vocab.index_of(tok));
    };
    try {
      parse_side(line.substr(0, tab), ex.x);
      parse_side(line.substr(tab + 1), ex.y);
      ex.y.push_back(vocab.eos_index);
      validate_example(ex, vocab);
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " +
                               e.what());
    }
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw std::runtime_error(path + ": no examples");
  return out;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_vocab(ds.vocab, dir + "/vocab.txt");
  save_examples(ds.train, ds.vocab, dir + "/train.tsv");
  save_examples(ds.valid, ds.vocab, dir + "/valid.tsv");
  save_examples(ds.test, ds.vocab, dir + "/test.tsv");
}

}  // namespace seqlab
