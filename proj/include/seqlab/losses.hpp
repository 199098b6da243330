#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <vector>

#include "seqlab/decode.hpp"
#include "seqlab/model.hpp"
#include "seqlab/vocab.hpp"

namespace seqlab {

// Content view of a sequence: eos removed (it only ever appears once, at
// the end, but stripping by value keeps this robust to hand-built inputs).
inline TokenSeq strip_eos(const TokenSeq& seq, std::size_t eos_index) {
  TokenSeq out;
  out.reserve(seq.size());
  for (auto t : seq)
    if (t != eos_index) out.push_back(t);
  return out;
}

// Unit-cost Levenshtein distance over token sequences (Wagner-Fischer with
// two rolling rows).
inline std::size_t levenshtein(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Levenshtein(Ŷ, Y) / |Y|, both sides eos-stripped first.
inline double edit_loss(const TokenSeq& yhat, const TokenSeq& y,
                        std::size_t eos_index) {
  TokenSeq h = strip_eos(yhat, eos_index);
  TokenSeq r = strip_eos(y, eos_index);
  if (r.empty()) throw std::invalid_argument("edit_loss: empty reference");
  return double(levenshtein(h, r)) / double(r.size());
}

// Total negative log-probability of Ŷ under a frozen scoring model,
// conditioned on X. The eos factor is included exactly when Ŷ carries one,
// so unterminated generations are not billed for a termination they never
// made.
inline double lm_loss(const ModelParams& score_params, const TokenSeq& yhat,
                      const TokenSeq& x, std::size_t eos_index) {
  if (yhat.empty()) return 0.0;
  DecoderState ds(score_params, x, eos_index);
  double lp = 0.0;
  for (std::size_t t = 0; t < yhat.size(); ++t) {
    lp += ds.log_probs()[yhat[t]];
    if (t + 1 < yhat.size()) ds.advance(yhat[t]);
  }
  return -lp;
}

// Sentence BLEU: geometric mean of modified n-gram precisions for orders
// 1..max_order times the brevity penalty. Orders >= 2 get add-one
// smoothing; order 1 does not, so disjoint token sets score exactly 0.
inline double sentence_bleu(const TokenSeq& yhat, const TokenSeq& y,
                            std::size_t eos_index, int max_order = 4) {
  TokenSeq h = strip_eos(yhat, eos_index);
  TokenSeq r = strip_eos(y, eos_index);
  if (r.empty())
    throw std::invalid_argument("sentence_bleu: empty reference");
  if (h.empty()) return 0.0;

  double log_prec_sum = 0.0;
  for (int n = 1; n <= max_order; ++n) {
    std::map<TokenSeq, std::size_t> ref_counts;
    if (r.size() >= std::size_t(n))
      for (std::size_t i = 0; i + n <= r.size(); ++i)
        ref_counts[TokenSeq(r.begin() + i, r.begin() + i + n)]++;

    std::size_t total = 0, matched = 0;
    if (h.size() >= std::size_t(n)) {
      std::map<TokenSeq, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i)
        hyp_counts[TokenSeq(h.begin() + i, h.begin() + i + n)]++;
      for (auto& [gram, count] : hyp_counts) {
        total += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched += std::min(count, it->second);
      }
    }

    double p;
    if (n == 1) {
      if (matched == 0) return 0.0;
      p = double(matched) / double(total);
    } else {
      p = double(matched + 1) / double(total + 1);
    }
    log_prec_sum += std::log(p);
  }

  double bp = 1.0;
  if (h.size() < r.size())
    bp = std::exp(1.0 - double(r.size()) / double(h.size()));
  return bp * std::exp(log_prec_sum / double(max_order));
}

// 1 - unique/total n-grams; degenerate inputs (fewer than n tokens after
// eos-stripping) score 0 so short outputs are not penalized twice.
inline double repetition(const TokenSeq& yhat, std::size_t eos_index,
                         int n = 4) {
  TokenSeq h = strip_eos(yhat, eos_index);
  if (h.size() < std::size_t(n)) return 0.0;
  std::set<TokenSeq> seen;
  std::size_t total = 0;
  for (std::size_t i = 0; i + n <= h.size(); ++i) {
    seen.insert(TokenSeq(h.begin() + i, h.begin() + i + n));
    ++total;
  }
  return 1.0 - double(seen.size()) / double(total);
}

inline double nonterm(const DecodeOutput& decode) {
  return decode.terminated ? 0.0 : 1.0;
}

enum class LossKind { lm, edit, sbleu };

// A task loss c(Ŷ, Y): lower is always better (sentence BLEU enters as
// 1 - BLEU). The lm kind scores generations with a frozen model and ignores
// the reference.
struct TaskLoss {
  LossKind kind = LossKind::edit;
  std::shared_ptr<const ModelParams> score_params;  // lm only
  int ngram_order = 4;
  std::size_t eos_index = 0;

  static TaskLoss edit(std::size_t eos_index) {
    return {LossKind::edit, nullptr, 4, eos_index};
  }
  static TaskLoss sbleu(std::size_t eos_index, int order = 4) {
    return {LossKind::sbleu, nullptr, order, eos_index};
  }
  static TaskLoss lm(std::shared_ptr<const ModelParams> scorer,
                     std::size_t eos_index) {
    if (!scorer) throw std::invalid_argument("lm loss needs a scorer");
    return {LossKind::lm, std::move(scorer), 4, eos_index};
  }

  double operator()(const DecodeOutput& yhat, const Example& ex) const {
    switch (kind) {
      case LossKind::edit:
        return edit_loss(yhat.tokens, ex.y, eos_index);
      case LossKind::sbleu:
        return 1.0 - sentence_bleu(yhat.tokens, ex.y, eos_index, ngram_order);
      case LossKind::lm:
        return lm_loss(*score_params, yhat.tokens, ex.x, eos_index);
    }
    throw std::logic_error("task loss: bad kind");
  }
};

using DecodeFn =
    std::function<DecodeOutput(const ModelParams&, const TokenSeq&)>;

// Anything that prices a decoded sequence against its example. TaskLoss
// converts implicitly; tests substitute synthetic costs.
using SeqCostFn = std::function<double(const DecodeOutput&, const Example&)>;

// C(θ): decode every batch element and average the task loss.
inline double pooled_cost(const ModelParams& params,
                          const std::vector<Example>& batch,
                          const DecodeFn& decoder, const SeqCostFn& loss) {
  if (batch.empty()) throw std::invalid_argument("pooled_cost: empty batch");
  double total = 0.0;
  for (const Example& ex : batch) total += loss(decoder(params, ex.x), ex);
  return total / double(batch.size());
}

}  // namespace seqlab
