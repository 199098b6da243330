#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <cmath>

#include "seqlab/losses.hpp"
#include "seqlab/rng.hpp"

using namespace seqlab;

// fixtures below use eos = 1 (content tokens start at 2)
constexpr std::size_t kEos = 1;

TEST_CASE("edit_loss basics") {
  TokenSeq y{2, 3, 4, kEos};
  REQUIRE(edit_loss(y, y, kEos) == 0.0);

  // hyp [a,b] vs ref [a,b,c]: one insertion over |Y|=3
  REQUIRE(edit_loss({2, 3}, {2, 3, 4, kEos}, kEos) ==
          Catch::Approx(1.0 / 3.0));

  // empty hypothesis: n insertions / n
  REQUIRE(edit_loss({}, {2, 3, 4, 5, kEos}, kEos) == 1.0);

  REQUIRE_THROWS_AS(edit_loss({2}, {kEos}, kEos), std::invalid_argument);
}

TEST_CASE("levenshtein core is a metric on random sequences") {
  CounterRng rng(77);
  auto random_seq = [&] {
    TokenSeq s(rng.index(9));
    for (auto& t : s) t = 2 + rng.index(5);
    return s;
  };
  for (int trial = 0; trial < 300; ++trial) {
    TokenSeq a = random_seq(), b = random_seq(), c = random_seq();
    std::size_t ab = levenshtein(a, b);
    REQUIRE(ab == levenshtein(b, a));                        // symmetry
    REQUIRE(levenshtein(a, a) == 0);                         // identity
    REQUIRE(ab <= levenshtein(a, c) + levenshtein(c, b));    // triangle
    std::size_t lower =
        a.size() > b.size() ? a.size() - b.size() : b.size() - a.size();
    REQUIRE(ab >= lower);
    REQUIRE(ab <= std::max(a.size(), b.size()));
  }
}

TEST_CASE("lm_loss under a uniform scorer") {
  // V=8, 5 scored tokens -> 5 log 8
  ModelParams scorer = ModelParams::sized(8, 3, 4);
  TokenSeq yhat{2, 3, 4, 5, kEos};
  REQUIRE(lm_loss(scorer, yhat, {2}, kEos) ==
          Catch::Approx(5.0 * std::log(8.0)).margin(1e-9));
}

TEST_CASE("lm_loss with scorer == generator matches decode log-probs") {
  ModelParams p = ModelParams::init(5, 3, 4, 19);
  auto out = decode_greedy(p, {2, 3}, 10, kEos);
  REQUIRE(lm_loss(p, out.tokens, {2, 3}, kEos) ==
          Catch::Approx(-out.sum_log_prob()).margin(1e-9));
}

TEST_CASE("lm_loss strictly increases when the hypothesis grows") {
  ModelParams p = ModelParams::init(5, 3, 4, 23);
  TokenSeq yhat{2, 3, 4};
  double shorter = lm_loss(p, yhat, {2}, kEos);
  yhat.push_back(2);
  REQUIRE(lm_loss(p, yhat, {2}, kEos) > shorter);
}

TEST_CASE("sentence_bleu perfect and disjoint cases") {
  TokenSeq y{2, 3, 4, 5, kEos};
  REQUIRE(sentence_bleu(y, y, kEos) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(sentence_bleu({6, 7, 8, 9}, y, kEos) == 0.0);
}

TEST_CASE("sentence_bleu against hand-counted n-gram precisions") {
  // hyp [a,b,c,d,e] vs ref [a,b,c,d,f], tokens 2..7
  // p1 = 4/5 (unsmoothed); p2 = (3+1)/(4+1); p3 = (2+1)/(3+1);
  // p4 = (1+1)/(2+1); equal lengths so BP = 1
  double expected =
      std::pow((4.0 / 5.0) * (4.0 / 5.0) * (3.0 / 4.0) * (2.0 / 3.0), 0.25);
  REQUIRE(sentence_bleu({2, 3, 4, 5, 6}, {2, 3, 4, 5, 7}, kEos) ==
          Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("sentence_bleu brevity penalty and clipping") {
  // hyp shorter than ref: BP = exp(1 - |r|/|h|)
  // hyp [a,b] vs ref [a,b,c,d]: p1 = 1, p2 = (1+1)/(1+1) = 1,
  // p3 = p4 = 1 (no such n-grams, smoothed 1/1), BP = exp(1-2) = e^-1
  REQUIRE(sentence_bleu({2, 3}, {2, 3, 4, 5}, kEos) ==
          Catch::Approx(std::exp(-1.0)).margin(1e-12));

  // clipping: hyp repeats a token beyond its reference count
  // hyp [a,a,a] vs ref [a,b,c]: 1-gram matches clipped to 1 -> p1 = 1/3
  // p2: hyp {aa,aa}: 0 matches -> (0+1)/(2+1); p3: (0+1)/(1+1); p4: 1/1
  double expected = std::pow(
      (1.0 / 3.0) * (1.0 / 3.0) * (1.0 / 2.0) * 1.0, 0.25);
  REQUIRE(sentence_bleu({2, 2, 2}, {2, 3, 4}, kEos) ==
          Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("sentence_bleu strips eos and stays in [0,1]") {
  REQUIRE(sentence_bleu({2, 3, kEos}, {2, 3, kEos}, kEos) ==
          Catch::Approx(1.0).margin(1e-12));
  CounterRng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    TokenSeq h(rng.index(8)), r(1 + rng.index(7));
    for (auto& t : h) t = 2 + rng.index(4);
    for (auto& t : r) t = 2 + rng.index(4);
    double b = sentence_bleu(h, r, kEos);
    REQUIRE(b >= 0.0);
    REQUIRE(b <= 1.0);
  }
}

TEST_CASE("repetition") {
  // ten distinct tokens: no repeated 4-grams
  REQUIRE(repetition({2, 3, 4, 5, 6, 7, 8, 9, 10, 11}, kEos) == 0.0);

  // a b c d a b c d: five 4-grams, four unique
  REQUIRE(repetition({2, 3, 4, 5, 2, 3, 4, 5}, kEos) ==
          Catch::Approx(0.2).margin(1e-12));

  // shorter than n
  REQUIRE(repetition({2, 3, 4}, kEos) == 0.0);

  // eos does not count toward n-grams
  REQUIRE(repetition({2, 3, 4, kEos}, kEos) == 0.0);

  // fully repetitive long output approaches 1 but stays in range
  TokenSeq loop;
  for (int i = 0; i < 40; ++i) loop.push_back(2);
  double rep = repetition(loop, kEos);
  REQUIRE(rep > 0.9);
  REQUIRE(rep <= 1.0);
}

TEST_CASE("nonterm indicator") {
  DecodeOutput done{{2, kEos}, true, {-0.1, -0.2}};
  DecodeOutput capped{{2, 3, 4}, false, {-0.1, -0.2, -0.3}};
  REQUIRE(nonterm(done) == 0.0);
  REQUIRE(nonterm(capped) == 1.0);
}

TEST_CASE("pooled_cost averages per-example losses") {
  ModelParams p = ModelParams::init(5, 3, 4, 31);
  std::vector<Example> batch{{{2}, {3, kEos}}, {{3}, {4, 2, kEos}}};
  TaskLoss loss = TaskLoss::edit(kEos);
  DecodeFn greedy = [](const ModelParams& m, const TokenSeq& x) {
    return decode_greedy(m, x, 8, kEos);
  };

  double c01 = pooled_cost(p, batch, greedy, loss);
  double c0 = pooled_cost(p, {batch[0]}, greedy, loss);
  double c1 = pooled_cost(p, {batch[1]}, greedy, loss);
  REQUIRE(c01 == Catch::Approx(0.5 * (c0 + c1)).margin(1e-12));

  // permutation invariance
  std::vector<Example> swapped{batch[1], batch[0]};
  REQUIRE(pooled_cost(p, swapped, greedy, loss) ==
          Catch::Approx(c01).margin(1e-12));

  REQUIRE_THROWS_AS(pooled_cost(p, {}, greedy, loss), std::invalid_argument);
}

TEST_CASE("task loss kinds dispatch correctly") {
  auto scorer = std::make_shared<ModelParams>(ModelParams::init(5, 3, 4, 1));
  Example ex{{2}, {3, 4, kEos}};
  DecodeOutput out{{3, 4, kEos}, true, {-0.5, -0.5, -0.5}};

  REQUIRE(TaskLoss::edit(kEos)(out, ex) == 0.0);
  REQUIRE(TaskLoss::sbleu(kEos)(out, ex) ==
          Catch::Approx(1.0 - sentence_bleu(out.tokens, ex.y, kEos)));
  REQUIRE(TaskLoss::lm(scorer, kEos)(out, ex) ==
          Catch::Approx(lm_loss(*scorer, out.tokens, ex.x, kEos)));
  REQUIRE_THROWS_AS(TaskLoss::lm(nullptr, kEos), std::invalid_argument);
}
