#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "seqlab/mgs.hpp"

using namespace seqlab;

namespace {

ProposalConfig simple_cfg(std::size_t dim, double sigma2, double pi) {
  ProposalConfig cfg;
  cfg.noise.mode = NoiseMode::global;
  cfg.noise.global_sigma2 = sigma2;
  cfg.noise.coord_sigma2.assign(dim, sigma2);
  cfg.pi = pi;
  return cfg;
}

}  // namespace

TEST_CASE("noise_scale global mode") {
  ParamLayout layout{{"w", 4}};
  NoiseScale s =
      noise_scale({0.5, -0.5, 0.5, -0.5}, NoiseMode::global, layout);
  REQUIRE(s.global_sigma2 == Catch::Approx(0.5));  // l1=2 over 4 coords
  REQUIRE(s.coord_sigma2 == std::vector<double>(4, s.global_sigma2));
}

TEST_CASE("noise_scale per-tensor mode") {
  // two tensors of sizes 2 and 6, total l1 norm 2
  ParamLayout layout{{"a", 2}, {"b", 6}};
  std::vector<double> g{1.0, -1.0, 0, 0, 0, 0, 0, 0};
  NoiseScale s = noise_scale(g, NoiseMode::per_tensor, layout);
  REQUIRE(s.per_tensor.at("a") == Catch::Approx(1.0));
  REQUIRE(s.per_tensor.at("b") == Catch::Approx(1.0 / 3.0));
  REQUIRE(s.coord_sigma2[0] == Catch::Approx(1.0));
  REQUIRE(s.coord_sigma2[2] == Catch::Approx(1.0 / 3.0));
  REQUIRE(s.coord_sigma2.size() == 8);
}

TEST_CASE("noise_scale rejects degenerate input") {
  ParamLayout layout{{"w", 3}};
  REQUIRE_THROWS_AS(noise_scale({}, NoiseMode::global, layout),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(noise_scale({0.0, 0.0, 0.0}, NoiseMode::global, layout),
                    std::invalid_argument);
  // layout inconsistent with gradient length
  REQUIRE_THROWS_AS(noise_scale({1.0, 1.0}, NoiseMode::per_tensor, layout),
                    std::invalid_argument);
}

TEST_CASE("sample_proposal component means") {
  const std::size_t dim = 3;
  std::vector<double> step{0.7, -0.3, 0.1};
  const int n = 100000;
  double sigma2 = 0.04;
  double bound = 4.0 * std::sqrt(sigma2) / std::sqrt(double(n));

  for (double pi : {1.0, 0.0}) {
    ProposalConfig cfg = simple_cfg(dim, sigma2, pi);
    std::vector<double> mean(dim, 0.0);
    for (int k = 0; k < n; ++k) {
      CounterRng rng(5, 0, std::uint64_t(k));
      auto [delta, comp] = sample_proposal(step, cfg, rng);
      REQUIRE(comp == (pi == 1.0 ? ProposalComponent::zero
                                 : ProposalComponent::mle));
      for (std::size_t i = 0; i < dim; ++i) mean[i] += delta[i] / n;
    }
    for (std::size_t i = 0; i < dim; ++i) {
      double target = (pi == 1.0) ? 0.0 : step[i];
      REQUIRE(std::fabs(mean[i] - target) < bound);
    }
  }
}

TEST_CASE("sample_proposal is reproducible and mixes components") {
  ProposalConfig cfg = simple_cfg(4, 0.5, 0.5);
  std::vector<double> step{1, 2, 3, 4};
  CounterRng r1(9, 3, 7), r2(9, 3, 7);
  auto a = sample_proposal(step, cfg, r1);
  auto b = sample_proposal(step, cfg, r2);
  REQUIRE(a.first == b.first);
  REQUIRE(a.second == b.second);

  int zero_count = 0;
  const int n = 20000;
  for (int k = 0; k < n; ++k) {
    CounterRng rng(11, 0, std::uint64_t(k));
    if (sample_proposal(step, cfg, rng).second == ProposalComponent::zero)
      ++zero_count;
  }
  REQUIRE(double(zero_count) / n == Catch::Approx(0.5).margin(0.02));
}

TEST_CASE("mixture_log_density with coincident components") {
  // center = 0 collapses the mixture to a single Gaussian for any pi
  std::vector<double> delta{0.3, -0.4};
  std::vector<double> zero{0.0, 0.0};
  double expect = mixture_log_density(delta, zero, simple_cfg(2, 0.7, 1.0));
  for (double pi : {0.0, 0.25, 0.5, 0.9})
    REQUIRE(mixture_log_density(delta, zero, simple_cfg(2, 0.7, pi)) ==
            Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("mixture_log_density degenerate pi") {
  std::vector<double> delta{0.3, -0.4}, step{2.0, 1.0};
  // pi=1: exactly the zero-centered component
  double expect = -0.5 * (2.0 * std::log(2.0 * M_PI * 0.7) +
                          (0.09 + 0.16) / 0.7);
  REQUIRE(mixture_log_density(delta, step, simple_cfg(2, 0.7, 1.0)) ==
          Catch::Approx(expect).margin(1e-12));
  // pi=0: exactly the step-centered component
  double d2 = (0.3 - 2.0) * (0.3 - 2.0) + (-0.4 - 1.0) * (-0.4 - 1.0);
  double expect_mle =
      -0.5 * (2.0 * std::log(2.0 * M_PI * 0.7) + d2 / 0.7);
  REQUIRE(mixture_log_density(delta, step, simple_cfg(2, 0.7, 0.0)) ==
          Catch::Approx(expect_mle).margin(1e-12));
}

TEST_CASE("mixture_log_density against a hand computation") {
  // d=2, sigma2=1, pi=0.5, delta=(0,0), center=(1,0):
  // q = 0.5 N(0|0,I) + 0.5 N(0|(1,0),I) = (0.5/(2pi)) (1 + e^{-1/2})
  std::vector<double> delta{0.0, 0.0}, step{1.0, 0.0};
  double expect = std::log(0.5 * (1.0 + std::exp(-0.5)) / (2.0 * M_PI));
  REQUIRE(mixture_log_density(delta, step, simple_cfg(2, 1.0, 0.5)) ==
          Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("mixture density integrates to one") {
  // MC over a box that contains essentially all the mass (sigma=1,
  // centers at 0 and (1,0))
  ProposalConfig cfg = simple_cfg(2, 1.0, 0.5);
  std::vector<double> step{1.0, 0.0};
  const double lo = -7.0, hi = 8.0, area = (hi - lo) * (hi - lo);
  const int n = 1000000;
  CounterRng rng(4242);
  double acc = 0.0;
  for (int k = 0; k < n; ++k) {
    std::vector<double> d{rng.uniform(lo, hi), rng.uniform(lo, hi)};
    acc += std::exp(mixture_log_density(d, step, cfg));
  }
  REQUIRE(area * acc / n == Catch::Approx(1.0).margin(0.01));
}

TEST_CASE("candidate_weights basics") {
  // equal costs, equal densities
  auto w = candidate_weights(1.0, {{0.7, -3.0}, {0.7, -3.0}}, 1.0);
  REQUIRE(w[0] == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(w[1] == Catch::Approx(0.5).margin(1e-12));

  // alpha = 0: pure density correction, weights ∝ exp(-log_q)
  auto w0 = candidate_weights(1.0, {{0.1, 0.0}, {99.0, std::log(3.0)}}, 0.0);
  REQUIRE(w0[0] == Catch::Approx(0.75).margin(1e-12));
  REQUIRE(w0[1] == Catch::Approx(0.25).margin(1e-12));

  // alpha=1, base=1, costs ±0.5 from base, equal densities:
  // softmax of (0.5, -0.5) = (1/(1+e^{-1}), e^{-1}/(1+e^{-1}))
  auto w1 = candidate_weights(1.0, {{0.5, -2.0}, {1.5, -2.0}}, 1.0);
  REQUIRE(w1[0] == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).margin(1e-12));
  REQUIRE(w1[0] == Catch::Approx(0.7311).margin(5e-5));
  REQUIRE(w1[1] == Catch::Approx(0.2689).margin(5e-5));
}

TEST_CASE("candidate_weights normalize for a range of temperatures") {
  CounterRng rng(88);
  for (double alpha : {0.0, 0.1, 1.0, 10.0, 100.0}) {
    std::vector<std::pair<double, double>> cand;
    for (int k = 0; k < 32; ++k)
      cand.push_back({rng.uniform(0.0, 2.0), rng.uniform(-40.0, -20.0)});
    auto w = candidate_weights(1.0, cand, alpha);
    double sum = 0.0;
    for (double v : w) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
      sum += v;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("candidate_weights shift invariances") {
  // dyadic values keep the shifted arithmetic exact, so equality is bitwise
  std::vector<std::pair<double, double>> cand{
      {0.5, -4.0}, {1.25, -6.5}, {0.75, -5.0}};
  auto base_w = candidate_weights(1.0, cand, 2.0);

  std::vector<std::pair<double, double>> cost_shift = cand;
  for (auto& [c, q] : cost_shift) c += 4.0;
  REQUIRE(candidate_weights(5.0, cost_shift, 2.0) == base_w);

  std::vector<std::pair<double, double>> density_shift = cand;
  for (auto& [c, q] : density_shift) q += 16.0;
  REQUIRE(candidate_weights(1.0, density_shift, 2.0) == base_w);
}

TEST_CASE("raising the temperature favors the best candidate") {
  CounterRng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::pair<double, double>> cand;
    for (int k = 0; k < 8; ++k)
      cand.push_back({rng.uniform(0.1, 2.0), rng.uniform(-30.0, -10.0)});
    std::size_t best = 0;
    for (std::size_t k = 1; k < cand.size(); ++k)
      if (cand[k].first < cand[best].first) best = k;

    double prev = -1.0;
    for (double alpha : {0.0, 0.5, 1.0, 2.0, 5.0, 20.0, 80.0}) {
      double w = candidate_weights(1.0, cand, alpha)[best];
      REQUIRE(w >= prev - 1e-12);
      prev = w;
    }
  }
}

TEST_CASE("candidate_weights error cases") {
  REQUIRE_THROWS_AS(candidate_weights(1.0, {}, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(candidate_weights(1.0, {{0.5, -2.0}}, -1.0),
                    std::invalid_argument);
  double inf = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(candidate_weights(1.0, {{0.5, inf}, {0.7, inf}}, 1.0),
                    std::runtime_error);
}

TEST_CASE("combine") {
  CandidateEvaluation a{{1.0, -2.0}, ProposalComponent::zero, 0, 0, 1.0};
  REQUIRE(combine({a}) == a.delta);

  CandidateEvaluation up{{0.5, -1.5}, ProposalComponent::zero, 0, 0, 0.5};
  CandidateEvaluation dn{{-0.5, 1.5}, ProposalComponent::mle, 0, 0, 0.5};
  auto z = combine({up, dn});
  REQUIRE(z[0] == 0.0);
  REQUIRE(z[1] == 0.0);

  // convex combination stays inside the per-coordinate hull
  CounterRng rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<CandidateEvaluation> cands(5);
    std::vector<std::pair<double, double>> cl;
    for (auto& c : cands) {
      c.delta = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
      cl.push_back({rng.uniform(0, 1), rng.uniform(-9, -5)});
    }
    auto w = candidate_weights(0.5, cl, 1.0);
    for (std::size_t k = 0; k < cands.size(); ++k) cands[k].weight = w[k];
    auto d = combine(cands);
    for (std::size_t i = 0; i < 3; ++i) {
      double lo = 1e9, hi = -1e9;
      for (auto& c : cands) {
        lo = std::min(lo, c.delta[i]);
        hi = std::max(hi, c.delta[i]);
      }
      REQUIRE(d[i] >= lo - 1e-12);
      REQUIRE(d[i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("snis_variance") {
  CandidateEvaluation a{{1.0, 2.0}, ProposalComponent::zero, 0, 0, 0.5};
  CandidateEvaluation b = a;
  auto v = snis_variance({a, b}, combine({a, b}));
  REQUIRE(v[0] == 0.0);
  REQUIRE(v[1] == 0.0);

  // two equal-weight candidates at ±δ: variance δ² per coordinate
  CandidateEvaluation up{{0.3, -0.8}, ProposalComponent::zero, 0, 0, 0.5};
  CandidateEvaluation dn{{-0.3, 0.8}, ProposalComponent::mle, 0, 0, 0.5};
  auto v2 = snis_variance({up, dn}, combine({up, dn}));
  REQUIRE(v2[0] == Catch::Approx(0.09).margin(1e-12));
  REQUIRE(v2[1] == Catch::Approx(0.64).margin(1e-12));

  CounterRng rng(3);
  std::vector<CandidateEvaluation> cands(6);
  std::vector<std::pair<double, double>> cl;
  for (auto& c : cands) {
    c.delta = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    cl.push_back({rng.uniform(0, 1), rng.uniform(-8, -6)});
  }
  auto w = candidate_weights(0.5, cl, 2.0);
  for (std::size_t k = 0; k < cands.size(); ++k) cands[k].weight = w[k];
  for (double x : snis_variance(cands, combine(cands))) REQUIRE(x >= 0.0);
}

TEST_CASE("SNIS estimate approaches the analytic target on a quadratic") {
  // C(v) = |v - v0|^2 makes the improvement distribution a Gaussian whose
  // mean (the exact update target) is v0 - θ.
  std::vector<double> theta{0.3, -0.2}, v0{1.0, 0.5};
  auto cost = [&](const std::vector<double>& d) {
    double a = theta[0] + d[0] - v0[0], b = theta[1] + d[1] - v0[1];
    return a * a + b * b;
  };
  std::vector<double> exact{v0[0] - theta[0], v0[1] - theta[1]};
  std::vector<double> grad{2 * (theta[0] - v0[0]), 2 * (theta[1] - v0[1])};
  std::vector<double> center{-0.25 * grad[0], -0.25 * grad[1]};
  ParamLayout layout{{"w", 2}};

  const std::size_t K = 10000;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ProposalConfig cfg{noise_scale(grad, NoiseMode::global, layout), 0.5};
    double base = cost({0.0, 0.0});
    std::vector<CandidateEvaluation> cands(K);
    std::vector<std::pair<double, double>> cl;
    for (std::size_t k = 0; k < K; ++k) {
      CounterRng rng(seed, 1, k);
      auto [delta, comp] = sample_proposal(center, cfg, rng);
      cands[k].delta = std::move(delta);
      cands[k].component = comp;
      cands[k].log_q = mixture_log_density(cands[k].delta, center, cfg);
      cands[k].cost = cost(cands[k].delta);
      cl.push_back({cands[k].cost, cands[k].log_q});
    }
    auto w = candidate_weights(base, cl, 1.0);
    for (std::size_t k = 0; k < K; ++k) cands[k].weight = w[k];
    auto mgs = combine(cands);
    for (int i = 0; i < 2; ++i)
      REQUIRE(std::fabs(mgs[i] - exact[i]) / std::fabs(exact[i]) < 0.05);
  }
}
