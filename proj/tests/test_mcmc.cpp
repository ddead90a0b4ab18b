#include <cmath>
#include <memory>
#include <random>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "jmvar/error.hpp"
#include "jmvar/lmm.hpp"
#include "jmvar/mcmc.hpp"
#include "jmvar/simulate.hpp"
#include "jmvar/study.hpp"
#include "support.hpp"

using namespace jmvar;

namespace {

std::shared_ptr<const LongitudinalDataset> shared(LongitudinalDataset ds) {
  return std::make_shared<const LongitudinalDataset>(std::move(ds));
}

/// Ten observations with mean exactly 2, residual sd fixed at 1, flat-ish
/// N(0, 10^2) prior on the only coefficient.
JointModel conjugate_model() {
  std::vector<LongRow> rows;
  std::vector<SurvivalRecord> surv;
  const double dev[] = {-0.7, 0.7, 0.3, -0.3, 1.1};
  for (int i = 0; i < 5; ++i) {
    std::string id = "c" + std::to_string(i);
    rows.push_back({id, "y", 0.0, 2.0 + dev[i]});
    rows.push_back({id, "y", 1.0, 2.0 - dev[i]});
    surv.push_back({id, 2.0, EventStatus::Censored, {}});
  }
  JointModelSpec spec;
  spec.submodels.push_back({"y", TimeModel({TimeTerm::parse("intercept")}, {}), false, 1.0});
  spec.survival = false;
  spec.priors.standardized = false;
  return JointModel(spec, shared(LongitudinalDataset::build(rows, surv, {})));
}

JointModelSpec small_joint_spec() {
  JointModelSpec spec;
  spec.submodels.push_back({"y", TimeModel::linear(), true, std::nullopt});
  spec.submodels.push_back({"r", TimeModel::linear(), true, std::nullopt});
  spec.baseline.n_basis = 6;
  return spec;
}

SamplerConfig quick(int warmup, int kept, std::uint64_t seed = 3) {
  SamplerConfig c;
  c.n_warmup = warmup;
  c.n_kept = kept;
  c.seed = seed;
  return c;
}

std::vector<std::vector<double>> normal_chains(int m, int n, std::uint64_t seed, double sep = 0.0) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> z;
  std::vector<std::vector<double>> out(m);
  for (int c = 0; c < m; ++c)
    for (int i = 0; i < n; ++i) out[c].push_back(z(eng) + sep * c);
  return out;
}

}  // namespace

TEST_CASE("mcmc: conjugate normal mean") {
  JointModel m = conjugate_model();
  JointModelFit fit = sample(m, quick(1000, 8000, 11));
  const ParamSummary* s = fit.find("beta.y.intercept");
  REQUIRE(s);
  const double mean = 2.0 * 1000.0 / 1001.0, sd = 1.0 / std::sqrt(10.01);
  CHECK(std::abs(s->mean - mean) < 3.0 * s->mcse);
  CHECK(std::abs(s->sd / sd - 1.0) < 0.10);
  CHECK(s->rhat < 1.01);
}

TEST_CASE("mcmc: MCSE shrinks like one over root n") {
  JointModel m = conjugate_model();
  auto a = sample(m, quick(500, 4000, 21)).find("beta.y.intercept")->mcse;
  auto b = sample(m, quick(500, 16000, 21)).find("beta.y.intercept")->mcse;
  CHECK(a / b == doctest::Approx(2.0).epsilon(0.3));
}

TEST_CASE("mcmc: same seed gives identical chains") {
  auto data = shared(testing::joint_data(40, 5));
  JointModel m(small_joint_spec(), data);
  SamplerConfig c = quick(100, 100, 9);
  auto f1 = sample(m, c);
  c.jobs = 3;
  auto f2 = sample(m, c);
  REQUIRE(f1.chains.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) CHECK(f1.chains[k] == f2.chains[k]);
  c.seed = 10;
  auto f3 = sample(m, c);
  CHECK(f1.chains[0] != f3.chains[0]);
}

TEST_CASE("mcmc: starting points are finite") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto data = shared(testing::joint_data(30, seed));
    JointModel m(small_joint_spec(), data);
    JointParams base = initialize(m);
    CHECK(std::isfinite(m.log_posterior(base)));
    for (std::uint64_t c = 0; c < 3; ++c) CHECK(std::isfinite(m.log_posterior(jitter_params(m, base, 1.0, c))));
  }
}

TEST_CASE("mcmc: zero jitter starts every chain at the same point") {
  auto data = shared(testing::joint_data(30, 2));
  JointModel m(small_joint_spec(), data);
  JointParams base = initialize(m);
  JointParams a = jitter_params(m, base, 0.0, 1), b = jitter_params(m, base, 0.0, 2);
  CHECK(m.flatten(a) == m.flatten(b));
  CHECK(a.sub[0].b == b.sub[0].b);
  JointParams c = jitter_params(m, base, 1.0, 1);
  CHECK(m.flatten(c) != m.flatten(a));
}

TEST_CASE("mcmc: cached log posterior matches a fresh evaluation") {
  auto data = shared(testing::joint_data(40, 7));
  JointModel m(small_joint_spec(), data);
  for (int iters : {1, 37, 120}) {
    ChainProbe p = probe_chain(m, quick(200, 1, 4), iters);
    double fresh = m.log_posterior(p.params);
    CHECK(p.cached_log_posterior == doctest::Approx(fresh).epsilon(1e-9));
  }
}

TEST_CASE("mcmc: acceptance rates after tuning on the linear scenario") {
  ScenarioConfig sc = ScenarioConfig::linear(0.02);
  sc.seed = 17;
  SimulatedData sim = simulate(sc);
  SamplerConfig c = quick(500, 200, 5);
  c.n_chains = 1;
  TwoStepFit fit = fit_two_step(sim.dataset, "y", scenario_time_model(sc), TwoStepOptions{}, c);
  for (const auto& b : fit.joint.acceptance[0]) {
    if (b.gibbs) continue;
    INFO(b.name);
    CHECK(b.rate() >= 0.1);
    CHECK(b.rate() <= 0.6);
  }
}

TEST_CASE("mcmc: sampler errors") {
  JointModel m = conjugate_model();
  SamplerConfig c = quick(10, 10);
  c.n_chains = 0;
  CHECK_THROWS_AS(sample(m, c), Error);
  c = quick(10, 10);
  c.deadline = std::chrono::steady_clock::now() - std::chrono::seconds(1);
  try {
    sample(m, c);
    FAIL("expected a timeout");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Timeout);
  }
}

TEST_CASE("mcmc: sampler config JSON") {
  SamplerConfig c = quick(123, 456, 789);
  c.n_chains = 4;
  c.init_jitter = 0.5;
  auto back = SamplerConfig::from_json(c.to_json());
  CHECK(back.n_warmup == 123);
  CHECK(back.n_kept == 456);
  CHECK(back.seed == 789);
  CHECK(back.n_chains == 4);
  CHECK(back.init_jitter == 0.5);
  CHECK_THROWS_AS(SamplerConfig::from_json(nlohmann::json{{"warmup", -1}}), Error);
}

TEST_SUITE("property-rhat") {
  TEST_CASE("white noise chains") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) CHECK(rhat(normal_chains(4, 2000, seed)) < 1.01);
  }
  TEST_CASE("separated chains") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) CHECK(rhat(normal_chains(4, 2000, seed, 1.0)) > 1.1);
  }
  TEST_CASE("means 0 and 10") {
    auto c = normal_chains(2, 2000, 6, 10.0);
    CHECK(rhat(c) > 1.1);
  }
  TEST_CASE("one chain in both slots") {
    auto c = normal_chains(1, 2000, 7);
    c.push_back(c[0]);
    CHECK(std::abs(rhat(c) - 1.0) < 1e-6);
  }
  TEST_CASE("constant chains") {
    std::vector<std::vector<double>> c(3, std::vector<double>(50, 1.5));
    CHECK(std::isinf(rhat(c)));
  }
  TEST_CASE("never below one") {
    std::vector<std::vector<double>> c{{0, 1, 0, 1, 0, 1, 0, 1}, {1, 0, 1, 0, 1, 0, 1, 0}};
    CHECK(rhat(c) >= 1.0);
  }
}

TEST_CASE("mcmc: effective sample size") {
  auto iid = normal_chains(4, 2000, 3);
  CHECK(ess(iid) == doctest::Approx(8000).epsilon(0.15));
  // AR(1) with phi 0.9: ESS about n (1 - phi) / (1 + phi)
  std::mt19937_64 eng(4);
  std::normal_distribution<double> z;
  std::vector<std::vector<double>> ar(4);
  for (auto& c : ar) {
    double x = 0;
    for (int i = 0; i < 5000; ++i) c.push_back(x = 0.9 * x + z(eng));
  }
  CHECK(ess(ar) == doctest::Approx(20000.0 * 0.1 / 1.9).epsilon(0.25));
}

TEST_CASE("mcmc: summaries") {
  SUBCASE("constant chain") {
    Eigen::MatrixXd c = Eigen::MatrixXd::Constant(40, 1, 2.5);
    auto s = summarize({"x"}, {c, c});
    CHECK(s[0].mean == 2.5);
    CHECK(s[0].sd == 0.0);
    CHECK(s[0].q025 == 2.5);
    CHECK(s[0].q975 == 2.5);
  }
  SUBCASE("quantiles of 1..100") {
    Eigen::MatrixXd c(100, 1);
    for (int i = 0; i < 100; ++i) c(i, 0) = i + 1;
    auto s = summarize({"x"}, {c});
    CHECK(s[0].mean == doctest::Approx(50.5));
    CHECK(s[0].q025 == doctest::Approx(3.475).epsilon(1e-12));
    CHECK(s[0].q975 == doctest::Approx(97.525).epsilon(1e-12));
  }
}

TEST_CASE("mcmc: chain files round trip exactly") {
  auto data = shared(testing::joint_data(30, 3));
  JointModel m(small_joint_spec(), data);
  auto fit = sample(m, quick(30, 25, 2));
  testing::TempDir dir;
  write_chains(dir / "chains.csv", fit, {"seed=2", "note"});
  ChainFile back = read_chains(dir / "chains.csv");
  CHECK(back.manifest == std::vector<std::string>{"seed=2", "note"});
  CHECK(back.names == fit.names);
  REQUIRE(back.chains.size() == fit.chains.size());
  for (std::size_t c = 0; c < back.chains.size(); ++c) CHECK(back.chains[c] == fit.chains[c]);
  auto again = summarize(back.names, back.chains);
  REQUIRE(again.size() == fit.summaries.size());
  for (std::size_t j = 0; j < again.size(); ++j) {
    CHECK(again[j].mean == fit.summaries[j].mean);
    CHECK(again[j].sd == fit.summaries[j].sd);
    CHECK(again[j].q025 == fit.summaries[j].q025);
    CHECK(again[j].q975 == fit.summaries[j].q975);
    CHECK((again[j].rhat == fit.summaries[j].rhat || (std::isnan(again[j].rhat) && std::isnan(fit.summaries[j].rhat))));
  }
}

TEST_CASE("mcmc: the starting point reproduces the standalone LMM fits") {
  auto data = shared(testing::joint_data(40, 4));
  JointModel m(small_joint_spec(), data);
  JointParams p = initialize(m);
  CHECK(p.alpha.isZero());
  CHECK(p.gamma.isZero());
  for (int k = 0; k < 2; ++k) {
    LmmFit f = fit_lmm(*data, k == 0 ? "y" : "r", TimeModel::linear(), LmmMethod::REML);
    CHECK(p.sub[k].beta == f.beta);
    CHECK(p.sub[k].tau2 == f.sigma2);
    CHECK(p.sub[k].b == f.b);
  }
}

TEST_SUITE("property-init") {
  TEST_CASE("finite log posterior at the start for every simulation scenario and seeds 1..20") {
    for (const char* name : {"linear", "quadratic"})
      for (double a : {0.02, 0.07, 0.10})
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
          ScenarioConfig sc = ScenarioConfig::preset(name, a);
          sc.seed = seed;
          SimulatedData sim = simulate(sc);
          LmmFit lmm = fit_lmm(sim.dataset, "y", scenario_time_model(sc), LmmMethod::REML);
          auto aug = std::make_shared<const LongitudinalDataset>(
              sim.dataset.with_outcome("absres", residuals(lmm, sim.dataset).as_series(ResidualKind::Absolute)));
          JointModel m(two_step_spec("y", scenario_time_model(sc), TwoStepOptions{}), aug);
          JointParams base = initialize(m);
          INFO(name << " " << a << " seed " << seed);
          CHECK(std::isfinite(m.log_posterior(base)));
          CHECK(std::isfinite(m.log_posterior(jitter_params(m, base, 1.0, seed))));
        }
  }
}
