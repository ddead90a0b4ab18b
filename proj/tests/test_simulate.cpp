#include <algorithm>
#include <cmath>
#include <fstream>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "jmvar/error.hpp"
#include "jmvar/lmm.hpp"
#include "jmvar/simulate.hpp"
#include "support.hpp"

using namespace jmvar;

namespace {

SubjectTruth zero_truth(const ScenarioConfig& cfg) {
  SubjectTruth s;
  s.b = Eigen::VectorXd::Zero(cfg.n_coef());
  return s;
}

ScenarioConfig weibull_only(double kappa, double zeta) {
  ScenarioConfig c = ScenarioConfig::linear(0.0);
  c.alpha_m = 0.0;
  c.alpha_sigma = 0.0;
  c.kappa = kappa;
  c.zeta = zeta;
  return c;
}

double sample_corr(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

TEST_CASE("simulate: population trajectories") {
  ScenarioConfig lin = ScenarioConfig::linear(0.02);
  SubjectTruth s = zero_truth(lin);
  CHECK(true_mean(lin, s, 2.0) == doctest::Approx(148.0).epsilon(1e-14));
  CHECK(true_sd(lin, s, 1.0) == doctest::Approx(std::exp(2.4 - 0.05)).epsilon(1e-14));
  CHECK(true_log_hazard(lin, s, 1.0) ==
        doctest::Approx(std::log(lin.kappa) + lin.zeta + 0.02 * 145.0 + 0.02 * std::exp(2.35)).epsilon(1e-13));

  ScenarioConfig quad = ScenarioConfig::quadratic(0.02);
  SubjectTruth q = zero_truth(quad);
  CHECK(true_mean(quad, q, 2.0) == doctest::Approx(146.0).epsilon(1e-14));
  CHECK(true_mean(quad, q, 4.0) == doctest::Approx(142.0 + 8.0 + 32.0).epsilon(1e-14));
  CHECK(true_sd(quad, q, 0.0) == doctest::Approx(std::exp(2.0)).epsilon(1e-14));
}

TEST_CASE("simulate: random-effect covariances") {
  ScenarioConfig cfg = ScenarioConfig::linear(0.02);
  const int n = 50000;
  Engine eng(7);
  Eigen::MatrixXd B(n, 2), M(n, 2);
  for (int i = 0; i < n; ++i) {
    SubjectTruth s = simulate_subject_truth(cfg, eng);
    B.row(i) = s.b.transpose();
    M.row(i) = s.mu.transpose();
  }
  auto cov = [](const Eigen::MatrixXd& X) {
    Eigen::MatrixXd c = X.rowwise() - X.colwise().mean();
    return Eigen::MatrixXd(c.transpose() * c / double(X.rows() - 1));
  };
  auto close = [](const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        double scale = std::sqrt(want(r, r) * want(c, c));
        CHECK(std::abs(got(r, c) - want(r, c)) < 0.03 * scale);
      }
  };
  close(cov(B), cfg.Sigma_b);
  close(cov(M), cfg.Sigma_mu);
}

TEST_CASE("simulate: marginal spread of the marker at each visit") {
  ScenarioConfig cfg = ScenarioConfig::linear(0.02);
  const int n = 40000;
  const std::size_t T = cfg.obs_times.size();
  std::vector<double> sum(T, 0.0), sum2(T, 0.0);
  for (int i = 0; i < n; ++i) {
    Engine eng = make_engine(99, {static_cast<std::uint64_t>(i)});
    SubjectTruth s = simulate_subject_truth(cfg, eng);
    auto y = simulate_longitudinal(cfg, s, eng);
    for (std::size_t j = 0; j < T; ++j) sum[j] += y[j], sum2[j] += y[j] * y[j];
  }
  for (std::size_t j = 0; j < T; ++j) {
    const double t = cfg.obs_times[j];
    Eigen::Vector2d z(1.0, t);
    double mu_var = z.dot(cfg.Sigma_mu * z);
    double lin = cfg.xi[0] + cfg.xi[1] * t;
    double want = z.dot(cfg.Sigma_b * z) + std::exp(2.0 * lin + 2.0 * mu_var);
    double mean = sum[j] / n;
    double got = sum2[j] / n - mean * mean;
    INFO("t = " << t);
    CHECK(std::sqrt(got) == doctest::Approx(std::sqrt(want)).epsilon(0.03));
    CHECK(mean == doctest::Approx(142.0 + 3.0 * t).epsilon(0.002));
  }
}

TEST_CASE("simulate: event times under closed-form hazards") {
  SUBCASE("unit exponential") {
    ScenarioConfig c = weibull_only(1.0, 0.0);
    SubjectTruth s = zero_truth(c);
    for (double u : {0.9, 0.5, 0.1, 0.01})
      CHECK(simulate_event_time(c, s, u).time == doctest::Approx(-std::log(u)).epsilon(1e-8));
  }
  SUBCASE("weibull") {
    ScenarioConfig c = weibull_only(1.8 * 1.8, -7.0);
    SubjectTruth s = zero_truth(c);
    for (double u : {0.99, 0.7, 0.3, 0.05, 1e-4}) {
      double want = std::pow(-std::log(u) / std::exp(c.zeta), 1.0 / c.kappa);
      CHECK(std::abs(simulate_event_time(c, s, u).time - want) < 1e-6);
    }
  }
  SUBCASE("administrative cap") {
    ScenarioConfig c = weibull_only(1.0, -10.0);
    c.t_max = 5.0;
    auto ev = simulate_event_time(c, zero_truth(c), 0.5);
    CHECK(ev.administrative);
    CHECK(ev.time == 5.0);
  }
  SUBCASE("u must be inside (0, 1)") {
    ScenarioConfig c = weibull_only(1.0, 0.0);
    CHECK_THROWS_AS(simulate_event_time(c, zero_truth(c), 0.0), Error);
    CHECK_THROWS_AS(simulate_event_time(c, zero_truth(c), 1.0), Error);
  }
}

TEST_CASE("simulate: Kaplan-Meier follows the true survival curve") {
  ScenarioConfig c = weibull_only(1.8 * 1.8, -7.0);
  c.zeta = -4.0;
  c.n_subjects = 20000;
  c.seed = 5;
  SimulatedData sim = simulate(c);
  std::vector<std::pair<double, bool>> obs;
  for (const auto& s : sim.truth) obs.emplace_back(s.observed_time, s.event);
  std::sort(obs.begin(), obs.end(), [](auto& a, auto& b) { return a.first < b.first; });
  double surv = 1.0;
  std::size_t at_risk = obs.size(), j = 0;
  for (double t : {0.5, 1.0, 1.5, 2.0, 2.5, 3.0}) {
    while (j < obs.size() && obs[j].first <= t) {
      if (obs[j].second) surv *= 1.0 - 1.0 / static_cast<double>(at_risk);
      --at_risk;
      ++j;
    }
    double want = std::exp(-std::exp(c.zeta) * std::pow(t, c.kappa));
    INFO("t = " << t);
    CHECK(std::abs(surv - want) < 0.01);
  }
  CHECK(sim.event_rate() > 0.3);
}

TEST_CASE("simulate: censoring") {
  SUBCASE("disabled") {
    ScenarioConfig c = ScenarioConfig::linear(0.02);
    c.censor_lo = c.censor_hi = std::numeric_limits<double>::infinity();
    c.n_subjects = 200;
    SimulatedData sim = simulate(c);
    for (const auto& s : sim.truth) {
      CHECK(s.event != s.administrative);
      CHECK(s.observed_time == s.event_time);
    }
  }
  SUBCASE("before the second visit keeps only baseline") {
    ScenarioConfig c = ScenarioConfig::linear(0.02);
    c.censor_lo = 0.1;
    c.censor_hi = 0.2;
    c.n_subjects = 100;
    SimulatedData sim = simulate(c);
    for (std::size_t i = 0; i < sim.dataset.subject_count(); ++i) {
      const auto& ser = sim.dataset.series("y", i);
      REQUIRE(ser.size() == 1);
      CHECK(ser.times[0] == 0.0);
      CHECK(sim.dataset.survival(i).event_time <= 0.2);
    }
  }
  SUBCASE("visits after the observed time are dropped") {
    ScenarioConfig c = ScenarioConfig::linear(0.02);
    c.n_subjects = 300;
    SimulatedData sim = simulate(c);
    int events = 0;
    for (std::size_t i = 0; i < sim.dataset.subject_count(); ++i) {
      const auto& ser = sim.dataset.series("y", i);
      CHECK(ser.times.back() <= sim.dataset.survival(i).event_time);
      events += sim.dataset.survival(i).event() ? 1 : 0;
    }
    CHECK(sim.event_rate() == doctest::Approx(events / 300.0));
  }
}

TEST_CASE("simulate: true cumulative hazard is increasing") {
  ScenarioConfig c = ScenarioConfig::quadratic(0.10);
  Engine eng(3);
  SubjectTruth s = simulate_subject_truth(c, eng);
  double prev = 0.0;
  for (int j = 1; j <= 60; ++j) {
    double H = true_cumulative_hazard(c, s, 0.1 * j);
    CHECK(H > prev);
    prev = H;
  }
}

TEST_SUITE("property-inversion") {
  TEST_CASE("cumulative hazard at the drawn time equals -log u") {
    for (auto cfg : {ScenarioConfig::linear(0.02), ScenarioConfig::linear(0.10), ScenarioConfig::quadratic(0.07)}) {
      Engine eng(11);
      for (int i = 0; i < 200; ++i) {
        SubjectTruth s = simulate_subject_truth(cfg, eng);
        double u = uniform_open(eng);
        EventDraw ev = simulate_event_time(cfg, s, u);
        if (ev.administrative) continue;
        double H = true_cumulative_hazard(cfg, s, ev.time);
        CHECK(std::abs(H + std::log(u)) < 1e-8 * std::max(1.0, -std::log(u)));
      }
    }
  }
}

TEST_CASE("simulate: event time does not depend on the SD effect when its association is zero") {
  ScenarioConfig c = ScenarioConfig::linear(0.0);
  Engine eng(21);
  std::vector<double> mu1, T;
  for (int i = 0; i < 20000; ++i) {
    SubjectTruth s = simulate_subject_truth(c, eng);
    s.b.setZero();
    mu1.push_back(s.mu[1]);
    T.push_back(simulate_event_time(c, s, uniform_open(eng)).time);
  }
  CHECK(std::abs(sample_corr(mu1, T)) < 0.02);
}

TEST_CASE("simulate: subject streams do not depend on n") {
  ScenarioConfig c = ScenarioConfig::linear(0.02);
  c.n_subjects = 20;
  SimulatedData a = simulate(c);
  c.n_subjects = 40;
  SimulatedData b = simulate(c);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(a.truth[i].event_time == b.truth[i].event_time);
    CHECK(a.dataset.series("y", i) == b.dataset.series("y", i));
  }
}

TEST_CASE("simulate: scenario JSON") {
  ScenarioConfig c = ScenarioConfig::from_json(nlohmann::json{{"preset", "quadratic"}, {"alpha_sigma", 0.07}});
  CHECK(c.trajectory == Trajectory::Quadratic);
  CHECK(c.kappa == doctest::Approx(1.6 * 1.6));
  CHECK(c.zeta == -7.5);
  ScenarioConfig back = ScenarioConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());
  ScenarioConfig lin10 = ScenarioConfig::preset("linear", 0.10);
  CHECK(lin10.kappa == doctest::Approx(1.6 * 1.6));
  CHECK(lin10.hash() != ScenarioConfig::preset("linear", 0.02).hash());
  CHECK_THROWS_AS(ScenarioConfig::preset("cubic"), Error);
  CHECK_THROWS_AS(ScenarioConfig::from_json(nlohmann::json{{"preset", "linear"}, {"n_subjects", 0}}), Error);
}

TEST_CASE("simulate: null scenario has constant SD") {
  ScenarioConfig c = ScenarioConfig::null_variability();
  c.validate();
  Engine eng(2);
  SubjectTruth s = simulate_subject_truth(c, eng);
  CHECK(s.mu.isZero());
  CHECK(true_sd(c, s, 0.0) == true_sd(c, s, 5.0));
  CHECK(c.alpha_sigma == 0.0);
}

TEST_CASE("simulate: files on disk") {
  ScenarioConfig c = ScenarioConfig::linear(0.02);
  c.n_subjects = 15;
  SimulatedData sim = simulate(c);
  testing::TempDir dir;
  write_simulation(sim, dir.path());
  for (const char* f : {"longitudinal.csv", "survival.csv", "truth.csv", "truth_subjects.csv", "scenario.json"})
    CHECK(std::filesystem::exists(dir / f));
  std::ifstream in(dir / "scenario.json");
  auto j = nlohmann::json::parse(in);
  CHECK(ScenarioConfig::from_json(j).hash() == c.hash());
}

TEST_CASE("simulate: a homoscedastic mixed-model refit recovers the fixed effects") {
  for (std::uint64_t seed : {1, 2, 3}) {
    ScenarioConfig c = ScenarioConfig::linear(0.02);
    c.seed = seed;
    SimulatedData sim = simulate(c);
    LmmFit f = fit_lmm(sim.dataset, "y", TimeModel::linear(), LmmMethod::REML);
    for (int j = 0; j < 2; ++j) {
      double se = std::sqrt(f.beta_cov(j, j));
      INFO("seed " << seed << " coef " << j);
      CHECK(std::abs(f.beta[j] - c.beta[j]) < 4.0 * se);
    }
  }
}
