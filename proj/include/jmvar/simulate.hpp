#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "jmvar/dataset.hpp"
#include "jmvar/rng.hpp"

namespace jmvar {

enum class Trajectory { Linear, Quadratic };

/// Generative scenario: heteroscedastic marker with log-linear subject SD,
/// Weibull baseline hazard driven by the true mean and SD.
struct ScenarioConfig {
  std::string name = "linear";
  Trajectory trajectory = Trajectory::Linear;
  int n_subjects = 500;
  std::vector<double> obs_times{0, 0.25, 0.5, 0.75, 1, 1.5, 2, 2.5, 3, 3.5, 4, 4.5, 5};
  Eigen::VectorXd beta;     // intercept, time[, quadratic]
  Eigen::MatrixXd Sigma_b;  // random-effect covariance, same order as beta
  double quad_center = 2.0;
  Eigen::Vector2d xi{2.4, -0.05};
  Eigen::Matrix2d Sigma_mu;
  double alpha_m = 0.02;
  double alpha_sigma = 0.02;
  double kappa = 1.8 * 1.8;
  double zeta = -7.0;
  /// Uniform censoring bounds; both infinite disables censoring.
  double censor_lo = 2.0;
  double censor_hi = 10.0;
  double t_max = 50.0;
  double inversion_tol = 1e-10;
  std::uint64_t seed = 1;
  std::string outcome = "y";

  static ScenarioConfig linear(double alpha_sigma = 0.02);
  static ScenarioConfig quadratic(double alpha_sigma = 0.02);
  /// Homoscedastic errors, no SD random effects, no SD association.
  static ScenarioConfig null_variability();
  static ScenarioConfig preset(const std::string& name, double alpha_sigma = 0.02);

  bool censoring_enabled() const noexcept { return std::isfinite(censor_lo); }
  int n_coef() const noexcept { return static_cast<int>(beta.size()); }
  void validate() const;

  /// Accepts {"preset": name, ...overrides} or a complete description.
  static ScenarioConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  std::string hash() const;
};

/// Everything drawn for one subject.
struct SubjectTruth {
  Eigen::VectorXd b;
  Eigen::Vector2d mu = Eigen::Vector2d::Zero();
  double event_time = 0.0;
  bool administrative = false;  // event time hit t_max
  double censor_time = std::numeric_limits<double>::infinity();
  double observed_time = 0.0;
  bool event = false;
};

double true_mean(const ScenarioConfig& cfg, const SubjectTruth& s, double t);
double true_sd(const ScenarioConfig& cfg, const SubjectTruth& s, double t);
double true_log_hazard(const ScenarioConfig& cfg, const SubjectTruth& s, double t);
/// Adaptive Gauss-Kronrod integral of the true hazard over [0, t].
double true_cumulative_hazard(const ScenarioConfig& cfg, const SubjectTruth& s, double t, double abs_tol = 1e-11);

SubjectTruth simulate_subject_truth(const ScenarioConfig& cfg, Engine& eng);
/// Marker values at every grid time, before truncation.
std::vector<double> simulate_longitudinal(const ScenarioConfig& cfg, const SubjectTruth& s, Engine& eng);

struct EventDraw {
  double time = 0.0;
  bool administrative = false;
};
/// Solves H(t) = -log u by Brent's method on a cumulative panel table.
EventDraw simulate_event_time(const ScenarioConfig& cfg, const SubjectTruth& s, double u);

/// Draws censoring and fills observed time / status; returns the number of
/// grid points kept (time <= observed time).
std::size_t apply_censoring(const ScenarioConfig& cfg, SubjectTruth& s, Engine& eng);

struct SimulatedData {
  ScenarioConfig cfg;
  LongitudinalDataset dataset;
  std::vector<SubjectTruth> truth;

  double event_rate() const;
};

/// Full dataset; subject i uses stream (seed, i), independent of scheduling.
SimulatedData simulate(const ScenarioConfig& cfg);

/// longitudinal.csv, survival.csv, truth.csv (per observation: m, sigma),
/// truth_subjects.csv and scenario.json.
void write_simulation(const SimulatedData& sim, const std::filesystem::path& dir);

/// 64-bit FNV-1a of `text`, as 16 hex digits.
std::string fnv1a_hex(std::string_view text);

}  // namespace jmvar
