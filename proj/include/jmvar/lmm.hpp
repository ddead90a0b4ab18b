#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "jmvar/dataset.hpp"
#include "jmvar/time_model.hpp"

namespace jmvar {

enum class LmmMethod { REML, ML };

LmmMethod parse_lmm_method(std::string_view text);

struct LmmOptions {
  int max_iterations = 500;
  double relative_tolerance = 1e-8;
  /// A fit is accepted when |gradient| / max(1, |deviance|) is below this.
  double stationarity_tolerance = 1e-4;
  double min_eigenvalue = 1e-8;
};

/// Step-1 fit: homoscedastic linear mixed model.
struct LmmFit {
  std::string outcome;
  TimeModel model;
  LmmMethod method = LmmMethod::REML;
  Eigen::VectorXd beta;
  Eigen::MatrixXd beta_cov;  // sigma2 (X' W^-1 X)^-1
  Eigen::MatrixXd Sigma;     // random-effect covariance
  double sigma2 = 0.0;
  Eigen::MatrixXd b;         // subjects x n_random, empirical Bayes
  double loglik = 0.0;       // (restricted) log-likelihood at the optimum
  int iterations = 0;
  double gradient_norm = 0.0;
  bool boundary = false;
  std::vector<std::string> warnings;
  std::vector<double> objective_trace;  // deviance after each accepted step
};

/// Profiled (restricted) deviance -2 log L of the variance parameters,
/// with beta and sigma^2 profiled out. Parameters are the lower-triangular
/// Cholesky factor of Sigma / sigma^2, column-major, log on the diagonal.
class LmmObjective {
 public:
  LmmObjective(const LongitudinalDataset& ds, std::string_view outcome, const TimeModel& model, LmmMethod method);

  int n_params() const noexcept { return n_random_ * (n_random_ + 1) / 2; }
  int n_fixed() const noexcept { return n_fixed_; }
  int n_random() const noexcept { return n_random_; }
  std::size_t n_observations() const noexcept { return n_obs_; }

  double deviance(const Eigen::VectorXd& theta) const;
  /// Analytic gradient of deviance().
  Eigen::VectorXd gradient(const Eigen::VectorXd& theta) const;

  struct Profile {
    double deviance = 0.0;
    Eigen::VectorXd beta;
    Eigen::MatrixXd xtwx;  // X' W^-1 X
    double sigma2 = 0.0;
    Eigen::MatrixXd relative_cov;  // Sigma / sigma^2
  };
  Profile profile(const Eigen::VectorXd& theta) const;

  Eigen::MatrixXd cholesky_factor(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd theta_from_relative_cov(const Eigen::MatrixXd& relative_cov) const;

  /// Method-of-moments starting point (per-subject OLS of residuals).
  Eigen::VectorXd initial_theta() const;

  /// Per-subject sufficient statistics, exposed for empirical Bayes.
  struct SubjectStats {
    double n = 0;
    Eigen::MatrixXd xtx, ztz, ztx;
    Eigen::VectorXd xty, zty;
    double yty = 0.0;
  };
  const std::vector<SubjectStats>& stats() const noexcept { return stats_; }

 private:
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad, Profile* profile) const;

  LmmMethod method_;
  int n_fixed_ = 0, n_random_ = 0;
  std::size_t n_obs_ = 0;
  std::vector<SubjectStats> stats_;
};

/// Fits by (restricted) maximum likelihood using BFGS on the log-Cholesky
/// parameters with restarts. Throws Validation on a singular design
/// (naming the collinear terms) and Convergence when no start reaches a
/// stationary point.
LmmFit fit_lmm(const LongitudinalDataset& ds, std::string_view outcome, TimeModel model,
               LmmMethod method = LmmMethod::REML, const LmmOptions& options = {});

/// b_i = Sigma Z_i' V_i^-1 (y_i - X_i beta); zero for subjects without data.
Eigen::MatrixXd empirical_bayes(const LmmFit& fit, const LongitudinalDataset& ds);

enum class ResidualKind { Raw, Squared, Absolute };

ResidualKind parse_residual_kind(std::string_view text);
const char* residual_kind_name(ResidualKind kind) noexcept;

/// Leverage divides each residual by its model standard deviation relative
/// to sigma, so that |eps| has the same expectation at every visit. Raw
/// conditional residuals shrink where a subject's random effects have high
/// leverage (few visits, first and last visit), which links short follow-up
/// to small residuals.
enum class ResidualScaling { None, Leverage };

ResidualScaling parse_residual_scaling(std::string_view text);
const char* residual_scaling_name(ResidualScaling scaling) noexcept;

struct ResidualSeries {
  struct Subject {
    std::vector<double> times, raw, squared, absolute;
    /// sqrt(Var(eps_ij)) / sigma, in (0, 1].
    std::vector<double> scale;
  };
  std::vector<Subject> subjects;  // dataset subject order

  /// Per-subject series of the chosen transform, ready for with_outcome().
  std::vector<Series> as_series(ResidualKind kind, ResidualScaling scaling = ResidualScaling::None) const;
};

/// Applies `kind` to raw / scale (Leverage) or raw (None).
double transform_residual(double raw, double scale, ResidualKind kind, ResidualScaling scaling);

/// eps_i(t) = y_i(t) - x(t)'beta - z(t)'b_i with the fit's empirical Bayes b.
/// scale^2 = sigma^2 [V_i^-1 - V_i^-1 X_i Cov(beta) X_i' V_i^-1]_jj, the
/// sampling variance of eps_ij over sigma^2.
ResidualSeries residuals(const LmmFit& fit, const LongitudinalDataset& ds);

}  // namespace jmvar
