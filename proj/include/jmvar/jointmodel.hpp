#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "jmvar/dataset.hpp"
#include "jmvar/quadrature.hpp"
#include "jmvar/splines.hpp"
#include "jmvar/time_model.hpp"

namespace jmvar {

/// One longitudinal mixed submodel of the joint model.
struct SubmodelSpec {
  std::string outcome;
  TimeModel model = TimeModel::linear();
  /// Current value of this submodel's mean enters the hazard.
  bool associated = true;
  /// Holds the residual SD fixed instead of sampling it.
  std::optional<double> fixed_residual_sd;
};

struct BaselineSpec {
  int degree = 3;
  int n_basis = 9;
  int penalty_order = 2;
  /// Explicit interior knots; empty places them at event-time quantiles.
  std::vector<double> knots;
};

/// Prior settings. With `standardized`, normal and half-normal scales are
/// expressed in units of the outcome / covariate standard deviations.
struct PriorSet {
  bool standardized = true;
  double fixed_sd = 10.0;        // beta, gamma, alpha
  double sd_scale = 5.0;         // half-normal on residual and random-effect SDs
  double lkj_eta = 1.0;          // correlation matrices
  double smooth_sd_scale = 2.0;  // half-normal on the spline smoothing SD
  double spline_ridge_var = 100.0;
};

struct JointModelSpec {
  std::vector<SubmodelSpec> submodels;
  bool survival = true;
  /// Baseline covariates in the hazard; nullopt uses every dataset covariate.
  std::optional<std::vector<std::string>> covariates;
  BaselineSpec baseline;
  int quad_nodes = 15;
  PriorSet priors;

  static JointModelSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SubmodelParams {
  Eigen::VectorXd beta;
  Eigen::MatrixXd Sigma;  // random-effect covariance
  double tau2 = 1.0;      // residual variance
  Eigen::MatrixXd b;      // subjects x n_random
};

struct JointParams {
  std::vector<SubmodelParams> sub;
  Eigen::VectorXd spline;  // log-baseline-hazard coefficients
  Eigen::VectorXd gamma;   // baseline covariates
  Eigen::VectorXd alpha;   // one per submodel; zero when not associated
  double smooth_sd = 1.0;
};

/// Joint model bound to a dataset: bases fitted, designs and hazard
/// quadrature nodes precomputed. Immutable; evaluation is thread-safe.
class JointModel {
 public:
  JointModel(JointModelSpec spec, std::shared_ptr<const LongitudinalDataset> data);

  const JointModelSpec& spec() const noexcept { return spec_; }
  const LongitudinalDataset& data() const noexcept { return *data_; }
  std::size_t n_subjects() const noexcept { return data_->subject_count(); }
  int n_submodels() const noexcept { return static_cast<int>(spec_.submodels.size()); }
  const TimeModel& time_model(int k) const { return models_.at(k); }
  const BSplineBasis& baseline() const { return *basis_; }
  bool has_survival() const noexcept { return spec_.survival; }
  int n_spline() const noexcept { return spec_.survival ? basis_->size() : 0; }
  int n_covariates() const noexcept { return static_cast<int>(cov_index_.size()); }
  std::vector<std::string> covariate_names() const;
  const Eigen::MatrixXd& penalty() const noexcept { return penalty_; }
  const Eigen::VectorXd& penalty_eigenvalues() const noexcept { return penalty_eigenvalues_; }

  /// Zero-valued parameters with the right shapes.
  JointParams zero_params() const;

  double trajectory(const JointParams& p, int k, std::size_t subject, double t) const;
  double log_hazard(const JointParams& p, std::size_t subject, double t) const;
  /// Integral of the hazard over [0, t]: Gauss-Kronrod on panels split at
  /// the interior baseline knots.
  double cumulative_hazard(const JointParams& p, std::size_t subject, double t) const;

  /// Gaussian log-likelihood of submodel k's observations given b.
  double longitudinal_loglik(const JointParams& p, int k) const;
  double longitudinal_loglik(const JointParams& p, int k, std::size_t subject) const;
  /// sum_i log N(b_i | 0, Sigma_k); -inf when Sigma_k is not PD.
  double random_effects_logdens(const JointParams& p, int k) const;
  /// delta_i log h_i(T_i) - H_i(T_i), summed over subjects.
  double survival_loglik(const JointParams& p) const;
  double survival_loglik(const JointParams& p, std::size_t subject) const;
  double log_prior(const JointParams& p) const;
  /// Full log posterior up to a constant; -inf outside the support.
  double log_posterior(const JointParams& p) const;

  /// Gradient of survival_loglik over (spline, gamma, alpha).
  Eigen::VectorXd survival_gradient(const JointParams& p) const;
  /// Hessian of survival_loglik over (spline, gamma, alpha). Exact: the log
  /// hazard is linear in these.
  Eigen::MatrixXd survival_hessian(const JointParams& p) const;
  /// Gradient of longitudinal_loglik over beta_k followed by vec(b_k) (row-major by subject).
  Eigen::VectorXd longitudinal_gradient(const JointParams& p, int k) const;

  /// Precomputed per-subject designs and hazard nodes, used by the sampler.
  struct SubjectDesign {
    std::vector<Eigen::MatrixXd> X;  // per submodel: n_obs x n_fixed
    std::vector<Eigen::VectorXd> y;
  };
  struct HazardNodes {
    std::vector<std::size_t> offset;  // subject i uses [offset[i], offset[i+1])
    Eigen::VectorXd weight;
    Eigen::MatrixXd B;                 // nodes x n_spline
    std::vector<Eigen::MatrixXd> X;    // per submodel: nodes x n_fixed
    Eigen::MatrixXd B_event;           // subjects x n_spline
    std::vector<Eigen::MatrixXd> X_event;
    Eigen::MatrixXd W;                 // subjects x n_covariates
    Eigen::VectorXd status;            // 1 event, 0 censored
  };
  const std::vector<SubjectDesign>& designs() const noexcept { return designs_; }
  const HazardNodes& nodes() const noexcept { return nodes_; }

  /// Scales behind the standardized priors.
  struct Scales {
    std::vector<double> outcome_mean, outcome_sd;        // per submodel
    std::vector<Eigen::VectorXd> column_mean, column_sd;  // per submodel, per fixed column
    Eigen::VectorXd covariate_mean, covariate_sd;
  };
  const Scales& scales() const noexcept { return scales_; }

  /// Prior sd of fixed effect j of submodel k and its prior mean.
  double beta_prior_sd(int k, int j) const;
  double beta_prior_mean(int k, int j) const;
  double gamma_prior_sd(int c) const;
  double alpha_prior_sd(int k) const;
  double residual_sd_prior_scale(int k) const;
  double random_sd_prior_scale(int k, int r) const;

  /// Parameter names in chain-dump order (see flatten()).
  std::vector<std::string> parameter_names() const;
  /// Population parameters flattened: per submodel beta, random-effect SDs,
  /// correlations (lower triangle, column-major), residual SD (unless
  /// fixed); then associations for associated submodels, gamma, spline, smoothing SD.
  Eigen::VectorXd flatten(const JointParams& p) const;

 private:
  void precompute();

  JointModelSpec spec_;
  std::shared_ptr<const LongitudinalDataset> data_;
  std::vector<int> outcome_index_;
  std::vector<TimeModel> models_;
  std::vector<int> cov_index_;
  std::optional<BSplineBasis> basis_;
  Eigen::MatrixXd penalty_;
  Eigen::VectorXd penalty_eigenvalues_;
  const QuadratureRule* rule_ = nullptr;
  std::vector<SubjectDesign> designs_;
  HazardNodes nodes_;
  Scales scales_;
};

/// Quadrature nodes and weights for integrating over [0, t], with panel
/// boundaries at each break strictly inside (0, t).
void hazard_quadrature(double t, const std::vector<double>& breaks, const QuadratureRule& rule,
                       std::vector<double>& nodes, std::vector<double>& weights);

/// Integral over [0, t] of exp(log_h) on knot-split panels.
double integrate_hazard(const std::function<double(double)>& log_h, double t, const std::vector<double>& breaks,
                        const QuadratureRule& rule);

/// Log density of an LKJ(eta) correlation matrix up to its normalizing constant.
double lkj_logdens(const Eigen::MatrixXd& corr, double eta);

}  // namespace jmvar
