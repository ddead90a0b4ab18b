#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "jmvar/jointmodel.hpp"

namespace jmvar {

struct SamplerConfig {
  int n_chains = 3;
  int n_warmup = 1000;
  int n_kept = 2000;
  std::uint64_t seed = 1;
  /// Spread of per-chain starting points, in rough posterior-sd units. 0
  /// starts every chain at the same point.
  double init_jitter = 1.0;
  /// Chains run on up to this many threads.
  int jobs = 1;
  double target_multivariate = 0.234;
  double target_scalar = 0.44;
  /// Sampling stops with a Timeout error once this passes.
  std::optional<std::chrono::steady_clock::time_point> deadline;
  /// Cooperative cancellation flag, checked every iteration.
  const std::atomic<bool>* cancel = nullptr;

  void validate() const;
  static SamplerConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Acceptance bookkeeping for one update block of one chain.
struct BlockStats {
  std::string name;
  bool gibbs = false;
  long warmup_proposed = 0, warmup_accepted = 0;
  long proposed = 0, accepted = 0;  // kept iterations only

  double rate() const noexcept { return proposed > 0 ? double(accepted) / double(proposed) : 0.0; }
};

struct ParamSummary {
  std::string name;
  double mean = 0.0, sd = 0.0, q025 = 0.0, q975 = 0.0;
  double rhat = 1.0, ess = 0.0, mcse = 0.0;
};

struct JointModelFit {
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> chains;  // per chain: n_kept x n_params
  std::vector<ParamSummary> summaries;
  std::vector<std::vector<BlockStats>> acceptance;  // per chain
  /// Posterior means of b_i per submodel, pooled over chains (subjects x n_random).
  std::vector<Eigen::MatrixXd> random_effect_means;
  double runtime_seconds = 0.0;
  std::uint64_t seed = 0;

  const ParamSummary* find(std::string_view name) const;
  /// Draws of one parameter, one vector per chain.
  std::vector<std::vector<double>> draws(std::size_t param) const;
};

/// Starting point: longitudinal blocks from Step-1 style LMM fits, hazard
/// coefficients at 0, spline coefficients from a penalized fit of the
/// baseline hazard alone.
JointParams initialize(const JointModel& model);

/// Per-chain perturbation of `base`; jitter 0 returns `base` unchanged.
JointParams jitter_params(const JointModel& model, const JointParams& base, double jitter, std::uint64_t seed);

JointModelFit sample(const JointModel& model, const SamplerConfig& cfg);

/// Runs one chain for `iterations` steps (all warmup) and reports the
/// sampler's cached log posterior next to the final parameters. For
/// consistency checks.
struct ChainProbe {
  JointParams params;
  double cached_log_posterior = 0.0;
};
ChainProbe probe_chain(const JointModel& model, const SamplerConfig& cfg, int iterations);

/// Split-chain potential scale reduction factor, clamped below at 1.
/// Returns +inf when the within-chain variance is zero.
double rhat(const std::vector<std::vector<double>>& chains);
/// Multi-chain effective sample size (Geyer initial positive sequence).
double ess(const std::vector<std::vector<double>>& chains);

std::vector<ParamSummary> summarize(const std::vector<std::string>& names, const std::vector<Eigen::MatrixXd>& chains);

/// parameter,mean,sd,q2.5,q97.5,rhat,ess,mcse
void write_posterior_summary(const std::filesystem::path& path, const JointModelFit& fit);
/// Per chain and block acceptance counts.
void write_acceptance(const std::filesystem::path& path, const JointModelFit& fit);

/// Chain dump: '#' manifest lines, then chain,iteration,<params...>.
void write_chains(const std::filesystem::path& path, const JointModelFit& fit, const std::vector<std::string>& manifest);
struct ChainFile {
  std::vector<std::string> manifest;
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> chains;
};
ChainFile read_chains(const std::filesystem::path& path);

}  // namespace jmvar
