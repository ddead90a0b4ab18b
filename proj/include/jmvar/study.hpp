#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "jmvar/jointmodel.hpp"
#include "jmvar/lmm.hpp"
#include "jmvar/mcmc.hpp"
#include "jmvar/simulate.hpp"

namespace jmvar {

/// Two-step estimation: homoscedastic LMM, transformed residuals as a second
/// outcome, then a joint model with current-value associations for both.
struct TwoStepOptions {
  ResidualKind residual = ResidualKind::Absolute;
  ResidualScaling scaling = ResidualScaling::Leverage;
  std::string residual_outcome = "absres";
  LmmMethod method = LmmMethod::REML;
  int quad_nodes = 15;
  BaselineSpec baseline;
  PriorSet priors;
};

struct TwoStepFit {
  LmmFit lmm;
  std::shared_ptr<const LongitudinalDataset> augmented;
  JointModelSpec spec;
  JointModelFit joint;
};

/// Joint spec used by the two-step pipeline: `marker` model for the marker,
/// random intercept and slope for the residual outcome.
JointModelSpec two_step_spec(const std::string& outcome, const TimeModel& marker, const TwoStepOptions& opt);

TwoStepFit fit_two_step(const LongitudinalDataset& ds, const std::string& outcome, const TimeModel& marker,
                        const TwoStepOptions& opt, const SamplerConfig& sampler);

/// Marker model matching a scenario's generating trajectory.
TimeModel scenario_time_model(const ScenarioConfig& cfg);

struct StudyConfig {
  ScenarioConfig scenario;
  int n_replicates = 50;
  std::uint64_t seed = 1;
  SamplerConfig sampler;
  TwoStepOptions two_step;
  int jobs = 1;
  double timeout_min = 30.0;
  double rhat_threshold = 1.1;
  /// Also persist every replicate's chains (large).
  bool keep_chains = false;

  void validate() const;
  static StudyConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  std::string hash() const;
};

struct ParamEstimate {
  std::string name;
  double mean = 0.0, sd = 0.0, lower = 0.0, upper = 0.0, rhat = 1.0;
  bool operator==(const ParamEstimate&) const = default;
};

struct ReplicateResult {
  int id = 0;  // 1-based
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double runtime_seconds = 0.0;
  double event_rate = 0.0;
  std::vector<ParamEstimate> params;

  const ParamEstimate* find(const std::string& name) const;
  bool operator==(const ReplicateResult&) const = default;
};

/// A parameter tracked by the study summary.
struct TrackedParam {
  std::string label;  // e.g. beta0, alpha_sigma
  std::string name;   // fitted parameter name
  double truth = 0.0;
  bool excludable = false;  // subject to the R-hat exclusion rule
};

/// Fixed effects of the marker plus both associations, with their truths.
std::vector<TrackedParam> tracked_parameters(const ScenarioConfig& cfg, const TwoStepOptions& opt);

/// Seeds used by replicate k (1-based).
std::uint64_t replicate_data_seed(std::uint64_t master, int k);
std::uint64_t replicate_sampler_seed(std::uint64_t master, int k);

/// One replicate end to end; never throws for model failures.
ReplicateResult run_replicate(const StudyConfig& cfg, int k, const std::filesystem::path* artifacts = nullptr);

using ProgressFn = std::function<void(const ReplicateResult&)>;

/// Runs all replicates on `cfg.jobs` workers; results ordered by id. With
/// `out_dir`, each replicate writes its artifacts under replicates/NNNN.
std::vector<ReplicateResult> run_study(const StudyConfig& cfg, const std::filesystem::path* out_dir = nullptr,
                                       const ProgressFn& progress = {});

struct SummaryRow {
  std::string label, name;
  double truth = 0.0;
  bool available = false;
  int n_included = 0, n_excluded = 0;
  double mean = 0.0, bias = 0.0, ese = 0.0, mpsd = 0.0, cr = 0.0;
  bool operator==(const SummaryRow&) const = default;
};

struct StudySummary {
  int n_replicates = 0, n_failed = 0;
  std::vector<SummaryRow> rows;
  const SummaryRow* find(const std::string& label) const;
};

StudySummary summarize_study(const std::vector<ReplicateResult>& results, const std::vector<TrackedParam>& params,
                             double rhat_threshold = 1.1);

/// Long-format per-replicate estimates. Runtimes are left out so the file
/// is reproducible; read_results leaves them at 0.
void write_results(const std::filesystem::path& path, const std::vector<ReplicateResult>& results);
std::vector<ReplicateResult> read_results(const std::filesystem::path& path);
void write_timings(const std::filesystem::path& path, const std::vector<ReplicateResult>& results);

void write_summary(const std::filesystem::path& path, const StudySummary& s);
std::string render_summary(const StudySummary& s);

}  // namespace jmvar
