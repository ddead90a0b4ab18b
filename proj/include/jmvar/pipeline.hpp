#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "jmvar/dataset.hpp"
#include "jmvar/lmm.hpp"
#include "jmvar/mcmc.hpp"
#include "jmvar/simulate.hpp"
#include "jmvar/study.hpp"

namespace jmvar {

/// Output directory written through a sibling staging directory. Nothing
/// appears under the final path unless commit() is reached; an uncommitted
/// stage is removed on destruction.
class StagedDir {
 public:
  explicit StagedDir(std::filesystem::path final_dir);
  ~StagedDir();
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;

  const std::filesystem::path& path() const noexcept { return stage_; }
  /// Moves every staged entry into the final directory, replacing entries
  /// of the same name, and returns the final paths.
  std::vector<std::filesystem::path> commit();

 private:
  std::filesystem::path final_, stage_;
  bool committed_ = false;
};

/// simulate: dataset, truth files and scenario.json under `out`.
nlohmann::json run_simulate(const ScenarioConfig& cfg, const std::filesystem::path& out);

struct LmmRequest {
  std::filesystem::path data;  // directory with longitudinal.csv / survival.csv
  ColumnSchema schema;
  std::string outcome = "y";
  TimeModel model = TimeModel::linear();
  LmmMethod method = LmmMethod::REML;
};
/// fit-lmm: lmm.json, estimates.csv, residuals.csv, random_effects.csv.
nlohmann::json run_fit_lmm(const LmmRequest& req, const std::filesystem::path& out);

struct JointRequest {
  std::filesystem::path data;
  ColumnSchema schema;
  /// Output of fit-lmm; adds the transformed residuals as an outcome.
  std::optional<std::filesystem::path> lmm;
  ResidualKind residual = ResidualKind::Absolute;
  ResidualScaling scaling = ResidualScaling::Leverage;
  /// Joint spec; when absent the two-step spec for the fit-lmm outcome.
  std::optional<nlohmann::json> spec;
  int quad_nodes = 15;
  SamplerConfig sampler;
  bool keep_chains = true;
};
/// fit-joint: spec.json, sampler.json, posterior.csv, acceptance.csv,
/// trajectories.csv, random_effects_<outcome>.csv and chains.csv.
nlohmann::json run_fit_joint(const JointRequest& req, const std::filesystem::path& out);

/// run-study: config.json, results.csv, timings.csv, summary.csv and
/// replicates/NNNN/.
nlohmann::json run_study_dir(const StudyConfig& cfg, const std::filesystem::path& out, const ProgressFn& progress = {});

/// Recomputes summary.csv text from a study directory's config.json and
/// results.csv. A threshold overrides the configured one.
std::string summarize_study_dir(const std::filesystem::path& dir, std::optional<double> rhat_threshold = {});

enum class PlotKind { SigmaTrajectories, MarkerTrajectories, KmVsAnalytic };
PlotKind parse_plot_kind(std::string_view text);

struct PlotRequest {
  PlotKind kind = PlotKind::SigmaTrajectories;
  std::optional<std::filesystem::path> truth;  // simulate output
  std::optional<std::filesystem::path> fit;    // fit-joint or fit-lmm output
  std::optional<ScenarioConfig> scenario;      // km-vs-analytic
  int km_subjects = 20000;
  int km_points = 101;
};
/// Plot table as CSV text; km-vs-analytic ends with a "# max_gap=" footer.
std::string plot_data(const PlotRequest& req);

/// Version strings of the library and its numeric dependencies.
nlohmann::json version_info();

}  // namespace jmvar
