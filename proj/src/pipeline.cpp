#include "jmvar/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <random>
#include <unistd.h>

#include <Eigen/Core>
#include <boost/version.hpp>

#include "jmvar/csv.hpp"
#include "jmvar/error.hpp"
#include "jmvar/jointmodel.hpp"
#include "jmvar/quadrature.hpp"

namespace fs = std::filesystem;

namespace jmvar {

namespace {

constexpr const char* kVersion = "0.1.0";

using Key = std::pair<std::string, double>;  // subject, time

nlohmann::json read_json(const fs::path& path) {
  require(fs::exists(path), ErrorCode::Io, "missing artifact " + path.string());
  try {
    return nlohmann::json::parse(csv::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, path.filename().string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) { csv::write_atomic(path, j.dump(2) + "\n"); }

double number_at(const csv::Table& t, const std::vector<std::string>& row, int col, const std::string& file) {
  auto v = csv::parse_double(row.at(static_cast<std::size_t>(col)));
  require(v.has_value(), ErrorCode::Schema, file + ": bad number in column '" + t.header[col] + "'");
  return *v;
}

int need_column(const csv::Table& t, const std::string& name, const std::string& file) {
  int c = t.column(name);
  require(c >= 0, ErrorCode::Schema, file + ": missing column '" + name + "'");
  return c;
}

std::string residual_outcome_name(ResidualKind k) {
  switch (k) {
    case ResidualKind::Raw: return "res";
    case ResidualKind::Squared: return "sqres";
    case ResidualKind::Absolute: return "absres";
  }
  return "absres";
}

csv::Table random_effects_table(const std::vector<std::string>& ids, const std::vector<std::string>& names,
                                const Eigen::MatrixXd& b) {
  csv::Table t;
  t.header = {"subject"};
  t.header.insert(t.header.end(), names.begin(), names.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::vector<std::string> row{ids[i]};
    for (Eigen::Index r = 0; r < b.cols(); ++r) row.push_back(csv::format_double(b(static_cast<Eigen::Index>(i), r)));
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string cell(const std::optional<double>& v) { return v ? csv::format_double(*v) : std::string(); }

}  // namespace

StagedDir::StagedDir(fs::path final_dir) : final_(std::move(final_dir)) {
  require(!final_.empty(), ErrorCode::InvalidArgument, "output directory is empty");
  if (!final_.has_filename()) final_ = final_.parent_path();
  std::random_device rd;
  fs::path parent = final_.has_parent_path() ? final_.parent_path() : fs::path(".");
  fs::create_directories(parent);
  stage_ = parent / ("." + final_.filename().string() + ".partial-" + std::to_string(::getpid()) + "-" +
                     std::to_string(rd() & 0xffffff));
  fs::create_directories(stage_);
}

StagedDir::~StagedDir() {
  if (committed_) return;
  std::error_code ec;
  fs::remove_all(stage_, ec);
}

std::vector<fs::path> StagedDir::commit() {
  fs::create_directories(final_);
  std::vector<fs::path> out;
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(stage_)) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  for (const auto& src : entries) {
    fs::path dst = final_ / src.filename();
    if (fs::exists(dst)) fs::remove_all(dst);
    fs::rename(src, dst);
    out.push_back(dst);
  }
  fs::remove_all(stage_);
  committed_ = true;
  return out;
}

nlohmann::json version_info() {
  return {{"jmvar", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"boost", BOOST_LIB_VERSION},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

// ---------------------------------------------------------------- simulate

nlohmann::json run_simulate(const ScenarioConfig& cfg, const fs::path& out) {
  cfg.validate();
  StagedDir stage(out);
  SimulatedData sim = simulate(cfg);
  write_simulation(sim, stage.path());
  auto files = stage.commit();
  std::size_t n_obs = 0;
  for (std::size_t i = 0; i < sim.dataset.subject_count(); ++i) n_obs += sim.dataset.series(cfg.outcome, i).size();
  std::size_t admin = 0;
  for (const auto& s : sim.truth) admin += s.administrative ? 1 : 0;
  nlohmann::json j{{"config_hash", cfg.hash()},
                   {"seed", cfg.seed},
                   {"n_subjects", cfg.n_subjects},
                   {"n_observations", n_obs},
                   {"event_rate", sim.event_rate()},
                   {"administrative", admin}};
  for (const auto& f : files) j["outputs"].push_back(f.string());
  return j;
}

// ---------------------------------------------------------------- fit-lmm

nlohmann::json run_fit_lmm(const LmmRequest& req, const fs::path& out) {
  IngestResult in = ingest_dir(req.data, req.schema);
  const auto& ds = in.dataset;
  LmmFit fit = fit_lmm(ds, req.outcome, req.model, req.method);
  ResidualSeries res = residuals(fit, ds);

  StagedDir stage(out);
  const auto fixed = fit.model.fixed_names();
  const auto random = fit.model.random_names();
  nlohmann::json j;
  j["outcome"] = fit.outcome;
  j["model"] = nlohmann::json::parse(fit.model.to_json());
  j["method"] = fit.method == LmmMethod::REML ? "reml" : "ml";
  for (std::size_t c = 0; c < fixed.size(); ++c) j["beta"][fixed[c]] = fit.beta[static_cast<Eigen::Index>(c)];
  j["Sigma"] = nlohmann::json::array();
  for (Eigen::Index r = 0; r < fit.Sigma.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < fit.Sigma.cols(); ++c) row.push_back(fit.Sigma(r, c));
    j["Sigma"].push_back(row);
  }
  j["sigma2"] = fit.sigma2;
  j["loglik"] = fit.loglik;
  j["iterations"] = fit.iterations;
  j["boundary"] = fit.boundary;
  j["warnings"] = fit.warnings;
  j["dropped_rows"] = in.report.dropped_rows;
  j["dropped_subjects"] = in.report.dropped_subjects;
  write_json(stage.path() / "lmm.json", j);

  csv::Table est;
  est.header = {"parameter", "estimate", "se"};
  for (std::size_t c = 0; c < fixed.size(); ++c) {
    auto ci = static_cast<Eigen::Index>(c);
    est.rows.push_back({"beta." + fit.outcome + "." + fixed[c], csv::format_double(fit.beta[ci]),
                        csv::format_double(std::sqrt(fit.beta_cov(ci, ci)))});
  }
  for (std::size_t r = 0; r < random.size(); ++r) {
    auto ri = static_cast<Eigen::Index>(r);
    est.rows.push_back({"sd." + fit.outcome + "." + random[r], csv::format_double(std::sqrt(fit.Sigma(ri, ri))), ""});
  }
  for (std::size_t c = 0; c < random.size(); ++c)
    for (std::size_t r = c + 1; r < random.size(); ++r) {
      auto ri = static_cast<Eigen::Index>(r), ci = static_cast<Eigen::Index>(c);
      double cor = fit.Sigma(ri, ci) / std::sqrt(fit.Sigma(ri, ri) * fit.Sigma(ci, ci));
      est.rows.push_back({"cor." + fit.outcome + "." + random[r] + "." + random[c], csv::format_double(cor), ""});
    }
  est.rows.push_back({"resid_sd." + fit.outcome, csv::format_double(std::sqrt(fit.sigma2)), ""});
  csv::write_atomic(stage.path() / "estimates.csv", csv::render(est));

  csv::Table rt;
  rt.header = {"subject", "time", "observed", "fitted", "raw", "squared", "absolute", "scale"};
  for (std::size_t i = 0; i < ds.subject_count(); ++i) {
    const auto& s = res.subjects[i];
    const auto& y = ds.series(fit.outcome, i);
    for (std::size_t o = 0; o < s.times.size(); ++o)
      rt.rows.push_back({ds.subject_ids()[i], csv::format_double(s.times[o]), csv::format_double(y.values[o]),
                         csv::format_double(y.values[o] - s.raw[o]), csv::format_double(s.raw[o]),
                         csv::format_double(s.squared[o]), csv::format_double(s.absolute[o]),
                         csv::format_double(s.scale[o])});
  }
  csv::write_atomic(stage.path() / "residuals.csv", csv::render(rt));
  csv::write_atomic(stage.path() / "random_effects.csv",
                    csv::render(random_effects_table(ds.subject_ids(), random, fit.b)));
  auto files = stage.commit();

  nlohmann::json summary{{"outcome", fit.outcome},   {"method", j["method"]},         {"loglik", fit.loglik},
                         {"iterations", fit.iterations}, {"boundary", fit.boundary},  {"warnings", fit.warnings},
                         {"n_subjects", ds.subject_count()}};
  for (const auto& f : files) summary["outputs"].push_back(f.string());
  return summary;
}

// ---------------------------------------------------------------- fit-joint

namespace {

/// Residual series from a fit-lmm directory aligned to `ds`'s subjects and
/// the marker's observation times.
std::vector<Series> load_residuals(const fs::path& lmm_dir, const LongitudinalDataset& ds, const std::string& outcome,
                                   ResidualKind kind, ResidualScaling scaling) {
  const fs::path path = lmm_dir / "residuals.csv";
  require(fs::exists(path), ErrorCode::Io, "missing artifact " + path.string());
  auto t = csv::read(path);
  const std::string file = "residuals.csv";
  const int cs = need_column(t, "subject", file), ct = need_column(t, "time", file);
  const int cr = need_column(t, "raw", file);
  const int cscale = scaling == ResidualScaling::None ? -1 : need_column(t, "scale", file);
  std::map<Key, double> value;
  for (const auto& row : t.rows) {
    require(row.size() == t.header.size(), ErrorCode::Schema, file + ": ragged row");
    const double scale = cscale < 0 ? 1.0 : number_at(t, row, cscale, file);
    require(scale > 0.0, ErrorCode::Validation, file + ": scale must be positive");
    value[{row[cs], number_at(t, row, ct, file)}] = transform_residual(number_at(t, row, cr, file), scale, kind, scaling);
  }
  std::vector<Series> out(ds.subject_count());
  for (std::size_t i = 0; i < ds.subject_count(); ++i) {
    const auto& y = ds.series(outcome, i);
    for (double time : y.times) {
      auto it = value.find({ds.subject_ids()[i], time});
      require(it != value.end(), ErrorCode::Validation,
              "residuals.csv has no row for subject " + ds.subject_ids()[i] + " at time " + csv::format_double(time));
      out[i].times.push_back(time);
      out[i].values.push_back(it->second);
    }
  }
  return out;
}

}  // namespace

nlohmann::json run_fit_joint(const JointRequest& req, const fs::path& out) {
  req.sampler.validate();
  IngestResult in = ingest_dir(req.data, req.schema);
  auto ds = std::make_shared<LongitudinalDataset>(std::move(in.dataset));
  nlohmann::json info;
  JointModelSpec spec;
  std::optional<std::string> marker, residual_outcome;
  if (req.lmm) {
    auto lj = read_json(*req.lmm / "lmm.json");
    require(lj.contains("outcome") && lj["outcome"].is_string() && lj.contains("model"), ErrorCode::Schema,
            "lmm.json: missing outcome or model");
    marker = lj["outcome"].get<std::string>();
    residual_outcome = residual_outcome_name(req.residual);
    auto series = load_residuals(*req.lmm, *ds, *marker, req.residual, req.scaling);
    ds = std::make_shared<LongitudinalDataset>(ds->with_outcome(*residual_outcome, std::move(series)));
    TwoStepOptions opt;
    opt.residual = req.residual;
    opt.scaling = req.scaling;
    opt.residual_outcome = *residual_outcome;
    opt.quad_nodes = req.quad_nodes;
    spec = two_step_spec(*marker, TimeModel::from_json(lj["model"].dump()), opt);
  }
  if (req.spec) spec = JointModelSpec::from_json(*req.spec);
  require(!spec.submodels.empty(), ErrorCode::Config, "fit-joint needs a fit-lmm directory or a joint spec");
  JointModel model(spec, ds);
  JointModelFit fit = sample(model, req.sampler);

  StagedDir stage(out);
  write_json(stage.path() / "spec.json", spec.to_json());
  write_json(stage.path() / "sampler.json", req.sampler.to_json());
  write_posterior_summary(stage.path() / "posterior.csv", fit);
  write_acceptance(stage.path() / "acceptance.csv", fit);

  // fitted trajectories at posterior mean parameters
  JointParams p = model.zero_params();
  csv::Table traj;
  traj.header = {"subject", "outcome", "time", "observed", "fitted"};
  for (int k = 0; k < model.n_submodels(); ++k) {
    const std::string& name = spec.submodels[k].outcome;
    const auto fixed = model.time_model(k).fixed_names();
    for (std::size_t c = 0; c < fixed.size(); ++c) {
      const ParamSummary* s = fit.find("beta." + name + "." + fixed[c]);
      require(s != nullptr, ErrorCode::Internal, "missing summary for beta." + name + "." + fixed[c]);
      p.sub[k].beta[static_cast<Eigen::Index>(c)] = s->mean;
    }
    if (model.time_model(k).n_random() > 0) {
      p.sub[k].b = fit.random_effect_means[k];
      csv::write_atomic(stage.path() / ("random_effects_" + name + ".csv"),
                        csv::render(random_effects_table(ds->subject_ids(), model.time_model(k).random_names(),
                                                         fit.random_effect_means[k])));
    }
    for (std::size_t i = 0; i < model.n_subjects(); ++i) {
      const auto& y = ds->series(name, i);
      for (std::size_t o = 0; o < y.size(); ++o)
        traj.rows.push_back({ds->subject_ids()[i], name, csv::format_double(y.times[o]), csv::format_double(y.values[o]),
                             csv::format_double(model.trajectory(p, k, i, y.times[o]))});
    }
  }
  csv::write_atomic(stage.path() / "trajectories.csv", csv::render(traj));

  nlohmann::json fj{{"seed", req.sampler.seed}, {"spec_hash", fnv1a_hex(spec.to_json().dump())}};
  if (marker) {
    fj["marker"] = *marker;
    fj["residual_outcome"] = *residual_outcome;
    fj["residual"] = residual_kind_name(req.residual);
    fj["residual_scaling"] = residual_scaling_name(req.scaling);
  }
  write_json(stage.path() / "fit.json", fj);
  if (req.keep_chains)
    write_chains(stage.path() / "chains.csv", fit,
                 {"seed=" + std::to_string(req.sampler.seed), "spec_hash=" + fj["spec_hash"].get<std::string>()});
  auto files = stage.commit();

  info = fj;
  info["runtime_seconds"] = fit.runtime_seconds;
  double max_rhat = 1.0;
  for (const auto& s : fit.summaries) {
    info["posterior"][s.name] = {{"mean", s.mean}, {"sd", s.sd}, {"q2.5", s.q025}, {"q97.5", s.q975}, {"rhat", s.rhat}};
    if (!(s.rhat <= max_rhat)) max_rhat = s.rhat;
  }
  info["max_rhat"] = max_rhat;
  for (const auto& f : files) info["outputs"].push_back(f.string());
  return info;
}

// ---------------------------------------------------------------- study

nlohmann::json run_study_dir(const StudyConfig& cfg, const fs::path& out, const ProgressFn& progress) {
  cfg.validate();
  StagedDir stage(out);
  write_json(stage.path() / "config.json", cfg.to_json());
  fs::path root = stage.path();
  auto results = run_study(cfg, &root, progress);
  if (cfg.sampler.cancel && cfg.sampler.cancel->load()) fail(ErrorCode::Timeout, "study cancelled");
  write_results(stage.path() / "results.csv", results);
  write_timings(stage.path() / "timings.csv", results);
  StudySummary s = summarize_study(results, tracked_parameters(cfg.scenario, cfg.two_step), cfg.rhat_threshold);
  write_summary(stage.path() / "summary.csv", s);
  stage.commit();

  nlohmann::json j{{"config_hash", cfg.hash()}, {"replicates", s.n_replicates}, {"failed", s.n_failed}};
  double total = 0.0, worst = 0.0;
  for (const auto& r : results) {
    total += r.runtime_seconds;
    worst = std::max(worst, r.runtime_seconds);
  }
  j["mean_replicate_seconds"] = results.empty() ? 0.0 : total / static_cast<double>(results.size());
  j["max_replicate_seconds"] = worst;
  j["outputs"] = {(out / "config.json").string(), (out / "results.csv").string(), (out / "timings.csv").string(),
                  (out / "summary.csv").string(), (out / "replicates").string()};
  return j;
}

std::string summarize_study_dir(const fs::path& dir, std::optional<double> rhat_threshold) {
  StudyConfig cfg = StudyConfig::from_json(read_json(dir / "config.json"));
  require(fs::exists(dir / "results.csv"), ErrorCode::Io, "missing artifact " + (dir / "results.csv").string());
  auto results = read_results(dir / "results.csv");
  StudySummary s = summarize_study(results, tracked_parameters(cfg.scenario, cfg.two_step),
                                   rhat_threshold.value_or(cfg.rhat_threshold));
  return render_summary(s);
}

// ---------------------------------------------------------------- plot data

PlotKind parse_plot_kind(std::string_view text) {
  if (text == "sigma-trajectories") return PlotKind::SigmaTrajectories;
  if (text == "marker-trajectories") return PlotKind::MarkerTrajectories;
  if (text == "km-vs-analytic") return PlotKind::KmVsAnalytic;
  fail(ErrorCode::Config, "plot kind '" + std::string(text) +
                              "' (expected sigma-trajectories, marker-trajectories or km-vs-analytic)");
}

namespace {

struct TruthRows {
  std::vector<Key> keys;
  std::map<Key, double> m, sigma, observed;
};

TruthRows read_truth(const fs::path& dir) {
  TruthRows out;
  auto t = csv::read(dir / "truth.csv");
  const std::string file = "truth.csv";
  const int cs = need_column(t, "subject", file), ct = need_column(t, "time", file);
  const int cm = need_column(t, "m", file), cg = need_column(t, "sigma", file);
  for (const auto& row : t.rows) {
    Key k{row[cs], number_at(t, row, ct, file)};
    out.keys.push_back(k);
    out.m[k] = number_at(t, row, cm, file);
    out.sigma[k] = number_at(t, row, cg, file);
  }
  ScenarioConfig cfg = ScenarioConfig::from_json(read_json(dir / "scenario.json"));
  auto ds = ingest_dir(dir).dataset;
  for (std::size_t i = 0; i < ds.subject_count(); ++i) {
    const auto& y = ds.series(cfg.outcome, i);
    for (std::size_t o = 0; o < y.size(); ++o) out.observed[{ds.subject_ids()[i], y.times[o]}] = y.values[o];
  }
  return out;
}

struct FittedRows {
  std::vector<Key> keys;
  std::map<Key, double> marker, residual, observed;
  std::optional<ResidualKind> kind;
};

FittedRows read_fitted(const fs::path& dir) {
  FittedRows out;
  if (fs::exists(dir / "trajectories.csv")) {
    auto fj = read_json(dir / "fit.json");
    auto spec = read_json(dir / "spec.json");
    std::string marker = fj.value("marker", std::string());
    std::string resid = fj.value("residual_outcome", std::string());
    if (marker.empty() && spec.contains("submodels") && !spec["submodels"].empty())
      marker = spec["submodels"][0].value("outcome", std::string());
    if (fj.contains("residual")) out.kind = parse_residual_kind(fj["residual"].get<std::string>());
    auto t = csv::read(dir / "trajectories.csv");
    const std::string file = "trajectories.csv";
    const int cs = need_column(t, "subject", file), co = need_column(t, "outcome", file);
    const int ct = need_column(t, "time", file), cy = need_column(t, "observed", file);
    const int cf = need_column(t, "fitted", file);
    for (const auto& row : t.rows) {
      Key k{row[cs], number_at(t, row, ct, file)};
      if (row[co] == marker) {
        out.keys.push_back(k);
        out.marker[k] = number_at(t, row, cf, file);
        out.observed[k] = number_at(t, row, cy, file);
      } else if (row[co] == resid) {
        out.residual[k] = number_at(t, row, cf, file);
      }
    }
    return out;
  }
  require(fs::exists(dir / "residuals.csv"), ErrorCode::Io,
          "missing artifact: " + dir.string() + " has neither trajectories.csv nor residuals.csv");
  auto t = csv::read(dir / "residuals.csv");
  const std::string file = "residuals.csv";
  const int cs = need_column(t, "subject", file), ct = need_column(t, "time", file);
  const int cy = need_column(t, "observed", file), cf = need_column(t, "fitted", file);
  for (const auto& row : t.rows) {
    Key k{row[cs], number_at(t, row, ct, file)};
    out.keys.push_back(k);
    out.marker[k] = number_at(t, row, cf, file);
    out.observed[k] = number_at(t, row, cy, file);
  }
  return out;
}

template <class M>
std::optional<double> lookup(const M& m, const Key& k) {
  auto it = m.find(k);
  if (it == m.end()) return std::nullopt;
  return it->second;
}

std::string trajectory_table(const PlotRequest& req) {
  require(req.truth || req.fit, ErrorCode::InvalidArgument, "plotdata needs --truth and/or --fit");
  std::optional<TruthRows> truth;
  std::optional<FittedRows> fitted;
  if (req.truth) truth = read_truth(*req.truth);
  if (req.fit) fitted = read_fitted(*req.fit);
  const auto& keys = truth ? truth->keys : fitted->keys;
  csv::Table t;
  if (req.kind == PlotKind::SigmaTrajectories) {
    t.comments = {"# fitted_R: posterior-mean residual trajectory; fitted_sigma: R converted to the SD scale"};
    t.header = {"subject", "time", "true_sigma", "fitted_R", "fitted_sigma"};
    for (const auto& k : keys) {
      std::optional<double> ts, fr, fs_;
      if (truth) ts = lookup(truth->sigma, k);
      if (fitted) fr = lookup(fitted->residual, k);
      if (fr && fitted->kind) {
        if (*fitted->kind == ResidualKind::Absolute) fs_ = *fr * std::sqrt(std::acos(-1.0) / 2.0);
        if (*fitted->kind == ResidualKind::Squared && *fr > 0.0) fs_ = std::sqrt(*fr);
      }
      t.rows.push_back({k.first, csv::format_double(k.second), cell(ts), cell(fr), cell(fs_)});
    }
  } else {
    t.header = {"subject", "time", "observed", "true_m", "fitted_m"};
    for (const auto& k : keys) {
      std::optional<double> obs, tm, fm;
      if (truth) {
        obs = lookup(truth->observed, k);
        tm = lookup(truth->m, k);
      }
      if (fitted) {
        fm = lookup(fitted->marker, k);
        if (!obs) obs = lookup(fitted->observed, k);
      }
      t.rows.push_back({k.first, csv::format_double(k.second), cell(obs), cell(tm), cell(fm)});
    }
  }
  return csv::render(t);
}

std::string km_table(const PlotRequest& req) {
  ScenarioConfig cfg;
  if (req.scenario) {
    cfg = *req.scenario;
  } else {
    require(req.truth.has_value(), ErrorCode::InvalidArgument, "km-vs-analytic needs --scenario or --truth");
    cfg = ScenarioConfig::from_json(read_json(*req.truth / "scenario.json"));
  }
  require(req.km_subjects >= 10 && req.km_points >= 2, ErrorCode::InvalidArgument,
          "km-vs-analytic needs at least 10 subjects and 2 grid points");
  cfg.n_subjects = req.km_subjects;
  cfg.censor_lo = cfg.censor_hi = std::numeric_limits<double>::infinity();
  SimulatedData sim = simulate(cfg);
  const auto n = sim.truth.size();

  std::vector<std::pair<double, bool>> obs;
  obs.reserve(n);
  for (const auto& s : sim.truth) obs.emplace_back(s.observed_time, s.event);
  std::sort(obs.begin(), obs.end());
  const double t_hi = obs[static_cast<std::size_t>(0.99 * static_cast<double>(n - 1))].first;
  std::vector<double> grid(static_cast<std::size_t>(req.km_points));
  for (std::size_t g = 0; g < grid.size(); ++g) grid[g] = t_hi * static_cast<double>(g) / static_cast<double>(grid.size() - 1);

  // population-averaged true survival: per-subject H accumulated panel by panel
  std::vector<double> analytic(grid.size(), 0.0);
  const auto& rule = gauss_kronrod_rule(15);
  for (const auto& s : sim.truth) {
    auto h = [&](double x) { return std::exp(true_log_hazard(cfg, s, x)); };
    double H = 0.0;
    analytic[0] += 1.0;
    for (std::size_t g = 1; g < grid.size(); ++g) {
      H += integrate_fixed(h, grid[g - 1], grid[g], rule);
      analytic[g] += std::exp(-H);
    }
  }
  for (auto& a : analytic) a /= static_cast<double>(n);

  csv::Table t;
  t.comments = {"# subjects=" + std::to_string(n) + " (uncensored)", "# scenario_hash=" + cfg.hash()};
  t.header = {"time", "km", "analytic"};
  double surv = 1.0, gap = 0.0;
  std::size_t at_risk = n, j = 0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    while (j < n && obs[j].first <= grid[g]) {
      std::size_t k = j, d = 0;
      while (k < n && obs[k].first == obs[j].first) d += obs[k++].second ? 1 : 0;
      surv *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      at_risk -= k - j;
      j = k;
    }
    gap = std::max(gap, std::abs(surv - analytic[g]));
    t.rows.push_back({csv::format_double(grid[g]), csv::format_double(surv), csv::format_double(analytic[g])});
  }
  return csv::render(t) + "# max_gap=" + csv::format_double(gap) + "\n";
}

}  // namespace

std::string plot_data(const PlotRequest& req) {
  if (req.kind == PlotKind::KmVsAnalytic) return km_table(req);
  return trajectory_table(req);
}

}  // namespace jmvar
