#include "jmvar/study.hpp"

#include "config_keys.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <mutex>
#include <thread>
#include <tuple>

#include <nlohmann/json.hpp>

#include "jmvar/csv.hpp"
#include "jmvar/error.hpp"
#include "jmvar/rng.hpp"
#include "jmvar/stats.hpp"

namespace jmvar {

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = c == ',' ? ';' : ' ';
  return s;
}

std::string replicate_dir_name(int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", k);
  return buf;
}

}  // namespace

JointModelSpec two_step_spec(const std::string& outcome, const TimeModel& marker, const TwoStepOptions& opt) {
  JointModelSpec spec;
  spec.submodels.push_back({outcome, marker, true, std::nullopt});
  spec.submodels.push_back({opt.residual_outcome, TimeModel::linear(), true, std::nullopt});
  spec.survival = true;
  spec.covariates = std::vector<std::string>{};
  spec.baseline = opt.baseline;
  spec.quad_nodes = opt.quad_nodes;
  spec.priors = opt.priors;
  return spec;
}

TwoStepFit fit_two_step(const LongitudinalDataset& ds, const std::string& outcome, const TimeModel& marker,
                        const TwoStepOptions& opt, const SamplerConfig& sampler) {
  TwoStepFit out;
  out.lmm = fit_lmm(ds, outcome, marker, opt.method);
  auto res = residuals(out.lmm, ds);
  out.augmented = std::make_shared<const LongitudinalDataset>(ds.with_outcome(opt.residual_outcome, res.as_series(opt.residual, opt.scaling)));
  out.spec = two_step_spec(outcome, marker, opt);
  JointModel model(out.spec, out.augmented);
  out.joint = sample(model, sampler);
  return out;
}

TimeModel scenario_time_model(const ScenarioConfig& cfg) {
  return cfg.trajectory == Trajectory::Linear ? TimeModel::linear() : TimeModel::quadratic(cfg.quad_center);
}

void StudyConfig::validate() const {
  scenario.validate();
  sampler.validate();
  require(n_replicates >= 1, ErrorCode::Config, "replicates: must be positive");
  require(jobs >= 1, ErrorCode::Config, "jobs: must be positive");
  require(timeout_min > 0.0, ErrorCode::Config, "timeout_min: must be positive");
  require(rhat_threshold >= 1.0, ErrorCode::Config, "rhat_threshold: must be >= 1");
  require(two_step.quad_nodes == 15 || two_step.quad_nodes == 21 || two_step.quad_nodes == 31 ||
              two_step.quad_nodes == 41 || two_step.quad_nodes == 51 || two_step.quad_nodes == 61,
          ErrorCode::Config, "quad_nodes: must be one of 15, 21, 31, 41, 51, 61");
}

StudyConfig StudyConfig::from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::Config, "study: expected an object");
  StudyConfig c;
  auto wrap = [](const char* path, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      std::vector<std::string> fields;
      for (const auto& f : e.fields()) fields.push_back(std::string(path) + "." + f);
      throw Error(ErrorCode::Config, std::string(path) + "." + e.what(), fields);
    }
  };
  check_keys(j, {"scenario", "replicates", "seed", "sampler", "jobs", "timeout_min", "rhat_threshold", "quad_nodes",
                 "residual", "residual_scaling", "method", "keep_chains"});
  if (j.contains("scenario")) wrap("scenario", [&] { c.scenario = ScenarioConfig::from_json(j["scenario"]); });
  if (j.contains("sampler")) c.sampler = SamplerConfig::from_json(j["sampler"]);
  auto integer = [&](const char* key, int& field) {
    if (!j.contains(key)) return;
    require(j[key].is_number_integer(), ErrorCode::Config, std::string(key) + ": expected an integer");
    field = j[key].get<int>();
  };
  integer("replicates", c.n_replicates);
  integer("jobs", c.jobs);
  integer("quad_nodes", c.two_step.quad_nodes);
  if (j.contains("seed")) {
    require(j["seed"].is_number_unsigned(), ErrorCode::Config, "seed: expected a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("timeout_min")) {
    require(j["timeout_min"].is_number(), ErrorCode::Config, "timeout_min: expected a number");
    c.timeout_min = j["timeout_min"].get<double>();
  }
  if (j.contains("rhat_threshold")) {
    require(j["rhat_threshold"].is_number(), ErrorCode::Config, "rhat_threshold: expected a number");
    c.rhat_threshold = j["rhat_threshold"].get<double>();
  }
  if (j.contains("residual")) {
    require(j["residual"].is_string(), ErrorCode::Config, "residual: expected a string");
    wrap("residual", [&] { c.two_step.residual = parse_residual_kind(j["residual"].get<std::string>()); });
    c.two_step.residual_outcome = c.two_step.residual == ResidualKind::Squared ? "sqres" : "absres";
  }
  if (j.contains("residual_scaling")) {
    require(j["residual_scaling"].is_string(), ErrorCode::Config, "residual_scaling: expected a string");
    wrap("residual_scaling",
         [&] { c.two_step.scaling = parse_residual_scaling(j["residual_scaling"].get<std::string>()); });
  }
  if (j.contains("method")) {
    require(j["method"].is_string(), ErrorCode::Config, "method: expected a string");
    wrap("method", [&] { c.two_step.method = parse_lmm_method(j["method"].get<std::string>()); });
  }
  if (j.contains("keep_chains")) {
    require(j["keep_chains"].is_boolean(), ErrorCode::Config, "keep_chains: expected a boolean");
    c.keep_chains = j["keep_chains"].get<bool>();
  }
  c.validate();
  return c;
}

nlohmann::json StudyConfig::to_json() const {
  return {{"scenario", scenario.to_json()},
          {"replicates", n_replicates},
          {"seed", seed},
          {"sampler", sampler.to_json()},
          {"jobs", jobs},
          {"timeout_min", timeout_min},
          {"rhat_threshold", rhat_threshold},
          {"quad_nodes", two_step.quad_nodes},
          {"residual", residual_kind_name(two_step.residual)},
          {"residual_scaling", residual_scaling_name(two_step.scaling)},
          {"method", two_step.method == LmmMethod::REML ? "reml" : "ml"},
          {"keep_chains", keep_chains}};
}

std::string StudyConfig::hash() const {
  auto j = to_json();
  j.erase("jobs");  // results do not depend on parallelism
  j["sampler"].erase("jobs");
  return fnv1a_hex(j.dump());
}

const ParamEstimate* ReplicateResult::find(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

const SummaryRow* StudySummary::find(const std::string& label) const {
  for (const auto& r : rows)
    if (r.label == label) return &r;
  return nullptr;
}

std::vector<TrackedParam> tracked_parameters(const ScenarioConfig& cfg, const TwoStepOptions& opt) {
  std::vector<TrackedParam> out;
  auto names = scenario_time_model(cfg).fixed_names();
  for (std::size_t j = 0; j < names.size(); ++j)
    out.push_back({"beta" + std::to_string(j), "beta." + cfg.outcome + "." + names[j], cfg.beta[static_cast<Eigen::Index>(j)], false});
  out.push_back({"alpha_m", "alpha." + cfg.outcome, cfg.alpha_m, true});
  out.push_back({"alpha_sigma", "alpha." + opt.residual_outcome, cfg.alpha_sigma, true});
  return out;
}

std::uint64_t replicate_data_seed(std::uint64_t master, int k) { return derive_seed(master, {static_cast<std::uint64_t>(k), 0}); }
std::uint64_t replicate_sampler_seed(std::uint64_t master, int k) { return derive_seed(master, {static_cast<std::uint64_t>(k), 1}); }

ReplicateResult run_replicate(const StudyConfig& cfg, int k, const std::filesystem::path* artifacts) {
  const auto t0 = std::chrono::steady_clock::now();
  ReplicateResult r;
  r.id = k;
  r.seed = replicate_data_seed(cfg.seed, k);
  try {
    ScenarioConfig sc = cfg.scenario;
    sc.seed = r.seed;
    SimulatedData sim = simulate(sc);
    r.event_rate = sim.event_rate();
    SamplerConfig sampler = cfg.sampler;
    sampler.seed = replicate_sampler_seed(cfg.seed, k);
    sampler.deadline = t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                std::chrono::duration<double>(cfg.timeout_min * 60.0));
    TwoStepFit fit = fit_two_step(sim.dataset, sc.outcome, scenario_time_model(sc), cfg.two_step, sampler);
    for (const auto& s : fit.joint.summaries) r.params.push_back({s.name, s.mean, s.sd, s.q025, s.q975, s.rhat});
    if (artifacts) {
      write_posterior_summary(*artifacts / "posterior.csv", fit.joint);
      write_acceptance(*artifacts / "acceptance.csv", fit.joint);
      if (cfg.keep_chains)
        write_chains(*artifacts / "chains.csv", fit.joint,
                     {"seed=" + std::to_string(sampler.seed), "config_hash=" + cfg.hash(),
                      "replicate=" + std::to_string(k)});
    }
  } catch (const std::exception& e) {
    r.failed = true;
    r.params.clear();
    r.error = one_line(e.what());
    if (const auto* je = dynamic_cast<const Error*>(&e)) r.error = std::string(error_code_name(je->code())) + ": " + r.error;
  }
  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (artifacts) {
    nlohmann::json j{{"replicate", k},           {"seed", r.seed},
                     {"failed", r.failed},       {"error", r.error},
                     {"runtime_seconds", r.runtime_seconds}, {"event_rate", r.event_rate}};
    csv::write_atomic(*artifacts / "replicate.json", j.dump(2) + "\n");
  }
  return r;
}

std::vector<ReplicateResult> run_study(const StudyConfig& cfg, const std::filesystem::path* out_dir,
                                       const ProgressFn& progress) {
  cfg.validate();
  std::vector<ReplicateResult> results(cfg.n_replicates);
  std::atomic<int> next{1};
  std::mutex mu;
  auto worker = [&] {
    for (int k = next++; k <= cfg.n_replicates; k = next++) {
      std::optional<std::filesystem::path> dir;
      if (out_dir) dir = *out_dir / "replicates" / replicate_dir_name(k);
      ReplicateResult r = run_replicate(cfg, k, dir ? &*dir : nullptr);
      std::lock_guard lock(mu);
      results[k - 1] = r;
      if (progress) progress(results[k - 1]);
    }
  };
  const int jobs = std::min(cfg.jobs, cfg.n_replicates);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return results;
}

StudySummary summarize_study(const std::vector<ReplicateResult>& results, const std::vector<TrackedParam>& params,
                             double rhat_threshold) {
  StudySummary out;
  out.n_replicates = static_cast<int>(results.size());
  for (const auto& r : results) out.n_failed += r.failed ? 1 : 0;
  for (const auto& tp : params) {
    SummaryRow row;
    row.label = tp.label;
    row.name = tp.name;
    row.truth = tp.truth;
    // Sorted so the summary does not depend on replicate order, bit for bit.
    std::vector<std::tuple<double, double, double, double>> kept;
    for (const auto& r : results) {
      if (r.failed) continue;
      const ParamEstimate* e = r.find(tp.name);
      if (!e) continue;
      bool converged = e->rhat <= rhat_threshold;  // NaN counts as not converged
      if (tp.excludable && !converged) {
        ++row.n_excluded;
        continue;
      }
      kept.emplace_back(e->mean, e->sd, e->lower, e->upper);
    }
    std::sort(kept.begin(), kept.end());
    row.n_included = static_cast<int>(kept.size());
    row.available = row.n_included >= 2;
    if (row.available) {
      std::vector<double> means, sds;
      int covered = 0;
      for (const auto& [m, s, lo, hi] : kept) {
        means.push_back(m);
        sds.push_back(s);
        covered += (lo <= tp.truth && tp.truth <= hi) ? 1 : 0;
      }
      row.mean = stats::mean(means);
      row.bias = row.mean - tp.truth;
      row.ese = stats::sd(means);
      row.mpsd = stats::mean(sds);
      row.cr = 100.0 * covered / static_cast<double>(row.n_included);
    }
    out.rows.push_back(row);
  }
  return out;
}

void write_results(const std::filesystem::path& path, const std::vector<ReplicateResult>& results) {
  csv::Table t;
  t.header = {"replicate", "seed", "failed", "event_rate", "parameter", "mean", "sd", "lower", "upper", "rhat", "error"};
  for (const auto& r : results) {
    std::vector<std::string> head{std::to_string(r.id), std::to_string(r.seed), r.failed ? "1" : "0",
                                  csv::format_double(r.event_rate)};
    if (r.params.empty()) {
      auto row = head;
      row.insert(row.end(), {"", "", "", "", "", "", one_line(r.error)});
      t.rows.push_back(row);
    }
    for (const auto& p : r.params) {
      auto row = head;
      row.insert(row.end(), {p.name, csv::format_double(p.mean), csv::format_double(p.sd), csv::format_double(p.lower),
                             csv::format_double(p.upper), csv::format_double(p.rhat), one_line(r.error)});
      t.rows.push_back(row);
    }
  }
  csv::write_atomic(path, csv::render(t));
}

std::vector<ReplicateResult> read_results(const std::filesystem::path& path) {
  auto t = csv::read(path);
  const std::string file = path.filename().string();
  const char* cols[] = {"replicate", "seed", "failed", "event_rate", "parameter", "mean",
                        "sd",        "lower", "upper", "rhat",       "error"};
  int idx[11];
  for (int c = 0; c < 11; ++c) {
    idx[c] = t.column(cols[c]);
    require(idx[c] >= 0, ErrorCode::Schema, file + ": missing column '" + cols[c] + "'");
  }
  auto num = [&](const std::vector<std::string>& row, int c) {
    auto v = csv::parse_double(row[idx[c]]);
    require(v.has_value(), ErrorCode::Schema, file + ": bad number in column '" + cols[c] + "'");
    return *v;
  };
  std::vector<ReplicateResult> out;
  for (const auto& row : t.rows) {
    require(row.size() == t.header.size(), ErrorCode::Schema, file + ": ragged row");
    int id = static_cast<int>(num(row, 0));
    if (out.empty() || out.back().id != id) {
      ReplicateResult r;
      r.id = id;
      r.seed = std::stoull(row[idx[1]]);
      r.failed = row[idx[2]] == "1";
      r.event_rate = num(row, 3);
      r.error = row[idx[10]];
      out.push_back(std::move(r));
    }
    if (!row[idx[4]].empty())
      out.back().params.push_back({row[idx[4]], num(row, 5), num(row, 6), num(row, 7), num(row, 8), num(row, 9)});
  }
  return out;
}

void write_timings(const std::filesystem::path& path, const std::vector<ReplicateResult>& results) {
  csv::Table t;
  t.header = {"replicate", "runtime_seconds"};
  for (const auto& r : results) t.rows.push_back({std::to_string(r.id), csv::format_double(r.runtime_seconds)});
  csv::write_atomic(path, csv::render(t));
}

std::string render_summary(const StudySummary& s) {
  csv::Table t;
  t.comments = {"# replicates=" + std::to_string(s.n_replicates), "# failed=" + std::to_string(s.n_failed)};
  t.header = {"parameter", "name", "true", "mean", "bias", "ese", "mpsd", "cr", "n_included", "n_excluded"};
  for (const auto& r : s.rows) {
    auto f = [&](double v) { return r.available ? csv::format_double(v) : std::string("unavailable"); };
    t.rows.push_back({r.label, r.name, csv::format_double(r.truth), f(r.mean), f(r.bias), f(r.ese), f(r.mpsd), f(r.cr),
                      std::to_string(r.n_included), std::to_string(r.n_excluded)});
  }
  return csv::render(t);
}

void write_summary(const std::filesystem::path& path, const StudySummary& s) {
  csv::write_atomic(path, render_summary(s));
}

}  // namespace jmvar
