// Acceptance checks. Prints one PASS/FAIL line per criterion, detail lines
// indented beneath it, and exits nonzero if any selected criterion fails.
//
// Simulation studies are cached under --cache keyed by the study config
// hash and a fingerprint of the core library, so a rebuild of unchanged
// numerics reuses them and any change to the core reruns them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "jmvar/csv.hpp"
#include "jmvar/error.hpp"
#include "jmvar/jointmodel.hpp"
#include "jmvar/lmm.hpp"
#include "jmvar/mcmc.hpp"
#include "jmvar/pipeline.hpp"
#include "jmvar/rng.hpp"
#include "jmvar/simulate.hpp"
#include "jmvar/study.hpp"

using namespace jmvar;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Options {
  fs::path cache;
  int jobs = 1;
  int replicates = 50;
  std::string unit_tests = UNIT_TESTS_PATH;
  std::string core_archive = CORE_ARCHIVE_PATH;
};

/// Accumulates the checks of one criterion.
class Criterion {
 public:
  Criterion(int id, std::string title) : id_(id), title_(std::move(title)) {}

  void check(bool ok, const std::string& what) {
    ok_ = ok_ && ok;
    lines_.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void note(const std::string& what) { lines_.push_back("     " + what); }
  void error(const std::string& what) {
    ok_ = false;
    lines_.push_back("ERR  " + what);
  }

  bool report() const {
    std::cout << (ok_ ? "PASS" : "FAIL") << " criterion " << id_ << ": " << title_ << "\n";
    for (const auto& l : lines_) std::cout << "       " << l << "\n";
    std::cout.flush();
    return ok_;
  }

 private:
  int id_;
  std::string title_;
  bool ok_ = true;
  std::vector<std::string> lines_;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << v;
  return ss.str();
}

std::string in_range(const std::string& name, double v, double lo, double hi) {
  return name + " = " + fmt(v) + " in [" + fmt(lo) + ", " + fmt(hi) + "]";
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------- studies

struct StudyRun {
  StudyConfig cfg;
  std::vector<ReplicateResult> results;
  StudySummary summary;
  double max_runtime = 0.0, mean_runtime = 0.0;
  bool cached = false;
};

StudyConfig study_config(const ScenarioConfig& scenario, const Options& opt, std::uint64_t seed) {
  StudyConfig c;
  c.scenario = scenario;
  c.n_replicates = opt.replicates;
  c.seed = seed;
  c.jobs = opt.jobs;
  c.timeout_min = 30.0;
  return c;
}

std::string fingerprint(const Options& opt) {
  static std::string fp = fnv1a_hex(csv::read_text(opt.core_archive));
  return fp;
}

StudyRun run_or_load(const std::string& name, const StudyConfig& cfg, const Options& opt) {
  StudyRun run;
  run.cfg = cfg;
  const fs::path dir = opt.cache / (name + "-" + cfg.hash() + "-" + fingerprint(opt));
  if (fs::exists(dir / "summary.csv") && fs::exists(dir / "timings.csv")) {
    run.cached = true;
  } else {
    std::cerr << "[acceptance] running study " << name << " (" << cfg.n_replicates << " replicates, " << cfg.jobs
              << " jobs) into " << dir << std::endl;
    auto t0 = Clock::now();
    run_study_dir(cfg, dir, [&](const ReplicateResult& r) {
      std::cerr << "[acceptance] " << name << " replicate " << r.id << (r.failed ? " failed: " + r.error : " done")
                << " in " << fmt(r.runtime_seconds, 3) << " s (elapsed " << fmt(seconds_since(t0), 5) << " s)"
                << std::endl;
    });
  }
  run.results = read_results(dir / "results.csv");
  run.summary = summarize_study(run.results, tracked_parameters(cfg.scenario, cfg.two_step), cfg.rhat_threshold);
  auto timings = csv::read(dir / "timings.csv");
  const int col = timings.column("runtime_seconds");
  double total = 0.0;
  for (const auto& row : timings.rows) {
    double t = csv::parse_double(row.at(col)).value_or(NAN);
    run.max_runtime = std::max(run.max_runtime, t);
    total += t;
  }
  run.mean_runtime = timings.rows.empty() ? 0.0 : total / static_cast<double>(timings.rows.size());
  return run;
}

void describe(Criterion& c, const StudyRun& run) {
  c.note("replicates " + std::to_string(run.summary.n_replicates) + ", failed " + std::to_string(run.summary.n_failed) +
         (run.cached ? " (cached)" : ""));
  for (const auto& r : run.summary.rows) {
    if (!r.available) {
      c.note(r.label + ": unavailable (" + std::to_string(r.n_included) + " included)");
      continue;
    }
    c.note(r.label + ": true " + fmt(r.truth) + " mean " + fmt(r.mean) + " bias " + fmt(r.bias) + " ese " + fmt(r.ese) +
           " mpsd " + fmt(r.mpsd) + " cr " + fmt(r.cr, 3) + " (n " + std::to_string(r.n_included) + ", excluded " +
           std::to_string(r.n_excluded) + ")");
  }
  c.note("replicate runtime mean " + fmt(run.mean_runtime, 3) + " s, max " + fmt(run.max_runtime, 3) + " s");
}

const SummaryRow* row(Criterion& c, const StudyRun& run, const std::string& label) {
  const SummaryRow* r = run.summary.find(label);
  if (!r || !r->available) {
    c.error(label + " unavailable");
    return nullptr;
  }
  return r;
}

void bias_within(Criterion& c, const StudyRun& run, const std::string& label, double lo, double hi) {
  if (const SummaryRow* r = row(c, run, label)) c.check(r->bias >= lo && r->bias <= hi, in_range("Bias(" + label + ")", r->bias, lo, hi));
}

void coverage_within(Criterion& c, const StudyRun& run, const std::string& label, double lo, double hi) {
  if (const SummaryRow* r = row(c, run, label)) c.check(r->cr >= lo && r->cr <= hi, in_range("CR(" + label + ")", r->cr, lo, hi));
}

StudyRun linear_study(double alpha_sigma, const Options& opt) {
  return run_or_load("linear-" + fmt(alpha_sigma, 3), study_config(ScenarioConfig::linear(alpha_sigma), opt, 20240),
                     opt);
}

bool criterion1(const Options& opt) {
  Criterion c(1, "linear scenario, alpha_sigma = 0.02, n = 500");
  try {
    StudyRun run = linear_study(0.02, opt);
    describe(c, run);
    bias_within(c, run, "beta0", -0.3, 0.3);
    bias_within(c, run, "beta1", -0.1, 0.1);
    bias_within(c, run, "alpha_m", -0.005, 0.005);
    if (const SummaryRow* r = row(c, run, "alpha_sigma"))
      c.check(r->mean >= -0.03 && r->mean <= 0.05, in_range("Mean(alpha_sigma)", r->mean, -0.03, 0.05));
    coverage_within(c, run, "beta0", 85, 100);
    coverage_within(c, run, "beta1", 85, 100);
    c.check(run.max_runtime <= 30 * 60, "max replicate runtime " + fmt(run.max_runtime, 4) + " s <= 1800 s");
  } catch (const std::exception& e) {
    c.error(e.what());
  }
  return c.report();
}

bool criterion2(const Options& opt) {
  Criterion c(2, "linear scenario, alpha_sigma = 0.10: upward bias and lower coverage");
  try {
    StudyRun strong = linear_study(0.10, opt);
    StudyRun weak = linear_study(0.02, opt);
    describe(c, strong);
    const SummaryRow* s = row(c, strong, "alpha_sigma");
    const SummaryRow* w = row(c, weak, "alpha_sigma");
    if (s) c.check(s->mean > 0.10, "Mean(alpha_sigma) = " + fmt(s->mean) + " > 0.10");
    if (s && w) c.check(s->cr < w->cr, "CR(alpha_sigma) = " + fmt(s->cr, 3) + " < " + fmt(w->cr, 3) + " (alpha_sigma = 0.02)");
  } catch (const std::exception& e) {
    c.error(e.what());
  }
  return c.report();
}

bool criterion3(const Options& opt) {
  Criterion c(3, "quadratic scenario, alpha_sigma = 0.02, n = 500");
  try {
    StudyRun run = run_or_load("quadratic-0.02", study_config(ScenarioConfig::quadratic(0.02), opt, 20241), opt);
    describe(c, run);
    for (const char* b : {"beta0", "beta1", "beta2"}) {
      bias_within(c, run, b, -0.3, 0.3);
      coverage_within(c, run, b, 85, 100);
    }
  } catch (const std::exception& e) {
    c.error(e.what());
  }
  return c.report();
}

bool criterion4() {
  Criterion c(4, "event-time generator matches the Weibull law");
  try {
    auto t0 = Clock::now();
    ScenarioConfig cfg = ScenarioConfig::linear(0.0);
    cfg.alpha_m = 0.0;
    cfg.alpha_sigma = 0.0;
    cfg.kappa = 1.8 * 1.8;
    cfg.zeta = -7.0;
    cfg.censor_lo = cfg.censor_hi = std::numeric_limits<double>::infinity();
    cfg.n_subjects = 100000;
    cfg.seed = 4;
    SimulatedData sim = simulate(cfg);
    std::vector<double> t;
    t.reserve(sim.truth.size());
    std::size_t capped = 0;
    for (const auto& s : sim.truth) {
      t.push_back(s.event_time);
      capped += s.administrative ? 1 : 0;
    }
    std::sort(t.begin(), t.end());
    const double n = static_cast<double>(t.size());
    double ks = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      double F = 1.0 - std::exp(-std::exp(cfg.zeta) * std::pow(t[i], cfg.kappa));
      ks = std::max({ks, std::abs(F - static_cast<double>(i) / n), std::abs(F - static_cast<double>(i + 1) / n)});
    }
    double secs = seconds_since(t0);
    c.note("n = 100000, administratively capped " + std::to_string(capped));
    c.check(ks < 0.01, "KS = " + fmt(ks) + " < 0.01");
    c.check(secs < 60.0, "runtime " + fmt(secs, 3) + " s < 60 s");
  } catch (const std::exception& e) {
    c.error(e.what());
  }
  return c.report();
}

bool criterion5() {
  Criterion c(5, "cumulative hazard against a 10,000-panel trapezoid");
  try {
    ScenarioConfig cfg = ScenarioConfig::linear(0.05);
    cfg.n_subjects = 100;
    cfg.seed = 5;
    SimulatedData sim = simulate(cfg);
    LmmFit lmm = fit_lmm(sim.dataset, "y", TimeModel::linear(), LmmMethod::REML);
    auto data = std::make_shared<const LongitudinalDataset>(
        sim.dataset.with_outcome("absres", residuals(lmm, sim.dataset).as_series(ResidualKind::Absolute)));
    JointModel model(two_step_spec("y", TimeModel::linear(), TwoStepOptions{}), data);
    Engine eng(55);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      JointParams p = model.zero_params();
      for (int k = 0; k < model.n_submodels(); ++k) {
        auto& s = p.sub[k];
        s.beta[0] = k == 0 ? 142.0 + 10.0 * std_normal(eng) : 8.0 + std_normal(eng);
        s.beta[1] = k == 0 ? 3.0 + std_normal(eng) : 0.3 * std_normal(eng);
        for (Eigen::Index i = 0; i < s.b.rows(); ++i)
          for (Eigen::Index r = 0; r < s.b.cols(); ++r) s.b(i, r) = (r == 0 ? 10.0 : 2.0) * std_normal(eng);
      }
      for (Eigen::Index j = 0; j < p.spline.size(); ++j) p.spline[j] = -6.0 + 1.5 * std_normal(eng);
      p.alpha[0] = 0.02 + 0.01 * std_normal(eng);
      p.alpha[1] = 0.1 * std_normal(eng);
      std::size_t i = static_cast<std::size_t>(uniform_open(eng) * 100.0) % 100;
      double T = model.data().survival(i).event_time;
      double t = T * uniform_open(eng);
      const int panels = 10000;
      double h = t / panels, sum = 0.0;
      for (int j = 0; j <= panels; ++j)
        sum += ((j == 0 || j == panels) ? 0.5 : 1.0) * std::exp(model.log_hazard(p, i, j * h));
      double trap = sum * h, H = model.cumulative_hazard(p, i, t);
      worst = std::max(worst, std::abs(H - trap) / trap);
    }
    c.check(worst < 1e-6, "max relative difference over 100 triples " + fmt(worst) + " < 1e-6");
  } catch (const std::exception& e) {
    c.error(e.what());
  }
  return c.report();
}

bool criterion6() {
  Criterion c(6, "conjugate normal mean");
  try {
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
    spec.priors.fixed_sd = 10.0;
    JointModel m(spec, std::make_shared<const LongitudinalDataset>(LongitudinalDataset::build(rows, surv, {})));
    SamplerConfig sc;
    sc.n_warmup = 1000;
    sc.n_kept = 8000;
    sc.seed = 6;
    JointModelFit fit = sample(m, sc);
    const ParamSummary* s = fit.find("beta.y.intercept");
    require(s != nullptr, ErrorCode::Internal, "missing beta.y.intercept");
    // ten unit-variance observations with sum 20 under a N(0, 10^2) prior
    const double mean = 2.0 * 1000.0 / 1001.0, sd = 1.0 / std::sqrt(10.01);
    c.note("closed form mean " + fmt(mean, 6) + " sd " + fmt(sd, 6));
    c.check(std::abs(s->mean - mean) <= 3.0 * s->mcse,
            "|mean - exact| = " + fmt(std::abs(s->mean - mean)) + " <= 3 MCSE = " + fmt(3.0 * s->mcse));
    c.check(std::abs(s->sd / sd - 1.0) <= 0.10, "sd = " + fmt(s->sd, 5) + " within 10% of " + fmt(sd, 5));
  } catch (const std::exception& e) {
    c.error(e.what());
  }
  return c.report();
}

bool criterion7(const Options& opt) {
  Criterion c(7, "property suites, each under 2 minutes");
  for (const char* suite : {"property-bspline", "property-reml-gradient", "property-inversion", "property-rhat",
                            "property-study-summary", "property-init"}) {
    auto t0 = Clock::now();
    const fs::path log = fs::temp_directory_path() / ("jmvar_acceptance_" + std::string(suite) + ".log");
    std::string cmd = "'" + opt.unit_tests + "' -ts=" + suite + " > '" + log.string() + "' 2>&1";
    int status = std::system(cmd.c_str());
    double secs = seconds_since(t0);
    // a filter that matches nothing also exits 0, so count the cases run
    std::smatch m;
    std::string text = fs::exists(log) ? csv::read_text(log) : "";
    int cases = std::regex_search(text, m, std::regex(R"(test cases:\s+(\d+))")) ? std::stoi(m[1]) : 0;
    std::error_code ec;
    fs::remove(log, ec);
    bool passed = WIFEXITED(status) && WEXITSTATUS(status) == 0 && cases > 0;
    c.check(passed && secs < 120.0, std::string(suite) + (passed ? " passed " : " FAILED ") + std::to_string(cases) +
                                        " cases in " + fmt(secs, 3) + " s");
  }
  return c.report();
}

bool criterion8(const Options& opt) {
  Criterion c(8, "null variability: CI for the residual association covers 0");
  try {
    StudyRun run = run_or_load("null", study_config(ScenarioConfig::null_variability(), opt, 20248), opt);
    describe(c, run);
    int covered = 0, used = 0;
    for (const auto& r : run.results) {
      if (r.failed) continue;
      const ParamEstimate* a = r.find("alpha.absres");
      if (!a) continue;
      ++used;
      covered += (a->lower <= 0.0 && a->upper >= 0.0) ? 1 : 0;
    }
    require(used > 0, ErrorCode::Validation, "no replicate produced an estimate");
    double rate = 100.0 * covered / used;
    c.check(rate >= 85.0, "coverage of 0 = " + fmt(rate, 3) + "% (" + std::to_string(covered) + "/" +
                              std::to_string(used) + ") >= 85%");
  } catch (const std::exception& e) {
    c.error(e.what());
  }
  return c.report();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  Options opt;
  std::vector<int> which;
  opt.cache = "acceptance_cache";
  opt.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  app.add_option("--criterion,-c", which, "criteria to run (default all)")->check(CLI::Range(1, 8));
  app.add_option("--cache", opt.cache, "study cache directory");
  app.add_option("--jobs", opt.jobs, "study workers")->check(CLI::PositiveNumber);
  app.add_option("--replicates", opt.replicates, "replicates per study")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  if (which.empty()) which = {1, 2, 3, 4, 5, 6, 7, 8};
  std::set<int> selected(which.begin(), which.end());

  bool ok = true;
  for (int id : selected) {
    switch (id) {
      case 1: ok = criterion1(opt) && ok; break;
      case 2: ok = criterion2(opt) && ok; break;
      case 3: ok = criterion3(opt) && ok; break;
      case 4: ok = criterion4() && ok; break;
      case 5: ok = criterion5() && ok; break;
      case 6: ok = criterion6() && ok; break;
      case 7: ok = criterion7(opt) && ok; break;
      case 8: ok = criterion8(opt) && ok; break;
    }
  }
  return ok ? 0 : 1;
}
