#include "jmvar/simulate.hpp"

#include "config_keys.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "jmvar/csv.hpp"
#include "jmvar/error.hpp"
#include "jmvar/quadrature.hpp"

namespace jmvar {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kPanel = 0.25;

struct WeibullRow {
  double alpha_sigma, kappa, zeta;
};

// Weibull baseline per association strength, chosen upstream to give
// comparable event rates.
constexpr WeibullRow kLinearWeibull[] = {{0.02, 1.8 * 1.8, -7.0}, {0.07, 1.7 * 1.7, -7.0}, {0.10, 1.6 * 1.6, -7.0}};
constexpr WeibullRow kQuadraticWeibull[] = {{0.02, 1.8 * 1.8, -8.0}, {0.07, 1.6 * 1.6, -7.5}, {0.10, 1.7 * 1.7, -7.5}};

void apply_weibull(ScenarioConfig& c, const WeibullRow (&table)[3]) {
  for (const auto& r : table)
    if (std::abs(r.alpha_sigma - c.alpha_sigma) < 1e-12) {
      c.kappa = r.kappa;
      c.zeta = r.zeta;
      return;
    }
  c.kappa = table[0].kappa;
  c.zeta = table[0].zeta;
}

// Square-root factor of a PSD matrix (zero directions allowed).
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& S) {
  if (S.size() == 0) return S;
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

bool is_psd(const Eigen::MatrixXd& S) {
  if (S.rows() != S.cols() || !S.allFinite()) return false;
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, S.cwiseAbs().maxCoeff())) return false;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  return es.eigenvalues().minCoeff() >= -1e-12 * std::max(1.0, S.cwiseAbs().maxCoeff());
}

Eigen::VectorXd json_vector(const nlohmann::json& j, const std::string& path) {
  require(j.is_array(), ErrorCode::Config, path + ": expected an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    require(j[i].is_number(), ErrorCode::Config, path + "[" + std::to_string(i) + "]: expected a number");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

Eigen::MatrixXd json_matrix(const nlohmann::json& j, const std::string& path) {
  require(j.is_array(), ErrorCode::Config, path + ": expected an array of rows");
  const auto n = static_cast<Eigen::Index>(j.size());
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    Eigen::VectorXd row = json_vector(j[r], path + "[" + std::to_string(r) + "]");
    require(row.size() == n, ErrorCode::Config, path + ": matrix must be square");
    m.row(r) = row.transpose();
  }
  return m;
}

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  auto out = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

double number(const nlohmann::json& j, const char* key) {
  require(j[key].is_number(), ErrorCode::Config, std::string(key) + ": expected a number");
  return j[key].get<double>();
}

}  // namespace

ScenarioConfig ScenarioConfig::linear(double alpha_sigma) {
  ScenarioConfig c;
  c.name = "linear";
  c.trajectory = Trajectory::Linear;
  c.beta = Eigen::Vector2d(142.0, 3.0);
  c.Sigma_b.resize(2, 2);
  c.Sigma_b << 207.36, -17.28, -17.28, 9.22;
  c.xi = Eigen::Vector2d(2.4, -0.05);
  c.Sigma_mu << 0.0001, -0.0006, -0.0006, 0.0157;
  c.alpha_m = 0.02;
  c.alpha_sigma = alpha_sigma;
  apply_weibull(c, kLinearWeibull);
  return c;
}

ScenarioConfig ScenarioConfig::quadratic(double alpha_sigma) {
  ScenarioConfig c;
  c.name = "quadratic";
  c.trajectory = Trajectory::Quadratic;
  c.beta = Eigen::Vector3d(142.0, 2.0, 8.0);
  c.Sigma_b = Eigen::Vector3d(100.0, 9.22, 10.0).asDiagonal();
  c.quad_center = 2.0;
  c.xi = Eigen::Vector2d(2.0, 0.08);
  c.Sigma_mu << 0.0001, -0.0006, -0.0006, 0.0157;
  c.alpha_m = 0.02;
  c.alpha_sigma = alpha_sigma;
  apply_weibull(c, kQuadraticWeibull);
  return c;
}

ScenarioConfig ScenarioConfig::null_variability() {
  ScenarioConfig c = linear(0.02);
  c.name = "null";
  c.xi = Eigen::Vector2d(2.4, 0.0);
  c.Sigma_mu.setZero();
  c.alpha_sigma = 0.0;
  return c;
}

ScenarioConfig ScenarioConfig::preset(const std::string& name, double alpha_sigma) {
  if (name == "linear") return linear(alpha_sigma);
  if (name == "quadratic") return quadratic(alpha_sigma);
  if (name == "null") return null_variability();
  fail(ErrorCode::Config, "preset: unknown scenario '" + name + "' (linear, quadratic, null)");
}

void ScenarioConfig::validate() const {
  require(n_subjects >= 1, ErrorCode::Config, "n_subjects: must be positive");
  require(!obs_times.empty() && obs_times.front() == 0.0, ErrorCode::Config, "obs_times: must start at 0");
  for (std::size_t i = 1; i < obs_times.size(); ++i)
    require(obs_times[i] > obs_times[i - 1], ErrorCode::Config, "obs_times: must be strictly increasing");
  const int want = trajectory == Trajectory::Linear ? 2 : 3;
  require(beta.size() == want, ErrorCode::Config, "beta: expected " + std::to_string(want) + " coefficients");
  require(Sigma_b.rows() == want && is_psd(Sigma_b), ErrorCode::Config,
          "Sigma_b: must be a symmetric positive semi-definite " + std::to_string(want) + "x" + std::to_string(want) + " matrix");
  require(is_psd(Sigma_mu), ErrorCode::Config, "Sigma_mu: must be symmetric positive semi-definite");
  require(kappa > 0.0 && std::isfinite(kappa), ErrorCode::Config, "weibull.kappa: must be positive");
  require(std::isfinite(zeta) && std::isfinite(alpha_m) && std::isfinite(alpha_sigma), ErrorCode::Config,
          "hazard coefficients must be finite");
  if (censoring_enabled())
    require(censor_lo > 0.0 && censor_hi >= censor_lo && std::isfinite(censor_hi), ErrorCode::Config,
            "censoring: need 0 < lo <= hi");
  else
    require(std::isinf(censor_hi), ErrorCode::Config, "censoring: lo and hi must both be infinite to disable it");
  require(t_max > 0.0 && inversion_tol > 0.0, ErrorCode::Config, "t_max and inversion_tol must be positive");
  require(!outcome.empty(), ErrorCode::Config, "outcome: must be non-empty");
}

ScenarioConfig ScenarioConfig::from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::Config, "scenario: expected an object");
  check_keys(j, {"preset", "name", "trajectory", "n_subjects", "obs_times", "beta", "Sigma_b", "quad_center", "xi",
                 "Sigma_mu", "alpha_m", "alpha_sigma", "weibull", "censoring", "t_max", "inversion_tol", "seed",
                 "outcome"});
  ScenarioConfig c;
  double alpha_sigma = j.contains("alpha_sigma") ? number(j, "alpha_sigma") : 0.02;
  if (j.contains("preset")) {
    require(j["preset"].is_string(), ErrorCode::Config, "preset: expected a string");
    c = preset(j["preset"].get<std::string>(), alpha_sigma);
  } else {
    for (const char* key : {"trajectory", "beta", "Sigma_b", "Sigma_mu"})
      require(j.contains(key), ErrorCode::Config, std::string(key) + ": required when no preset is given");
    c.alpha_sigma = alpha_sigma;
  }
  if (j.contains("name")) {
    require(j["name"].is_string(), ErrorCode::Config, "name: expected a string");
    c.name = j["name"].get<std::string>();
  }
  if (j.contains("trajectory")) {
    std::string t = j["trajectory"].is_string() ? j["trajectory"].get<std::string>() : "";
    if (t == "linear")
      c.trajectory = Trajectory::Linear;
    else if (t == "quadratic")
      c.trajectory = Trajectory::Quadratic;
    else
      fail(ErrorCode::Config, "trajectory: expected \"linear\" or \"quadratic\"");
  }
  if (j.contains("n_subjects")) {
    require(j["n_subjects"].is_number_integer(), ErrorCode::Config, "n_subjects: expected an integer");
    c.n_subjects = j["n_subjects"].get<int>();
  }
  if (j.contains("obs_times")) {
    Eigen::VectorXd v = json_vector(j["obs_times"], "obs_times");
    c.obs_times.assign(v.data(), v.data() + v.size());
  }
  if (j.contains("beta")) c.beta = json_vector(j["beta"], "beta");
  if (j.contains("Sigma_b")) c.Sigma_b = json_matrix(j["Sigma_b"], "Sigma_b");
  if (j.contains("quad_center")) c.quad_center = number(j, "quad_center");
  if (j.contains("xi")) {
    Eigen::VectorXd v = json_vector(j["xi"], "xi");
    require(v.size() == 2, ErrorCode::Config, "xi: expected 2 numbers");
    c.xi = v;
  }
  if (j.contains("Sigma_mu")) {
    Eigen::MatrixXd m = json_matrix(j["Sigma_mu"], "Sigma_mu");
    require(m.rows() == 2, ErrorCode::Config, "Sigma_mu: expected a 2x2 matrix");
    c.Sigma_mu = m;
  }
  if (j.contains("alpha_m")) c.alpha_m = number(j, "alpha_m");
  if (j.contains("weibull")) {
    const auto& w = j["weibull"];
    require(w.is_object(), ErrorCode::Config, "weibull: expected an object");
    if (w.contains("kappa")) {
      require(w["kappa"].is_number(), ErrorCode::Config, "weibull.kappa: expected a number");
      c.kappa = w["kappa"].get<double>();
    }
    if (w.contains("zeta")) {
      require(w["zeta"].is_number(), ErrorCode::Config, "weibull.zeta: expected a number");
      c.zeta = w["zeta"].get<double>();
    }
  }
  if (j.contains("censoring")) {
    const auto& cj = j["censoring"];
    if (cj.is_string() && cj.get<std::string>() == "none") {
      c.censor_lo = c.censor_hi = kInf;
    } else {
      require(cj.is_object() && cj.contains("lo") && cj.contains("hi") && cj["lo"].is_number() && cj["hi"].is_number(),
              ErrorCode::Config, "censoring: expected {\"lo\": x, \"hi\": y} or \"none\"");
      c.censor_lo = cj["lo"].get<double>();
      c.censor_hi = cj["hi"].get<double>();
    }
  }
  if (j.contains("t_max")) c.t_max = number(j, "t_max");
  if (j.contains("inversion_tol")) c.inversion_tol = number(j, "inversion_tol");
  if (j.contains("seed")) {
    require(j["seed"].is_number_unsigned(), ErrorCode::Config, "seed: expected a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("outcome")) {
    require(j["outcome"].is_string(), ErrorCode::Config, "outcome: expected a string");
    c.outcome = j["outcome"].get<std::string>();
  }
  c.validate();
  return c;
}

nlohmann::json ScenarioConfig::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["trajectory"] = trajectory == Trajectory::Linear ? "linear" : "quadratic";
  j["n_subjects"] = n_subjects;
  j["obs_times"] = obs_times;
  j["beta"] = std::vector<double>(beta.data(), beta.data() + beta.size());
  j["Sigma_b"] = matrix_json(Sigma_b);
  j["quad_center"] = quad_center;
  j["xi"] = {xi[0], xi[1]};
  j["Sigma_mu"] = matrix_json(Sigma_mu);
  j["alpha_m"] = alpha_m;
  j["alpha_sigma"] = alpha_sigma;
  j["weibull"] = {{"kappa", kappa}, {"zeta", zeta}};
  if (censoring_enabled())
    j["censoring"] = {{"lo", censor_lo}, {"hi", censor_hi}};
  else
    j["censoring"] = "none";
  j["t_max"] = t_max;
  j["inversion_tol"] = inversion_tol;
  j["seed"] = seed;
  j["outcome"] = outcome;
  return j;
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string ScenarioConfig::hash() const { return fnv1a_hex(to_json().dump()); }

double true_mean(const ScenarioConfig& cfg, const SubjectTruth& s, double t) {
  double m = cfg.beta[0] + s.b[0] + (cfg.beta[1] + s.b[1]) * t;
  if (cfg.trajectory == Trajectory::Quadratic) {
    double d = t - cfg.quad_center;
    m += (cfg.beta[2] + s.b[2]) * d * d;
  }
  return m;
}

double true_sd(const ScenarioConfig& cfg, const SubjectTruth& s, double t) {
  return std::exp(cfg.xi[0] + s.mu[0] + (cfg.xi[1] + s.mu[1]) * t);
}

double true_log_hazard(const ScenarioConfig& cfg, const SubjectTruth& s, double t) {
  return std::log(cfg.kappa) + (cfg.kappa - 1.0) * std::log(t) + cfg.zeta + cfg.alpha_m * true_mean(cfg, s, t) +
         cfg.alpha_sigma * true_sd(cfg, s, t);
}

double true_cumulative_hazard(const ScenarioConfig& cfg, const SubjectTruth& s, double t, double abs_tol) {
  if (t <= 0.0) return 0.0;
  auto h = [&](double x) { return std::exp(true_log_hazard(cfg, s, x)); };
  auto r = integrate_adaptive(h, 0.0, t, abs_tol, 5000);
  return r.value;
}

SubjectTruth simulate_subject_truth(const ScenarioConfig& cfg, Engine& eng) {
  SubjectTruth s;
  const Eigen::MatrixXd Lb = psd_factor(cfg.Sigma_b);
  const Eigen::MatrixXd Lm = psd_factor(cfg.Sigma_mu);
  Eigen::VectorXd z(cfg.n_coef());
  for (int r = 0; r < cfg.n_coef(); ++r) z[r] = std_normal(eng);
  s.b = Lb * z;
  Eigen::Vector2d zm(std_normal(eng), std_normal(eng));
  s.mu = Lm * zm;
  return s;
}

std::vector<double> simulate_longitudinal(const ScenarioConfig& cfg, const SubjectTruth& s, Engine& eng) {
  std::vector<double> y;
  y.reserve(cfg.obs_times.size());
  for (double t : cfg.obs_times) y.push_back(true_mean(cfg, s, t) + true_sd(cfg, s, t) * std_normal(eng));
  return y;
}

EventDraw simulate_event_time(const ScenarioConfig& cfg, const SubjectTruth& s, double u) {
  require(u > 0.0 && u < 1.0, ErrorCode::InvalidArgument, "event-time draw needs u in (0, 1)");
  const double target = -std::log(u);
  auto h = [&](double x) { return std::exp(true_log_hazard(cfg, s, x)); };
  auto panel = [&](double a, double b) {
    auto r = integrate_adaptive(h, a, b, cfg.inversion_tol, 5000);
    require(std::isfinite(r.value) && r.value >= 0.0, ErrorCode::Numeric,
            "event-time inversion: non-finite hazard integral on [" + csv::format_double(a) + ", " + csv::format_double(b) + "]");
    return r.value;
  };
  double cum = 0.0, lo = 0.0;
  while (lo < cfg.t_max) {
    double hi = std::min(cfg.t_max, lo + kPanel);
    double next = cum + panel(lo, hi);
    if (next >= target) {
      auto f = [&](double t) { return cum + (t > lo ? panel(lo, t) : 0.0) - target; };
      double flo = cum - target, fhi = next - target;
      if (flo > 0.0 || fhi < 0.0)
        fail(ErrorCode::Numeric, "event-time inversion: bracket failure on [" + csv::format_double(lo) + ", " +
                                     csv::format_double(hi) + "], H-target = (" + csv::format_double(flo) + ", " +
                                     csv::format_double(fhi) + ")");
      auto root = brent_root(f, lo, hi, flo, fhi, 1e-15 * std::max(1.0, hi), 1e-11, 300);
      if (!root.converged)
        fail(ErrorCode::Numeric, "event-time inversion: Brent did not converge near t=" + csv::format_double(root.root));
      return {root.root, false};
    }
    if (next < cum)
      fail(ErrorCode::Numeric, "event-time inversion: cumulative hazard decreased near t=" + csv::format_double(lo));
    cum = next;
    lo = hi;
  }
  return {cfg.t_max, true};
}

std::size_t apply_censoring(const ScenarioConfig& cfg, SubjectTruth& s, Engine& eng) {
  if (cfg.censoring_enabled()) {
    double u = uniform_open(eng);
    s.censor_time = cfg.censor_lo + (cfg.censor_hi - cfg.censor_lo) * u;
  } else {
    s.censor_time = kInf;
  }
  s.event = !s.administrative && s.event_time <= s.censor_time;
  s.observed_time = std::min(s.event_time, s.censor_time);
  std::size_t kept = 0;
  for (double t : cfg.obs_times)
    if (t <= s.observed_time) ++kept;
  return kept;
}

double SimulatedData::event_rate() const {
  if (truth.empty()) return 0.0;
  double e = 0.0;
  for (const auto& s : truth) e += s.event ? 1.0 : 0.0;
  return e / static_cast<double>(truth.size());
}

SimulatedData simulate(const ScenarioConfig& cfg) {
  cfg.validate();
  SimulatedData out;
  out.cfg = cfg;
  std::vector<LongRow> rows;
  std::vector<SurvivalRecord> surv;
  for (int i = 0; i < cfg.n_subjects; ++i) {
    Engine eng = make_engine(cfg.seed, {static_cast<std::uint64_t>(i)});
    SubjectTruth s = simulate_subject_truth(cfg, eng);
    std::vector<double> y = simulate_longitudinal(cfg, s, eng);
    EventDraw ev = simulate_event_time(cfg, s, uniform_open(eng));
    s.event_time = ev.time;
    s.administrative = ev.administrative;
    std::size_t kept = apply_censoring(cfg, s, eng);
    const std::string id = std::to_string(i + 1);
    for (std::size_t k = 0; k < kept; ++k) rows.push_back({id, cfg.outcome, cfg.obs_times[k], y[k]});
    surv.push_back({id, s.observed_time, s.event ? EventStatus::Event : EventStatus::Censored, {}});
    out.truth.push_back(std::move(s));
  }
  out.dataset = LongitudinalDataset::build(std::move(rows), std::move(surv), {});
  return out;
}

void write_simulation(const SimulatedData& sim, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  emit(sim.dataset, dir);
  const auto& cfg = sim.cfg;
  csv::Table obs;
  obs.header = {"subject", "time", "m", "sigma"};
  csv::Table subj;
  subj.header = {"subject"};
  for (int r = 0; r < cfg.n_coef(); ++r) subj.header.push_back("b" + std::to_string(r));
  for (const char* c : {"mu0", "mu1", "event_time", "administrative", "censor_time", "observed_time", "status"})
    subj.header.push_back(c);
  for (std::size_t i = 0; i < sim.truth.size(); ++i) {
    const auto& s = sim.truth[i];
    const std::string id = std::to_string(i + 1);
    for (double t : cfg.obs_times)
      if (t <= s.observed_time)
        obs.rows.push_back({id, csv::format_double(t), csv::format_double(true_mean(cfg, s, t)),
                            csv::format_double(true_sd(cfg, s, t))});
    std::vector<std::string> row{id};
    for (int r = 0; r < cfg.n_coef(); ++r) row.push_back(csv::format_double(s.b[r]));
    row.push_back(csv::format_double(s.mu[0]));
    row.push_back(csv::format_double(s.mu[1]));
    row.push_back(csv::format_double(s.event_time));
    row.push_back(s.administrative ? "1" : "0");
    row.push_back(std::isfinite(s.censor_time) ? csv::format_double(s.censor_time) : "inf");
    row.push_back(csv::format_double(s.observed_time));
    row.push_back(s.event ? "1" : "0");
    subj.rows.push_back(std::move(row));
  }
  csv::write_atomic(dir / "truth.csv", csv::render(obs));
  csv::write_atomic(dir / "truth_subjects.csv", csv::render(subj));
  csv::write_atomic(dir / "scenario.json", cfg.to_json().dump(2) + "\n");
}

}  // namespace jmvar
