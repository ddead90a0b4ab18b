#include "jmvar/jointmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "jmvar/error.hpp"
#include "jmvar/stats.hpp"

namespace jmvar {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double normal_logpdf(double x, double mean, double sd) {
  double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * kLog2Pi;
}

// Half-normal(0, scale) density of x >= 0.
double half_normal_logpdf(double x, double scale) {
  if (x < 0.0) return kNegInf;
  double z = x / scale;
  return -0.5 * z * z - std::log(scale) + 0.5 * std::log(2.0 / std::numbers::pi);
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception&) {
    fail(ErrorCode::Config, path + "." + key + ": wrong type");
  }
}

}  // namespace

JointModelSpec JointModelSpec::from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::Config, "model: expected an object");
  JointModelSpec spec;
  require(j.contains("submodels") && j["submodels"].is_array() && !j["submodels"].empty(), ErrorCode::Config,
          "model.submodels: expected a non-empty array");
  for (std::size_t k = 0; k < j["submodels"].size(); ++k) {
    const auto& s = j["submodels"][k];
    std::string path = "model.submodels[" + std::to_string(k) + "]";
    require(s.is_object(), ErrorCode::Config, path + ": expected an object");
    SubmodelSpec sub;
    require(s.contains("outcome") && s["outcome"].is_string(), ErrorCode::Config, path + ".outcome: expected string");
    sub.outcome = s["outcome"].get<std::string>();
    if (s.contains("fixed") || s.contains("random")) {
      nlohmann::json tm{{"fixed", s.value("fixed", nlohmann::json::array({"intercept"}))},
                        {"random", s.value("random", nlohmann::json::array())}};
      try {
        sub.model = TimeModel::from_json(tm.dump());
      } catch (const Error& e) {
        fail(ErrorCode::Config, path + ": " + e.what());
      }
    }
    sub.associated = get_or<bool>(s, "associated", true, path);
    if (s.contains("fixed_residual_sd")) {
      double v = get_or<double>(s, "fixed_residual_sd", 1.0, path);
      require(v > 0.0, ErrorCode::Config, path + ".fixed_residual_sd: must be positive");
      sub.fixed_residual_sd = v;
    }
    spec.submodels.push_back(std::move(sub));
  }
  spec.survival = get_or<bool>(j, "survival", true, "model");
  if (j.contains("covariates")) {
    require(j["covariates"].is_array(), ErrorCode::Config, "model.covariates: expected array of strings");
    std::vector<std::string> cov;
    for (const auto& c : j["covariates"]) {
      require(c.is_string(), ErrorCode::Config, "model.covariates: expected array of strings");
      cov.push_back(c.get<std::string>());
    }
    spec.covariates = std::move(cov);
  }
  if (j.contains("baseline")) {
    const auto& b = j["baseline"];
    spec.baseline.degree = get_or<int>(b, "degree", 3, "model.baseline");
    spec.baseline.n_basis = get_or<int>(b, "n_basis", 9, "model.baseline");
    spec.baseline.penalty_order = get_or<int>(b, "penalty_order", 2, "model.baseline");
    require(spec.baseline.degree >= 0, ErrorCode::Config, "model.baseline.degree: must be >= 0");
    require(spec.baseline.n_basis > spec.baseline.degree, ErrorCode::Config,
            "model.baseline.n_basis: must exceed the degree");
    if (b.contains("knots")) {
      require(b["knots"].is_array(), ErrorCode::Config, "model.baseline.knots: expected an array of numbers");
      for (const auto& k : b["knots"]) {
        require(k.is_number(), ErrorCode::Config, "model.baseline.knots: expected an array of numbers");
        spec.baseline.knots.push_back(k.get<double>());
      }
      spec.baseline.n_basis = static_cast<int>(spec.baseline.knots.size()) + spec.baseline.degree + 1;
    }
    require(spec.baseline.n_basis > spec.baseline.penalty_order, ErrorCode::Config,
            "model.baseline.n_basis: must exceed the penalty order");
  }
  spec.quad_nodes = get_or<int>(j, "quad_nodes", 15, "model");
  if (j.contains("priors")) {
    const auto& p = j["priors"];
    auto& pr = spec.priors;
    pr.standardized = get_or<bool>(p, "standardized", pr.standardized, "model.priors");
    pr.fixed_sd = get_or<double>(p, "fixed_sd", pr.fixed_sd, "model.priors");
    pr.sd_scale = get_or<double>(p, "sd_scale", pr.sd_scale, "model.priors");
    pr.lkj_eta = get_or<double>(p, "lkj_eta", pr.lkj_eta, "model.priors");
    pr.smooth_sd_scale = get_or<double>(p, "smooth_sd_scale", pr.smooth_sd_scale, "model.priors");
    pr.spline_ridge_var = get_or<double>(p, "spline_ridge_var", pr.spline_ridge_var, "model.priors");
    require(pr.fixed_sd > 0 && pr.sd_scale > 0 && pr.lkj_eta > 0 && pr.smooth_sd_scale > 0 &&
                pr.spline_ridge_var > 0,
            ErrorCode::Config, "model.priors: scales must be positive");
  }
  return spec;
}

nlohmann::json JointModelSpec::to_json() const {
  nlohmann::json j;
  j["submodels"] = nlohmann::json::array();
  for (const auto& s : submodels) {
    auto tm = nlohmann::json::parse(s.model.to_json());
    nlohmann::json o{{"outcome", s.outcome}, {"fixed", tm["fixed"]}, {"random", tm["random"]},
                     {"associated", s.associated}};
    if (s.fixed_residual_sd) o["fixed_residual_sd"] = *s.fixed_residual_sd;
    j["submodels"].push_back(o);
  }
  j["survival"] = survival;
  if (covariates) j["covariates"] = *covariates;
  j["baseline"] = {{"degree", baseline.degree}, {"n_basis", baseline.n_basis}, {"penalty_order", baseline.penalty_order}};
  if (!baseline.knots.empty()) j["baseline"]["knots"] = baseline.knots;
  j["quad_nodes"] = quad_nodes;
  j["priors"] = {{"standardized", priors.standardized},       {"fixed_sd", priors.fixed_sd},
                 {"sd_scale", priors.sd_scale},               {"lkj_eta", priors.lkj_eta},
                 {"smooth_sd_scale", priors.smooth_sd_scale}, {"spline_ridge_var", priors.spline_ridge_var}};
  return j;
}

void hazard_quadrature(double t, const std::vector<double>& breaks, const QuadratureRule& rule,
                       std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.clear();
  weights.clear();
  if (!(t > 0.0)) return;
  double a = 0.0;
  auto panel = [&](double lo, double hi) {
    double half = 0.5 * (hi - lo), mid = 0.5 * (hi + lo);
    for (std::size_t k = 0; k < rule.size(); ++k) {
      nodes.push_back(mid + half * rule.nodes[k]);
      weights.push_back(half * rule.weights[k]);
    }
  };
  for (double b : breaks) {
    if (b <= a) continue;
    if (b >= t) break;
    panel(a, b);
    a = b;
  }
  panel(a, t);
}

double integrate_hazard(const std::function<double(double)>& log_h, double t, const std::vector<double>& breaks,
                        const QuadratureRule& rule) {
  std::vector<double> nodes, weights;
  hazard_quadrature(t, breaks, rule, nodes, weights);
  double sum = 0.0;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    double h = std::exp(log_h(nodes[k]));
    if (!std::isfinite(h)) fail(ErrorCode::Numeric, "non-finite hazard at t = " + std::to_string(nodes[k]));
    sum += weights[k] * h;
  }
  return sum;
}

double lkj_logdens(const Eigen::MatrixXd& corr, double eta) {
  if (corr.rows() < 2 || eta == 1.0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(corr);
  if (llt.info() != Eigen::Success) return kNegInf;
  return (eta - 1.0) * 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

JointModel::JointModel(JointModelSpec spec, std::shared_ptr<const LongitudinalDataset> data)
    : spec_(std::move(spec)), data_(std::move(data)) {
  require(data_ != nullptr, ErrorCode::InvalidArgument, "joint model needs a dataset");
  require(!spec_.submodels.empty(), ErrorCode::Config, "joint model needs at least one longitudinal submodel");
  require(data_->subject_count() >= 1, ErrorCode::Validation, "dataset has no subjects");
  rule_ = &gauss_kronrod_rule(spec_.quad_nodes);

  for (const auto& sub : spec_.submodels) {
    int k = data_->outcome_index(sub.outcome);
    require(k >= 0, ErrorCode::Validation, "dataset has no outcome '" + sub.outcome + "'");
    outcome_index_.push_back(k);
    TimeModel m = sub.model;
    if (m.needs_bases() && !m.spline_basis()) {
      std::vector<double> times;
      for (std::size_t i = 0; i < data_->subject_count(); ++i) {
        const auto& s = data_->series(static_cast<std::size_t>(k), i);
        times.insert(times.end(), s.times.begin(), s.times.end());
      }
      m.fit_bases(times);
    }
    models_.push_back(std::move(m));
  }

  const auto& names = data_->covariate_names();
  if (spec_.covariates) {
    for (const auto& c : *spec_.covariates) {
      auto it = std::find(names.begin(), names.end(), c);
      require(it != names.end(), ErrorCode::Validation, "dataset has no covariate '" + c + "'");
      cov_index_.push_back(static_cast<int>(it - names.begin()));
    }
  } else {
    for (std::size_t c = 0; c < names.size(); ++c) cov_index_.push_back(static_cast<int>(c));
  }
  if (!spec_.survival) cov_index_.clear();

  if (spec_.survival) {
    std::vector<double> event_times, all_times;
    double t_max = 0.0;
    for (std::size_t i = 0; i < data_->subject_count(); ++i) {
      const auto& s = data_->survival(i);
      all_times.push_back(s.event_time);
      if (s.event()) event_times.push_back(s.event_time);
      t_max = std::max(t_max, s.event_time);
    }
    const auto& src = event_times.size() >= 2 ? event_times : all_times;
    if (spec_.baseline.knots.empty()) {
      basis_ = BSplineBasis::at_quantiles(src, spec_.baseline.degree, spec_.baseline.n_basis, 0.0, t_max);
    } else {
      const auto& kn = spec_.baseline.knots;
      require(kn.front() > 0.0 && kn.back() < t_max && std::is_sorted(kn.begin(), kn.end()), ErrorCode::Config,
              "model.baseline.knots: must be increasing and inside (0, max event time)");
      basis_ = BSplineBasis(spec_.baseline.degree, kn, 0.0, t_max);
    }
    penalty_ = difference_penalty(spec_.baseline.penalty_order, basis_->size());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(penalty_);
    penalty_eigenvalues_ = es.eigenvalues().cwiseMax(0.0);
  }
  precompute();
}

std::vector<std::string> JointModel::covariate_names() const {
  std::vector<std::string> out;
  for (int c : cov_index_) out.push_back(data_->covariate_names()[c]);
  return out;
}

void JointModel::precompute() {
  const std::size_t n = data_->subject_count();
  const int K = n_submodels();
  designs_.resize(n);
  scales_.outcome_mean.assign(K, 0.0);
  scales_.outcome_sd.assign(K, 1.0);
  scales_.column_mean.assign(K, Eigen::VectorXd());
  scales_.column_sd.assign(K, Eigen::VectorXd());

  for (int k = 0; k < K; ++k) {
    const auto& m = models_[k];
    const int p = m.n_fixed();
    std::vector<double> ys;
    std::vector<Eigen::VectorXd> rows;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = data_->series(static_cast<std::size_t>(outcome_index_[k]), i);
      Eigen::MatrixXd X(static_cast<Eigen::Index>(s.size()), p);
      Eigen::VectorXd y(static_cast<Eigen::Index>(s.size()));
      for (std::size_t j = 0; j < s.size(); ++j) {
        X.row(static_cast<Eigen::Index>(j)) = m.fixed_row(s.times[j]).transpose();
        y[static_cast<Eigen::Index>(j)] = s.values[j];
        ys.push_back(s.values[j]);
        rows.push_back(X.row(static_cast<Eigen::Index>(j)).transpose());
      }
      designs_[i].X.push_back(std::move(X));
      designs_[i].y.push_back(std::move(y));
    }
    require(ys.size() >= 2, ErrorCode::Validation, "outcome '" + spec_.submodels[k].outcome + "' has fewer than two observations");
    scales_.outcome_mean[k] = stats::mean(ys);
    double sd = stats::sd(ys);
    scales_.outcome_sd[k] = sd > 0.0 ? sd : 1.0;
    Eigen::VectorXd cm = Eigen::VectorXd::Zero(p), cs = Eigen::VectorXd::Zero(p);
    for (int j = 0; j < p; ++j) {
      std::vector<double> col;
      for (const auto& r : rows) col.push_back(r[j]);
      cm[j] = stats::mean(col);
      cs[j] = stats::sd(col);
    }
    scales_.column_mean[k] = cm;
    scales_.column_sd[k] = cs;
  }

  const int C = n_covariates();
  scales_.covariate_mean = Eigen::VectorXd::Zero(C);
  scales_.covariate_sd = Eigen::VectorXd::Ones(C);
  for (int c = 0; c < C; ++c) {
    std::vector<double> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(data_->survival(i).covariates[cov_index_[c]]);
    scales_.covariate_mean[c] = stats::mean(v);
    double sd = stats::sd(v);
    scales_.covariate_sd[c] = sd > 0.0 ? sd : 1.0;
  }

  if (!spec_.survival) return;
  const int P = basis_->size();
  auto& nd = nodes_;
  nd.offset.assign(n + 1, 0);
  std::vector<double> t_all, w_all, tn, wn;
  for (std::size_t i = 0; i < n; ++i) {
    hazard_quadrature(data_->survival(i).event_time, basis_->interior_knots(), *rule_, tn, wn);
    t_all.insert(t_all.end(), tn.begin(), tn.end());
    w_all.insert(w_all.end(), wn.begin(), wn.end());
    nd.offset[i + 1] = t_all.size();
  }
  const auto N = static_cast<Eigen::Index>(t_all.size());
  nd.weight = Eigen::Map<Eigen::VectorXd>(w_all.data(), N);
  nd.B.resize(N, P);
  for (Eigen::Index r = 0; r < N; ++r) nd.B.row(r) = basis_->eval(t_all[r]).transpose();
  nd.X.assign(K, Eigen::MatrixXd());
  nd.X_event.assign(K, Eigen::MatrixXd());
  for (int k = 0; k < K; ++k) {
    nd.X[k].resize(N, models_[k].n_fixed());
    for (Eigen::Index r = 0; r < N; ++r) nd.X[k].row(r) = models_[k].fixed_row(t_all[r]).transpose();
    nd.X_event[k].resize(static_cast<Eigen::Index>(n), models_[k].n_fixed());
  }
  nd.B_event.resize(static_cast<Eigen::Index>(n), P);
  nd.W.resize(static_cast<Eigen::Index>(n), C);
  nd.status.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = data_->survival(i);
    auto r = static_cast<Eigen::Index>(i);
    nd.B_event.row(r) = basis_->eval(s.event_time).transpose();
    for (int k = 0; k < K; ++k) nd.X_event[k].row(r) = models_[k].fixed_row(s.event_time).transpose();
    for (int c = 0; c < C; ++c) nd.W(r, c) = s.covariates[cov_index_[c]];
    nd.status[r] = s.event() ? 1.0 : 0.0;
  }
}

JointParams JointModel::zero_params() const {
  JointParams p;
  const auto n = static_cast<Eigen::Index>(n_subjects());
  for (int k = 0; k < n_submodels(); ++k) {
    SubmodelParams s;
    s.beta = Eigen::VectorXd::Zero(models_[k].n_fixed());
    s.Sigma = Eigen::MatrixXd::Identity(models_[k].n_random(), models_[k].n_random());
    s.tau2 = spec_.submodels[k].fixed_residual_sd ? std::pow(*spec_.submodels[k].fixed_residual_sd, 2) : 1.0;
    s.b = Eigen::MatrixXd::Zero(n, models_[k].n_random());
    p.sub.push_back(std::move(s));
  }
  p.spline = Eigen::VectorXd::Zero(n_spline());
  p.gamma = Eigen::VectorXd::Zero(n_covariates());
  p.alpha = Eigen::VectorXd::Zero(n_submodels());
  p.smooth_sd = 1.0;
  return p;
}

double JointModel::trajectory(const JointParams& p, int k, std::size_t subject, double t) const {
  const auto& m = models_.at(k);
  double v = m.fixed_row(t).dot(p.sub[k].beta);
  if (m.n_random() > 0) v += m.random_row(t).dot(p.sub[k].b.row(static_cast<Eigen::Index>(subject)).transpose());
  return v;
}

double JointModel::log_hazard(const JointParams& p, std::size_t subject, double t) const {
  require(has_survival(), ErrorCode::InvalidArgument, "model has no survival submodel");
  double eta = basis_->eval(t).dot(p.spline);
  const auto& cov = data_->survival(subject).covariates;
  for (int c = 0; c < n_covariates(); ++c) eta += p.gamma[c] * cov[cov_index_[c]];
  for (int k = 0; k < n_submodels(); ++k)
    if (spec_.submodels[k].associated && p.alpha[k] != 0.0) eta += p.alpha[k] * trajectory(p, k, subject, t);
  return eta;
}

double JointModel::cumulative_hazard(const JointParams& p, std::size_t subject, double t) const {
  require(has_survival(), ErrorCode::InvalidArgument, "model has no survival submodel");
  require(t >= 0.0 && std::isfinite(t), ErrorCode::InvalidArgument, "cumulative hazard needs finite t >= 0");
  return integrate_hazard([&](double u) { return log_hazard(p, subject, u); }, t, basis_->interior_knots(), *rule_);
}

double JointModel::longitudinal_loglik(const JointParams& p, int k, std::size_t subject) const {
  const auto& d = designs_[subject];
  const auto& sp = p.sub[k];
  if (d.y[k].size() == 0) return 0.0;
  if (!(sp.tau2 > 0.0)) return kNegInf;
  Eigen::VectorXd coef = sp.beta;
  const auto& cols = models_[k].random_columns();
  for (std::size_t r = 0; r < cols.size(); ++r) coef[cols[r]] += sp.b(static_cast<Eigen::Index>(subject), static_cast<Eigen::Index>(r));
  Eigen::VectorXd res = d.y[k] - d.X[k] * coef;
  const double nobs = static_cast<double>(res.size());
  return -0.5 * res.squaredNorm() / sp.tau2 - 0.5 * nobs * (std::log(sp.tau2) + kLog2Pi);
}

double JointModel::longitudinal_loglik(const JointParams& p, int k) const {
  double sum = 0.0;
  for (std::size_t i = 0; i < n_subjects(); ++i) sum += longitudinal_loglik(p, k, i);
  return sum;
}

double JointModel::random_effects_logdens(const JointParams& p, int k) const {
  const auto& sp = p.sub[k];
  const int q = models_[k].n_random();
  if (q == 0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(sp.Sigma);
  if (llt.info() != Eigen::Success) return kNegInf;
  const Eigen::MatrixXd L = llt.matrixL();
  double logdet = 2.0 * L.diagonal().array().log().sum();
  if (!std::isfinite(logdet)) return kNegInf;
  Eigen::MatrixXd Z = L.triangularView<Eigen::Lower>().solve(sp.b.transpose());
  const double n = static_cast<double>(n_subjects());
  return -0.5 * Z.squaredNorm() - 0.5 * n * (logdet + q * kLog2Pi);
}

double JointModel::survival_loglik(const JointParams& p, std::size_t subject) const {
  if (!has_survival()) return 0.0;
  const auto& s = data_->survival(subject);
  double ll = -cumulative_hazard(p, subject, s.event_time);
  if (s.event()) ll += log_hazard(p, subject, s.event_time);
  return ll;
}

double JointModel::survival_loglik(const JointParams& p) const {
  double sum = 0.0;
  for (std::size_t i = 0; i < n_subjects(); ++i) sum += survival_loglik(p, i);
  return sum;
}

double JointModel::beta_prior_sd(int k, int j) const {
  const auto& pr = spec_.priors;
  if (!pr.standardized) return pr.fixed_sd;
  double sx = scales_.column_sd[k][j];
  return pr.fixed_sd * scales_.outcome_sd[k] / (sx > 0.0 ? sx : 1.0);
}

double JointModel::beta_prior_mean(int k, int j) const {
  if (!spec_.priors.standardized) return 0.0;
  const auto& terms = models_[k].fixed_names();
  return terms[j] == "intercept" ? scales_.outcome_mean[k] : 0.0;
}

double JointModel::gamma_prior_sd(int c) const {
  const auto& pr = spec_.priors;
  return pr.standardized ? pr.fixed_sd / scales_.covariate_sd[c] : pr.fixed_sd;
}

double JointModel::alpha_prior_sd(int k) const {
  const auto& pr = spec_.priors;
  return pr.standardized ? pr.fixed_sd / scales_.outcome_sd[k] : pr.fixed_sd;
}

double JointModel::residual_sd_prior_scale(int k) const {
  const auto& pr = spec_.priors;
  return pr.standardized ? pr.sd_scale * scales_.outcome_sd[k] : pr.sd_scale;
}

double JointModel::random_sd_prior_scale(int k, int r) const {
  const auto& pr = spec_.priors;
  if (!pr.standardized) return pr.sd_scale;
  double sx = scales_.column_sd[k][models_[k].random_columns()[r]];
  return pr.sd_scale * scales_.outcome_sd[k] / (sx > 0.0 ? sx : 1.0);
}

double JointModel::log_prior(const JointParams& p) const {
  const auto& pr = spec_.priors;
  double lp = 0.0;
  for (int k = 0; k < n_submodels(); ++k) {
    const auto& sp = p.sub[k];
    for (int j = 0; j < sp.beta.size(); ++j) lp += normal_logpdf(sp.beta[j], beta_prior_mean(k, j), beta_prior_sd(k, j));
    if (!spec_.submodels[k].fixed_residual_sd) {
      if (!(sp.tau2 > 0.0)) return kNegInf;
      lp += half_normal_logpdf(std::sqrt(sp.tau2), residual_sd_prior_scale(k));
    }
    const int q = models_[k].n_random();
    if (q > 0) {
      Eigen::VectorXd sd = sp.Sigma.diagonal().cwiseSqrt();
      if (!(sp.Sigma.diagonal().minCoeff() > 0.0)) return kNegInf;
      for (int r = 0; r < q; ++r) lp += half_normal_logpdf(sd[r], random_sd_prior_scale(k, r));
      Eigen::MatrixXd corr = sd.cwiseInverse().asDiagonal() * sp.Sigma * sd.cwiseInverse().asDiagonal();
      double l = lkj_logdens(corr, pr.lkj_eta);
      if (q >= 2) {
        Eigen::LLT<Eigen::MatrixXd> llt(corr);
        if (llt.info() != Eigen::Success) return kNegInf;
      }
      lp += l;
    }
  }
  if (has_survival()) {
    for (int k = 0; k < n_submodels(); ++k)
      if (spec_.submodels[k].associated) lp += normal_logpdf(p.alpha[k], 0.0, alpha_prior_sd(k));
    for (int c = 0; c < n_covariates(); ++c) lp += normal_logpdf(p.gamma[c], 0.0, gamma_prior_sd(c));
    const double s = p.smooth_sd;
    if (!(s > 0.0)) return kNegInf;
    lp += half_normal_logpdf(s, pr.smooth_sd_scale);
    const double ridge = 1.0 / pr.spline_ridge_var;
    double logdet = (penalty_eigenvalues_.array() / (s * s) + ridge).log().sum();
    // The prior is on the log baseline at the centre of the associated
    // trajectories and covariates, so it does not depend on where they sit.
    double shift = 0.0;
    for (int k = 0; k < n_submodels(); ++k)
      if (spec_.submodels[k].associated) shift += p.alpha[k] * scales_.outcome_mean[k];
    if (n_covariates() > 0) shift += scales_.covariate_mean.dot(p.gamma);
    Eigen::VectorXd centered = p.spline.array() + shift;
    double quad = centered.dot(penalty_ * centered) / (s * s) + ridge * centered.squaredNorm();
    lp += 0.5 * logdet - 0.5 * quad - 0.5 * static_cast<double>(p.spline.size()) * kLog2Pi;
  }
  return lp;
}

double JointModel::log_posterior(const JointParams& p) const {
  double lp = log_prior(p);
  if (!std::isfinite(lp)) return kNegInf;
  for (int k = 0; k < n_submodels(); ++k) {
    double re = random_effects_logdens(p, k);
    if (!std::isfinite(re)) return kNegInf;
    lp += longitudinal_loglik(p, k) + re;
  }
  lp += survival_loglik(p);
  return std::isfinite(lp) ? lp : kNegInf;
}

Eigen::VectorXd JointModel::survival_gradient(const JointParams& p) const {
  require(has_survival(), ErrorCode::InvalidArgument, "model has no survival submodel");
  const int P = n_spline(), C = n_covariates(), K = n_submodels();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(P + C + K);
  const auto& nd = nodes_;
  for (std::size_t i = 0; i < n_subjects(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    Eigen::VectorXd w = nd.W.row(r).transpose();
    std::vector<Eigen::VectorXd> coef(K);
    for (int k = 0; k < K; ++k) {
      coef[k] = p.sub[k].beta;
      const auto& cols = models_[k].random_columns();
      for (std::size_t c = 0; c < cols.size(); ++c) coef[k][cols[c]] += p.sub[k].b(r, static_cast<Eigen::Index>(c));
    }
    double wg = C > 0 ? w.dot(p.gamma) : 0.0;
    if (nd.status[r] > 0) {
      g.head(P) += nd.B_event.row(r).transpose();
      g.segment(P, C) += w;
      for (int k = 0; k < K; ++k)
        if (spec_.submodels[k].associated) g[P + C + k] += nd.X_event[k].row(r).dot(coef[k]);
    }
    for (std::size_t n = nd.offset[i]; n < nd.offset[i + 1]; ++n) {
      const auto nn = static_cast<Eigen::Index>(n);
      Eigen::VectorXd m(K);
      double eta = nd.B.row(nn).dot(p.spline) + wg;
      for (int k = 0; k < K; ++k) {
        m[k] = nd.X[k].row(nn).dot(coef[k]);
        if (spec_.submodels[k].associated) eta += p.alpha[k] * m[k];
      }
      double wh = nd.weight[nn] * std::exp(eta);
      g.head(P) -= wh * nd.B.row(nn).transpose();
      g.segment(P, C) -= wh * w;
      for (int k = 0; k < K; ++k)
        if (spec_.submodels[k].associated) g[P + C + k] -= wh * m[k];
    }
  }
  return g;
}

Eigen::MatrixXd JointModel::survival_hessian(const JointParams& p) const {
  require(has_survival(), ErrorCode::InvalidArgument, "model has no survival submodel");
  const int P = n_spline(), C = n_covariates(), K = n_submodels();
  const int D = P + C + K;
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(D, D);
  const auto& nd = nodes_;
  Eigen::VectorXd x(D);
  for (std::size_t i = 0; i < n_subjects(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    std::vector<Eigen::VectorXd> coef(K);
    for (int k = 0; k < K; ++k) {
      coef[k] = p.sub[k].beta;
      const auto& cols = models_[k].random_columns();
      for (std::size_t c = 0; c < cols.size(); ++c) coef[k][cols[c]] += p.sub[k].b(r, static_cast<Eigen::Index>(c));
    }
    double wg = C > 0 ? nd.W.row(r).dot(p.gamma) : 0.0;
    for (std::size_t n = nd.offset[i]; n < nd.offset[i + 1]; ++n) {
      const auto nn = static_cast<Eigen::Index>(n);
      x.head(P) = nd.B.row(nn).transpose();
      x.segment(P, C) = nd.W.row(r).transpose();
      double eta = x.head(P).dot(p.spline) + wg;
      for (int k = 0; k < K; ++k) {
        double m = nd.X[k].row(nn).dot(coef[k]);
        x[P + C + k] = spec_.submodels[k].associated ? m : 0.0;
        eta += spec_.submodels[k].associated ? p.alpha[k] * m : 0.0;
      }
      H.noalias() -= nd.weight[nn] * std::exp(eta) * x * x.transpose();
    }
  }
  return H;
}

Eigen::VectorXd JointModel::longitudinal_gradient(const JointParams& p, int k) const {
  const auto& sp = p.sub[k];
  const int pf = models_[k].n_fixed(), q = models_[k].n_random();
  const auto& cols = models_[k].random_columns();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(pf + q * static_cast<int>(n_subjects()));
  for (std::size_t i = 0; i < n_subjects(); ++i) {
    const auto& d = designs_[i];
    if (d.y[k].size() == 0) continue;
    Eigen::VectorXd coef = sp.beta;
    for (int r = 0; r < q; ++r) coef[cols[r]] += sp.b(static_cast<Eigen::Index>(i), r);
    Eigen::VectorXd xr = d.X[k].transpose() * (d.y[k] - d.X[k] * coef) / sp.tau2;
    g.head(pf) += xr;
    for (int r = 0; r < q; ++r) g[pf + static_cast<int>(i) * q + r] = xr[cols[r]];
  }
  return g;
}

std::vector<std::string> JointModel::parameter_names() const {
  std::vector<std::string> out;
  for (int k = 0; k < n_submodels(); ++k) {
    const auto& o = spec_.submodels[k].outcome;
    auto fixed = models_[k].fixed_names();
    auto random = models_[k].random_names();
    for (const auto& f : fixed) out.push_back("beta." + o + "." + f);
    for (const auto& r : random) out.push_back("sd." + o + "." + r);
    for (std::size_t j = 0; j < random.size(); ++j)
      for (std::size_t i = j + 1; i < random.size(); ++i) out.push_back("cor." + o + "." + random[i] + "." + random[j]);
    if (!spec_.submodels[k].fixed_residual_sd) out.push_back("resid_sd." + o);
  }
  if (has_survival()) {
    for (int k = 0; k < n_submodels(); ++k)
      if (spec_.submodels[k].associated) out.push_back("alpha." + spec_.submodels[k].outcome);
    for (const auto& c : covariate_names()) out.push_back("gamma." + c);
    for (int j = 0; j < n_spline(); ++j) out.push_back("spline." + std::to_string(j + 1));
    out.push_back("smooth_sd");
  }
  return out;
}

Eigen::VectorXd JointModel::flatten(const JointParams& p) const {
  std::vector<double> v;
  for (int k = 0; k < n_submodels(); ++k) {
    const auto& sp = p.sub[k];
    for (int j = 0; j < sp.beta.size(); ++j) v.push_back(sp.beta[j]);
    const int q = models_[k].n_random();
    Eigen::VectorXd sd = sp.Sigma.diagonal().cwiseSqrt();
    for (int r = 0; r < q; ++r) v.push_back(sd[r]);
    for (int j = 0; j < q; ++j)
      for (int i = j + 1; i < q; ++i) v.push_back(sp.Sigma(i, j) / (sd[i] * sd[j]));
    if (!spec_.submodels[k].fixed_residual_sd) v.push_back(std::sqrt(sp.tau2));
  }
  if (has_survival()) {
    for (int k = 0; k < n_submodels(); ++k)
      if (spec_.submodels[k].associated) v.push_back(p.alpha[k]);
    for (int c = 0; c < n_covariates(); ++c) v.push_back(p.gamma[c]);
    for (int j = 0; j < n_spline(); ++j) v.push_back(p.spline[j]);
    v.push_back(p.smooth_sd);
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace jmvar
