#include "jmvar/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "jmvar/error.hpp"

namespace jmvar {

LmmMethod parse_lmm_method(std::string_view text) {
  if (text == "reml" || text == "REML") return LmmMethod::REML;
  if (text == "ml" || text == "ML") return LmmMethod::ML;
  fail(ErrorCode::Config, "unknown LMM method '" + std::string(text) + "' (reml or ml)");
}

ResidualKind parse_residual_kind(std::string_view text) {
  if (text == "raw") return ResidualKind::Raw;
  if (text == "squared") return ResidualKind::Squared;
  if (text == "absolute") return ResidualKind::Absolute;
  fail(ErrorCode::Config, "unknown residual kind '" + std::string(text) + "' (raw, squared, absolute)");
}

const char* residual_kind_name(ResidualKind kind) noexcept {
  switch (kind) {
    case ResidualKind::Raw: return "raw";
    case ResidualKind::Squared: return "squared";
    case ResidualKind::Absolute: return "absolute";
  }
  return "?";
}

ResidualScaling parse_residual_scaling(std::string_view text) {
  if (text == "none") return ResidualScaling::None;
  if (text == "leverage") return ResidualScaling::Leverage;
  fail(ErrorCode::Config, "unknown residual scaling '" + std::string(text) + "' (none, leverage)");
}

const char* residual_scaling_name(ResidualScaling scaling) noexcept {
  return scaling == ResidualScaling::Leverage ? "leverage" : "none";
}

double transform_residual(double raw, double scale, ResidualKind kind, ResidualScaling scaling) {
  const double e = scaling == ResidualScaling::Leverage ? raw / scale : raw;
  switch (kind) {
    case ResidualKind::Raw: return e;
    case ResidualKind::Squared: return e * e;
    case ResidualKind::Absolute: return std::abs(e);
  }
  return e;
}

namespace {

std::vector<LmmObjective::SubjectStats> build_stats(const LongitudinalDataset& ds, std::string_view outcome,
                                                    const TimeModel& model) {
  const int p = model.n_fixed(), q = model.n_random();
  std::vector<LmmObjective::SubjectStats> out(ds.subject_count());
  int k = ds.outcome_index(outcome);
  for (std::size_t i = 0; i < ds.subject_count(); ++i) {
    auto& s = out[i];
    s.xtx = Eigen::MatrixXd::Zero(p, p);
    s.ztz = Eigen::MatrixXd::Zero(q, q);
    s.ztx = Eigen::MatrixXd::Zero(q, p);
    s.xty = Eigen::VectorXd::Zero(p);
    s.zty = Eigen::VectorXd::Zero(q);
    if (k < 0) continue;
    const auto& ser = ds.series(static_cast<std::size_t>(k), i);
    for (std::size_t j = 0; j < ser.size(); ++j) {
      Eigen::VectorXd x = model.fixed_row(ser.times[j]);
      Eigen::VectorXd z = model.random_row(ser.times[j]);
      double y = ser.values[j];
      s.n += 1;
      s.xtx.noalias() += x * x.transpose();
      s.ztz.noalias() += z * z.transpose();
      s.ztx.noalias() += z * x.transpose();
      s.xty += x * y;
      s.zty += z * y;
      s.yty += y * y;
    }
  }
  return out;
}

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

}  // namespace

LmmObjective::LmmObjective(const LongitudinalDataset& ds, std::string_view outcome, const TimeModel& model,
                           LmmMethod method)
    : method_(method), n_fixed_(model.n_fixed()), n_random_(model.n_random()) {
  require(ds.has_outcome(outcome), ErrorCode::InvalidArgument, "unknown outcome '" + std::string(outcome) + "'");
  stats_ = build_stats(ds, outcome, model);
  for (const auto& s : stats_) n_obs_ += static_cast<std::size_t>(s.n);
}

Eigen::MatrixXd LmmObjective::cholesky_factor(const Eigen::VectorXd& theta) const {
  const int q = n_random_;
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(q, q);
  int idx = 0;
  for (int j = 0; j < q; ++j)
    for (int i = j; i < q; ++i) {
      L(i, j) = i == j ? std::exp(theta[idx]) : theta[idx];
      ++idx;
    }
  return L;
}

Eigen::VectorXd LmmObjective::theta_from_relative_cov(const Eigen::MatrixXd& relative_cov) const {
  const int q = n_random_;
  Eigen::LLT<Eigen::MatrixXd> llt(relative_cov);
  require(llt.info() == Eigen::Success, ErrorCode::Numeric, "relative covariance is not positive definite");
  Eigen::MatrixXd L = llt.matrixL();
  Eigen::VectorXd theta(n_params());
  int idx = 0;
  for (int j = 0; j < q; ++j)
    for (int i = j; i < q; ++i) theta[idx++] = i == j ? std::log(L(i, i)) : L(i, j);
  return theta;
}

double LmmObjective::evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad, Profile* profile) const {
  const int p = n_fixed_, q = n_random_;
  const Eigen::MatrixXd L = cholesky_factor(theta);
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p);
  double ywy = 0.0, logdet_m = 0.0, yty = 0.0;
  std::vector<Eigen::MatrixXd> K(grad ? stats_.size() : 0);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(q, q);

  for (std::size_t i = 0; i < stats_.size(); ++i) {
    const auto& s = stats_[i];
    if (s.n == 0) continue;
    yty += s.yty;
    if (q == 0) {
      C += s.xtx;
      c += s.xty;
      ywy += s.yty;
      continue;
    }
    Eigen::MatrixXd M = I + L.transpose() * s.ztz * L;
    Eigen::LLT<Eigen::MatrixXd> llt(M);
    logdet_m += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    Eigen::MatrixXd Ki = L * llt.solve(L.transpose());
    C += s.xtx - s.ztx.transpose() * Ki * s.ztx;
    c += s.xty - s.ztx.transpose() * (Ki * s.zty);
    ywy += s.yty - s.zty.dot(Ki * s.zty);
    if (grad) K[i] = std::move(Ki);
  }

  Eigen::LLT<Eigen::MatrixXd> cllt(C);
  if (cllt.info() != Eigen::Success) fail(ErrorCode::Numeric, "X' V^-1 X is not positive definite");
  Eigen::VectorXd beta = cllt.solve(c);
  double r2 = ywy - c.dot(beta);
  const double n = static_cast<double>(n_obs_);
  const double dof = method_ == LmmMethod::REML ? n - p : n;
  // Noise-free data: keep sigma^2 positive at rounding level.
  r2 = std::max(r2, 1e-24 * std::max(1.0, yty));
  double logdet_c = 2.0 * cllt.matrixLLT().diagonal().array().log().sum();
  double dev = logdet_m + dof * (1.0 + kLog2Pi + std::log(r2 / dof));
  if (method_ == LmmMethod::REML) dev += logdet_c;

  if (grad) {
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(q, q);
    Eigen::MatrixXd Cinv = cllt.solve(Eigen::MatrixXd::Identity(p, p));
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      const auto& s = stats_[i];
      if (s.n == 0 || q == 0) continue;
      Eigen::MatrixXd P = I - s.ztz * K[i];
      Eigen::MatrixXd H = P * s.ztx;
      Eigen::VectorXd g = P * (s.zty - s.ztx * beta);
      D += P * s.ztz;
      if (method_ == LmmMethod::REML) D -= H * Cinv * H.transpose();
      D -= (dof / r2) * g * g.transpose();
    }
    Eigen::MatrixXd GL = 2.0 * D * L;
    grad->resize(n_params());
    int idx = 0;
    for (int j = 0; j < q; ++j)
      for (int i = j; i < q; ++i) {
        (*grad)[idx] = i == j ? GL(i, i) * L(i, i) : GL(i, j);
        ++idx;
      }
  }
  if (profile) {
    profile->deviance = dev;
    profile->beta = beta;
    profile->xtwx = C;
    profile->sigma2 = r2 / dof;
    profile->relative_cov = L * L.transpose();
  }
  return dev;
}

double LmmObjective::deviance(const Eigen::VectorXd& theta) const { return evaluate(theta, nullptr, nullptr); }

Eigen::VectorXd LmmObjective::gradient(const Eigen::VectorXd& theta) const {
  Eigen::VectorXd g;
  evaluate(theta, &g, nullptr);
  return g;
}

LmmObjective::Profile LmmObjective::profile(const Eigen::VectorXd& theta) const {
  Profile pr;
  evaluate(theta, nullptr, &pr);
  return pr;
}

Eigen::VectorXd LmmObjective::initial_theta() const {
  const int p = n_fixed_, q = n_random_;
  if (q == 0) return Eigen::VectorXd(0);
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p);
  for (const auto& s : stats_) {
    C += s.xtx;
    c += s.xty;
  }
  Eigen::VectorXd beta = C.ldlt().solve(c);
  std::vector<Eigen::VectorXd> coefs;
  Eigen::MatrixXd mean_ginv = Eigen::MatrixXd::Zero(q, q);
  double rss = 0.0, dof = 0.0;
  for (const auto& s : stats_) {
    if (s.n <= q) continue;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(s.ztz);
    if (lu.rank() < q) continue;
    Eigen::VectorXd zte = s.zty - s.ztx * beta;
    Eigen::VectorXd bi = lu.solve(zte);
    double ete = s.yty - 2.0 * beta.dot(s.xty) + beta.dot(s.xtx * beta);
    rss += ete - zte.dot(bi);
    dof += s.n - q;
    coefs.push_back(bi);
    mean_ginv += lu.inverse();
  }
  Eigen::MatrixXd lambda = Eigen::MatrixXd::Identity(q, q);
  if (coefs.size() >= 2 && dof > 0 && rss > 0) {
    const double m = static_cast<double>(coefs.size());
    double s2 = rss / dof;
    mean_ginv /= m;
    Eigen::VectorXd centre = Eigen::VectorXd::Zero(q);
    for (const auto& b : coefs) centre += b / m;
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(q, q);
    for (const auto& b : coefs) S += (b - centre) * (b - centre).transpose() / (m - 1.0);
    Eigen::MatrixXd sigma = S - s2 * mean_ginv;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma);
    double floor = 1e-2 * std::max(S.diagonal().maxCoeff(), 1e-12);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
    lambda = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose() / s2;
  }
  return theta_from_relative_cov(lambda);
}

namespace {

struct OptimResult {
  Eigen::VectorXd x;
  double f = 0.0;
  double rel_grad = 0.0;
  int iterations = 0;
  std::vector<double> trace;
};

OptimResult bfgs(const LmmObjective& obj, Eigen::VectorXd x, const LmmOptions& opt) {
  const int n = static_cast<int>(x.size());
  OptimResult r;
  double f = obj.deviance(x);
  Eigen::VectorXd g = obj.gradient(x);
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  r.trace.push_back(f);
  bool first = true;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    double rel_grad = g.norm() / std::max(1.0, std::abs(f));
    if (rel_grad < 1e-13) break;
    Eigen::VectorXd d = -H * g;
    if (g.dot(d) >= 0.0) {
      H.setIdentity();
      d = -g;
    }
    double max_step = d.cwiseAbs().maxCoeff();
    double step = max_step > 5.0 ? 5.0 / max_step : 1.0;
    Eigen::VectorXd x_new, g_new;
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * d;
      try {
        f_new = obj.deviance(x_new);
      } catch (const Error&) {
        f_new = std::numeric_limits<double>::infinity();
      }
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * g.dot(d)) {
        accepted = true;
        break;
      }
      // Near the optimum f differences sink below rounding; accept a step
      // that keeps f flat and shrinks the gradient.
      if (std::isfinite(f_new) && std::abs(f_new - f) <= 1e-13 * std::max(1.0, std::abs(f))) {
        g_new = obj.gradient(x_new);
        if (g_new.norm() < g.norm()) {
          accepted = true;
          break;
        }
        g_new.resize(0);
      }
      step *= 0.5;
    }
    if (!accepted) break;
    if (g_new.size() == 0) g_new = obj.gradient(x_new);
    Eigen::VectorXd s = x_new - x, y = g_new - g;
    double ys = y.dot(s);
    if (ys > 1e-300) {
      if (first) {
        H *= ys / y.squaredNorm();
        first = false;
      }
      double rho = 1.0 / ys;
      Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    double rel_change = std::abs(f - f_new) / std::max(1.0, std::abs(f));
    x = x_new;
    f = f_new;
    g = g_new;
    r.trace.push_back(f);
    if (rel_change < opt.relative_tolerance * 1e-6 && g.norm() / std::max(1.0, std::abs(f)) < 1e-10) break;
  }
  // Newton polish with a finite-difference Hessian of the analytic gradient.
  for (int k = 0; k < 4 && n > 0; ++k) {
    Eigen::MatrixXd Hs(n, n);
    for (int j = 0; j < n; ++j) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
      e[j] = 1e-5 * std::max(1.0, std::abs(x[j]));
      Hs.col(j) = (obj.gradient(x + e) - obj.gradient(x - e)) / (2.0 * e[j]);
    }
    Hs = 0.5 * (Hs + Hs.transpose());
    Eigen::LDLT<Eigen::MatrixXd> ldlt(Hs);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) break;
    Eigen::VectorXd x_new = x - ldlt.solve(g);
    if (!x_new.allFinite()) break;
    double f_new;
    try {
      f_new = obj.deviance(x_new);
    } catch (const Error&) {
      break;
    }
    Eigen::VectorXd g_new = obj.gradient(x_new);
    if (!(g_new.norm() < g.norm()) || f_new > f + 1e-10 * std::max(1.0, std::abs(f))) break;
    x = x_new;
    f = f_new;
    g = g_new;
    r.trace.push_back(f);
    ++it;
  }
  r.x = x;
  r.f = f;
  r.rel_grad = g.norm() / std::max(1.0, std::abs(f));
  r.iterations = it;
  return r;
}

void check_design_rank(const LongitudinalDataset& ds, std::string_view outcome, const TimeModel& model) {
  const int p = model.n_fixed();
  std::size_t n = ds.observation_count(outcome);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), p);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < ds.subject_count(); ++i) {
    const auto& s = ds.series(outcome, i);
    for (double t : s.times) X.row(row++) = model.fixed_row(t).transpose();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    auto names = model.fixed_names();
    std::string which;
    for (Eigen::Index k = qr.rank(); k < p; ++k) {
      if (!which.empty()) which += ", ";
      which += names[qr.colsPermutation().indices()[k]];
    }
    fail(ErrorCode::Validation, "singular fixed-effects design for outcome '" + std::string(outcome) +
                                    "': collinear term(s) " + which);
  }
}

}  // namespace

LmmFit fit_lmm(const LongitudinalDataset& ds, std::string_view outcome, TimeModel model, LmmMethod method,
               const LmmOptions& options) {
  require(ds.has_outcome(outcome), ErrorCode::InvalidArgument, "unknown outcome '" + std::string(outcome) + "'");
  std::size_t subjects_with_data = 0;
  std::vector<double> all_times;
  for (std::size_t i = 0; i < ds.subject_count(); ++i) {
    const auto& s = ds.series(outcome, i);
    if (s.size() > 0) ++subjects_with_data;
    all_times.insert(all_times.end(), s.times.begin(), s.times.end());
  }
  require(subjects_with_data >= 2, ErrorCode::Validation, "LMM needs at least two subjects with data");
  if (model.needs_bases() && !model.spline_basis()) model.fit_bases(all_times);
  const int p = model.n_fixed(), q = model.n_random();
  require(all_times.size() > static_cast<std::size_t>(p + q), ErrorCode::Validation,
          "LMM needs more observations than fixed plus random effects");
  check_design_rank(ds, outcome, model);

  LmmObjective obj(ds, outcome, model, method);
  LmmFit fit;
  fit.outcome = std::string(outcome);
  fit.method = method;

  Eigen::VectorXd theta(0);
  if (q > 0) {
    std::vector<Eigen::VectorXd> starts{obj.initial_theta(), Eigen::VectorXd::Zero(obj.n_params())};
    Eigen::VectorXd perturbed = starts[0];
    for (int k = 0; k < perturbed.size(); ++k) perturbed[k] += (k % 2 ? -0.5 : 0.5);
    starts.push_back(perturbed);
    OptimResult best;
    best.f = std::numeric_limits<double>::infinity();
    int total_iterations = 0;
    for (const auto& start : starts) {
      OptimResult r = bfgs(obj, start, options);
      total_iterations += r.iterations;
      if (r.f < best.f || !std::isfinite(best.f)) best = r;
      if (best.rel_grad < options.stationarity_tolerance) break;
    }
    fit.iterations = total_iterations;
    fit.gradient_norm = best.rel_grad;
    fit.objective_trace = best.trace;
    if (!(best.rel_grad < options.stationarity_tolerance)) {
      std::string where;
      for (int k = 0; k < best.x.size(); ++k) where += (k ? ", " : "") + std::to_string(best.x[k]);
      fail(ErrorCode::Convergence, "LMM did not converge after " + std::to_string(total_iterations) +
                                       " iterations; best deviance " + std::to_string(best.f) +
                                       ", relative gradient norm " + std::to_string(best.rel_grad) +
                                       ", parameters [" + where + "]");
    }
    theta = best.x;
  }

  auto prof = obj.profile(theta);
  fit.beta = prof.beta;
  fit.sigma2 = prof.sigma2;
  fit.loglik = -0.5 * prof.deviance;
  fit.beta_cov = prof.sigma2 * prof.xtwx.llt().solve(Eigen::MatrixXd::Identity(p, p));
  fit.Sigma = prof.sigma2 * prof.relative_cov;
  if (q > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.Sigma);
    if (es.eigenvalues().minCoeff() < options.min_eigenvalue) {
      Eigen::VectorXd ev = es.eigenvalues().cwiseMax(options.min_eigenvalue);
      fit.Sigma = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
      fit.boundary = true;
      fit.warnings.push_back("random-effect covariance on the boundary; smallest eigenvalue clamped to " +
                             std::to_string(options.min_eigenvalue));
    }
  }
  fit.model = std::move(model);
  fit.b = empirical_bayes(fit, ds);
  return fit;
}

Eigen::MatrixXd empirical_bayes(const LmmFit& fit, const LongitudinalDataset& ds) {
  const int q = fit.model.n_random();
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ds.subject_count()), q);
  if (q == 0) return b;
  auto stats = build_stats(ds, fit.outcome, fit.model);
  const Eigen::MatrixXd lambda = fit.Sigma / fit.sigma2;
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(q, q);
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const auto& s = stats[i];
    if (s.n == 0) continue;
    Eigen::VectorXd r = s.zty - s.ztx * fit.beta;
    b.row(static_cast<Eigen::Index>(i)) = (lambda * (I + s.ztz * lambda).partialPivLu().solve(r)).transpose();
  }
  return b;
}

std::vector<Series> ResidualSeries::as_series(ResidualKind kind, ResidualScaling scaling) const {
  std::vector<Series> out(subjects.size());
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto& s = subjects[i];
    out[i].times = s.times;
    if (scaling == ResidualScaling::None) {
      switch (kind) {
        case ResidualKind::Raw: out[i].values = s.raw; break;
        case ResidualKind::Squared: out[i].values = s.squared; break;
        case ResidualKind::Absolute: out[i].values = s.absolute; break;
      }
      continue;
    }
    for (std::size_t j = 0; j < s.raw.size(); ++j)
      out[i].values.push_back(transform_residual(s.raw[j], s.scale[j], kind, scaling));
  }
  return out;
}

ResidualSeries residuals(const LmmFit& fit, const LongitudinalDataset& ds) {
  require(ds.has_outcome(fit.outcome), ErrorCode::InvalidArgument, "dataset lacks outcome '" + fit.outcome + "'");
  require(static_cast<std::size_t>(fit.b.rows()) == ds.subject_count(), ErrorCode::InvalidArgument,
          "fit and dataset disagree on subject count");
  const int p = fit.model.n_fixed(), q = fit.model.n_random();
  const bool have_cov = fit.beta_cov.rows() == p && fit.beta_cov.cols() == p;
  ResidualSeries out;
  out.subjects.resize(ds.subject_count());
  for (std::size_t i = 0; i < ds.subject_count(); ++i) {
    const auto& s = ds.series(fit.outcome, i);
    auto& r = out.subjects[i];
    const auto n = static_cast<Eigen::Index>(s.size());
    Eigen::VectorXd bi = fit.b.row(static_cast<Eigen::Index>(i)).transpose();
    Eigen::MatrixXd X(n, p), Z(n, q);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double t = s.times[static_cast<std::size_t>(j)];
      X.row(j) = fit.model.fixed_row(t).transpose();
      Z.row(j) = fit.model.random_row(t).transpose();
    }
    // sigma^2 V^-1 = (I + Z Lambda Z')^-1 with Lambda = Sigma / sigma^2
    Eigen::MatrixXd W = Eigen::MatrixXd::Identity(n, n);
    if (q > 0) W += Z * (fit.Sigma / fit.sigma2) * Z.transpose();
    const Eigen::MatrixXd Winv = W.llt().solve(Eigen::MatrixXd::Identity(n, n));
    Eigen::VectorXd var = Winv.diagonal();
    if (have_cov) {
      const Eigen::MatrixXd A = Winv * X;
      var -= (A * (fit.beta_cov / fit.sigma2) * A.transpose()).diagonal();
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto k = static_cast<std::size_t>(j);
      double e = s.values[k] - X.row(j).dot(fit.beta) - Z.row(j).dot(bi);
      r.times.push_back(s.times[k]);
      r.raw.push_back(e);
      r.squared.push_back(e * e);
      r.absolute.push_back(std::abs(e));
      // a fully determined observation keeps a tiny floor so the ratio stays finite
      r.scale.push_back(std::sqrt(std::max(var[j], 1e-12)));
    }
  }
  return out;
}

}  // namespace jmvar
