#include "jmvar/mcmc.hpp"

#include "config_keys.hpp"

#include <cstdio>
#include <cstdlib>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <span>
#include <thread>

#include <nlohmann/json.hpp>
#include <unsupported/Eigen/FFT>

#include "jmvar/csv.hpp"
#include "jmvar/error.hpp"
#include "jmvar/lmm.hpp"
#include "jmvar/rng.hpp"
#include "jmvar/stats.hpp"

namespace jmvar {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double normal_lp(double x, double mean, double sd) {
  double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * kLog2Pi;
}

double half_normal_lp(double x, double scale) {
  if (x < 0.0) return kNegInf;
  double z = x / scale;
  return -0.5 * z * z - std::log(scale) + 0.5 * std::log(2.0 / std::numbers::pi);
}

Eigen::VectorXd std_normal_vector(Engine& eng, Eigen::Index n) {
  Eigen::VectorXd z(n);
  for (Eigen::Index k = 0; k < n; ++k) z[k] = std_normal(eng);
  return z;
}

Eigen::MatrixXd safe_cholesky(Eigen::MatrixXd c) {
  c = 0.5 * (c + c.transpose());
  for (int attempt = 0; attempt < 30; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) return llt.matrixL();
    double bump = std::max(1e-12, 1e-10 * c.diagonal().cwiseAbs().maxCoeff()) * std::pow(10.0, attempt / 2.0);
    c.diagonal().array() += bump;
  }
  return Eigen::MatrixXd::Identity(c.rows(), c.cols());
}

Eigen::MatrixXd inverse_spd(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd L = safe_cholesky(a);
  Eigen::MatrixXd Linv = L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
  return Linv.transpose() * Linv;
}

// Random-walk block with Robbins-Monro scale and optional covariance
// learning during warmup.
struct Adapter {
  int dim = 0;
  double target = 0.234;
  bool adapt_cov = true;
  double log_scale = 0.0;
  Eigen::MatrixXd cov0, chol;
  long n_seen = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd m2;
  long t = 0;
  BlockStats stats;

  void init(const std::string& name, const Eigen::MatrixXd& cov, double tgt, bool learn_cov) {
    stats = BlockStats{};
    stats.name = name;
    dim = static_cast<int>(cov.rows());
    target = tgt;
    adapt_cov = learn_cov;
    cov0 = cov;
    chol = safe_cholesky(cov);
    log_scale = std::log(2.38 / std::sqrt(static_cast<double>(dim)));
    mean = Eigen::VectorXd::Zero(dim);
    m2 = Eigen::MatrixXd::Zero(dim, dim);
  }

  Eigen::VectorXd propose(Engine& eng) const { return std::exp(log_scale) * (chol * std_normal_vector(eng, dim)); }

  void record(bool accepted, bool warmup) {
    if (warmup) {
      ++stats.warmup_proposed;
      stats.warmup_accepted += accepted;
      ++t;
      double gain = std::min(0.5, 2.0 * std::pow(static_cast<double>(t), -0.6));
      log_scale += gain * ((accepted ? 1.0 : 0.0) - target);
      log_scale = std::clamp(log_scale, -20.0, 5.0);
    } else {
      ++stats.proposed;
      stats.accepted += accepted;
    }
  }

  void observe(const Eigen::VectorXd& x, bool warmup, int iter, int n_warmup) {
    if (!warmup || !adapt_cov || iter < n_warmup / 2) return;
    ++n_seen;
    Eigen::VectorXd d = x - mean;
    mean += d / static_cast<double>(n_seen);
    m2 += d * (x - mean).transpose();
    if (n_seen >= 2 * dim + 20 && n_seen % 50 == 0) {
      Eigen::MatrixXd emp = m2 / static_cast<double>(n_seen - 1);
      chol = safe_cholesky(0.95 * emp + 0.05 * cov0);
    }
  }
};

// Unconstrained coordinates of a covariance matrix: log SDs then atanh of
// the canonical partial correlations (row-wise below the diagonal).
struct CovTransform {
  int q = 0;
  int dim() const { return q + q * (q - 1) / 2; }

  Eigen::VectorXd to_unconstrained(const Eigen::MatrixXd& Sigma) const {
    Eigen::VectorXd u(dim());
    Eigen::VectorXd sd = Sigma.diagonal().cwiseSqrt();
    for (int r = 0; r < q; ++r) u[r] = std::log(sd[r]);
    if (q < 2) return u;
    Eigen::MatrixXd R = sd.cwiseInverse().asDiagonal() * Sigma * sd.cwiseInverse().asDiagonal();
    Eigen::MatrixXd L = safe_cholesky(R);
    int idx = q;
    for (int i = 1; i < q; ++i) {
      double sum = 0.0;
      for (int j = 0; j < i; ++j) {
        double z = L(i, j) / std::sqrt(std::max(1e-300, 1.0 - sum));
        z = std::clamp(z, -1.0 + 1e-12, 1.0 - 1e-12);
        u[idx++] = std::atanh(z);
        sum += L(i, j) * L(i, j);
      }
    }
    return u;
  }

  // Returns Sigma; `log_jac_lkj` gets the LKJ(eta) density of the Cholesky
  // factor plus the Jacobian of the CPC map, both on the unconstrained scale.
  Eigen::MatrixXd from_unconstrained(const Eigen::VectorXd& u, double eta, double* log_jac_lkj) const {
    Eigen::VectorXd sd(q);
    for (int r = 0; r < q; ++r) sd[r] = std::exp(u[r]);
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(q, q);
    L(0, 0) = 1.0;
    double lj = 0.0;
    int idx = q;
    for (int i = 1; i < q; ++i) {
      double sum = 0.0;
      for (int j = 0; j < i; ++j) {
        double z = std::tanh(u[idx++]);
        lj += std::log1p(-z * z) + 0.5 * std::log(std::max(1e-300, 1.0 - sum));
        L(i, j) = z * std::sqrt(std::max(0.0, 1.0 - sum));
        sum += L(i, j) * L(i, j);
      }
      L(i, i) = std::sqrt(std::max(1e-300, 1.0 - sum));
      lj += (q - i + 2.0 * eta - 3.0) * std::log(L(i, i));
    }
    if (log_jac_lkj) *log_jac_lkj = lj;
    Eigen::MatrixXd R = L * L.transpose();
    return sd.asDiagonal() * R * sd.asDiagonal();
  }
};

class ChainSampler {
 public:
  ChainSampler(const JointModel& model, const SamplerConfig& cfg, const JointParams& init, Engine eng);

  void iterate(bool warmup, int iter);
  Eigen::VectorXd flat() const;
  JointParams params() const;
  void accumulate_random_effects(std::vector<Eigen::MatrixXd>& sums) const;
  std::vector<BlockStats> block_stats() const;
  double cached_log_posterior() const;

 private:
  struct Sub {
    int p = 0, q = 0;
    std::vector<int> rcols, fcols;
    bool tau_fixed = false;
    Eigen::VectorXd beta;
    Eigen::MatrixXd theta;  // subjects x q, centered random coefficients
    Eigen::MatrixXd Sigma, Sigma_inv;
    double Sigma_logdet = 0.0;
    double tau2 = 1.0;
    Eigen::VectorXd ssr;  // per subject
    double nobs = 0.0;
    std::vector<Eigen::MatrixXd> ztz;
    Eigen::VectorXd m_nodes, m_event;
    Eigen::MatrixXd Z_nodes;  // random columns of the node design
    double center = 0.0;
    bool associated = false;
    Eigen::VectorXd prior_mean, prior_sd;
    double re_log_scale = 0.0;
    long re_t = 0;
    BlockStats re_stats;
    Adapter tau_ad, sigma_ad, sigma_nc_ad, shift_ad, fixed_ad, tradeoff_ad;
    BlockStats gibbs_stats;
  };

  Eigen::VectorXd coef(const Sub& s, std::size_t i) const {
    Eigen::VectorXd c = s.beta;
    for (int r = 0; r < s.q; ++r) c[s.rcols[r]] = s.theta(static_cast<Eigen::Index>(i), r);
    return c;
  }
  double subject_ssr(int k, std::size_t i, const Eigen::VectorXd& c) const {
    const auto& d = model_.designs()[i];
    if (d.y[k].size() == 0) return 0.0;
    return (d.y[k] - d.X[k] * c).squaredNorm();
  }
  void set_sigma(Sub& s, const Eigen::MatrixXd& Sigma);
  double re_quad(const Sub& s) const;
  double shift_constant() const;
  /// Baseline prior on the centered coefficients (s_int_).
  double spline_prior(const Eigen::VectorXd& centered, double smooth) const;
  double surv_total() const { return status_.dot(eta_event_) - wh_.sum(); }
  void refresh_survival();
  void refresh_subject_m(int k);

  void update_random_effects(int k, bool warmup);
  void update_population_mean(int k);
  void update_shift(int k, bool warmup, int iter);
  void update_fixed_only(int k, bool warmup, int iter);
  void update_tau(int k, bool warmup, int iter);
  void update_sigma(int k, bool warmup, int iter);
  void update_sigma_noncentered(int k, bool warmup, int iter);
  void update_alpha_tradeoff(int k, bool warmup, int iter);
  double sigma_prior(int k, const Eigen::VectorXd& u, Eigen::MatrixXd* Sigma) const;
  void update_spline(bool warmup, int iter);
  void update_smooth(bool warmup, int iter);
  void update_gamma(bool warmup, int iter);
  void update_alpha(bool warmup, int iter);
  // Accept/reject a proposal that changes the node linear predictor by `d_eta`
  // and the event-time predictor by `d_event`; returns the survival change.
  double survival_delta(const Eigen::VectorXd& d_eta, const Eigen::VectorXd& d_event, Eigen::VectorXd& wh_new) const;

  const JointModel& model_;
  const SamplerConfig& cfg_;
  Engine eng_;
  std::size_t n_ = 0;
  int K_ = 0, P_ = 0, C_ = 0;
  bool surv_ = false;
  std::vector<Sub> subs_;
  CovTransform cov_tf_[8];

  // survival state, internal (centered) coordinates
  Eigen::VectorXd s_int_, gamma_, alpha_;
  double smooth_ = 1.0;
  Eigen::VectorXd wc_;       // (w_i - c_w)' gamma per subject
  Eigen::VectorXd eta_, wh_; // per node
  Eigen::VectorXd eta_event_, status_;
  Eigen::VectorXd cov_center_;
  Adapter spline_ad_, smooth_ad_, gamma_ad_, alpha_ad_;
  std::vector<int> assoc_;
  int since_refresh_ = 0;
};

ChainSampler::ChainSampler(const JointModel& model, const SamplerConfig& cfg, const JointParams& init, Engine eng)
    : model_(model), cfg_(cfg), eng_(std::move(eng)) {
  n_ = model.n_subjects();
  K_ = model.n_submodels();
  surv_ = model.has_survival();
  P_ = model.n_spline();
  C_ = model.n_covariates();
  const auto& nd = model.nodes();
  const auto& spec = model.spec();
  const auto N = static_cast<Eigen::Index>(n_);

  subs_.resize(K_);
  for (int k = 0; k < K_; ++k) {
    auto& s = subs_[k];
    const auto& tm = model.time_model(k);
    s.p = tm.n_fixed();
    s.q = tm.n_random();
    s.rcols = tm.random_columns();
    for (int j = 0; j < s.p; ++j)
      if (std::find(s.rcols.begin(), s.rcols.end(), j) == s.rcols.end()) s.fcols.push_back(j);
    s.tau_fixed = spec.submodels[k].fixed_residual_sd.has_value();
    s.associated = surv_ && spec.submodels[k].associated;
    if (s.associated) assoc_.push_back(k);
    s.beta = init.sub[k].beta;
    s.tau2 = init.sub[k].tau2;
    s.theta.resize(N, s.q);
    for (std::size_t i = 0; i < n_; ++i)
      for (int r = 0; r < s.q; ++r)
        s.theta(static_cast<Eigen::Index>(i), r) = s.beta[s.rcols[r]] + init.sub[k].b(static_cast<Eigen::Index>(i), r);
    if (s.q > 0) set_sigma(s, init.sub[k].Sigma);
    cov_tf_[std::min(k, 7)].q = s.q;
    s.ssr.resize(N);
    s.ztz.resize(n_);
    Eigen::MatrixXd xtx_f = Eigen::MatrixXd::Zero(s.fcols.size(), s.fcols.size());
    Eigen::MatrixXd ztz_all = Eigen::MatrixXd::Zero(s.q, s.q);
    for (std::size_t i = 0; i < n_; ++i) {
      const auto& X = model.designs()[i].X[k];
      s.nobs += static_cast<double>(X.rows());
      s.ssr[static_cast<Eigen::Index>(i)] = subject_ssr(k, i, coef(s, i));
      Eigen::MatrixXd Z(X.rows(), s.q), F(X.rows(), s.fcols.size());
      for (int r = 0; r < s.q; ++r) Z.col(r) = X.col(s.rcols[r]);
      for (std::size_t r = 0; r < s.fcols.size(); ++r) F.col(static_cast<Eigen::Index>(r)) = X.col(s.fcols[r]);
      s.ztz[i] = Z.transpose() * Z;
      ztz_all += s.ztz[i];
      xtx_f += F.transpose() * F;
    }
    s.prior_mean.resize(s.p);
    s.prior_sd.resize(s.p);
    for (int j = 0; j < s.p; ++j) {
      s.prior_mean[j] = model.beta_prior_mean(k, j);
      s.prior_sd[j] = model.beta_prior_sd(k, j);
    }
    s.center = model.scales().outcome_mean[k];
    s.re_log_scale = std::log(2.38 / std::sqrt(std::max(1, s.q)));
    s.re_stats.name = "random_effects." + spec.submodels[k].outcome;
    s.gibbs_stats.name = "population_mean." + spec.submodels[k].outcome;
    s.gibbs_stats.gibbs = true;
    const std::string& o = spec.submodels[k].outcome;
    if (!s.tau_fixed)
      s.tau_ad.init("resid_sd." + o, Eigen::MatrixXd::Constant(1, 1, 1.0 / (2.0 * std::max(1.0, s.nobs))),
                    cfg.target_scalar, false);
    if (s.q > 0) {
      CovTransform tf{s.q};
      Eigen::MatrixXd c0 = Eigen::MatrixXd::Identity(tf.dim(), tf.dim()) / std::max(1.0, double(n_));
      c0.diagonal().head(s.q) *= 0.5;
      s.sigma_ad.init("ranef_cov." + o, c0, tf.dim() == 1 ? cfg.target_scalar : cfg.target_multivariate, true);
      s.sigma_nc_ad.init("ranef_cov_nc." + o, c0, tf.dim() == 1 ? cfg.target_scalar : cfg.target_multivariate, true);
      if (s.associated)
        s.tradeoff_ad.init("alpha_tradeoff." + o, Eigen::MatrixXd::Constant(1, 1, 0.01), cfg.target_scalar, false);
      s.shift_ad.init("shift." + o, inverse_spd(ztz_all / s.tau2 + Eigen::MatrixXd::Identity(s.q, s.q) * 1e-8),
                      s.q == 1 ? cfg.target_scalar : cfg.target_multivariate, true);
    }
    if (!s.fcols.empty()) {
      Eigen::MatrixXd prec = xtx_f / s.tau2;
      for (std::size_t r = 0; r < s.fcols.size(); ++r) {
        double sd = s.prior_sd[s.fcols[r]];
        prec(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(r)) += 1.0 / (sd * sd);
      }
      s.fixed_ad.init("fixed." + o, inverse_spd(prec), s.fcols.size() == 1 ? cfg.target_scalar : cfg.target_multivariate,
                      true);
    }
  }

  if (!surv_) return;
  alpha_ = Eigen::VectorXd::Zero(K_);
  for (int k : assoc_) alpha_[k] = init.alpha[k];
  gamma_ = init.gamma;
  smooth_ = init.smooth_sd;
  cov_center_ = model.scales().covariate_mean;
  s_int_ = init.spline + Eigen::VectorXd::Constant(P_, shift_constant());
  status_ = nd.status;
  for (int k = 0; k < K_; ++k) {
    auto& s = subs_[k];
    s.m_nodes.resize(nd.weight.size());
    s.m_event.resize(N);
    s.Z_nodes.resize(nd.weight.size(), s.q);
    for (int r = 0; r < s.q; ++r) s.Z_nodes.col(r) = nd.X[k].col(s.rcols[r]);
    refresh_subject_m(k);
  }
  refresh_survival();

  // Proposal shapes from the exact survival Hessian in internal coordinates.
  const Eigen::Index D = P_ + C_ + static_cast<Eigen::Index>(assoc_.size());
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(D, D);
  Eigen::VectorXd x(D);
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t r = nd.offset[i]; r < nd.offset[i + 1]; ++r) {
      auto rr = static_cast<Eigen::Index>(r);
      x.head(P_) = nd.B.row(rr).transpose();
      for (int c = 0; c < C_; ++c) x[P_ + c] = nd.W(static_cast<Eigen::Index>(i), c) - cov_center_[c];
      for (std::size_t a = 0; a < assoc_.size(); ++a) x[P_ + C_ + a] = subs_[assoc_[a]].m_nodes[rr] - subs_[assoc_[a]].center;
      H.noalias() += wh_[rr] * x * x.transpose();
    }
  }
  const double s2 = smooth_ * smooth_;
  H.topLeftCorner(P_, P_) += model.penalty() / s2 +
                             Eigen::MatrixXd::Identity(P_, P_) / model.spec().priors.spline_ridge_var;
  for (int c = 0; c < C_; ++c) H(P_ + c, P_ + c) += 1.0 / std::pow(model.gamma_prior_sd(c), 2);
  for (std::size_t a = 0; a < assoc_.size(); ++a)
    H(P_ + C_ + a, P_ + C_ + a) += 1.0 / std::pow(model.alpha_prior_sd(assoc_[a]), 2);
  spline_ad_.init("spline", inverse_spd(H.topLeftCorner(P_, P_)), cfg.target_multivariate, true);
  smooth_ad_.init("smooth_sd", Eigen::MatrixXd::Constant(1, 1, 0.25), cfg.target_scalar, false);
  if (C_ > 0)
    gamma_ad_.init("gamma", inverse_spd(H.block(P_, P_, C_, C_)), C_ == 1 ? cfg.target_scalar : cfg.target_multivariate,
                   true);
  if (!assoc_.empty()) {
    auto A = static_cast<Eigen::Index>(assoc_.size());
    alpha_ad_.init("alpha", inverse_spd(H.block(P_ + C_, P_ + C_, A, A)),
                   A == 1 ? cfg.target_scalar : cfg.target_multivariate, true);
  }
}

void ChainSampler::set_sigma(Sub& s, const Eigen::MatrixXd& Sigma) {
  s.Sigma = 0.5 * (Sigma + Sigma.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(s.Sigma);
  if (llt.info() != Eigen::Success) fail(ErrorCode::Sampler, "random-effect covariance lost positive definiteness");
  s.Sigma_inv = llt.solve(Eigen::MatrixXd::Identity(s.q, s.q));
  s.Sigma_logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

double ChainSampler::re_quad(const Sub& s) const {
  double quad = 0.0;
  Eigen::VectorXd d(s.q);
  for (std::size_t i = 0; i < n_; ++i) {
    for (int r = 0; r < s.q; ++r) d[r] = s.theta(static_cast<Eigen::Index>(i), r) - s.beta[s.rcols[r]];
    quad += d.dot(s.Sigma_inv * d);
  }
  return quad;
}

double ChainSampler::shift_constant() const {
  double c = 0.0;
  for (int k : assoc_) c += alpha_[k] * subs_[k].center;
  if (C_ > 0) c += cov_center_.dot(gamma_);
  return c;
}

double ChainSampler::spline_prior(const Eigen::VectorXd& centered, double smooth) const {
  if (!(smooth > 0.0)) return kNegInf;
  const double ridge = 1.0 / model_.spec().priors.spline_ridge_var;
  const double s2 = smooth * smooth;
  double logdet = (model_.penalty_eigenvalues().array() / s2 + ridge).log().sum();
  double quad = centered.dot(model_.penalty() * centered) / s2 + ridge * centered.squaredNorm();
  return 0.5 * logdet - 0.5 * quad - 0.5 * static_cast<double>(centered.size()) * kLog2Pi;
}

void ChainSampler::refresh_subject_m(int k) {
  auto& s = subs_[k];
  const auto& nd = model_.nodes();
  for (std::size_t i = 0; i < n_; ++i) {
    Eigen::VectorXd c = coef(s, i);
    auto a = static_cast<Eigen::Index>(nd.offset[i]);
    auto len = static_cast<Eigen::Index>(nd.offset[i + 1] - nd.offset[i]);
    s.m_nodes.segment(a, len).noalias() = nd.X[k].middleRows(a, len) * c;
    s.m_event[static_cast<Eigen::Index>(i)] = nd.X_event[k].row(static_cast<Eigen::Index>(i)).dot(c);
  }
}

void ChainSampler::refresh_survival() {
  const auto& nd = model_.nodes();
  wc_ = C_ > 0 ? Eigen::VectorXd((nd.W.rowwise() - cov_center_.transpose()) * gamma_)
               : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_));
  eta_.noalias() = nd.B * s_int_;
  eta_event_.noalias() = nd.B_event * s_int_;
  eta_event_ += wc_;
  for (std::size_t i = 0; i < n_; ++i) {
    auto a = static_cast<Eigen::Index>(nd.offset[i]);
    auto len = static_cast<Eigen::Index>(nd.offset[i + 1] - nd.offset[i]);
    eta_.segment(a, len).array() += wc_[static_cast<Eigen::Index>(i)];
  }
  for (int k : assoc_) {
    eta_.array() += alpha_[k] * (subs_[k].m_nodes.array() - subs_[k].center);
    eta_event_.array() += alpha_[k] * (subs_[k].m_event.array() - subs_[k].center);
  }
  wh_ = nd.weight.array() * eta_.array().exp();
  since_refresh_ = 0;
}

double ChainSampler::survival_delta(const Eigen::VectorXd& d_eta, const Eigen::VectorXd& d_event,
                                    Eigen::VectorXd& wh_new) const {
  const auto& nd = model_.nodes();
  wh_new = nd.weight.array() * (eta_ + d_eta).array().exp();
  double d = status_.dot(d_event) - (wh_new.sum() - wh_.sum());
  return std::isfinite(d) ? d : kNegInf;
}

void ChainSampler::update_random_effects(int k, bool warmup) {
  auto& s = subs_[k];
  if (s.q == 0) return;
  const auto& nd = model_.nodes();
  const double alpha = s.associated ? alpha_[k] : 0.0;
  const double scale = std::exp(s.re_log_scale);
  Eigen::VectorXd th_old(s.q), th_new(s.q), d_old(s.q), d_new(s.q), z(s.q), mu(s.q);
  for (int r = 0; r < s.q; ++r) mu[r] = s.beta[s.rcols[r]];
  long accepted = 0;
  for (std::size_t i = 0; i < n_; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    Eigen::MatrixXd A = s.ztz[i] / s.tau2 + s.Sigma_inv;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    for (int r = 0; r < s.q; ++r) z[r] = std_normal(eng_);
    th_old = s.theta.row(ii).transpose();
    th_new = th_old + scale * llt.matrixU().solve(z);
    d_old = th_old - mu;
    d_new = th_new - mu;
    Eigen::VectorXd c = s.beta;
    for (int r = 0; r < s.q; ++r) c[s.rcols[r]] = th_new[r];
    double ssr_new = subject_ssr(k, i, c);
    double delta = -0.5 * (ssr_new - s.ssr[ii]) / s.tau2 - 0.5 * (d_new.dot(s.Sigma_inv * d_new) - d_old.dot(s.Sigma_inv * d_old));
    Eigen::VectorXd m_new;
    double m_event_new = 0.0;
    Eigen::Index a = 0, len = 0;
    Eigen::VectorXd eta_new, wh_new;
    if (surv_) {
      a = static_cast<Eigen::Index>(nd.offset[i]);
      len = static_cast<Eigen::Index>(nd.offset[i + 1] - nd.offset[i]);
      m_new.noalias() = nd.X[k].middleRows(a, len) * c;
      m_event_new = nd.X_event[k].row(ii).dot(c);
      if (alpha != 0.0) {
        eta_new = eta_.segment(a, len) + alpha * (m_new - s.m_nodes.segment(a, len));
        wh_new = nd.weight.segment(a, len).array() * eta_new.array().exp();
        delta += status_[ii] * alpha * (m_event_new - s.m_event[ii]) - (wh_new.sum() - wh_.segment(a, len).sum());
      }
    }
    bool accept = std::isfinite(delta) && std::log(uniform_open(eng_)) < delta;
    if (accept) {
      ++accepted;
      s.theta.row(ii) = th_new.transpose();
      s.ssr[ii] = ssr_new;
      if (surv_) {
        if (alpha != 0.0) {
          eta_.segment(a, len) = eta_new;
          wh_.segment(a, len) = wh_new;
          eta_event_[ii] += alpha * (m_event_new - s.m_event[ii]);
        }
        s.m_nodes.segment(a, len) = m_new;
        s.m_event[ii] = m_event_new;
      }
    }
  }
  const double rate = static_cast<double>(accepted) / static_cast<double>(n_);
  const double target = s.q == 1 ? cfg_.target_scalar : cfg_.target_multivariate;
  if (warmup) {
    s.re_stats.warmup_proposed += static_cast<long>(n_);
    s.re_stats.warmup_accepted += accepted;
    ++s.re_t;
    double gain = std::min(0.5, 2.0 * std::pow(static_cast<double>(s.re_t), -0.6));
    s.re_log_scale = std::clamp(s.re_log_scale + gain * (rate - target), -10.0, 3.0);
  } else {
    s.re_stats.proposed += static_cast<long>(n_);
    s.re_stats.accepted += accepted;
  }
}

void ChainSampler::update_population_mean(int k) {
  auto& s = subs_[k];
  if (s.q == 0) return;
  // beta_R | theta, Sigma is Gaussian: independent normal prior, n draws N(beta_R, Sigma).
  Eigen::MatrixXd prec = static_cast<double>(n_) * s.Sigma_inv;
  Eigen::VectorXd rhs = s.Sigma_inv * s.theta.colwise().sum().transpose();
  for (int r = 0; r < s.q; ++r) {
    double sd = s.prior_sd[s.rcols[r]];
    prec(r, r) += 1.0 / (sd * sd);
    rhs[r] += s.prior_mean[s.rcols[r]] / (sd * sd);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  Eigen::VectorXd mean = llt.solve(rhs);
  Eigen::VectorXd z = std_normal_vector(eng_, s.q);
  Eigen::VectorXd draw = mean + llt.matrixU().solve(z);
  for (int r = 0; r < s.q; ++r) s.beta[s.rcols[r]] = draw[r];
  ++s.gibbs_stats.proposed;
  ++s.gibbs_stats.accepted;
}

void ChainSampler::update_shift(int k, bool warmup, int iter) {
  auto& s = subs_[k];
  if (s.q == 0) return;
  Eigen::VectorXd delta = s.shift_ad.propose(eng_);
  double lp_old = 0.0, lp_new = 0.0;
  for (int r = 0; r < s.q; ++r) {
    int j = s.rcols[r];
    lp_old += normal_lp(s.beta[j], s.prior_mean[j], s.prior_sd[j]);
    lp_new += normal_lp(s.beta[j] + delta[r], s.prior_mean[j], s.prior_sd[j]);
  }
  Eigen::VectorXd ssr_new(static_cast<Eigen::Index>(n_));
  for (std::size_t i = 0; i < n_; ++i) {
    Eigen::VectorXd c = coef(s, i);
    for (int r = 0; r < s.q; ++r) c[s.rcols[r]] += delta[r];
    ssr_new[static_cast<Eigen::Index>(i)] = subject_ssr(k, i, c);
  }
  double d = lp_new - lp_old - 0.5 * (ssr_new.sum() - s.ssr.sum()) / s.tau2;
  Eigen::VectorXd dm_nodes, dm_event, wh_new;
  if (surv_) {
    const auto& nd = model_.nodes();
    dm_nodes = s.Z_nodes * delta;
    Eigen::MatrixXd Ze(static_cast<Eigen::Index>(n_), s.q);
    for (int r = 0; r < s.q; ++r) Ze.col(r) = nd.X_event[k].col(s.rcols[r]);
    dm_event = Ze * delta;
    if (s.associated && alpha_[k] != 0.0) d += survival_delta(alpha_[k] * dm_nodes, alpha_[k] * dm_event, wh_new);
  }
  bool accept = std::isfinite(d) && std::log(uniform_open(eng_)) < d;
  if (accept) {
    for (int r = 0; r < s.q; ++r) s.beta[s.rcols[r]] += delta[r];
    s.theta.rowwise() += delta.transpose();
    s.ssr = ssr_new;
    if (surv_) {
      s.m_nodes += dm_nodes;
      s.m_event += dm_event;
      if (s.associated && alpha_[k] != 0.0) {
        eta_ += alpha_[k] * dm_nodes;
        eta_event_ += alpha_[k] * dm_event;
        wh_ = wh_new;
      }
    }
  }
  s.shift_ad.record(accept, warmup);
  Eigen::VectorXd state(s.q);
  for (int r = 0; r < s.q; ++r) state[r] = s.beta[s.rcols[r]];
  s.shift_ad.observe(state, warmup, iter, cfg_.n_warmup);
}

void ChainSampler::update_fixed_only(int k, bool warmup, int iter) {
  auto& s = subs_[k];
  if (s.fcols.empty()) return;
  Eigen::VectorXd delta = s.fixed_ad.propose(eng_);
  Eigen::VectorXd beta_new = s.beta;
  for (std::size_t r = 0; r < s.fcols.size(); ++r) beta_new[s.fcols[r]] += delta[static_cast<Eigen::Index>(r)];
  double d = 0.0;
  for (int j : s.fcols) d += normal_lp(beta_new[j], s.prior_mean[j], s.prior_sd[j]) - normal_lp(s.beta[j], s.prior_mean[j], s.prior_sd[j]);
  Eigen::VectorXd ssr_new(static_cast<Eigen::Index>(n_));
  for (std::size_t i = 0; i < n_; ++i) {
    Eigen::VectorXd c = coef(s, i);
    for (int j : s.fcols) c[j] = beta_new[j];
    ssr_new[static_cast<Eigen::Index>(i)] = subject_ssr(k, i, c);
  }
  d += -0.5 * (ssr_new.sum() - s.ssr.sum()) / s.tau2;
  Eigen::VectorXd dm_nodes, dm_event, wh_new;
  if (surv_) {
    const auto& nd = model_.nodes();
    Eigen::VectorXd full = Eigen::VectorXd::Zero(s.p);
    for (int j : s.fcols) full[j] = beta_new[j] - s.beta[j];
    dm_nodes = nd.X[k] * full;
    dm_event = nd.X_event[k] * full;
    if (s.associated && alpha_[k] != 0.0) d += survival_delta(alpha_[k] * dm_nodes, alpha_[k] * dm_event, wh_new);
  }
  bool accept = std::isfinite(d) && std::log(uniform_open(eng_)) < d;
  if (accept) {
    s.beta = beta_new;
    s.ssr = ssr_new;
    if (surv_) {
      s.m_nodes += dm_nodes;
      s.m_event += dm_event;
      if (s.associated && alpha_[k] != 0.0) {
        eta_ += alpha_[k] * dm_nodes;
        eta_event_ += alpha_[k] * dm_event;
        wh_ = wh_new;
      }
    }
  }
  s.fixed_ad.record(accept, warmup);
  Eigen::VectorXd state(static_cast<Eigen::Index>(s.fcols.size()));
  for (std::size_t r = 0; r < s.fcols.size(); ++r) state[static_cast<Eigen::Index>(r)] = s.beta[s.fcols[r]];
  s.fixed_ad.observe(state, warmup, iter, cfg_.n_warmup);
}

void ChainSampler::update_tau(int k, bool warmup, int iter) {
  auto& s = subs_[k];
  if (s.tau_fixed) return;
  const double ssr = s.ssr.sum();
  const double scale = model_.residual_sd_prior_scale(k);
  auto target = [&](double log_tau) {
    double tau = std::exp(log_tau);
    return -0.5 * ssr / (tau * tau) - s.nobs * log_tau + half_normal_lp(tau, scale) + log_tau;
  };
  double cur = 0.5 * std::log(s.tau2);
  double prop = cur + s.tau_ad.propose(eng_)[0];
  double d = target(prop) - target(cur);
  bool accept = std::isfinite(d) && std::log(uniform_open(eng_)) < d;
  if (accept) s.tau2 = std::exp(2.0 * prop);
  s.tau_ad.record(accept, warmup);
  (void)iter;
}

double ChainSampler::sigma_prior(int k, const Eigen::VectorXd& u, Eigen::MatrixXd* Sigma) const {
  const auto& s = subs_[k];
  CovTransform tf{s.q};
  double lj = 0.0;
  Eigen::MatrixXd Sig = tf.from_unconstrained(u, model_.spec().priors.lkj_eta, &lj);
  double lp = lj;
  for (int r = 0; r < s.q; ++r) lp += half_normal_lp(std::exp(u[r]), model_.random_sd_prior_scale(k, r)) + u[r];
  if (Sigma) *Sigma = Sig;
  return std::isfinite(lp) ? lp : kNegInf;
}

void ChainSampler::update_sigma(int k, bool warmup, int iter) {
  auto& s = subs_[k];
  if (s.q == 0) return;
  CovTransform tf{s.q};
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(s.q, s.q);
  Eigen::VectorXd d(s.q);
  for (std::size_t i = 0; i < n_; ++i) {
    for (int r = 0; r < s.q; ++r) d[r] = s.theta(static_cast<Eigen::Index>(i), r) - s.beta[s.rcols[r]];
    S.noalias() += d * d.transpose();
  }
  const double n = static_cast<double>(n_);
  auto target = [&](const Eigen::VectorXd& u, Eigen::MatrixXd* out) {
    Eigen::MatrixXd Sig;
    double lp = sigma_prior(k, u, &Sig);
    Eigen::LLT<Eigen::MatrixXd> llt(Sig);
    if (!std::isfinite(lp) || llt.info() != Eigen::Success) return kNegInf;
    double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    lp += -0.5 * n * logdet - 0.5 * llt.solve(S).trace();
    if (out) *out = Sig;
    return std::isfinite(lp) ? lp : kNegInf;
  };
  Eigen::VectorXd u = tf.to_unconstrained(s.Sigma);
  Eigen::VectorXd u_new = u + s.sigma_ad.propose(eng_);
  Eigen::MatrixXd Sig_new;
  double dl = target(u_new, &Sig_new) - target(u, nullptr);
  bool accept = std::isfinite(dl) && std::log(uniform_open(eng_)) < dl;
  if (accept) set_sigma(s, Sig_new);
  s.sigma_ad.record(accept, warmup);
  s.sigma_ad.observe(accept ? u_new : u, warmup, iter, cfg_.n_warmup);
}

// Interweaving move: the whitened random effects L^-1 b_i stay fixed while
// Sigma changes, so every b_i is rescaled. Mixes well where the centered
// update is slow, i.e. when each subject's data say little about b_i.
void ChainSampler::update_sigma_noncentered(int k, bool warmup, int iter) {
  auto& s = subs_[k];
  if (s.q == 0) return;
  CovTransform tf{s.q};
  Eigen::VectorXd u = tf.to_unconstrained(s.Sigma);
  Eigen::VectorXd u_new = u + s.sigma_nc_ad.propose(eng_);
  Eigen::MatrixXd Sig_new;
  double d = sigma_prior(k, u_new, &Sig_new) - sigma_prior(k, u, nullptr);
  Eigen::LLT<Eigen::MatrixXd> llt_new(Sig_new), llt_old(s.Sigma);
  bool ok = std::isfinite(d) && llt_new.info() == Eigen::Success && llt_old.info() == Eigen::Success;
  Eigen::MatrixXd D;
  Eigen::VectorXd ssr_new, dm_nodes, dm_event, wh_new;
  if (ok) {
    Eigen::MatrixXd Lold_inv = llt_old.matrixL().solve(Eigen::MatrixXd::Identity(s.q, s.q));
    Eigen::MatrixXd A = Eigen::MatrixXd(llt_new.matrixL()) * Lold_inv - Eigen::MatrixXd::Identity(s.q, s.q);
    Eigen::MatrixXd B = s.theta;
    for (int r = 0; r < s.q; ++r) B.col(r).array() -= s.beta[s.rcols[r]];
    D = B * A.transpose();  // change of each theta_i
    ssr_new.resize(static_cast<Eigen::Index>(n_));
    for (std::size_t i = 0; i < n_; ++i) {
      Eigen::VectorXd c = coef(s, i);
      for (int r = 0; r < s.q; ++r) c[s.rcols[r]] += D(static_cast<Eigen::Index>(i), r);
      ssr_new[static_cast<Eigen::Index>(i)] = subject_ssr(k, i, c);
    }
    d += -0.5 * (ssr_new.sum() - s.ssr.sum()) / s.tau2;
    if (surv_) {
      const auto& nd = model_.nodes();
      dm_nodes.resize(s.m_nodes.size());
      dm_event.resize(s.m_event.size());
      for (std::size_t i = 0; i < n_; ++i) {
        auto a = static_cast<Eigen::Index>(nd.offset[i]);
        auto len = static_cast<Eigen::Index>(nd.offset[i + 1] - nd.offset[i]);
        auto ii = static_cast<Eigen::Index>(i);
        dm_nodes.segment(a, len).noalias() = s.Z_nodes.middleRows(a, len) * D.row(ii).transpose();
        double e = 0.0;
        for (int r = 0; r < s.q; ++r) e += nd.X_event[k](ii, s.rcols[r]) * D(ii, r);
        dm_event[ii] = e;
      }
      if (s.associated && alpha_[k] != 0.0) d += survival_delta(alpha_[k] * dm_nodes, alpha_[k] * dm_event, wh_new);
    }
  }
  bool accept = ok && std::isfinite(d) && std::log(uniform_open(eng_)) < d;
  if (accept) {
    s.theta += D;
    s.ssr = ssr_new;
    if (surv_) {
      s.m_nodes += dm_nodes;
      s.m_event += dm_event;
      if (s.associated && alpha_[k] != 0.0) {
        eta_ += alpha_[k] * dm_nodes;
        eta_event_ += alpha_[k] * dm_event;
        wh_ = wh_new;
      }
    }
    set_sigma(s, Sig_new);
  }
  s.sigma_nc_ad.record(accept, warmup);
  s.sigma_nc_ad.observe(accept ? u_new : u, warmup, iter, cfg_.n_warmup);
}

// Scales the random effects by e^d (whitened effects fixed) and the
// association by e^-d, so alpha * b_i is unchanged. Moves along the ridge
// where small random-effect SDs trade off against a large association.
void ChainSampler::update_alpha_tradeoff(int k, bool warmup, int iter) {
  auto& s = subs_[k];
  if (s.q == 0 || !s.associated) return;
  const auto& nd = model_.nodes();
  const double delta = s.tradeoff_ad.propose(eng_)[0];
  const double f = std::exp(delta) - 1.0;
  const double a_old = alpha_[k], a_new = a_old * std::exp(-delta);
  CovTransform tf{s.q};
  Eigen::VectorXd u = tf.to_unconstrained(s.Sigma);
  Eigen::VectorXd u_new = u;
  u_new.head(s.q).array() += delta;
  Eigen::MatrixXd Sig_new;
  double d = sigma_prior(k, u_new, &Sig_new) - sigma_prior(k, u, nullptr) - delta;
  d += normal_lp(a_new, 0.0, model_.alpha_prior_sd(k)) - normal_lp(a_old, 0.0, model_.alpha_prior_sd(k));
  Eigen::MatrixXd D = s.theta;
  for (int r = 0; r < s.q; ++r) D.col(r).array() -= s.beta[s.rcols[r]];
  D *= f;
  Eigen::VectorXd ssr_new(static_cast<Eigen::Index>(n_));
  for (std::size_t i = 0; i < n_; ++i) {
    Eigen::VectorXd c = coef(s, i);
    for (int r = 0; r < s.q; ++r) c[s.rcols[r]] += D(static_cast<Eigen::Index>(i), r);
    ssr_new[static_cast<Eigen::Index>(i)] = subject_ssr(k, i, c);
  }
  d += -0.5 * (ssr_new.sum() - s.ssr.sum()) / s.tau2;
  Eigen::VectorXd dm_nodes(s.m_nodes.size()), dm_event(s.m_event.size());
  for (std::size_t i = 0; i < n_; ++i) {
    auto a = static_cast<Eigen::Index>(nd.offset[i]);
    auto len = static_cast<Eigen::Index>(nd.offset[i + 1] - nd.offset[i]);
    auto ii = static_cast<Eigen::Index>(i);
    dm_nodes.segment(a, len).noalias() = s.Z_nodes.middleRows(a, len) * D.row(ii).transpose();
    double e = 0.0;
    for (int r = 0; r < s.q; ++r) e += nd.X_event[k](ii, s.rcols[r]) * D(ii, r);
    dm_event[ii] = e;
  }
  Eigen::VectorXd d_eta = a_new * (s.m_nodes + dm_nodes).array() - a_old * s.m_nodes.array() - (a_new - a_old) * s.center;
  Eigen::VectorXd d_event = a_new * (s.m_event + dm_event).array() - a_old * s.m_event.array() - (a_new - a_old) * s.center;
  Eigen::VectorXd wh_new;
  d += survival_delta(d_eta, d_event, wh_new);
  Eigen::LLT<Eigen::MatrixXd> llt(Sig_new);
  bool accept = std::isfinite(d) && llt.info() == Eigen::Success && std::log(uniform_open(eng_)) < d;
  if (accept) {
    s.theta += D;
    s.ssr = ssr_new;
    s.m_nodes += dm_nodes;
    s.m_event += dm_event;
    alpha_[k] = a_new;
    eta_ += d_eta;
    eta_event_ += d_event;
    wh_ = wh_new;
    set_sigma(s, Sig_new);
  }
  s.tradeoff_ad.record(accept, warmup);
  (void)iter;
}

void ChainSampler::update_spline(bool warmup, int iter) {
  const auto& nd = model_.nodes();
  Eigen::VectorXd delta = spline_ad_.propose(eng_);
  Eigen::VectorXd wh_new;
  double d = survival_delta(nd.B * delta, nd.B_event * delta, wh_new);
  d += spline_prior(s_int_ + delta, smooth_) - spline_prior(s_int_, smooth_);
  bool accept = std::isfinite(d) && std::log(uniform_open(eng_)) < d;
  if (accept) {
    s_int_ += delta;
    eta_ += nd.B * delta;
    eta_event_ += nd.B_event * delta;
    wh_ = wh_new;
  }
  spline_ad_.record(accept, warmup);
  spline_ad_.observe(s_int_, warmup, iter, cfg_.n_warmup);
}

void ChainSampler::update_smooth(bool warmup, int iter) {
  const double scale = model_.spec().priors.smooth_sd_scale;
  auto target = [&](double log_s) {
    double sm = std::exp(log_s);
    return spline_prior(s_int_, sm) + half_normal_lp(sm, scale) + log_s;
  };
  double cur = std::log(smooth_);
  double prop = cur + smooth_ad_.propose(eng_)[0];
  double d = target(prop) - target(cur);
  bool accept = std::isfinite(d) && std::log(uniform_open(eng_)) < d;
  if (accept) smooth_ = std::exp(prop);
  smooth_ad_.record(accept, warmup);
  (void)iter;
}

void ChainSampler::update_gamma(bool warmup, int iter) {
  if (C_ == 0) return;
  const auto& nd = model_.nodes();
  Eigen::VectorXd delta = gamma_ad_.propose(eng_);
  Eigen::VectorXd gamma_new = gamma_ + delta;
  Eigen::VectorXd dwc = (nd.W.rowwise() - cov_center_.transpose()) * delta;
  Eigen::VectorXd d_eta(nd.weight.size());
  for (std::size_t i = 0; i < n_; ++i) {
    auto a = static_cast<Eigen::Index>(nd.offset[i]);
    auto len = static_cast<Eigen::Index>(nd.offset[i + 1] - nd.offset[i]);
    d_eta.segment(a, len).setConstant(dwc[static_cast<Eigen::Index>(i)]);
  }
  Eigen::VectorXd wh_new;
  double d = survival_delta(d_eta, dwc, wh_new);
  for (int c = 0; c < C_; ++c)
    d += normal_lp(gamma_new[c], 0.0, model_.gamma_prior_sd(c)) - normal_lp(gamma_[c], 0.0, model_.gamma_prior_sd(c));
  bool accept = std::isfinite(d) && std::log(uniform_open(eng_)) < d;
  if (accept) {
    gamma_ = gamma_new;
    wc_ += dwc;
    eta_ += d_eta;
    eta_event_ += dwc;
    wh_ = wh_new;
  }
  gamma_ad_.record(accept, warmup);
  gamma_ad_.observe(gamma_, warmup, iter, cfg_.n_warmup);
}

void ChainSampler::update_alpha(bool warmup, int iter) {
  if (assoc_.empty()) return;
  Eigen::VectorXd delta = alpha_ad_.propose(eng_);
  Eigen::VectorXd d_eta = Eigen::VectorXd::Zero(eta_.size()), d_event = Eigen::VectorXd::Zero(eta_event_.size());
  Eigen::VectorXd alpha_new = alpha_;
  for (std::size_t a = 0; a < assoc_.size(); ++a) {
    int k = assoc_[a];
    double da = delta[static_cast<Eigen::Index>(a)];
    alpha_new[k] += da;
    d_eta.array() += da * (subs_[k].m_nodes.array() - subs_[k].center);
    d_event.array() += da * (subs_[k].m_event.array() - subs_[k].center);
  }
  Eigen::VectorXd wh_new;
  double d = survival_delta(d_eta, d_event, wh_new);
  for (int k : assoc_)
    d += normal_lp(alpha_new[k], 0.0, model_.alpha_prior_sd(k)) - normal_lp(alpha_[k], 0.0, model_.alpha_prior_sd(k));
  bool accept = std::isfinite(d) && std::log(uniform_open(eng_)) < d;
  if (accept) {
    alpha_ = alpha_new;
    eta_ += d_eta;
    eta_event_ += d_event;
    wh_ = wh_new;
  }
  alpha_ad_.record(accept, warmup);
  Eigen::VectorXd state(static_cast<Eigen::Index>(assoc_.size()));
  for (std::size_t a = 0; a < assoc_.size(); ++a) state[static_cast<Eigen::Index>(a)] = alpha_[assoc_[a]];
  alpha_ad_.observe(state, warmup, iter, cfg_.n_warmup);
}

void ChainSampler::iterate(bool warmup, int iter) {
  for (int k = 0; k < K_; ++k) {
    update_random_effects(k, warmup);
    update_population_mean(k);
    update_shift(k, warmup, iter);
    update_fixed_only(k, warmup, iter);
    update_tau(k, warmup, iter);
    update_sigma(k, warmup, iter);
    update_sigma_noncentered(k, warmup, iter);
  }
  // Associations stay at their start for the first fifth of warmup so the
  // random effects settle under the longitudinal data first.
  const bool hold_alpha = warmup && iter < cfg_.n_warmup / 5;
  if (surv_ && !hold_alpha)
    for (int k : assoc_) update_alpha_tradeoff(k, warmup, iter);
  if (surv_) {
    update_spline(warmup, iter);
    update_smooth(warmup, iter);
    update_gamma(warmup, iter);
    if (!hold_alpha) update_alpha(warmup, iter);
    if (++since_refresh_ >= 50) {
      for (int k = 0; k < K_; ++k) refresh_subject_m(k);
      refresh_survival();
    }
  }
}

JointParams ChainSampler::params() const {
  JointParams p = model_.zero_params();
  for (int k = 0; k < K_; ++k) {
    const auto& s = subs_[k];
    p.sub[k].beta = s.beta;
    p.sub[k].tau2 = s.tau2;
    if (s.q > 0) {
      p.sub[k].Sigma = s.Sigma;
      for (std::size_t i = 0; i < n_; ++i)
        for (int r = 0; r < s.q; ++r)
          p.sub[k].b(static_cast<Eigen::Index>(i), r) = s.theta(static_cast<Eigen::Index>(i), r) - s.beta[s.rcols[r]];
    }
  }
  if (surv_) {
    p.alpha = alpha_;
    p.gamma = gamma_;
    p.spline = s_int_.array() - shift_constant();
    p.smooth_sd = smooth_;
  }
  return p;
}

Eigen::VectorXd ChainSampler::flat() const {
  std::vector<double> v;
  for (int k = 0; k < K_; ++k) {
    const auto& s = subs_[k];
    for (int j = 0; j < s.p; ++j) v.push_back(s.beta[j]);
    Eigen::VectorXd sd = s.q > 0 ? Eigen::VectorXd(s.Sigma.diagonal().cwiseSqrt()) : Eigen::VectorXd();
    for (int r = 0; r < s.q; ++r) v.push_back(sd[r]);
    for (int j = 0; j < s.q; ++j)
      for (int i = j + 1; i < s.q; ++i) v.push_back(s.Sigma(i, j) / (sd[i] * sd[j]));
    if (!s.tau_fixed) v.push_back(std::sqrt(s.tau2));
  }
  if (surv_) {
    for (int k : assoc_) v.push_back(alpha_[k]);
    for (int c = 0; c < C_; ++c) v.push_back(gamma_[c]);
    double shift = shift_constant();
    for (int j = 0; j < P_; ++j) v.push_back(s_int_[j] - shift);
    v.push_back(smooth_);
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void ChainSampler::accumulate_random_effects(std::vector<Eigen::MatrixXd>& sums) const {
  for (int k = 0; k < K_; ++k) {
    const auto& s = subs_[k];
    for (int r = 0; r < s.q; ++r) sums[k].col(r).array() += s.theta.col(r).array() - s.beta[s.rcols[r]];
  }
}

std::vector<BlockStats> ChainSampler::block_stats() const {
  std::vector<BlockStats> out;
  for (const auto& s : subs_) {
    if (s.q > 0) {
      out.push_back(s.re_stats);
      out.push_back(s.gibbs_stats);
      out.push_back(s.shift_ad.stats);
      out.push_back(s.sigma_ad.stats);
      out.push_back(s.sigma_nc_ad.stats);
      if (s.associated) out.push_back(s.tradeoff_ad.stats);
    }
    if (!s.fcols.empty()) out.push_back(s.fixed_ad.stats);
    if (!s.tau_fixed) out.push_back(s.tau_ad.stats);
  }
  if (surv_) {
    out.push_back(spline_ad_.stats);
    out.push_back(smooth_ad_.stats);
    if (C_ > 0) out.push_back(gamma_ad_.stats);
    if (!assoc_.empty()) out.push_back(alpha_ad_.stats);
  }
  return out;
}

double ChainSampler::cached_log_posterior() const {
  double lp = 0.0;
  for (int k = 0; k < K_; ++k) {
    const auto& s = subs_[k];
    lp += -0.5 * s.ssr.sum() / s.tau2 - 0.5 * s.nobs * (std::log(s.tau2) + kLog2Pi);
    if (s.q > 0) lp += -0.5 * re_quad(s) - 0.5 * static_cast<double>(n_) * (s.Sigma_logdet + s.q * kLog2Pi);
  }
  if (surv_) lp += surv_total();
  return lp + model_.log_prior(params());
}

// ---------------------------------------------------------------------------

Eigen::VectorXd penalized_baseline(const JointModel& model) {
  const auto& nd = model.nodes();
  const int P = model.n_spline();
  double events = nd.status.sum(), exposure = 0.0;
  for (std::size_t i = 0; i < model.n_subjects(); ++i) exposure += model.data().survival(i).event_time;
  double level = std::log(std::max(events, 0.5) / std::max(exposure, 1e-12));
  Eigen::VectorXd s = Eigen::VectorXd::Constant(P, level);
  const Eigen::MatrixXd Q =
      model.penalty() + Eigen::MatrixXd::Identity(P, P) / model.spec().priors.spline_ridge_var;
  auto objective = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd wh = nd.weight.array() * (nd.B * x).array().exp();
    return nd.status.dot(nd.B_event * x) - wh.sum() - 0.5 * x.dot(Q * x);
  };
  double f = objective(s);
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd wh = nd.weight.array() * (nd.B * s).array().exp();
    Eigen::VectorXd g = nd.B_event.transpose() * nd.status - nd.B.transpose() * wh - Q * s;
    Eigen::MatrixXd H = nd.B.transpose() * wh.asDiagonal() * nd.B + Q;
    Eigen::VectorXd step = H.ldlt().solve(g);
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      Eigen::VectorXd cand = s + t * step;
      double fc = objective(cand);
      if (std::isfinite(fc) && fc >= f) {
        moved = fc > f;
        s = cand;
        f = fc;
        break;
      }
      t *= 0.5;
    }
    if (!moved || step.norm() * t < 1e-10) break;
  }
  return s;
}

}  // namespace

void SamplerConfig::validate() const {
  require(n_chains >= 1, ErrorCode::Config, "sampler.chains: must be positive");
  require(n_warmup >= 1, ErrorCode::Config, "sampler.warmup: must be positive");
  require(n_kept >= 4, ErrorCode::Config, "sampler.kept: must be at least 4");
  require(jobs >= 1, ErrorCode::Config, "sampler.jobs: must be positive");
  require(init_jitter >= 0.0, ErrorCode::Config, "sampler.init_jitter: must be >= 0");
  require(target_multivariate > 0 && target_multivariate < 1 && target_scalar > 0 && target_scalar < 1,
          ErrorCode::Config, "sampler targets must lie in (0, 1)");
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
  SamplerConfig c;
  require(j.is_object(), ErrorCode::Config, "sampler: expected an object");
  check_keys(j, {"chains", "warmup", "kept", "seed", "init_jitter", "jobs", "target_multivariate", "target_scalar"},
             "sampler.");
  auto num = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) fail(ErrorCode::Config, std::string("sampler.") + key + ": expected a number");
    field = j[key].get<std::decay_t<decltype(field)>>();
  };
  num("chains", c.n_chains);
  num("warmup", c.n_warmup);
  num("kept", c.n_kept);
  num("seed", c.seed);
  num("init_jitter", c.init_jitter);
  num("jobs", c.jobs);
  num("target_multivariate", c.target_multivariate);
  num("target_scalar", c.target_scalar);
  c.validate();
  return c;
}

nlohmann::json SamplerConfig::to_json() const {
  return {{"chains", n_chains},         {"warmup", n_warmup},
          {"kept", n_kept},             {"seed", seed},
          {"init_jitter", init_jitter}, {"jobs", jobs},
          {"target_multivariate", target_multivariate}, {"target_scalar", target_scalar}};
}

const ParamSummary* JointModelFit::find(std::string_view name) const {
  for (const auto& s : summaries)
    if (s.name == name) return &s;
  return nullptr;
}

std::vector<std::vector<double>> JointModelFit::draws(std::size_t param) const {
  std::vector<std::vector<double>> out;
  for (const auto& c : chains) {
    Eigen::VectorXd col = c.col(static_cast<Eigen::Index>(param));
    out.emplace_back(col.data(), col.data() + col.size());
  }
  return out;
}

JointParams initialize(const JointModel& model) {
  JointParams p = model.zero_params();
  for (int k = 0; k < model.n_submodels(); ++k) {
    const auto& sub = model.spec().submodels[k];
    LmmFit fit = fit_lmm(model.data(), sub.outcome, model.time_model(k), LmmMethod::REML);
    p.sub[k].beta = fit.beta;
    if (sub.fixed_residual_sd) {
      p.sub[k].tau2 = *sub.fixed_residual_sd * *sub.fixed_residual_sd;
    } else {
      p.sub[k].tau2 = fit.sigma2;
    }
    if (model.time_model(k).n_random() > 0) {
      Eigen::MatrixXd Sig = fit.Sigma;
      // keep the start comfortably inside the support
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Sig);
      double floor = 1e-4 * std::max(1e-12, Sig.diagonal().maxCoeff());
      Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
      p.sub[k].Sigma = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
      p.sub[k].b = fit.b;
    }
  }
  if (model.has_survival()) {
    p.spline = penalized_baseline(model);
    p.smooth_sd = 1.0;
  }
  return p;
}

JointParams jitter_params(const JointModel& model, const JointParams& base, double jitter, std::uint64_t seed) {
  if (jitter == 0.0) return base;
  Engine eng(seed);
  JointParams p = base;
  for (int k = 0; k < model.n_submodels(); ++k) {
    auto& s = p.sub[k];
    // rough posterior sd of each fixed effect: residual sd over sqrt(obs count)
    double nobs = 0;
    for (const auto& d : model.designs()) nobs += static_cast<double>(d.y[k].size());
    double se = std::sqrt(s.tau2 / std::max(1.0, nobs));
    const auto& tm = model.time_model(k);
    for (int j = 0; j < s.beta.size(); ++j) {
      double col = model.scales().column_sd[k][j];
      double sej = se / (col > 0 ? col : 1.0);
      for (int r = 0; r < tm.n_random(); ++r)
        if (tm.random_columns()[r] == j)
          sej = std::max(sej, std::sqrt(s.Sigma(r, r) / std::max(1.0, double(model.n_subjects()))));
      double shift = 2.0 * jitter * sej * std_normal(eng);
      s.beta[j] += shift;
    }
    if (!model.spec().submodels[k].fixed_residual_sd) s.tau2 *= std::exp(2.0 * 0.05 * jitter * std_normal(eng));
    if (tm.n_random() > 0) {
      Eigen::VectorXd f(tm.n_random());
      for (int r = 0; r < tm.n_random(); ++r) f[r] = std::exp(0.2 * jitter * std_normal(eng));
      s.Sigma = f.asDiagonal() * s.Sigma * f.asDiagonal();
      // Empirical Bayes means are shrunk; starting from them drags the
      // covariance towards zero. Draw from the conditional instead.
      const int q = tm.n_random();
      Eigen::MatrixXd Sinv = inverse_spd(s.Sigma);
      for (std::size_t i = 0; i < model.n_subjects(); ++i) {
        const auto& X = model.designs()[i].X[k];
        Eigen::MatrixXd Z(X.rows(), q);
        for (int r = 0; r < q; ++r) Z.col(r) = X.col(tm.random_columns()[r]);
        Eigen::MatrixXd prec = Z.transpose() * Z / s.tau2 + Sinv;
        Eigen::LLT<Eigen::MatrixXd> llt(prec);
        Eigen::VectorXd z = std_normal_vector(eng, q);
        if (llt.info() == Eigen::Success) s.b.row(static_cast<Eigen::Index>(i)) += jitter * llt.matrixU().solve(z).transpose();
      }
    }
  }
  if (model.has_survival()) {
    double common = 0.2 * jitter * std_normal(eng);
    for (int j = 0; j < p.spline.size(); ++j) p.spline[j] += common + 0.05 * jitter * std_normal(eng);
    for (int k = 0; k < model.n_submodels(); ++k)
      if (model.spec().submodels[k].associated) p.alpha[k] += 0.02 * jitter * model.alpha_prior_sd(k) * std_normal(eng);
    for (int c = 0; c < model.n_covariates(); ++c) p.gamma[c] += 0.02 * jitter * model.gamma_prior_sd(c) * std_normal(eng);
    p.smooth_sd *= std::exp(0.2 * jitter * std_normal(eng));
  }
  return p;
}

namespace {

void check_deadline(const SamplerConfig& cfg) {
  if (cfg.cancel && cfg.cancel->load(std::memory_order_relaxed)) fail(ErrorCode::Timeout, "sampling cancelled");
  if (cfg.deadline && std::chrono::steady_clock::now() > *cfg.deadline)
    fail(ErrorCode::Timeout, "sampling exceeded its time limit");
}

struct ChainResult {
  Eigen::MatrixXd draws;
  std::vector<BlockStats> blocks;
  std::vector<Eigen::MatrixXd> re_sums;
};

ChainResult run_chain(const JointModel& model, const SamplerConfig& cfg, const JointParams& base, int chain) {
  JointParams init = jitter_params(model, base, cfg.init_jitter, derive_seed(cfg.seed, {static_cast<std::uint64_t>(chain), 1}));
  double lp0 = model.log_posterior(init);
  if (!std::isfinite(lp0))
    fail(ErrorCode::Sampler, "chain " + std::to_string(chain + 1) + ": log posterior is not finite at the initial point");
  ChainSampler s(model, cfg, init, make_engine(cfg.seed, {static_cast<std::uint64_t>(chain), 2}));
  const auto names = model.parameter_names();
  ChainResult out;
  out.draws.resize(cfg.n_kept, static_cast<Eigen::Index>(names.size()));
  for (int k = 0; k < model.n_submodels(); ++k)
    out.re_sums.push_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(model.n_subjects()), model.time_model(k).n_random()));
  const int total = cfg.n_warmup + cfg.n_kept;
  for (int it = 0; it < total; ++it) {
    check_deadline(cfg);
    bool warmup = it < cfg.n_warmup;
    s.iterate(warmup, it);
    if (!warmup) {
      Eigen::VectorXd f = s.flat();
      if (!f.allFinite()) fail(ErrorCode::Sampler, "chain " + std::to_string(chain + 1) + ": non-finite draw");
      out.draws.row(it - cfg.n_warmup) = f.transpose();
      s.accumulate_random_effects(out.re_sums);
    }
  }
  out.blocks = s.block_stats();
  long proposed = 0, accepted = 0;
  for (const auto& b : out.blocks)
    if (!b.gibbs) {
      proposed += b.proposed;
      accepted += b.accepted;
    }
  if (proposed > 0 && accepted == 0)
    fail(ErrorCode::Sampler, "chain " + std::to_string(chain + 1) + ": no proposal accepted after warmup");
  return out;
}

}  // namespace

ChainProbe probe_chain(const JointModel& model, const SamplerConfig& cfg, int iterations) {
  JointParams base = initialize(model);
  JointParams init = jitter_params(model, base, cfg.init_jitter, derive_seed(cfg.seed, {0, 1}));
  SamplerConfig c = cfg;
  c.n_warmup = std::max(iterations, 1);
  ChainSampler s(model, c, init, make_engine(cfg.seed, {0, 2}));
  for (int it = 0; it < iterations; ++it) s.iterate(true, it);
  return {s.params(), s.cached_log_posterior()};
}

JointModelFit sample(const JointModel& model, const SamplerConfig& cfg) {
  cfg.validate();
  auto t0 = std::chrono::steady_clock::now();
  JointParams base = initialize(model);
  std::vector<ChainResult> results(cfg.n_chains);
  std::vector<std::exception_ptr> errors(cfg.n_chains);
  auto work = [&](int c) {
    try {
      results[c] = run_chain(model, cfg, base, c);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  int jobs = std::min(cfg.jobs, cfg.n_chains);
  if (jobs <= 1) {
    for (int c = 0; c < cfg.n_chains; ++c) {
      work(c);
      if (errors[c]) std::rethrow_exception(errors[c]);
    }
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w)
      pool.emplace_back([&] {
        for (int c = next++; c < cfg.n_chains; c = next++) work(c);
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  JointModelFit fit;
  fit.names = model.parameter_names();
  fit.seed = cfg.seed;
  const double total = static_cast<double>(cfg.n_chains) * cfg.n_kept;
  for (int k = 0; k < model.n_submodels(); ++k)
    fit.random_effect_means.push_back(
        Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(model.n_subjects()), model.time_model(k).n_random()));
  for (auto& r : results) {
    fit.chains.push_back(std::move(r.draws));
    fit.acceptance.push_back(std::move(r.blocks));
    for (int k = 0; k < model.n_submodels(); ++k) fit.random_effect_means[k] += r.re_sums[k] / total;
  }
  fit.summaries = summarize(fit.names, fit.chains);
  fit.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return fit;
}

double rhat(const std::vector<std::vector<double>>& chains) {
  require(chains.size() >= 2 || (chains.size() == 1 && chains[0].size() >= 4), ErrorCode::InvalidArgument,
          "rhat needs at least two chains");
  std::vector<std::span<const double>> halves;
  for (const auto& c : chains) {
    require(c.size() >= 4, ErrorCode::InvalidArgument, "rhat needs at least 4 draws per chain");
    std::size_t h = c.size() / 2;
    halves.emplace_back(c.data(), h);
    halves.emplace_back(c.data() + c.size() - h, h);
  }
  const double n = static_cast<double>(halves[0].size());
  const double m = static_cast<double>(halves.size());
  std::vector<double> means;
  double W = 0.0;
  for (auto h : halves) {
    means.push_back(stats::mean(h));
    double sd = stats::sd(h);
    W += sd * sd / m;
  }
  if (!(W > 0.0)) return std::numeric_limits<double>::infinity();
  double B_over_n = 0.0;
  double grand = stats::mean(means);
  for (double mu : means) B_over_n += (mu - grand) * (mu - grand) / (m - 1.0);
  double var_plus = (n - 1.0) / n * W + B_over_n;
  return std::max(1.0, std::sqrt(var_plus / W));
}

double ess(const std::vector<std::vector<double>>& chains) {
  const std::size_t m = chains.size();
  require(m >= 1, ErrorCode::InvalidArgument, "ess needs draws");
  std::size_t n = chains[0].size();
  for (const auto& c : chains) n = std::min(n, c.size());
  if (n < 4) return static_cast<double>(n * m);
  // autocovariance per chain via FFT
  Eigen::FFT<double> fft;
  std::size_t len = 1;
  while (len < 2 * n) len <<= 1;
  std::vector<std::vector<double>> acov(m);
  std::vector<double> chain_mean(m), chain_var(m);
  for (std::size_t c = 0; c < m; ++c) {
    std::span<const double> x(chains[c].data(), n);
    chain_mean[c] = stats::mean(x);
    std::vector<double> buf(len, 0.0);
    for (std::size_t t = 0; t < n; ++t) buf[t] = x[t] - chain_mean[c];
    std::vector<std::complex<double>> freq;
    fft.fwd(freq, buf);
    for (auto& f : freq) f = std::norm(f);
    std::vector<double> back;
    fft.inv(back, freq);
    acov[c].resize(n);
    for (std::size_t t = 0; t < n; ++t) acov[c][t] = back[t] / static_cast<double>(n);
    chain_var[c] = acov[c][0] * static_cast<double>(n) / (static_cast<double>(n) - 1.0);
  }
  double W = stats::mean(chain_var);
  double var_plus = W * (static_cast<double>(n) - 1.0) / static_cast<double>(n);
  if (m > 1) {
    double b = stats::sd(chain_mean);
    var_plus += b * b;
  }
  if (!(var_plus > 0.0)) return static_cast<double>(n * m);
  auto rho = [&](std::size_t t) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += acov[c][t];
    return 1.0 - (W - s / static_cast<double>(m)) / var_plus;
  };
  // Geyer: sum of positive, monotone pairs
  double tau = -1.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t + 1 < n; t += 2) {
    double pair = rho(t) + rho(t + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    tau += 2.0 * pair;
    prev_pair = pair;
  }
  tau = std::max(tau, 1.0 / std::log10(static_cast<double>(n * m)));
  return static_cast<double>(n * m) / tau;
}

std::vector<ParamSummary> summarize(const std::vector<std::string>& names, const std::vector<Eigen::MatrixXd>& chains) {
  require(!chains.empty(), ErrorCode::InvalidArgument, "summarize needs at least one chain");
  std::vector<ParamSummary> out;
  for (std::size_t p = 0; p < names.size(); ++p) {
    std::vector<std::vector<double>> per_chain;
    std::vector<double> pooled;
    for (const auto& c : chains) {
      Eigen::VectorXd col = c.col(static_cast<Eigen::Index>(p));
      per_chain.emplace_back(col.data(), col.data() + col.size());
      pooled.insert(pooled.end(), col.data(), col.data() + col.size());
    }
    ParamSummary s;
    s.name = names[p];
    s.mean = stats::mean(pooled);
    s.sd = stats::sd(pooled);
    std::sort(pooled.begin(), pooled.end());
    s.q025 = stats::quantile_type7_sorted(pooled, 0.025);
    s.q975 = stats::quantile_type7_sorted(pooled, 0.975);
    bool enough = per_chain[0].size() >= 4 && (per_chain.size() >= 2 || per_chain[0].size() >= 4);
    s.rhat = enough ? rhat(per_chain) : std::numeric_limits<double>::quiet_NaN();
    s.ess = s.sd > 0.0 ? ess(per_chain) : static_cast<double>(pooled.size());
    s.mcse = s.ess > 0.0 ? s.sd / std::sqrt(s.ess) : 0.0;
    out.push_back(s);
  }
  return out;
}

void write_posterior_summary(const std::filesystem::path& path, const JointModelFit& fit) {
  csv::Table t;
  t.header = {"parameter", "mean", "sd", "q2.5", "q97.5", "rhat", "ess", "mcse"};
  for (const auto& s : fit.summaries)
    t.rows.push_back({s.name, csv::format_double(s.mean), csv::format_double(s.sd), csv::format_double(s.q025),
                      csv::format_double(s.q975), csv::format_double(s.rhat), csv::format_double(s.ess),
                      csv::format_double(s.mcse)});
  csv::write_atomic(path, csv::render(t));
}

void write_acceptance(const std::filesystem::path& path, const JointModelFit& fit) {
  csv::Table t;
  t.header = {"chain", "block", "gibbs", "warmup_proposed", "warmup_accepted", "proposed", "accepted", "rate"};
  for (std::size_t c = 0; c < fit.acceptance.size(); ++c)
    for (const auto& b : fit.acceptance[c])
      t.rows.push_back({std::to_string(c + 1), b.name, b.gibbs ? "1" : "0", std::to_string(b.warmup_proposed),
                        std::to_string(b.warmup_accepted), std::to_string(b.proposed), std::to_string(b.accepted),
                        csv::format_double(b.rate())});
  csv::write_atomic(path, csv::render(t));
}

void write_chains(const std::filesystem::path& path, const JointModelFit& fit, const std::vector<std::string>& manifest) {
  csv::Table t;
  for (const auto& line : manifest) t.comments.push_back("# " + line);
  t.header = {"chain", "iteration"};
  t.header.insert(t.header.end(), fit.names.begin(), fit.names.end());
  for (std::size_t c = 0; c < fit.chains.size(); ++c) {
    const auto& m = fit.chains[c];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<std::string> row{std::to_string(c + 1), std::to_string(r + 1)};
      for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(csv::format_double(m(r, j)));
      t.rows.push_back(std::move(row));
    }
  }
  csv::write_atomic(path, csv::render(t));
}

ChainFile read_chains(const std::filesystem::path& path) {
  auto t = csv::read(path);
  require(t.header.size() >= 2 && t.header[0] == "chain" && t.header[1] == "iteration", ErrorCode::Schema,
          path.filename().string() + ": not a chain dump");
  ChainFile out;
  for (const auto& c : t.comments) out.manifest.push_back(c.starts_with("# ") ? c.substr(2) : c.substr(1));
  out.names.assign(t.header.begin() + 2, t.header.end());
  std::vector<std::vector<std::vector<double>>> rows;
  for (const auto& r : t.rows) {
    require(r.size() == t.header.size(), ErrorCode::Schema, path.filename().string() + ": ragged row");
    auto c = csv::parse_double(r[0]);
    require(c && *c >= 1, ErrorCode::Schema, path.filename().string() + ": bad chain index");
    auto ci = static_cast<std::size_t>(*c) - 1;
    if (rows.size() <= ci) rows.resize(ci + 1);
    std::vector<double> v;
    for (std::size_t j = 2; j < r.size(); ++j) {
      auto x = csv::parse_double(r[j]);
      require(x.has_value(), ErrorCode::Schema, path.filename().string() + ": bad number '" + r[j] + "'");
      v.push_back(*x);
    }
    rows[ci].push_back(std::move(v));
  }
  for (const auto& chain : rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(chain.size()), static_cast<Eigen::Index>(out.names.size()));
    for (std::size_t r = 0; r < chain.size(); ++r)
      for (std::size_t j = 0; j < out.names.size(); ++j) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = chain[r][j];
    out.chains.push_back(std::move(m));
  }
  return out;
}

}  // namespace jmvar
