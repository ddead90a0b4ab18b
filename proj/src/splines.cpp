#include "jmvar/splines.hpp"

#include <algorithm>
#include <cmath>

#include "jmvar/error.hpp"
#include "jmvar/stats.hpp"

namespace jmvar {

BSplineBasis::BSplineBasis(int degree, std::vector<double> interior_knots, double lower, double upper)
    : degree_(degree), interior_(std::move(interior_knots)), lower_(lower), upper_(upper) {
  require(degree >= 0, ErrorCode::InvalidArgument, "B-spline degree must be >= 0");
  require(std::isfinite(lower) && std::isfinite(upper) && lower < upper, ErrorCode::InvalidArgument,
          "B-spline boundary must satisfy lower < upper");
  for (std::size_t k = 0; k < interior_.size(); ++k) {
    require(interior_[k] > lower && interior_[k] < upper, ErrorCode::InvalidArgument,
            "B-spline interior knots must lie strictly inside the boundary");
    require(k == 0 || interior_[k] > interior_[k - 1], ErrorCode::InvalidArgument,
            "B-spline interior knots must be strictly increasing");
  }
  knots_.assign(degree_ + 1, lower_);
  knots_.insert(knots_.end(), interior_.begin(), interior_.end());
  knots_.insert(knots_.end(), degree_ + 1, upper_);
}

BSplineBasis BSplineBasis::at_quantiles(std::span<const double> x, int degree, int n_basis, double lower,
                                        double upper) {
  int n_interior = n_basis - degree - 1;
  require(n_interior >= 0, ErrorCode::InvalidArgument, "too few basis functions for the spline degree");
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> knots;
  for (int k = 1; k <= n_interior && !sorted.empty(); ++k) {
    double q = stats::quantile_type7_sorted(sorted, static_cast<double>(k) / (n_interior + 1));
    if (q > lower && q < upper && (knots.empty() || q > knots.back())) knots.push_back(q);
  }
  // Tied data can collapse quantiles; top up with evenly spaced knots.
  if (static_cast<int>(knots.size()) < n_interior) {
    knots.clear();
    for (int k = 1; k <= n_interior; ++k) knots.push_back(lower + (upper - lower) * k / (n_interior + 1));
  }
  return BSplineBasis(degree, std::move(knots), lower, upper);
}

int BSplineBasis::span_index(double t) const {
  const int n = size();
  if (t >= knots_[n]) return n - 1;
  if (t <= knots_[degree_]) return degree_;
  int lo = degree_, hi = n;
  while (hi - lo > 1) {
    int mid = (lo + hi) / 2;
    if (t < knots_[mid])
      hi = mid;
    else
      lo = mid;
  }
  return lo;
}

int BSplineBasis::eval_local(double t, std::span<double> values) const {
  require(std::isfinite(t), ErrorCode::Numeric, "B-spline evaluated at non-finite t");
  t = std::clamp(t, lower_, upper_);
  const int p = degree_;
  const int i = span_index(t);
  double left[32], right[32];
  require(p < 31, ErrorCode::InvalidArgument, "B-spline degree too large");
  values[0] = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = t - knots_[i + 1 - j];
    right[j] = knots_[i + j] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      double temp = values[r] / (right[r + 1] + left[j - r]);
      values[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    values[j] = saved;
  }
  return i - p;
}

Eigen::VectorXd BSplineBasis::eval(double t) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(size());
  double local[32];
  int first = eval_local(t, std::span<double>(local, degree_ + 1));
  for (int r = 0; r <= degree_; ++r) out[first + r] = local[r];
  return out;
}

Eigen::VectorXd BSplineBasis::derivative(double t, int order) const {
  require(std::isfinite(t), ErrorCode::Numeric, "B-spline evaluated at non-finite t");
  require(order >= 0, ErrorCode::InvalidArgument, "derivative order must be >= 0");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(size());
  if (order > degree_) return out;
  t = std::clamp(t, lower_, upper_);
  const int p = degree_;
  const int i = span_index(t);
  // Derivatives of the non-zero basis functions (de Boor / Piegl-Tiller).
  Eigen::MatrixXd ndu(p + 1, p + 1);
  Eigen::VectorXd left(p + 1), right(p + 1);
  ndu(0, 0) = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = t - knots_[i + 1 - j];
    right[j] = knots_[i + j] - t;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      ndu(j, r) = right[r + 1] + left[j - r];
      double temp = ndu(r, j - 1) / ndu(j, r);
      ndu(r, j) = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    ndu(j, j) = saved;
  }
  Eigen::MatrixXd a(2, p + 1);
  Eigen::VectorXd ders(p + 1);
  for (int r = 0; r <= p; ++r) {
    int s1 = 0, s2 = 1;
    a.setZero();
    a(0, 0) = 1.0;
    double d = 0.0;
    for (int k = 1; k <= order; ++k) {
      d = 0.0;
      int rk = r - k, pk = p - k;
      if (r >= k) {
        a(s2, 0) = a(s1, 0) / ndu(pk + 1, rk);
        d = a(s2, 0) * ndu(rk, pk);
      }
      int j1 = rk >= -1 ? 1 : -rk;
      int j2 = (r - 1 <= pk) ? k - 1 : p - r;
      for (int j = j1; j <= j2; ++j) {
        a(s2, j) = (a(s1, j) - a(s1, j - 1)) / ndu(pk + 1, rk + j);
        d += a(s2, j) * ndu(rk + j, pk);
      }
      if (r <= pk) {
        a(s2, k) = -a(s1, k - 1) / ndu(pk + 1, r);
        d += a(s2, k) * ndu(r, pk);
      }
      std::swap(s1, s2);
    }
    ders[r] = order == 0 ? ndu(r, p) : d;
  }
  double factor = 1.0;
  for (int k = p; k > p - order; --k) factor *= k;
  for (int r = 0; r <= p; ++r) out[i - p + r] = ders[r] * factor;
  return out;
}

NaturalCubicBasis::NaturalCubicBasis(std::vector<double> interior_knots, double lower, double upper)
    : bspline_(3, std::move(interior_knots), lower, upper) {
  const int n = bspline_.size();
  Eigen::MatrixXd constraint(n - 1, 2);
  constraint.col(0) = bspline_.derivative(lower, 2).tail(n - 1);
  constraint.col(1) = bspline_.derivative(upper, 2).tail(n - 1);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(constraint);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n - 1, n - 1);
  projection_ = q.rightCols(n - 3);
  at_lower_ = eval_inside(lower);
  at_upper_ = eval_inside(upper);
  slope_lower_ = projection_.transpose() * bspline_.derivative(lower, 1).tail(n - 1);
  slope_upper_ = projection_.transpose() * bspline_.derivative(upper, 1).tail(n - 1);
}

NaturalCubicBasis NaturalCubicBasis::from_data(std::span<const double> x, int df) {
  require(df >= 1, ErrorCode::InvalidArgument, "natural spline df must be >= 1");
  require(!x.empty(), ErrorCode::InvalidArgument, "natural spline needs data");
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  double lo = sorted.front(), hi = sorted.back();
  require(hi > lo, ErrorCode::InvalidArgument, "natural spline needs at least two distinct times");
  std::vector<double> knots;
  for (int k = 1; k < df; ++k) {
    double q = stats::quantile_type7_sorted(sorted, static_cast<double>(k) / df);
    require(q > lo && q < hi && (knots.empty() || q > knots.back()), ErrorCode::InvalidArgument,
            "natural spline knots collapse; too few distinct times for df");
    knots.push_back(q);
  }
  return NaturalCubicBasis(std::move(knots), lo, hi);
}

Eigen::VectorXd NaturalCubicBasis::eval_inside(double t) const {
  const int n = bspline_.size();
  return projection_.transpose() * bspline_.eval(t).tail(n - 1);
}

Eigen::VectorXd NaturalCubicBasis::eval(double t) const {
  require(std::isfinite(t), ErrorCode::Numeric, "natural spline evaluated at non-finite t");
  if (t < lower()) return at_lower_ + (t - lower()) * slope_lower_;
  if (t > upper()) return at_upper_ + (t - upper()) * slope_upper_;
  return eval_inside(t);
}

Eigen::MatrixXd difference_penalty(int order, int size) {
  require(order >= 0 && size > order, ErrorCode::InvalidArgument, "penalty requires size > order");
  Eigen::MatrixXd d = Eigen::MatrixXd::Identity(size, size);
  for (int k = 0; k < order; ++k) {
    Eigen::MatrixXd next(d.rows() - 1, size);
    for (int r = 0; r + 1 < d.rows(); ++r) next.row(r) = d.row(r + 1) - d.row(r);
    d = std::move(next);
  }
  return d.transpose() * d;
}

}  // namespace jmvar
