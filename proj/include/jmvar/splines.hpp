#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace jmvar {

/// Clamped B-spline basis of a given degree on [lower, upper] with strictly
/// interior knots. Basis count is interior + degree + 1. Evaluation outside
/// the boundary clamps t to the nearest boundary.
class BSplineBasis {
 public:
  BSplineBasis(int degree, std::vector<double> interior_knots, double lower, double upper);

  /// `n_basis` functions with interior knots at equally spaced quantiles of `x`.
  static BSplineBasis at_quantiles(std::span<const double> x, int degree, int n_basis, double lower, double upper);

  int degree() const noexcept { return degree_; }
  int size() const noexcept { return static_cast<int>(interior_.size()) + degree_ + 1; }
  double lower() const noexcept { return lower_; }
  double upper() const noexcept { return upper_; }
  const std::vector<double>& interior_knots() const noexcept { return interior_; }
  const std::vector<double>& knots() const noexcept { return knots_; }

  Eigen::VectorXd eval(double t) const;

  /// Index of the first non-zero function and the degree+1 non-zero values.
  int eval_local(double t, std::span<double> values) const;

  /// d^order/dt^order of every basis function at t (t clamped to the boundary).
  Eigen::VectorXd derivative(double t, int order) const;

 private:
  int span_index(double t) const;

  int degree_;
  std::vector<double> interior_;
  double lower_;
  double upper_;
  std::vector<double> knots_;
};

/// Natural cubic spline basis without intercept (as in the usual `ns()`
/// construction): a cubic B-spline basis projected onto the subspace with
/// zero second derivative at both boundary knots. Linear beyond the
/// boundary knots.
class NaturalCubicBasis {
 public:
  NaturalCubicBasis(std::vector<double> interior_knots, double lower, double upper);

  /// df - 1 interior knots at quantiles of `x`, boundary knots at range(x).
  static NaturalCubicBasis from_data(std::span<const double> x, int df);

  int df() const noexcept { return static_cast<int>(projection_.cols()); }
  double lower() const noexcept { return bspline_.lower(); }
  double upper() const noexcept { return bspline_.upper(); }
  const std::vector<double>& interior_knots() const noexcept { return bspline_.interior_knots(); }

  Eigen::VectorXd eval(double t) const;

 private:
  Eigen::VectorXd eval_inside(double t) const;

  BSplineBasis bspline_;
  Eigen::MatrixXd projection_;  // (n_bspline - 1) x df
  Eigen::VectorXd at_lower_, at_upper_, slope_lower_, slope_upper_;
};

/// D^T D for the order-th difference operator D on `size` coefficients.
Eigen::MatrixXd difference_penalty(int order, int size);

}  // namespace jmvar
