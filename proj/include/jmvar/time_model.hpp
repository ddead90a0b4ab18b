#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "jmvar/splines.hpp"

namespace jmvar {

enum class TermKind { Intercept, Linear, QuadraticCentered, NaturalSpline };

/// One time-basis term. A natural-spline term expands to `df` columns.
struct TimeTerm {
  TermKind kind = TermKind::Intercept;
  double center = 0.0;  // QuadraticCentered: (t - center)^2
  int df = 0;           // NaturalSpline

  /// "intercept", "time", "quad(2)", "ns(2)".
  static TimeTerm parse(std::string_view text);
  std::string label() const;
  int columns() const noexcept { return kind == TermKind::NaturalSpline ? df : 1; }
  bool operator==(const TimeTerm&) const = default;
};

/// Fixed-effect design x(t) and random-effect design z(t) over time. The
/// random columns are a subset of the fixed columns. Natural-spline terms
/// need `fit_bases` (knots from observed times) before evaluation.
class TimeModel {
 public:
  TimeModel() = default;
  TimeModel(std::vector<TimeTerm> fixed, std::vector<TimeTerm> random);

  /// Terms from {"fixed": [...], "random": [...]}.
  static TimeModel from_json(std::string_view text);
  std::string to_json() const;

  static TimeModel linear();     // intercept + time, both random
  static TimeModel quadratic(double center);  // + (t - center)^2, all random

  void fit_bases(std::span<const double> times);
  bool needs_bases() const noexcept;
  const std::optional<NaturalCubicBasis>& spline_basis() const noexcept { return ncs_; }

  int n_fixed() const noexcept { return n_fixed_; }
  int n_random() const noexcept { return static_cast<int>(random_cols_.size()); }
  const std::vector<TimeTerm>& fixed_terms() const noexcept { return fixed_; }
  const std::vector<TimeTerm>& random_terms() const noexcept { return random_; }
  /// For each random column, its index among the fixed columns.
  const std::vector<int>& random_columns() const noexcept { return random_cols_; }
  std::vector<std::string> fixed_names() const;
  std::vector<std::string> random_names() const;

  Eigen::VectorXd fixed_row(double t) const;
  Eigen::VectorXd random_row(double t) const;

 private:
  std::vector<TimeTerm> fixed_, random_;
  std::vector<int> random_cols_;
  int n_fixed_ = 0;
  std::optional<NaturalCubicBasis> ncs_;
};

}  // namespace jmvar
