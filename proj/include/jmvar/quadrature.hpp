#pragma once

#include <functional>
#include <vector>

namespace jmvar {

/// Nodes and weights on [-1, 1].
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const noexcept { return nodes.size(); }
};

/// Gauss-Kronrod rule with n points, n in {15, 21, 31, 41, 51, 61}.
const QuadratureRule& gauss_kronrod_rule(int n);

/// Fixed rule mapped to [a, b].
double integrate_fixed(const std::function<double(double)>& f, double a, double b, const QuadratureRule& rule);

struct AdaptiveResult {
  double value = 0.0;
  double error = 0.0;
  int intervals = 0;
  bool converged = false;
};

/// Globally adaptive GK15 (G7 embedded error estimate), bisecting the worst
/// interval until the summed error estimate is below abs_tol.
AdaptiveResult integrate_adaptive(const std::function<double(double)>& f, double a, double b, double abs_tol,
                                  int max_intervals = 500);

struct RootResult {
  double root = 0.0;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Brent's bracketing root finder on [a, b] with f(a) and f(b) of opposite
/// sign. Stops when |f| <= f_tol or the bracket is narrower than x_tol.
RootResult brent_root(const std::function<double(double)>& f, double a, double b, double fa, double fb,
                      double x_tol, double f_tol, int max_iter = 200);

}  // namespace jmvar
