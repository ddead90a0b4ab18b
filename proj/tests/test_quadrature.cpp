#include <cmath>

#include <boost/math/special_functions/gamma.hpp>

#include "doctest.h"
#include "jmvar/quadrature.hpp"

using namespace jmvar;

TEST_CASE("gauss-kronrod rules integrate polynomials") {
  for (int n : {15, 21, 31, 41, 51, 61}) {
    const auto& r = gauss_kronrod_rule(n);
    CHECK(r.size() == static_cast<std::size_t>(n));
    double s = 0;
    for (double w : r.weights) s += w;
    CHECK(s == doctest::Approx(2.0).epsilon(1e-14));
    // degree 3n/2 exactness (GK15 is exact to degree 22)
    double v = integrate_fixed([](double x) { return std::pow(x, 20); }, 0.0, 1.0, r);
    CHECK(v == doctest::Approx(1.0 / 21.0).epsilon(1e-13));
  }
  CHECK_THROWS(gauss_kronrod_rule(17));
}

TEST_CASE("adaptive quadrature reaches tolerance") {
  auto f = [](double x) { return std::sqrt(x) * std::exp(-x); };
  auto r = integrate_adaptive(f, 0.0, 10.0, 1e-10);
  CHECK(r.converged);
  double exact = boost::math::tgamma_lower(1.5, 10.0);
  CHECK(std::abs(r.value - exact) < 1e-8);
  auto w = integrate_adaptive([](double x) { return 3.24 * std::pow(x, 2.24); }, 0.0, 5.0, 1e-10);
  CHECK(std::abs(w.value - std::pow(5.0, 3.24)) < 1e-9);
}

TEST_CASE("brent root") {
  auto f = [](double x) { return std::cos(x) - x; };
  auto r = brent_root(f, 0.0, 1.0, f(0.0), f(1.0), 1e-15, 1e-14);
  CHECK(r.converged);
  CHECK(r.root == doctest::Approx(0.7390851332151607).epsilon(1e-14));
}
