#include <cmath>
#include <functional>

#include "doctest.h"
#include "jmvar/rng.hpp"
#include "jmvar/splines.hpp"

using namespace jmvar;

namespace {

// Independent oracle: textbook recursive Cox-de Boor on the full knot vector.
double cox_de_boor(const std::vector<double>& k, int i, int p, double t) {
  if (p == 0) {
    if (k[i] <= t && t < k[i + 1]) return 1.0;
    // close the last non-empty interval on the right
    if (t == k.back() && k[i] < k[i + 1] && k[i + 1] == k.back()) return 1.0;
    return 0.0;
  }
  double left = 0.0, right = 0.0;
  if (k[i + p] > k[i]) left = (t - k[i]) / (k[i + p] - k[i]) * cox_de_boor(k, i, p - 1, t);
  if (k[i + p + 1] > k[i + 1]) right = (k[i + p + 1] - t) / (k[i + p + 1] - k[i + 1]) * cox_de_boor(k, i + 1, p - 1, t);
  return left + right;
}

}  // namespace

TEST_SUITE("property-bspline") {
  TEST_CASE("partition of unity at 1000 random interior points") {
    Engine eng(11);
    for (int degree : {0, 1, 2, 3, 4}) {
      BSplineBasis b(degree, {0.3, 1.1, 1.2, 2.7, 4.0}, 0.0, 5.0);
      for (int r = 0; r < 1000; ++r) {
        double t = 5.0 * uniform_open(eng);
        auto v = b.eval(t);
        CHECK(std::abs(v.sum() - 1.0) < 1e-10);
        CHECK(v.minCoeff() >= 0.0);
      }
    }
  }

  TEST_CASE("local support") {
    Engine eng(12);
    BSplineBasis b(3, {1, 2, 3, 4}, 0.0, 5.0);
    const auto& k = b.knots();
    for (int r = 0; r < 500; ++r) {
      double t = 5.0 * uniform_open(eng);
      auto v = b.eval(t);
      for (int p = 0; p < b.size(); ++p)
        if (t < k[p] || t > k[p + b.degree() + 1]) CHECK(v[p] == 0.0);
    }
  }
}

TEST_CASE("bspline: degree 0 indicator basis") {
  BSplineBasis b(0, {0.5}, 0.0, 1.0);
  auto v = b.eval(0.25);
  REQUIRE(v.size() == 2);
  CHECK(v[0] == 1.0);
  CHECK(v[1] == 0.0);
}

TEST_CASE("bspline: closed forms for degree 1") {
  BSplineBasis b(1, {1.0}, 0.0, 2.0);
  auto v = b.eval(0.25);
  CHECK(v[0] == doctest::Approx(0.75));
  CHECK(v[1] == doctest::Approx(0.25));
  CHECK(v[2] == 0.0);
}

TEST_CASE("bspline: degree 3 matches recursive Cox-de Boor, including at knots") {
  std::vector<double> interior{1, 2, 3, 4};
  BSplineBasis b(3, interior, 0.0, 5.0);
  // validate the oracle on degree 0 and 1 closed forms first
  BSplineBasis b1(1, interior, 0.0, 5.0);
  for (double t : {0.0, 0.4, 1.0, 2.5, 5.0}) {
    auto v = b1.eval(t);
    for (int p = 0; p < b1.size(); ++p) CHECK(v[p] == doctest::Approx(cox_de_boor(b1.knots(), p, 1, t)).epsilon(1e-14));
  }
  for (double t : {0.0, 0.5, 1.0, 2.0, 2.25, 3.0, 4.0, 4.999, 5.0}) {
    auto v = b.eval(t);
    for (int p = 0; p < b.size(); ++p)
      CHECK(v[p] == doctest::Approx(cox_de_boor(b.knots(), p, 3, t)).epsilon(1e-13).scale(1.0));
  }
}

TEST_CASE("bspline: outside the boundary clamps") {
  BSplineBasis b(3, {1, 2}, 0.0, 3.0);
  CHECK((b.eval(-1.0) - b.eval(0.0)).norm() == 0.0);
  CHECK((b.eval(7.0) - b.eval(3.0)).norm() == 0.0);
}

TEST_CASE("bspline: derivative matches finite differences") {
  BSplineBasis b(3, {0.7, 1.9, 2.2}, 0.0, 3.0);
  for (double t : {0.3, 1.0, 2.05, 2.9}) {
    double h = 1e-6;
    Eigen::VectorXd fd = (b.eval(t + h) - b.eval(t - h)) / (2 * h);
    CHECK((b.derivative(t, 1) - fd).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("bspline: knots at quantiles") {
  std::vector<double> x;
  for (int i = 1; i <= 100; ++i) x.push_back(i / 20.0);
  auto b = BSplineBasis::at_quantiles(x, 3, 9, 0.0, 5.0);
  CHECK(b.size() == 9);
  CHECK(b.interior_knots().size() == 5);
  for (double k : b.interior_knots()) {
    CHECK(k > 0.0);
    CHECK(k < 5.0);
  }
}

TEST_CASE("ncs: linear beyond the boundary knots") {
  NaturalCubicBasis ncs({1.5, 3.0}, 0.0, 5.0);
  CHECK(ncs.df() == 3);
  double h = 0.01;
  for (double t : {5.5, 7.0, 12.0, -0.5, -3.0}) {
    Eigen::VectorXd d2 = ncs.eval(t + h) - 2.0 * ncs.eval(t) + ncs.eval(t - h);
    CHECK(d2.cwiseAbs().maxCoeff() / (h * h) < 1e-6);
  }
}

TEST_CASE("ncs: second derivative vanishes at the boundary from inside") {
  NaturalCubicBasis ncs({2.0}, 0.0, 5.0);
  double h = 1e-3;
  for (double t : {0.0 + 2 * h, 5.0 - 2 * h}) {
    Eigen::VectorXd d2 = (ncs.eval(t + h) - 2.0 * ncs.eval(t) + ncs.eval(t - h)) / (h * h);
    CHECK(d2.cwiseAbs().maxCoeff() < 1e-2);
  }
}

TEST_CASE("ncs: continuous at the boundary knots") {
  NaturalCubicBasis ncs({1.0, 2.5, 4.0}, 0.0, 5.0);
  for (double b : {0.0, 5.0}) {
    Eigen::VectorXd left = ncs.eval(std::nextafter(b, -1e9));
    Eigen::VectorXd right = ncs.eval(std::nextafter(b, 1e9));
    CHECK((left - right).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("ncs: df=1 gives the same least-squares fit as raw time") {
  std::vector<double> t, y;
  Engine eng(5);
  for (int i = 0; i < 60; ++i) {
    t.push_back(5.0 * uniform_open(eng));
    y.push_back(2.0 - 0.7 * t.back() + 0.3 * t.back() * t.back() + std_normal(eng));
  }
  auto ncs = NaturalCubicBasis::from_data(t, 1);
  REQUIRE(ncs.df() == 1);
  Eigen::MatrixXd A(60, 2), B(60, 2);
  Eigen::VectorXd Y(60);
  for (int i = 0; i < 60; ++i) {
    A(i, 0) = 1.0;
    A(i, 1) = t[i];
    B(i, 0) = 1.0;
    B(i, 1) = ncs.eval(t[i])[0];
    Y[i] = y[i];
  }
  Eigen::VectorXd fa = A * A.colPivHouseholderQr().solve(Y);
  Eigen::VectorXd fb = B * B.colPivHouseholderQr().solve(Y);
  CHECK((fa - fb).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("ncs: full column rank design") {
  auto ncs = NaturalCubicBasis({1.0, 2.0, 3.5}, 0.0, 5.0);
  Eigen::MatrixXd X(13, ncs.df() + 1);
  const double grid[] = {0, .25, .5, .75, 1, 1.5, 2, 2.5, 3, 3.5, 4, 4.5, 5};
  for (int i = 0; i < 13; ++i) {
    X(i, 0) = 1.0;
    X.row(i).tail(ncs.df()) = ncs.eval(grid[i]).transpose();
  }
  CHECK(X.colPivHouseholderQr().rank() == ncs.df() + 1);
}

TEST_CASE("difference penalty") {
  auto P = difference_penalty(2, 4);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(P);
  CHECK(lu.rank() == 2);
  Eigen::Vector4d ones(1, 1, 1, 1), lin(1, 2, 3, 4);
  CHECK((P * ones).norm() < 1e-14);
  CHECK((P * lin).norm() < 1e-14);
  auto P1 = difference_penalty(1, 3);
  Eigen::Vector3d e(0, 1, 0);
  CHECK(e.dot(P1 * e) == 2.0);
  CHECK((P - P.transpose()).norm() == 0.0);
  CHECK_THROWS(difference_penalty(2, 2));
}
