#include "jmvar/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <queue>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "jmvar/error.hpp"

namespace jmvar {

namespace {

template <unsigned N>
QuadratureRule make_rule() {
  using gk = boost::math::quadrature::gauss_kronrod<double, N>;
  const auto& x = gk::abscissa();
  const auto& w = gk::weights();
  QuadratureRule rule;
  // Boost stores the non-negative half, centre first.
  for (std::size_t k = x.size(); k-- > 1;) {
    rule.nodes.push_back(-x[k]);
    rule.weights.push_back(w[k]);
  }
  for (std::size_t k = 0; k < x.size(); ++k) {
    rule.nodes.push_back(x[k]);
    rule.weights.push_back(w[k]);
  }
  return rule;
}

struct Gk15Tables {
  std::vector<double> x, wk, wg;  // half-rule, centre first; wg is zero at Kronrod-only nodes
};

const Gk15Tables& gk15_tables() {
  static const Gk15Tables t = [] {
    using gk = boost::math::quadrature::gauss_kronrod<double, 15>;
    using g = boost::math::quadrature::gauss<double, 7>;
    Gk15Tables out;
    out.x.assign(gk::abscissa().begin(), gk::abscissa().end());
    out.wk.assign(gk::weights().begin(), gk::weights().end());
    out.wg.assign(out.x.size(), 0.0);
    // Gauss nodes are the even-indexed Kronrod abscissae.
    for (std::size_t k = 0; k < g::abscissa().size(); ++k) out.wg[2 * k] = g::weights()[k];
    return out;
  }();
  return t;
}

struct Panel {
  double a, b, value, error;
  bool operator<(const Panel& o) const { return error < o.error; }
};

Panel gk15_panel(const std::function<double(double)>& f, double a, double b) {
  const auto& t = gk15_tables();
  const double c = 0.5 * (a + b), h = 0.5 * (b - a);
  double fc = f(c);
  double k = t.wk[0] * fc, g = t.wg[0] * fc;
  for (std::size_t j = 1; j < t.x.size(); ++j) {
    double s = f(c - h * t.x[j]) + f(c + h * t.x[j]);
    k += t.wk[j] * s;
    g += t.wg[j] * s;
  }
  return {a, b, k * h, std::abs((k - g) * h)};
}

}  // namespace

const QuadratureRule& gauss_kronrod_rule(int n) {
  static const QuadratureRule r15 = make_rule<15>(), r21 = make_rule<21>(), r31 = make_rule<31>(),
                              r41 = make_rule<41>(), r51 = make_rule<51>(), r61 = make_rule<61>();
  switch (n) {
    case 15: return r15;
    case 21: return r21;
    case 31: return r31;
    case 41: return r41;
    case 51: return r51;
    case 61: return r61;
    default:
      fail(ErrorCode::InvalidArgument,
           "unsupported Gauss-Kronrod node count " + std::to_string(n) + " (use 15, 21, 31, 41, 51 or 61)");
  }
}

double integrate_fixed(const std::function<double(double)>& f, double a, double b, const QuadratureRule& rule) {
  const double c = 0.5 * (a + b), h = 0.5 * (b - a);
  double s = 0.0;
  for (std::size_t k = 0; k < rule.size(); ++k) s += rule.weights[k] * f(c + h * rule.nodes[k]);
  return s * h;
}

AdaptiveResult integrate_adaptive(const std::function<double(double)>& f, double a, double b, double abs_tol,
                                  int max_intervals) {
  AdaptiveResult res;
  if (a == b) {
    res.converged = true;
    return res;
  }
  std::priority_queue<Panel> heap;
  Panel first = gk15_panel(f, a, b);
  double total = first.value, err = first.error;
  heap.push(first);
  res.intervals = 1;
  while (err > abs_tol && res.intervals < max_intervals) {
    Panel worst = heap.top();
    heap.pop();
    double mid = 0.5 * (worst.a + worst.b);
    if (!(mid > worst.a && mid < worst.b)) {
      heap.push(worst);
      break;
    }
    Panel l = gk15_panel(f, worst.a, mid), r = gk15_panel(f, mid, worst.b);
    total += l.value + r.value - worst.value;
    err += l.error + r.error - worst.error;
    heap.push(l);
    heap.push(r);
    ++res.intervals;
  }
  // Re-sum from the panels to avoid drift from incremental updates.
  total = 0.0;
  err = 0.0;
  std::vector<Panel> panels;
  while (!heap.empty()) {
    panels.push_back(heap.top());
    heap.pop();
  }
  std::sort(panels.begin(), panels.end(), [](const Panel& x, const Panel& y) { return x.a < y.a; });
  for (const auto& p : panels) {
    total += p.value;
    err += p.error;
  }
  res.value = total;
  res.error = err;
  res.converged = err <= abs_tol;
  if (!std::isfinite(total)) fail(ErrorCode::Numeric, "non-finite integrand in adaptive quadrature");
  return res;
}

RootResult brent_root(const std::function<double(double)>& f, double a, double b, double fa, double fb,
                      double x_tol, double f_tol, int max_iter) {
  require((fa <= 0 && fb >= 0) || (fa >= 0 && fb <= 0), ErrorCode::Numeric,
          "Brent: root not bracketed (f(a)=" + std::to_string(fa) + ", f(b)=" + std::to_string(fb) + ")");
  RootResult res;
  double c = a, fc = fa, d = b - a, e = d;
  for (int it = 0; it < max_iter; ++it) {
    res.iterations = it + 1;
    if ((fb > 0 && fc > 0) || (fb < 0 && fc < 0)) {
      c = a;
      fc = fa;
      d = e = b - a;
    }
    if (std::abs(fc) < std::abs(fb)) {
      a = b;
      b = c;
      c = a;
      fa = fb;
      fb = fc;
      fc = fa;
    }
    const double tol = 2.0 * std::numeric_limits<double>::epsilon() * std::abs(b) + 0.5 * x_tol;
    const double m = 0.5 * (c - b);
    if (std::abs(fb) <= f_tol || std::abs(m) <= tol || fb == 0.0) {
      res.root = b;
      res.value = fb;
      res.converged = true;
      return res;
    }
    if (std::abs(e) >= tol && std::abs(fa) > std::abs(fb)) {
      double s = fb / fa, p, q;
      if (a == c) {
        p = 2.0 * m * s;
        q = 1.0 - s;
      } else {
        double qq = fa / fc, r = fb / fc;
        p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
        q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
      }
      if (p > 0)
        q = -q;
      else
        p = -p;
      if (2.0 * p < std::min(3.0 * m * q - std::abs(tol * q), std::abs(e * q))) {
        e = d;
        d = p / q;
      } else {
        d = m;
        e = d;
      }
    } else {
      d = m;
      e = d;
    }
    a = b;
    fa = fb;
    b += std::abs(d) > tol ? d : (m > 0 ? tol : -tol);
    fb = f(b);
  }
  res.root = b;
  res.value = fb;
  return res;
}

}  // namespace jmvar
