#include "jmvar/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "jmvar/error.hpp"

namespace jmvar::stats {

double mean(std::span<const double> x) {
  if (x.empty()) return std::nan("");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double sd(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

double quantile_type7_sorted(std::span<const double> sorted, double p) {
  require(!sorted.empty(), ErrorCode::InvalidArgument, "quantile of empty sample");
  require(p >= 0.0 && p <= 1.0, ErrorCode::InvalidArgument, "quantile probability outside [0, 1]");
  double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  auto lo = static_cast<std::size_t>(std::floor(h));
  auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double quantile_type7(std::span<const double> x, double p) {
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  return quantile_type7_sorted(s, p);
}

}  // namespace jmvar::stats
