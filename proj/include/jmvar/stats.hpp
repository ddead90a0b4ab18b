#pragma once

#include <span>
#include <vector>

namespace jmvar::stats {

double mean(std::span<const double> x);
/// Sample standard deviation, denominator n - 1 (0 for n < 2).
double sd(std::span<const double> x);
/// Hyndman-Fan type 7 quantile (linear interpolation of order statistics).
double quantile_type7(std::span<const double> x, double p);
double quantile_type7_sorted(std::span<const double> sorted, double p);

}  // namespace jmvar::stats
