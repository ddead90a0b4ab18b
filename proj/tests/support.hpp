#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "jmvar/dataset.hpp"
#include "jmvar/rng.hpp"
#include "tempdir.hpp"

namespace testing {

/// Random-intercept-and-slope data on the usual 13-point grid, no censoring.
inline jmvar::LongitudinalDataset linear_lmm_data(int n, std::uint64_t seed, double b0 = 142, double b1 = 3,
                                                  double sd0 = 14.4, double sd1 = 3.0, double rho = -0.4,
                                                  double sigma = 10.0) {
  static const double grid[] = {0, .25, .5, .75, 1, 1.5, 2, 2.5, 3, 3.5, 4, 4.5, 5};
  jmvar::Engine eng(seed);
  std::vector<jmvar::LongRow> rows;
  std::vector<jmvar::SurvivalRecord> surv;
  for (int i = 0; i < n; ++i) {
    std::string id = "s" + std::to_string(i);
    double z0 = jmvar::std_normal(eng), z1 = jmvar::std_normal(eng);
    double u0 = sd0 * z0, u1 = sd1 * (rho * z0 + std::sqrt(1 - rho * rho) * z1);
    for (double t : grid) rows.push_back({id, "y", t, b0 + u0 + (b1 + u1) * t + sigma * jmvar::std_normal(eng)});
    surv.push_back({id, 6.0, jmvar::EventStatus::Censored, {}});
  }
  return jmvar::LongitudinalDataset::build(std::move(rows), std::move(surv), {});
}

/// Two outcomes ("y" linear mixed, "r" positive noise) on the 13-point grid
/// truncated at each subject's time, one covariate "w", mixed events and
/// censoring.
inline jmvar::LongitudinalDataset joint_data(int n, std::uint64_t seed) {
  static const double grid[] = {0, .25, .5, .75, 1, 1.5, 2, 2.5, 3, 3.5, 4, 4.5, 5};
  jmvar::Engine eng(seed);
  std::vector<jmvar::LongRow> rows;
  std::vector<jmvar::SurvivalRecord> surv;
  for (int i = 0; i < n; ++i) {
    std::string id = "p" + std::to_string(i);
    double w = jmvar::std_normal(eng);
    double T = 0.3 + 5.0 * jmvar::uniform_open(eng);
    bool event = jmvar::uniform_open(eng) < 0.7;
    double u0 = 2.0 * jmvar::std_normal(eng), u1 = 0.5 * jmvar::std_normal(eng);
    for (double t : grid) {
      if (t > T) break;
      rows.push_back({id, "y", t, 10.0 + u0 + (1.0 + u1) * t + jmvar::std_normal(eng)});
      rows.push_back({id, "r", t, std::abs(2.0 * jmvar::std_normal(eng))});
    }
    surv.push_back({id, T, event ? jmvar::EventStatus::Event : jmvar::EventStatus::Censored, {w}});
  }
  return jmvar::LongitudinalDataset::build(std::move(rows), std::move(surv), {"w"});
}

}  // namespace testing
