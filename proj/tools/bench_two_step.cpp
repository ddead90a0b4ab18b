// Times one two-step replicate and prints posterior summaries and acceptance rates.
#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "jmvar/study.hpp"

int main(int argc, char** argv) {
  using namespace jmvar;
  double alpha_sigma = argc > 1 ? std::atof(argv[1]) : 0.02;
  int warmup = argc > 2 ? std::atoi(argv[2]) : 1000;
  int kept = argc > 3 ? std::atoi(argv[3]) : 2000;
  std::uint64_t seed = argc > 4 ? std::strtoull(argv[4], nullptr, 10) : 1;
  std::string scen = argc > 5 ? argv[5] : "linear";
  ScenarioConfig sc = ScenarioConfig::preset(scen, alpha_sigma);
  sc.seed = seed;
  auto t0 = std::chrono::steady_clock::now();
  auto sim = simulate(sc);
  auto t1 = std::chrono::steady_clock::now();
  std::printf("simulate %.3fs event rate %.3f\n", std::chrono::duration<double>(t1 - t0).count(), sim.event_rate());
  SamplerConfig cfg;
  cfg.n_warmup = warmup;
  cfg.n_kept = kept;
  cfg.seed = seed;
  cfg.jobs = 3;
  auto fit = fit_two_step(sim.dataset, sc.outcome, scenario_time_model(sc), TwoStepOptions{}, cfg);
  auto t2 = std::chrono::steady_clock::now();
  std::printf("fit %.3fs\n", std::chrono::duration<double>(t2 - t1).count());
  for (const auto& s : fit.joint.summaries)
    std::printf("%-28s %10.4f %9.4f [%9.4f, %9.4f] rhat %.3f ess %.0f\n", s.name.c_str(), s.mean, s.sd, s.q025, s.q975,
                s.rhat, s.ess);
  if (argc > 6) write_chains(argv[6], fit.joint, {"bench"});
  for (const auto& b : fit.joint.acceptance[0])
    std::printf("  %-24s warm %.3f kept %.3f\n", b.name.c_str(),
                b.warmup_proposed ? double(b.warmup_accepted) / b.warmup_proposed : 0.0, b.rate());
}
