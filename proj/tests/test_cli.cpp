#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "tempdir.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

/// Runs the CLI from `cwd` with extra environment assignments.
Run cli(const testing::TempDir& cwd, const std::string& args, const std::string& env = "") {
  const std::string cmd = "cd '" + cwd.path().string() + "' && env -u JMVAR_SEED -u JMVAR_CONFIG " + env + " '" +
                          JMVAR_CLI_PATH + "' " + args + " > stdout.txt 2> stderr.txt";
  int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testing::read_file(cwd / "stdout.txt");
  r.err = testing::read_file(cwd / "stderr.txt");
  return r;
}

json last_json_line(const std::string& text) {
  auto end = text.find_last_not_of('\n');
  auto start = text.rfind('\n', end);
  return json::parse(text.substr(start == std::string::npos ? 0 : start + 1, end - (start == std::string::npos ? 0 : start + 1) + 1));
}

bool no_partials(const fs::path& dir) {
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().find(".partial-") != std::string::npos) return false;
  return true;
}

}  // namespace

TEST_CASE("cli: pipeline simulate -> fit-lmm -> fit-joint") {
  testing::TempDir d;
  Run s = cli(d, "simulate --scenario linear --subjects 60 --seed 9 --out sim");
  REQUIRE_MESSAGE(s.code == 0, s.err);
  json m = json::parse(s.out);
  CHECK(m["command"] == "simulate");
  CHECK(m["master_seed"] == 9);
  CHECK(m["config_hash"].get<std::string>().size() == 16);
  CHECK(m["versions"].contains("jmvar"));
  CHECK(m["wall_time_seconds"].get<double>() >= 0.0);
  CHECK(fs::exists(d / "sim" / "manifest.json"));
  CHECK(json::parse(testing::read_file(d / "sim" / "manifest.json")) == m);

  Run l = cli(d, "fit-lmm --data sim --out lmm");
  REQUIRE_MESSAGE(l.code == 0, l.err);
  CHECK(testing::read_file(d / "lmm" / "residuals.csv").rfind("subject,time,observed,fitted,raw,squared,absolute,scale\n", 0) == 0);

  Run j = cli(d, "fit-joint --data sim --lmm lmm --chains 2 --warmup 60 --kept 40 --jobs 2 --out joint");
  REQUIRE_MESSAGE(j.code == 0, j.err);
  json jm = json::parse(j.out);
  CHECK(jm["result"]["posterior"].contains("alpha.absres"));
  CHECK(jm["settings"]["jobs"] == 2);
  CHECK(jm["sources"]["jobs"] == "flag");
  CHECK(jm["result"]["residual_scaling"] == "leverage");
  for (const char* f : {"posterior.csv", "chains.csv", "trajectories.csv", "manifest.json"})
    CHECK(fs::exists(d / "joint" / f));
  CHECK(no_partials(d.path()));

  Run p = cli(d, "plotdata sigma-trajectories --truth sim --fit joint --out sigma.csv");
  REQUIRE_MESSAGE(p.code == 0, p.err);
  std::string csv = testing::read_file(d / "sigma.csv");
  CHECK(csv.find("subject,time,true_sigma,fitted_R,fitted_sigma\n") != std::string::npos);
  CHECK(fs::exists(d / "sigma.csv.manifest.json"));
}

TEST_CASE("cli: plot data with and without a fit") {
  testing::TempDir d;
  REQUIRE(cli(d, "simulate --subjects 40 --out sim").code == 0);
  Run truth_only = cli(d, "plotdata marker-trajectories --truth sim");
  REQUIRE(truth_only.code == 0);
  std::string line = truth_only.out.substr(truth_only.out.find('\n') + 1);
  line = line.substr(0, line.find('\n'));
  CHECK(line.back() == ',');  // empty fitted column

  REQUIRE(cli(d, "fit-lmm --data sim --out lmm").code == 0);
  Run fitted = cli(d, "plotdata marker-trajectories --truth sim --fit lmm");
  REQUIRE(fitted.code == 0);
  std::string obs = testing::read_file(d / "sim" / "longitudinal.csv");
  auto lines = [](const std::string& t) { return std::count(t.begin(), t.end(), '\n'); };
  CHECK(lines(fitted.out) == lines(obs));  // one row per observation plus header
  CHECK(fitted.out.find(",,") == std::string::npos);

  Run km = cli(d, "plotdata km-vs-analytic --scenario linear --subjects 2000 --points 21");
  REQUIRE(km.code == 0);
  auto pos = km.out.rfind("# max_gap=");
  REQUIRE(pos != std::string::npos);
  CHECK(std::stod(km.out.substr(pos + 10)) < 0.05);
}

TEST_CASE("cli: settings precedence") {
  testing::TempDir d;
  testing::write_file(d / "cfg.json", R"({"seed": 4, "subjects": 30})");
  Run a = cli(d, "simulate --config cfg.json --out a");
  REQUIRE(a.code == 0);
  json ma = json::parse(a.out);
  CHECK(ma["master_seed"] == 4);
  CHECK(ma["sources"]["seed"] == "config");
  CHECK(ma["result"]["n_subjects"] == 30);

  Run b = cli(d, "simulate --config cfg.json --out b", "JMVAR_SEED=5");
  REQUIRE(b.code == 0);
  CHECK(json::parse(b.out)["master_seed"] == 5);
  CHECK(json::parse(b.out)["sources"]["seed"] == "env");

  Run c = cli(d, "simulate --config cfg.json --seed 6 --out c", "JMVAR_SEED=5");
  REQUIRE(c.code == 0);
  CHECK(json::parse(c.out)["master_seed"] == 6);
  CHECK(json::parse(c.out)["sources"]["seed"] == "flag");

  Run e = cli(d, "simulate --out e", "JMVAR_CONFIG=cfg.json");
  REQUIRE(e.code == 0);
  CHECK(json::parse(e.out)["master_seed"] == 4);

  // same settings, same data
  Run f = cli(d, "simulate --seed 4 --subjects 30 --out f");
  REQUIRE(f.code == 0);
  CHECK(testing::read_file(d / "a" / "longitudinal.csv") == testing::read_file(d / "f" / "longitudinal.csv"));
  CHECK(json::parse(f.out)["config_hash"] == ma["config_hash"]);
}

TEST_CASE("cli: errors") {
  testing::TempDir d;
  Run unknown = cli(d, "simulate --no-such-flag 3 --out x");
  CHECK(unknown.code != 0);
  CHECK(unknown.err.find("Usage") != std::string::npos);
  CHECK(last_json_line(unknown.err)["error"]["status"] == "invalid_argument");
  CHECK_FALSE(fs::exists(d / "x"));

  CHECK(cli(d, "").code != 0);
  CHECK(cli(d, "frobnicate").code != 0);

  testing::write_file(d / "bad.json", R"({"seed": "x", "chainz": 2, "warmup": 1.5})");
  Run bad = cli(d, "fit-joint --config bad.json --data sim --out x");
  CHECK(bad.code == 5);
  json rec = last_json_line(bad.err)["error"];
  CHECK(rec["status"] == "config");
  auto fields = rec["fields"].get<std::vector<std::string>>();
  std::sort(fields.begin(), fields.end());
  CHECK(fields == std::vector<std::string>{"chainz", "seed", "warmup"});

  Run env = cli(d, "simulate --out x", "JMVAR_SUBJECTS=lots");
  CHECK(env.code == 5);
  CHECK(last_json_line(env.err)["error"]["fields"] == json::array({"subjects"}));

  Run range = cli(d, "simulate --subjects 0 --out x");
  CHECK(range.code == 5);
  CHECK(last_json_line(range.err)["error"]["fields"] == json::array({"n_subjects"}));

  Run missing = cli(d, "fit-lmm --data nowhere --out x");
  CHECK(missing.code == 2);
  CHECK(last_json_line(missing.err)["error"]["status"] == "io");
  CHECK_FALSE(fs::exists(d / "x"));

  Run scaling = cli(d, "fit-joint --data sim --lmm lmm --residual-scaling studentized --out x");
  CHECK(scaling.code == 5);
  CHECK(last_json_line(scaling.err)["error"]["fields"] == json::array({"residual_scaling"}));

  Run no_out = cli(d, "simulate");
  CHECK(no_out.code == 5);
  CHECK(last_json_line(no_out.err)["error"]["fields"] == json::array({"out"}));
  CHECK(no_partials(d.path()));
}

TEST_CASE("cli: failed fit removes partial output") {
  testing::TempDir d;
  REQUIRE(cli(d, "simulate --subjects 60 --out sim").code == 0);
  REQUIRE(cli(d, "fit-lmm --data sim --out lmm").code == 0);
  Run t = cli(d, "fit-joint --data sim --lmm lmm --chains 1 --warmup 5000 --kept 5000 --timeout-min 0.0000001 --out j");
  CHECK(t.code == 9);
  CHECK(last_json_line(t.err)["error"]["status"] == "timeout");
  CHECK_FALSE(fs::exists(d / "j"));
  CHECK(no_partials(d.path()));
}

TEST_CASE("cli: run-study and summarize") {
  testing::TempDir d;
  Run s = cli(d, "run-study --subjects 60 --replicates 3 --chains 2 --warmup 60 --kept 40 --jobs 2 --seed 3 --out st -q");
  REQUIRE_MESSAGE(s.code == 0, s.err);
  json m = json::parse(s.out);
  CHECK(m["master_seed"] == 3);
  CHECK(m["result"]["replicates"] == 3);
  for (const char* f : {"config.json", "results.csv", "summary.csv", "timings.csv", "manifest.json"})
    CHECK(fs::exists(d / "st" / f));
  CHECK(fs::exists(d / "st" / "replicates" / "0003"));

  Run sum = cli(d, "summarize st");
  REQUIRE(sum.code == 0);
  CHECK(sum.out == testing::read_file(d / "st" / "summary.csv"));
  REQUIRE(cli(d, "summarize st --out again.csv").code == 0);
  CHECK(testing::read_file(d / "again.csv") == testing::read_file(d / "st" / "summary.csv"));

  // parallelism does not change results
  Run s1 = cli(d, "run-study --subjects 60 --replicates 3 --chains 2 --warmup 60 --kept 40 --jobs 1 --seed 3 --out st1 -q");
  REQUIRE(s1.code == 0);
  CHECK(testing::read_file(d / "st1" / "results.csv") == testing::read_file(d / "st" / "results.csv"));
  CHECK(json::parse(s1.out)["config_hash"] == m["config_hash"]);
}
