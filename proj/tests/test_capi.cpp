#include <cmath>
#include <filesystem>
#include <string>
#include <thread>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "jmvar/jmvar.h"
#include "tempdir.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Ctx {
  jmvar_context* ctx = jmvar_context_new();
  ~Ctx() { jmvar_context_free(ctx); }
  json error() const { return json::parse(jmvar_last_error(ctx)); }
};

std::string take(char* s) {
  std::string out = s ? s : "";
  jmvar_string_free(s);
  return out;
}

bool no_partials(const fs::path& dir) {
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().find(".partial-") != std::string::npos) return false;
  return true;
}

const char* kSmallScenario = R"({"preset": "linear", "n_subjects": 60, "seed": 3})";

}  // namespace

TEST_CASE("capi: version and status names") {
  Ctx c;
  char* out = nullptr;
  REQUIRE(jmvar_version(c.ctx, &out) == JMVAR_OK);
  json v = json::parse(take(out));
  CHECK(v.contains("jmvar"));
  CHECK(v.contains("eigen"));
  CHECK(v.contains("boost"));
  CHECK(jmvar_last_error(c.ctx) == nullptr);
  CHECK(std::string(jmvar_status_name(JMVAR_E_CONFIG)) == "config");
  CHECK(std::string(jmvar_status_name(JMVAR_E_CANCELLED)) == "cancelled");
  CHECK(std::string(jmvar_status_name(static_cast<jmvar_status>(99))) == "unknown");
  CHECK(jmvar_version(nullptr, &out) == JMVAR_E_INVALID_ARGUMENT);
}

TEST_CASE("capi: config errors name the fields") {
  Ctx c;
  char* out = nullptr;
  CHECK(jmvar_config_normalize(c.ctx, "study", R"({"replicates": 2, "sampler": {"chain": 1}, "jbos": 2})", &out) ==
        JMVAR_E_CONFIG);
  json e = c.error();
  CHECK(e["status"] == "config");
  CHECK(e["code"] == JMVAR_E_CONFIG);
  CHECK(e["fields"] == json::array({"jbos"}));

  CHECK(jmvar_config_normalize(c.ctx, "sampler", R"({"chains": 0})", &out) == JMVAR_E_CONFIG);
  CHECK(c.error()["fields"] == json::array({"sampler.chains"}));
  CHECK(jmvar_config_normalize(c.ctx, "scenario", "{not json", &out) == JMVAR_E_CONFIG);
  CHECK(jmvar_config_normalize(c.ctx, "widget", "{}", &out) == JMVAR_E_INVALID_ARGUMENT);
}

TEST_CASE("capi: config normalization and hashing") {
  Ctx c;
  char* out = nullptr;
  REQUIRE(jmvar_config_normalize(c.ctx, "scenario", kSmallScenario, &out) == JMVAR_OK);
  json full = json::parse(take(out));
  CHECK(full["n_subjects"] == 60);
  CHECK(full["beta"].size() == 2);
  REQUIRE(jmvar_config_hash(c.ctx, "scenario", kSmallScenario, &out) == JMVAR_OK);
  std::string h1 = take(out);
  REQUIRE(jmvar_config_hash(c.ctx, "scenario", full.dump().c_str(), &out) == JMVAR_OK);
  CHECK(take(out) == h1);
  REQUIRE(jmvar_config_hash(c.ctx, "study", R"({"scenario": {"preset": "linear"}, "jobs": 1})", &out) == JMVAR_OK);
  std::string s1 = take(out);
  REQUIRE(jmvar_config_hash(c.ctx, "study", R"({"scenario": {"preset": "linear"}, "jobs": 7})", &out) == JMVAR_OK);
  CHECK(take(out) == s1);
  REQUIRE(jmvar_hash_text(c.ctx, "", &out) == JMVAR_OK);
  CHECK(take(out) == "cbf29ce484222325");
}

TEST_CASE("capi: simulate, fit-lmm, fit-joint and plot data") {
  Ctx c;
  testing::TempDir dir;
  char* out = nullptr;
  REQUIRE(jmvar_simulate(c.ctx, kSmallScenario, (dir / "sim").c_str(), &out) == JMVAR_OK);
  json sim = json::parse(take(out));
  CHECK(sim["n_subjects"] == 60);
  for (const char* f : {"longitudinal.csv", "survival.csv", "truth.csv", "scenario.json"})
    CHECK(fs::exists(dir / "sim" / f));

  json lreq{{"data", (dir / "sim").string()}};
  REQUIRE(jmvar_fit_lmm(c.ctx, lreq.dump().c_str(), (dir / "lmm").c_str(), &out) == JMVAR_OK);
  take(out);
  for (const char* f : {"lmm.json", "estimates.csv", "residuals.csv", "random_effects.csv"})
    CHECK(fs::exists(dir / "lmm" / f));

  json jreq{{"data", (dir / "sim").string()},
            {"lmm", (dir / "lmm").string()},
            {"sampler", {{"chains", 2}, {"warmup", 60}, {"kept", 40}, {"seed", 4}}}};
  REQUIRE(jmvar_fit_joint(c.ctx, jreq.dump().c_str(), (dir / "joint").c_str(), &out) == JMVAR_OK);
  json fit = json::parse(take(out));
  CHECK(fit["posterior"].contains("alpha.absres"));
  CHECK(fit["posterior"].contains("alpha.y"));
  for (const char* f : {"posterior.csv", "acceptance.csv", "trajectories.csv", "chains.csv", "spec.json"})
    CHECK(fs::exists(dir / "joint" / f));
  CHECK(no_partials(dir.path()));

  // refitting into the same directory gives identical posterior summaries
  std::string first = testing::read_file(dir / "joint" / "posterior.csv");
  REQUIRE(jmvar_fit_joint(c.ctx, jreq.dump().c_str(), (dir / "joint").c_str(), nullptr) == JMVAR_OK);
  CHECK(testing::read_file(dir / "joint" / "posterior.csv") == first);

  json preq{{"kind", "marker-trajectories"}, {"truth", (dir / "sim").string()}, {"fit", (dir / "joint").string()}};
  REQUIRE(jmvar_plot_data(c.ctx, preq.dump().c_str(), &out) == JMVAR_OK);
  std::string csv = take(out);
  CHECK(csv.rfind("subject,time,observed,true_m,fitted_m\n", 0) == 0);
  CHECK(csv.find(",,") == std::string::npos);
}

TEST_CASE("capi: fit-joint without lmm or spec is a config error") {
  Ctx c;
  testing::TempDir dir;
  char* out = nullptr;
  REQUIRE(jmvar_simulate(c.ctx, kSmallScenario, (dir / "sim").c_str(), &out) == JMVAR_OK);
  take(out);
  json jreq{{"data", (dir / "sim").string()}};
  CHECK(jmvar_fit_joint(c.ctx, jreq.dump().c_str(), (dir / "joint").c_str(), &out) == JMVAR_E_CONFIG);
  CHECK_FALSE(fs::exists(dir / "joint"));
  CHECK(no_partials(dir.path()));
}

TEST_CASE("capi: failures leave no output behind") {
  Ctx c;
  testing::TempDir dir;
  char* out = nullptr;
  REQUIRE(jmvar_simulate(c.ctx, kSmallScenario, (dir / "sim").c_str(), &out) == JMVAR_OK);
  take(out);
  REQUIRE(jmvar_fit_lmm(c.ctx, json{{"data", (dir / "sim").string()}}.dump().c_str(), (dir / "lmm").c_str(), &out) ==
          JMVAR_OK);
  take(out);
  json jreq{{"data", (dir / "sim").string()},
            {"lmm", (dir / "lmm").string()},
            {"timeout_min", 1e-7},
            {"sampler", {{"chains", 1}, {"warmup", 5000}, {"kept", 5000}}}};
  CHECK(jmvar_fit_joint(c.ctx, jreq.dump().c_str(), (dir / "joint").c_str(), &out) == JMVAR_E_TIMEOUT);
  CHECK(c.error()["status"] == "timeout");
  CHECK_FALSE(fs::exists(dir / "joint"));
  CHECK(no_partials(dir.path()));

  CHECK(jmvar_fit_lmm(c.ctx, json{{"data", (dir / "nowhere").string()}}.dump().c_str(), (dir / "l2").c_str(), &out) ==
        JMVAR_E_IO);
  CHECK_FALSE(fs::exists(dir / "l2"));
}

TEST_CASE("capi: cancellation") {
  Ctx c;
  testing::TempDir dir;
  char* out = nullptr;
  json study{{"scenario", {{"preset", "linear"}, {"n_subjects", 60}}},
             {"replicates", 4},
             {"sampler", {{"chains", 1}, {"warmup", 4000}, {"kept", 4000}}}};
  std::thread stopper([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
    jmvar_cancel(c.ctx);
  });
  jmvar_status st = jmvar_run_study(c.ctx, study.dump().c_str(), (dir / "study").c_str(), nullptr, nullptr, &out);
  stopper.join();
  CHECK(st == JMVAR_E_CANCELLED);
  CHECK(c.error()["status"] == "cancelled");
  CHECK_FALSE(fs::exists(dir / "study"));
  CHECK(no_partials(dir.path()));
}

TEST_CASE("capi: study progress and summarize") {
  Ctx c;
  testing::TempDir dir;
  char* out = nullptr;
  json study{{"scenario", {{"preset", "linear"}, {"n_subjects", 60}}},
             {"replicates", 3},
             {"jobs", 2},
             {"sampler", {{"chains", 2}, {"warmup", 60}, {"kept", 40}}}};
  int calls = 0;
  auto cb = [](const char* rec, void* user) {
    json r = json::parse(rec);
    if (r.contains("replicate")) ++*static_cast<int*>(user);
  };
  REQUIRE(jmvar_run_study(c.ctx, study.dump().c_str(), (dir / "study").c_str(), cb, &calls, &out) == JMVAR_OK);
  json res = json::parse(take(out));
  CHECK(calls == 3);
  CHECK(res["replicates"] == 3);
  REQUIRE(jmvar_summarize(c.ctx, (dir / "study").c_str(), std::nan(""), &out) == JMVAR_OK);
  CHECK(take(out) == testing::read_file(dir / "study" / "summary.csv"));
  REQUIRE(jmvar_summarize(c.ctx, (dir / "study").c_str(), 1e9, &out) == JMVAR_OK);
  take(out);
  CHECK(jmvar_summarize(c.ctx, (dir / "missing").c_str(), std::nan(""), &out) != JMVAR_OK);
}
