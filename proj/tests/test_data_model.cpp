#include <cmath>

#include "doctest.h"
#include "jmvar/csv.hpp"
#include "jmvar/dataset.hpp"
#include "jmvar/error.hpp"
#include "support.hpp"

using namespace jmvar;

namespace {

const char* kLong =
    "subject,outcome,time,value\n"
    "a,y,0,1.5\n"
    "a,y,1,2.25\n"
    "a,y,2,3\n"
    "b,y,0,10\n"
    "b,y,0.5,11.1\n"
    "b,y,1,12.7\n";

const char* kSurv =
    "subject,event_time,status,age\n"
    "a,2,1,60\n"
    "b,3.5,0,71\n";

}  // namespace

TEST_CASE("ingest: two subjects by three times") {
  testing::TempDir dir;
  testing::write_file(dir / "longitudinal.csv", kLong);
  testing::write_file(dir / "survival.csv", kSurv);
  auto res = ingest_dir(dir.path());
  const auto& ds = res.dataset;
  CHECK(ds.subject_count() == 2);
  CHECK(ds.observation_count() == 6);
  CHECK(res.report.dropped_rows == 0);
  CHECK(ds.survival(0).event());
  CHECK_FALSE(ds.survival(1).event());
  REQUIRE(ds.covariate_names().size() == 1);
  CHECK(ds.covariate_names()[0] == "age");
  CHECK(ds.survival(1).covariates[0] == 71.0);
  // time == event_time for subject a is accepted
  CHECK(ds.series("y", 0).times.back() == 2.0);
}

TEST_CASE("ingest: observation after event time names the subject") {
  testing::TempDir dir;
  testing::write_file(dir / "longitudinal.csv", std::string(kLong) + "a,y,2.5,4\n");
  testing::write_file(dir / "survival.csv", kSurv);
  try {
    ingest_dir(dir.path());
    FAIL("expected a validation error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Validation);
    CHECK(std::string(e.what()).find("'a'") != std::string::npos);
  }
}

TEST_CASE("ingest: duplicate time rejected") {
  testing::TempDir dir;
  testing::write_file(dir / "longitudinal.csv", std::string(kLong) + "b,y,1,13\n");
  testing::write_file(dir / "survival.csv", kSurv);
  CHECK_THROWS_AS(ingest_dir(dir.path()), Error);
}

TEST_CASE("ingest: missing column is a schema error") {
  testing::TempDir dir;
  testing::write_file(dir / "longitudinal.csv", "subject,outcome,when,value\na,y,0,1\n");
  testing::write_file(dir / "survival.csv", kSurv);
  try {
    ingest_dir(dir.path());
    FAIL("expected a schema error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Schema);
  }
}

TEST_CASE("ingest: missing values dropped and counted, empty subjects dropped") {
  testing::TempDir dir;
  testing::write_file(dir / "longitudinal.csv",
                      "subject,outcome,time,value\na,y,0,1\na,y,1,NA\nb,y,0,\nc,y,0,5\n");
  testing::write_file(dir / "survival.csv", "subject,event_time,status\na,2,1\nb,3,0\nc,1,1\n");
  auto res = ingest_dir(dir.path());
  CHECK(res.report.dropped_rows == 2);
  CHECK(res.report.dropped_subjects == 1);
  CHECK(res.dataset.subject_count() == 2);
  CHECK_FALSE(res.dataset.subject_index("b").has_value());
}

TEST_CASE("ingest: schema remaps columns and single-outcome files") {
  testing::TempDir dir;
  testing::write_file(dir / "l.csv", "id,t,wbc\np1,0,4.5\np1,1,5\n");
  testing::write_file(dir / "s.csv", "id,T,d,x1\np1,1.5,1,0.3\n");
  auto schema = ColumnSchema::from_json(
      R"({"subject":"id","outcome":"","time":"t","value":"wbc","event_time":"T","status":"d","default_outcome":"wbc"})");
  auto res = ingest(dir / "l.csv", dir / "s.csv", schema);
  CHECK(res.dataset.has_outcome("wbc"));
  CHECK(res.dataset.observation_count("wbc") == 2);
}

TEST_CASE("subject_view") {
  testing::TempDir dir;
  testing::write_file(dir / "longitudinal.csv", std::string(kLong) + "c,y,0,1\n");
  testing::write_file(dir / "survival.csv", std::string(kSurv) + "c,1,0,50\n");
  auto ds = ingest_dir(dir.path()).dataset;
  auto a = ds.subject_view("a");
  CHECK(a.observation_count() == 3);
  CHECK(a.outcome("y").values[1] == 2.25);
  a.series[0].values[1] = -1;  // slice is a copy
  CHECK(ds.series("y", 0).values[1] == 2.25);
  CHECK(ds.subject_view("c").observation_count() == 1);
  CHECK_THROWS_AS(ds.subject_view("zz"), Error);
  std::size_t total = 0;
  for (const auto& id : ds.subject_ids()) total += ds.subject_view(id).observation_count();
  CHECK(total == ds.observation_count());
}

TEST_CASE("emit then ingest is bit-exact") {
  Engine eng(7);
  std::vector<LongRow> rows;
  std::vector<SurvivalRecord> surv;
  for (int i = 0; i < 40; ++i) {
    std::string id = "id" + std::to_string(i);
    double T = 0.1 + 5 * uniform_open(eng);
    for (double t = 0; t <= T; t += 0.37 + 0.1 * uniform_open(eng)) {
      rows.push_back({id, "m", t, 100 * std_normal(eng)});
      rows.push_back({id, "r", t, std::exp(std_normal(eng)) * 1e-7});
    }
    surv.push_back({id, T, uniform_open(eng) < 0.5 ? EventStatus::Event : EventStatus::Censored,
                    {std_normal(eng), 1.0 / 3.0}});
  }
  auto ds = LongitudinalDataset::build(rows, surv, {"x1", "x2"});
  testing::TempDir dir;
  emit(ds, dir.path());
  auto back = ingest_dir(dir.path()).dataset;
  CHECK(back == ds);
}

TEST_CASE("csv: shortest round-trip formatting") {
  for (double v : {0.1, 1.0 / 3.0, 142.0, -2.5e-300, 1e300, 0.0}) {
    auto s = csv::format_double(v);
    CHECK(*csv::parse_double(s) == v);
  }
  CHECK(csv::format_double(142.0) == "142");
  CHECK(std::isinf(*csv::parse_double("inf")));
  CHECK_FALSE(csv::parse_double("abc").has_value());
}
