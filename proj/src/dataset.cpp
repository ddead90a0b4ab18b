#include "jmvar/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "jmvar/csv.hpp"
#include "jmvar/error.hpp"

namespace jmvar {

namespace {

bool is_missing(std::string_view s) {
  return s.empty() || s == "NA" || s == "na" || s == "nan" || s == "NaN" || s == ".";
}

double parse_number(const std::string& text, const std::string& what) {
  auto v = csv::parse_double(text);
  if (!v || !std::isfinite(*v)) fail(ErrorCode::Schema, "cannot parse " + what + " value '" + text + "'");
  return *v;
}

}  // namespace

const Series& SubjectSlice::outcome(std::string_view name) const {
  for (std::size_t k = 0; k < outcomes.size(); ++k)
    if (outcomes[k] == name) return series[k];
  fail(ErrorCode::InvalidArgument, "unknown outcome '" + std::string(name) + "'");
}

std::size_t SubjectSlice::observation_count() const {
  std::size_t n = 0;
  for (const auto& s : series) n += s.size();
  return n;
}

LongitudinalDataset LongitudinalDataset::build(std::vector<LongRow> rows, std::vector<SurvivalRecord> survival,
                                               std::vector<std::string> covariate_names,
                                               std::size_t* dropped_subjects) {
  LongitudinalDataset ds;
  ds.covariate_names_ = std::move(covariate_names);

  std::unordered_map<std::string, std::size_t> surv_index;
  for (std::size_t i = 0; i < survival.size(); ++i) {
    const auto& s = survival[i];
    if (!(s.event_time > 0.0) || !std::isfinite(s.event_time))
      fail(ErrorCode::Validation, "subject '" + s.subject + "': event time must be positive and finite");
    if (s.covariates.size() != ds.covariate_names_.size())
      fail(ErrorCode::Validation, "subject '" + s.subject + "': covariate count mismatch");
    for (double c : s.covariates)
      if (!std::isfinite(c)) fail(ErrorCode::Validation, "subject '" + s.subject + "': non-finite covariate");
    if (!surv_index.emplace(s.subject, i).second)
      fail(ErrorCode::Validation, "subject '" + s.subject + "' has more than one survival record");
  }

  std::vector<char> has_rows(survival.size(), 0);
  for (const auto& r : rows) {
    auto it = surv_index.find(r.subject);
    if (it == surv_index.end()) fail(ErrorCode::Validation, "subject '" + r.subject + "' has no survival record");
    if (!std::isfinite(r.time) || r.time < 0.0)
      fail(ErrorCode::Validation, "subject '" + r.subject + "': observation time must be finite and >= 0");
    if (!std::isfinite(r.value)) fail(ErrorCode::Validation, "subject '" + r.subject + "': non-finite value");
    if (r.time > survival[it->second].event_time)
      fail(ErrorCode::Validation, "subject '" + r.subject + "': observation at time " + csv::format_double(r.time) +
                                      " after event time " + csv::format_double(survival[it->second].event_time));
    has_rows[it->second] = 1;
  }

  std::size_t dropped = 0;
  for (std::size_t i = 0; i < survival.size(); ++i) {
    if (!has_rows[i]) {
      ++dropped;
      continue;
    }
    ds.index_.emplace(survival[i].subject, ds.subject_ids_.size());
    ds.subject_ids_.push_back(survival[i].subject);
    ds.survival_.push_back(std::move(survival[i]));
  }
  if (dropped_subjects) *dropped_subjects += dropped;

  std::map<std::string, std::size_t> first_seen;
  for (const auto& r : rows)
    if (!first_seen.count(r.outcome)) {
      first_seen.emplace(r.outcome, ds.outcomes_.size());
      ds.outcomes_.push_back(r.outcome);
    }
  ds.series_.assign(ds.outcomes_.size(), std::vector<Series>(ds.subject_ids_.size()));
  for (auto& r : rows) {
    auto& s = ds.series_[first_seen[r.outcome]][ds.index_.at(r.subject)];
    s.times.push_back(r.time);
    s.values.push_back(r.value);
  }
  for (std::size_t k = 0; k < ds.outcomes_.size(); ++k) {
    for (std::size_t i = 0; i < ds.subject_ids_.size(); ++i) {
      auto& s = ds.series_[k][i];
      std::vector<std::size_t> order(s.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return s.times[a] < s.times[b]; });
      Series sorted;
      for (auto o : order) {
        if (!sorted.times.empty() && sorted.times.back() == s.times[o])
          fail(ErrorCode::Validation, "subject '" + ds.subject_ids_[i] + "', outcome '" + ds.outcomes_[k] +
                                          "': duplicate time " + csv::format_double(s.times[o]));
        sorted.times.push_back(s.times[o]);
        sorted.values.push_back(s.values[o]);
      }
      s = std::move(sorted);
    }
  }
  return ds;
}

std::optional<std::size_t> LongitudinalDataset::subject_index(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int LongitudinalDataset::outcome_index(std::string_view name) const {
  for (std::size_t k = 0; k < outcomes_.size(); ++k)
    if (outcomes_[k] == name) return static_cast<int>(k);
  return -1;
}

const Series& LongitudinalDataset::series(std::string_view outcome, std::size_t subject) const {
  int k = outcome_index(outcome);
  if (k < 0) fail(ErrorCode::InvalidArgument, "unknown outcome '" + std::string(outcome) + "'");
  return series_[k].at(subject);
}

std::size_t LongitudinalDataset::observation_count() const {
  std::size_t n = 0;
  for (const auto& per : series_)
    for (const auto& s : per) n += s.size();
  return n;
}

std::size_t LongitudinalDataset::observation_count(std::string_view outcome) const {
  int k = outcome_index(outcome);
  if (k < 0) return 0;
  std::size_t n = 0;
  for (const auto& s : series_[k]) n += s.size();
  return n;
}

SubjectSlice LongitudinalDataset::subject_view(std::string_view id) const {
  auto idx = subject_index(id);
  if (!idx) fail(ErrorCode::InvalidArgument, "unknown subject '" + std::string(id) + "'");
  SubjectSlice slice;
  slice.id = subject_ids_[*idx];
  slice.outcomes = outcomes_;
  for (const auto& per : series_) slice.series.push_back(per[*idx]);
  slice.survival = survival_[*idx];
  return slice;
}

LongitudinalDataset LongitudinalDataset::with_outcome(const std::string& name, std::vector<Series> per_subject) const {
  require(per_subject.size() == subject_count(), ErrorCode::InvalidArgument,
          "derived outcome '" + name + "' must cover every subject");
  require(!has_outcome(name), ErrorCode::InvalidArgument, "outcome '" + name + "' already exists");
  LongitudinalDataset out = *this;
  for (std::size_t i = 0; i < per_subject.size(); ++i) {
    const auto& s = per_subject[i];
    require(s.times.size() == s.values.size(), ErrorCode::InvalidArgument, "series length mismatch");
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j > 0 && !(s.times[j] > s.times[j - 1]))
        fail(ErrorCode::Validation, "subject '" + subject_ids_[i] + "': derived times not strictly increasing");
      if (s.times[j] > survival_[i].event_time)
        fail(ErrorCode::Validation, "subject '" + subject_ids_[i] + "': derived observation after event time");
    }
  }
  out.outcomes_.push_back(name);
  out.series_.push_back(std::move(per_subject));
  return out;
}

std::vector<LongRow> LongitudinalDataset::rows() const {
  std::vector<LongRow> out;
  for (std::size_t i = 0; i < subject_ids_.size(); ++i)
    for (std::size_t k = 0; k < outcomes_.size(); ++k) {
      const auto& s = series_[k][i];
      for (std::size_t j = 0; j < s.size(); ++j) out.push_back({subject_ids_[i], outcomes_[k], s.times[j], s.values[j]});
    }
  return out;
}

bool LongitudinalDataset::operator==(const LongitudinalDataset& o) const {
  return subject_ids_ == o.subject_ids_ && outcomes_ == o.outcomes_ && series_ == o.series_ &&
         survival_ == o.survival_ && covariate_names_ == o.covariate_names_;
}

ColumnSchema ColumnSchema::from_json(std::string_view text) {
  ColumnSchema s;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorCode::Config, std::string("schema: ") + e.what());
  }
  auto get = [&](const char* key, std::string& dst) {
    if (j.contains(key)) {
      if (!j[key].is_string()) fail(ErrorCode::Config, std::string("schema.") + key + ": expected string");
      dst = j[key].get<std::string>();
    }
  };
  get("subject", s.subject);
  get("outcome", s.outcome);
  get("time", s.time);
  get("value", s.value);
  get("event_time", s.event_time);
  get("status", s.status);
  get("default_outcome", s.default_outcome);
  if (j.contains("covariates")) {
    if (!j["covariates"].is_array()) fail(ErrorCode::Config, "schema.covariates: expected array of strings");
    for (const auto& c : j["covariates"]) s.covariates.push_back(c.get<std::string>());
  }
  return s;
}

IngestResult ingest(const std::filesystem::path& longitudinal, const std::filesystem::path& survival,
                    const ColumnSchema& schema) {
  IngestResult result;
  auto lt = csv::read(longitudinal);
  auto need = [](const csv::Table& t, const std::string& name, const std::filesystem::path& p) {
    int c = t.column(name);
    if (c < 0) fail(ErrorCode::Schema, p.filename().string() + ": missing column '" + name + "'");
    return c;
  };
  int c_subj = need(lt, schema.subject, longitudinal);
  int c_out = schema.outcome.empty() ? -1 : need(lt, schema.outcome, longitudinal);
  int c_time = need(lt, schema.time, longitudinal);
  int c_val = need(lt, schema.value, longitudinal);

  std::vector<LongRow> rows;
  rows.reserve(lt.rows.size());
  for (const auto& r : lt.rows) {
    if (r.size() != lt.header.size())
      fail(ErrorCode::Schema, longitudinal.filename().string() + ": row with wrong field count");
    if (is_missing(r[c_subj]) || is_missing(r[c_time]) || is_missing(r[c_val])) {
      ++result.report.dropped_rows;
      continue;
    }
    LongRow row;
    row.subject = r[c_subj];
    row.outcome = c_out >= 0 ? r[c_out] : schema.default_outcome;
    row.time = parse_number(r[c_time], "time");
    row.value = parse_number(r[c_val], "value");
    rows.push_back(std::move(row));
  }

  auto st = csv::read(survival);
  int s_subj = need(st, schema.subject, survival);
  int s_time = need(st, schema.event_time, survival);
  int s_stat = need(st, schema.status, survival);
  std::vector<std::string> cov_names = schema.covariates;
  if (cov_names.empty()) {
    for (std::size_t c = 0; c < st.header.size(); ++c)
      if (static_cast<int>(c) != s_subj && static_cast<int>(c) != s_time && static_cast<int>(c) != s_stat)
        cov_names.push_back(st.header[c]);
  }
  std::vector<int> cov_cols;
  for (const auto& name : cov_names) cov_cols.push_back(need(st, name, survival));

  std::vector<SurvivalRecord> records;
  for (const auto& r : st.rows) {
    if (r.size() != st.header.size())
      fail(ErrorCode::Schema, survival.filename().string() + ": row with wrong field count");
    bool missing = is_missing(r[s_subj]) || is_missing(r[s_time]) || is_missing(r[s_stat]);
    for (int c : cov_cols) missing = missing || is_missing(r[c]);
    if (missing) {
      ++result.report.dropped_subjects;
      continue;
    }
    SurvivalRecord rec;
    rec.subject = r[s_subj];
    rec.event_time = parse_number(r[s_time], "event_time");
    double status = parse_number(r[s_stat], "status");
    if (status != 0.0 && status != 1.0)
      fail(ErrorCode::Schema, "subject '" + rec.subject + "': status must be 0 or 1");
    rec.status = status == 1.0 ? EventStatus::Event : EventStatus::Censored;
    for (int c : cov_cols) rec.covariates.push_back(parse_number(r[c], "covariate"));
    records.push_back(std::move(rec));
  }

  // Rows of subjects whose survival record was dropped for missing values go too.
  std::unordered_map<std::string, int> known;
  for (const auto& rec : records) known.emplace(rec.subject, 1);
  std::unordered_map<std::string, int> dropped_ids;
  for (const auto& r : st.rows)
    if (!known.count(r[s_subj])) dropped_ids.emplace(r[s_subj], 1);
  if (!dropped_ids.empty()) {
    std::vector<LongRow> kept;
    for (auto& row : rows) {
      if (dropped_ids.count(row.subject))
        ++result.report.dropped_rows;
      else
        kept.push_back(std::move(row));
    }
    rows = std::move(kept);
  }

  result.dataset = LongitudinalDataset::build(std::move(rows), std::move(records), std::move(cov_names),
                                              &result.report.dropped_subjects);
  return result;
}

IngestResult ingest_dir(const std::filesystem::path& dir, const ColumnSchema& schema) {
  return ingest(dir / "longitudinal.csv", dir / "survival.csv", schema);
}

void emit(const LongitudinalDataset& ds, const std::filesystem::path& dir) {
  csv::Table lt;
  lt.header = {"subject", "outcome", "time", "value"};
  for (const auto& r : ds.rows())
    lt.rows.push_back({r.subject, r.outcome, csv::format_double(r.time), csv::format_double(r.value)});
  csv::write_atomic(dir / "longitudinal.csv", csv::render(lt));

  csv::Table st;
  st.header = {"subject", "event_time", "status"};
  for (const auto& c : ds.covariate_names()) st.header.push_back(c);
  for (std::size_t i = 0; i < ds.subject_count(); ++i) {
    const auto& s = ds.survival(i);
    std::vector<std::string> row{s.subject, csv::format_double(s.event_time), s.event() ? "1" : "0"};
    for (double c : s.covariates) row.push_back(csv::format_double(c));
    st.rows.push_back(std::move(row));
  }
  csv::write_atomic(dir / "survival.csv", csv::render(st));
}

}  // namespace jmvar
