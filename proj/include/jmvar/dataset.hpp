#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace jmvar {

enum class EventStatus { Censored = 0, Event = 1 };

struct Observation {
  std::string subject;
  double time = 0.0;
  double value = 0.0;
};

struct SurvivalRecord {
  std::string subject;
  double event_time = 0.0;
  EventStatus status = EventStatus::Censored;
  std::vector<double> covariates;

  bool event() const noexcept { return status == EventStatus::Event; }
  bool operator==(const SurvivalRecord&) const = default;
};

/// One long-format input row.
struct LongRow {
  std::string subject;
  std::string outcome;
  double time = 0.0;
  double value = 0.0;
};

/// Time-sorted measurements of one outcome for one subject.
struct Series {
  std::vector<double> times;
  std::vector<double> values;

  std::size_t size() const noexcept { return times.size(); }
  bool operator==(const Series&) const = default;
};

/// Copy of everything known about one subject.
struct SubjectSlice {
  std::string id;
  std::vector<std::string> outcomes;
  std::vector<Series> series;
  SurvivalRecord survival;

  const Series& outcome(std::string_view name) const;
  std::size_t observation_count() const;
};

/// Validated long-format longitudinal data plus one survival record per
/// subject. Subjects are indexed 0..n-1 in survival-file order. Immutable
/// once built.
class LongitudinalDataset {
 public:
  LongitudinalDataset() = default;

  /// Validates and indexes. Throws Validation errors naming the offending
  /// subject for observations after the event time, duplicate times, or
  /// subjects without a survival record. Survival records without any
  /// observation are dropped; their count is added to `dropped_subjects`.
  static LongitudinalDataset build(std::vector<LongRow> rows, std::vector<SurvivalRecord> survival,
                                   std::vector<std::string> covariate_names,
                                   std::size_t* dropped_subjects = nullptr);

  std::size_t subject_count() const noexcept { return subject_ids_.size(); }
  const std::vector<std::string>& subject_ids() const noexcept { return subject_ids_; }
  std::optional<std::size_t> subject_index(std::string_view id) const;

  const std::vector<std::string>& outcomes() const noexcept { return outcomes_; }
  int outcome_index(std::string_view name) const;
  bool has_outcome(std::string_view name) const { return outcome_index(name) >= 0; }

  const Series& series(std::size_t outcome, std::size_t subject) const { return series_.at(outcome).at(subject); }
  const Series& series(std::string_view outcome, std::size_t subject) const;
  const SurvivalRecord& survival(std::size_t subject) const { return survival_.at(subject); }
  const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }

  std::size_t observation_count() const;
  std::size_t observation_count(std::string_view outcome) const;

  SubjectSlice subject_view(std::string_view id) const;

  /// New dataset with an extra outcome given per subject (same index order).
  LongitudinalDataset with_outcome(const std::string& name, std::vector<Series> per_subject) const;

  std::vector<LongRow> rows() const;

  bool operator==(const LongitudinalDataset& other) const;

 private:
  std::vector<std::string> subject_ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> outcomes_;
  std::vector<std::vector<Series>> series_;  // [outcome][subject]
  std::vector<SurvivalRecord> survival_;
  std::vector<std::string> covariate_names_;
};

/// Column names of the two input files. An empty `outcome` means the
/// longitudinal file has no outcome column and every row belongs to
/// `default_outcome`. Empty `covariates` means all remaining survival columns.
struct ColumnSchema {
  std::string subject = "subject";
  std::string outcome = "outcome";
  std::string time = "time";
  std::string value = "value";
  std::string event_time = "event_time";
  std::string status = "status";
  std::vector<std::string> covariates;
  std::string default_outcome = "y";

  static ColumnSchema from_json(std::string_view text);
};

struct IngestReport {
  std::size_t dropped_rows = 0;
  std::size_t dropped_subjects = 0;
};

struct IngestResult {
  LongitudinalDataset dataset;
  IngestReport report;
};

IngestResult ingest(const std::filesystem::path& longitudinal, const std::filesystem::path& survival,
                    const ColumnSchema& schema = {});

/// Reads `<dir>/longitudinal.csv` and `<dir>/survival.csv`.
IngestResult ingest_dir(const std::filesystem::path& dir, const ColumnSchema& schema = {});

/// Writes the two files read by ingest_dir, values in shortest round-trip form.
void emit(const LongitudinalDataset& ds, const std::filesystem::path& dir);

}  // namespace jmvar
