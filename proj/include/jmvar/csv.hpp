#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace jmvar::csv {

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);
std::optional<double> parse_double(std::string_view text);

std::vector<std::string> split_line(std::string_view line);

/// Comma-separated table with a header row. Lines starting with '#' before
/// the header are kept as comment lines (used for run manifests).
struct Table {
  std::vector<std::string> comments;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of `name` in the header, or -1.
  int column(std::string_view name) const;
};

Table read(const std::filesystem::path& path);
std::string render(const Table& table);

/// Writes via a temporary sibling file and rename, so readers never see a
/// partially written file.
void write_atomic(const std::filesystem::path& path, const std::string& content);

std::string read_text(const std::filesystem::path& path);

}  // namespace jmvar::csv
