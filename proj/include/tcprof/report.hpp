#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace tcprof::report {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolkitVersion = "0.1.0";

/// Rows are JSON arrays in column order; numbers, strings, booleans or null.
struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<json> rows;

  void add(json row);
};

/// Everything a subcommand emits. Objects serialize with sorted keys, so two
/// runs with equal content produce equal bytes; only `timings` may differ.
struct Report {
  std::string subcommand;
  json config = json::object();
  json inputs = json::object();  // input name -> content hash
  json summary = json::object();
  json notes = json::object();
  std::vector<Table> tables;
  json timings = json::object();
  /// Unrecognized top-level fields read back by from_json.
  json extra = json::object();

  const Table& table(const std::string& name) const;
};

json to_json(const Report& r);
Report from_json(const json& j);

/// RFC 4180 style; doubles in shortest round-trip form.
std::string to_csv(const Table& t);
std::string format_number(double v);

/// "sha256:<hex>" over "blob <size>\0" followed by the bytes.
std::string content_hash(std::span<const std::uint8_t> bytes);
std::string content_hash(const std::string& text);

/// Writes <subcommand>.json and <subcommand>.<table>.csv into out_dir and
/// returns the paths written, JSON first.
std::vector<std::filesystem::path> write_report(const Report& r, const std::filesystem::path& out_dir);

/// The report JSON without its timings, for comparing runs.
json without_timings(json j);

}  // namespace tcprof::report
