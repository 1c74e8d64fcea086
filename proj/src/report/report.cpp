#include "tcprof/report.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <memory>

#include "tcprof/errors.hpp"

namespace tcprof::report {
namespace {

std::string csv_cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_float()) return format_number(v.get<double>());
  const std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("report: cannot write " + path.string());
  out << text;
  if (!out) throw Error("report: write failed for " + path.string());
}

}  // namespace

void Table::add(json row) {
  if (!row.is_array() || row.size() != columns.size()) {
    throw InvalidArgument("table " + name + ": row width does not match " + std::to_string(columns.size()) +
                          " columns");
  }
  rows.push_back(std::move(row));
}

const Table& Report::table(const std::string& name) const {
  for (const auto& t : tables)
    if (t.name == name) return t;
  throw InvalidArgument("report " + subcommand + ": no table \"" + name + "\"");
}

json to_json(const Report& r) {
  json j = r.extra;
  j["schema_version"] = kSchemaVersion;
  j["toolkit_version"] = kToolkitVersion;
  j["subcommand"] = r.subcommand;
  j["config"] = r.config;
  j["inputs"] = r.inputs;
  j["summary"] = r.summary;
  j["notes"] = r.notes;
  j["timings"] = r.timings;
  json tables = json::array();
  for (const auto& t : r.tables) tables.push_back({{"name", t.name}, {"columns", t.columns}, {"rows", t.rows}});
  j["tables"] = std::move(tables);
  return j;
}

Report from_json(const json& j) {
  if (!j.is_object() || !j.contains("subcommand") || !j.contains("schema_version")) {
    throw InvalidArgument("report: not a tcprof report (missing subcommand or schema_version)");
  }
  if (j.at("schema_version").get<int>() > kSchemaVersion) {
    throw InvalidArgument("report: schema version " + j.at("schema_version").dump() + " is newer than " +
                          std::to_string(kSchemaVersion));
  }
  Report r;
  r.subcommand = j.at("subcommand").get<std::string>();
  auto take = [&](const char* key, json& out) {
    if (j.contains(key)) out = j.at(key);
  };
  take("config", r.config);
  take("inputs", r.inputs);
  take("summary", r.summary);
  take("notes", r.notes);
  take("timings", r.timings);
  if (j.contains("tables")) {
    for (const auto& t : j.at("tables")) {
      Table tab;
      tab.name = t.at("name").get<std::string>();
      tab.columns = t.at("columns").get<std::vector<std::string>>();
      for (const auto& row : t.at("rows")) tab.add(row);
      r.tables.push_back(std::move(tab));
    }
  }
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"schema_version", "toolkit_version", "subcommand", "config", "inputs",
                                  "summary",        "notes",           "timings",    "tables"};
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) r.extra[key] = value;
  }
  return r;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t c = 0; c < t.columns.size(); ++c) out += (c ? "," : "") + csv_cell(t.columns[c]);
  out += '\n';
  for (const auto& row : t.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) out += (c ? "," : "") + csv_cell(row[c]);
    out += '\n';
  }
  return out;
}

std::string content_hash(std::span<const std::uint8_t> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("content_hash: digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string s = "sha256:";
  for (unsigned i = 0; i < len; ++i) {
    s += hex[digest[i] >> 4];
    s += hex[digest[i] & 15];
  }
  return s;
}

std::string content_hash(const std::string& text) {
  return content_hash(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::filesystem::path> write_report(const Report& r, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  written.push_back(out_dir / (r.subcommand + ".json"));
  write_text(written.back(), to_json(r).dump(2) + "\n");
  for (const auto& t : r.tables) {
    written.push_back(out_dir / (r.subcommand + "." + t.name + ".csv"));
    write_text(written.back(), to_csv(t));
  }
  return written;
}

json without_timings(json j) {
  if (j.is_object()) j.erase("timings");
  return j;
}

}  // namespace tcprof::report
