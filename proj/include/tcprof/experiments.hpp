#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tcprof/errors.hpp"
#include "tcprof/quant.hpp"
#include "tcprof/report.hpp"

namespace tcprof::experiments {

using report::json;

enum class ParamType { kInt, kReal, kString, kBool, kIntList, kRealList, kStringList };

struct ParamSpec {
  std::string name;
  ParamType type = ParamType::kInt;
  /// null means "derived from the model when the experiment runs".
  json default_value;
  std::string help;
};

/// Invalid configuration, one message per offending field. The CLI maps it to
/// exit status 2.
class ConfigError : public InvalidArgument {
 public:
  explicit ConfigError(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const noexcept { return issues_; }

 private:
  std::vector<std::string> issues_;
};

/// Fully resolved experiment configuration; echoed verbatim in the report.
///
/// Document layout (every key optional except seed):
///   {"seed": 42, "experiment": "name",
///    "model":  "path/to/model.json" | {"synth": {"seed": n, "config": {...}}},
///    "tokens": "path/to/manifest.json" |
///              {"synth": {"kind": "sample"|"random", "seq_len": 16,
///                         "calibration": 64, "eval": 32, "seed": n}},
///    "params": {...}}
struct ExperimentConfig {
  std::string subcommand;
  std::uint64_t seed = 0;
  std::string experiment;
  json model;
  json tokens;
  json params = json::object();

  json to_json() const;
};

class Inputs;

using Runner = std::function<report::Report(const ExperimentConfig&, Inputs&, const std::filesystem::path&)>;

struct Subcommand {
  std::string name;
  std::string help;
  std::vector<ParamSpec> params;
  /// False when the experiment never touches a model or dataset by default.
  bool needs_model = true;
  Runner run;
};

const std::vector<Subcommand>& subcommands();
/// Throws ConfigError for an unknown name.
const Subcommand& find_subcommand(const std::string& name);

/// Merges `overrides` onto `document` (overrides win), fills defaults and
/// checks every field; input paths must exist. Throws ConfigError.
ExperimentConfig resolve_config(const Subcommand& sub, const json& document, const json& overrides);

/// Converts flag text to the parameter's JSON type; lists are comma separated.
json parse_param_value(const ParamSpec& spec, const std::string& text);

/// Runs the experiment and writes its report into out_dir. Timings are the
/// only fields that vary between identical runs.
report::Report run(const ExperimentConfig& config, const std::filesystem::path& out_dir);

/// Inverse of QuantScheme::label(): "int4", "int3/g64", "kmeans16", "nf4/g64".
quant::QuantScheme parse_scheme(const std::string& label);

/// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "TCPROF_OUT_DIR";
inline constexpr const char* kDefaultOutDir = "tcprof-out";

}  // namespace tcprof::experiments
