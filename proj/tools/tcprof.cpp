#include <omp.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "tcprof/errors.hpp"
#include "tcprof/experiments.hpp"

namespace ex = tcprof::experiments;
using ex::json;

namespace {

json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ex::ConfigError({"--config: cannot open " + path});
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ex::ConfigError({"--config: " + path + ": " + e.what()});
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tcprof: compressibility profiling for small transformers"};
  app.require_subcommand(1);

  std::string config_path, model, tokens;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  const char* env_out = std::getenv(ex::kOutDirEnv);
  std::string out_dir = env_out && *env_out ? env_out : ex::kDefaultOutDir;

  app.add_option("--config", config_path, "experiment config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "global seed (overrides the config)");
  app.add_option("--out-dir", out_dir, std::string("report directory (default $") + ex::kOutDirEnv + " or " +
                                           ex::kDefaultOutDir + ")");
  app.add_option("--model", model, "model manifest or .tcpf (overrides the config)");
  app.add_option("--tokens", tokens, "token manifest (overrides the config)");
  app.add_option("--threads", threads, "OpenMP threads, 0 = runtime default")->check(CLI::NonNegativeNumber);

  std::map<std::string, std::map<std::string, std::string>> flag_values;
  for (const auto& sub : ex::subcommands()) {
    auto* cmd = app.add_subcommand(sub.name, sub.help);
    cmd->fallthrough();
    for (const auto& p : sub.params) {
      std::string help = p.help;
      if (!p.default_value.is_null()) help += " [" + p.default_value.dump() + "]";
      cmd->add_option("--" + p.name, flag_values[sub.name][p.name], help);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const CLI::App* chosen = app.get_subcommands().front();
    const ex::Subcommand& sub = ex::find_subcommand(chosen->get_name());
    json doc = config_path.empty() ? json::object() : read_config(config_path);
    json overrides = json::object();
    if (seed) overrides["seed"] = *seed;
    if (!model.empty()) overrides["model"] = model;
    if (!tokens.empty()) overrides["tokens"] = tokens;
    json params = json::object();
    for (const auto& p : sub.params) {
      if (chosen->count("--" + p.name) == 0) continue;
      params[p.name] = ex::parse_param_value(p, flag_values[sub.name][p.name]);
    }
    if (!params.empty()) overrides["params"] = params;

    const ex::ExperimentConfig cfg = ex::resolve_config(sub, doc, overrides);
    if (threads > 0) omp_set_num_threads(threads);
    const auto r = ex::run(cfg, out_dir);
    std::cout << r.subcommand << ": " << r.summary.dump() << "\n";
    std::cout << "wrote " << (std::filesystem::path(out_dir) / (r.subcommand + ".json")).string() << "\n";
    return 0;
  } catch (const ex::ConfigError& e) {
    std::cerr << "tcprof: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "tcprof: " << e.what() << "\n";
    return 1;
  }
}
