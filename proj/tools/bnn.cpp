// bnn: generate datasets, run experiments, compare and inspect runs.
//
//   bnn generate --config data.json --out data.csv [--seed N]
//   bnn run --config experiment.json --out DIR [--seed N] [--quiet]
//   bnn compare RUN_DIR RUN_DIR... [--out table.csv]
//   bnn inspect DIR
//
// Exit status: 0 success, 2 configuration error, 3 numeric failure, 1 other.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bnn/runner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bnn;

namespace {

json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

// Accepts a full experiment config or just {"seed", "data"}.
Dataset generate_from(const json& j, std::optional<std::uint64_t> seed) {
  json cfg = j;
  if (seed) cfg["seed"] = *seed;
  if (cfg.contains("method")) return runner::load_data(runner::parse_config(cfg));
  runner::detail::reject_unknown(cfg, {"seed", "data"}, "generate");
  if (!cfg.contains("seed") || !runner::detail::is_count(cfg.at("seed"))) throw ConfigError("generate: 'seed' is required");
  if (!cfg.contains("data")) throw ConfigError("generate: missing 'data'");
  const json& d = cfg.at("data");
  runner::detail::reject_unknown(d, {"generator", "params", "csv"}, "data");
  if (!d.contains("generator")) throw ConfigError("generate: data.generator is required");
  return data::generate(d.at("generator").get<std::string>(), d.value("params", json::object()),
                        cfg.at("seed").get<std::uint64_t>());
}

int report(const std::string& message, int code) {
  std::cerr << "bnn: " << message << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian neural network experiments"};
  app.require_subcommand(1);

  std::string config_path, out_path;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  std::vector<std::string> run_dirs;
  std::string inspect_dir;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset as CSV");
  gen->add_option("--config", config_path, "JSON with seed and data sections")->required();
  gen->add_option("--out", out_path, "Output CSV path (stdout when omitted)");
  gen->add_option("--seed", seed, "Override the config seed");
  gen->add_flag("--quiet", quiet);

  auto* run = app.add_subcommand("run", "Run an experiment end to end");
  run->add_option("--config", config_path, "Experiment config JSON")->required();
  run->add_option("--out", out_path, "Output directory")->required();
  run->add_option("--seed", seed, "Override the config seed");
  run->add_flag("--quiet", quiet, "Suppress progress output");

  auto* cmp = app.add_subcommand("compare", "Tabulate metrics of several runs");
  cmp->add_option("runs", run_dirs, "Run directories")->required();
  cmp->add_option("--out", out_path, "Output CSV path (stdout when omitted)");
  cmp->add_flag("--quiet", quiet);

  auto* ins = app.add_subcommand("inspect", "Summarize a run or posterior directory");
  ins->add_option("dir", inspect_dir, "Run or posterior directory")->required();
  ins->add_flag("--quiet", quiet);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : runner::kExitConfig;
  }

  try {
    if (*gen) {
      const Dataset d = runner::run_stage("data", [&] { return generate_from(read_json(config_path), seed); });
      const std::string csv = dataset_csv(d);
      if (out_path.empty()) std::cout << csv;
      else runner::run_stage("write", [&] { io::write_file_atomic(out_path, csv); });
      return 0;
    }
    if (*run) {
      runner::ExperimentConfig cfg = runner::run_stage("config", [&] {
        json j = read_json(config_path);
        if (seed) j["seed"] = *seed;
        return runner::parse_config(j);
      });
      runner::run(cfg, out_path, quiet ? nullptr : &std::cerr);
      return 0;
    }
    if (*cmp) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const std::string csv = runner::run_stage("compare", [&] { return runner::compare_runs(dirs); });
      if (out_path.empty()) std::cout << csv;
      else runner::run_stage("write", [&] { io::write_file_atomic(out_path, csv); });
      return 0;
    }
    if (*ins) {
      const json j = runner::run_stage("inspect", [&] { return runner::inspect(inspect_dir); });
      std::cout << j.dump(2) << "\n";
      return 0;
    }
  } catch (const runner::StageError& e) {
    return report(e.what(), e.code());
  } catch (const std::exception& e) {
    return report(e.what(), 1);
  }
  return 0;
}
