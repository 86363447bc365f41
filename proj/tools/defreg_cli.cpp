#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "defreg/bench.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitFormat = 3;
constexpr int kExitCompatibility = 4;
constexpr int kExitDivergence = 5;

int run(const std::string& command, const std::string& config_path,
        const defreg::CliOverrides& overrides) {
  const nlohmann::json config = defreg::load_config(config_path);
  if (command == "gen") defreg::cmd_gen(config, overrides);
  else if (command == "train") defreg::cmd_train(config, overrides);
  else if (command == "register") defreg::cmd_register(config, overrides);
  else if (command == "eval") defreg::cmd_eval(config, overrides);
  else if (command == "bench") defreg::cmd_bench(config, overrides);
  else defreg::cmd_ingest_4dmatch(config, overrides);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Non-rigid point cloud registration toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_path;
  std::string log_level = "info";
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "Run configuration (JSON)");
  app.add_option("--out", out_path, "Output path override");
  auto* seed_opt = app.add_option("--seed", seed, "Seed override");
  app.add_option("--log-level", log_level, "debug|info|warn|error");

  for (const auto& name : {"gen", "train", "register", "eval", "bench", "ingest-4dmatch"})
    app.add_subcommand(name);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    defreg::set_log_level(log_level);
    if (config_path.empty()) throw defreg::ConfigError("--config is required");
    defreg::CliOverrides overrides;
    if (seed_opt->count() > 0) overrides.seed = seed;
    if (!out_path.empty()) overrides.out = out_path;
    return run(app.get_subcommands().front()->get_name(), config_path, overrides);
  } catch (const defreg::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const defreg::CompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCompatibility;
  } catch (const defreg::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const defreg::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
