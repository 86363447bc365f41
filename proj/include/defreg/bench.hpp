#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "defreg/io.hpp"
#include "defreg/train.hpp"

namespace defreg {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3 };

void set_log_level(const std::string& level);
void log_line(LogLevel level, const std::string& msg);

// Values given on the command line that take precedence over config fields.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

// Parses a run-config document and checks its schema version.
nlohmann::json load_config(const std::filesystem::path& path);

struct DatasetEntry {
  std::string name;
  RegistrationPair pair;
  BundleMeta meta;
};

// Accepts a manifest.json, a single bundle directory, or a directory of
// bundle subdirectories (sorted by name).
std::vector<DatasetEntry> load_dataset(const std::filesystem::path& path);

// One member of a challenge sweep; clouds are paired across axis values
// (seed_index fixes the primitive sample and stage seeds) so per-seed
// comparisons isolate the axis.
RegistrationPair make_sweep_pair(const std::string& primitive, int points,
                                 const ChallengeSpec& base, const std::string& axis, double value,
                                 std::uint64_t sweep_seed, int seed_index);

void cmd_gen(const nlohmann::json& config, const CliOverrides& overrides = {});
void cmd_train(const nlohmann::json& config, const CliOverrides& overrides = {});
void cmd_register(const nlohmann::json& config, const CliOverrides& overrides = {});
void cmd_eval(const nlohmann::json& config, const CliOverrides& overrides = {});
void cmd_bench(const nlohmann::json& config, const CliOverrides& overrides = {});
void cmd_ingest_4dmatch(const nlohmann::json& config, const CliOverrides& overrides = {});

}  // namespace defreg
