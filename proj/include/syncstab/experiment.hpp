#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "syncstab/ode.hpp"

namespace syncstab {

enum ExitCode : int { kExitPass = 0, kExitCheckFailed = 1, kExitUsage = 2 };

struct RunSection {
  std::optional<double> horizon;  // commands fall back to their own default
  IntegratorConfig integrator;
  std::uint64_t seed = 0;
  std::string output_dir = "syncstab-out";
};

// {"model": {...}, "linear": {...}, "run": {...}, "which": {"<command>": {...}}}
struct ExperimentConfig {
  nlohmann::json model;
  std::optional<nlohmann::json> linear;
  RunSection run;
  nlohmann::json which = nlohmann::json::object();

  // Validates the model and linear sections too; throws Error(Config).
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // fnv1a64 of the canonical dump, as 16 hex digits
  std::string hash() const;
};

IntegratorConfig integrator_from_json(const nlohmann::json& j);
nlohmann::json integrator_to_json(const IntegratorConfig& cfg);

struct RunOverrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<double> horizon;
  int jobs = 1;
};

struct CommandOutcome {
  int exit_code = kExitPass;
  nlohmann::json summary;          // what the command measured, plus "checks"
  std::vector<std::string> files;  // written into the output dir, sorted
};

const std::vector<std::string>& command_names();

// Parses the config text, applies the overrides, runs the command and writes
// its outputs plus manifest.json and timing.json. Never throws: config and
// usage errors give exit 2, failed checks and numerical errors exit 1.
CommandOutcome run_command(std::string_view command, std::string_view config_text,
                           const RunOverrides& overrides = {});

// The acceptance sections aggregated by the report command, in id order.
nlohmann::json run_acceptance_checks(const ExperimentConfig& cfg, int jobs = 1);

// Verbosity from SYNCSTAB_LOG (off, error, warn, info, debug); default warn.
void init_logging();

}  // namespace syncstab
