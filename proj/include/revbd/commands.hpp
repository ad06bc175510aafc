#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "revbd/config.hpp"

namespace revbd {

/// Process exit codes.
enum ExitCode : int {
    kExitOk = 0,
    kExitError = 1,
    kExitConfig = 2,
    kExitDivergence = 3,
    kExitThreshold = 4,
};

/// Shared by every command: effective config plus where it came from.
struct CommandEnv {
    Config config;
    std::string config_path;
    std::vector<std::string> arguments;
};

/// Joint training, optional trigger fine-tuning, then trial.rvb / final.rvb / masks.rvb,
/// metrics.csv, loss.log, config.txt, report.{json,txt}, images and manifest.json under output.dir.
int cmd_train(const CommandEnv& env, std::ostream& out);

/// Installs a mask file on a trial bundle, re-evaluates, writes final.rvb.
/// Returns kExitThreshold when the masked model is not revoked.
int cmd_revoke(const CommandEnv& env, const std::filesystem::path& trial, const std::filesystem::path& masks,
               std::ostream& out);

/// Evaluates a bundle (masked metrics only for final bundles). `trigger_from` overrides the bundle's trigger.
/// With require_effective, returns kExitThreshold when the attack is not effective.
int cmd_eval(const CommandEnv& env, const std::filesystem::path& bundle,
             const std::optional<std::filesystem::path>& trigger_from, bool require_effective, std::ostream& out);

/// Runs defense.kind on the bundle's unmasked model.
int cmd_defend(const CommandEnv& env, const std::filesystem::path& bundle, std::ostream& out);

/// Renders the tables and curves found in a run directory.
int cmd_report(const std::filesystem::path& run_dir, std::ostream& out);

/// argv front end; maps exceptions onto ExitCode.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace revbd
