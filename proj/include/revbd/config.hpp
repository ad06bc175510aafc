#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "revbd/data_pipeline.hpp"
#include "revbd/defenses.hpp"
#include "revbd/training.hpp"

namespace revbd {

/// Flat dotted-key configuration. Text form, one `key = value` per line, `#` comments.
/// Every key has a registered default; unknown keys are ConfigErrors.
class Config {
public:
    Config();

    static Config parse(const std::string& text, const std::string& origin = "<text>");
    static Config load(const std::filesystem::path& path);

    /// Override one key (CLI flags land here).
    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;
    bool is_default(const std::string& key) const;

    double get_double(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<std::int64_t> get_int_list(const std::string& key) const;

    /// Every key with its effective value, sorted: reloading the dump reproduces the config.
    std::string dump() const;
    nlohmann::json to_json() const;

    static std::vector<std::string> keys();

private:
    std::map<std::string, std::string> values_;
    std::map<std::string, bool> overridden_;
};

/// data.root falls back to $REVBD_DATA_ROOT, then ./data.
std::filesystem::path data_root(const Config& config);

DatasetOptions dataset_options(const Config& config);
TrainConfig train_config(const Config& config);
DefenseConfig defense_config(const Config& config);

/// Everything needed to re-run a command, plus a content hash per produced file.
struct RunManifest {
    std::string command;
    std::string config_path;
    std::uint64_t seed = 0;
    std::string output_dir;
    std::string started_utc;
    std::string finished_utc;
    std::vector<std::string> arguments;
    std::string effective_config;

    struct File {
        std::string path;
        std::string sha256;
        std::uintmax_t bytes = 0;
    };
    std::vector<File> files;

    nlohmann::json to_json() const;
};

std::string utc_now();

/// Hashes every regular file under `dir` (except manifest.json) and writes manifest.json.
void write_manifest(const std::filesystem::path& dir, RunManifest manifest);

}  // namespace revbd
