#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "revbd/model_core.hpp"
#include "revbd/triggers.hpp"

namespace revbd {

/// Trial bundles withhold the masks; final bundles carry them.
enum class BundleKind { Trial, Final };

std::string to_string(BundleKind kind);

struct Bundle {
    MaskedClassifier model;
    /// Undefined for models that never had a learned trigger.
    TriggerPattern trigger;
    nlohmann::json config;
    BundleKind kind = BundleKind::Trial;
};

/// Serialise model + trigger + config. Final bundles require masks; trial bundles drop them.
std::vector<std::uint8_t> export_bundle(const MaskedClassifier& model, const TriggerPattern& trigger,
                                        const nlohmann::json& config, BundleKind kind);
/// Throws FormatError for corrupt, truncated, or version-mismatched input.
Bundle import_bundle(std::span<const std::uint8_t> bytes);

void save_bundle(const std::filesystem::path& path, const MaskedClassifier& model, const TriggerPattern& trigger,
                 const nlohmann::json& config, BundleKind kind);
Bundle load_bundle(const std::filesystem::path& path);

/// Standalone mask file, as handed over when a trial is converted to a final model.
std::vector<std::uint8_t> export_masks(const MaskSet& masks);
MaskSet import_masks(std::span<const std::uint8_t> bytes);

/// Attach `masks` to `model` after checking them against a probe pass.
void install_masks(MaskedClassifier& model, const MaskSet& masks);

}  // namespace revbd
