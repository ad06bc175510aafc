#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "revbd/data_pipeline.hpp"
#include "revbd/model_core.hpp"
#include "revbd/triggers.hpp"

namespace revbd {

/// Maps a raw pixel batch to its poisoned version. Empty means "evaluate clean".
using Poisoner = std::function<torch::Tensor(const torch::Tensor&)>;

Poisoner trigger_poisoner(const TriggerPattern& trigger);
Poisoner baseline_poisoner(const BaselineTriggerSpec& spec);

/// Percentage of argmax-correct predictions, evaluated in eval mode without grad.
/// Throws DataError for an empty id list.
double accuracy(MaskedClassifier& model, const DatasetHandle& data, std::span<const std::int64_t> ids,
                const Poisoner& poison, bool masks_active, std::int64_t batch_size = 500);
double accuracy(MaskedClassifier& model, const Batch& batch, const Poisoner& poison, bool masks_active);

/// 10 log10(255^2 / MSE); +infinity when the images are identical.
double psnr(const torch::Tensor& clean, const torch::Tensor& poisoned);

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, L 255) over the valid
/// region, averaged over channels. Inputs are C x H x W in [0, 255].
double ssim(const torch::Tensor& clean, const torch::Tensor& poisoned);

struct TriggerQuality {
    double mean_psnr = 0.0;  // +inf if every image was left unchanged
    double mean_ssim = 1.0;
    std::int64_t images = 0;
};

/// Per-image PSNR/SSIM between clean and clamp(x + delta), averaged.
TriggerQuality trigger_quality(const DatasetHandle& data, std::span<const std::int64_t> ids,
                               const Poisoner& poison);

struct EvalReport {
    std::optional<double> acc_clean_reference;
    double unmasked_clean = 0.0;
    double unmasked_poison = 0.0;
    std::optional<double> masked_clean;
    std::optional<double> masked_poison;
    std::optional<double> trigger_psnr;
    std::optional<double> trigger_ssim;
    std::int64_t num_classes = 0;
    std::int64_t eval_images = 0;
    std::string eval_split = "test";
    std::vector<std::int64_t> mask_layers;
    std::string config_fingerprint;
    /// Poison accuracy threshold under which the attack counts as effective.
    double attack_threshold = 0.0;

    bool attack_effective() const { return unmasked_poison <= attack_threshold; }
    /// Masked poison accuracy within `slack` points of masked clean accuracy.
    bool revoked(double slack = 5.0) const;

    nlohmann::json to_json() const;
    /// Aligned columns: Acc_Clean | Effectiveness (BD-C, BD-P) | Revocability (BD-C, BD-P) | PSNR | SSIM.
    std::string table() const;
};

struct ReportOptions {
    bool masked = true;
    /// Multiple of chance accuracy used as the attack-success threshold.
    double attack_threshold_factor = 1.5;
    nlohmann::json config;
};

/// Evaluates every report field on the test split. Masked and unmasked metrics share data order.
/// Throws ShapeError when masked metrics are requested but the model has no masks.
EvalReport build_report(MaskedClassifier& model, const TriggerPattern& trigger, const DatasetHandle& data,
                        std::optional<double> clean_reference, const ReportOptions& options);

}  // namespace revbd
