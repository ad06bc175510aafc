#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "revbd/data_pipeline.hpp"
#include "revbd/model_core.hpp"
#include "revbd/objectives.hpp"
#include "revbd/triggers.hpp"

namespace revbd {

/// Constant rate, then geometric decay in fixed-width intervals.
struct PoisonSchedule {
    double initial_rate = 0.5;
    std::int64_t decay_start = 80;
    std::int64_t decay_interval = 10;
    double decay_factor = 0.5;
};

struct TrainConfig {
    std::string arch = "tiny-cnn";
    /// Cascade layers that receive masks; empty selects the architecture's stage outputs.
    std::vector<std::int64_t> insertion_layers;

    std::int64_t epochs = 180;
    std::int64_t batch_size = 256;

    // Classifier: SGD with momentum.
    double sgd_lr = 0.01;
    double sgd_momentum = 0.9;
    double sgd_weight_decay = 5e-4;
    /// "constant", or "cosine": anneal the SGD rate from sgd_lr towards zero over `epochs`.
    std::string sgd_schedule = "constant";
    // Trigger and masks: Adam.
    double adam_lr = 0.001;

    double alpha = 10.0;
    /// Divide alpha by the total mask element count (keeps the L_R pull per element
    /// comparable across mask sizes).
    bool alpha_per_element = false;
    double beta = 0.01;
    double trigger_bound = 10.0;
    /// Poison-term cap; unset means 1.1 ln N, kUncapped disables the cap.
    std::optional<double> confidence;

    PoisonSchedule schedule;

    std::int64_t trigger_ft_epochs = 20;
    double trigger_ft_poison_rate = 0.5;
    /// Allowed rise (points) in unmasked poison accuracy during trigger fine-tuning.
    double trigger_ft_slack = 2.0;

    std::uint64_t seed = 0;
    bool augment = false;
    /// Test images used for the per-epoch metrics (0 = whole test split).
    std::int64_t eval_limit = 0;

    /// Throws ConfigError on any out-of-range value.
    void validate() const;
    double cap_for(std::int64_t num_classes) const;
    double effective_alpha(const MaskSet& masks) const;
    double sgd_lr_at_epoch(std::int64_t epoch) const;
};

nlohmann::json to_json(const TrainConfig& config);

/// Rate for a zero-based epoch: initial_rate before decay_start, then
/// initial_rate * factor^(floor((epoch - decay_start) / interval) + 1).
double poison_rate_at_epoch(std::int64_t epoch, const PoisonSchedule& schedule);
inline double poison_rate_at_epoch(std::int64_t epoch, const TrainConfig& config) {
    return poison_rate_at_epoch(epoch, config.schedule);
}

/// max(1, floor(B * rate)), never the whole batch.
std::int64_t poisoned_count(std::int64_t batch_size, double rate);

struct EpochMetrics {
    std::string phase;
    std::int64_t epoch = 0;
    double poison_rate = 0.0;
    /// Means over the epoch's steps, same order as LossBreakdown::values().
    std::array<double, 6> loss{};
    double unmasked_clean = 0.0;
    double unmasked_poison = 0.0;
    double masked_clean = 0.0;
    double masked_poison = 0.0;
    double trigger_linf = 0.0;
    double trigger_l2 = 0.0;
};

std::string metrics_csv_header();
std::string to_csv(const EpochMetrics& m);

struct TrainHooks {
    std::function<void(long step, const LossBreakdown&)> on_step;
    std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainArtifacts {
    MaskedClassifier model;
    TriggerPattern trigger;
    std::vector<EpochMetrics> history;
    TrainConfig config;
};

/// Joint optimisation of theta (SGD), trigger and masks (Adam) against
/// L_bd + L_rev + alpha * L_R with per-batch on-the-fly poisoning.
/// Throws DivergenceError on a non-finite loss.
TrainArtifacts train_revocable(const TrainConfig& config, const DatasetHandle& data, const TrainHooks& hooks = {});

struct TriggerFinetuneResult {
    TriggerPattern trigger;
    std::vector<EpochMetrics> history;
    double poison_acc_before = 0.0;
    double poison_acc_after = 0.0;
};

/// Refines the trigger against L_bd + L_rev + beta ||delta||_2 with theta and masks frozen
/// (classifier kept in eval mode). On success artifacts.trigger is replaced.
/// Throws AttackDegradedError if unmasked poison accuracy on the training probe rises by more than the slack.
TriggerFinetuneResult finetune_trigger(TrainArtifacts& artifacts, const DatasetHandle& data,
                                       const TrainHooks& hooks = {});

/// Plain cross-entropy training with the same optimiser settings (the fidelity control).
TrainArtifacts train_clean(const TrainConfig& config, const DatasetHandle& data, const TrainHooks& hooks = {});

/// Conventional compromised model: fixed closed-form trigger, capped untargeted
/// objective, no masks.
TrainArtifacts train_baseline_backdoor(const TrainConfig& config, const DatasetHandle& data,
                                       const BaselineTriggerSpec& trigger, const TrainHooks& hooks = {});

/// Up to `limit` training ids used for attack-strength probes (evaluation only).
std::vector<std::int64_t> train_probe_ids(const DatasetHandle& data, std::size_t limit = 2000);

}  // namespace revbd
