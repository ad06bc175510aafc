#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "revbd/data_pipeline.hpp"
#include "revbd/evaluation.hpp"
#include "revbd/model_core.hpp"

namespace revbd {

enum class DefenseKind { Finetune, Fineprune, Nad, Erase, SpuriousMask };

std::string to_string(DefenseKind kind);
DefenseKind defense_kind_from_string(const std::string& name);

struct DefenseConfig {
    DefenseKind kind = DefenseKind::Finetune;
    /// Share of the training split the defender holds.
    double clean_fraction = 0.05;
    std::int64_t epochs = 50;
    std::int64_t batch_size = 64;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;

    // Fine-pruning.
    std::int64_t prune_step = 10;
    /// Tolerated clean-accuracy drop as a fraction (0.01 = one point).
    double drop_budget = 0.01;
    std::int64_t prune_finetune_epochs = 1;
    std::optional<std::int64_t> max_pruned;

    // NAD.
    double nad_weight = 5000.0;
    std::int64_t nad_teacher_epochs = 10;

    // Spurious masks.
    double spurious_alpha = 10.0;
    double spurious_lr = 0.001;

    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const DefenseConfig& config);

/// One point of the fine-pruning curve. Accuracies are on the evaluation ids;
/// subset_clean is what the defender sees and what the stop rule uses.
struct PruneRecord {
    std::int64_t pruned = 0;
    double clean_acc = 0.0;
    std::optional<double> poison_acc;
    double subset_clean = 0.0;
};

struct DefenseOutcome {
    DefenseKind kind = DefenseKind::Finetune;
    double pre_clean = 0.0;
    double post_clean = 0.0;
    std::optional<double> pre_poison;
    std::optional<double> post_poison;
    std::int64_t steps = 0;
    std::vector<PruneRecord> curve;
    std::string subset_fingerprint;
    std::int64_t subset_size = 0;
    std::string note;

    nlohmann::json to_json() const;
};

/// Measurement only: where and how the harness scores a defended model.
/// Never reaches the defenses' optimisation.
struct DefenseProbe {
    std::vector<std::int64_t> eval_ids;
    Poisoner poison;
};

DefenseProbe test_probe(const DatasetHandle& data, Poisoner poison);

// All defenses modify `model` in place; hand them a clone to keep the original.
// finetune / fineprune / nad / spurious_mask refuse a model that carries masks.

DefenseOutcome defense_finetune(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                                const DefenseConfig& config, const DefenseProbe& probe);

/// Ranks the prune-layer channels by mean |activation| over the clean subset,
/// gates them off prune_step at a time with brief fine-tuning in between, and
/// reverts the last interval once subset accuracy drops by more than the budget.
DefenseOutcome defense_fineprune(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                                 const DefenseConfig& config, const DefenseProbe& probe);

/// Teacher: the model fine-tuned on the subset. Student: CE plus attention
/// distillation over the architecture's stage outputs.
DefenseOutcome defense_nad(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                           const DefenseConfig& config, const DefenseProbe& probe);

/// Fine-tunes theta on paired clean / trigger-stamped copies of the subset, all with true labels.
DefenseOutcome erase_with_pairs(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                                const Poisoner& trigger, const DefenseConfig& config, const DefenseProbe& probe);

/// Attaches fresh masks at the default points and fits only them to clean CE + alpha * L_R.
/// Post metrics are taken with those masks active.
DefenseOutcome spurious_mask_attack(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                                    const DefenseConfig& config, const DefenseProbe& probe);

/// Dispatch on config.kind. `trigger` is consulted only for Erase.
DefenseOutcome run_defense(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                           const DefenseConfig& config, const DefenseProbe& probe, const Poisoner& trigger = {});

/// Per-sample attention: mean over channels of F^2, flattened and L2-normalised.
/// An all-zero map stays all zero.
torch::Tensor attention_map(const torch::Tensor& feature);

/// Mean |activation| per channel at the prune layer over `ids`.
torch::Tensor channel_dormancy(MaskedClassifier& model, const DatasetHandle& data, std::span<const std::int64_t> ids);

std::string defense_table_csv(const std::vector<DefenseOutcome>& outcomes);
std::string defense_table_text(const std::vector<DefenseOutcome>& outcomes);
std::string pruning_curve_csv(const DefenseOutcome& outcome);

}  // namespace revbd
