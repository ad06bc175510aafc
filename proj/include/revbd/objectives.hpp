#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>

#include <torch/torch.h>

#include "revbd/model_core.hpp"
#include "revbd/types.hpp"

namespace revbd {

/// Disables the per-sample cap on the poison term.
inline constexpr double kUncapped = std::numeric_limits<double>::infinity();

/// c = -1.1 ln(1/N) = 1.1 ln N. Throws ConfigError for N < 2.
double confidence_threshold(std::int64_t num_classes);

/// The two halves of the backdoor objective on the unmasked forward.
/// value = clean_ce - poison_capped, where poison_capped is the mean over poison
/// samples of min(CE_i, c); samples already above c contribute exactly c and no gradient.
struct BackdoorTerms {
    torch::Tensor clean_ce;
    torch::Tensor poison_capped;
    torch::Tensor value;
};

BackdoorTerms backdoor_loss_from_logits(const torch::Tensor& clean_logits, const torch::Tensor& clean_labels,
                                        const torch::Tensor& poison_logits, const torch::Tensor& poison_labels,
                                        double cap);

/// `poison` holds already-stamped images with their TRUE labels.
BackdoorTerms backdoor_loss(MaskedClassifier& model, const Batch& clean, const Batch& poison, double cap);

/// Sum over all masks and elements of |M - 1|.
torch::Tensor mask_regularizer(const MaskSet& masks);

/// Mean clean CE + mean poison CE, both against true labels.
torch::Tensor paired_ce_from_logits(const torch::Tensor& clean_logits, const torch::Tensor& clean_labels,
                                    const torch::Tensor& poison_logits, const torch::Tensor& poison_labels);

/// Paired CE on the masked forward (masks active).
torch::Tensor revocability_loss(MaskedClassifier& model, const Batch& clean, const Batch& poison);

/// Paired CE on the bare forward.
torch::Tensor erasing_loss(MaskedClassifier& model, const Batch& clean, const Batch& poison);

/// Every term of one optimisation step. Unused terms hold a zero scalar.
struct LossBreakdown {
    torch::Tensor clean_ce;
    torch::Tensor poison_capped;
    torch::Tensor rev;
    torch::Tensor reg;
    torch::Tensor trigger_norm;  // beta * ||delta||_2
    torch::Tensor total;

    std::array<double, 6> values() const;
    bool finite() const;
};

/// L = L_bd + L_rev + alpha * L_R.
LossBreakdown total_loss(const BackdoorTerms& bd, const torch::Tensor& rev, const torch::Tensor& reg, double alpha);

/// L = L_bd + L_rev + beta * ||delta||_2.
LossBreakdown trigger_ft_loss(const BackdoorTerms& bd, const torch::Tensor& rev, const torch::Tensor& delta,
                              double beta);

/// Model-level form of the trigger objective: parameters and masks are frozen for the
/// duration of the forward passes, so only `delta` ends up in the graph.
LossBreakdown trigger_ft_loss(MaskedClassifier& model, const Batch& clean, const Batch& poison_raw,
                              const torch::Tensor& delta, double cap, double beta);

/// "step clean_ce poison_capped rev reg trigger_norm total"
std::string format_loss_line(long step, const LossBreakdown& loss);

/// Marks parameters and masks as not requiring grad until destroyed.
class FreezeGuard {
public:
    explicit FreezeGuard(MaskedClassifier& model);
    ~FreezeGuard();
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    std::vector<std::pair<torch::Tensor, bool>> saved_;
};

}  // namespace revbd
