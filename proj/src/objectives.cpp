#include "revbd/objectives.hpp"

#include <cmath>
#include <cstdio>

#include "revbd/errors.hpp"
#include "revbd/triggers.hpp"

namespace revbd {

namespace {

void require_nonempty(const Batch& clean, const Batch& poison) {
    if (clean.empty()) throw ShapeError("clean batch is empty");
    if (poison.empty()) throw ShapeError("poison batch is empty");
}

void require_nonempty(const torch::Tensor& clean_logits, const torch::Tensor& poison_logits) {
    if (clean_logits.size(0) == 0) throw ShapeError("clean batch is empty");
    if (poison_logits.size(0) == 0) throw ShapeError("poison batch is empty");
}

// One forward over clean ++ poison so both halves see the same normalisation batch.
std::pair<torch::Tensor, torch::Tensor> joint_forward(MaskedClassifier& model, const torch::Tensor& clean,
                                                      const torch::Tensor& poison, bool masks_active) {
    auto logits = model.forward(torch::cat({clean, poison}), masks_active);
    return {logits.narrow(0, 0, clean.size(0)), logits.narrow(0, clean.size(0), poison.size(0))};
}

torch::Tensor zero_scalar() { return torch::zeros({}); }

}  // namespace

double confidence_threshold(std::int64_t num_classes) {
    if (num_classes < 2) throw ConfigError("confidence threshold needs at least two classes");
    return -1.1 * std::log(1.0 / static_cast<double>(num_classes));
}

BackdoorTerms backdoor_loss_from_logits(const torch::Tensor& clean_logits, const torch::Tensor& clean_labels,
                                        const torch::Tensor& poison_logits, const torch::Tensor& poison_labels,
                                        double cap) {
    require_nonempty(clean_logits, poison_logits);
    BackdoorTerms t;
    t.clean_ce = torch::nn::functional::cross_entropy(clean_logits, clean_labels);
    auto per_sample = torch::nn::functional::cross_entropy(
        poison_logits, poison_labels, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kNone));
    // clamp_max routes zero gradient to samples above the cap.
    t.poison_capped = (std::isinf(cap) ? per_sample : per_sample.clamp_max(cap)).mean();
    t.value = t.clean_ce - t.poison_capped;
    return t;
}

BackdoorTerms backdoor_loss(MaskedClassifier& model, const Batch& clean, const Batch& poison, double cap) {
    require_nonempty(clean, poison);
    auto [c, p] = joint_forward(model, clean.images, poison.images, false);
    return backdoor_loss_from_logits(c, clean.labels, p, poison.labels, cap);
}

torch::Tensor mask_regularizer(const MaskSet& masks) {
    auto total = zero_scalar();
    for (const auto& m : masks.tensors()) total = total + (m - 1.0).abs().sum();
    return total;
}

torch::Tensor paired_ce_from_logits(const torch::Tensor& clean_logits, const torch::Tensor& clean_labels,
                                    const torch::Tensor& poison_logits, const torch::Tensor& poison_labels) {
    require_nonempty(clean_logits, poison_logits);
    return torch::nn::functional::cross_entropy(clean_logits, clean_labels) +
           torch::nn::functional::cross_entropy(poison_logits, poison_labels);
}

torch::Tensor revocability_loss(MaskedClassifier& model, const Batch& clean, const Batch& poison) {
    require_nonempty(clean, poison);
    auto [c, p] = joint_forward(model, clean.images, poison.images, true);
    return paired_ce_from_logits(c, clean.labels, p, poison.labels);
}

torch::Tensor erasing_loss(MaskedClassifier& model, const Batch& clean, const Batch& poison) {
    require_nonempty(clean, poison);
    auto [c, p] = joint_forward(model, clean.images, poison.images, false);
    return paired_ce_from_logits(c, clean.labels, p, poison.labels);
}

std::array<double, 6> LossBreakdown::values() const {
    auto v = [](const torch::Tensor& t) { return t.defined() ? t.detach().item<double>() : 0.0; };
    return {v(clean_ce), v(poison_capped), v(rev), v(reg), v(trigger_norm), v(total)};
}

bool LossBreakdown::finite() const {
    for (double v : values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

LossBreakdown total_loss(const BackdoorTerms& bd, const torch::Tensor& rev, const torch::Tensor& reg, double alpha) {
    LossBreakdown out;
    out.clean_ce = bd.clean_ce;
    out.poison_capped = bd.poison_capped;
    out.rev = rev;
    out.reg = reg;
    out.trigger_norm = zero_scalar();
    out.total = bd.value + rev + alpha * reg;
    return out;
}

LossBreakdown trigger_ft_loss(const BackdoorTerms& bd, const torch::Tensor& rev, const torch::Tensor& delta,
                              double beta) {
    LossBreakdown out;
    out.clean_ce = bd.clean_ce;
    out.poison_capped = bd.poison_capped;
    out.rev = rev;
    out.reg = zero_scalar();
    out.trigger_norm = beta * torch::linalg_vector_norm(delta, 2, c10::nullopt, false, c10::nullopt);
    out.total = bd.value + rev + out.trigger_norm;
    return out;
}

LossBreakdown trigger_ft_loss(MaskedClassifier& model, const Batch& clean, const Batch& poison_raw,
                              const torch::Tensor& delta, double cap, double beta) {
    require_nonempty(clean, poison_raw);
    FreezeGuard freeze(model);
    Batch poison{apply_trigger(poison_raw.images, delta), poison_raw.labels};
    auto [bc, bp] = joint_forward(model, clean.images, poison.images, false);
    auto bd = backdoor_loss_from_logits(bc, clean.labels, bp, poison.labels, cap);
    auto [rc, rp] = joint_forward(model, clean.images, poison.images, true);
    auto rev = paired_ce_from_logits(rc, clean.labels, rp, poison.labels);
    return trigger_ft_loss(bd, rev, delta, beta);
}

std::string format_loss_line(long step, const LossBreakdown& loss) {
    const auto v = loss.values();
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%ld %.9g %.9g %.9g %.9g %.9g %.9g", step, v[0], v[1], v[2], v[3], v[4], v[5]);
    return buf;
}

FreezeGuard::FreezeGuard(MaskedClassifier& model) {
    for (auto& p : model.classifier()->parameters()) {
        saved_.emplace_back(p, p.requires_grad());
        p.requires_grad_(false);
    }
    if (model.has_masks()) {
        for (auto& m : model.masks().tensors()) {
            saved_.emplace_back(m, m.requires_grad());
            m.requires_grad_(false);
        }
    }
}

FreezeGuard::~FreezeGuard() {
    for (auto& [t, flag] : saved_) t.requires_grad_(flag);
}

}  // namespace revbd
