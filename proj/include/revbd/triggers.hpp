#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "revbd/types.hpp"

namespace revbd {

/// Additive perturbation in raw pixel scale, every element kept inside [-bound, bound].
class TriggerPattern {
public:
    TriggerPattern() = default;
    /// Takes ownership of `delta` (C x H x W); elements are projected into the bound.
    TriggerPattern(torch::Tensor delta, double bound);

    torch::Tensor& delta() { return delta_; }
    const torch::Tensor& delta() const { return delta_; }
    double bound() const { return bound_; }
    ImageShape shape() const;
    bool defined() const { return delta_.defined(); }

    double linf() const;
    double l2() const;

    /// In-place clamp into [-bound, bound]; keeps requires_grad.
    void project();
    TriggerPattern clone() const;

private:
    torch::Tensor delta_;
    double bound_ = 0.0;
};

/// Uniform draw from [-t, t] under `seed`. Throws ConfigError unless t > 0.
TriggerPattern init_trigger(const ImageShape& shape, double t, std::uint64_t seed);

/// clamp(x + delta, 0, 255), delta broadcast over the batch. Differentiable in both.
torch::Tensor apply_trigger(const torch::Tensor& images, const torch::Tensor& delta);
inline torch::Tensor apply_trigger(const torch::Tensor& images, const TriggerPattern& trigger) {
    return apply_trigger(images, trigger.delta());
}

/// Copy with every element clamped into [-t, t].
TriggerPattern project_trigger(const TriggerPattern& trigger);

enum class BaselineKind { BadNets, Blend, Sig };

std::string to_string(BaselineKind kind);
BaselineKind baseline_kind_from_string(const std::string& name);

/// Closed-form poisoning rules for the conventional attacks.
struct BaselineTriggerSpec {
    BaselineKind kind = BaselineKind::BadNets;
    ImageShape shape;
    /// BadNets: random colour patch (C x s x s) pasted at the bottom-right corner.
    std::int64_t square_size = 3;
    torch::Tensor square;
    /// Blend: fixed random image and mixing ratio of the benign image.
    torch::Tensor blend_image;
    double blend_ratio = 0.5;
    /// SIG: column stripe delta * sin(2 pi j f / m).
    double sig_delta = 25.0;
    double sig_frequency = 10.0;

    static BaselineTriggerSpec badnets(const ImageShape& shape, std::uint64_t seed);
    static BaselineTriggerSpec blend(const ImageShape& shape, std::uint64_t seed, double ratio = 0.5);
    static BaselineTriggerSpec sig(const ImageShape& shape, double delta = 25.0, double frequency = 10.0);

    void validate() const;
};

/// SIG additive term for column j of an m-wide image.
double sig_stripe(std::int64_t column, std::int64_t width, double delta, double frequency);

/// Works on a single C x H x W image or a batch; output clamped to [0, 255].
torch::Tensor make_baseline_poison(const torch::Tensor& images, const BaselineTriggerSpec& spec);

}  // namespace revbd
