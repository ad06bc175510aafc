#include "revbd/triggers.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "revbd/errors.hpp"

namespace revbd {

namespace {

torch::Tensor seeded_uniform(const ImageShape& shape, double lo, double hi, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(static_cast<float>(lo), static_cast<float>(hi));
    std::vector<float> values(static_cast<std::size_t>(shape.numel()));
    for (auto& v : values) v = dist(rng);
    return torch::from_blob(values.data(), shape.dims(), torch::kFloat).clone();
}

void require_image_shape(const ImageShape& shape) {
    if (shape.channels <= 0 || shape.height <= 0 || shape.width <= 0) {
        throw ShapeError("trigger shape must be positive, got " + shape.str());
    }
}

}  // namespace

TriggerPattern::TriggerPattern(torch::Tensor delta, double bound) : delta_(std::move(delta)), bound_(bound) {
    if (!(bound_ >= 0.0)) throw ConfigError("trigger bound must be non-negative");
    if (delta_.dim() != 3) throw ShapeError("trigger must be C x H x W");
    delta_ = delta_.to(torch::kFloat).detach().clone().set_requires_grad(true);
    project();
}

ImageShape TriggerPattern::shape() const { return {delta_.size(0), delta_.size(1), delta_.size(2)}; }

double TriggerPattern::linf() const { return delta_.detach().abs().max().item<double>(); }

double TriggerPattern::l2() const { return delta_.detach().to(torch::kDouble).norm().item<double>(); }

void TriggerPattern::project() {
    torch::NoGradGuard guard;
    delta_.clamp_(-bound_, bound_);
}

TriggerPattern TriggerPattern::clone() const { return TriggerPattern(delta_, bound_); }

TriggerPattern init_trigger(const ImageShape& shape, double t, std::uint64_t seed) {
    if (!(t > 0.0)) throw ConfigError("trigger bound t must be positive");
    require_image_shape(shape);
    return TriggerPattern(seeded_uniform(shape, -t, t, seed), t);
}

torch::Tensor apply_trigger(const torch::Tensor& images, const torch::Tensor& delta) {
    if (images.dim() < 3 || delta.dim() != 3 || images.sizes().slice(images.dim() - 3) != delta.sizes()) {
        throw ShapeError("trigger shape " + c10::str(delta.sizes()) + " does not match images " +
                         c10::str(images.sizes()));
    }
    return torch::clamp(images + delta, 0.0, 255.0);
}

TriggerPattern project_trigger(const TriggerPattern& trigger) { return trigger.clone(); }

std::string to_string(BaselineKind kind) {
    switch (kind) {
        case BaselineKind::BadNets: return "badnets";
        case BaselineKind::Blend: return "blend";
        case BaselineKind::Sig: return "sig";
    }
    return "?";
}

BaselineKind baseline_kind_from_string(const std::string& name) {
    if (name == "badnets") return BaselineKind::BadNets;
    if (name == "blend") return BaselineKind::Blend;
    if (name == "sig") return BaselineKind::Sig;
    throw ConfigError("unknown baseline trigger '" + name + "'");
}

BaselineTriggerSpec BaselineTriggerSpec::badnets(const ImageShape& shape, std::uint64_t seed) {
    require_image_shape(shape);
    BaselineTriggerSpec s;
    s.kind = BaselineKind::BadNets;
    s.shape = shape;
    s.square_size = std::max(shape.height, shape.width) >= 224 ? 12 : 3;
    s.square = seeded_uniform({shape.channels, s.square_size, s.square_size}, 0.0, 255.0, seed).round();
    return s;
}

BaselineTriggerSpec BaselineTriggerSpec::blend(const ImageShape& shape, std::uint64_t seed, double ratio) {
    require_image_shape(shape);
    BaselineTriggerSpec s;
    s.kind = BaselineKind::Blend;
    s.shape = shape;
    s.blend_ratio = ratio;
    s.blend_image = seeded_uniform(shape, 0.0, 255.0, seed).round();
    return s;
}

BaselineTriggerSpec BaselineTriggerSpec::sig(const ImageShape& shape, double delta, double frequency) {
    require_image_shape(shape);
    BaselineTriggerSpec s;
    s.kind = BaselineKind::Sig;
    s.shape = shape;
    s.sig_delta = delta;
    s.sig_frequency = frequency;
    return s;
}

void BaselineTriggerSpec::validate() const {
    switch (kind) {
        case BaselineKind::BadNets:
            if (square_size < 1 || square_size > std::min(shape.height, shape.width) || !square.defined() ||
                square.sizes() != c10::IntArrayRef({shape.channels, square_size, square_size})) {
                throw ConfigError("badnets square does not fit the image");
            }
            break;
        case BaselineKind::Blend:
            if (!(blend_ratio >= 0.0 && blend_ratio <= 1.0)) throw ConfigError("blend ratio must be in [0, 1]");
            if (!blend_image.defined() || blend_image.sizes() != c10::IntArrayRef(shape.dims())) {
                throw ConfigError("blend image shape does not match");
            }
            break;
        case BaselineKind::Sig:
            if (!(sig_delta >= 0.0 && sig_delta <= 255.0) || !(sig_frequency > 0.0)) {
                throw ConfigError("sig intensity must be in [0, 255] and frequency positive");
            }
            break;
    }
}

double sig_stripe(std::int64_t column, std::int64_t width, double delta, double frequency) {
    return delta * std::sin(2.0 * std::numbers::pi * static_cast<double>(column) * frequency /
                            static_cast<double>(width));
}

torch::Tensor make_baseline_poison(const torch::Tensor& images, const BaselineTriggerSpec& spec) {
    spec.validate();
    if (images.dim() < 3 || images.sizes().slice(images.dim() - 3) != c10::IntArrayRef(spec.shape.dims())) {
        throw ShapeError("image shape " + c10::str(images.sizes()) + " does not match trigger " + spec.shape.str());
    }
    auto x = images.to(torch::kFloat);
    switch (spec.kind) {
        case BaselineKind::BadNets: {
            auto out = x.clone();
            const auto s = spec.square_size;
            out.narrow(-2, spec.shape.height - s, s).narrow(-1, spec.shape.width - s, s).copy_(
                spec.square.expand_as(out.narrow(-2, spec.shape.height - s, s).narrow(-1, spec.shape.width - s, s)));
            return out;
        }
        case BaselineKind::Blend:
            return torch::clamp(spec.blend_ratio * x + (1.0 - spec.blend_ratio) * spec.blend_image, 0.0, 255.0);
        case BaselineKind::Sig: {
            std::vector<float> stripe(spec.shape.width);
            for (std::int64_t j = 0; j < spec.shape.width; ++j) {
                stripe[j] = static_cast<float>(sig_stripe(j, spec.shape.width, spec.sig_delta, spec.sig_frequency));
            }
            auto row = torch::from_blob(stripe.data(), {spec.shape.width}, torch::kFloat).clone();
            return torch::clamp(x + row, 0.0, 255.0);
        }
    }
    throw ConfigError("invalid baseline trigger kind");
}

}  // namespace revbd
