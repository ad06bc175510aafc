#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "revbd/types.hpp"

namespace revbd {

enum class LayerKind { Conv, BatchNorm, ReLU, MaxPool, GlobalAvgPool, Flatten, Linear, Residual };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// One element of the cascade. Unused fields stay zero.
struct LayerDesc {
    LayerKind kind = LayerKind::ReLU;
    std::int64_t in = 0;
    std::int64_t out = 0;
    std::int64_t kernel = 0;
    std::int64_t stride = 1;
    std::int64_t padding = 0;

    static LayerDesc conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                          std::int64_t padding);
    static LayerDesc batch_norm(std::int64_t channels);
    static LayerDesc relu();
    static LayerDesc max_pool(std::int64_t kernel);
    static LayerDesc global_avg_pool();
    static LayerDesc flatten();
    static LayerDesc linear(std::int64_t in, std::int64_t out);
    static LayerDesc residual(std::int64_t in, std::int64_t out, std::int64_t stride);

    bool operator==(const LayerDesc&) const = default;
};

/// Ordered layer list plus the cut points the rest of the library cares about.
struct ArchSpec {
    std::string name = "custom";
    std::vector<LayerDesc> layers;
    /// Layer indices whose outputs are the major stage outputs (default mask sites).
    std::vector<std::int64_t> stage_outputs;
    /// Layer whose output channels are the fine-pruning target; -1 when none.
    std::int64_t prune_layer = -1;

    bool operator==(const ArchSpec&) const = default;
};

void to_json(nlohmann::json& j, const LayerDesc& d);
void from_json(const nlohmann::json& j, LayerDesc& d);
void to_json(nlohmann::json& j, const ArchSpec& a);
void from_json(const nlohmann::json& j, ArchSpec& a);

/// Registered names: tiny-cnn, resnet18, resnet18-slim, vgg11, vgg11-slim, vgg16.
/// Throws ConfigError for unknown names and ShapeError when the input cannot feed the net.
ArchSpec make_arch(const std::string& name, std::int64_t num_classes, const ImageShape& input);
std::vector<std::string> registered_architectures();

class ResidualBlockImpl : public torch::nn::Module {
public:
    ResidualBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::BatchNorm2d bn2_{nullptr};
    torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(ResidualBlock);

class GlobalAvgPoolImpl : public torch::nn::Module {
public:
    torch::Tensor forward(const torch::Tensor& x) { return x.mean({2, 3}); }
};
TORCH_MODULE(GlobalAvgPool);

/// Called after every cascade layer; returns the tensor handed to the next layer.
using FeatureHook = std::function<torch::Tensor(std::size_t layer, const torch::Tensor& feature)>;

/// f_theta: a cascade of layers fed raw pixel-scale images. Input normalization
/// (x / 255 - mean) / std is part of the module so bundles evaluate standalone.
class ClassifierImpl : public torch::nn::Module {
public:
    ClassifierImpl(ArchSpec spec, std::int64_t num_classes, ImageShape input);

    torch::Tensor forward(const torch::Tensor& pixels);
    torch::Tensor forward(const torch::Tensor& pixels, const FeatureHook& hook);

    const ArchSpec& spec() const { return spec_; }
    std::int64_t num_classes() const { return num_classes_; }
    const ImageShape& input_shape() const { return input_; }
    std::size_t depth() const { return layers_.size(); }

    /// Per-channel statistics in [0, 1] scale.
    void set_normalization(const std::vector<double>& mean, const std::vector<double>& stddev);
    std::vector<double> normalization_mean() const;
    std::vector<double> normalization_std() const;

    /// Zero-one gate over the prune layer's channels (all ones until pruned).
    torch::Tensor& channel_gate() { return channel_gate_; }
    const torch::Tensor& channel_gate() const { return channel_gate_; }

    /// Output shape of every layer for a single sample, computed by a probe pass.
    /// Layers with non-spatial outputs report channels = features, height = width = 0.
    std::vector<ImageShape> layer_output_shapes();

private:
    torch::Tensor normalize(const torch::Tensor& pixels) const;

    ArchSpec spec_;
    std::int64_t num_classes_;
    ImageShape input_;
    std::vector<torch::nn::AnyModule> layers_;
    torch::Tensor mean_;
    torch::Tensor std_;
    torch::Tensor channel_gate_;
};
TORCH_MODULE(Classifier);

/// Seeds the global torch generator, then builds. Registered architecture names only.
Classifier build_classifier(const std::string& arch, std::int64_t num_classes, const ImageShape& input,
                            std::uint64_t seed);
Classifier build_classifier(const ArchSpec& spec, std::int64_t num_classes, const ImageShape& input,
                            std::uint64_t seed);

/// Deep copy: same spec, parameters and buffers copied.
Classifier clone_classifier(const Classifier& source);
void copy_state(const Classifier& from, Classifier& to);

struct InsertionPoint {
    std::int64_t layer = 0;
    ImageShape shape;

    bool operator==(const InsertionPoint&) const = default;
};

/// Resolve layer indices into insertion points by probing feature-map shapes.
std::vector<InsertionPoint> insertion_points(Classifier& classifier, const std::vector<std::int64_t>& layers);

/// One trainable matrix per insertion point, broadcast over the batch.
class MaskSet {
public:
    MaskSet() = default;
    /// All-ones masks, requires_grad set.
    explicit MaskSet(std::vector<InsertionPoint> points);
    MaskSet(std::vector<InsertionPoint> points, std::vector<torch::Tensor> values);

    const std::vector<InsertionPoint>& points() const { return points_; }
    std::vector<torch::Tensor>& tensors() { return masks_; }
    const std::vector<torch::Tensor>& tensors() const { return masks_; }
    std::size_t size() const { return masks_.size(); }
    bool empty() const { return masks_.empty(); }

    /// Mask attached after `layer`, or nullptr.
    const torch::Tensor* at_layer(std::size_t layer) const;

    MaskSet clone() const;
    void reset_to_identity();

private:
    std::vector<InsertionPoint> points_;
    std::vector<torch::Tensor> masks_;
};

/// f_theta paired with an optional MaskSet. Copies share the underlying classifier;
/// use clone() for an independent model.
class MaskedClassifier {
public:
    MaskedClassifier(Classifier classifier, std::optional<MaskSet> masks);

    /// Uses the current masks_active() flag.
    torch::Tensor forward(const torch::Tensor& pixels);
    torch::Tensor forward(const torch::Tensor& pixels, bool masks_active);
    torch::Tensor forward(const torch::Tensor& pixels, bool masks_active, const FeatureHook& tap);

    Classifier& classifier() { return classifier_; }
    const Classifier& classifier() const { return classifier_; }
    bool has_masks() const { return masks_.has_value(); }
    MaskSet& masks();
    const MaskSet& masks() const;
    void set_masks(std::optional<MaskSet> masks);
    bool masks_active() const { return active_; }
    void set_masks_active(bool active);

    void train(bool on = true) { classifier_->train(on); }
    void eval() { classifier_->eval(); }

    MaskedClassifier clone() const;

private:
    Classifier classifier_;
    std::optional<MaskSet> masks_;
    bool active_ = false;
};

/// Attach fresh all-ones masks. Every point is validated against a probe pass:
/// indices strictly increasing, inside the cascade, spatial, and shape-matching.
MaskedClassifier attach_masks(Classifier classifier, const std::vector<InsertionPoint>& points);

/// Default insertion points: the architecture's stage outputs.
std::vector<InsertionPoint> default_insertion_points(Classifier& classifier);

}  // namespace revbd
