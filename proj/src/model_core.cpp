#include "revbd/model_core.hpp"

#include <algorithm>
#include <array>
#include <utility>

#include "revbd/errors.hpp"

namespace revbd {

namespace {

constexpr std::array<std::pair<LayerKind, const char*>, 8> kLayerNames{{
    {LayerKind::Conv, "conv"},
    {LayerKind::BatchNorm, "batchnorm"},
    {LayerKind::ReLU, "relu"},
    {LayerKind::MaxPool, "maxpool"},
    {LayerKind::GlobalAvgPool, "gap"},
    {LayerKind::Flatten, "flatten"},
    {LayerKind::Linear, "linear"},
    {LayerKind::Residual, "residual"},
}};

torch::nn::AnyModule make_layer(const LayerDesc& d) {
    switch (d.kind) {
        case LayerKind::Conv:
            return torch::nn::AnyModule(torch::nn::Conv2d(
                torch::nn::Conv2dOptions(d.in, d.out, d.kernel).stride(d.stride).padding(d.padding)));
        case LayerKind::BatchNorm:
            return torch::nn::AnyModule(torch::nn::BatchNorm2d(d.in));
        case LayerKind::ReLU:
            return torch::nn::AnyModule(torch::nn::ReLU());
        case LayerKind::MaxPool:
            return torch::nn::AnyModule(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(d.kernel)));
        case LayerKind::GlobalAvgPool:
            return torch::nn::AnyModule(GlobalAvgPool());
        case LayerKind::Flatten:
            return torch::nn::AnyModule(torch::nn::Flatten());
        case LayerKind::Linear:
            return torch::nn::AnyModule(torch::nn::Linear(d.in, d.out));
        case LayerKind::Residual:
            return torch::nn::AnyModule(ResidualBlock(d.in, d.out, d.stride));
    }
    throw ConfigError("unhandled layer kind");
}

void require_divisible(const ImageShape& input, std::int64_t factor, const std::string& arch) {
    if (input.height < factor || input.width < factor || input.height % factor != 0 ||
        input.width % factor != 0) {
        throw ShapeError(arch + " needs spatial size divisible by " + std::to_string(factor) + ", got " +
                         input.str());
    }
}

// conv -> bn -> relu, appended in place.
void push_conv_block(ArchSpec& a, std::int64_t in, std::int64_t out) {
    a.layers.push_back(LayerDesc::conv(in, out, 3, 1, 1));
    a.layers.push_back(LayerDesc::batch_norm(out));
    a.layers.push_back(LayerDesc::relu());
}

ArchSpec tiny_cnn(std::int64_t n, const ImageShape& in) {
    require_divisible(in, 4, "tiny-cnn");
    ArchSpec a;
    a.name = "tiny-cnn";
    push_conv_block(a, in.channels, 16);
    a.layers.push_back(LayerDesc::max_pool(2));
    a.stage_outputs.push_back(3);
    push_conv_block(a, 16, 32);
    a.layers.push_back(LayerDesc::max_pool(2));
    a.stage_outputs.push_back(7);
    push_conv_block(a, 32, 64);
    a.prune_layer = 10;
    a.layers.push_back(LayerDesc::global_avg_pool());
    a.layers.push_back(LayerDesc::linear(64, n));
    return a;
}

ArchSpec resnet18(const std::string& name, std::int64_t width, std::int64_t n, const ImageShape& in) {
    require_divisible(in, 8, name);
    ArchSpec a;
    a.name = name;
    push_conv_block(a, in.channels, width);
    std::int64_t channels = width;
    for (int stage = 0; stage < 4; ++stage) {
        const std::int64_t out = width << stage;
        const std::int64_t stride = stage == 0 ? 1 : 2;
        a.layers.push_back(LayerDesc::residual(channels, out, stride));
        a.layers.push_back(LayerDesc::residual(out, out, 1));
        channels = out;
        a.stage_outputs.push_back(static_cast<std::int64_t>(a.layers.size()) - 1);
    }
    a.prune_layer = a.stage_outputs.back();
    a.layers.push_back(LayerDesc::global_avg_pool());
    a.layers.push_back(LayerDesc::linear(channels, n));
    return a;
}

ArchSpec vgg(const std::string& name, const std::vector<int>& plan, std::int64_t divisor, std::int64_t n,
             const ImageShape& in) {
    require_divisible(in, 32, name);
    ArchSpec a;
    a.name = name;
    std::int64_t channels = in.channels;
    for (int v : plan) {
        if (v == 0) {
            a.prune_layer = static_cast<std::int64_t>(a.layers.size()) - 1;
            a.layers.push_back(LayerDesc::max_pool(2));
            a.stage_outputs.push_back(static_cast<std::int64_t>(a.layers.size()) - 1);
        } else {
            const std::int64_t out = v / divisor;
            push_conv_block(a, channels, out);
            channels = out;
        }
    }
    a.layers.push_back(LayerDesc::flatten());
    a.layers.push_back(LayerDesc::linear(channels * (in.height / 32) * (in.width / 32), n));
    return a;
}

// 0 marks a 2x2 max-pool.
const std::vector<int> kVgg11 = {64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0};
const std::vector<int> kVgg16 = {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0};

}  // namespace

std::string to_string(LayerKind kind) {
    for (const auto& [k, name] : kLayerNames) {
        if (k == kind) return name;
    }
    return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
    for (const auto& [k, n] : kLayerNames) {
        if (name == n) return k;
    }
    throw ConfigError("unknown layer kind '" + name + "'");
}

LayerDesc LayerDesc::conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                          std::int64_t padding) {
    return {LayerKind::Conv, in, out, kernel, stride, padding};
}
LayerDesc LayerDesc::batch_norm(std::int64_t channels) { return {LayerKind::BatchNorm, channels, channels}; }
LayerDesc LayerDesc::relu() { return {LayerKind::ReLU}; }
LayerDesc LayerDesc::max_pool(std::int64_t kernel) { return {LayerKind::MaxPool, 0, 0, kernel, kernel}; }
LayerDesc LayerDesc::global_avg_pool() { return {LayerKind::GlobalAvgPool}; }
LayerDesc LayerDesc::flatten() { return {LayerKind::Flatten}; }
LayerDesc LayerDesc::linear(std::int64_t in, std::int64_t out) { return {LayerKind::Linear, in, out}; }
LayerDesc LayerDesc::residual(std::int64_t in, std::int64_t out, std::int64_t stride) {
    return {LayerKind::Residual, in, out, 3, stride, 1};
}

void to_json(nlohmann::json& j, const LayerDesc& d) {
    j = nlohmann::json{{"kind", to_string(d.kind)}, {"in", d.in},         {"out", d.out},
                       {"kernel", d.kernel},        {"stride", d.stride}, {"padding", d.padding}};
}

void from_json(const nlohmann::json& j, LayerDesc& d) {
    d.kind = layer_kind_from_string(j.at("kind").get<std::string>());
    d.in = j.value("in", std::int64_t{0});
    d.out = j.value("out", std::int64_t{0});
    d.kernel = j.value("kernel", std::int64_t{0});
    d.stride = j.value("stride", std::int64_t{1});
    d.padding = j.value("padding", std::int64_t{0});
}

void to_json(nlohmann::json& j, const ArchSpec& a) {
    j = nlohmann::json{{"name", a.name},
                       {"layers", a.layers},
                       {"stage_outputs", a.stage_outputs},
                       {"prune_layer", a.prune_layer}};
}

void from_json(const nlohmann::json& j, ArchSpec& a) {
    a.name = j.value("name", std::string("custom"));
    a.layers = j.at("layers").get<std::vector<LayerDesc>>();
    a.stage_outputs = j.value("stage_outputs", std::vector<std::int64_t>{});
    a.prune_layer = j.value("prune_layer", std::int64_t{-1});
}

std::vector<std::string> registered_architectures() {
    return {"tiny-cnn", "resnet18", "resnet18-slim", "vgg11", "vgg11-slim", "vgg16"};
}

ArchSpec make_arch(const std::string& name, std::int64_t num_classes, const ImageShape& input) {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (input.channels <= 0) throw ShapeError("input must have at least one channel");
    if (name == "tiny-cnn") return tiny_cnn(num_classes, input);
    if (name == "resnet18") return resnet18(name, 64, num_classes, input);
    if (name == "resnet18-slim") return resnet18(name, 16, num_classes, input);
    if (name == "vgg11") return vgg(name, kVgg11, 1, num_classes, input);
    if (name == "vgg11-slim") return vgg(name, kVgg11, 4, num_classes, input);
    if (name == "vgg16") return vgg(name, kVgg16, 1, num_classes, input);
    throw ConfigError("unknown architecture '" + name + "'");
}

ResidualBlockImpl::ResidualBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride) {
    conv1_ = register_module(
        "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out));
    conv2_ = register_module(
        "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).stride(1).padding(1).bias(false)));
    bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out));
    shortcut_ = register_module("shortcut", torch::nn::Sequential());
    if (stride != 1 || in != out) {
        shortcut_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
        shortcut_->push_back(torch::nn::BatchNorm2d(out));
    }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1_(conv1_(x)));
    y = bn2_(conv2_(y));
    auto skip = shortcut_->is_empty() ? x : shortcut_->forward(x);
    return torch::relu(y + skip);
}

ClassifierImpl::ClassifierImpl(ArchSpec spec, std::int64_t num_classes, ImageShape input)
    : spec_(std::move(spec)), num_classes_(num_classes), input_(input) {
    if (spec_.layers.empty()) throw ConfigError("architecture has no layers");
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        auto layer = make_layer(spec_.layers[i]);
        register_module("layer" + std::to_string(i), layer.ptr());
        layers_.push_back(std::move(layer));
    }
    mean_ = register_buffer("input_mean", torch::zeros({1, input_.channels, 1, 1}));
    std_ = register_buffer("input_std", torch::ones({1, input_.channels, 1, 1}));

    // Probe once: catches incompatible inputs and sizes the prune gate.
    std::vector<ImageShape> shapes;
    try {
        shapes = layer_output_shapes();
    } catch (const c10::Error& e) {
        throw ShapeError("input " + input_.str() + " incompatible with architecture '" + spec_.name +
                         "': " + e.what_without_backtrace());
    }
    if (shapes.back().channels != num_classes_ || shapes.back().height != 0) {
        throw ShapeError("architecture '" + spec_.name + "' does not emit " + std::to_string(num_classes_) +
                         " logits");
    }
    if (spec_.prune_layer >= 0) {
        if (spec_.prune_layer >= static_cast<std::int64_t>(shapes.size()) ||
            shapes[spec_.prune_layer].height == 0) {
            throw ConfigError("prune layer must be a spatial layer inside the cascade");
        }
        channel_gate_ = register_buffer("channel_gate", torch::ones({shapes[spec_.prune_layer].channels}));
    }
}

torch::Tensor ClassifierImpl::normalize(const torch::Tensor& pixels) const {
    // Statistics live in [0,1] scale; the defaults (0, 1) just rescale pixels.
    return (pixels / 255.0 - mean_) / std_;
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& pixels) { return forward(pixels, FeatureHook{}); }

torch::Tensor ClassifierImpl::forward(const torch::Tensor& pixels, const FeatureHook& hook) {
    if (pixels.dim() != 4 || pixels.size(1) != input_.channels || pixels.size(2) != input_.height ||
        pixels.size(3) != input_.width) {
        throw ShapeError("batch shape " + c10::str(pixels.sizes()) + " does not match input " + input_.str());
    }
    auto x = normalize(pixels);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i].forward(x);
        if (static_cast<std::int64_t>(i) == spec_.prune_layer) {
            x = x * channel_gate_.view({1, -1, 1, 1});
        }
        if (hook) x = hook(i, x);
    }
    return x;
}

void ClassifierImpl::set_normalization(const std::vector<double>& mean, const std::vector<double>& stddev) {
    if (static_cast<std::int64_t>(mean.size()) != input_.channels ||
        static_cast<std::int64_t>(stddev.size()) != input_.channels) {
        throw ShapeError("normalization statistics must have one entry per channel");
    }
    torch::NoGradGuard guard;
    for (std::int64_t c = 0; c < input_.channels; ++c) {
        if (!(stddev[c] > 0)) throw ConfigError("normalization std must be positive");
        mean_[0][c][0][0] = mean[c];
        std_[0][c][0][0] = stddev[c];
    }
}

std::vector<double> ClassifierImpl::normalization_mean() const {
    auto flat = mean_.flatten().to(torch::kDouble).contiguous();
    return {flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel()};
}

std::vector<double> ClassifierImpl::normalization_std() const {
    auto flat = std_.flatten().to(torch::kDouble).contiguous();
    return {flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel()};
}

std::vector<ImageShape> ClassifierImpl::layer_output_shapes() {
    const bool was_training = is_training();
    eval();
    torch::NoGradGuard guard;
    std::vector<ImageShape> shapes;
    auto x = normalize(torch::zeros(input_.batched(1)));
    for (auto& layer : layers_) {
        x = layer.forward(x);
        if (x.dim() == 4) {
            shapes.push_back({x.size(1), x.size(2), x.size(3)});
        } else {
            shapes.push_back({x.size(1), 0, 0});
        }
    }
    train(was_training);
    return shapes;
}

Classifier build_classifier(const std::string& arch, std::int64_t num_classes, const ImageShape& input,
                            std::uint64_t seed) {
    return build_classifier(make_arch(arch, num_classes, input), num_classes, input, seed);
}

Classifier build_classifier(const ArchSpec& spec, std::int64_t num_classes, const ImageShape& input,
                            std::uint64_t seed) {
    torch::manual_seed(seed);
    return Classifier(spec, num_classes, input);
}

void copy_state(const Classifier& from, Classifier& to) {
    if (!(from->spec() == to->spec())) throw ShapeError("cannot copy state between different architectures");
    torch::NoGradGuard guard;
    auto src_params = from->named_parameters(true);
    for (auto& p : to->named_parameters(true)) p.value().copy_(src_params[p.key()]);
    auto src_buffers = from->named_buffers(true);
    for (auto& b : to->named_buffers(true)) b.value().copy_(src_buffers[b.key()]);
    to->train(from->is_training());
}

Classifier clone_classifier(const Classifier& source) {
    Classifier copy(source->spec(), source->num_classes(), source->input_shape());
    copy_state(source, copy);
    return copy;
}

std::vector<InsertionPoint> insertion_points(Classifier& classifier, const std::vector<std::int64_t>& layers) {
    const auto shapes = classifier->layer_output_shapes();
    std::vector<InsertionPoint> points;
    for (auto layer : layers) {
        if (layer < 0 || layer >= static_cast<std::int64_t>(shapes.size())) {
            throw ShapeError("insertion layer " + std::to_string(layer) + " outside cascade of depth " +
                             std::to_string(shapes.size()));
        }
        if (!points.empty() && layer <= points.back().layer) throw ShapeError("insertion layers must strictly increase");
        if (shapes[layer].height == 0) {
            throw ShapeError("layer " + std::to_string(layer) + " has no spatial feature map to mask");
        }
        points.push_back({layer, shapes[layer]});
    }
    return points;
}

std::vector<InsertionPoint> default_insertion_points(Classifier& classifier) {
    return insertion_points(classifier, classifier->spec().stage_outputs);
}

MaskSet::MaskSet(std::vector<InsertionPoint> points) : points_(std::move(points)) {
    for (const auto& p : points_) masks_.push_back(torch::ones(p.shape.dims()).set_requires_grad(true));
}

MaskSet::MaskSet(std::vector<InsertionPoint> points, std::vector<torch::Tensor> values)
    : points_(std::move(points)), masks_(std::move(values)) {
    if (points_.size() != masks_.size()) throw ShapeError("mask count does not match insertion points");
    for (std::size_t i = 0; i < masks_.size(); ++i) {
        if (masks_[i].sizes() != c10::IntArrayRef(points_[i].shape.dims())) {
            throw ShapeError("mask " + std::to_string(i) + " has shape " + c10::str(masks_[i].sizes()) +
                             ", expected " + points_[i].shape.str());
        }
        auto v = masks_[i].is_floating_point() ? masks_[i] : masks_[i].to(torch::kFloat);
        masks_[i] = v.detach().clone().set_requires_grad(true);
    }
}

const torch::Tensor* MaskSet::at_layer(std::size_t layer) const {
    for (std::size_t i = 0; i < points_.size(); ++i) {
        if (points_[i].layer == static_cast<std::int64_t>(layer)) return &masks_[i];
    }
    return nullptr;
}

MaskSet MaskSet::clone() const { return MaskSet(points_, masks_); }

void MaskSet::reset_to_identity() {
    torch::NoGradGuard guard;
    for (auto& m : masks_) m.fill_(1.0);
}

MaskedClassifier::MaskedClassifier(Classifier classifier, std::optional<MaskSet> masks)
    : classifier_(std::move(classifier)), masks_(std::move(masks)), active_(masks_.has_value()) {}

torch::Tensor MaskedClassifier::forward(const torch::Tensor& pixels) { return forward(pixels, active_); }

torch::Tensor MaskedClassifier::forward(const torch::Tensor& pixels, bool masks_active) {
    return forward(pixels, masks_active, FeatureHook{});
}

torch::Tensor MaskedClassifier::forward(const torch::Tensor& pixels, bool masks_active, const FeatureHook& tap) {
    if (masks_active && !masks_) throw ShapeError("masked forward requested but no masks are attached");
    if (!masks_active || masks_->empty()) return classifier_->forward(pixels, tap);
    const MaskSet& masks = *masks_;
    return classifier_->forward(pixels, [&](std::size_t layer, const torch::Tensor& feature) {
        const torch::Tensor* m = masks.at_layer(layer);
        auto out = m ? feature * *m : feature;
        return tap ? tap(layer, out) : out;
    });
}

MaskSet& MaskedClassifier::masks() {
    if (!masks_) throw ShapeError("model has no masks attached");
    return *masks_;
}

const MaskSet& MaskedClassifier::masks() const {
    if (!masks_) throw ShapeError("model has no masks attached");
    return *masks_;
}

void MaskedClassifier::set_masks(std::optional<MaskSet> masks) {
    masks_ = std::move(masks);
    if (!masks_) active_ = false;
}

void MaskedClassifier::set_masks_active(bool active) {
    if (active && !masks_) throw ShapeError("cannot activate masks: none attached");
    active_ = active;
}

MaskedClassifier MaskedClassifier::clone() const {
    MaskedClassifier copy(clone_classifier(classifier_), masks_ ? std::optional<MaskSet>(masks_->clone()) : std::nullopt);
    copy.active_ = active_;
    return copy;
}

MaskedClassifier attach_masks(Classifier classifier, const std::vector<InsertionPoint>& points) {
    const auto shapes = classifier->layer_output_shapes();
    std::int64_t previous = -1;
    for (const auto& p : points) {
        if (p.layer < 0 || p.layer >= static_cast<std::int64_t>(shapes.size())) {
            throw ShapeError("insertion layer " + std::to_string(p.layer) + " outside cascade of depth " +
                             std::to_string(shapes.size()));
        }
        if (p.layer <= previous) throw ShapeError("insertion layers must be strictly increasing");
        previous = p.layer;
        const auto& actual = shapes[p.layer];
        if (actual.height == 0) {
            throw ShapeError("layer " + std::to_string(p.layer) + " does not output a spatial feature map");
        }
        if (!(actual == p.shape)) {
            throw ShapeError("layer " + std::to_string(p.layer) + " outputs " + actual.str() + ", declared " +
                             p.shape.str());
        }
    }
    return MaskedClassifier(std::move(classifier), MaskSet(points));
}

}  // namespace revbd
