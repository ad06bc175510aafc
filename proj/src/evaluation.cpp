#include "revbd/evaluation.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "revbd/errors.hpp"
#include "revbd/hashing.hpp"

namespace revbd {

namespace {

constexpr double kPeak = 255.0;

// Restores the caller's train/eval mode.
class EvalModeGuard {
public:
    explicit EvalModeGuard(MaskedClassifier& model) : model_(model), was_training_(model.classifier()->is_training()) {
        model_.eval();
    }
    ~EvalModeGuard() { model_.train(was_training_); }

private:
    MaskedClassifier& model_;
    bool was_training_;
};

std::int64_t count_correct(MaskedClassifier& model, const torch::Tensor& images, const torch::Tensor& labels,
                           const Poisoner& poison, bool masks_active) {
    auto x = poison ? poison(images) : images;
    auto pred = model.forward(x, masks_active).argmax(1);
    return pred.eq(labels).sum().item<std::int64_t>();
}

torch::Tensor gaussian_window(std::int64_t channels) {
    constexpr int kSize = 11;
    constexpr double kSigma = 1.5;
    auto coords = torch::arange(kSize, torch::kDouble) - (kSize - 1) / 2.0;
    auto g = torch::exp(-(coords * coords) / (2 * kSigma * kSigma));
    g = g / g.sum();
    auto w = torch::outer(g, g);
    return w.expand({channels, 1, kSize, kSize}).contiguous();
}

std::string fmt(double v) {
    std::ostringstream os;
    if (std::isinf(v)) return "inf";
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "-"; }

nlohmann::json opt_json(const std::optional<double>& v) {
    if (!v) return nullptr;
    if (std::isinf(*v)) return "inf";
    return *v;
}

}  // namespace

Poisoner trigger_poisoner(const TriggerPattern& trigger) {
    auto delta = trigger.delta().detach().clone();
    return [delta](const torch::Tensor& x) { return apply_trigger(x, delta); };
}

Poisoner baseline_poisoner(const BaselineTriggerSpec& spec) {
    spec.validate();
    return [spec](const torch::Tensor& x) { return make_baseline_poison(x, spec); };
}

double accuracy(MaskedClassifier& model, const DatasetHandle& data, std::span<const std::int64_t> ids,
                const Poisoner& poison, bool masks_active, std::int64_t batch_size) {
    if (ids.empty()) throw DataError("accuracy over an empty dataset");
    EvalModeGuard mode(model);
    torch::NoGradGuard no_grad;
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto n = std::min<std::size_t>(static_cast<std::size_t>(batch_size), ids.size() - start);
        auto batch = data.gather(ids.subspan(start, n));
        correct += count_correct(model, batch.images, batch.labels, poison, masks_active);
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(ids.size());
}

double accuracy(MaskedClassifier& model, const Batch& batch, const Poisoner& poison, bool masks_active) {
    if (batch.empty()) throw DataError("accuracy over an empty dataset");
    EvalModeGuard mode(model);
    torch::NoGradGuard no_grad;
    const auto correct = count_correct(model, batch.images, batch.labels, poison, masks_active);
    return 100.0 * static_cast<double>(correct) / static_cast<double>(batch.size());
}

double psnr(const torch::Tensor& clean, const torch::Tensor& poisoned) {
    if (clean.sizes() != poisoned.sizes()) throw ShapeError("psnr needs equal shapes");
    const double mse = (clean.to(torch::kDouble) - poisoned.to(torch::kDouble)).pow(2).mean().item<double>();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(kPeak * kPeak / mse);
}

double ssim(const torch::Tensor& clean, const torch::Tensor& poisoned) {
    if (clean.sizes() != poisoned.sizes() || clean.dim() != 3) throw ShapeError("ssim needs equal C x H x W images");
    if (clean.size(1) < 11 || clean.size(2) < 11) throw ShapeError("ssim needs images of at least 11 x 11");
    constexpr double c1 = (0.01 * kPeak) * (0.01 * kPeak);
    constexpr double c2 = (0.03 * kPeak) * (0.03 * kPeak);
    const auto channels = clean.size(0);
    auto x = clean.to(torch::kDouble).unsqueeze(0);
    auto y = poisoned.to(torch::kDouble).unsqueeze(0);
    const auto w = gaussian_window(channels);
    auto filt = [&](const torch::Tensor& t) {
        return torch::nn::functional::conv2d(t, w, torch::nn::functional::Conv2dFuncOptions().groups(channels));
    };
    auto mu_x = filt(x);
    auto mu_y = filt(y);
    auto sxx = filt(x * x) - mu_x * mu_x;
    auto syy = filt(y * y) - mu_y * mu_y;
    auto sxy = filt(x * y) - mu_x * mu_y;
    auto map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2));
    return map.mean().item<double>();
}

TriggerQuality trigger_quality(const DatasetHandle& data, std::span<const std::int64_t> ids,
                               const Poisoner& poison) {
    if (ids.empty()) throw DataError("trigger quality over an empty dataset");
    TriggerQuality q;
    double psnr_sum = 0.0;
    double ssim_sum = 0.0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < ids.size(); start += kChunk) {
        auto batch = data.gather(ids.subspan(start, std::min(kChunk, ids.size() - start)));
        auto poisoned = poison(batch.images);
        for (std::int64_t i = 0; i < batch.size(); ++i) {
            psnr_sum += psnr(batch.images[i], poisoned[i]);
            ssim_sum += ssim(batch.images[i], poisoned[i]);
        }
    }
    q.images = static_cast<std::int64_t>(ids.size());
    q.mean_psnr = psnr_sum / static_cast<double>(q.images);
    q.mean_ssim = ssim_sum / static_cast<double>(q.images);
    return q;
}

bool EvalReport::revoked(double slack) const {
    return masked_clean && masked_poison && *masked_poison >= *masked_clean - slack;
}

nlohmann::json EvalReport::to_json() const {
    return {
        {"acc_clean_reference", opt_json(acc_clean_reference)},
        {"effectiveness", {{"acc_bd_c", unmasked_clean}, {"acc_bd_p", unmasked_poison}}},
        {"revocability", {{"acc_bd_c", opt_json(masked_clean)}, {"acc_bd_p", opt_json(masked_poison)}}},
        {"trigger", {{"psnr", opt_json(trigger_psnr)}, {"ssim", opt_json(trigger_ssim)},
                     {"psnr_domain", "clamped real-valued composite"}}},
        {"num_classes", num_classes},
        {"eval_images", eval_images},
        {"eval_split", eval_split},
        {"mask_layers", mask_layers},
        {"config_fingerprint", config_fingerprint},
        {"attack_threshold", attack_threshold},
        {"attack_effective", attack_effective()},
        {"revoked", revoked()},
    };
}

std::string EvalReport::table() const {
    std::ostringstream os;
    os << std::left << std::setw(12) << "" << std::setw(12) << "" << std::setw(24) << "Effectiveness"
       << std::setw(24) << "Revocability" << "Trigger\n";
    os << std::setw(12) << "" << std::setw(12) << "Acc_Clean" << std::setw(12) << "Acc_BD-C" << std::setw(12)
       << "Acc_BD-P" << std::setw(12) << "Acc_BD-C" << std::setw(12) << "Acc_BD-P" << std::setw(10) << "PSNR"
       << "SSIM\n";
    os << std::setw(12) << "ours" << std::setw(12) << fmt(acc_clean_reference) << std::setw(12)
       << fmt(unmasked_clean) << std::setw(12) << fmt(unmasked_poison) << std::setw(12) << fmt(masked_clean)
       << std::setw(12) << fmt(masked_poison) << std::setw(10) << fmt(trigger_psnr)
       << (trigger_ssim ? fmt(*trigger_ssim) : "-") << "\n";
    os << "masks at layers:";
    for (auto l : mask_layers) os << " " << l;
    os << " | eval " << eval_split << " (" << eval_images << " images) | config " << config_fingerprint << "\n";
    return os.str();
}

EvalReport build_report(MaskedClassifier& model, const TriggerPattern& trigger, const DatasetHandle& data,
                        std::optional<double> clean_reference, const ReportOptions& options) {
    if (options.masked && !model.has_masks()) throw ShapeError("masked metrics requested but model has no masks");
    const auto& ids = data.test_ids();
    const Poisoner poison = trigger.defined() ? trigger_poisoner(trigger) : Poisoner{};
    EvalReport r;
    r.acc_clean_reference = clean_reference;
    r.num_classes = data.num_classes();
    r.eval_images = static_cast<std::int64_t>(ids.size());
    r.attack_threshold = options.attack_threshold_factor * 100.0 / static_cast<double>(data.num_classes());
    r.config_fingerprint = sha256_hex(options.config.dump()).substr(0, 16);
    r.unmasked_clean = accuracy(model, data, ids, {}, false);
    r.unmasked_poison = poison ? accuracy(model, data, ids, poison, false) : r.unmasked_clean;
    if (options.masked) {
        for (const auto& p : model.masks().points()) r.mask_layers.push_back(p.layer);
        r.masked_clean = accuracy(model, data, ids, {}, true);
        r.masked_poison = poison ? accuracy(model, data, ids, poison, true) : *r.masked_clean;
    }
    if (poison) {
        const auto q = trigger_quality(data, ids, poison);
        r.trigger_psnr = q.mean_psnr;
        r.trigger_ssim = q.mean_ssim;
    }
    return r;
}

}  // namespace revbd
