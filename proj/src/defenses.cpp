#include "revbd/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>

#include "revbd/errors.hpp"
#include "revbd/objectives.hpp"

namespace revbd {

namespace {

using BatchLoss = std::function<torch::Tensor(MaskedClassifier&, const Batch&)>;

void require_trial(const MaskedClassifier& model, const char* what) {
    if (model.has_masks()) throw ConfigError(std::string(what) + " operates on the trial model and must not see masks");
}

void require_subset(const Subset& clean) {
    if (clean.ids.empty()) throw DataError("defense needs a non-empty clean subset");
}

// SGD over shuffled subset batches; returns the number of steps taken.
std::int64_t train_on_subset(MaskedClassifier& model, const DatasetHandle& data, const std::vector<std::int64_t>& ids,
                             const DefenseConfig& c, std::int64_t epochs, std::uint64_t stream, const BatchLoss& loss_fn) {
    if (epochs <= 0) return 0;
    torch::optim::SGD sgd(model.classifier()->parameters(),
                          torch::optim::SGDOptions(c.lr).momentum(c.momentum).weight_decay(c.weight_decay));
    std::int64_t steps = 0;
    auto order = ids;
    model.train();
    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        std::mt19937_64 rng((c.seed + 1) * 0x9E3779B97F4A7C15ULL ^ (stream << 32) ^ static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(c.batch_size)) {
            const auto n = std::min(order.size() - start, static_cast<std::size_t>(c.batch_size));
            if (n < 2) break;  // batch-norm needs two samples
            auto batch = data.train_batch(std::span<const std::int64_t>(order).subspan(start, n));
            sgd.zero_grad();
            auto loss = loss_fn(model, batch);
            if (!std::isfinite(loss.item<double>())) throw DivergenceError("defense loss diverged", steps);
            loss.backward();
            sgd.step();
            ++steps;
        }
    }
    model.eval();
    return steps;
}

torch::Tensor clean_ce(MaskedClassifier& model, const Batch& b) {
    return torch::nn::functional::cross_entropy(model.forward(b.images, false), b.labels);
}

void measure(MaskedClassifier& model, const DatasetHandle& data, const DefenseProbe& probe, bool masks_active,
             double& clean, std::optional<double>& poison) {
    clean = accuracy(model, data, probe.eval_ids, {}, masks_active);
    if (probe.poison) poison = accuracy(model, data, probe.eval_ids, probe.poison, masks_active);
}

DefenseOutcome start(DefenseKind kind, MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                     const DefenseConfig& config, const DefenseProbe& probe) {
    config.validate();
    require_subset(clean);
    data.audit_train_only(clean.ids);
    DefenseOutcome out;
    out.kind = kind;
    out.subset_fingerprint = clean.fingerprint;
    out.subset_size = static_cast<std::int64_t>(clean.ids.size());
    measure(model, data, probe, false, out.pre_clean, out.pre_poison);
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "-"; }

}  // namespace

std::string to_string(DefenseKind kind) {
    switch (kind) {
        case DefenseKind::Finetune: return "finetune";
        case DefenseKind::Fineprune: return "fineprune";
        case DefenseKind::Nad: return "nad";
        case DefenseKind::Erase: return "erase";
        case DefenseKind::SpuriousMask: return "spurious_mask";
    }
    return "?";
}

DefenseKind defense_kind_from_string(const std::string& name) {
    for (auto k : {DefenseKind::Finetune, DefenseKind::Fineprune, DefenseKind::Nad, DefenseKind::Erase,
                   DefenseKind::SpuriousMask}) {
        if (to_string(k) == name) return k;
    }
    throw ConfigError("unknown defense '" + name + "'");
}

void DefenseConfig::validate() const {
    if (!(clean_fraction > 0.0 && clean_fraction <= 1.0)) throw ConfigError("clean fraction must be in (0, 1]");
    if (epochs < 0) throw ConfigError("defense epochs must be >= 0");
    if (batch_size < 2) throw ConfigError("defense batch size must be >= 2");
    if (!(lr > 0.0)) throw ConfigError("defense learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("defense momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("defense weight decay must be >= 0");
    if (prune_step < 1) throw ConfigError("prune step must be >= 1");
    if (!(drop_budget >= 0.0)) throw ConfigError("accuracy drop budget must be >= 0");
    if (prune_finetune_epochs < 0) throw ConfigError("prune fine-tune epochs must be >= 0");
    if (max_pruned && *max_pruned < 0) throw ConfigError("max pruned channels must be >= 0");
    if (!(nad_weight >= 0.0)) throw ConfigError("NAD weight must be >= 0");
    if (nad_teacher_epochs < 0) throw ConfigError("NAD teacher epochs must be >= 0");
    if (!(spurious_alpha >= 0.0)) throw ConfigError("spurious-mask alpha must be >= 0");
    if (!(spurious_lr > 0.0)) throw ConfigError("spurious-mask learning rate must be positive");
}

nlohmann::json to_json(const DefenseConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"clean_fraction", c.clean_fraction},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"prune_step", c.prune_step},
            {"drop_budget", c.drop_budget},
            {"prune_finetune_epochs", c.prune_finetune_epochs},
            {"max_pruned", c.max_pruned ? nlohmann::json(*c.max_pruned) : nlohmann::json(nullptr)},
            {"nad_weight", c.nad_weight},
            {"nad_teacher_epochs", c.nad_teacher_epochs},
            {"spurious_alpha", c.spurious_alpha},
            {"spurious_lr", c.spurious_lr},
            {"seed", c.seed}};
}

nlohmann::json DefenseOutcome::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json curve_json = nlohmann::json::array();
    for (const auto& r : curve) {
        curve_json.push_back({{"pruned", r.pruned}, {"clean_acc", r.clean_acc}, {"poison_acc", opt(r.poison_acc)},
                              {"subset_clean", r.subset_clean}});
    }
    return {{"kind", revbd::to_string(kind)},
            {"pre_clean", pre_clean},
            {"pre_poison", opt(pre_poison)},
            {"post_clean", post_clean},
            {"post_poison", opt(post_poison)},
            {"steps", steps},
            {"subset_size", subset_size},
            {"subset_fingerprint", subset_fingerprint},
            {"note", note},
            {"pruning_curve", curve_json}};
}

DefenseProbe test_probe(const DatasetHandle& data, Poisoner poison) { return {data.test_ids(), std::move(poison)}; }

torch::Tensor attention_map(const torch::Tensor& feature) {
    if (feature.dim() != 4) throw ShapeError("attention map needs a B x C x H x W feature map");
    auto a = feature.pow(2).mean(1).flatten(1);
    return torch::nn::functional::normalize(a, torch::nn::functional::NormalizeFuncOptions().p(2).dim(1).eps(1e-12));
}

torch::Tensor channel_dormancy(MaskedClassifier& model, const DatasetHandle& data, std::span<const std::int64_t> ids) {
    const auto layer = model.classifier()->spec().prune_layer;
    if (layer < 0) throw ConfigError("architecture has no prune layer");
    if (ids.empty()) throw DataError("dormancy over an empty subset");
    torch::NoGradGuard no_grad;
    const bool was_training = model.classifier()->is_training();
    model.eval();
    torch::Tensor total;
    constexpr std::size_t kChunk = 500;
    for (std::size_t start = 0; start < ids.size(); start += kChunk) {
        auto batch = data.gather(ids.subspan(start, std::min(kChunk, ids.size() - start)));
        model.forward(batch.images, false, [&](std::size_t i, const torch::Tensor& x) {
            if (static_cast<std::int64_t>(i) == layer) {
                auto s = x.abs().sum({0, 2, 3}) / static_cast<double>(x.size(2) * x.size(3));
                total = total.defined() ? total + s : s;
            }
            return x;
        });
    }
    model.train(was_training);
    return total / static_cast<double>(ids.size());
}

DefenseOutcome defense_finetune(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                                const DefenseConfig& config, const DefenseProbe& probe) {
    require_trial(model, "fine-tuning");
    auto out = start(DefenseKind::Finetune, model, data, clean, config, probe);
    out.steps = train_on_subset(model, data, clean.ids, config, config.epochs, 0, clean_ce);
    measure(model, data, probe, false, out.post_clean, out.post_poison);
    return out;
}

DefenseOutcome defense_fineprune(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                                 const DefenseConfig& config, const DefenseProbe& probe) {
    require_trial(model, "fine-pruning");
    auto out = start(DefenseKind::Fineprune, model, data, clean, config, probe);
    auto gate = model.classifier()->channel_gate();
    if (!gate.defined()) throw ConfigError("architecture has no prune layer");

    const auto dormancy = channel_dormancy(model, data, clean.ids);
    std::vector<std::int64_t> order;
    {
        auto sorted = dormancy.argsort(0, false);
        for (std::int64_t i = 0; i < sorted.size(0); ++i) {
            const auto ch = sorted[i].item<std::int64_t>();
            if (gate[ch].item<float>() != 0.0f) order.push_back(ch);
        }
    }
    // Keep one channel alive so the head still has an input.
    const auto available = static_cast<std::int64_t>(order.size()) - 1;
    const auto limit = std::min(config.max_pruned.value_or(available), available);
    const double base_subset = accuracy(model, data, clean.ids, {}, false);
    out.curve.push_back({0, out.pre_clean, out.pre_poison, base_subset});

    std::int64_t pruned = 0;
    std::uint64_t interval = 0;
    while (pruned < limit) {
        auto snapshot = clone_classifier(model.classifier());
        const auto n = std::min(config.prune_step, limit - pruned);
        {
            torch::NoGradGuard no_grad;
            for (std::int64_t i = pruned; i < pruned + n; ++i) gate[order[static_cast<std::size_t>(i)]] = 0.0f;
        }
        const auto steps = train_on_subset(model, data, clean.ids, config, config.prune_finetune_epochs, ++interval, clean_ce);
        const double subset_acc = accuracy(model, data, clean.ids, {}, false);
        if (base_subset - subset_acc > 100.0 * config.drop_budget) {
            copy_state(snapshot, model.classifier());
            break;
        }
        out.steps += steps;
        pruned += n;
        PruneRecord r{pruned, 0.0, std::nullopt, subset_acc};
        measure(model, data, probe, false, r.clean_acc, r.poison_acc);
        out.curve.push_back(r);
    }
    measure(model, data, probe, false, out.post_clean, out.post_poison);
    out.note = "pruned " + std::to_string(pruned) + " of " + std::to_string(gate.size(0)) + " channels at layer " +
               std::to_string(model.classifier()->spec().prune_layer);
    return out;
}

DefenseOutcome defense_nad(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                           const DefenseConfig& config, const DefenseProbe& probe) {
    require_trial(model, "NAD");
    auto out = start(DefenseKind::Nad, model, data, clean, config, probe);
    out.note = "attention = L2-normalised channel mean of F^2 at the stage outputs";
    if (config.nad_weight == 0.0) {
        out.steps = train_on_subset(model, data, clean.ids, config, config.epochs, 0, clean_ce);
        measure(model, data, probe, false, out.post_clean, out.post_poison);
        return out;
    }

    auto teacher = model.clone();
    out.steps += train_on_subset(teacher, data, clean.ids, config, config.nad_teacher_epochs, 7, clean_ce);
    teacher.eval();
    const auto& stages = model.classifier()->spec().stage_outputs;
    auto is_stage = [&](std::size_t i) {
        return std::find(stages.begin(), stages.end(), static_cast<std::int64_t>(i)) != stages.end();
    };
    auto capture = [&](MaskedClassifier& m, const torch::Tensor& x, std::vector<torch::Tensor>& maps) {
        return m.forward(x, false, [&](std::size_t i, const torch::Tensor& f) {
            if (is_stage(i)) maps.push_back(attention_map(f));
            return f;
        });
    };
    const double weight = config.nad_weight;
    out.steps += train_on_subset(model, data, clean.ids, config, config.epochs, 0,
                                 [&](MaskedClassifier& student, const Batch& b) {
                                     std::vector<torch::Tensor> s_maps, t_maps;
                                     {
                                         torch::NoGradGuard no_grad;
                                         capture(teacher, b.images, t_maps);
                                     }
                                     auto logits = capture(student, b.images, s_maps);
                                     auto loss = torch::nn::functional::cross_entropy(logits, b.labels);
                                     for (std::size_t k = 0; k < s_maps.size(); ++k) {
                                         loss = loss + weight * (s_maps[k] - t_maps[k]).pow(2).mean();
                                     }
                                     return loss;
                                 });
    measure(model, data, probe, false, out.post_clean, out.post_poison);
    return out;
}

DefenseOutcome erase_with_pairs(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                                const Poisoner& trigger, const DefenseConfig& config, const DefenseProbe& probe) {
    if (!trigger) throw ConfigError("erasing needs the trigger");
    auto out = start(DefenseKind::Erase, model, data, clean, config, probe);
    out.steps = train_on_subset(model, data, clean.ids, config, config.epochs, 0,
                                [&](MaskedClassifier& m, const Batch& b) {
                                    Batch poison{trigger(b.images), b.labels};
                                    return erasing_loss(m, b, poison);
                                });
    measure(model, data, probe, false, out.post_clean, out.post_poison);
    return out;
}

DefenseOutcome spurious_mask_attack(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                                    const DefenseConfig& config, const DefenseProbe& probe) {
    require_trial(model, "the spurious-mask attack");
    auto out = start(DefenseKind::SpuriousMask, model, data, clean, config, probe);
    model = attach_masks(model.classifier(), default_insertion_points(model.classifier()));

    std::vector<std::pair<torch::Tensor, bool>> frozen;
    for (auto& p : model.classifier()->parameters()) {
        frozen.emplace_back(p, p.requires_grad());
        p.requires_grad_(false);
    }
    torch::optim::Adam adam(model.masks().tensors(), torch::optim::AdamOptions(config.spurious_lr));
    // The classifier stays in eval mode: only the masks are the attacker's to change.
    model.eval();
    auto order = clean.ids;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::mt19937_64 rng((config.seed + 1) * 0x9E3779B97F4A7C15ULL ^ static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
            const auto n = std::min(order.size() - s, static_cast<std::size_t>(config.batch_size));
            auto b = data.train_batch(std::span<const std::int64_t>(order).subspan(s, n));
            adam.zero_grad();
            auto loss = torch::nn::functional::cross_entropy(model.forward(b.images, true), b.labels) +
                        config.spurious_alpha * mask_regularizer(model.masks());
            if (!std::isfinite(loss.item<double>())) throw DivergenceError("spurious-mask loss diverged", out.steps);
            loss.backward();
            adam.step();
            ++out.steps;
        }
    }
    for (auto& [p, flag] : frozen) p.requires_grad_(flag);
    measure(model, data, probe, true, out.post_clean, out.post_poison);
    {
        torch::NoGradGuard no_grad;
        double dev = 0.0;
        for (const auto& m : model.masks().tensors()) dev = std::max(dev, (m - 1.0).abs().max().item<double>());
        out.note = "max |M - 1| = " + fmt(dev);
    }
    return out;
}

DefenseOutcome run_defense(MaskedClassifier& model, const DatasetHandle& data, const Subset& clean,
                           const DefenseConfig& config, const DefenseProbe& probe, const Poisoner& trigger) {
    switch (config.kind) {
        case DefenseKind::Finetune: return defense_finetune(model, data, clean, config, probe);
        case DefenseKind::Fineprune: return defense_fineprune(model, data, clean, config, probe);
        case DefenseKind::Nad: return defense_nad(model, data, clean, config, probe);
        case DefenseKind::Erase: return erase_with_pairs(model, data, clean, trigger, config, probe);
        case DefenseKind::SpuriousMask: return spurious_mask_attack(model, data, clean, config, probe);
    }
    throw ConfigError("unknown defense");
}

std::string defense_table_csv(const std::vector<DefenseOutcome>& outcomes) {
    std::ostringstream os;
    os << "defense,pre_clean,pre_poison,post_clean,post_poison,steps,subset_size\n";
    for (const auto& o : outcomes) {
        os << to_string(o.kind) << ',' << fmt(o.pre_clean) << ',' << fmt(o.pre_poison) << ',' << fmt(o.post_clean)
           << ',' << fmt(o.post_poison) << ',' << o.steps << ',' << o.subset_size << '\n';
    }
    return os.str();
}

std::string defense_table_text(const std::vector<DefenseOutcome>& outcomes) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "" << std::setw(24) << "Before" << "After\n";
    os << std::setw(16) << "Defense" << std::setw(12) << "Clean" << std::setw(12) << "Poison" << std::setw(12)
       << "Clean" << std::setw(12) << "Poison" << "Steps\n";
    for (const auto& o : outcomes) {
        os << std::setw(16) << to_string(o.kind) << std::setw(12) << fmt(o.pre_clean) << std::setw(12)
           << fmt(o.pre_poison) << std::setw(12) << fmt(o.post_clean) << std::setw(12) << fmt(o.post_poison)
           << o.steps << '\n';
        if (!o.note.empty()) os << "  " << o.note << '\n';
    }
    return os.str();
}

std::string pruning_curve_csv(const DefenseOutcome& outcome) {
    std::ostringstream os;
    os << "pruned,clean_acc,poison_acc,subset_clean\n";
    for (const auto& r : outcome.curve) {
        os << r.pruned << ',' << fmt(r.clean_acc) << ',' << fmt(r.poison_acc) << ',' << fmt(r.subset_clean) << '\n';
    }
    return os.str();
}

}  // namespace revbd
