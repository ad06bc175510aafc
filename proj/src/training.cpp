#include "revbd/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "revbd/errors.hpp"
#include "revbd/evaluation.hpp"

namespace revbd {

namespace {

constexpr double kNotApplicable = std::numeric_limits<double>::quiet_NaN();

void require_rate(double rate, const char* name) {
    if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError(std::string(name) + " must be in (0, 1]");
}

void require_positive(double value, const char* name) {
    if (!(value > 0.0)) throw ConfigError(std::string(name) + " must be positive");
}

std::vector<std::vector<std::int64_t>> epoch_batches(const DatasetHandle& data, std::int64_t batch_size,
                                                     std::uint64_t seed, std::int64_t epoch) {
    auto ids = data.train_ids();
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<std::vector<std::int64_t>> batches;
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(ids.size(), start + static_cast<std::size_t>(batch_size));
        if (end - start < 2) break;  // both loss halves need a sample
        batches.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(start),
                             ids.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

// Random horizontal flip per sample and a shared random 4-pixel shift per batch.
torch::Tensor augment(const torch::Tensor& images, std::mt19937_64& rng) {
    constexpr std::int64_t kPad = 4;
    std::bernoulli_distribution coin(0.5);
    std::vector<std::int64_t> flips;
    for (std::int64_t i = 0; i < images.size(0); ++i) {
        if (coin(rng)) flips.push_back(i);
    }
    auto out = images.clone();
    if (!flips.empty()) {
        auto idx = torch::tensor(flips, torch::kLong);
        out.index_copy_(0, idx, out.index_select(0, idx).flip({3}));
    }
    std::uniform_int_distribution<std::int64_t> shift(0, 2 * kPad);
    auto padded = torch::nn::functional::pad(
        out, torch::nn::functional::PadFuncOptions({kPad, kPad, kPad, kPad}).mode(torch::kReplicate));
    return padded.narrow(2, shift(rng), images.size(2)).narrow(3, shift(rng), images.size(3)).contiguous();
}

std::vector<std::int64_t> eval_ids(const DatasetHandle& data, std::int64_t limit) {
    const auto& ids = data.test_ids();
    if (limit <= 0 || limit >= static_cast<std::int64_t>(ids.size())) return ids;
    // Evenly strided so every class stays represented.
    std::vector<std::int64_t> out;
    const double stride = static_cast<double>(ids.size()) / static_cast<double>(limit);
    for (std::int64_t i = 0; i < limit; ++i) out.push_back(ids[static_cast<std::size_t>(i * stride)]);
    return out;
}

void fill_accuracies(EpochMetrics& m, MaskedClassifier& model, const DatasetHandle& data,
                     const std::vector<std::int64_t>& ids, const Poisoner& poison) {
    m.unmasked_clean = accuracy(model, data, ids, {}, false);
    m.unmasked_poison = poison ? accuracy(model, data, ids, poison, false) : kNotApplicable;
    if (model.has_masks()) {
        m.masked_clean = accuracy(model, data, ids, {}, true);
        m.masked_poison = poison ? accuracy(model, data, ids, poison, true) : kNotApplicable;
    } else {
        m.masked_clean = kNotApplicable;
        m.masked_poison = kNotApplicable;
    }
}

struct LossAccumulator {
    std::array<double, 6> sum{};
    std::int64_t steps = 0;

    void add(const LossBreakdown& loss) {
        const auto v = loss.values();
        for (std::size_t i = 0; i < v.size(); ++i) sum[i] += v[i];
        ++steps;
    }
    std::array<double, 6> mean() const {
        auto out = sum;
        for (auto& v : out) v /= static_cast<double>(std::max<std::int64_t>(steps, 1));
        return out;
    }
};

void check_finite(const LossBreakdown& loss, long step, const char* phase) {
    if (loss.finite()) return;
    const auto v = loss.values();
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s loss diverged at step %ld (clean %.4g, poison %.4g, rev %.4g, reg %.4g, total %.4g)",
                  phase, step, v[0], v[1], v[2], v[3], v[5]);
    throw DivergenceError(buf, step);
}

MaskedClassifier fresh_model(const TrainConfig& config, const DatasetHandle& data, bool with_masks) {
    auto clf = build_classifier(config.arch, data.num_classes(), data.image_shape(), config.seed);
    clf->set_normalization(data.mean(), data.stddev());
    if (!with_masks) return MaskedClassifier(clf, std::nullopt);
    auto points = config.insertion_layers.empty() ? default_insertion_points(clf)
                                                   : insertion_points(clf, config.insertion_layers);
    return attach_masks(clf, points);
}

void set_sgd_lr(torch::optim::SGD& sgd, double lr) {
    for (auto& group : sgd.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
}

torch::optim::SGD make_sgd(const TrainConfig& config, Classifier& clf) {
    return torch::optim::SGD(clf->parameters(), torch::optim::SGDOptions(config.sgd_lr)
                                                    .momentum(config.sgd_momentum)
                                                    .weight_decay(config.sgd_weight_decay));
}

}  // namespace

void TrainConfig::validate() const {
    make_arch(arch, 10, {3, 32, 32});  // name check only
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (sgd_schedule != "constant" && sgd_schedule != "cosine") {
        throw ConfigError("sgd schedule must be 'constant' or 'cosine', got '" + sgd_schedule + "'");
    }
    if (batch_size < 2) throw ConfigError("batch size must be >= 2");
    if (trigger_ft_epochs < 0) throw ConfigError("trigger fine-tuning epochs must be >= 0");
    require_rate(sgd_lr, "sgd learning rate");
    require_rate(adam_lr, "adam learning rate");
    if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(sgd_weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
    require_positive(trigger_bound, "trigger bound t");
    if (confidence && !(*confidence > 0.0)) throw ConfigError("confidence cap must be positive");
    require_rate(schedule.initial_rate, "initial poisoning rate");
    require_rate(schedule.decay_factor, "poisoning decay factor");
    if (schedule.decay_start < 0 || schedule.decay_interval < 1) throw ConfigError("invalid poisoning schedule");
    require_rate(trigger_ft_poison_rate, "trigger fine-tuning poisoning rate");
    if (!(trigger_ft_slack >= 0.0)) throw ConfigError("trigger fine-tuning slack must be >= 0");
    if (eval_limit < 0) throw ConfigError("eval limit must be >= 0");
    for (std::size_t i = 1; i < insertion_layers.size(); ++i) {
        if (insertion_layers[i] <= insertion_layers[i - 1]) throw ConfigError("insertion layers must increase");
    }
}

double TrainConfig::cap_for(std::int64_t num_classes) const {
    return confidence ? *confidence : confidence_threshold(num_classes);
}

double TrainConfig::sgd_lr_at_epoch(std::int64_t epoch) const {
    if (sgd_schedule == "constant") return sgd_lr;
    const double progress = static_cast<double>(epoch) / static_cast<double>(std::max<std::int64_t>(epochs, 1));
    return 0.5 * sgd_lr * (1.0 + std::cos(M_PI * progress));
}

double TrainConfig::effective_alpha(const MaskSet& masks) const {
    if (!alpha_per_element) return alpha;
    std::int64_t n = 0;
    for (const auto& m : masks.tensors()) n += m.numel();
    return n > 0 ? alpha / static_cast<double>(n) : alpha;
}

nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json conf = c.confidence ? (std::isinf(*c.confidence) ? nlohmann::json("inf") : nlohmann::json(*c.confidence))
                                       : nlohmann::json("auto");
    return {{"arch", c.arch},
            {"insertion_layers", c.insertion_layers},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"sgd_lr", c.sgd_lr},
            {"sgd_momentum", c.sgd_momentum},
            {"sgd_weight_decay", c.sgd_weight_decay},
            {"adam_lr", c.adam_lr},
            {"alpha", c.alpha},
            {"alpha_per_element", c.alpha_per_element},
            {"sgd_schedule", c.sgd_schedule},
            {"beta", c.beta},
            {"t", c.trigger_bound},
            {"confidence", conf},
            {"poison_initial_rate", c.schedule.initial_rate},
            {"poison_decay_start", c.schedule.decay_start},
            {"poison_decay_interval", c.schedule.decay_interval},
            {"poison_decay_factor", c.schedule.decay_factor},
            {"trigger_ft_epochs", c.trigger_ft_epochs},
            {"trigger_ft_poison_rate", c.trigger_ft_poison_rate},
            {"trigger_ft_slack", c.trigger_ft_slack},
            {"seed", c.seed},
            {"augment", c.augment},
            {"eval_limit", c.eval_limit}};
}

double poison_rate_at_epoch(std::int64_t epoch, const PoisonSchedule& s) {
    if (epoch < 0) throw ConfigError("epoch must be >= 0");
    if (epoch < s.decay_start) return s.initial_rate;
    const auto halvings = (epoch - s.decay_start) / s.decay_interval + 1;
    return s.initial_rate * std::pow(s.decay_factor, static_cast<double>(halvings));
}

std::int64_t poisoned_count(std::int64_t batch_size, double rate) {
    const auto k = static_cast<std::int64_t>(std::floor(static_cast<double>(batch_size) * rate));
    return std::clamp<std::int64_t>(k, 1, batch_size - 1);
}

std::string metrics_csv_header() {
    return "phase,epoch,poison_rate,clean_ce,poison_capped,rev,reg,trigger_norm,total,"
           "unmasked_clean,unmasked_poison,masked_clean,masked_poison,trigger_linf,trigger_l2";
}

std::string to_csv(const EpochMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%lld,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.4f,%.4f,%.4f,%.4f,%.6g,%.6g",
                  m.phase.c_str(), static_cast<long long>(m.epoch), m.poison_rate, m.loss[0], m.loss[1], m.loss[2],
                  m.loss[3], m.loss[4], m.loss[5], m.unmasked_clean, m.unmasked_poison, m.masked_clean,
                  m.masked_poison, m.trigger_linf, m.trigger_l2);
    return buf;
}

std::vector<std::int64_t> train_probe_ids(const DatasetHandle& data, std::size_t limit) {
    const auto& ids = data.train_ids();
    if (ids.size() <= limit) return ids;
    std::vector<std::int64_t> out;
    const double stride = static_cast<double>(ids.size()) / static_cast<double>(limit);
    for (std::size_t i = 0; i < limit; ++i) out.push_back(ids[static_cast<std::size_t>(static_cast<double>(i) * stride)]);
    return out;
}

TrainArtifacts train_revocable(const TrainConfig& config, const DatasetHandle& data, const TrainHooks& hooks) {
    config.validate();
    auto model = fresh_model(config, data, true);
    auto trigger = init_trigger(data.image_shape(), config.trigger_bound, config.seed ^ 0x7219ULL);

    auto sgd = make_sgd(config, model.classifier());
    std::vector<torch::Tensor> adam_params{trigger.delta()};
    for (auto& m : model.masks().tensors()) adam_params.push_back(m);
    torch::optim::Adam adam(adam_params, torch::optim::AdamOptions(config.adam_lr));

    const double cap = config.cap_for(data.num_classes());
    const double alpha = config.effective_alpha(model.masks());
    const auto eval = eval_ids(data, config.eval_limit);
    std::mt19937_64 aug_rng(config.seed + 17);
    TrainArtifacts out{model, trigger, {}, config};
    long step = 0;

    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        set_sgd_lr(sgd, config.sgd_lr_at_epoch(epoch));
        const double rate = poison_rate_at_epoch(epoch, config);
        LossAccumulator acc;
        model.train();
        for (const auto& ids : epoch_batches(data, config.batch_size, config.seed, epoch)) {
            auto batch = data.train_batch(ids);
            auto images = config.augment ? augment(batch.images, aug_rng) : batch.images;
            const auto b = batch.size();
            const auto k = poisoned_count(b, rate);
            Batch poison{apply_trigger(images.narrow(0, 0, k), trigger.delta()), batch.labels.narrow(0, 0, k)};
            Batch clean{images.narrow(0, k, b - k), batch.labels.narrow(0, k, b - k)};

            sgd.zero_grad();
            adam.zero_grad();
            auto bd = backdoor_loss(model, clean, poison, cap);
            auto rev = revocability_loss(model, clean, poison);
            auto reg = mask_regularizer(model.masks());
            auto loss = total_loss(bd, rev, reg, alpha);
            check_finite(loss, step, "joint");
            loss.total.backward();
            sgd.step();
            adam.step();
            trigger.project();

            acc.add(loss);
            if (hooks.on_step) hooks.on_step(step, loss);
            ++step;
        }
        EpochMetrics m;
        m.phase = "joint";
        m.epoch = epoch;
        m.poison_rate = rate;
        m.loss = acc.mean();
        fill_accuracies(m, model, data, eval, trigger_poisoner(trigger));
        m.trigger_linf = trigger.linf();
        m.trigger_l2 = trigger.l2();
        if (m.trigger_linf > config.trigger_bound) throw Error("trigger left its bound after projection");
        out.history.push_back(m);
        if (hooks.on_epoch) hooks.on_epoch(m);
    }
    out.model.eval();
    return out;
}

TriggerFinetuneResult finetune_trigger(TrainArtifacts& artifacts, const DatasetHandle& data, const TrainHooks& hooks) {
    const auto& config = artifacts.config;
    config.validate();
    auto& model = artifacts.model;
    if (!model.has_masks()) throw ShapeError("trigger fine-tuning needs the trained masks");
    if (!artifacts.trigger.defined()) throw ShapeError("trigger fine-tuning needs a trained trigger");

    TriggerFinetuneResult result;
    TriggerPattern refined = artifacts.trigger.clone();
    const auto probe = train_probe_ids(data);
    result.poison_acc_before = accuracy(model, data, probe, trigger_poisoner(refined), false);

    FreezeGuard freeze(model);
    model.eval();
    torch::optim::Adam adam(std::vector<torch::Tensor>{refined.delta()}, torch::optim::AdamOptions(config.adam_lr));
    const double cap = config.cap_for(data.num_classes());
    const auto eval = eval_ids(data, config.eval_limit);
    long step = 0;

    for (std::int64_t epoch = 0; epoch < config.trigger_ft_epochs; ++epoch) {
        LossAccumulator acc;
        for (const auto& ids : epoch_batches(data, config.batch_size, config.seed ^ 0xF7ULL, epoch)) {
            auto batch = data.train_batch(ids);
            const auto b = batch.size();
            const auto k = poisoned_count(b, config.trigger_ft_poison_rate);
            Batch poison_raw{batch.images.narrow(0, 0, k), batch.labels.narrow(0, 0, k)};
            Batch clean{batch.images.narrow(0, k, b - k), batch.labels.narrow(0, k, b - k)};

            adam.zero_grad();
            auto loss = trigger_ft_loss(model, clean, poison_raw, refined.delta(), cap, config.beta);
            check_finite(loss, step, "trigger fine-tuning");
            loss.total.backward();
            adam.step();
            refined.project();

            acc.add(loss);
            if (hooks.on_step) hooks.on_step(step, loss);
            ++step;
        }
        EpochMetrics m;
        m.phase = "trigger_ft";
        m.epoch = epoch;
        m.poison_rate = config.trigger_ft_poison_rate;
        m.loss = acc.mean();
        fill_accuracies(m, model, data, eval, trigger_poisoner(refined));
        m.trigger_linf = refined.linf();
        m.trigger_l2 = refined.l2();
        if (m.trigger_linf > refined.bound()) throw Error("trigger left its bound after projection");
        result.history.push_back(m);
        if (hooks.on_epoch) hooks.on_epoch(m);
    }

    result.poison_acc_after = accuracy(model, data, probe, trigger_poisoner(refined), false);
    if (result.poison_acc_after - result.poison_acc_before > config.trigger_ft_slack) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "trigger fine-tuning weakened the attack: poison accuracy %.2f -> %.2f",
                      result.poison_acc_before, result.poison_acc_after);
        throw AttackDegradedError(buf, result.poison_acc_before, result.poison_acc_after);
    }
    artifacts.trigger = refined;
    result.trigger = refined;
    return result;
}

TrainArtifacts train_clean(const TrainConfig& config, const DatasetHandle& data, const TrainHooks& hooks) {
    config.validate();
    auto model = fresh_model(config, data, false);
    auto sgd = make_sgd(config, model.classifier());
    const auto eval = eval_ids(data, config.eval_limit);
    std::mt19937_64 aug_rng(config.seed + 17);
    TrainArtifacts out{model, {}, {}, config};
    long step = 0;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        set_sgd_lr(sgd, config.sgd_lr_at_epoch(epoch));
        LossAccumulator acc;
        model.train();
        for (const auto& ids : epoch_batches(data, config.batch_size, config.seed, epoch)) {
            auto batch = data.train_batch(ids);
            auto images = config.augment ? augment(batch.images, aug_rng) : batch.images;
            sgd.zero_grad();
            LossBreakdown loss;
            loss.clean_ce = torch::nn::functional::cross_entropy(model.forward(images, false), batch.labels);
            loss.total = loss.clean_ce;
            check_finite(loss, step, "clean");
            loss.total.backward();
            sgd.step();
            acc.add(loss);
            if (hooks.on_step) hooks.on_step(step, loss);
            ++step;
        }
        EpochMetrics m;
        m.phase = "clean";
        m.epoch = epoch;
        m.loss = acc.mean();
        fill_accuracies(m, model, data, eval, {});
        out.history.push_back(m);
        if (hooks.on_epoch) hooks.on_epoch(m);
    }
    out.model.eval();
    return out;
}

TrainArtifacts train_baseline_backdoor(const TrainConfig& config, const DatasetHandle& data,
                                       const BaselineTriggerSpec& trigger, const TrainHooks& hooks) {
    config.validate();
    const auto poisoner = baseline_poisoner(trigger);
    auto model = fresh_model(config, data, false);
    auto sgd = make_sgd(config, model.classifier());
    const double cap = config.cap_for(data.num_classes());
    const auto eval = eval_ids(data, config.eval_limit);
    std::mt19937_64 aug_rng(config.seed + 17);
    TrainArtifacts out{model, {}, {}, config};
    long step = 0;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        set_sgd_lr(sgd, config.sgd_lr_at_epoch(epoch));
        const double rate = poison_rate_at_epoch(epoch, config);
        LossAccumulator acc;
        model.train();
        for (const auto& ids : epoch_batches(data, config.batch_size, config.seed, epoch)) {
            auto batch = data.train_batch(ids);
            auto images = config.augment ? augment(batch.images, aug_rng) : batch.images;
            const auto b = batch.size();
            const auto k = poisoned_count(b, rate);
            Batch poison{poisoner(images.narrow(0, 0, k)), batch.labels.narrow(0, 0, k)};
            Batch clean{images.narrow(0, k, b - k), batch.labels.narrow(0, k, b - k)};
            sgd.zero_grad();
            auto bd = backdoor_loss(model, clean, poison, cap);
            LossBreakdown loss;
            loss.clean_ce = bd.clean_ce;
            loss.poison_capped = bd.poison_capped;
            loss.total = bd.value;
            check_finite(loss, step, "baseline");
            loss.total.backward();
            sgd.step();
            acc.add(loss);
            if (hooks.on_step) hooks.on_step(step, loss);
            ++step;
        }
        EpochMetrics m;
        m.phase = "baseline";
        m.epoch = epoch;
        m.poison_rate = rate;
        m.loss = acc.mean();
        fill_accuracies(m, model, data, eval, poisoner);
        out.history.push_back(m);
        if (hooks.on_epoch) hooks.on_epoch(m);
    }
    out.model.eval();
    return out;
}

}  // namespace revbd
