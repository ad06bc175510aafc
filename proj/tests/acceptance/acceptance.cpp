// Desk-scale acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Profile: synthetic-toy, 10 classes, 32x32, 1000 train / 100 test images per class,
// tiny-cnn, 60 joint epochs at batch 128, alpha 0 (mask regulariser off; with the summed
// L1 term at alpha 10 the masks stay pinned at one and no backdoor forms). Everything
// else uses the library defaults. Tolerances below are fixed; do not loosen them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "revbd/defenses.hpp"
#include "revbd/errors.hpp"
#include "revbd/evaluation.hpp"
#include "revbd/objectives.hpp"
#include "revbd/training.hpp"

using namespace revbd;

namespace {

// Pinned tolerances.
constexpr double kIdentityRel = 1e-6;
constexpr double kGradRel = 1e-4;
constexpr double kAttackMax = 15.0;         // unmasked poison accuracy, chance = 10
constexpr double kFidelityDrop = 5.0;       // vs clean control
constexpr double kRevocationSlack = 5.0;    // masked poison >= masked clean - 5
constexpr double kFtPoisonRise = 2.0;
constexpr double kFinetunePoisonMax = 20.0;
constexpr double kFinetuneCleanBand = 3.0;
constexpr double kFineprunePoisonMax = 25.0;
constexpr double kSpuriousShift = 5.0;
constexpr double kEraseGap = 5.0;
constexpr double kUncappedCleanMax = 20.0;  // "toward chance"

constexpr std::int64_t kEpochs = 60;
constexpr std::int64_t kUncappedEpochs = 20;

struct Verdict {
    int id;
    std::string name;
    bool pass;
    std::string detail;
};

std::vector<Verdict> verdicts;
nlohmann::json measurements;

void record(int id, const std::string& name, bool pass, const std::string& detail) {
    verdicts.push_back({id, name, pass, detail});
    std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << name << " -- " << detail << std::endl;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

auto clock_start = std::chrono::steady_clock::now();
void stage(const std::string& what) {
    const auto s = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    std::cerr << fmt("[%7.1fs] ", s) << what << std::endl;
}

// ---- unit-level criteria ----------------------------------------------------------

void identity_masks() {
    double worst = 0.0;
    for (const std::string arch : {"tiny-cnn", "resnet18-slim", "vgg11-slim"}) {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            auto clf = build_classifier(arch, 10, {3, 32, 32}, seed);
            auto model = attach_masks(clf, default_insertion_points(clf));
            torch::manual_seed(seed + 100);
            auto x = torch::rand({4, 3, 32, 32}) * 255;
            for (bool training : {true, false}) {
                model.train(training);
                torch::NoGradGuard g;
                auto bare = model.forward(x, false);
                auto masked = model.forward(x, true);
                const double scale = std::max(bare.abs().max().item<double>(), 1e-12);
                worst = std::max(worst, (masked - bare).abs().max().item<double>() / scale);
            }
        }
    }
    measurements["identity_max_rel"] = worst;
    record(1, "identity-mask equivalence", worst <= kIdentityRel, fmt("max relative deviation %.3g (<= %.0e)", worst, kIdentityRel));
}

ArchSpec small_arch() {
    ArchSpec a;
    a.name = "small";
    a.layers = {LayerDesc::conv(3, 4, 3, 1, 1), LayerDesc::batch_norm(4), LayerDesc::relu(), LayerDesc::max_pool(2),
                LayerDesc::conv(4, 4, 3, 1, 1), LayerDesc::relu(), LayerDesc::global_avg_pool(),
                LayerDesc::linear(4, 3)};
    a.stage_outputs = {3, 5};
    a.prune_layer = 5;
    return a;
}

double fd_rel(torch::Tensor& t, const std::function<torch::Tensor()>& loss) {
    auto analytic = t.grad().clone();
    auto numeric = torch::zeros_like(t);
    torch::NoGradGuard g;
    auto flat = t.view({-1});
    auto nflat = numeric.view({-1});
    const double h = 1e-6;
    for (std::int64_t i = 0; i < flat.size(0); ++i) {
        const double keep = flat[i].item<double>();
        flat[i] = keep + h;
        const double up = loss().item<double>();
        flat[i] = keep - h;
        const double down = loss().item<double>();
        flat[i] = keep;
        nflat[i] = (up - down) / (2 * h);
    }
    return (analytic - numeric).norm().item<double>() / std::max(numeric.norm().item<double>(), 1e-10);
}

void gradients() {
    auto clf = build_classifier(small_arch(), 3, {3, 8, 8}, 7);
    clf->to(torch::kDouble);
    auto points = insertion_points(clf, {3, 5});
    torch::manual_seed(8);
    MaskedClassifier model(clf, MaskSet(points, {torch::rand({4, 4, 4}, torch::kDouble) + 0.3,
                                                  torch::rand({4, 4, 4}, torch::kDouble) + 0.3}));
    model.train();
    auto delta = ((torch::rand({3, 8, 8}, torch::kDouble) * 2 - 1) * 10).requires_grad_(true);
    Batch clean{torch::rand({4, 3, 8, 8}, torch::kDouble) * 175 + 40, torch::tensor({0, 1, 2, 0}, torch::kLong)};
    Batch raw{torch::rand({3, 3, 8, 8}, torch::kDouble) * 175 + 40, torch::tensor({2, 1, 0}, torch::kLong)};
    const double cap = confidence_threshold(3);
    auto loss = [&] {
        Batch poison{apply_trigger(raw.images, delta), raw.labels};
        auto bd = backdoor_loss(model, clean, poison, cap);
        return total_loss(bd, revocability_loss(model, clean, poison), mask_regularizer(model.masks()), 0.3).total;
    };
    std::int64_t count = 0;
    for (auto& p : clf->parameters()) count += p.numel();
    loss().backward();
    double worst = 0.0;
    for (auto& p : clf->parameters()) worst = std::max(worst, fd_rel(p, loss));
    worst = std::max(worst, fd_rel(delta, loss));
    for (auto& m : model.masks().tensors()) worst = std::max(worst, fd_rel(m, loss));
    measurements["gradient_max_rel"] = worst;
    record(2, "gradient correctness", worst <= kGradRel && count <= 1000,
           fmt("%lld parameters, worst relative error %.3g (<= %.0e)", static_cast<long long>(count), worst, kGradRel));
}

void cap_semantics() {
    const double c = confidence_threshold(3);
    auto clean_logits = torch::tensor({{2.0, 0.0, -1.0}, {0.0, 1.0, 0.0}}, torch::kDouble);
    auto labels = torch::tensor({0, 1}, torch::kLong);
    auto poison_logits = torch::tensor({{10.0, -10.0, 0.0}, {12.0, 0.0, -9.0}}, torch::kDouble).requires_grad_(true);
    auto bd = backdoor_loss_from_logits(clean_logits, labels, poison_logits, torch::tensor({1, 2}, torch::kLong), c);
    auto clean_ce = torch::nn::functional::cross_entropy(clean_logits, labels).item<double>();
    const bool value_ok = bd.value.item<double>() == clean_ce - c;
    bd.value.backward();
    const double grad = poison_logits.grad().abs().max().item<double>();

    // Directional derivative along a random logit direction.
    torch::manual_seed(4);
    auto dir = torch::randn({2, 3}, torch::kDouble);
    const double h = 1e-4;
    auto at = [&](double e) {
        return backdoor_loss_from_logits(clean_logits, labels, poison_logits.detach() + e * dir,
                                         torch::tensor({1, 2}, torch::kLong), c)
            .value.item<double>();
    };
    const double dd = (at(h) - at(-h)) / (2 * h);
    record(3, "cap semantics", value_ok && grad == 0.0 && dd == 0.0,
           fmt("L_bd = clean CE - c exactly: %s, |grad| %.3g, directional derivative %.3g", value_ok ? "yes" : "no",
               grad, dd));
}

void schedule_values() {
    PoisonSchedule s;
    const double a = poison_rate_at_epoch(0, s), b = poison_rate_at_epoch(80, s), c = poison_rate_at_epoch(120, s);
    record(4, "schedule values", a == 0.5 && b == 0.25 && c == 0.015625, fmt("%.6g / %.6g / %.6g", a, b, c));
}

// ---- integration criteria ---------------------------------------------------------

TrainConfig desk_config() {
    TrainConfig c;
    c.arch = "tiny-cnn";
    c.epochs = kEpochs;
    c.batch_size = 128;
    c.alpha = 0.0;
    c.seed = 1;
    return c;
}

DatasetHandle desk_data() {
    DatasetOptions o;
    o.seed = 1;
    o.image_size = 32;
    o.synthetic_train_per_class = 1000;
    o.synthetic_test_per_class = 100;
    return load_dataset("synthetic-toy", o);
}

MaskedClassifier trial_of(const MaskedClassifier& model) {
    return MaskedClassifier(clone_classifier(model.classifier()), std::nullopt);
}

DefenseConfig desk_defense(DefenseKind kind) {
    DefenseConfig d;
    d.kind = kind;
    d.clean_fraction = 0.05;
    d.epochs = 50;
    d.lr = 0.01;
    d.seed = 11;
    return d;
}

EvalReport report_of(MaskedClassifier& model, const TriggerPattern& trig, const DatasetHandle& data,
                     std::optional<double> reference, bool masked) {
    ReportOptions o;
    o.masked = masked;
    return build_report(model, trig, data, reference, o);
}

bool history_within_bound(const std::vector<EpochMetrics>& h, double t) {
    for (const auto& m : h)
        if (!(m.trigger_linf <= t)) return false;
    return true;
}

}  // namespace

int main() {
    torch::set_num_threads(std::max(1, static_cast<int>(std::thread::hardware_concurrency())));
    std::cout << std::fixed;

    identity_masks();
    gradients();
    cap_semantics();
    schedule_values();

    stage("loading desk data");
    const auto data = desk_data();
    const auto cfg = desk_config();
    measurements["train_images"] = data.train_ids().size();
    measurements["epochs"] = cfg.epochs;

    stage("clean control");
    auto control = train_clean(cfg, data);
    const double control_acc = accuracy(control.model, data, data.test_ids(), {}, false);
    measurements["clean_control"] = control_acc;

    stage("joint training");
    TrainHooks hooks;
    hooks.on_epoch = [](const EpochMetrics& m) { std::cerr << "  " << to_csv(m) << std::endl; };
    auto art = train_revocable(cfg, data, hooks);
    const auto joint_history = art.history;
    auto joint = report_of(art.model, art.trigger, data, control_acc, true);
    measurements["joint"] = joint.to_json();

    stage("trigger fine-tuning");
    const auto q_before = trigger_quality(data, data.test_ids(), trigger_poisoner(art.trigger));
    std::optional<TriggerFinetuneResult> ft;
    std::string ft_error;
    try {
        ft = finetune_trigger(art, data, hooks);
    } catch (const AttackDegradedError& e) {
        ft_error = e.what();
    }
    const auto q_after = trigger_quality(data, data.test_ids(), trigger_poisoner(art.trigger));
    auto final_report = report_of(art.model, art.trigger, data, control_acc, true);
    measurements["final"] = final_report.to_json();

    // 5
    {
        const auto& r = final_report;
        const bool effective = r.unmasked_poison <= kAttackMax;
        const bool fidelity = r.unmasked_clean >= control_acc - kFidelityDrop;
        const bool revocable = *r.masked_poison >= *r.masked_clean - kRevocationSlack;
        record(5, "desk-scale effectiveness / fidelity / revocability", effective && fidelity && revocable,
               fmt("unmasked clean %.2f (control %.2f), unmasked poison %.2f (<= %.0f), masked clean %.2f, "
                   "masked poison %.2f",
                   r.unmasked_clean, control_acc, r.unmasked_poison, kAttackMax, *r.masked_clean, *r.masked_poison));
    }
    // 6
    {
        const double t = cfg.trigger_bound;
        bool ok = history_within_bound(joint_history, t) && (!ft || history_within_bound(ft->history, t));
        ok = ok && art.trigger.linf() <= t;
        auto batch = data.gather(data.test_ids());
        auto stamped = apply_trigger(batch.images, art.trigger);
        const double lo = stamped.min().item<double>(), hi = stamped.max().item<double>();
        ok = ok && lo >= 0.0 && hi <= 255.0;
        record(6, "trigger constraint", ok,
               fmt("max ||delta||_inf over %zu epochs = %.4f (t = %.0f), poisoned range [%.1f, %.1f]",
                   joint_history.size() + (ft ? ft->history.size() : 0), art.trigger.linf(), t, lo, hi));
    }
    // 7
    {
        const double rise = ft ? ft->poison_acc_after - ft->poison_acc_before : NAN;
        const bool ok = ft && q_after.mean_psnr > q_before.mean_psnr && q_after.mean_ssim >= q_before.mean_ssim &&
                        rise <= kFtPoisonRise;
        measurements["trigger_ft"] = {{"psnr_before", q_before.mean_psnr}, {"psnr_after", q_after.mean_psnr},
                                      {"ssim_before", q_before.mean_ssim}, {"ssim_after", q_after.mean_ssim},
                                      {"poison_rise", ft ? rise : 0.0}};
        record(7, "trigger fine-tuning quality", ok,
               ft ? fmt("PSNR %.3f -> %.3f dB, SSIM %.5f -> %.5f, poison accuracy %+.2f points", q_before.mean_psnr,
                        q_after.mean_psnr, q_before.mean_ssim, q_after.mean_ssim, rise)
                  : "fine-tuning aborted: " + ft_error);
    }

    const auto probe = test_probe(data, trigger_poisoner(art.trigger));
    // 8
    {
        stage("defenses");
        auto ft_cfg = desk_defense(DefenseKind::Finetune);
        auto ft_model = trial_of(art.model);
        auto sub = clean_fraction_split(data, ft_cfg.clean_fraction, ft_cfg.seed);
        auto f = defense_finetune(ft_model, data, sub, ft_cfg, probe);
        auto fp_cfg = desk_defense(DefenseKind::Fineprune);
        auto fp_model = trial_of(art.model);
        auto p = defense_fineprune(fp_model, data, sub, fp_cfg, probe);
        measurements["finetune"] = f.to_json();
        measurements["fineprune"] = p.to_json();
        const bool ok = *f.post_poison <= kFinetunePoisonMax &&
                        std::abs(f.post_clean - f.pre_clean) <= kFinetuneCleanBand &&
                        *p.post_poison <= kFineprunePoisonMax;
        record(8, "defense resistance", ok,
               fmt("fine-tune: clean %.2f -> %.2f, poison %.2f -> %.2f; fine-prune (%s): poison %.2f -> %.2f",
                   f.pre_clean, f.post_clean, *f.pre_poison, *f.post_poison, p.note.c_str(), *p.pre_poison,
                   *p.post_poison));
    }
    // 9
    {
        stage("spurious masks");
        auto cfg9 = desk_defense(DefenseKind::SpuriousMask);
        cfg9.spurious_alpha = cfg.alpha;  // the adversary gets the seller's own regulariser
        auto m = trial_of(art.model);
        auto sub = clean_fraction_split(data, cfg9.clean_fraction, cfg9.seed);
        auto s = spurious_mask_attack(m, data, sub, cfg9, probe);
        measurements["spurious_mask"] = s.to_json();
        const double shift = std::abs(*s.post_poison - *s.pre_poison);
        record(9, "spurious-mask uniqueness", shift <= kSpuriousShift,
               fmt("poison accuracy %.2f -> %.2f (shift %.2f <= %.0f); %s", *s.pre_poison, *s.post_poison, shift,
                   kSpuriousShift, s.note.c_str()));
    }
    // 10
    {
        stage("badnets baseline");
        const auto spec = BaselineTriggerSpec::badnets(data.image_shape(), 5);
        auto base = train_baseline_backdoor(cfg, data, spec, hooks);
        auto cfg10 = desk_defense(DefenseKind::Erase);
        auto sub = clean_fraction_split(data, cfg10.clean_fraction, cfg10.seed);
        const auto bprobe = test_probe(data, baseline_poisoner(spec));
        auto e = erase_with_pairs(base.model, data, sub, baseline_poisoner(spec), cfg10, bprobe);
        measurements["erase_badnets"] = e.to_json();
        const double gap = e.post_clean - *e.post_poison;
        record(10, "erasing baseline", gap <= kEraseGap,
               fmt("badnets model clean %.2f / poison %.2f; after erasing clean %.2f / poison %.2f (gap %.2f <= %.0f)",
                   e.pre_clean, *e.pre_poison, e.post_clean, *e.post_poison, gap, kEraseGap));
    }
    // 11
    {
        stage("uncapped ablation");
        auto c11 = cfg;
        c11.epochs = kUncappedEpochs;
        c11.confidence = kUncapped;
        std::string detail;
        bool ok = false;
        try {
            auto u = train_revocable(c11, data, hooks);
            const double clean = accuracy(u.model, data, data.test_ids(), {}, false);
            measurements["uncapped_clean"] = clean;
            ok = clean <= kUncappedCleanMax;
            detail = fmt("unmasked clean accuracy %.2f after %lld epochs (<= %.0f)", clean,
                         static_cast<long long>(c11.epochs), kUncappedCleanMax);
        } catch (const DivergenceError& e) {
            detail = std::string("training diverged before accuracy could be measured: ") + e.what();
        }
        record(11, "c-ablation sanity", ok, detail);
    }

    int failed = 0;
    for (const auto& v : verdicts) failed += v.pass ? 0 : 1;
    nlohmann::json out = {{"measurements", measurements}, {"criteria", nlohmann::json::array()}};
    for (const auto& v : verdicts)
        out["criteria"].push_back({{"id", v.id}, {"name", v.name}, {"pass", v.pass}, {"detail", v.detail}});
    std::ofstream("acceptance_results.json") << out.dump(2) << '\n';
    std::cout << (failed ? "FAILED " : "ALL PASSED ") << verdicts.size() - failed << "/" << verdicts.size() << std::endl;
    stage("done");
    return failed ? 1 : 0;
}
