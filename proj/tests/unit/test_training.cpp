#include <cmath>

#include "helpers.hpp"
#include "revbd/errors.hpp"
#include "revbd/training.hpp"

using namespace revbd;
using Catch::Approx;

namespace {

TrainConfig quick_config() {
    TrainConfig c;
    c.arch = "tiny-cnn";
    c.epochs = 1;
    c.batch_size = 32;
    c.trigger_ft_epochs = 1;
    c.trigger_ft_slack = 100.0;
    c.seed = 17;
    return c;
}

bool same_parameters(Classifier& a, Classifier& b) {
    auto pa = a->named_parameters();
    auto pb = b->named_parameters();
    for (const auto& item : pa) {
        if (!torch::equal(item.value(), pb[item.key()])) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("poisoning schedule values", "[training][oracle]") {
    PoisonSchedule s;  // 0.5, decay from epoch 80 every 10 epochs by 0.5
    CHECK(poison_rate_at_epoch(0, s) == 0.5);
    CHECK(poison_rate_at_epoch(79, s) == 0.5);
    CHECK(poison_rate_at_epoch(80, s) == 0.25);
    CHECK(poison_rate_at_epoch(89, s) == 0.25);
    CHECK(poison_rate_at_epoch(90, s) == 0.125);
    CHECK(poison_rate_at_epoch(120, s) == 0.015625);
    CHECK(poison_rate_at_epoch(129, s) == 0.015625);
}

TEST_CASE("poisoning rate never increases", "[training][property]") {
    for (double factor : {0.1, 0.5, 0.9, 1.0}) {
        for (std::int64_t interval : {1, 7, 10}) {
            PoisonSchedule s{0.5, 20, interval, factor};
            double previous = poison_rate_at_epoch(0, s);
            for (std::int64_t e = 1; e < 200; ++e) {
                const double r = poison_rate_at_epoch(e, s);
                CHECK(r <= previous);
                CHECK(r > 0.0);
                previous = r;
            }
        }
    }
}

TEST_CASE("poisoned sample count per batch", "[training]") {
    CHECK(poisoned_count(256, 0.5) == 128);
    CHECK(poisoned_count(256, 0.015625) == 4);
    CHECK(poisoned_count(256, 0.001) == 1);
    CHECK(poisoned_count(10, 0.25) == 2);
    CHECK(poisoned_count(2, 1.0) == 1);
    for (std::int64_t b = 2; b < 50; ++b) {
        for (double r : {0.0001, 0.3, 0.5, 0.99, 1.0}) {
            const auto k = poisoned_count(b, r);
            CHECK(k >= 1);
            CHECK(k < b);
        }
    }
}

TEST_CASE("config validation", "[training][errors]") {
    CHECK_NOTHROW(quick_config().validate());
    auto bad = [](auto mutate) {
        auto c = quick_config();
        mutate(c);
        return c;
    };
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.alpha = -1; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.beta = -0.1; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.trigger_bound = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.epochs = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.batch_size = 1; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.arch = "vit-h"; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.insertion_layers = {5, 3}; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](TrainConfig& c) { c.schedule.decay_interval = 0; }).validate(), ConfigError);

    auto c = quick_config();
    CHECK(c.cap_for(10) == Approx(2.532843602293451));
    c.confidence = kUncapped;
    CHECK(std::isinf(c.cap_for(10)));
}

TEST_CASE("SGD rate schedules", "[training]") {
    auto c = quick_config();
    c.epochs = 10;
    CHECK(c.sgd_lr_at_epoch(7) == c.sgd_lr);
    c.sgd_schedule = "cosine";
    CHECK(c.sgd_lr_at_epoch(0) == Approx(c.sgd_lr));
    CHECK(c.sgd_lr_at_epoch(5) == Approx(c.sgd_lr / 2));
    for (std::int64_t e = 1; e < 10; ++e) {
        CHECK(c.sgd_lr_at_epoch(e) < c.sgd_lr_at_epoch(e - 1));
        CHECK(c.sgd_lr_at_epoch(e) > 0.0);
    }
    c.sgd_schedule = "step";
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("per-element alpha divides by mask size", "[training]") {
    MaskSet m({InsertionPoint{0, {2, 3, 3}}, InsertionPoint{4, {1, 2, 2}}});
    auto c = quick_config();
    c.alpha = 11.0;
    CHECK(c.effective_alpha(m) == 11.0);
    c.alpha_per_element = true;
    CHECK(c.effective_alpha(m) == Approx(0.5));
}

TEST_CASE("metrics rows match the header", "[training]") {
    EpochMetrics m;
    m.phase = "joint";
    const auto header = metrics_csv_header();
    const auto row = to_csv(m);
    CHECK(std::count(header.begin(), header.end(), ',') == std::count(row.begin(), row.end(), ','));
    CHECK(row.rfind("joint,0,", 0) == 0);
}

TEST_CASE("joint training is deterministic under a seed", "[training][slow]") {
    auto data = testing::toy_data(12, 4);
    auto cfg = quick_config();
    long steps = 0;
    TrainHooks hooks;
    hooks.on_step = [&](long, const LossBreakdown& l) {
        ++steps;
        CHECK(l.finite());
    };
    auto a = train_revocable(cfg, data, hooks);
    auto b = train_revocable(cfg, data);
    CHECK(steps == 120 / 32 + 1);
    CHECK(same_parameters(a.model.classifier(), b.model.classifier()));
    CHECK(torch::equal(a.trigger.delta(), b.trigger.delta()));
    for (std::size_t i = 0; i < a.model.masks().size(); ++i) {
        CHECK(torch::equal(a.model.masks().tensors()[i], b.model.masks().tensors()[i]));
    }
    REQUIRE(a.history.size() == 1);
    CHECK(a.history[0].poison_rate == 0.5);
    CHECK(a.trigger.linf() <= cfg.trigger_bound);

    cfg.seed = 18;
    auto c = train_revocable(cfg, data);
    CHECK_FALSE(torch::equal(a.trigger.delta(), c.trigger.delta()));
}

TEST_CASE("trigger fine-tuning leaves theta and masks bit-identical", "[training][slow]") {
    auto data = testing::toy_data(12, 4);
    auto cfg = quick_config();
    cfg.beta = 0.5;
    cfg.adam_lr = 0.5;
    auto art = train_revocable(cfg, data);
    auto theta = clone_classifier(art.model.classifier());
    auto masks = art.model.masks().clone();
    auto before = art.trigger.clone();

    auto result = finetune_trigger(art, data);
    CHECK(same_parameters(art.model.classifier(), theta));
    for (std::size_t i = 0; i < masks.size(); ++i) {
        CHECK(torch::equal(art.model.masks().tensors()[i], masks.tensors()[i]));
    }
    CHECK(art.trigger.linf() <= cfg.trigger_bound);
    CHECK_FALSE(torch::equal(art.trigger.delta(), before.delta()));
    CHECK(torch::equal(art.trigger.delta(), result.trigger.delta()));
    for (auto& p : art.model.classifier()->parameters()) CHECK(p.requires_grad());
}

TEST_CASE("trigger fine-tuning reports a weakened attack", "[training][slow]") {
    auto data = testing::toy_data(12, 4);
    auto cfg = quick_config();
    cfg.trigger_ft_slack = 0.0;
    cfg.trigger_ft_epochs = 3;
    cfg.beta = 1e4;  // shrinks delta towards zero, which can only help the classifier
    cfg.adam_lr = 1.0;
    auto art = train_revocable(cfg, data);
    auto original = art.trigger.clone();
    try {
        finetune_trigger(art, data);
        SUCCEED("poison accuracy did not rise");
    } catch (const AttackDegradedError& e) {
        CHECK(e.poison_acc_after() > e.poison_acc_before());
        CHECK(torch::equal(art.trigger.delta(), original.delta()));
    }
}

TEST_CASE("non-finite losses raise DivergenceError", "[training][errors]") {
    auto data = testing::toy_data(12, 4);
    auto cfg = quick_config();
    // Absurd weight decay flips and inflates the weights every step until they overflow.
    cfg.sgd_lr = 1.0;
    cfg.sgd_weight_decay = 1e30;
    cfg.epochs = 3;
    CHECK_THROWS_AS(train_revocable(cfg, data), DivergenceError);
}

TEST_CASE("clean and baseline trainers produce mask-free models", "[training][slow]") {
    auto data = testing::toy_data(12, 4);
    auto cfg = quick_config();
    auto clean = train_clean(cfg, data);
    CHECK_FALSE(clean.model.has_masks());
    CHECK_FALSE(clean.trigger.defined());
    auto spec = BaselineTriggerSpec::badnets(data.image_shape(), 3);
    auto bad = train_baseline_backdoor(cfg, data, spec);
    CHECK_FALSE(bad.model.has_masks());
    CHECK(bad.history.size() == 1);
}

TEST_CASE("training probe ids come from the training split", "[training]") {
    auto data = testing::toy_data(12, 4);
    auto ids = train_probe_ids(data, 50);
    CHECK(ids.size() == 50);
    CHECK_NOTHROW(data.audit_train_only(ids));
    CHECK(train_probe_ids(data, 5000).size() == data.train_ids().size());
}
