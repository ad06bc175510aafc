#include <cmath>

#include "helpers.hpp"
#include "revbd/defenses.hpp"
#include "revbd/errors.hpp"

using namespace revbd;
using Catch::Approx;

namespace {

struct Fixture {
    DatasetHandle data = testing::toy_data(20, 6);
    Subset subset = clean_fraction_split(data, 0.5, 1);
    TriggerPattern trigger = init_trigger(data.image_shape(), 10, 3);
    DefenseProbe probe = test_probe(data, trigger_poisoner(trigger));

    MaskedClassifier model(std::uint64_t seed = 2) {
        return MaskedClassifier(build_classifier(testing::small_arch(3, 10), 10, data.image_shape(), seed),
                                std::nullopt);
    }
};

DefenseConfig quick(DefenseKind kind) {
    DefenseConfig c;
    c.kind = kind;
    c.epochs = 1;
    c.batch_size = 16;
    c.nad_teacher_epochs = 1;
    c.seed = 5;
    return c;
}

bool same_parameters(Classifier& a, Classifier& b) {
    auto pb = b->named_parameters();
    for (const auto& item : a->named_parameters()) {
        if (!torch::equal(item.value(), pb[item.key()])) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("attention maps", "[defenses][oracle]") {
    auto f = torch::tensor({1.0f, 2.0f, 3.0f, 0.0f}).view({1, 2, 1, 2});
    auto a = attention_map(f);
    auto expected = torch::tensor({5.0f, 2.0f}).view({1, 2}) / std::sqrt(29.0f);
    CHECK(torch::allclose(a, expected, 1e-6, 1e-7));

    auto zero = attention_map(torch::zeros({3, 4, 5, 5}));
    CHECK(zero.abs().max().item<double>() == 0.0);
    CHECK_FALSE(torch::isnan(zero).any().item<bool>());

    auto r = attention_map(torch::randn({4, 3, 6, 6}));
    CHECK(torch::allclose(r.norm(2, 1), torch::ones({4}), 1e-5, 1e-6));
}

TEST_CASE("zero-epoch fine-tuning is the identity", "[defenses]") {
    Fixture fx;
    auto m = fx.model();
    auto before = clone_classifier(m.classifier());
    auto cfg = quick(DefenseKind::Finetune);
    cfg.epochs = 0;
    auto out = defense_finetune(m, fx.data, fx.subset, cfg, fx.probe);
    CHECK(same_parameters(m.classifier(), before));
    CHECK(out.post_clean == out.pre_clean);
    CHECK(out.post_poison == out.pre_poison);
    CHECK(out.steps == 0);
    CHECK(out.subset_fingerprint == fx.subset.fingerprint);
    CHECK(out.subset_size == static_cast<std::int64_t>(fx.subset.ids.size()));
}

TEST_CASE("fine-tuning only sees the defender subset", "[defenses]") {
    Fixture fx;
    auto m = fx.model();
    auto out = defense_finetune(m, fx.data, fx.subset, quick(DefenseKind::Finetune), fx.probe);
    CHECK(out.steps == static_cast<std::int64_t>((fx.subset.ids.size() + 15) / 16));

    Subset leaky = fx.subset;
    leaky.ids.push_back(fx.data.test_ids()[0]);
    auto m2 = fx.model();
    CHECK_THROWS_AS(defense_finetune(m2, fx.data, leaky, quick(DefenseKind::Finetune), fx.probe), DataError);
}

TEST_CASE("a dead channel is pruned first", "[defenses]") {
    Fixture fx;
    auto m = fx.model();
    {
        torch::NoGradGuard g;
        auto params = m.classifier()->named_parameters();
        params["layer4.weight"][2].zero_();
        params["layer4.bias"][2].fill_(-1.0);
    }
    auto rank = channel_dormancy(m, fx.data, fx.subset.ids);
    REQUIRE(rank.size(0) == 4);
    CHECK(rank[2].item<double>() == 0.0);
    CHECK(rank.argmin().item<std::int64_t>() == 2);

    auto before = clone_classifier(m.classifier());
    auto cfg = quick(DefenseKind::Fineprune);
    cfg.prune_step = 1;
    cfg.max_pruned = 1;
    cfg.prune_finetune_epochs = 0;
    auto out = defense_fineprune(m, fx.data, fx.subset, cfg, fx.probe);
    auto gate = m.classifier()->channel_gate();
    CHECK(gate[2].item<double>() == 0.0);
    CHECK(gate.sum().item<double>() == 3.0);
    CHECK(same_parameters(m.classifier(), before));
    CHECK(out.post_clean == Approx(out.pre_clean));
    REQUIRE_FALSE(out.curve.empty());
    CHECK(out.curve.back().pruned == 1);
}

TEST_CASE("pruning nothing is the identity", "[defenses]") {
    Fixture fx;
    auto m = fx.model();
    auto before = clone_classifier(m.classifier());
    auto cfg = quick(DefenseKind::Fineprune);
    cfg.max_pruned = 0;
    auto out = defense_fineprune(m, fx.data, fx.subset, cfg, fx.probe);
    CHECK(same_parameters(m.classifier(), before));
    CHECK(m.classifier()->channel_gate().min().item<double>() == 1.0);
    CHECK(out.post_clean == out.pre_clean);
}

TEST_CASE("pruning never keeps an interval that breaks the budget", "[defenses][property]") {
    Fixture fx;
    auto m = fx.model();
    auto cfg = quick(DefenseKind::Fineprune);
    cfg.prune_step = 1;
    cfg.drop_budget = 0.05;
    auto out = defense_fineprune(m, fx.data, fx.subset, cfg, fx.probe);
    const double base = out.curve.empty() ? 0.0 : out.curve.front().subset_clean;
    for (std::size_t i = 1; i < out.curve.size(); ++i) {
        CHECK(out.curve[i].pruned > out.curve[i - 1].pruned);
        CHECK(base - out.curve[i].subset_clean <= 5.0 + 1e-9);
    }
    CHECK(m.classifier()->channel_gate().sum().item<double>() >= 1.0);
}

TEST_CASE("NAD with zero weight is plain fine-tuning", "[defenses]") {
    Fixture fx;
    auto a = fx.model();
    auto b = fx.model();
    auto cfg = quick(DefenseKind::Nad);
    cfg.nad_weight = 0.0;
    defense_nad(a, fx.data, fx.subset, cfg, fx.probe);
    defense_finetune(b, fx.data, fx.subset, cfg, fx.probe);
    CHECK(same_parameters(a.classifier(), b.classifier()));

    auto c = fx.model();
    cfg.nad_weight = 5000.0;
    auto out = defense_nad(c, fx.data, fx.subset, cfg, fx.probe);
    CHECK(std::isfinite(out.post_clean));
    CHECK_FALSE(same_parameters(a.classifier(), c.classifier()));
}

TEST_CASE("erasing needs the trigger", "[defenses][errors]") {
    Fixture fx;
    auto m = fx.model();
    auto cfg = quick(DefenseKind::Erase);
    CHECK_THROWS_AS(erase_with_pairs(m, fx.data, fx.subset, {}, cfg, fx.probe), ConfigError);
    CHECK_THROWS_AS(run_defense(m, fx.data, fx.subset, cfg, fx.probe), ConfigError);
    auto out = erase_with_pairs(m, fx.data, fx.subset, trigger_poisoner(fx.trigger), cfg, fx.probe);
    CHECK(out.kind == DefenseKind::Erase);
    CHECK(out.steps > 0);
}

TEST_CASE("a strongly regularised spurious mask stays at identity", "[defenses]") {
    Fixture fx;
    auto m = fx.model();
    auto cfg = quick(DefenseKind::SpuriousMask);
    cfg.spurious_alpha = 1e6;
    auto out = spurious_mask_attack(m, fx.data, fx.subset, cfg, fx.probe);
    CHECK(std::abs(out.post_clean - out.pre_clean) <= 2.0);
    CHECK(std::abs(*out.post_poison - *out.pre_poison) <= 2.0);
    REQUIRE(m.has_masks());
    for (const auto& mask : m.masks().tensors()) CHECK((mask - 1).abs().max().item<double>() <= 0.05);
}

TEST_CASE("defenses refuse masked models and bad configs", "[defenses][errors]") {
    Fixture fx;
    auto clf = build_classifier(testing::small_arch(3, 10), 10, fx.data.image_shape(), 1);
    auto masked = attach_masks(clf, default_insertion_points(clf));
    for (auto kind : {DefenseKind::Finetune, DefenseKind::Fineprune, DefenseKind::Nad, DefenseKind::SpuriousMask}) {
        CHECK_THROWS_AS(run_defense(masked, fx.data, fx.subset, quick(kind), fx.probe), ConfigError);
    }
    auto cfg = quick(DefenseKind::Finetune);
    cfg.clean_fraction = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(defense_kind_from_string("strip"), ConfigError);
    CHECK(defense_kind_from_string(to_string(DefenseKind::SpuriousMask)) == DefenseKind::SpuriousMask);
}

TEST_CASE("defense tables have one row per outcome", "[defenses]") {
    DefenseOutcome a;
    a.kind = DefenseKind::Finetune;
    a.pre_clean = 90;
    a.post_clean = 88;
    a.pre_poison = 10;
    a.post_poison = 12;
    DefenseOutcome b = a;
    b.kind = DefenseKind::Fineprune;
    b.curve = {{0, 90, 10, 91}, {10, 89, 11, 90}};
    const auto csv = defense_table_csv({a, b});
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(defense_table_text({a, b}).find("fineprune") != std::string::npos);
    const auto curve = pruning_curve_csv(b);
    CHECK(std::count(curve.begin(), curve.end(), '\n') == 3);
}
