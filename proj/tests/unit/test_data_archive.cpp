#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "helpers.hpp"
#include "revbd/archive.hpp"
#include "revbd/bundle.hpp"
#include "revbd/config.hpp"
#include "revbd/errors.hpp"
#include "revbd/hashing.hpp"

using namespace revbd;
using Catch::Approx;

namespace fs = std::filesystem;

namespace {

std::map<std::int64_t, std::int64_t> class_counts(const DatasetHandle& d, const std::vector<std::int64_t>& ids) {
    std::map<std::int64_t, std::int64_t> out;
    auto labels = d.labels().accessor<std::int64_t, 1>();
    for (auto id : ids) ++out[labels[id]];
    return out;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("revbd_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("synthetic toy data is deterministic and split-disjoint", "[data]") {
    auto a = testing::toy_data(20, 10, 16, 5);
    auto b = testing::toy_data(20, 10, 16, 5);
    CHECK(torch::equal(a.images(), b.images()));
    CHECK(torch::equal(a.labels(), b.labels()));
    CHECK(a.train_ids().size() == 200);
    CHECK(a.test_ids().size() == 100);
    CHECK(a.image_shape() == ImageShape{3, 16, 16});
    CHECK(a.num_classes() == 10);

    std::set<std::int64_t> train(a.train_ids().begin(), a.train_ids().end());
    for (auto id : a.test_ids()) CHECK(train.count(id) == 0);

    auto c = testing::toy_data(20, 10, 16, 6);
    CHECK_FALSE(torch::equal(a.images(), c.images()));
    CHECK(a.mean().size() == 3);
    for (double s : a.stddev()) CHECK(s > 0.0);
}

TEST_CASE("optimisation paths refuse test-split ids", "[data]") {
    auto d = testing::toy_data(5, 5);
    std::vector<std::int64_t> mixed{d.train_ids()[0], d.test_ids()[0]};
    CHECK_THROWS_AS(d.train_batch(mixed), DataError);
    CHECK_THROWS_AS(d.audit_train_only(mixed), DataError);
    CHECK_NOTHROW(d.gather(mixed));
    CHECK(d.split_of(d.test_ids()[0]) == Split::Test);
    CHECK_THROWS_AS(d.split_of(-1), DataError);
    CHECK_THROWS_AS(d.split_of(d.size()), DataError);
}

TEST_CASE("clean-fraction subsets are stratified and seeded", "[data][property]") {
    auto d = testing::toy_data(100, 5);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto s = clean_fraction_split(d, 0.05, seed);
        CHECK(s.ids.size() == 50);
        for (auto [cls, n] : class_counts(d, s.ids)) CHECK(std::abs(n - 5) <= 1);
        CHECK(clean_fraction_split(d, 0.05, seed).fingerprint == s.fingerprint);
        CHECK(s.fingerprint.size() == 64);
    }
    CHECK(clean_fraction_split(d, 0.05, 1).fingerprint != clean_fraction_split(d, 0.05, 2).fingerprint);
    CHECK(clean_fraction_split(d, 1.0, 1).ids == d.train_ids());
    CHECK_THROWS_AS(clean_fraction_split(d, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(clean_fraction_split(d, 1.5, 1), ConfigError);

    // Unbalanced input: every class still within one of its share.
    std::vector<std::int64_t> some;
    auto labels = d.labels().accessor<std::int64_t, 1>();
    for (auto id : d.train_ids())
        if (labels[id] < 3 || id % 2 == 0) some.push_back(id);
    auto pick = stratified_sample(d.labels(), some, 10, 0.1, 4);
    auto before = class_counts(d, some);
    for (auto [cls, n] : class_counts(d, pick)) CHECK(std::abs(n - 0.1 * before[cls]) <= 1.0);
}

TEST_CASE("fraction option shrinks both splits per class", "[data]") {
    DatasetOptions o;
    o.seed = 2;
    o.image_size = 16;
    o.synthetic_train_per_class = 40;
    o.synthetic_test_per_class = 20;
    o.fraction = 0.25;
    auto d = load_dataset("synthetic-toy", o);
    CHECK(d.train_ids().size() == 100);
    CHECK(d.test_ids().size() == 50);
    CHECK_THROWS_AS(load_dataset("imagenet-21k", o), ConfigError);
    o.fraction = 0.0;
    CHECK_THROWS_AS(load_dataset("synthetic-toy", o), ConfigError);
}

TEST_CASE("missing dataset roots are data errors", "[data][errors]") {
    DatasetOptions o;
    o.root = "/nonexistent/revbd";
    CHECK_THROWS_AS(load_dataset("cifar10", o), DataError);
    CHECK_THROWS_AS(load_dataset("subset-custom", o), DataError);
}

TEST_CASE("archive round-trips text and arrays", "[archive]") {
    ArrayArchive ar;
    ar.put_text("meta", "{\"a\": 1}");
    auto f = torch::randn({2, 3, 4});
    auto i = torch::tensor({-3, 0, 7}, torch::kLong);
    ar.put_tensor("f", f);
    ar.put_tensor("i", i);
    auto bytes = ar.serialize();
    auto back = ArrayArchive::deserialize(bytes);
    CHECK(back.text("meta") == "{\"a\": 1}");
    CHECK(torch::equal(back.tensor("f"), f));
    CHECK(torch::equal(back.tensor("i"), i));
    CHECK(back.names().size() == 3);
    CHECK(back.serialize() == bytes);
    CHECK_THROWS_AS(back.text("f"), FormatError);
    CHECK_THROWS_AS(back.tensor("missing"), FormatError);
}

TEST_CASE("damaged archives are format errors", "[archive][errors]") {
    ArrayArchive ar;
    ar.put_tensor("w", torch::arange(10, torch::kFloat));
    const auto good = ar.serialize();

    for (std::size_t cut : {std::size_t{0}, std::size_t{7}, good.size() / 2, good.size() - 1}) {
        std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
        CHECK_THROWS_AS(ArrayArchive::deserialize(truncated), FormatError);
    }
    auto flipped = good;
    flipped[20] ^= 0x40;
    CHECK_THROWS_AS(ArrayArchive::deserialize(flipped), FormatError);

    auto magic = good;
    magic[0] = 'X';
    CHECK_THROWS_AS(ArrayArchive::deserialize(magic), FormatError);

    // Wrong version with a valid digest.
    auto versioned = good;
    versioned[8] = 9;
    const std::size_t body = versioned.size() - 64;
    const auto digest = sha256_hex(std::span<const std::uint8_t>(versioned.data(), body));
    std::copy(digest.begin(), digest.end(), versioned.begin() + static_cast<std::ptrdiff_t>(body));
    CHECK_THROWS_AS(ArrayArchive::deserialize(versioned), FormatError);
}

TEST_CASE("sha256 of known strings", "[hashing][oracle]") {
    CHECK(sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string()) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("bundles round-trip and trial bundles withhold masks", "[bundle]") {
    auto clf = build_classifier("tiny-cnn", 10, {3, 16, 16}, 4);
    auto model = attach_masks(clf, default_insertion_points(clf));
    {
        torch::NoGradGuard g;
        for (auto& m : model.masks().tensors()) m.mul_(0.5);
    }
    auto trig = init_trigger({3, 16, 16}, 10, 2);
    nlohmann::json cfg{{"alpha", 10}};
    auto x = testing::pixels({3, 3, 16, 16}, 9);
    model.eval();
    auto masked = model.forward(x, true);
    auto bare = model.forward(x, false);

    auto final_bytes = export_bundle(model, trig, cfg, BundleKind::Final);
    auto fin = import_bundle(final_bytes);
    CHECK(fin.kind == BundleKind::Final);
    CHECK(fin.model.has_masks());
    CHECK(fin.config == cfg);
    CHECK(torch::equal(fin.trigger.delta(), trig.delta()));
    CHECK(fin.trigger.bound() == 10.0);
    fin.model.eval();
    CHECK(torch::allclose(fin.model.forward(x, true), masked, 0, 1e-6));
    CHECK(torch::allclose(fin.model.forward(x, false), bare, 0, 1e-6));

    auto trial = import_bundle(export_bundle(model, trig, cfg, BundleKind::Trial));
    CHECK(trial.kind == BundleKind::Trial);
    CHECK_FALSE(trial.model.has_masks());
    trial.model.eval();
    CHECK(torch::allclose(trial.model.forward(x), bare, 0, 1e-6));

    auto mask_bytes = export_masks(model.masks());
    install_masks(trial.model, import_masks(mask_bytes));
    CHECK(torch::allclose(trial.model.forward(x, true), masked, 0, 1e-6));

    auto bare_model = MaskedClassifier(clone_classifier(clf), std::nullopt);
    CHECK_THROWS_AS(export_bundle(bare_model, trig, cfg, BundleKind::Final), ShapeError);

    auto cut = final_bytes;
    cut.resize(cut.size() - 10);
    CHECK_THROWS_AS(import_bundle(cut), FormatError);
    CHECK_THROWS_AS(import_masks(final_bytes), FormatError);

    auto dir = temp_dir("bundle");
    save_bundle(dir / "m.rvb", model, trig, cfg, BundleKind::Final);
    CHECK(load_bundle(dir / "m.rvb").model.has_masks());
    CHECK_THROWS_AS(load_bundle(dir / "absent.rvb"), DataError);
}

TEST_CASE("masks built for another architecture do not install", "[bundle][errors]") {
    auto a = build_classifier("tiny-cnn", 10, {3, 16, 16}, 1);
    auto b = build_classifier("resnet18-slim", 10, {3, 16, 16}, 1);
    MaskedClassifier target(b, std::nullopt);
    auto masks = MaskSet(default_insertion_points(a));
    CHECK_THROWS_AS(install_masks(target, masks), ShapeError);
}

TEST_CASE("config text round-trips and validates", "[config]") {
    auto c = Config::parse("# comment\ntrain.alpha = 2.5\ntrain.epochs=3\n\ndata.name = synthetic-toy\n");
    CHECK(c.get_double("train.alpha") == 2.5);
    CHECK(c.get_int("train.epochs") == 3);
    CHECK_FALSE(c.is_default("train.alpha"));
    CHECK(c.is_default("train.beta"));

    auto again = Config::parse(c.dump());
    CHECK(again.dump() == c.dump());
    CHECK(again.to_json() == c.to_json());

    CHECK_THROWS_AS(Config::parse("train.alhpa = 3\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("no equals sign here\n"), ConfigError);
    Config d;
    CHECK_THROWS_AS(d.set("nope", "1"), ConfigError);
    d.set("train.confidence", "inf");
    CHECK(std::isinf(d.get_double("train.confidence")));
    d.set("train.epochs", "three");
    CHECK_THROWS_AS(d.get_int("train.epochs"), ConfigError);

    Config neg;
    neg.set("train.alpha", "-1");
    CHECK_THROWS_AS(train_config(neg), ConfigError);
    Config ok;
    CHECK_NOTHROW(train_config(ok));
    CHECK_NOTHROW(defense_config(ok));
    CHECK(dataset_options(ok).seed == static_cast<std::uint64_t>(ok.get_int("data.seed")));
}

TEST_CASE("manifest hashes every produced file", "[config]") {
    auto dir = temp_dir("manifest");
    {
        std::ofstream(dir / "a.txt") << "abc";
    }
    RunManifest m;
    m.command = "train";
    write_manifest(dir, m);
    auto j = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
    REQUIRE(j["files"].size() == 1);
    CHECK(j["files"][0]["sha256"] == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(j["files"][0]["bytes"] == 3);
}
