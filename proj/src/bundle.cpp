#include "revbd/bundle.hpp"

#include "revbd/archive.hpp"
#include "revbd/errors.hpp"

namespace revbd {

namespace {

nlohmann::json points_json(const std::vector<InsertionPoint>& points) {
    auto out = nlohmann::json::array();
    for (const auto& p : points) out.push_back({{"layer", p.layer}, {"shape", p.shape.dims()}});
    return out;
}

std::vector<InsertionPoint> points_from_json(const nlohmann::json& j) {
    std::vector<InsertionPoint> points;
    for (const auto& p : j) {
        auto dims = p.at("shape").get<std::vector<std::int64_t>>();
        if (dims.size() != 3) throw FormatError("mask shape must have three dimensions");
        points.push_back({p.at("layer").get<std::int64_t>(), {dims[0], dims[1], dims[2]}});
    }
    return points;
}

void put_masks(ArrayArchive& ar, const MaskSet& masks) {
    ar.put_text("mask_points", points_json(masks.points()).dump());
    for (std::size_t i = 0; i < masks.size(); ++i) ar.put_tensor("mask/" + std::to_string(i), masks.tensors()[i]);
}

MaskSet get_masks(const ArrayArchive& ar) {
    auto points = points_from_json(nlohmann::json::parse(ar.text("mask_points")));
    std::vector<torch::Tensor> values;
    for (std::size_t i = 0; i < points.size(); ++i) values.push_back(ar.tensor("mask/" + std::to_string(i)));
    return MaskSet(std::move(points), std::move(values));
}

template <typename Fn>
auto guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed bundle metadata: ") + e.what());
    } catch (const ShapeError& e) {
        throw FormatError(std::string("bundle does not match its architecture: ") + e.what());
    }
}

}  // namespace

std::string to_string(BundleKind kind) { return kind == BundleKind::Trial ? "trial" : "final"; }

std::vector<std::uint8_t> export_bundle(const MaskedClassifier& model, const TriggerPattern& trigger,
                                        const nlohmann::json& config, BundleKind kind) {
    if (kind == BundleKind::Final && !model.has_masks()) throw ShapeError("final bundle needs masks");
    const auto& clf = model.classifier();
    ArrayArchive ar;
    ar.put_text("kind", to_string(kind));
    ar.put_text("arch", nlohmann::json{{"spec", clf->spec()},
                                       {"num_classes", clf->num_classes()},
                                       {"input_shape", clf->input_shape().dims()}}
                            .dump());
    ar.put_text("config", config.dump());
    for (const auto& p : clf->named_parameters(true)) ar.put_tensor("param/" + p.key(), p.value());
    for (const auto& b : clf->named_buffers(true)) ar.put_tensor("buffer/" + b.key(), b.value());
    if (kind == BundleKind::Final) put_masks(ar, model.masks());
    if (trigger.defined()) {
        ar.put_text("trigger_meta", nlohmann::json{{"bound", trigger.bound()}}.dump());
        ar.put_tensor("trigger", trigger.delta());
    }
    return ar.serialize();
}

Bundle import_bundle(std::span<const std::uint8_t> bytes) {
    const auto ar = ArrayArchive::deserialize(bytes);
    return guarded([&] {
        const auto& kind_text = ar.text("kind");
        if (kind_text != "trial" && kind_text != "final") throw FormatError("unknown bundle kind " + kind_text);
        const auto kind = kind_text == "trial" ? BundleKind::Trial : BundleKind::Final;
        const auto arch = nlohmann::json::parse(ar.text("arch"));
        const auto dims = arch.at("input_shape").get<std::vector<std::int64_t>>();
        if (dims.size() != 3) throw FormatError("input shape must have three dimensions");
        Classifier clf(arch.at("spec").get<ArchSpec>(), arch.at("num_classes").get<std::int64_t>(),
                       ImageShape{dims[0], dims[1], dims[2]});
        {
            torch::NoGradGuard guard;
            std::size_t expected = 0;
            for (auto& p : clf->named_parameters(true)) {
                auto value = ar.tensor("param/" + p.key());
                if (value.sizes() != p.value().sizes()) throw FormatError("parameter " + p.key() + " has wrong shape");
                p.value().copy_(value);
                ++expected;
            }
            for (auto& b : clf->named_buffers(true)) {
                auto value = ar.tensor("buffer/" + b.key());
                if (value.sizes() != b.value().sizes()) throw FormatError("buffer " + b.key() + " has wrong shape");
                b.value().copy_(value);
                ++expected;
            }
            const auto stored = ar.names_with_prefix("param/").size() + ar.names_with_prefix("buffer/").size();
            if (stored != expected) throw FormatError("bundle carries arrays the architecture does not define");
        }
        clf->eval();

        std::optional<MaskSet> masks;
        if (kind == BundleKind::Final) {
            masks = get_masks(ar);
            attach_masks(clf, masks->points());  // validation only
        } else if (ar.contains("mask_points")) {
            throw FormatError("trial bundle must not contain masks");
        }
        Bundle out{MaskedClassifier(clf, std::move(masks)), {}, nlohmann::json::parse(ar.text("config")), kind};
        if (ar.contains("trigger")) {
            out.trigger = TriggerPattern(ar.tensor("trigger"),
                                         nlohmann::json::parse(ar.text("trigger_meta")).at("bound").get<double>());
        }
        return out;
    });
}

void save_bundle(const std::filesystem::path& path, const MaskedClassifier& model, const TriggerPattern& trigger,
                 const nlohmann::json& config, BundleKind kind) {
    write_file_bytes(path, export_bundle(model, trigger, config, kind));
}

Bundle load_bundle(const std::filesystem::path& path) { return import_bundle(read_file_bytes(path)); }

std::vector<std::uint8_t> export_masks(const MaskSet& masks) {
    ArrayArchive ar;
    ar.put_text("kind", "masks");
    put_masks(ar, masks);
    return ar.serialize();
}

MaskSet import_masks(std::span<const std::uint8_t> bytes) {
    const auto ar = ArrayArchive::deserialize(bytes);
    return guarded([&] {
        if (ar.text("kind") != "masks") throw FormatError("not a mask file");
        return get_masks(ar);
    });
}

void install_masks(MaskedClassifier& model, const MaskSet& masks) {
    attach_masks(model.classifier(), masks.points());
    model.set_masks(masks.clone());
    model.set_masks_active(true);
}

}  // namespace revbd
