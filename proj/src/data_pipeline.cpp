#include "revbd/data_pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "revbd/errors.hpp"
#include "revbd/hashing.hpp"

namespace fs = std::filesystem;

namespace revbd {

namespace {

struct RawSplit {
    std::vector<std::uint8_t> pixels;  // concatenated C x H x W images
    std::vector<std::int64_t> labels;
};

constexpr std::int64_t kCifarSide = 32;
constexpr std::int64_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

void read_cifar_batch(const fs::path& file, RawSplit& out) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("missing CIFAR-10 batch " + file.string());
    std::vector<char> record(kCifarRecord);
    while (in.read(record.data(), kCifarRecord)) {
        out.labels.push_back(static_cast<unsigned char>(record[0]));
        out.pixels.insert(out.pixels.end(), record.begin() + 1, record.end());
    }
    if (in.gcount() != 0) throw DataError("truncated CIFAR-10 batch " + file.string());
}

fs::path cifar_dir(const fs::path& root) {
    for (const auto& candidate : {root / "cifar-10-batches-bin", root / "cifar10", root}) {
        if (fs::exists(candidate / "test_batch.bin")) return candidate;
    }
    throw DataError("CIFAR-10 binary batches not found under " + root.string());
}

// Class folders sorted by name; label = position.
void read_class_folders(const fs::path& dir, std::int64_t side, RawSplit& out, std::vector<std::string>& classes) {
    if (!fs::is_directory(dir)) throw DataError("missing image folder " + dir.string());
    std::vector<std::string> found;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory()) found.push_back(entry.path().filename().string());
    }
    std::sort(found.begin(), found.end());
    if (found.empty()) throw DataError("no class folders in " + dir.string());
    if (classes.empty()) classes = found;
    if (found != classes) throw DataError("class folders differ between splits in " + dir.string());

    for (std::size_t label = 0; label < classes.size(); ++label) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir / classes[label])) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& file : files) {
            cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
            if (img.empty()) continue;  // non-image files (csv annotations etc.)
            cv::Mat resized, rgb;
            cv::resize(img, resized, cv::Size(static_cast<int>(side), static_cast<int>(side)), 0, 0, cv::INTER_AREA);
            cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
            // HWC -> CHW
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < rgb.rows; ++y) {
                    const auto* row = rgb.ptr<cv::Vec3b>(y);
                    for (int x = 0; x < rgb.cols; ++x) out.pixels.push_back(row[x][c]);
                }
            }
            out.labels.push_back(static_cast<std::int64_t>(label));
        }
    }
}

// Gaussian-blob images: each class owns three coloured blobs at fixed positions;
// samples jitter them, rescale their amplitude, and add two random distractor
// blobs plus pixel noise.
class ToyGenerator {
public:
    ToyGenerator(std::int64_t classes, std::int64_t side, std::uint64_t seed)
        : classes_(classes), side_(side), rng_(seed) {
        std::uniform_real_distribution<double> pos(0.2 * side, 0.8 * side);
        std::uniform_real_distribution<double> sigma(0.08 * side, 0.16 * side);
        std::uniform_real_distribution<double> colour(-100.0, 100.0);
        for (std::int64_t k = 0; k < classes; ++k) {
            std::vector<Blob> blobs;
            for (int b = 0; b < 3; ++b) {
                blobs.push_back({pos(rng_), pos(rng_), sigma(rng_), {colour(rng_), colour(rng_), colour(rng_)}});
            }
            prototypes_.push_back(std::move(blobs));
        }
    }

    void sample(std::int64_t label, RawSplit& out) {
        const double jitter_px = 0.12 * side_;
        std::uniform_real_distribution<double> jitter(-jitter_px, jitter_px);
        std::uniform_real_distribution<double> gain(0.6, 1.3);
        std::uniform_real_distribution<double> anywhere(0.0, static_cast<double>(side_));
        std::uniform_real_distribution<double> sigma(0.06 * side_, 0.2 * side_);
        std::uniform_real_distribution<double> colour(-70.0, 70.0);
        std::uniform_real_distribution<double> brightness(90.0, 150.0);
        std::normal_distribution<double> noise(0.0, 4.0);

        const std::int64_t plane = side_ * side_;
        std::vector<double> canvas(3 * plane, brightness(rng_));
        for (const auto& proto : prototypes_[label]) {
            Blob b = proto;
            b.x += jitter(rng_);
            b.y += jitter(rng_);
            const double g = gain(rng_);
            for (auto& c : b.rgb) c *= g;
            paint(b, canvas);
        }
        for (int d = 0; d < 2; ++d) {
            paint({anywhere(rng_), anywhere(rng_), sigma(rng_), {colour(rng_), colour(rng_), colour(rng_)}}, canvas);
        }
        for (double v : canvas) {
            out.pixels.push_back(static_cast<std::uint8_t>(std::clamp(std::round(v + noise(rng_)), 0.0, 255.0)));
        }
        out.labels.push_back(label);
    }

private:
    struct Blob {
        double x, y, sigma;
        std::array<double, 3> rgb;
    };

    void paint(const Blob& b, std::vector<double>& canvas) const {
        std::vector<double> gx(side_), gy(side_);
        for (std::int64_t i = 0; i < side_; ++i) {
            gx[i] = std::exp(-0.5 * std::pow((i - b.x) / b.sigma, 2));
            gy[i] = std::exp(-0.5 * std::pow((i - b.y) / b.sigma, 2));
        }
        const std::int64_t plane = side_ * side_;
        for (int c = 0; c < 3; ++c) {
            for (std::int64_t y = 0; y < side_; ++y) {
                for (std::int64_t x = 0; x < side_; ++x) canvas[c * plane + y * side_ + x] += b.rgb[c] * gy[y] * gx[x];
            }
        }
    }

    std::int64_t classes_;
    std::int64_t side_;
    std::mt19937_64 rng_;
    std::vector<std::vector<Blob>> prototypes_;
};

// Keeps the selected records of `split` (ids index into it).
RawSplit select(const RawSplit& split, const std::vector<std::int64_t>& ids, std::int64_t image_bytes) {
    RawSplit out;
    for (auto id : ids) {
        out.labels.push_back(split.labels[id]);
        out.pixels.insert(out.pixels.end(), split.pixels.begin() + id * image_bytes,
                          split.pixels.begin() + (id + 1) * image_bytes);
    }
    return out;
}

torch::Tensor labels_tensor(const std::vector<std::int64_t>& labels) {
    return torch::tensor(labels, torch::kLong);
}

}  // namespace

DatasetHandle::DatasetHandle(std::string name, std::int64_t num_classes, torch::Tensor images, torch::Tensor labels,
                             std::vector<std::int64_t> train_ids, std::vector<std::int64_t> test_ids)
    : name_(std::move(name)),
      num_classes_(num_classes),
      images_(std::move(images)),
      labels_(std::move(labels)),
      train_ids_(std::move(train_ids)),
      test_ids_(std::move(test_ids)) {
    if (images_.dim() != 4 || images_.scalar_type() != torch::kByte) {
        throw ShapeError("dataset images must be uint8 N x C x H x W");
    }
    if (labels_.size(0) != images_.size(0)) throw ShapeError("image and label counts differ");
    if (num_classes_ < 2) throw DataError("dataset needs at least two classes");
    if (labels_.numel() > 0 &&
        (labels_.min().item<std::int64_t>() < 0 || labels_.max().item<std::int64_t>() >= num_classes_)) {
        throw DataError("labels outside [0, num_classes)");
    }
    shape_ = {images_.size(1), images_.size(2), images_.size(3)};
    split_.assign(images_.size(0), 255);
    for (auto id : train_ids_) split_.at(id) = 0;
    for (auto id : test_ids_) {
        if (split_.at(id) == 0) throw DataError("train and test splits overlap");
        split_[id] = 1;
    }
    if (!train_ids_.empty()) {
        auto train = images_.index_select(0, torch::tensor(train_ids_, torch::kLong)).to(torch::kDouble) / 255.0;
        auto m = train.mean({0, 2, 3});
        auto s = train.std({0, 2, 3});
        for (std::int64_t c = 0; c < shape_.channels; ++c) {
            mean_.push_back(m[c].item<double>());
            std_.push_back(std::max(s[c].item<double>(), 1e-3));
        }
    } else {
        mean_.assign(shape_.channels, 0.0);
        std_.assign(shape_.channels, 1.0);
    }
}

Split DatasetHandle::split_of(std::int64_t id) const {
    if (id < 0 || id >= static_cast<std::int64_t>(split_.size()) || split_[id] == 255) {
        throw DataError("id " + std::to_string(id) + " is not part of the dataset");
    }
    return split_[id] == 0 ? Split::Train : Split::Test;
}

void DatasetHandle::audit_train_only(std::span<const std::int64_t> ids) const {
    for (auto id : ids) {
        if (split_of(id) != Split::Train) {
            throw DataError("test-split image " + std::to_string(id) + " reached an optimization path");
        }
    }
}

Batch DatasetHandle::gather(std::span<const std::int64_t> ids) const {
    auto index = torch::tensor(std::vector<std::int64_t>(ids.begin(), ids.end()), torch::kLong);
    return {images_.index_select(0, index).to(torch::kFloat), labels_.index_select(0, index)};
}

Batch DatasetHandle::train_batch(std::span<const std::int64_t> ids) const {
    audit_train_only(ids);
    return gather(ids);
}

std::vector<std::int64_t> stratified_sample(const torch::Tensor& labels, const std::vector<std::int64_t>& ids,
                                            std::int64_t num_classes, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
    std::vector<std::vector<std::int64_t>> by_class(num_classes);
    auto acc = labels.accessor<std::int64_t, 1>();
    for (auto id : ids) by_class.at(acc[id]).push_back(id);
    std::mt19937_64 rng(seed);
    std::vector<std::int64_t> out;
    for (auto& members : by_class) {
        if (members.empty()) continue;
        std::shuffle(members.begin(), members.end(), rng);
        const auto keep = std::max<std::int64_t>(
            1, static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(members.size()))));
        out.insert(out.end(), members.begin(), members.begin() + std::min<std::int64_t>(keep, members.size()));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string fingerprint_ids(std::vector<std::int64_t> ids) {
    std::sort(ids.begin(), ids.end());
    std::string text;
    for (auto id : ids) text += std::to_string(id) + ",";
    return sha256_hex(text);
}

DatasetHandle load_dataset(const std::string& name, const DatasetOptions& options) {
    if (!(options.fraction > 0.0 && options.fraction <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
    RawSplit train, test;
    std::int64_t classes = 0;
    ImageShape shape;

    if (name == "cifar10") {
        const auto dir = cifar_dir(options.root);
        for (int i = 1; i <= 5; ++i) read_cifar_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"), train);
        read_cifar_batch(dir / "test_batch.bin", test);
        classes = 10;
        shape = {3, kCifarSide, kCifarSide};
    } else if (name == "gtsrb" || name == "subset-custom") {
        const fs::path base = name == "gtsrb" ? options.root / "gtsrb" : options.root;
        const std::int64_t side = name == "gtsrb" ? 32 : options.image_size;
        std::vector<std::string> class_names;
        read_class_folders(base / "train", side, train, class_names);
        read_class_folders(base / "test", side, test, class_names);
        classes = static_cast<std::int64_t>(class_names.size());
        shape = {3, side, side};
    } else if (name == "synthetic-toy") {
        if (options.synthetic_classes < 2 || options.synthetic_train_per_class < 1 ||
            options.synthetic_test_per_class < 1 || options.image_size < 8) {
            throw ConfigError("invalid synthetic-toy sizes");
        }
        classes = options.synthetic_classes;
        shape = {3, options.image_size, options.image_size};
        ToyGenerator gen(classes, options.image_size, options.seed);
        for (std::int64_t i = 0; i < options.synthetic_train_per_class; ++i) {
            for (std::int64_t k = 0; k < classes; ++k) gen.sample(k, train);
        }
        for (std::int64_t i = 0; i < options.synthetic_test_per_class; ++i) {
            for (std::int64_t k = 0; k < classes; ++k) gen.sample(k, test);
        }
    } else {
        throw ConfigError("unknown dataset '" + name + "'");
    }
    if (train.labels.empty() || test.labels.empty()) throw DataError("dataset '" + name + "' has an empty split");

    const std::int64_t image_bytes = shape.numel();
    if (options.fraction < 1.0) {
        auto pick = [&](const RawSplit& split, std::uint64_t salt) {
            std::vector<std::int64_t> all(split.labels.size());
            std::iota(all.begin(), all.end(), 0);
            return select(split, stratified_sample(labels_tensor(split.labels), all, classes, options.fraction,
                                                   options.seed ^ salt),
                          image_bytes);
        };
        train = pick(train, 0x7472);
        test = pick(test, 0x7465);
    }

    const auto n_train = static_cast<std::int64_t>(train.labels.size());
    const auto n_test = static_cast<std::int64_t>(test.labels.size());
    auto images = torch::empty({n_train + n_test, shape.channels, shape.height, shape.width}, torch::kByte);
    std::copy(train.pixels.begin(), train.pixels.end(), images.data_ptr<std::uint8_t>());
    std::copy(test.pixels.begin(), test.pixels.end(), images.data_ptr<std::uint8_t>() + n_train * image_bytes);
    std::vector<std::int64_t> labels = train.labels;
    labels.insert(labels.end(), test.labels.begin(), test.labels.end());

    std::vector<std::int64_t> train_ids(n_train), test_ids(n_test);
    std::iota(train_ids.begin(), train_ids.end(), 0);
    std::iota(test_ids.begin(), test_ids.end(), n_train);
    return DatasetHandle(name, classes, images, labels_tensor(labels), std::move(train_ids), std::move(test_ids));
}

Subset clean_fraction_split(const DatasetHandle& data, double o, std::uint64_t seed) {
    if (!(o > 0.0 && o <= 1.0)) throw ConfigError("clean fraction o must be in (0, 1]");
    Subset s;
    s.purpose = "clean-fraction o=" + std::to_string(o) + " seed=" + std::to_string(seed);
    s.ids = o == 1.0 ? data.train_ids()
                     : stratified_sample(data.labels(), data.train_ids(), data.num_classes(), o, seed);
    data.audit_train_only(s.ids);
    s.fingerprint = fingerprint_ids(s.ids);
    return s;
}

}  // namespace revbd
