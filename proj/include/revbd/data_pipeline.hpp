#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "revbd/types.hpp"

namespace revbd {

enum class Split { Train, Test };

struct DatasetOptions {
    std::filesystem::path root;
    /// Stratified per-class fraction of each split, in (0, 1].
    double fraction = 1.0;
    std::uint64_t seed = 0;
    /// Resize target for folder-per-class datasets (GTSRB is always 32).
    std::int64_t image_size = 32;
    /// Size of the generated synthetic-toy set.
    std::int64_t synthetic_train_per_class = 1000;
    std::int64_t synthetic_test_per_class = 200;
    std::int64_t synthetic_classes = 10;
};

/// Immutable labeled image pool with disjoint train/test index lists.
/// Every optimization path gathers through train_batch(), which audits the ids.
class DatasetHandle {
public:
    DatasetHandle(std::string name, std::int64_t num_classes, torch::Tensor images, torch::Tensor labels,
                  std::vector<std::int64_t> train_ids, std::vector<std::int64_t> test_ids);

    const std::string& name() const { return name_; }
    std::int64_t num_classes() const { return num_classes_; }
    ImageShape image_shape() const { return shape_; }
    const std::vector<std::int64_t>& train_ids() const { return train_ids_; }
    const std::vector<std::int64_t>& test_ids() const { return test_ids_; }
    std::int64_t size() const { return labels_.size(0); }

    /// Per-channel statistics of the training split, [0, 1] scale.
    const std::vector<double>& mean() const { return mean_; }
    const std::vector<double>& stddev() const { return std_; }

    Split split_of(std::int64_t id) const;

    /// Throws if any id belongs to the test split.
    void audit_train_only(std::span<const std::int64_t> ids) const;

    /// Float pixel batch for any ids (evaluation use).
    Batch gather(std::span<const std::int64_t> ids) const;
    /// Same as gather() but refuses test-split ids.
    Batch train_batch(std::span<const std::int64_t> ids) const;

    /// Raw uint8 images, N x C x H x W.
    const torch::Tensor& images() const { return images_; }
    const torch::Tensor& labels() const { return labels_; }

private:
    std::string name_;
    std::int64_t num_classes_;
    ImageShape shape_;
    torch::Tensor images_;
    torch::Tensor labels_;
    std::vector<std::int64_t> train_ids_;
    std::vector<std::int64_t> test_ids_;
    std::vector<std::uint8_t> split_;
    std::vector<double> mean_;
    std::vector<double> std_;
};

/// A named selection of training ids, kept so reports can say what each job saw.
struct Subset {
    std::string purpose;
    std::vector<std::int64_t> ids;
    /// Hex SHA-256 over the sorted ids.
    std::string fingerprint;
};

/// Names: cifar10 (binary batches under root/cifar-10-batches-bin), gtsrb
/// (root/gtsrb/{train,test}/<class>/*), subset-custom (root/{train,test}/<class>/*),
/// synthetic-toy (generated, root ignored).
DatasetHandle load_dataset(const std::string& name, const DatasetOptions& options);

/// Stratified, seeded selection of a fraction `o` of the training split.
Subset clean_fraction_split(const DatasetHandle& data, double o, std::uint64_t seed);

/// Seeded class-balanced selection of `ids` keeping `fraction` of each class.
std::vector<std::int64_t> stratified_sample(const torch::Tensor& labels, const std::vector<std::int64_t>& ids,
                                            std::int64_t num_classes, double fraction, std::uint64_t seed);

std::string fingerprint_ids(std::vector<std::int64_t> ids);

}  // namespace revbd
