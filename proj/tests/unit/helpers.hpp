#pragma once

#include <catch2/catch_amalgamated.hpp>
#include <torch/torch.h>

#include "revbd/data_pipeline.hpp"
#include "revbd/model_core.hpp"

namespace testing {

// conv-bn-relu-pool, conv-relu, gap, linear: a few hundred parameters.
inline revbd::ArchSpec small_arch(std::int64_t channels, std::int64_t classes) {
    using revbd::LayerDesc;
    revbd::ArchSpec a;
    a.name = "small";
    a.layers = {LayerDesc::conv(channels, 4, 3, 1, 1), LayerDesc::batch_norm(4), LayerDesc::relu(),
                LayerDesc::max_pool(2), LayerDesc::conv(4, 4, 3, 1, 1), LayerDesc::relu(),
                LayerDesc::global_avg_pool(), LayerDesc::linear(4, classes)};
    a.stage_outputs = {3, 5};
    a.prune_layer = 5;
    return a;
}

inline revbd::DatasetHandle toy_data(std::int64_t train_per_class = 20, std::int64_t test_per_class = 10,
                                     std::int64_t size = 16, std::uint64_t seed = 3) {
    revbd::DatasetOptions o;
    o.seed = seed;
    o.image_size = size;
    o.synthetic_train_per_class = train_per_class;
    o.synthetic_test_per_class = test_per_class;
    return revbd::load_dataset("synthetic-toy", o);
}

// Pixels strictly inside (lo, hi) so clamps never bite.
inline torch::Tensor pixels(std::vector<std::int64_t> shape, std::uint64_t seed, double lo = 40, double hi = 215,
                            torch::Dtype dtype = torch::kFloat) {
    torch::manual_seed(seed);
    return (torch::rand(shape, torch::TensorOptions().dtype(dtype)) * (hi - lo) + lo);
}

inline double max_rel_diff(const torch::Tensor& a, const torch::Tensor& b) {
    auto scale = b.abs().max().item<double>();
    return (a - b).abs().max().item<double>() / std::max(scale, 1e-12);
}

}  // namespace testing
