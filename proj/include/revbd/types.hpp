#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace revbd {

/// Channels x height x width of a single image or feature map (no batch dimension).
struct ImageShape {
    std::int64_t channels = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;

    std::vector<std::int64_t> dims() const { return {channels, height, width}; }
    std::vector<std::int64_t> batched(std::int64_t batch) const { return {batch, channels, height, width}; }
    std::int64_t numel() const { return channels * height * width; }
    std::string str() const {
        return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
    }
    bool operator==(const ImageShape&) const = default;
};

/// Images in raw pixel scale [0, 255] as float, labels as int64.
struct Batch {
    torch::Tensor images;
    torch::Tensor labels;

    std::int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
    bool empty() const { return size() == 0; }
};

}  // namespace revbd
