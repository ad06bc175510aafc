#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "revbd/triggers.hpp"

namespace revbd {

/// Writes a C x H x W image in [0, 255] (any dtype; rounded and clamped). C is 1 or 3, RGB order.
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

/// Reads an image file as 3 x H x W uint8 RGB.
torch::Tensor read_image(const std::filesystem::path& path);

/// 128 + delta * 127 / t: mid-grey where the trigger is zero.
torch::Tensor trigger_image(const TriggerPattern& trigger);

/// clean | poisoned | |poisoned - clean| * amplification, side by side.
torch::Tensor residual_panel(const torch::Tensor& clean, const torch::Tensor& poisoned, double amplification = 10.0);

}  // namespace revbd
