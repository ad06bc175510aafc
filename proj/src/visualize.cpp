#include "revbd/visualize.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "revbd/errors.hpp"

namespace revbd {

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
    if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3)) {
        throw ShapeError("write_png needs a 1 x H x W or 3 x H x W image");
    }
    auto hwc = image.detach().to(torch::kFloat).round().clamp(0, 255).to(torch::kByte).permute({1, 2, 0}).contiguous();
    const int h = static_cast<int>(hwc.size(0));
    const int w = static_cast<int>(hwc.size(1));
    cv::Mat mat(h, w, image.size(0) == 3 ? CV_8UC3 : CV_8UC1, hwc.data_ptr<std::uint8_t>());
    cv::Mat out;
    if (image.size(0) == 3) {
        cv::cvtColor(mat, out, cv::COLOR_RGB2BGR);
    } else {
        out = mat;
    }
    if (!cv::imwrite(path.string(), out)) throw Error("cannot write image " + path.string());
}

torch::Tensor read_image(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw DataError("cannot read image " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kByte).clone();
    return t.permute({2, 0, 1}).contiguous();
}

torch::Tensor trigger_image(const TriggerPattern& trigger) {
    if (!trigger.defined()) throw ShapeError("no trigger to draw");
    const double t = trigger.bound() > 0 ? trigger.bound() : 1.0;
    return 128.0 + trigger.delta().detach() * (127.0 / t);
}

torch::Tensor residual_panel(const torch::Tensor& clean, const torch::Tensor& poisoned, double amplification) {
    if (clean.sizes() != poisoned.sizes() || clean.dim() != 3) throw ShapeError("residual panel needs equal C x H x W images");
    auto c = clean.to(torch::kFloat);
    auto p = poisoned.to(torch::kFloat);
    auto diff = ((p - c).abs() * amplification).clamp(0, 255);
    return torch::cat({c, p, diff}, 2);
}

}  // namespace revbd
