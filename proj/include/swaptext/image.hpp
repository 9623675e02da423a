#pragma once

// Conversions between 8-bit OpenCV images and word-image tensors.
//
// A word image is a float tensor laid out channels-first, [3, H, W] (or
// [B, 3, H, W] when batched), RGB order, values in [-1, 1]. 8-bit value v maps
// to v / 127.5 - 1, so every 8-bit image round-trips exactly.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "swaptext/error.hpp"

namespace swaptext {

struct ImageSize {
  int height = 64;
  int width = 256;

  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

inline constexpr ImageSize kWordImageSize{64, 256};

/// BGR 8-bit (CV_8UC3) -> RGB [3, H, W] float32 in [-1, 1].
inline torch::Tensor mat_to_tensor(const cv::Mat& bgr) {
  if (bgr.type() != CV_8UC3) {
    throw InvalidInputError("mat_to_tensor expects an 8-bit 3-channel image");
  }
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat32);
  return (t / 127.5 - 1.0).contiguous();
}

/// [3, H, W] tensor in [-1, 1] -> BGR 8-bit, rounding to nearest.
inline cv::Mat tensor_to_mat(const torch::Tensor& image) {
  auto t = image.detach().to(torch::kCPU).to(torch::kFloat64);
  if (t.dim() != 3 || t.size(0) != 3) {
    throw ShapeError("tensor_to_mat expects a [3, H, W] tensor");
  }
  auto bytes = ((t + 1.0) * 127.5)
                   .round()
                   .clamp(0, 255)
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  cv::Mat rgb(static_cast<int>(t.size(1)), static_cast<int>(t.size(2)), CV_8UC3,
              bytes.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

/// Maps a word image from [-1, 1] onto the [0, 1] measurement range.
inline torch::Tensor to_unit_range(const torch::Tensor& image) { return (image + 1.0) * 0.5; }

inline cv::Mat read_bgr(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) {
    throw LoadError("cannot read image " + path.string());
  }
  return m;
}

inline void write_png(const std::filesystem::path& path, const cv::Mat& bgr) {
  const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 3};
  if (!cv::imwrite(path.string(), bgr, params)) {
    throw Error("cannot write image " + path.string());
  }
}

inline void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
  write_png(path, tensor_to_mat(image));
}

/// Reads any image file and resizes it to `size`, returned as a word image.
inline torch::Tensor read_word_image(const std::filesystem::path& path,
                                     ImageSize size = kWordImageSize) {
  cv::Mat m = read_bgr(path);
  if (m.rows != size.height || m.cols != size.width) {
    cv::Mat resized;
    cv::resize(m, resized, cv::Size(size.width, size.height), 0, 0, cv::INTER_AREA);
    m = resized;
  }
  return mat_to_tensor(m);
}

/// Stacks equally sized [3, H, W] images vertically with a 2 px white gutter.
inline torch::Tensor make_grid(const std::vector<torch::Tensor>& images) {
  if (images.empty()) {
    throw InvalidInputError("make_grid needs at least one image");
  }
  const auto width = images.front().size(2);
  std::vector<torch::Tensor> rows;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].dim() != 3 || images[i].size(2) != width) {
      throw ShapeError("make_grid images must share width");
    }
    if (i > 0) {
      rows.push_back(torch::ones({3, 2, width}, images[i].options()));
    }
    rows.push_back(images[i].detach().clamp(-1.0, 1.0));
  }
  return torch::cat(rows, 1);
}

}  // namespace swaptext
