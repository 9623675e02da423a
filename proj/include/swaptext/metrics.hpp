#pragma once

// Image-quality metrics. All functions expect images already mapped to [0, 1];
// evaluate() does that mapping for word images stored in [-1, 1].

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "swaptext/dataforge.hpp"
#include "swaptext/error.hpp"
#include "swaptext/image.hpp"
#include "swaptext/nets.hpp"
#include "swaptext/trainer.hpp"

namespace swaptext::metrics {

inline constexpr double kPsnrCap = 99.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) {
    throw ShapeError("metric inputs differ in shape: " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

/// Mean squared difference over every pixel and channel.
inline double mse(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b);
  const auto d = a.to(torch::kFloat64) - b.to(torch::kFloat64);
  return (d * d).mean().item<double>();
}

/// Peak 1; identical images report kPsnrCap.
inline double psnr_from_mse(double m) {
  if (m <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(m));
}

inline double psnr(const torch::Tensor& a, const torch::Tensor& b) { return psnr_from_mse(mse(a, b)); }

/// [3, H, W] RGB -> [H, W] luma (BT.601 weights); [1, H, W] and [H, W] pass through.
inline torch::Tensor to_gray(const torch::Tensor& image) {
  const auto x = image.to(torch::kFloat64);
  if (x.dim() == 2) return x;
  if (x.dim() == 3 && x.size(0) == 1) return x[0];
  if (x.dim() == 3 && x.size(0) == 3) return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
  throw ShapeError("expected a [3, H, W], [1, H, W] or [H, W] image, got " + c10::str(x.sizes()));
}

inline torch::Tensor gaussian_window() {
  auto g = torch::arange(kSsimWindow, torch::kFloat64) - (kSsimWindow - 1) / 2;
  g = torch::exp(-(g * g) / (2.0 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  return torch::outer(g, g).reshape({1, 1, kSsimWindow, kSsimWindow});
}

/// Gaussian-windowed SSIM on luma, averaged over every window that fits
/// entirely inside the image.
inline double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b);
  const auto x = to_gray(a), y = to_gray(b);
  if (x.size(0) < kSsimWindow || x.size(1) < kSsimWindow) {
    throw InvalidInputError("SSIM needs images of at least 11x11 pixels, got " + c10::str(x.sizes()));
  }
  const auto w = gaussian_window();
  auto filter = [&](const torch::Tensor& t) { return torch::conv2d(t.unsqueeze(0).unsqueeze(0), w); };
  const auto mx = filter(x), my = filter(y);
  const auto sxx = filter(x * x) - mx * mx;
  const auto syy = filter(y * y) - my * my;
  const auto sxy = filter(x * y) - mx * my;
  const auto num = (2.0 * mx * my + kSsimC1) * (2.0 * sxy + kSsimC2);
  const auto den = (mx * mx + my * my + kSsimC1) * (sxx + syy + kSsimC2);
  return (num / den).mean().item<double>();
}

struct EvalRow {
  std::string id;
  double l2 = 0, psnr = 0, ssim = 0;
};

struct EvalReport {
  std::string method;
  std::string config_digest;
  std::vector<EvalRow> rows;
  double l2 = 0, psnr = 0, ssim = 0;

  std::size_t count() const noexcept { return rows.size(); }

  nlohmann::json to_json() const {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& r : rows) samples.push_back({{"id", r.id}, {"l2", r.l2}, {"psnr", r.psnr}, {"ssim", r.ssim}});
    return {{"method", method},
            {"config_digest", config_digest},
            {"count", count()},
            {"aggregate", {{"l2", l2}, {"psnr", psnr}, {"ssim", ssim}}},
            {"samples", samples}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.method = j.at("method").get<std::string>();
    r.config_digest = j.at("config_digest").get<std::string>();
    for (const auto& s : j.at("samples")) {
      r.rows.push_back({s.at("id").get<std::string>(), s.at("l2").get<double>(), s.at("psnr").get<double>(),
                        s.at("ssim").get<double>()});
    }
    const auto& agg = j.at("aggregate");
    r.l2 = agg.at("l2").get<double>();
    r.psnr = agg.at("psnr").get<double>();
    r.ssim = agg.at("ssim").get<double>();
    if (j.at("count").get<std::size_t>() != r.rows.size()) throw LoadError("eval report count does not match samples");
    return r;
  }

  /// Method | l2 | PSNR | SSIM, one row.
  std::string table() const {
    const int width = std::max<int>(6, static_cast<int>(method.size()));
    char line[256];
    std::string out;
    std::snprintf(line, sizeof line, "%-*s | %-8s | %-6s | %-6s\n", width, "Method", "l2", "PSNR", "SSIM");
    out += line;
    out += std::string(static_cast<std::size_t>(width) + 31, '-') + "\n";
    std::snprintf(line, sizeof line, "%-*s | %8.4f | %6.2f | %6.4f\n", width, method.c_str(), l2, psnr, ssim);
    out += line;
    return out;
  }
};

/// FNV-1a over the canonical JSON of the network configuration.
inline std::string config_digest(const nets::NetConfig& config) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : config.to_json().dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string method_label(const nets::NetConfig& config) {
  return std::string("swaptext attention=") + nets::to_string(config.attention) +
         " cstn=" + (config.use_cstn ? "on" : "off") + " dilated=" + (config.use_dilated ? "on" : "off");
}

/// Produces the target estimate for one sample, [3, H, W] in [-1, 1].
using Swapper = std::function<torch::Tensor(const data::PairedSample&)>;

inline EvalReport evaluate(const data::Dataset& dataset, const Swapper& swap, std::string method,
                           std::string digest) {
  if (dataset.empty()) throw ConfigError("cannot evaluate on an empty dataset: " + dataset.root().string());
  EvalReport report;
  report.method = std::move(method);
  report.config_digest = std::move(digest);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto sample = dataset.load(i);
    const auto estimate = to_unit_range(swap(sample));
    const auto truth = to_unit_range(sample.target);
    EvalRow row{sample.id, mse(estimate, truth), 0.0, ssim(estimate, truth)};
    row.psnr = psnr_from_mse(row.l2);
    report.rows.push_back(row);
  }
  const double n = static_cast<double>(report.rows.size());
  for (const auto& r : report.rows) {
    report.l2 += r.l2 / n;
    report.psnr += r.psnr / n;
    report.ssim += r.ssim / n;
  }
  return report;
}

inline EvalReport evaluate(nets::NetBundle& bundle, const data::Dataset& dataset) {
  return evaluate(
      dataset,
      [&](const data::PairedSample& s) { return train::infer_swap(bundle, s.style, s.content).target; },
      method_label(bundle.config), config_digest(bundle.config));
}

}  // namespace swaptext::metrics
