#pragma once

// Slow, direct re-implementations of the metrics used as test oracles.

#include <cmath>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace swaptext::testing {

using Plane = std::vector<std::vector<double>>;

inline Plane to_plane(const torch::Tensor& gray) {
  const auto g = gray.to(torch::kFloat64).contiguous();
  Plane p(static_cast<std::size_t>(g.size(0)), std::vector<double>(static_cast<std::size_t>(g.size(1))));
  auto acc = g.accessor<double, 2>();
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p[i].size(); ++j) p[i][j] = acc[i][j];
  }
  return p;
}

inline double naive_mse(const torch::Tensor& a, const torch::Tensor& b) {
  const auto x = a.to(torch::kFloat64).contiguous().view(-1);
  const auto y = b.to(torch::kFloat64).contiguous().view(-1);
  double sum = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = x[i].item<double>() - y[i].item<double>();
    sum += d * d;
  }
  return sum / static_cast<double>(x.numel());
}

/// Per-window SSIM with an explicit 11x11 Gaussian, averaged over valid windows.
inline double naive_ssim(const Plane& x, const Plane& y) {
  const int r = 5;
  double w[11][11], total = 0.0;
  for (int u = -r; u <= r; ++u) {
    for (int v = -r; v <= r; ++v) {
      w[u + r][v + r] = std::exp(-(u * u + v * v) / (2.0 * 1.5 * 1.5));
      total += w[u + r][v + r];
    }
  }
  const double c1 = 1e-4, c2 = 9e-4;
  const int h = static_cast<int>(x.size()), wd = static_cast<int>(x[0].size());
  double sum = 0.0;
  int windows = 0;
  for (int i = r; i < h - r; ++i) {
    for (int j = r; j < wd - r; ++j) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int u = -r; u <= r; ++u) {
        for (int v = -r; v <= r; ++v) {
          const double k = w[u + r][v + r] / total;
          mx += k * x[i + u][j + v];
          my += k * y[i + u][j + v];
        }
      }
      for (int u = -r; u <= r; ++u) {
        for (int v = -r; v <= r; ++v) {
          const double k = w[u + r][v + r] / total;
          const double dx = x[i + u][j + v] - mx, dy = y[i + u][j + v] - my;
          sxx += k * dx * dx;
          syy += k * dy * dy;
          sxy += k * dx * dy;
        }
      }
      sum += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
      ++windows;
    }
  }
  return sum / windows;
}

/// Same generator as tests/ssim_reference.py.
class Lcg {
 public:
  explicit Lcg(uint64_t seed) : state_(seed) {}
  double uniform() {
    state_ = state_ * 6364136223846793005ull + 1442695040888963407ull;
    return static_cast<double>(state_ >> 11) / static_cast<double>(1ull << 53);
  }

 private:
  uint64_t state_;
};

inline std::pair<torch::Tensor, torch::Tensor> lcg_pair(uint64_t seed, int64_t h, int64_t w) {
  Lcg g(seed);
  auto a = torch::empty({h, w}, torch::kFloat64), noise = torch::empty({h, w}, torch::kFloat64);
  for (auto* t : {&a, &noise}) {
    auto acc = t->accessor<double, 2>();
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) acc[i][j] = g.uniform();
    }
  }
  return {a, torch::clamp(0.6 * a + 0.4 * noise, 0.0, 1.0)};
}

}  // namespace swaptext::testing
