#pragma once

// Text-shape geometry: fiducial points sampled along character boxes and the
// thin-plate-spline warp that bends a horizontally rendered content image onto
// the shape of a style image.
//
// All fiducial coordinates are normalized: x / image width, y / image height,
// with the image occupying [0, 1] x [0, 1] and pixel (i, j) centered at
// ((j + 0.5) / W, (i + 0.5) / H).

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "swaptext/error.hpp"
#include "swaptext/image.hpp"

namespace swaptext::geometry {

inline constexpr int kDefaultFiducialCount = 5;
// Kernel-diagonal regularization. The interpolation residual at a control
// point is regularization * |radial weight|, so the solved warp keeps it tiny;
// the batched float32 path inside the networks uses the looser value.
inline constexpr double kTpsRegularization = 1e-9;
inline constexpr double kNetworkTpsRegularization = 1e-6;
inline constexpr double kWarpFillValue = -1.0;

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
  friend Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
  friend Point operator*(Point a, double s) { return {a.x * s, a.y * s}; }
  friend Point operator*(double s, Point a) { return a * s; }
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline Point lerp(Point a, Point b, double t) { return a + (b - a) * t; }

/// Character box: four corners in pixel coordinates, clockwise from top-left.
struct Quad {
  std::array<Point, 4> corners{};

  Point top_left() const { return corners[0]; }
  Point top_right() const { return corners[1]; }
  Point bottom_right() const { return corners[2]; }
  Point bottom_left() const { return corners[3]; }

  double area() const {
    double twice = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const Point a = corners[i];
      const Point b = corners[(i + 1) % 4];
      twice += a.x * b.y - b.x * a.y;
    }
    return std::abs(twice) * 0.5;
  }

  bool finite() const {
    return std::ranges::all_of(corners, [](Point p) { return std::isfinite(p.x) && std::isfinite(p.y); });
  }

  template <class F>
  Quad mapped(F&& f) const {
    Quad q;
    for (std::size_t i = 0; i < 4; ++i) q.corners[i] = f(corners[i]);
    return q;
  }

  static Quad axis_aligned(double x0, double y0, double x1, double y1) {
    return Quad{{Point{x0, y0}, Point{x1, y0}, Point{x1, y1}, Point{x0, y1}}};
  }
};

inline nlohmann::json to_json(const Quad& q) {
  auto arr = nlohmann::json::array();
  for (const Point& p : q.corners) arr.push_back({p.x, p.y});
  return arr;
}

inline Quad quad_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) {
    throw InvalidInputError("quad must be an array of four [x, y] pairs");
  }
  Quad q;
  for (std::size_t i = 0; i < 4; ++i) {
    q.corners[i] = {j[i].at(0).get<double>(), j[i].at(1).get<double>()};
  }
  return q;
}

/// 2K ordered shape points: K top points left to right, then K bottom points
/// left to right.
class FiducialSet {
 public:
  FiducialSet(int k, std::vector<Point> points) : k_(k), points_(std::move(points)) {
    if (k_ < 1) {
      throw InvalidInputError("fiducial count K must be positive");
    }
    if (points_.size() != static_cast<std::size_t>(2 * k_)) {
      throw InvalidInputError("fiducial set needs exactly 2K points, got " +
                              std::to_string(points_.size()) + " for K=" + std::to_string(k_));
    }
    for (const Point& p : points_) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
        throw InvalidInputError("fiducial coordinates must be finite");
      }
    }
  }

  int k() const noexcept { return k_; }
  std::span<const Point> points() const noexcept { return points_; }
  std::span<const Point> top() const noexcept { return std::span(points_).first(k_); }
  std::span<const Point> bottom() const noexcept { return std::span(points_).last(k_); }
  const Point& operator[](std::size_t i) const { return points_.at(i); }

  /// Top row above bottom row column by column; both rows non-decreasing in x.
  bool well_ordered(double tolerance = 0.0) const {
    const auto t = top();
    const auto b = bottom();
    for (int i = 0; i < k_; ++i) {
      if (t[i].y > b[i].y + tolerance) return false;
      if (i > 0 && (t[i].x + tolerance < t[i - 1].x || b[i].x + tolerance < b[i - 1].x)) return false;
    }
    return true;
  }

  /// [2K, 2] tensor, row-major (x, y).
  torch::Tensor to_tensor(torch::Dtype dtype = torch::kFloat64) const {
    auto t = torch::empty({2 * k_, 2}, torch::kFloat64);
    auto acc = t.accessor<double, 2>();
    for (int i = 0; i < 2 * k_; ++i) {
      acc[i][0] = points_[i].x;
      acc[i][1] = points_[i].y;
    }
    return t.to(dtype);
  }

  static FiducialSet from_tensor(const torch::Tensor& t) {
    if (t.dim() != 2 || t.size(1) != 2 || t.size(0) % 2 != 0) {
      throw ShapeError("fiducial tensor must be [2K, 2]");
    }
    auto d = t.detach().to(torch::kCPU).to(torch::kFloat64).contiguous();
    auto acc = d.accessor<double, 2>();
    std::vector<Point> pts;
    pts.reserve(static_cast<std::size_t>(d.size(0)));
    for (int64_t i = 0; i < d.size(0); ++i) pts.push_back({acc[i][0], acc[i][1]});
    const int k = static_cast<int>(d.size(0) / 2);
    return FiducialSet(k, std::move(pts));
  }

  /// JSON array of [x, y] pairs, top row then bottom row.
  nlohmann::json to_json() const {
    auto arr = nlohmann::json::array();
    for (const Point& p : points_) arr.push_back({p.x, p.y});
    return arr;
  }

  static FiducialSet from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.empty() || j.size() % 2 != 0) {
      throw InvalidInputError("fiducials must be a non-empty JSON array of 2K [x, y] pairs");
    }
    std::vector<Point> pts;
    for (const auto& pair : j) pts.push_back({pair.at(0).get<double>(), pair.at(1).get<double>()});
    const int k = static_cast<int>(pts.size() / 2);
    return FiducialSet(k, std::move(pts));
  }

  friend bool operator==(const FiducialSet&, const FiducialSet&) = default;

 private:
  int k_;
  std::vector<Point> points_;
};

/// Samples `count` points at equal arc length along a polyline, endpoints
/// included. Between vertices the position is linearly interpolated.
inline std::vector<Point> resample_polyline(std::span<const Point> polyline, int count) {
  if (polyline.empty() || count < 1) {
    throw InvalidInputError("resample_polyline needs a vertex and a positive count");
  }
  std::vector<double> cumulative(polyline.size(), 0.0);
  for (std::size_t i = 1; i < polyline.size(); ++i) {
    cumulative[i] = cumulative[i - 1] + distance(polyline[i - 1], polyline[i]);
  }
  const double total = cumulative.back();
  std::vector<Point> out;
  out.reserve(static_cast<std::size_t>(count));
  std::size_t segment = 1;
  for (int s = 0; s < count; ++s) {
    if (total <= 0.0 || polyline.size() == 1) {
      out.push_back(polyline.front());
      continue;
    }
    const double target = count == 1 ? 0.0 : total * static_cast<double>(s) / (count - 1);
    while (segment + 1 < polyline.size() && cumulative[segment] < target) ++segment;
    const double seg_len = cumulative[segment] - cumulative[segment - 1];
    const double t = seg_len > 0.0 ? std::clamp((target - cumulative[segment - 1]) / seg_len, 0.0, 1.0) : 0.0;
    out.push_back(lerp(polyline[segment - 1], polyline[segment], t));
  }
  // Land exactly on the tail vertex; accumulated round-off would otherwise
  // leave it a few ulps short.
  out.back() = count == 1 ? polyline.front() : polyline.back();
  return out;
}

/// Builds the top and bottom center polylines of an ordered run of character
/// boxes and samples K fiducials on each at equal arc length.
///
/// The top polyline is {top-left corner of the first box, top-edge midpoint of
/// every box, top-right corner of the last box}; the bottom polyline mirrors it
/// with the bottom corners and bottom-edge midpoints.
inline FiducialSet extract_fiducials(std::span<const Quad> char_boxes, int k, ImageSize image_size) {
  if (char_boxes.empty()) {
    throw InvalidInputError("extract_fiducials needs at least one character box");
  }
  if (k < 2) {
    throw InvalidInputError("extract_fiducials needs K >= 2");
  }
  if (image_size.width <= 0 || image_size.height <= 0) {
    throw InvalidInputError("image size must be positive");
  }
  for (std::size_t i = 0; i < char_boxes.size(); ++i) {
    if (!char_boxes[i].finite()) {
      throw InvalidInputError("character box " + std::to_string(i) + " has non-finite coordinates");
    }
    if (!(char_boxes[i].area() > 0.0)) {
      throw InvalidInputError("character box " + std::to_string(i) + " is degenerate (zero area)");
    }
  }

  std::vector<Point> top_line;
  std::vector<Point> bottom_line;
  top_line.reserve(char_boxes.size() + 2);
  bottom_line.reserve(char_boxes.size() + 2);
  top_line.push_back(char_boxes.front().top_left());
  bottom_line.push_back(char_boxes.front().bottom_left());
  for (const Quad& box : char_boxes) {
    top_line.push_back(lerp(box.top_left(), box.top_right(), 0.5));
    bottom_line.push_back(lerp(box.bottom_left(), box.bottom_right(), 0.5));
  }
  top_line.push_back(char_boxes.back().top_right());
  bottom_line.push_back(char_boxes.back().bottom_right());

  const double sx = 1.0 / image_size.width;
  const double sy = 1.0 / image_size.height;
  std::vector<Point> points;
  points.reserve(static_cast<std::size_t>(2 * k));
  for (Point p : resample_polyline(top_line, k)) points.push_back({p.x * sx, p.y * sy});
  for (Point p : resample_polyline(bottom_line, k)) points.push_back({p.x * sx, p.y * sy});
  return FiducialSet(k, std::move(points));
}

/// Fiducials of the horizontal band a content image's text is rendered into:
/// rows at y = 0.25 and y = 0.75, x evenly spaced over [0.05, 0.95]. The band
/// is fixed in normalized units, so `aspect` only has to be valid.
inline FiducialSet canonical_fiducials(int k, double aspect = 4.0) {
  if (k < 2) throw InvalidInputError("canonical_fiducials needs K >= 2");
  if (!(aspect > 0.0) || !std::isfinite(aspect)) throw InvalidInputError("aspect must be positive");
  constexpr double left = 0.05;
  constexpr double right = 0.95;
  std::vector<Point> pts;
  pts.reserve(static_cast<std::size_t>(2 * k));
  for (double y : {0.25, 0.75}) {
    for (int i = 0; i < k; ++i) {
      pts.push_back({left + (right - left) * static_cast<double>(i) / (k - 1), y});
    }
  }
  return FiducialSet(k, std::move(pts));
}

// ---------------------------------------------------------------------------
// Thin-plate spline on tensors. Shapes are batched: control points [B, n, 2],
// query points [B, m, 2], coefficients [B, n + 3, 2] (n radial weights, then
// constant, x and y affine rows). Differentiable in every input.

/// U(r) = r^2 log r evaluated from squared distances, with U(0) = 0.
inline torch::Tensor tps_kernel(const torch::Tensor& a, const torch::Tensor& b) {
  auto d2 = (a.unsqueeze(2) - b.unsqueeze(1)).pow(2).sum(-1);
  return 0.5 * d2 * torch::log(d2.clamp_min(1e-30));
}

inline torch::Tensor tps_coefficients(const torch::Tensor& source, const torch::Tensor& target,
                                      double regularization = kTpsRegularization) {
  if (source.dim() != 3 || source.sizes() != target.sizes() || source.size(2) != 2) {
    throw ShapeError("tps_coefficients expects matching [B, n, 2] control point tensors");
  }
  const auto batch = source.size(0);
  const auto n = source.size(1);
  auto opts = source.options();
  auto kernel = tps_kernel(source, source) + regularization * torch::eye(n, opts);
  auto affine = torch::cat({torch::ones({batch, n, 1}, opts), source}, 2);
  auto top = torch::cat({kernel, affine}, 2);
  auto bottom = torch::cat({affine.transpose(1, 2), torch::zeros({batch, 3, 3}, opts)}, 2);
  auto system = torch::cat({top, bottom}, 1);
  auto rhs = torch::cat({target, torch::zeros({batch, 3, 2}, opts)}, 1);
  return torch::linalg_solve(system, rhs);
}

inline torch::Tensor tps_transform(const torch::Tensor& coefficients, const torch::Tensor& control,
                                   const torch::Tensor& points) {
  const auto n = control.size(1);
  auto radial = torch::bmm(tps_kernel(points, control), coefficients.narrow(1, 0, n));
  auto affine = torch::cat({torch::ones({points.size(0), points.size(1), 1}, points.options()), points}, 2);
  return radial + torch::bmm(affine, coefficients.narrow(1, n, 3));
}

/// Normalized pixel-center coordinates of an image, [H * W, 2] in raster order.
inline torch::Tensor pixel_centers(ImageSize size, const torch::TensorOptions& opts) {
  auto ys = (torch::arange(size.height, opts) + 0.5) / size.height;
  auto xs = (torch::arange(size.width, opts) + 0.5) / size.width;
  auto grid = torch::meshgrid({ys, xs}, "ij");
  return torch::stack({grid[1].reshape(-1), grid[0].reshape(-1)}, 1);
}

/// Bilinear sampling of [B, C, H, W] images at normalized coordinates
/// [B, Ho, Wo, 2]; samples falling outside the image blend towards `fill`.
inline torch::Tensor sample_bilinear(const torch::Tensor& images, const torch::Tensor& coords,
                                     double fill = kWarpFillValue) {
  namespace F = torch::nn::functional;
  auto grid = coords * 2.0 - 1.0;
  auto shifted = images - fill;
  auto sampled = F::grid_sample(shifted, grid,
                                F::GridSampleFuncOptions()
                                    .mode(torch::kBilinear)
                                    .padding_mode(torch::kZeros)
                                    .align_corners(false));
  return sampled + fill;
}

/// Warps images so that the control points `source` land on `target`. Output
/// pixels are backward-mapped through the spline solved from target to source.
inline torch::Tensor tps_warp_images(const torch::Tensor& images, const torch::Tensor& source,
                                     const torch::Tensor& target, ImageSize out_size,
                                     double regularization = kTpsRegularization,
                                     double fill = kWarpFillValue) {
  const auto batch = images.size(0);
  auto inverse = tps_coefficients(target, source, regularization);
  auto query = pixel_centers(out_size, images.options()).unsqueeze(0).expand({batch, -1, -1}).contiguous();
  auto coords = tps_transform(inverse, target, query).view({batch, out_size.height, out_size.width, 2});
  return sample_bilinear(images, coords, fill);
}

namespace detail {

inline void require_spread(const torch::Tensor& pts, const char* role) {
  const auto n = pts.size(0);
  auto d = torch::cdist(pts.unsqueeze(0), pts.unsqueeze(0)).squeeze(0) +
           torch::eye(n, pts.options()) * 1e9;
  if (d.min().item<double>() < 1e-9) {
    throw DegenerateGeometryError(std::string("TPS ") + role + " points contain coincident points");
  }
  auto centered = pts - pts.mean(0, true);
  auto sv = torch::linalg_svdvals(centered);
  const double largest = sv[0].item<double>();
  if (!(largest > 0.0) || sv[1].item<double>() < 1e-9 * std::max(1.0, largest)) {
    throw DegenerateGeometryError(std::string("TPS ") + role + " points are collinear");
  }
}

}  // namespace detail

/// Solved spline mapping source fiducials onto target fiducials.
class TpsWarp {
 public:
  TpsWarp(FiducialSet source, FiducialSet target, torch::Tensor coefficients, double regularization)
      : source_(std::move(source)),
        target_(std::move(target)),
        coefficients_(std::move(coefficients)),
        regularization_(regularization) {}

  const FiducialSet& source() const noexcept { return source_; }
  const FiducialSet& target() const noexcept { return target_; }
  double regularization() const noexcept { return regularization_; }

  /// [n + 3, 2]: radial weights for each source point, then constant, x, y rows.
  const torch::Tensor& coefficients() const noexcept { return coefficients_; }
  torch::Tensor radial_coefficients() const { return coefficients_.narrow(0, 0, 2 * source_.k()); }
  /// [2, 3] matrix A with affine(p) = A * (1, x, y).
  torch::Tensor affine_matrix() const { return coefficients_.narrow(0, 2 * source_.k(), 3).t(); }

  /// Maps [m, 2] normalized points.
  torch::Tensor apply(const torch::Tensor& points) const {
    auto pts = points.to(torch::kFloat64).unsqueeze(0);
    return tps_transform(coefficients_.unsqueeze(0), source_.to_tensor().unsqueeze(0), pts).squeeze(0);
  }

  Point apply(Point p) const {
    auto out = apply(torch::tensor({{p.x, p.y}}, torch::kFloat64));
    return {out[0][0].item<double>(), out[0][1].item<double>()};
  }

 private:
  FiducialSet source_;
  FiducialSet target_;
  torch::Tensor coefficients_;
  double regularization_;
};

inline TpsWarp tps_solve(const FiducialSet& source, const FiducialSet& target,
                         double regularization = kTpsRegularization) {
  if (source.k() != target.k()) {
    throw ShapeError("tps_solve needs source and target with the same K");
  }
  auto src = source.to_tensor();
  detail::require_spread(src, "source");
  auto coeffs = tps_coefficients(src.unsqueeze(0), target.to_tensor().unsqueeze(0), regularization).squeeze(0);
  if (!torch::isfinite(coeffs).all().item<bool>()) {
    throw DegenerateGeometryError("TPS system is singular");
  }
  return TpsWarp(source, target, coeffs, regularization);
}

/// Backward-mapping bilinear warp of a [3, H, W] or [B, 3, H, W] image.
/// Pixels whose preimage falls outside the input take kWarpFillValue.
inline torch::Tensor warp_image(const torch::Tensor& image, const TpsWarp& warp, ImageSize out_size) {
  const bool batched = image.dim() == 4;
  if (!batched && image.dim() != 3) {
    throw ShapeError("warp_image expects [3, H, W] or [B, 3, H, W]");
  }
  auto target = warp.target().to_tensor();
  detail::require_spread(target, "target");
  auto input = batched ? image : image.unsqueeze(0);
  const auto batch = input.size(0);
  auto src = warp.source().to_tensor(input.scalar_type()).unsqueeze(0).expand({batch, -1, -1}).contiguous();
  auto tgt = target.to(input.scalar_type()).unsqueeze(0).expand({batch, -1, -1}).contiguous();
  auto out = tps_warp_images(input, src, tgt, out_size, warp.regularization());
  return batched ? out : out.squeeze(0);
}

}  // namespace swaptext::geometry
