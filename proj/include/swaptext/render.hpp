#pragma once

// Word rasterization with per-character boxes tracked through geometric
// styling (rotation, perspective, arc curving).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/freetype.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"
#include "swaptext/error.hpp"
#include "swaptext/geometry.hpp"
#include "swaptext/image.hpp"

namespace swaptext::data {

using geometry::Point;
using geometry::Quad;

/// Splits UTF-8 text into one string per code point.
inline std::vector<std::string> utf8_glyphs(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    if (lead < 0x80) len = 1;
    else if ((lead >> 5) == 0x6) len = 2;
    else if ((lead >> 4) == 0xE) len = 3;
    else if ((lead >> 3) == 0x1E) len = 4;
    else throw InvalidInputError("invalid UTF-8 lead byte in text");
    if (i + len > text.size()) throw InvalidInputError("truncated UTF-8 sequence in text");
    for (std::size_t j = 1; j < len; ++j) {
      if ((static_cast<unsigned char>(text[i + j]) >> 6) != 0x2) {
        throw InvalidInputError("invalid UTF-8 continuation byte in text");
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

inline bool is_space_glyph(const std::string& g) { return g == " " || g == "\t"; }

struct Rgb {
  int r = 0;
  int g = 0;
  int b = 0;

  cv::Scalar bgr() const { return cv::Scalar(b, g, r); }
  double luminance() const { return 0.299 * r + 0.587 * g + 0.114 * b; }
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline void to_json(nlohmann::json& j, const Rgb& c) { j = nlohmann::json::array({c.r, c.g, c.b}); }
inline void from_json(const nlohmann::json& j, Rgb& c) {
  c = {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}

/// Appearance and geometry of one rendered word.
struct StyleSpec {
  std::string font;                  // file name inside the font directory, or a path
  double font_size = 36.0;           // px; shrunk if the word does not fit the canvas
  Rgb fill{255, 255, 255};
  std::optional<Rgb> outline;
  int outline_width = 0;
  double rotation_deg = 0.0;         // [-30, 30]
  double perspective = 0.0;          // [-0.3, 0.3], horizontal foreshortening
  double curve = 0.0;                // arc angle spanned by the word, radians, [-1.5, 1.5]
  cv::Rect crop{0, 0, 256, 64};      // background region, resized to the word image
  std::string background;

  void validate() const {
    if (font.empty()) throw InvalidInputError("style font is empty");
    if (!(font_size > 0.0)) throw InvalidInputError("style font size must be positive");
    for (const Rgb* c : {&fill, outline ? &*outline : &fill}) {
      for (int v : {c->r, c->g, c->b}) {
        if (v < 0 || v > 255) throw InvalidInputError("style colors must be in [0, 255]");
      }
    }
    if (outline_width < 0 || outline_width > 4) throw InvalidInputError("outline width must be in [0, 4]");
    if (std::abs(rotation_deg) > 30.0) throw InvalidInputError("rotation must be within +-30 degrees");
    if (std::abs(perspective) > 0.3) throw InvalidInputError("perspective must be within +-0.3");
    if (std::abs(curve) > 1.5) throw InvalidInputError("curve must be within +-1.5 rad");
  }

  bool curved() const { return curve != 0.0; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["font"] = font;
    j["font_size"] = font_size;
    j["fill"] = fill;
    j["outline"] = outline ? nlohmann::json(*outline) : nlohmann::json(nullptr);
    j["outline_width"] = outline_width;
    j["rotation_deg"] = rotation_deg;
    j["perspective"] = perspective;
    j["curve"] = curve;
    j["crop"] = {crop.x, crop.y, crop.width, crop.height};
    j["background"] = background;
    return j;
  }

  static StyleSpec from_json(const nlohmann::json& j) {
    StyleSpec s;
    s.font = j.at("font").get<std::string>();
    s.font_size = j.at("font_size").get<double>();
    s.fill = j.at("fill").get<Rgb>();
    if (!j.at("outline").is_null()) s.outline = j.at("outline").get<Rgb>();
    s.outline_width = j.at("outline_width").get<int>();
    s.rotation_deg = j.at("rotation_deg").get<double>();
    s.perspective = j.at("perspective").get<double>();
    s.curve = j.at("curve").get<double>();
    const auto& c = j.at("crop");
    s.crop = cv::Rect(c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>(), c.at(3).get<int>());
    s.background = j.at("background").get<std::string>();
    return s;
  }

  /// FNV-1a of the canonical JSON form, as 16 hex digits.
  std::string digest() const;
};

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kHex[h & 0xF];
    h >>= 4;
  }
  return out;
}

inline std::string StyleSpec::digest() const { return fnv1a_hex(to_json().dump()); }

/// Loaded FreeType faces keyed by font name. Not thread-safe: OpenCV's
/// FreeType wrapper keeps per-face render state.
class FontLibrary {
 public:
  explicit FontLibrary(std::filesystem::path font_dir = SWAPTEXT_DEFAULT_FONT_DIR)
      : font_dir_(std::move(font_dir)) {}

  const std::filesystem::path& font_dir() const noexcept { return font_dir_; }

  std::filesystem::path resolve(const std::string& font) const {
    std::filesystem::path p(font);
    return p.is_absolute() ? p : font_dir_ / p;
  }

  cv::freetype::FreeType2& face(const std::string& font) {
    auto it = faces_.find(font);
    if (it == faces_.end()) {
      const auto path = resolve(font);
      if (!std::filesystem::is_regular_file(path)) {
        throw ConfigError("font not found: " + path.string());
      }
      auto ft = cv::freetype::createFreeType2();
      try {
        ft->loadFontData(path.string(), 0);
      } catch (const cv::Exception& e) {
        throw ConfigError("cannot load font " + path.string() + ": " + e.what());
      }
      it = faces_.emplace(font, ft).first;
    }
    return *it->second;
  }

  /// Renders `glyph` alone as an 8-bit coverage mask.
  cv::Mat glyph_mask(const std::string& font, const std::string& glyph, int size, int thickness = -1) {
    const int side = size * 3;
    cv::Mat canvas(side, side, CV_8UC3, cv::Scalar::all(0));
    face(font).putText(canvas, glyph, cv::Point(size, 2 * size), size, cv::Scalar::all(255),
                       thickness, cv::LINE_AA, true);
    cv::Mat mask;
    cv::extractChannel(canvas, mask, 0);
    return mask;
  }

  /// A glyph is missing when the font renders it as its .notdef box, which is
  /// what an unassigned plane-16 private-use code point produces.
  bool has_glyph(const std::string& font, const std::string& glyph) {
    if (is_space_glyph(glyph)) return true;
    const auto key = std::make_pair(font, glyph);
    if (auto it = coverage_.find(key); it != coverage_.end()) return it->second;
    constexpr int kProbeSize = 32;
    const cv::Mat probe = glyph_mask(font, glyph, kProbeSize);
    const cv::Mat notdef = glyph_mask(font, "\xF4\x8F\xBF\xBD", kProbeSize);
    const bool present = cv::countNonZero(probe) > 0 && cv::norm(probe, notdef, cv::NORM_L1) > 0.0;
    coverage_.emplace(key, present);
    return present;
  }

 private:
  std::filesystem::path font_dir_;
  std::map<std::string, cv::Ptr<cv::freetype::FreeType2>> faces_;
  std::map<std::pair<std::string, std::string>, bool> coverage_;
};

/// A rendered word on a transparent canvas. `premultiplied` is CV_32FC4 in
/// B, G, R, A order with color channels premultiplied by alpha in [0, 1];
/// zero alpha always carries zero color.
struct TextLayer {
  cv::Mat premultiplied;
  std::vector<Quad> char_boxes;
  double font_size = 0.0;

  cv::Mat alpha() const {
    cv::Mat a;
    cv::extractChannel(premultiplied, a, 3);
    return a;
  }
};

namespace detail {

// Word laid out on a horizontal baseline, before geometric styling.
struct FlatWord {
  cv::Mat fill;       // CV_32F coverage
  cv::Mat outline;    // CV_32F coverage, empty without outline
  std::vector<Quad> boxes;
  Point center;
};

inline cv::Rect ink_bounds(const cv::Mat& mask) { return cv::boundingRect(mask); }

inline FlatWord layout_word(const std::vector<std::string>& glyphs, const std::string& font, int size,
                            int outline_width, FontLibrary& fonts) {
  const int stroke = outline_width > 0 ? outline_width : -1;
  const int origin_x = size;
  const int baseline = 2 * size;

  struct Placed {
    std::string glyph;
    int ink_left = 0;  // ink offset from the pen origin
    int ink_width = 0;
    int ink_top = 0;   // relative to baseline, negative above
    int ink_bottom = 0;
  };
  auto measure = [&](const std::string& g) {
    cv::Mat m = fonts.glyph_mask(font, g, size);
    if (outline_width > 0) m = cv::max(m, fonts.glyph_mask(font, g, size, stroke));
    return ink_bounds(m);
  };

  // Line box from the tallest ascender and deepest descender of the font so
  // every character box in a word shares the same vertical extent.
  const cv::Rect asc = measure("H");
  const cv::Rect desc = measure("g");
  int line_top = asc.y - baseline;
  int line_bottom = desc.y + desc.height - baseline;

  std::vector<Placed> placed;
  const int spacing = std::max(1, static_cast<int>(std::lround(0.06 * size)));
  const int space_advance = std::max(2, static_cast<int>(std::lround(0.33 * size)));
  int pen = 0;
  std::vector<std::pair<int, int>> spans;  // [left, right) per glyph in layout x
  for (const auto& g : glyphs) {
    if (is_space_glyph(g)) {
      spans.emplace_back(pen, pen + space_advance);
      placed.push_back({g, 0, space_advance, 0, 0});
      pen += space_advance + spacing;
      continue;
    }
    const cv::Rect r = measure(g);
    if (r.width == 0 || r.height == 0) {
      throw UnsupportedGlyphError(g, font);
    }
    placed.push_back({g, r.x - origin_x, r.width, r.y - baseline, r.y + r.height - baseline});
    line_top = std::min(line_top, r.y - baseline);
    line_bottom = std::max(line_bottom, r.y + r.height - baseline);
    spans.emplace_back(pen, pen + r.width);
    pen += r.width + spacing;
  }
  const int text_width = pen - spacing;
  const int pad = outline_width + 4;
  const int canvas_w = text_width + 2 * pad;
  const int line_h = line_bottom - line_top;
  const int canvas_h = line_h + 2 * pad;
  const int canvas_baseline = pad - line_top;

  cv::Mat fill8(canvas_h, canvas_w, CV_8UC3, cv::Scalar::all(0));
  cv::Mat outline8;
  if (outline_width > 0) outline8 = cv::Mat(canvas_h, canvas_w, CV_8UC3, cv::Scalar::all(0));

  FlatWord word;
  for (std::size_t i = 0; i < placed.size(); ++i) {
    const auto& p = placed[i];
    const int left = pad + spans[i].first;
    const int right = pad + spans[i].second;
    const double top = canvas_baseline + line_top;
    const double bottom = canvas_baseline + line_bottom;
    word.boxes.push_back(Quad::axis_aligned(left, top, right, bottom));
    if (is_space_glyph(p.glyph)) continue;
    const cv::Point origin(left - p.ink_left, canvas_baseline);
    fonts.face(font).putText(fill8, p.glyph, origin, size, cv::Scalar::all(255), -1, cv::LINE_AA, true);
    if (outline_width > 0) {
      fonts.face(font).putText(outline8, p.glyph, origin, size, cv::Scalar::all(255), stroke, cv::LINE_AA, true);
    }
  }
  auto to_coverage = [](const cv::Mat& m8) {
    cv::Mat c, f;
    cv::extractChannel(m8, c, 0);
    c.convertTo(f, CV_32F, 1.0 / 255.0);
    return f;
  };
  word.fill = to_coverage(fill8);
  if (outline_width > 0) word.outline = to_coverage(outline8);
  word.center = {pad + text_width / 2.0, canvas_baseline + (line_top + line_bottom) / 2.0};
  return word;
}

// Geometric styling: an arc bend about the word center followed by rotation
// and horizontal foreshortening, then a move onto the output center.
class StyleTransform {
 public:
  StyleTransform(const StyleSpec& spec, Point flat_center, double word_width, ImageSize out)
      : center_(flat_center), curve_(spec.curve) {
    radius_ = std::abs(curve_) > 1e-9 ? std::max(word_width, 1.0) / std::abs(curve_) : 0.0;
    const double a = spec.rotation_deg * CV_PI / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    const cv::Matx33d to_origin(1, 0, -flat_center.x, 0, 1, -flat_center.y, 0, 0, 1);
    const cv::Matx33d rotate(c, -s, 0, s, c, 0, 0, 0, 1);
    const cv::Matx33d foreshorten(1, 0, 0, 0, 1, 0, spec.perspective / std::max(word_width, 1.0), 0, 1);
    const cv::Matx33d to_out(1, 0, out.width / 2.0, 0, 1, out.height / 2.0, 0, 0, 1);
    homography_ = to_out * foreshorten * rotate * to_origin;
    inverse_ = homography_.inv();
  }

  Point forward(Point p) const { return project(homography_, bend(p)); }
  Point inverse(Point q) const { return unbend(project(inverse_, q)); }

 private:
  static Point project(const cv::Matx33d& h, Point p) {
    const cv::Vec3d v = h * cv::Vec3d(p.x, p.y, 1.0);
    return {v[0] / v[2], v[1] / v[2]};
  }

  // Positive curve arches the word (circle center below), negative sags it.
  Point bend(Point p) const {
    if (radius_ == 0.0) return p;
    const double theta = (p.x - center_.x) / radius_;
    const double dy = p.y - center_.y;
    if (curve_ > 0) {
      const double r = radius_ - dy;
      return {center_.x + r * std::sin(theta), center_.y + radius_ - r * std::cos(theta)};
    }
    const double r = radius_ + dy;
    return {center_.x + r * std::sin(theta), center_.y - radius_ + r * std::cos(theta)};
  }

  Point unbend(Point q) const {
    if (radius_ == 0.0) return q;
    const double vx = q.x - center_.x;
    if (curve_ > 0) {
      const double vy = center_.y + radius_ - q.y;
      return {center_.x + std::atan2(vx, vy) * radius_, center_.y + radius_ - std::hypot(vx, vy)};
    }
    const double vy = q.y - (center_.y - radius_);
    return {center_.x + std::atan2(vx, vy) * radius_, center_.y + std::hypot(vx, vy) - radius_};
  }

  Point center_;
  double curve_;
  double radius_ = 0.0;
  cv::Matx33d homography_;
  cv::Matx33d inverse_;
};

inline bool boxes_fit(const std::vector<Quad>& boxes, ImageSize size) {
  for (const Quad& q : boxes) {
    for (Point p : q.corners) {
      if (p.x < 1.0 || p.y < 1.0 || p.x > size.width - 1.0 || p.y > size.height - 1.0) return false;
    }
  }
  return true;
}

}  // namespace detail

/// Rasterizes `text` with `spec` onto a transparent size.height x size.width
/// canvas. Character boxes follow the same geometric mapping as the pixels.
/// The font size shrinks by 10% steps until every box fits inside the canvas.
inline TextLayer render_text_layer(std::string_view text, const StyleSpec& spec, ImageSize size,
                                   FontLibrary& fonts) {
  spec.validate();
  const auto glyphs = utf8_glyphs(text);
  if (glyphs.empty()) throw InvalidInputError("cannot render empty text");
  if (std::ranges::all_of(glyphs, is_space_glyph)) throw InvalidInputError("cannot render blank text");
  for (const auto& g : glyphs) {
    if (!fonts.has_glyph(spec.font, g)) throw UnsupportedGlyphError(g, spec.font);
  }

  double font_size = spec.font_size;
  for (int attempt = 0;; ++attempt) {
    const int px = static_cast<int>(std::lround(font_size));
    if (px < 6) throw InvalidInputError("text does not fit the canvas: " + std::string(text));
    auto word = detail::layout_word(glyphs, spec.font, px, spec.outline ? spec.outline_width : 0, fonts);
    const double word_width = word.boxes.back().top_right().x - word.boxes.front().top_left().x;
    const detail::StyleTransform transform(spec, word.center, word_width, size);

    std::vector<Quad> boxes;
    for (const Quad& q : word.boxes) boxes.push_back(q.mapped([&](Point p) { return transform.forward(p); }));
    if (!detail::boxes_fit(boxes, size)) {
      font_size *= 0.9;
      continue;
    }

    // Premultiplied flat layer: outline (if any) sits under the fill.
    cv::Mat flat(word.fill.size(), CV_32FC4);
    const cv::Scalar fill = spec.fill.bgr() / 255.0;
    const cv::Scalar stroke = spec.outline ? spec.outline->bgr() / 255.0 : cv::Scalar::all(0);
    for (int y = 0; y < flat.rows; ++y) {
      for (int x = 0; x < flat.cols; ++x) {
        const float af = word.fill.at<float>(y, x);
        const float ao = word.outline.empty() ? 0.0f : word.outline.at<float>(y, x) * (1.0f - af);
        cv::Vec4f& px4 = flat.at<cv::Vec4f>(y, x);
        for (int c = 0; c < 3; ++c) px4[c] = static_cast<float>(fill[c] * af + stroke[c] * ao);
        px4[3] = af + ao;
      }
    }

    cv::Mat map_x(size.height, size.width, CV_32F), map_y(size.height, size.width, CV_32F);
    for (int i = 0; i < size.height; ++i) {
      for (int j = 0; j < size.width; ++j) {
        const Point src = transform.inverse({j + 0.5, i + 0.5});
        map_x.at<float>(i, j) = static_cast<float>(src.x - 0.5);
        map_y.at<float>(i, j) = static_cast<float>(src.y - 0.5);
      }
    }
    TextLayer layer;
    cv::remap(flat, layer.premultiplied, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar::all(0));
    // Clean interpolation dust so that zero alpha means exactly zero color.
    for (int i = 0; i < size.height; ++i) {
      for (int j = 0; j < size.width; ++j) {
        cv::Vec4f& p = layer.premultiplied.at<cv::Vec4f>(i, j);
        if (p[3] <= 1e-6f) p = cv::Vec4f(0, 0, 0, 0);
      }
    }
    layer.char_boxes = std::move(boxes);
    layer.font_size = px;
    return layer;
  }
}

/// Alpha-composites a layer over an 8-bit BGR background of the same size.
/// Pixels with zero alpha keep the background value exactly.
inline cv::Mat composite(const TextLayer& layer, const cv::Mat& background) {
  if (background.type() != CV_8UC3 || background.size() != layer.premultiplied.size()) {
    throw ShapeError("composite needs an 8-bit BGR background matching the layer size");
  }
  cv::Mat out(background.size(), CV_8UC3);
  for (int i = 0; i < out.rows; ++i) {
    for (int j = 0; j < out.cols; ++j) {
      const cv::Vec4f& p = layer.premultiplied.at<cv::Vec4f>(i, j);
      const cv::Vec3b& bg = background.at<cv::Vec3b>(i, j);
      cv::Vec3b& o = out.at<cv::Vec3b>(i, j);
      if (p[3] == 0.0f) {
        o = bg;
        continue;
      }
      for (int c = 0; c < 3; ++c) {
        o[c] = cv::saturate_cast<uchar>(std::lround(p[c] * 255.0 + bg[c] * (1.0 - p[3])));
      }
    }
  }
  return out;
}

/// The content image: `text` in a plain font, black on white, stretched so
/// its line box fills the canonical band x in [0.05, 0.95], y in [0.25, 0.75].
inline cv::Mat render_content_image(std::string_view text, const std::string& font, ImageSize size,
                                    FontLibrary& fonts) {
  const auto glyphs = utf8_glyphs(text);
  if (glyphs.empty()) throw InvalidInputError("cannot render empty text");
  for (const auto& g : glyphs) {
    if (!fonts.has_glyph(font, g)) throw UnsupportedGlyphError(g, font);
  }
  constexpr int kLayoutSize = 48;
  const auto word = detail::layout_word(glyphs, font, kLayoutSize, 0, fonts);
  const double x0 = word.boxes.front().top_left().x;
  const double x1 = word.boxes.back().top_right().x;
  const double y0 = word.boxes.front().top_left().y;
  const double y1 = word.boxes.front().bottom_left().y;
  const double bx0 = 0.05 * size.width, bx1 = 0.95 * size.width;
  const double by0 = 0.25 * size.height, by1 = 0.75 * size.height;
  const double sx = (x1 - x0) / (bx1 - bx0);
  const double sy = (y1 - y0) / (by1 - by0);

  cv::Mat map_x(size.height, size.width, CV_32F), map_y(size.height, size.width, CV_32F);
  for (int i = 0; i < size.height; ++i) {
    for (int j = 0; j < size.width; ++j) {
      map_x.at<float>(i, j) = static_cast<float>(x0 + (j + 0.5 - bx0) * sx - 0.5);
      map_y.at<float>(i, j) = static_cast<float>(y0 + (i + 0.5 - by0) * sy - 0.5);
    }
  }
  cv::Mat coverage;
  cv::remap(word.fill, coverage, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar(0));
  cv::Mat gray;
  coverage.convertTo(gray, CV_8U, -255.0, 255.0);
  cv::Mat bgr;
  cv::cvtColor(gray, bgr, cv::COLOR_GRAY2BGR);
  return bgr;
}

}  // namespace swaptext::data
