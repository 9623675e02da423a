#pragma once

// Paired synthetic training data: the same style rendered with a source and a
// target word, plus every ground-truth decomposition the networks train on.
//
// On-disk layout of a dataset directory:
//   manifest.json              sample ids, texts, style specs and digests, seed
//   <id>/i_s.png  i_c.png  i_st.png  i_b.png  i_t.png
//   <id>/fiducials.json        {"k", "points": [[x, y], ...], "char_boxes"}

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "json.hpp"
#include "swaptext/error.hpp"
#include "swaptext/geometry.hpp"
#include "swaptext/image.hpp"
#include "swaptext/render.hpp"

namespace swaptext::data {

namespace fs = std::filesystem;

inline const std::string kDefaultContentFont = std::string(SWAPTEXT_DEFAULT_FONT_DIR) + "/DejaVuSans.ttf";
inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kManifestFormat = "swaptext-dataset/1";

struct PairedSample {
  std::string id;
  torch::Tensor style;        // I_s
  torch::Tensor content;      // I_c
  torch::Tensor swap_target;  // I_st: target text in style on mid-gray
  torch::Tensor background;   // I_b
  torch::Tensor target;       // I_t
  geometry::FiducialSet fiducials = geometry::canonical_fiducials(geometry::kDefaultFiducialCount);
  std::vector<Quad> source_boxes;
  std::string source_text;
  std::string target_text;
  StyleSpec spec;
  // Coverage masks [H, W]; only present on freshly forged samples.
  torch::Tensor source_alpha;
  torch::Tensor target_alpha;
};

struct Batch {
  std::vector<std::string> ids;
  std::vector<std::string> target_texts;
  std::vector<bool> curved;
  torch::Tensor style, content, swap_target, background, target;  // [B, 3, H, W]
  torch::Tensor fiducials;                                         // [B, 2K, 2]

  int64_t size() const { return static_cast<int64_t>(ids.size()); }
};

inline Batch collate(std::span<const PairedSample> samples) {
  if (samples.empty()) throw InvalidInputError("cannot collate an empty batch");
  Batch b;
  std::vector<torch::Tensor> s, c, st, bg, t, f;
  for (const auto& x : samples) {
    b.ids.push_back(x.id);
    b.target_texts.push_back(x.target_text);
    b.curved.push_back(x.spec.curved());
    s.push_back(x.style);
    c.push_back(x.content);
    st.push_back(x.swap_target);
    bg.push_back(x.background);
    t.push_back(x.target);
    f.push_back(x.fiducials.to_tensor(torch::kFloat32));
  }
  b.style = torch::stack(s);
  b.content = torch::stack(c);
  b.swap_target = torch::stack(st);
  b.background = torch::stack(bg);
  b.target = torch::stack(t);
  b.fiducials = torch::stack(f);
  return b;
}

inline torch::Tensor alpha_tensor(const TextLayer& layer) {
  cv::Mat a = layer.alpha();
  return torch::from_blob(a.data, {a.rows, a.cols}, torch::kFloat32).clone();
}

/// Builds one training pair. The background crop is resized to `size`;
/// I_s, I_t and I_b share it, so outside the text masks they agree exactly.
inline PairedSample make_paired_sample(const StyleSpec& spec, const std::string& source_text,
                                       const std::string& target_text, const cv::Mat& background,
                                       const std::string& content_font, FontLibrary& fonts,
                                       ImageSize size = kWordImageSize,
                                       int k = geometry::kDefaultFiducialCount) {
  spec.validate();
  const cv::Rect bounds(0, 0, background.cols, background.rows);
  if ((spec.crop & bounds) != spec.crop || spec.crop.width < size.width || spec.crop.height < size.height) {
    throw InvalidInputError("background crop must lie inside the image and be at least " +
                            std::to_string(size.height) + "x" + std::to_string(size.width));
  }
  cv::Mat bg;
  cv::resize(background(spec.crop), bg, cv::Size(size.width, size.height), 0, 0, cv::INTER_AREA);

  const TextLayer source = render_text_layer(source_text, spec, size, fonts);
  const TextLayer target = render_text_layer(target_text, spec, size, fonts);

  PairedSample s;
  s.style = mat_to_tensor(composite(source, bg));
  s.target = mat_to_tensor(composite(target, bg));
  s.background = mat_to_tensor(bg);

  // Swap ground truth in float: styled target text over exact mid-gray (0).
  cv::Mat gray(size.height, size.width, CV_32FC3);
  for (int i = 0; i < size.height; ++i) {
    for (int j = 0; j < size.width; ++j) {
      const cv::Vec4f& p = target.premultiplied.at<cv::Vec4f>(i, j);
      for (int c = 0; c < 3; ++c) gray.at<cv::Vec3f>(i, j)[2 - c] = p[c] + 0.5f * (1.0f - p[3]);
    }
  }
  s.swap_target = (torch::from_blob(gray.data, {size.height, size.width, 3}, torch::kFloat32)
                       .permute({2, 0, 1})
                       .clone() *
                   2.0f) -
                  1.0f;

  s.content = mat_to_tensor(render_content_image(target_text, content_font, size, fonts));
  s.fiducials = geometry::extract_fiducials(source.char_boxes, k, size);
  s.source_boxes = source.char_boxes;
  s.source_text = source_text;
  s.target_text = target_text;
  s.spec = spec;
  s.source_alpha = alpha_tensor(source);
  s.target_alpha = alpha_tensor(target);
  return s;
}

// ---------------------------------------------------------------------------
// Forging

inline const std::vector<std::string>& word_pool() {
  static const std::vector<std::string> words{
      "able",   "acid",   "area",    "army",   "baby",    "back",   "ball",   "band",   "bank",   "base",
      "bath",   "bear",   "beat",    "bell",   "best",   "bird",   "blue",   "boat",   "body",   "bone",
      "book",   "born",   "bread",   "brown",  "cake",   "call",   "calm",   "camp",   "card",   "care",
      "cash",   "cell",   "chair",   "city",   "club",   "coast",  "cold",   "cook",   "corn",   "cost",
      "dark",   "data",   "date",    "deal",   "deep",   "desk",   "door",   "down",   "draw",   "dream",
      "east",   "easy",   "edge",    "exit",   "face",   "fact",   "farm",   "fast",   "fire",   "fish",
      "flat",   "food",   "foot",   "form",   "free",   "fruit",  "game",   "gate",   "gift",   "gold",
      "good",   "green",  "hall",    "hand",   "head",   "heat",   "help",   "hill",   "home",   "hope",
      "hotel",  "house",  "idea",    "iron",   "java",   "jump",   "king",   "lake",   "land",   "last",
      "left",   "light",  "line",    "lion",   "load",   "long",   "love",   "main",   "map",    "market",
      "milk",   "moon",   "music",   "near",   "news",   "north",  "open",   "park",   "pizza",  "plan",
      "road",   "rock",   "room",   "salt",   "sea",    "shop",   "snow",   "star",   "stop",   "store",
      "street", "sun",    "table",   "taxi",   "tree",   "water",  "west",   "wind",   "world",  "yard"};
  return words;
}

inline std::string sample_word(std::mt19937_64& rng) {
  const auto& pool = word_pool();
  std::string w = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  const int casing = std::uniform_int_distribution<int>(0, 2)(rng);
  if (casing == 1) {
    w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
  } else if (casing == 2) {
    for (char& c : w) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return w;
}

inline Rgb contrasting_color(std::mt19937_64& rng, double background_luminance) {
  std::uniform_int_distribution<int> channel(0, 255);
  const bool want_dark = background_luminance > 127.0;
  for (;;) {
    const Rgb c{channel(rng), channel(rng), channel(rng)};
    const double l = c.luminance();
    if ((want_dark && l < 70.0) || (!want_dark && l > 185.0)) return c;
  }
}

struct StyleSampling {
  double curve_probability = 0.3;
  double rotation_probability = 0.3;
  double perspective_probability = 0.2;
  double outline_probability = 0.25;
};

/// Draws a random style for `background`; the crop keeps the 4:1 aspect of
/// the word image.
inline StyleSpec sample_style(std::mt19937_64& rng, const std::string& font, const std::string& background_name,
                              const cv::Mat& background, const StyleSampling& sampling,
                              ImageSize size = kWordImageSize) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  StyleSpec s;
  s.font = font;
  s.background = background_name;
  s.font_size = 28.0 + 16.0 * unit(rng);

  const int max_w = std::min(background.cols, background.rows * size.width / size.height);
  const int crop_w = size.width + static_cast<int>(unit(rng) * std::max(0, max_w - size.width));
  const int crop_h = crop_w * size.height / size.width;
  s.crop = cv::Rect(static_cast<int>(unit(rng) * (background.cols - crop_w)),
                    static_cast<int>(unit(rng) * (background.rows - crop_h)), crop_w, crop_h);
  const cv::Scalar mean = cv::mean(background(s.crop));
  const double lum = 0.114 * mean[0] + 0.587 * mean[1] + 0.299 * mean[2];
  s.fill = contrasting_color(rng, lum);
  if (unit(rng) < sampling.outline_probability) {
    s.outline = contrasting_color(rng, s.fill.luminance());
    s.outline_width = 1 + static_cast<int>(unit(rng) * 2.0);
  }
  if (unit(rng) < sampling.rotation_probability) s.rotation_deg = -30.0 + 60.0 * unit(rng);
  if (unit(rng) < sampling.perspective_probability) s.perspective = -0.25 + 0.5 * unit(rng);
  if (unit(rng) < sampling.curve_probability) {
    const double magnitude = 0.5 + 0.7 * unit(rng);
    s.curve = unit(rng) < 0.5 ? -magnitude : magnitude;
  }
  return s;
}

inline std::vector<fs::path> list_files(const fs::path& dir, std::initializer_list<const char*> extensions) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::ranges::transform(ext, ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (std::ranges::any_of(extensions, [&](const char* e) { return ext == e; })) out.push_back(entry.path());
  }
  std::ranges::sort(out);
  return out;
}

struct ForgeConfig {
  fs::path fonts_dir;
  fs::path backgrounds_dir;
  fs::path out_dir;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  int k = geometry::kDefaultFiducialCount;
  std::string content_font = kDefaultContentFont;
  StyleSampling sampling;
};

struct ForgeSummary {
  std::size_t count = 0;
  fs::path manifest_path;
  std::string manifest_digest;
  std::map<std::string, std::size_t> font_histogram;
  std::size_t curved = 0;
};

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sample_id(std::size_t index) {
  std::string id = std::to_string(index);
  return std::string(6 - std::min<std::size_t>(6, id.size()), '0') + id;
}

inline void write_sample(const fs::path& dir, const PairedSample& s) {
  fs::create_directories(dir);
  write_png(dir / "i_s.png", s.style);
  write_png(dir / "i_c.png", s.content);
  write_png(dir / "i_st.png", s.swap_target);
  write_png(dir / "i_b.png", s.background);
  write_png(dir / "i_t.png", s.target);
  nlohmann::json fid;
  fid["k"] = s.fiducials.k();
  fid["points"] = s.fiducials.to_json();
  fid["char_boxes"] = nlohmann::json::array();
  for (const Quad& q : s.source_boxes) fid["char_boxes"].push_back(geometry::to_json(q));
  write_text_file(dir / "fiducials.json", fid.dump(2) + "\n");
}

/// Renders `count` samples into `out_dir`. Sample i draws from an RNG seeded
/// with (seed, i), so the output depends only on the config.
inline ForgeSummary forge_dataset(const ForgeConfig& config, FontLibrary* shared_fonts = nullptr) {
  const auto fonts = list_files(config.fonts_dir, {".ttf", ".otf"});
  if (fonts.empty()) throw ConfigError("no .ttf/.otf fonts found in --fonts directory " + config.fonts_dir.string());
  const auto backgrounds = list_files(config.backgrounds_dir, {".png", ".jpg", ".jpeg", ".bmp"});
  if (backgrounds.empty()) {
    throw ConfigError("no background images found in --backgrounds directory " + config.backgrounds_dir.string());
  }
  if (config.k < 2) throw ConfigError("K must be at least 2");

  FontLibrary local_fonts(config.fonts_dir);
  FontLibrary& library = shared_fonts ? *shared_fonts : local_fonts;
  std::map<std::string, cv::Mat> bg_cache;
  fs::create_directories(config.out_dir);

  ForgeSummary summary;
  for (const auto& f : fonts) summary.font_histogram[f.filename().string()] = 0;
  nlohmann::json manifest;
  manifest["format"] = kManifestFormat;
  manifest["seed"] = config.seed;
  manifest["count"] = config.count;
  manifest["k"] = config.k;
  manifest["image_size"] = {kWordImageSize.height, kWordImageSize.width};
  manifest["content_font"] = fs::path(config.content_font).filename().string();
  manifest["samples"] = nlohmann::json::array();

  for (std::size_t index = 0; index < config.count; ++index) {
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);
    const auto& font_path = fonts[std::uniform_int_distribution<std::size_t>(0, fonts.size() - 1)(rng)];
    const auto& bg_path = backgrounds[std::uniform_int_distribution<std::size_t>(0, backgrounds.size() - 1)(rng)];
    auto [it, inserted] = bg_cache.try_emplace(bg_path.string());
    if (inserted) it->second = read_bgr(bg_path);
    const cv::Mat& bg = it->second;
    if (bg.cols < kWordImageSize.width || bg.rows < kWordImageSize.height) {
      throw ConfigError("background " + bg_path.string() + " is smaller than 64x256");
    }

    const std::string font_name = font_path.filename().string();
    const StyleSpec spec = sample_style(rng, font_name, bg_path.filename().string(), bg, config.sampling);
    const std::string source_text = sample_word(rng);
    std::string target_text = sample_word(rng);
    while (target_text == source_text) target_text = sample_word(rng);

    PairedSample sample = make_paired_sample(spec, source_text, target_text, bg, config.content_font, library,
                                             kWordImageSize, config.k);
    sample.id = sample_id(index);
    write_sample(config.out_dir / sample.id, sample);

    manifest["samples"].push_back({{"id", sample.id},
                                   {"source_text", source_text},
                                   {"target_text", target_text},
                                   {"font", font_name},
                                   {"background", spec.background},
                                   {"curved", spec.curved()},
                                   {"spec_digest", spec.digest()},
                                   {"style", spec.to_json()}});
    ++summary.font_histogram[font_name];
    if (spec.curved()) ++summary.curved;
  }

  const std::string text = manifest.dump(2) + "\n";
  summary.count = config.count;
  summary.manifest_path = config.out_dir / kManifestName;
  summary.manifest_digest = fnv1a_hex(text);
  write_text_file(summary.manifest_path, text);
  return summary;
}

// ---------------------------------------------------------------------------
// Loading

class Dataset;

/// Single-consumer batch iterator over a dataset in a fixed index order.
class BatchReader {
 public:
  BatchReader(const Dataset& dataset, std::vector<std::size_t> order, std::size_t batch_size)
      : dataset_(&dataset), order_(std::move(order)), batch_size_(batch_size) {}

  std::optional<Batch> next();

 private:
  const Dataset* dataset_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
};

class Dataset {
 public:
  static Dataset open(const fs::path& dir) {
    const fs::path manifest_path = dir / kManifestName;
    if (!fs::is_regular_file(manifest_path)) {
      throw LoadError("dataset manifest not found: " + manifest_path.string());
    }
    Dataset d;
    d.root_ = dir;
    try {
      d.manifest_ = nlohmann::json::parse(read_text_file(manifest_path));
      if (d.manifest_.at("format").get<std::string>() != kManifestFormat) {
        throw LoadError("unsupported dataset format in " + manifest_path.string());
      }
      d.k_ = d.manifest_.at("k").get<int>();
      for (const auto& s : d.manifest_.at("samples")) d.ids_.push_back(s.at("id").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("invalid dataset manifest " + manifest_path.string() + ": " + e.what());
    }
    return d;
  }

  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  int k() const noexcept { return k_; }
  const fs::path& root() const noexcept { return root_; }
  const nlohmann::json& manifest() const noexcept { return manifest_; }
  const std::string& id(std::size_t index) const { return ids_.at(index); }

  PairedSample load(std::size_t index) const {
    const auto& entry = manifest_.at("samples").at(index);
    PairedSample s;
    s.id = ids_.at(index);
    const fs::path dir = root_ / s.id;
    try {
      s.style = load_image(dir / "i_s.png");
      s.content = load_image(dir / "i_c.png");
      s.swap_target = load_image(dir / "i_st.png");
      s.background = load_image(dir / "i_b.png");
      s.target = load_image(dir / "i_t.png");
      const auto fid = nlohmann::json::parse(read_text_file(dir / "fiducials.json"));
      s.fiducials = geometry::FiducialSet::from_json(fid.at("points"));
      for (const auto& q : fid.at("char_boxes")) s.source_boxes.push_back(geometry::quad_from_json(q));
      s.source_text = entry.at("source_text").get<std::string>();
      s.target_text = entry.at("target_text").get<std::string>();
      s.spec = StyleSpec::from_json(entry.at("style"));
    } catch (const LoadError& e) {
      throw LoadError("corrupt sample " + s.id + ": " + e.what());
    } catch (const std::exception& e) {
      throw LoadError("corrupt sample " + s.id + ": " + e.what());
    }
    return s;
  }

  std::vector<PairedSample> load_all() const {
    std::vector<PairedSample> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(load(i));
    return out;
  }

  BatchReader batches(std::size_t batch_size) const {
    if (batch_size == 0) throw InvalidInputError("batch size must be positive");
    std::vector<std::size_t> order(size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    return BatchReader(*this, std::move(order), batch_size);
  }

 private:
  static torch::Tensor load_image(const fs::path& path) {
    cv::Mat m = read_bgr(path);
    if (m.rows != kWordImageSize.height || m.cols != kWordImageSize.width) {
      throw LoadError(path.filename().string() + " is not 64x256");
    }
    return mat_to_tensor(m);
  }

  fs::path root_;
  nlohmann::json manifest_;
  std::vector<std::string> ids_;
  int k_ = geometry::kDefaultFiducialCount;
};

inline std::optional<Batch> BatchReader::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  std::vector<PairedSample> samples;
  for (std::size_t i = cursor_; i < end; ++i) samples.push_back(dataset_->load(order_[i]));
  cursor_ = end;
  return collate(samples);
}

// ---------------------------------------------------------------------------

/// Procedural background textures (gradients, blobs, stripes, noise) for
/// desk-scale forging when no photo collection is at hand.
inline std::vector<fs::path> generate_backgrounds(const fs::path& out_dir, std::size_t count, std::uint64_t seed,
                                                  cv::Size size = cv::Size(512, 160)) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < count; ++i) {
    cv::RNG rng(seed * 1000003ULL + i + 1);
    auto color = [&] { return cv::Scalar(rng.uniform(0, 256), rng.uniform(0, 256), rng.uniform(0, 256)); };
    cv::Mat img(size, CV_8UC3);
    const cv::Scalar a = color(), b = color();
    const bool vertical = rng.uniform(0, 2) == 1;
    for (int y = 0; y < size.height; ++y) {
      for (int x = 0; x < size.width; ++x) {
        const double t = vertical ? double(y) / size.height : double(x) / size.width;
        for (int c = 0; c < 3; ++c) img.at<cv::Vec3b>(y, x)[c] = cv::saturate_cast<uchar>(a[c] * (1 - t) + b[c] * t);
      }
    }
    const int shapes = rng.uniform(3, 12);
    for (int s = 0; s < shapes; ++s) {
      cv::Mat overlay = img.clone();
      const cv::Point p(rng.uniform(0, size.width), rng.uniform(0, size.height));
      if (rng.uniform(0, 3) == 0) {
        cv::circle(overlay, p, rng.uniform(10, 80), color(), -1, cv::LINE_AA);
      } else if (rng.uniform(0, 2) == 0) {
        cv::rectangle(overlay, cv::Rect(p.x, p.y, rng.uniform(20, 200), rng.uniform(10, 80)), color(), -1);
      } else {
        cv::line(overlay, p, cv::Point(rng.uniform(0, size.width), rng.uniform(0, size.height)), color(),
                 rng.uniform(2, 10), cv::LINE_AA);
      }
      cv::addWeighted(overlay, 0.35, img, 0.65, 0.0, img);
    }
    cv::Mat noise(size, CV_16SC3);
    rng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(8));
    cv::Mat wide;
    img.convertTo(wide, CV_16SC3);
    wide += noise;
    wide.convertTo(img, CV_8UC3);
    cv::GaussianBlur(img, img, cv::Size(3, 3), 0.8);
    const fs::path path = out_dir / ("bg_" + sample_id(i) + ".png");
    write_png(path, img);
    written.push_back(path);
  }
  return written;
}

}  // namespace swaptext::data
