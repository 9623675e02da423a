#pragma once

// Trainable networks: the text swapping generator (fiducial head, content
// warping, attention fusion), the background completion generator, the
// fusion generator and the two conditional patch discriminators.
//
// Tensors are NCHW. Images are [B, 3, H, W] in [-1, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/script.h>
#include <torch/torch.h>

#include "json.hpp"
#include "swaptext/error.hpp"
#include "swaptext/geometry.hpp"
#include "swaptext/image.hpp"

namespace swaptext::nets {

namespace fs = std::filesystem;

enum class AttentionMode { off, single, multi };

inline std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::off: return "off";
    case AttentionMode::single: return "single";
    case AttentionMode::multi: return "multi";
  }
  return "single";
}

inline AttentionMode parse_attention_mode(const std::string& s) {
  if (s == "off") return AttentionMode::off;
  if (s == "single") return AttentionMode::single;
  if (s == "multi") return AttentionMode::multi;
  throw ConfigError("attention mode must be off, single or multi, got '" + s + "'");
}

struct NetConfig {
  int width = 32;  // base channels; stages use width, 2x, 4x, 8x
  int residual_blocks = 4;
  AttentionMode attention = AttentionMode::single;
  bool use_cstn = true;
  bool use_dilated = true;
  int k = geometry::kDefaultFiducialCount;
  ImageSize input = kWordImageSize;

  void validate() const {
    if (width < 1) throw ConfigError("width must be >= 1");
    if (residual_blocks < 0) throw ConfigError("residual_blocks must be >= 0");
    if (k < 2) throw ConfigError("K must be >= 2");
    if (input.height <= 0 || input.width <= 0 || input.height % 16 != 0 || input.width % 16 != 0) {
      throw ConfigError("input size must be positive and divisible by 16");
    }
  }

  nlohmann::json to_json() const {
    return {{"width", width},
            {"residual_blocks", residual_blocks},
            {"attention", to_string(attention)},
            {"use_cstn", use_cstn},
            {"use_dilated", use_dilated},
            {"k", k},
            {"input", {input.height, input.width}}};
  }

  static NetConfig from_json(const nlohmann::json& j) {
    NetConfig c;
    c.width = j.value("width", c.width);
    c.residual_blocks = j.value("residual_blocks", c.residual_blocks);
    c.attention = parse_attention_mode(j.value("attention", to_string(c.attention)));
    c.use_cstn = j.value("use_cstn", c.use_cstn);
    c.use_dilated = j.value("use_dilated", c.use_dilated);
    c.k = j.value("k", c.k);
    if (j.contains("input")) c.input = {j.at("input").at(0).get<int>(), j.at("input").at(1).get<int>()};
    c.validate();
    return c;
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline void require_images(const torch::Tensor& x, ImageSize size, const char* what) {
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != size.height || x.size(3) != size.width) {
    throw ShapeError(std::string(what) + " must be [B, 3, " + std::to_string(size.height) + ", " +
                     std::to_string(size.width) + "], got " + c10::str(x.sizes()));
  }
}

namespace detail {

namespace nn = torch::nn;

inline nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1, int64_t dilation = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel)
                        .stride(stride)
                        .padding(dilation * (kernel - 1) / 2)
                        .dilation(dilation));
}

inline nn::ConvTranspose2d deconv(int64_t in, int64_t out) {
  return nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 3).stride(2).padding(1).output_padding(1));
}

// conv -> instance norm -> ReLU
inline nn::Sequential conv_norm_relu(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1,
                                     int64_t dilation = 1) {
  return nn::Sequential(conv(in, out, kernel, stride, dilation), nn::InstanceNorm2d(out), nn::ReLU());
}

inline nn::Sequential deconv_norm_relu(int64_t in, int64_t out) {
  return nn::Sequential(deconv(in, out), nn::InstanceNorm2d(out), nn::ReLU());
}

// Encoder stage: stride-2 conv followed by two stride-1 convs.
inline nn::Sequential down_stage(int64_t in, int64_t out) {
  nn::Sequential s;
  s->extend(*conv_norm_relu(in, out, 3, 2));
  s->extend(*conv_norm_relu(out, out, 3));
  s->extend(*conv_norm_relu(out, out, 3));
  return s;
}

// Decoder stage: deconv followed by two stride-1 convs.
inline nn::Sequential up_stage(int64_t in, int64_t out) {
  nn::Sequential s;
  s->extend(*deconv_norm_relu(in, out));
  s->extend(*conv_norm_relu(out, out, 3));
  s->extend(*conv_norm_relu(out, out, 3));
  return s;
}

inline torch::Tensor logit(const torch::Tensor& p) { return torch::log(p) - torch::log1p(-p); }

}  // namespace detail

struct ResidualBlockImpl : torch::nn::Module {
  explicit ResidualBlockImpl(int64_t channels)
      : body(register_module("body", torch::nn::Sequential(detail::conv(channels, channels, 3),
                                                           torch::nn::InstanceNorm2d(channels), torch::nn::ReLU(),
                                                           detail::conv(channels, channels, 3),
                                                           torch::nn::InstanceNorm2d(channels)))) {}

  torch::Tensor forward(const torch::Tensor& x) { return torch::relu(x + body->forward(x)); }

  torch::nn::Sequential body;
};
TORCH_MODULE(ResidualBlock);

struct EncoderFeatures {
  torch::Tensor l1;    // 2w at H/2
  torch::Tensor l2;    // 4w at H/4
  torch::Tensor l3;    // 8w at H/8, before the residual blocks
  torch::Tensor deep;  // 8w at H/8, after the residual blocks
};

/// Three down-sampling stages plus residual blocks at the bottleneck.
struct EncoderImpl : torch::nn::Module {
  EncoderImpl(int64_t width, int residual_blocks) {
    stem = register_module("stem", detail::conv_norm_relu(3, width, 5));
    down1 = register_module("down1", detail::down_stage(width, 2 * width));
    down2 = register_module("down2", detail::down_stage(2 * width, 4 * width));
    down3 = register_module("down3", detail::down_stage(4 * width, 8 * width));
    res = register_module("res", torch::nn::Sequential());
    for (int i = 0; i < residual_blocks; ++i) res->push_back(ResidualBlock(8 * width));
  }

  EncoderFeatures forward(const torch::Tensor& x) {
    EncoderFeatures f;
    f.l1 = down1->forward(stem->forward(x));
    f.l2 = down2->forward(f.l1);
    f.l3 = down3->forward(f.l2);
    f.deep = res->size() > 0 ? res->forward(f.l3) : f.l3;
    return f;
  }

  torch::nn::Sequential stem{nullptr}, down1{nullptr}, down2{nullptr}, down3{nullptr}, res{nullptr};
};
TORCH_MODULE(Encoder);

/// Attention fusion of content and style features: the depth-concatenated
/// pair is projected back to `channels`, then a gated self-attention residual
/// is added. The gate gamma starts at 0.
struct SelfAttentionImpl : torch::nn::Module {
  explicit SelfAttentionImpl(int64_t channels) : channels_(channels) {
    const int64_t qk = std::max<int64_t>(1, channels / 8);
    project = register_module("project", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels, channels, 1)));
    query = register_module("query", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, qk, 1)));
    key = register_module("key", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, qk, 1)));
    value = register_module("value", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
    gamma = register_parameter("gamma", torch::zeros({1}));
  }

  /// Returns (fused features, attention weights [B, N, N]); weights are
  /// undefined when the branch is disabled.
  std::pair<torch::Tensor, torch::Tensor> forward_with_attention(const torch::Tensor& content,
                                                                 const torch::Tensor& style) {
    if (content.dim() != 4 || style.dim() != 4 || content.size(0) != style.size(0) ||
        content.size(2) != style.size(2) || content.size(3) != style.size(3)) {
      throw ShapeError("self-attention inputs must share batch and spatial dims, got " +
                       c10::str(content.sizes()) + " and " + c10::str(style.sizes()));
    }
    if (content.size(1) != channels_ || style.size(1) != channels_) {
      throw ShapeError("self-attention expects " + std::to_string(channels_) + " channels per input");
    }
    auto p = project->forward(torch::cat({content, style}, 1));
    if (!branch_enabled) return {p, torch::Tensor()};
    ++calls;
    const auto b = p.size(0), h = p.size(2), w = p.size(3), n = h * w;
    auto q = query->forward(p).view({b, -1, n}).permute({0, 2, 1});
    auto k = key->forward(p).view({b, -1, n});
    auto weights = torch::softmax(torch::bmm(q, k), -1);  // row i: attention of position i over keys
    auto v = value->forward(p).view({b, channels_, n});
    auto attended = torch::bmm(v, weights.permute({0, 2, 1})).view({b, channels_, h, w});
    return {p + gamma * attended, weights};
  }

  torch::Tensor forward(const torch::Tensor& content, const torch::Tensor& style) {
    return forward_with_attention(content, style).first;
  }

  torch::nn::Conv2d project{nullptr}, query{nullptr}, key{nullptr}, value{nullptr};
  torch::Tensor gamma;
  bool branch_enabled = true;
  int64_t calls = 0;  // attention branch evaluations, for instrumentation

 private:
  int64_t channels_;
};
TORCH_MODULE(SelfAttention);

/// Fiducial predictor on the style encoder's down-sampled features. Pools to
/// a 2 x 8 grid, two fully connected layers, sigmoid. A fixed logit offset
/// makes the initial prediction the canonical layout.
struct FiducialHeadImpl : torch::nn::Module {
  FiducialHeadImpl(int64_t channels, int k, int64_t hidden = 128) : k_(k) {
    fc1 = register_module("fc1", torch::nn::Linear(channels * kPoolH * kPoolW, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, 4 * k));
    auto canonical = geometry::canonical_fiducials(k).to_tensor(torch::kFloat32).reshape({-1});
    offset = register_buffer("offset", detail::logit(canonical));
  }

  torch::Tensor forward(const torch::Tensor& features) {
    auto pooled = torch::adaptive_avg_pool2d(features, {kPoolH, kPoolW}).flatten(1);
    auto z = fc2->forward(torch::relu(fc1->forward(pooled))) + offset;
    return torch::sigmoid(z).view({features.size(0), 2 * k_, 2});
  }

  static constexpr int64_t kPoolH = 2;
  static constexpr int64_t kPoolW = 8;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
  torch::Tensor offset;

 private:
  int k_;
};
TORCH_MODULE(FiducialHead);

struct SwapOutput {
  torch::Tensor foreground;       // I_f
  torch::Tensor fiducials;        // P-hat, [B, 2K, 2]
  torch::Tensor warped_content;   // I_c after the shape transform (I_c itself without CSTN)
};

/// Text swapping generator.
struct SwapGeneratorImpl : torch::nn::Module {
  explicit SwapGeneratorImpl(const NetConfig& config) : config_(config) {
    config.validate();
    const int64_t w = config.width;
    style_encoder = register_module("style_encoder", Encoder(w, config.residual_blocks));
    content_encoder = register_module("content_encoder", Encoder(w, config.residual_blocks));
    fiducial_head = register_module("fiducial_head", FiducialHead(8 * w, config.k));
    attention_mid = register_module("attention_mid", SelfAttention(4 * w));
    attention_deep = register_module("attention_deep", SelfAttention(8 * w));
    up1 = register_module("up1", detail::deconv_norm_relu(8 * w, 4 * w));
    merge1 = register_module("merge1", detail::conv_norm_relu(8 * w, 4 * w, 3));
    up2 = register_module("up2", detail::deconv_norm_relu(4 * w, 2 * w));
    merge2 = register_module("merge2", detail::conv_norm_relu(2 * w, 2 * w, 3));
    up3 = register_module("up3", detail::deconv_norm_relu(2 * w, w));
    merge3 = register_module("merge3", detail::conv_norm_relu(w, w, 3));
    output = register_module("output", detail::conv(w, 3, 3));
    set_attention_mode(config.attention);
  }

  const NetConfig& config() const noexcept { return config_; }

  /// Switches which attention branches run; parameters are the same in every mode.
  void set_attention_mode(AttentionMode mode) {
    config_.attention = mode;
    attention_mid->branch_enabled = mode == AttentionMode::multi;
    attention_deep->branch_enabled = mode != AttentionMode::off;
  }

  void set_cstn(bool enabled) { config_.use_cstn = enabled; }

  torch::Tensor predict_fiducials(const torch::Tensor& style) {
    require_images(style, config_.input, "style image");
    return fiducial_head->forward(style_encoder->forward(style).l3);
  }

  /// Fuses (content, style) feature pairs ordered from shallow to deep. Each
  /// level must be strictly smaller than the previous one.
  std::vector<torch::Tensor> fuse_levels(const std::vector<std::pair<torch::Tensor, torch::Tensor>>& levels) {
    if (config_.attention == AttentionMode::multi && levels.size() < 2) {
      throw ConfigError("multi-level attention needs at least 2 feature levels");
    }
    if (levels.size() != 2) throw ShapeError("swap generator fuses exactly 2 feature levels");
    for (std::size_t i = 1; i < levels.size(); ++i) {
      if (levels[i].first.size(2) >= levels[i - 1].first.size(2) ||
          levels[i].first.size(3) >= levels[i - 1].first.size(3)) {
        throw ShapeError("feature levels must have strictly decreasing resolution");
      }
    }
    return {attention_mid->forward(levels[0].first, levels[0].second),
            attention_deep->forward(levels[1].first, levels[1].second)};
  }

  /// Warps the content image from the canonical layout onto `fiducials`.
  torch::Tensor warp_content(const torch::Tensor& content, const torch::Tensor& fiducials) const {
    auto canonical = geometry::canonical_fiducials(config_.k)
                         .to_tensor(fiducials.scalar_type())
                         .unsqueeze(0)
                         .expand({fiducials.size(0), -1, -1})
                         .contiguous();
    return geometry::tps_warp_images(content, canonical, fiducials, config_.input,
                                     geometry::kNetworkTpsRegularization, 1.0);
  }

  SwapOutput forward(const torch::Tensor& style, const torch::Tensor& content) {
    require_images(style, config_.input, "style image");
    require_images(content, config_.input, "content image");
    if (style.size(0) != content.size(0)) throw ShapeError("style and content batch sizes differ");
    SwapOutput out;
    const EncoderFeatures s = style_encoder->forward(style);
    out.fiducials = fiducial_head->forward(s.l3);
    // The shape transform consumes the prediction without back-propagating
    // into it; the head is trained by the fiducial loss alone.
    out.warped_content = config_.use_cstn ? warp_content(content, out.fiducials.detach()) : content;
    const EncoderFeatures c = content_encoder->forward(out.warped_content);
    const auto fused = fuse_levels({{c.l2, s.l2}, {c.deep, s.deep}});
    auto x = up1->forward(fused[1]);
    x = merge1->forward(torch::cat({x, fused[0]}, 1));
    x = merge2->forward(up2->forward(x));
    x = merge3->forward(up3->forward(x));
    out.foreground = torch::tanh(output->forward(x));
    return out;
  }

  Encoder style_encoder{nullptr}, content_encoder{nullptr};
  FiducialHead fiducial_head{nullptr};
  SelfAttention attention_mid{nullptr}, attention_deep{nullptr};
  torch::nn::Sequential up1{nullptr}, merge1{nullptr}, up2{nullptr}, merge2{nullptr}, up3{nullptr},
      merge3{nullptr};
  torch::nn::Conv2d output{nullptr};

 private:
  NetConfig config_;
};
TORCH_MODULE(SwapGenerator);

/// One row of the background network's layer table.
struct LayerRow {
  std::string type;  // "conv", "dilated conv", "deconv" or "output"
  int kernel = 0;
  int dilation = 1;
  std::string stride;  // "1x1", "2x2", "1/2x1/2"
  int channels = 0;

  friend bool operator==(const LayerRow&, const LayerRow&) = default;
};

struct BackgroundOutput {
  torch::Tensor image;                  // I_b estimate
  std::vector<torch::Tensor> features;  // decoder maps at H/4, H/2, H (8w, 4w, 2w channels)
};

/// Background completion generator: 5x5 stem, three stride-2 encoder stages,
/// a dilated bottleneck and three decoder stages; channels scale with width / 32.
struct BackgroundGeneratorImpl : torch::nn::Module {
  explicit BackgroundGeneratorImpl(const NetConfig& config) : config_(config) {
    config.validate();
    const int64_t w = config.width;
    stem = register_module("stem", detail::conv_norm_relu(3, w, 5));
    down1 = register_module("down1", detail::down_stage(w, 2 * w));
    down2 = register_module("down2", detail::down_stage(2 * w, 4 * w));
    down3 = register_module("down3", detail::down_stage(4 * w, 8 * w));
    dilated = register_module("dilated", torch::nn::Sequential());
    for (int64_t d : {2, 4, 8}) {
      dilated->extend(*detail::conv_norm_relu(8 * w, 8 * w, 3, 1, config.use_dilated ? d : 1));
    }
    up1 = register_module("up1", detail::up_stage(8 * w, 8 * w));
    up2 = register_module("up2", detail::up_stage(8 * w, 4 * w));
    up3 = register_module("up3", detail::up_stage(4 * w, 2 * w));
    output = register_module("output", detail::conv(2 * w, 3, 3));
  }

  const NetConfig& config() const noexcept { return config_; }

  torch::Tensor bottleneck(const torch::Tensor& style) {
    require_images(style, config_.input, "style image");
    return dilated->forward(down3->forward(down2->forward(down1->forward(stem->forward(style)))));
  }

  BackgroundOutput forward(const torch::Tensor& style) {
    BackgroundOutput out;
    auto x = bottleneck(style);
    for (auto* stage : {&up1, &up2, &up3}) {
      x = (*stage)->forward(x);
      out.features.push_back(x);
    }
    out.image = torch::tanh(output->forward(x));
    return out;
  }

  /// Layer table read back from the constructed modules.
  std::vector<LayerRow> layer_table() const {
    std::vector<LayerRow> rows;
    auto add_block = [&](const torch::nn::Sequential& block) {
      for (const auto& child : block->children()) {
        if (auto c = std::dynamic_pointer_cast<torch::nn::Conv2dImpl>(child)) {
          const auto& o = c->options;
          const int dil = static_cast<int>(o.dilation()->at(0));
          rows.push_back({dil > 1 ? "dilated conv" : "conv", static_cast<int>(o.kernel_size()->at(0)), dil,
                          std::to_string(o.stride()->at(0)) + "x" + std::to_string(o.stride()->at(1)),
                          static_cast<int>(o.out_channels())});
        } else if (auto d = std::dynamic_pointer_cast<torch::nn::ConvTranspose2dImpl>(child)) {
          const auto& o = d->options;
          const auto s = o.stride()->at(0);
          rows.push_back({"deconv", static_cast<int>(o.kernel_size()->at(0)), static_cast<int>(o.dilation()->at(0)),
                          "1/" + std::to_string(s) + "x1/" + std::to_string(s), static_cast<int>(o.out_channels())});
        }
      }
    };
    for (const auto* block : {&stem, &down1, &down2, &down3, &dilated, &up1, &up2, &up3}) add_block(*block);
    const auto& o = output->options;
    rows.push_back({"output", static_cast<int>(o.kernel_size()->at(0)), static_cast<int>(o.dilation()->at(0)),
                    std::to_string(o.stride()->at(0)) + "x" + std::to_string(o.stride()->at(1)),
                    static_cast<int>(o.out_channels())});
    return rows;
  }

  torch::nn::Sequential stem{nullptr}, down1{nullptr}, down2{nullptr}, down3{nullptr}, dilated{nullptr},
      up1{nullptr}, up2{nullptr}, up3{nullptr};
  torch::nn::Conv2d output{nullptr};

 private:
  NetConfig config_;
};
TORCH_MODULE(BackgroundGenerator);

/// Fusion generator: encodes the foreground and decodes with the background
/// decoder maps concatenated at matching resolutions.
struct FusionGeneratorImpl : torch::nn::Module {
  explicit FusionGeneratorImpl(const NetConfig& config) : config_(config) {
    config.validate();
    const int64_t w = config.width;
    encoder = register_module("encoder", Encoder(w, config.residual_blocks));
    up1 = register_module("up1", detail::deconv_norm_relu(8 * w, 4 * w));
    merge1 = register_module("merge1", detail::conv_norm_relu(4 * w + 8 * w, 4 * w, 3));
    up2 = register_module("up2", detail::deconv_norm_relu(4 * w, 2 * w));
    merge2 = register_module("merge2", detail::conv_norm_relu(2 * w + 4 * w, 2 * w, 3));
    up3 = register_module("up3", detail::deconv_norm_relu(2 * w, w));
    merge3 = register_module("merge3", detail::conv_norm_relu(w + 2 * w, w, 3));
    output = register_module("output", detail::conv(w, 3, 3));
  }

  torch::Tensor forward(const torch::Tensor& foreground, const std::vector<torch::Tensor>& background_features) {
    require_images(foreground, config_.input, "foreground image");
    const int64_t w = config_.width;
    const int64_t b = foreground.size(0);
    const int64_t h = config_.input.height, wd = config_.input.width;
    const std::vector<std::vector<int64_t>> expected{{b, 8 * w, h / 4, wd / 4}, {b, 4 * w, h / 2, wd / 2},
                                                     {b, 2 * w, h, wd}};
    if (background_features.size() != expected.size()) {
      throw ShapeError("fusion expects 3 background decoder features");
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (background_features[i].sizes() != torch::IntArrayRef(expected[i])) {
        throw ShapeError("background feature " + std::to_string(i) + " has shape " +
                         c10::str(background_features[i].sizes()) + ", expected " +
                         c10::str(torch::IntArrayRef(expected[i])));
      }
    }
    auto x = encoder->forward(foreground).deep;
    x = merge1->forward(torch::cat({up1->forward(x), background_features[0]}, 1));
    x = merge2->forward(torch::cat({up2->forward(x), background_features[1]}, 1));
    x = merge3->forward(torch::cat({up3->forward(x), background_features[2]}, 1));
    return torch::tanh(output->forward(x));
  }

  Encoder encoder{nullptr};
  torch::nn::Sequential up1{nullptr}, merge1{nullptr}, up2{nullptr}, merge2{nullptr}, up3{nullptr},
      merge3{nullptr};
  torch::nn::Conv2d output{nullptr};

 private:
  NetConfig config_;
};
TORCH_MODULE(FusionGenerator);

/// Conditional patch discriminator over (candidate, condition) pairs:
/// four stride-2 stages (2w, 4w, 8w, 16w) and a 1-channel logit conv.
struct PatchDiscriminatorImpl : torch::nn::Module {
  explicit PatchDiscriminatorImpl(const NetConfig& config) : config_(config) {
    const int64_t w = config.width;
    namespace nn = torch::nn;
    auto down = [](int64_t in, int64_t out) {
      return nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1));
    };
    auto lrelu = [] { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); };
    body = register_module(
        "body", nn::Sequential(down(6, 2 * w), lrelu(), down(2 * w, 4 * w), nn::InstanceNorm2d(4 * w), lrelu(),
                               down(4 * w, 8 * w), nn::InstanceNorm2d(8 * w), lrelu(), down(8 * w, 16 * w),
                               nn::InstanceNorm2d(16 * w), lrelu(), detail::conv(16 * w, 1, 3)));
  }

  torch::Tensor forward(const torch::Tensor& candidate, const torch::Tensor& condition) {
    require_images(candidate, config_.input, "discriminator candidate");
    require_images(condition, config_.input, "discriminator condition");
    return body->forward(torch::cat({candidate, condition}, 1));
  }

  torch::nn::Sequential body{nullptr};

 private:
  NetConfig config_;
};
TORCH_MODULE(PatchDiscriminator);

// ---------------------------------------------------------------------------
// Frozen VGG-19 feature taps (relu1_1 ... relu5_1)

/// Convolutional trunk of VGG-19 up to relu5_1. Weights come from a file
/// holding a name -> tensor dict keyed like torchvision ("features.0.weight");
/// tools/export_vgg19.py writes one.
struct Vgg19FeaturesImpl : torch::nn::Module {
  Vgg19FeaturesImpl() {
    // torchvision layer indices of the convs before relu5_1
    int64_t in = 3, index = 0;
    const std::vector<int64_t> plan{64, 64, -1, 128, 128, -1, 256, 256, 256, 256, -1, 512, 512, 512, 512, -1, 512};
    for (int64_t c : plan) {
      if (c < 0) {
        index += 1;  // max pool
        continue;
      }
      auto layer = torch::nn::Conv2d(torch::nn::Conv2dOptions(in, c, 3).padding(1));
      convs.emplace_back(index, register_module("conv" + std::to_string(index), layer));
      in = c;
      index += 2;  // conv + relu
    }
    register_buffer("mean", torch::tensor({0.485, 0.456, 0.406}).view({1, 3, 1, 1}));
    register_buffer("std", torch::tensor({0.229, 0.224, 0.225}).view({1, 3, 1, 1}));
    for (auto& p : parameters()) p.set_requires_grad(false);
  }

  /// [-1, 1] images -> the five relu taps.
  std::vector<torch::Tensor> forward(const torch::Tensor& images) {
    static const std::vector<int64_t> taps{0, 5, 10, 19, 28};  // conv indices feeding relu1_1 ... relu5_1
    auto x = ((images + 1.0) * 0.5 - named_buffers()["mean"]) / named_buffers()["std"];
    std::vector<torch::Tensor> out;
    int64_t last = -1;
    for (auto& [index, layer] : convs) {
      if (last >= 0 && index - last > 2) x = torch::max_pool2d(x, 2, 2);
      x = torch::relu(layer->forward(x));
      last = index;
      if (std::find(taps.begin(), taps.end(), index) != taps.end()) out.push_back(x);
    }
    return out;
  }

  void load_weights(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open VGG-19 weights " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    c10::IValue value;
    try {
      value = torch::pickle_load(bytes);
    } catch (const c10::Error& e) {
      throw ConfigError("cannot parse VGG-19 weights " + path.string() + ": " + e.what_without_backtrace());
    }
    if (!value.isGenericDict()) throw ConfigError("VGG-19 weights file must hold a name -> tensor dict");
    const auto dict = value.toGenericDict();
    torch::NoGradGuard guard;
    for (auto& [index, layer] : convs) {
      for (const char* part : {"weight", "bias"}) {
        const std::string name = "features." + std::to_string(index) + "." + part;
        auto it = dict.find(name);
        if (it == dict.end()) throw ConfigError("VGG-19 weights missing " + name);
        auto& target = std::string(part) == "weight" ? layer->weight : layer->bias;
        const auto src = it->value().toTensor();
        if (src.sizes() != target.sizes()) throw ConfigError("VGG-19 weight " + name + " has wrong shape");
        target.copy_(src);
      }
    }
  }

  std::vector<std::pair<int64_t, torch::nn::Conv2d>> convs;
};
TORCH_MODULE(Vgg19Features);

// ---------------------------------------------------------------------------
// Bundle, initialization, checkpoints

struct NetBundle {
  NetConfig config;
  SwapGenerator swap{nullptr};
  BackgroundGenerator background{nullptr};
  FusionGenerator fusion{nullptr};
  PatchDiscriminator disc_background{nullptr};
  PatchDiscriminator disc_fusion{nullptr};
  std::optional<Vgg19Features> perceptual;

  explicit NetBundle(const NetConfig& cfg = {})
      : config(cfg),
        swap(cfg),
        background(cfg),
        fusion(cfg),
        disc_background(cfg),
        disc_fusion(cfg) {}

  /// Trainable modules under their checkpoint prefixes.
  std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> modules() const {
    return {{"swap", swap.ptr()},
            {"background", background.ptr()},
            {"fusion", fusion.ptr()},
            {"disc_background", disc_background.ptr()},
            {"disc_fusion", disc_fusion.ptr()}};
  }

  std::vector<std::pair<std::string, torch::Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& [prefix, m] : modules()) {
      for (const auto& p : m->named_parameters()) out.emplace_back(prefix + "." + p.key(), p.value());
    }
    return out;
  }

  void train(bool on = true) {
    for (const auto& [prefix, m] : modules()) m->train(on);
  }

  void to(torch::Dtype dtype) {
    for (const auto& [prefix, m] : modules()) m->to(dtype);
    if (perceptual) (*perceptual)->to(dtype);
  }
};

/// Weights N(0, 0.01^2), biases 0, attention gates 0. Deterministic in
/// `seed`; the perceptual extractor is left untouched.
inline void init_weights(NetBundle& bundle, std::uint64_t seed, double stddev = 0.01) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard guard;
  for (auto& [name, p] : bundle.named_parameters()) {
    const bool is_bias = name.ends_with(".bias");
    const bool is_gate = name.ends_with(".gamma");
    if (is_bias || is_gate) {
      p.zero_();
    } else {
      p.normal_(0.0, stddev, gen);
    }
  }
}

inline NetBundle make_bundle(const NetConfig& config, std::uint64_t seed) {
  NetBundle b(config);
  init_weights(b, seed);
  return b;
}

using ArchiveWriter = std::function<void(torch::serialize::OutputArchive&)>;
using ArchiveReader = std::function<void(torch::serialize::InputArchive&)>;

/// Single archive: parameters and buffers as "<module>.<name>", the config
/// as JSON under "meta.config", the step under "meta.step". Written to a
/// temporary file and renamed into place.
inline void save_checkpoint(const fs::path& path, const NetBundle& bundle, int64_t step,
                            const ArchiveWriter& extra = {}) {
  torch::serialize::OutputArchive archive;
  for (const auto& [prefix, m] : bundle.modules()) {
    for (const auto& p : m->named_parameters()) archive.write(prefix + "." + p.key(), p.value());
    for (const auto& b : m->named_buffers()) archive.write(prefix + "." + b.key(), b.value(), true);
  }
  archive.write("meta.config", c10::IValue(bundle.config.to_json().dump()));
  archive.write("meta.step", c10::IValue(step));
  if (extra) extra(archive);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

struct LoadedCheckpoint {
  NetBundle bundle;
  int64_t step = 0;
};

inline NetConfig read_checkpoint_config(torch::serialize::InputArchive& archive) {
  c10::IValue v;
  if (!archive.try_read("meta.config", v) || !v.isString()) throw LoadError("checkpoint has no config");
  return NetConfig::from_json(nlohmann::json::parse(v.toStringRef()));
}

inline LoadedCheckpoint load_checkpoint(const fs::path& path, const ArchiveReader& extra = {}) {
  if (!fs::is_regular_file(path)) throw LoadError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw LoadError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  NetConfig config;
  try {
    config = read_checkpoint_config(archive);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint config is invalid: " + std::string(e.what()));
  }
  LoadedCheckpoint out{NetBundle(config), 0};
  torch::NoGradGuard guard;
  for (const auto& [prefix, m] : out.bundle.modules()) {
    for (auto& p : m->named_parameters()) {
      torch::Tensor t;
      if (!archive.try_read(prefix + "." + p.key(), t)) throw LoadError("checkpoint missing " + prefix + "." + p.key());
      p.value().copy_(t);
    }
    for (auto& b : m->named_buffers()) {
      torch::Tensor t;
      if (archive.try_read(prefix + "." + b.key(), t)) b.value().copy_(t);
    }
  }
  c10::IValue step;
  if (archive.try_read("meta.step", step)) out.step = step.toInt();
  if (extra) extra(archive);
  return out;
}

}  // namespace swaptext::nets
