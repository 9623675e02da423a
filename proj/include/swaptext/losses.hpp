#pragma once

// Training objectives. L1 reductions are means, so the balance factors do
// not depend on image resolution.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "swaptext/error.hpp"

namespace swaptext::losses {

struct BalanceFactors {
  double lambda_b = 10.0;
  double lambda_fuse = 10.0;
  double lambda_1 = 1.0;    // perceptual
  double lambda_2 = 500.0;  // style
  double beta = 1.0;        // smooth-L1 threshold

  void validate() const {
    for (double v : {lambda_b, lambda_fuse, lambda_1, lambda_2}) {
      if (!(v >= 0.0)) throw ConfigError("loss balance factors must be >= 0");
    }
    if (!(beta > 0.0)) throw ConfigError("smooth-L1 beta must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"lambda_b", lambda_b}, {"lambda_fuse", lambda_fuse}, {"lambda_1", lambda_1},
            {"lambda_2", lambda_2}, {"beta", beta}};
  }

  static BalanceFactors from_json(const nlohmann::json& j) {
    BalanceFactors f;
    f.lambda_b = j.value("lambda_b", f.lambda_b);
    f.lambda_fuse = j.value("lambda_fuse", f.lambda_fuse);
    f.lambda_1 = j.value("lambda_1", f.lambda_1);
    f.lambda_2 = j.value("lambda_2", f.lambda_2);
    f.beta = j.value("beta", f.beta);
    f.validate();
    return f;
  }
};

inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

/// 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside.
inline torch::Tensor smooth_l1(const torch::Tensor& x, double beta = 1.0) {
  if (!(beta > 0.0)) throw InvalidInputError("smooth_l1 beta must be > 0");
  auto ax = x.abs();
  return torch::where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta);
}

/// Mean smooth-L1 over all 2K points and both coordinates (and the batch).
inline torch::Tensor loss_fiducial(const torch::Tensor& predicted, const torch::Tensor& target, double beta = 1.0) {
  require_same_shape(predicted, target, "fiducial loss");
  if (predicted.size(-1) != 2) throw ShapeError("fiducial tensors must end in a coordinate pair");
  return smooth_l1(predicted - target, beta).mean();
}

inline torch::Tensor mean_abs(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().mean(); }

/// Mean absolute error between the generated foreground and its ground truth.
inline torch::Tensor loss_swap(const torch::Tensor& foreground, const torch::Tensor& target) {
  require_same_shape(foreground, target, "swap loss");
  return mean_abs(foreground, target);
}

/// Both sides of a conditional GAN objective with an L1 reconstruction term.
struct GanTerms {
  torch::Tensor adversarial;    // non-saturating generator term, BCE(D(fake), 1)
  torch::Tensor l1;             // lambda * mean |fake - real|
  torch::Tensor generator;      // adversarial + l1
  torch::Tensor discriminator;  // BCE(D(real), 1) + BCE(D(fake), 0)
};

inline torch::Tensor bce_logits(const torch::Tensor& logits, double label) {
  return torch::binary_cross_entropy_with_logits(logits, torch::full_like(logits, label));
}

/// `d_real` and `d_fake` are patch logit maps. Callers pass a detached fake
/// when updating the discriminator and an attached one for the generator.
inline GanTerms gan_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake, const torch::Tensor& fake,
                         const torch::Tensor& real, double lambda) {
  require_same_shape(d_real, d_fake, "discriminator logits");
  require_same_shape(fake, real, "GAN images");
  GanTerms t;
  t.adversarial = bce_logits(d_fake, 1.0);
  t.l1 = lambda * mean_abs(fake, real);
  t.generator = t.adversarial + t.l1;
  t.discriminator = bce_logits(d_real, 1.0) + bce_logits(d_fake, 0.0);
  return t;
}

/// Background completion objective; the discriminator is conditioned on I_s.
inline GanTerms loss_background(const torch::Tensor& d_real, const torch::Tensor& d_fake,
                                const torch::Tensor& background_hat, const torch::Tensor& background,
                                double lambda_b = 10.0) {
  return gan_loss(d_real, d_fake, background_hat, background, lambda_b);
}

/// Fusion objective; the discriminator is conditioned on I_c.
inline GanTerms loss_fusion(const torch::Tensor& d_real, const torch::Tensor& d_fake, const torch::Tensor& target_hat,
                            const torch::Tensor& target, double lambda_fuse = 10.0) {
  return gan_loss(d_real, d_fake, target_hat, target, lambda_fuse);
}

/// [B, C, H, W] -> [B, C, C], normalized by C * H * W.
inline torch::Tensor gram_matrix(const torch::Tensor& features) {
  if (features.dim() != 4) throw ShapeError("gram_matrix expects [B, C, H, W] features");
  const auto b = features.size(0), c = features.size(1), n = features.size(2) * features.size(3);
  auto f = features.reshape({b, c, n});
  return torch::bmm(f, f.transpose(1, 2)) / static_cast<double>(c * n);
}

using FeatureExtractor = std::function<std::vector<torch::Tensor>(const torch::Tensor&)>;

struct VggTerms {
  torch::Tensor perceptual;  // L_per, unweighted
  torch::Tensor style;       // L_style, unweighted
  torch::Tensor total;       // lambda_1 * L_per + lambda_2 * L_style
};

inline VggTerms loss_vgg(const torch::Tensor& target_hat, const torch::Tensor& target, const FeatureExtractor& phi,
                         double lambda_1 = 1.0, double lambda_2 = 500.0) {
  if (!phi) throw ConfigError("VGG loss requested without a feature extractor");
  require_same_shape(target_hat, target, "VGG loss");
  const auto fa = phi(target_hat);
  const auto fb = phi(target);
  if (fa.empty() || fa.size() != fb.size()) throw ShapeError("feature extractor returned mismatched layer lists");
  auto per = torch::zeros({}, target.options());
  auto sty = torch::zeros({}, target.options());
  for (std::size_t i = 0; i < fa.size(); ++i) {
    per = per + mean_abs(fa[i], fb[i]);
    sty = sty + mean_abs(gram_matrix(fa[i]), gram_matrix(fb[i]));
  }
  const double layers = static_cast<double>(fa.size());
  VggTerms t;
  t.perceptual = per / layers;
  t.style = sty / layers;
  t.total = lambda_1 * t.perceptual + lambda_2 * t.style;
  return t;
}

/// Generator-side terms of the overall objective.
struct LossTerms {
  torch::Tensor fiducial;    // L_P
  torch::Tensor swap;        // L_swap
  torch::Tensor background;  // L_B generator term
  torch::Tensor fusion;      // L_F generator term
  torch::Tensor vgg;         // L_vgg; undefined when the VGG loss is off
};

inline void require_finite(const torch::Tensor& t, const std::string& term) {
  if (!t.defined()) return;
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericError(term, "non-finite value in loss term " + term);
  }
}

/// Unweighted sum L_P + L_swap + L_B + L_F + L_vgg.
inline torch::Tensor total_loss(const LossTerms& t) {
  require_finite(t.fiducial, "L_P");
  require_finite(t.swap, "L_swap");
  require_finite(t.background, "L_B");
  require_finite(t.fusion, "L_F");
  require_finite(t.vgg, "L_vgg");
  auto sum = t.fiducial + t.swap + t.background + t.fusion;
  return t.vgg.defined() ? sum + t.vgg : sum;
}

/// Scalar values of one training step, one JSON object per log line.
struct LossReport {
  int64_t step = 0;
  double fiducial = 0, swap = 0;
  double background_adv = 0, background_l1 = 0;
  double fusion_adv = 0, fusion_l1 = 0;
  double perceptual = 0, style = 0, vgg = 0;
  double total = 0;
  double disc_background = 0, disc_fusion = 0;

  double background() const { return background_adv + background_l1; }
  double fusion() const { return fusion_adv + fusion_l1; }

  nlohmann::json to_json() const {
    return {{"step", step},
            {"L_P", fiducial},
            {"L_swap", swap},
            {"L_B_adv", background_adv},
            {"L_B_l1", background_l1},
            {"L_F_adv", fusion_adv},
            {"L_F_l1", fusion_l1},
            {"L_per", perceptual},
            {"L_style", style},
            {"L_vgg", vgg},
            {"L_total", total},
            {"D_b", disc_background},
            {"D_fuse", disc_fusion}};
  }

  static LossReport from_json(const nlohmann::json& j) {
    LossReport r;
    r.step = j.at("step").get<int64_t>();
    r.fiducial = j.at("L_P").get<double>();
    r.swap = j.at("L_swap").get<double>();
    r.background_adv = j.at("L_B_adv").get<double>();
    r.background_l1 = j.at("L_B_l1").get<double>();
    r.fusion_adv = j.at("L_F_adv").get<double>();
    r.fusion_l1 = j.at("L_F_l1").get<double>();
    r.perceptual = j.at("L_per").get<double>();
    r.style = j.at("L_style").get<double>();
    r.vgg = j.at("L_vgg").get<double>();
    r.total = j.at("L_total").get<double>();
    r.disc_background = j.at("D_b").get<double>();
    r.disc_fusion = j.at("D_fuse").get<double>();
    return r;
  }

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

}  // namespace swaptext::losses
