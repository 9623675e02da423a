#pragma once

// Training loop: one discriminator update then one generator update per
// batch, Adam per network, JSON-lines loss log, atomic checkpoints.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "swaptext/dataforge.hpp"
#include "swaptext/error.hpp"
#include "swaptext/losses.hpp"
#include "swaptext/nets.hpp"

namespace swaptext::train {

namespace fs = std::filesystem;
using losses::LossReport;

struct TrainConfig {
  fs::path dataset;
  fs::path out_dir = "runs/swaptext";
  int batch_size = 32;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int64_t steps = 10000;
  std::uint64_t seed = 0;
  bool use_cstn = true;
  nets::AttentionMode attention = nets::AttentionMode::single;
  bool use_dilated = true;
  bool use_vgg = true;
  fs::path vgg_weights;
  int64_t checkpoint_every = 1000;
  int width = 32;
  int residual_blocks = 4;
  losses::BalanceFactors lambdas;

  void validate() const {
    if (dataset.empty()) throw ConfigError("train config: dataset path is required");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train config: Adam betas must be in [0, 1)");
    }
    if (steps < 0) throw ConfigError("train config: steps must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("train config: checkpoint_every must be >= 1");
    if (use_vgg && vgg_weights.empty()) {
      throw ConfigError("train config: VGG loss is enabled but vgg_weights is not set (use --no-vgg to disable)");
    }
    if (use_vgg && !fs::is_regular_file(vgg_weights)) {
      throw ConfigError("train config: VGG weights file not found: " + vgg_weights.string());
    }
    lambdas.validate();
    net_config(geometry::kDefaultFiducialCount).validate();
  }

  nets::NetConfig net_config(int k) const {
    nets::NetConfig c;
    c.width = width;
    c.residual_blocks = residual_blocks;
    c.attention = attention;
    c.use_cstn = use_cstn;
    c.use_dilated = use_dilated;
    c.k = k;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"dataset", dataset.string()},
            {"out_dir", out_dir.string()},
            {"batch_size", batch_size},
            {"lr", lr},
            {"beta1", beta1},
            {"beta2", beta2},
            {"steps", steps},
            {"seed", seed},
            {"use_cstn", use_cstn},
            {"attention", nets::to_string(attention)},
            {"use_dilated", use_dilated},
            {"use_vgg", use_vgg},
            {"vgg_weights", vgg_weights.string()},
            {"checkpoint_every", checkpoint_every},
            {"width", width},
            {"residual_blocks", residual_blocks},
            {"lambdas", lambdas.to_json()}};
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known{
        "dataset", "out_dir", "batch_size", "lr", "beta1", "beta2", "steps", "seed", "use_cstn",
        "attention", "use_dilated", "use_vgg", "vgg_weights", "checkpoint_every", "width",
        "residual_blocks", "lambdas"};
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ConfigError("train config: unknown key '" + key + "'");
      }
    }
    TrainConfig c;
    try {
      c.dataset = j.value("dataset", std::string());
      c.out_dir = j.value("out_dir", c.out_dir.string());
      c.batch_size = j.value("batch_size", c.batch_size);
      c.lr = j.value("lr", c.lr);
      c.beta1 = j.value("beta1", c.beta1);
      c.beta2 = j.value("beta2", c.beta2);
      c.steps = j.value("steps", c.steps);
      c.seed = j.value("seed", c.seed);
      c.use_cstn = j.value("use_cstn", c.use_cstn);
      c.attention = nets::parse_attention_mode(j.value("attention", nets::to_string(c.attention)));
      c.use_dilated = j.value("use_dilated", c.use_dilated);
      c.use_vgg = j.value("use_vgg", c.use_vgg);
      c.vgg_weights = j.value("vgg_weights", std::string());
      c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
      c.width = j.value("width", c.width);
      c.residual_blocks = j.value("residual_blocks", c.residual_blocks);
      if (j.contains("lambdas")) c.lambdas = losses::BalanceFactors::from_json(j.at("lambdas"));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("train config: ") + e.what());
    }
    return c;
  }
};

inline TrainConfig load_train_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("train config not found: " + path.string());
  try {
    return TrainConfig::from_json(nlohmann::json::parse(data::read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("train config " + path.string() + " is not valid JSON: " + e.what());
  }
}

/// Epoch-shuffled batch order, a pure function of (size, batch, seed, step):
/// epoch e uses a permutation drawn from seed + e.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t size, std::size_t batch_size, std::uint64_t seed)
      : size_(size), batch_(std::min(batch_size, size)), seed_(seed) {
    if (size == 0) throw ConfigError("cannot train on an empty dataset");
  }

  std::size_t batches_per_epoch() const { return (size_ + batch_ - 1) / batch_; }

  /// Sample indices for zero-based step `step`.
  std::vector<std::size_t> indices(int64_t step) {
    const auto per = static_cast<int64_t>(batches_per_epoch());
    const int64_t epoch = step / per;
    if (epoch != cached_epoch_) {
      order_.resize(size_);
      for (std::size_t i = 0; i < size_; ++i) order_[i] = i;
      std::mt19937_64 rng(seed_ + static_cast<std::uint64_t>(epoch));
      std::shuffle(order_.begin(), order_.end(), rng);
      cached_epoch_ = epoch;
    }
    const std::size_t begin = static_cast<std::size_t>(step % per) * batch_;
    const std::size_t end = std::min(size_, begin + batch_);
    return {order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(end)};
  }

 private:
  std::size_t size_, batch_;
  std::uint64_t seed_;
  int64_t cached_epoch_ = -1;
  std::vector<std::size_t> order_;
};

enum class Phase { discriminator_updated, generator_updated };

class Trainer {
 public:
  Trainer(TrainConfig config, nets::NetBundle bundle, int64_t step = 0)
      : config_(std::move(config)), bundle_(std::move(bundle)), step_(step) {
    auto adam = [&](const std::vector<torch::Tensor>& params) {
      return std::make_unique<torch::optim::Adam>(
          params, torch::optim::AdamOptions(config_.lr).betas({config_.beta1, config_.beta2}));
    };
    opt_swap_ = adam(bundle_.swap->parameters());
    opt_background_ = adam(bundle_.background->parameters());
    opt_fusion_ = adam(bundle_.fusion->parameters());
    opt_disc_background_ = adam(bundle_.disc_background->parameters());
    opt_disc_fusion_ = adam(bundle_.disc_fusion->parameters());
    if (config_.use_vgg && !bundle_.perceptual) {
      nets::Vgg19Features vgg;
      vgg->load_weights(config_.vgg_weights);
      bundle_.perceptual = vgg;
    }
  }

  /// Fresh bundle initialized from the config seed.
  static Trainer create(const TrainConfig& config, int k) {
    config.validate();
    return Trainer(config, nets::make_bundle(config.net_config(k), config.seed));
  }

  /// Restores networks, optimizer state and step counter from a checkpoint.
  static Trainer resume(const TrainConfig& config, const fs::path& checkpoint) {
    config.validate();
    auto loaded = nets::load_checkpoint(checkpoint);
    const auto expected = config.net_config(loaded.bundle.config.k);
    if (!(loaded.bundle.config == expected)) {
      throw ConfigError("checkpoint network config " + loaded.bundle.config.to_json().dump() +
                        " does not match the train config " + expected.to_json().dump());
    }
    Trainer t(config, loaded.bundle, loaded.step);
    t.load_optimizers(checkpoint);
    return t;
  }

  const TrainConfig& config() const noexcept { return config_; }
  nets::NetBundle& bundle() noexcept { return bundle_; }
  int64_t step() const noexcept { return step_; }

  /// Called between the two sub-steps and after the generator update.
  std::function<void(Phase)> on_phase;

  LossReport train_step(const data::Batch& batch) {
    bundle_.train(true);
    auto& b = bundle_;
    const auto& lam = config_.lambdas;

    auto sw = b.swap->forward(batch.style, batch.content);
    auto bg = b.background->forward(batch.style);
    auto t_hat = b.fusion->forward(sw.foreground, bg.features);

    // Discriminators on detached generator outputs.
    set_requires_grad(*b.disc_background, true);
    set_requires_grad(*b.disc_fusion, true);
    const auto db_real = b.disc_background->forward(batch.background, batch.style);
    const auto db_fake = b.disc_background->forward(bg.image.detach(), batch.style);
    const auto df_real = b.disc_fusion->forward(batch.target, batch.content);
    const auto df_fake = b.disc_fusion->forward(t_hat.detach(), batch.content);
    const auto d_b = losses::loss_background(db_real, db_fake, bg.image.detach(), batch.background, lam.lambda_b);
    const auto d_f = losses::loss_fusion(df_real, df_fake, t_hat.detach(), batch.target, lam.lambda_fuse);
    losses::require_finite(d_b.discriminator, "D_b");
    losses::require_finite(d_f.discriminator, "D_fuse");
    opt_disc_background_->zero_grad();
    opt_disc_fusion_->zero_grad();
    (d_b.discriminator + d_f.discriminator).backward();
    opt_disc_background_->step();
    opt_disc_fusion_->step();
    if (on_phase) on_phase(Phase::discriminator_updated);

    // Generators against the updated, frozen discriminators.
    set_requires_grad(*b.disc_background, false);
    set_requires_grad(*b.disc_fusion, false);
    const auto g_b = losses::loss_background(db_real.detach(), b.disc_background->forward(bg.image, batch.style),
                                             bg.image, batch.background, lam.lambda_b);
    const auto g_f = losses::loss_fusion(df_real.detach(), b.disc_fusion->forward(t_hat, batch.content), t_hat,
                                         batch.target, lam.lambda_fuse);
    losses::LossTerms terms{losses::loss_fiducial(sw.fiducials, batch.fiducials, lam.beta),
                            losses::loss_swap(sw.foreground, batch.swap_target), g_b.generator, g_f.generator,
                            torch::Tensor()};
    std::optional<losses::VggTerms> vgg;
    if (config_.use_vgg) {
      auto phi = *bundle_.perceptual;
      vgg = losses::loss_vgg(t_hat, batch.target, [phi](const torch::Tensor& x) mutable { return phi->forward(x); },
                             lam.lambda_1, lam.lambda_2);
      terms.vgg = vgg->total;
    }
    torch::Tensor total;
    try {
      total = losses::total_loss(terms);
    } catch (const NumericError& e) {
      set_requires_grad(*b.disc_background, true);
      set_requires_grad(*b.disc_fusion, true);
      throw NumericError(e.term(), "step " + std::to_string(step_ + 1) + ": " + e.what());
    }
    opt_swap_->zero_grad();
    opt_background_->zero_grad();
    opt_fusion_->zero_grad();
    total.backward();
    opt_swap_->step();
    opt_background_->step();
    opt_fusion_->step();
    set_requires_grad(*b.disc_background, true);
    set_requires_grad(*b.disc_fusion, true);
    ++step_;
    if (on_phase) on_phase(Phase::generator_updated);

    LossReport r;
    r.step = step_;
    r.fiducial = terms.fiducial.item<double>();
    r.swap = terms.swap.item<double>();
    r.background_adv = g_b.adversarial.item<double>();
    r.background_l1 = g_b.l1.item<double>();
    r.fusion_adv = g_f.adversarial.item<double>();
    r.fusion_l1 = g_f.l1.item<double>();
    if (vgg) {
      r.perceptual = vgg->perceptual.item<double>();
      r.style = vgg->style.item<double>();
      r.vgg = vgg->total.item<double>();
    }
    r.total = total.item<double>();
    r.disc_background = d_b.discriminator.item<double>();
    r.disc_fusion = d_f.discriminator.item<double>();
    return r;
  }

  void save(const fs::path& path) const {
    nets::save_checkpoint(path, bundle_, step_, [&](torch::serialize::OutputArchive& archive) {
      archive.write("meta.train_config", c10::IValue(config_.to_json().dump()));
      const std::array<torch::optim::Optimizer*, 5> opts{opt_swap_.get(), opt_background_.get(), opt_fusion_.get(),
                                                          opt_disc_background_.get(), opt_disc_fusion_.get()};
      for (std::size_t i = 0; i < opts.size(); ++i) {
        torch::serialize::OutputArchive sub;
        opts[i]->save(sub);
        archive.write(std::string("optim.") + kOptimizerNames[i], sub);
      }
    });
  }

 private:
  static constexpr std::array<const char*, 5> kOptimizerNames{"swap", "background", "fusion", "disc_background",
                                                              "disc_fusion"};

  static void set_requires_grad(torch::nn::Module& m, bool on) {
    for (auto& p : m.parameters()) p.set_requires_grad(on);
  }

  void load_optimizers(const fs::path& checkpoint) {
    torch::serialize::InputArchive archive;
    archive.load_from(checkpoint.string());
    const std::array<torch::optim::Optimizer*, 5> opts{opt_swap_.get(), opt_background_.get(), opt_fusion_.get(),
                                                        opt_disc_background_.get(), opt_disc_fusion_.get()};
    for (std::size_t i = 0; i < opts.size(); ++i) {
      torch::serialize::InputArchive sub;
      if (archive.try_read(std::string("optim.") + kOptimizerNames[i], sub)) opts[i]->load(sub);
    }
  }

  TrainConfig config_;
  nets::NetBundle bundle_;
  int64_t step_ = 0;
  std::unique_ptr<torch::optim::Adam> opt_swap_, opt_background_, opt_fusion_, opt_disc_background_,
      opt_disc_fusion_;
};

inline std::string checkpoint_name(int64_t step) {
  std::ostringstream s;
  s << "ckpt-" << std::setw(6) << std::setfill('0') << step << ".pt";
  return s.str();
}

struct TrainResult {
  fs::path final_checkpoint;
  fs::path log_path;
  int64_t steps_run = 0;
  std::optional<LossReport> last;
};

struct TrainOptions {
  std::optional<fs::path> resume_from;
  std::function<void(const LossReport&)> on_report;
  std::optional<nets::NetBundle> initial_bundle;  // overrides seeded initialization
};

inline const char* kLossLogName = "loss.jsonl";

/// Runs `config.steps` optimizer steps in total (a resumed run continues
/// from its checkpoint's step). Writes checkpoints every
/// `checkpoint_every` steps, at step 0 and at the end; on a numeric abort a
/// checkpoint is written and the error rethrown.
inline TrainResult train(const TrainConfig& config, const TrainOptions& options = {}) {
  config.validate();
  const auto dataset = data::Dataset::open(config.dataset);
  if (dataset.empty()) throw ConfigError("dataset " + config.dataset.string() + " is empty");
  const auto samples = dataset.load_all();

  Trainer trainer = options.resume_from ? Trainer::resume(config, *options.resume_from)
                    : options.initial_bundle ? Trainer(config, *options.initial_bundle)
                                             : Trainer::create(config, dataset.k());
  fs::create_directories(config.out_dir);
  TrainResult result;
  result.log_path = config.out_dir / kLossLogName;

  // A resumed run keeps the log lines of the steps it does not redo.
  std::vector<std::string> kept;
  if (trainer.step() > 0 && fs::exists(result.log_path)) {
    std::ifstream in(result.log_path);
    std::string line;
    while (static_cast<int64_t>(kept.size()) < trainer.step() && std::getline(in, line)) kept.push_back(line);
  }
  std::ofstream log(result.log_path, std::ios::trunc);
  for (const auto& line : kept) log << line << "\n";

  auto checkpoint = [&](const std::string& name) {
    const fs::path p = config.out_dir / name;
    trainer.save(p);
    return p;
  };
  if (trainer.step() == 0) result.final_checkpoint = checkpoint(checkpoint_name(0));

  BatchSchedule schedule(samples.size(), static_cast<std::size_t>(config.batch_size), config.seed);
  std::vector<data::PairedSample> picked;
  while (trainer.step() < config.steps) {
    picked.clear();
    for (std::size_t i : schedule.indices(trainer.step())) picked.push_back(samples[i]);
    const auto batch = data::collate(picked);
    LossReport report;
    try {
      report = trainer.train_step(batch);
    } catch (const NumericError&) {
      checkpoint("ckpt-abort-" + std::to_string(trainer.step()) + ".pt");
      log.flush();
      throw;
    }
    log << report.to_json().dump() << "\n";
    log.flush();
    ++result.steps_run;
    result.last = report;
    if (options.on_report) options.on_report(report);
    if (trainer.step() % config.checkpoint_every == 0 || trainer.step() == config.steps) {
      result.final_checkpoint = checkpoint(checkpoint_name(trainer.step()));
    }
  }
  if (result.final_checkpoint.empty()) result.final_checkpoint = checkpoint(checkpoint_name(trainer.step()));
  return result;
}

inline std::vector<LossReport> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read loss log " + path.string());
  std::vector<LossReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(LossReport::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inference

using ContentRenderer = std::function<torch::Tensor(const std::string&)>;

/// Renders content images with `font` from `fonts` (black on white, [3, H, W]).
inline ContentRenderer make_content_renderer(data::FontLibrary& fonts, std::string font = data::kDefaultContentFont,
                                             ImageSize size = kWordImageSize) {
  return [&fonts, font = std::move(font), size](const std::string& text) {
    return mat_to_tensor(data::render_content_image(text, font, size, fonts));
  };
}

struct SwapResult {
  torch::Tensor target;          // I_t estimate
  torch::Tensor foreground;      // I_f
  torch::Tensor background;      // I_b estimate
  torch::Tensor fiducials;       // [2K, 2]
  torch::Tensor content;         // I_c
  torch::Tensor warped_content;  // I_c after the shape transform
};

inline SwapResult infer_swap(nets::NetBundle& bundle, const torch::Tensor& style, const torch::Tensor& content) {
  torch::NoGradGuard guard;
  bundle.train(false);
  const auto s = style.dim() == 3 ? style.unsqueeze(0) : style;
  const auto c = content.dim() == 3 ? content.unsqueeze(0) : content;
  const auto sw = bundle.swap->forward(s, c);
  const auto bg = bundle.background->forward(s);
  const auto t = bundle.fusion->forward(sw.foreground, bg.features);
  return {t.squeeze(0), sw.foreground.squeeze(0), bg.image.squeeze(0), sw.fiducials.squeeze(0), c.squeeze(0),
          sw.warped_content.squeeze(0)};
}

/// Full three-stage swap of `style` ([3, H, W]) to `target_text`.
inline SwapResult infer_swap(nets::NetBundle& bundle, const torch::Tensor& style, const std::string& target_text,
                             const ContentRenderer& render) {
  return infer_swap(bundle, style, render(target_text));
}

}  // namespace swaptext::train
