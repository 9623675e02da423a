// swaptext: forge data, train, swap a single image, evaluate a checkpoint.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "swaptext/dataforge.hpp"
#include "swaptext/metrics.hpp"
#include "swaptext/trainer.hpp"

namespace fs = std::filesystem;
using namespace swaptext;

namespace {

struct ForgeArgs {
  std::string fonts, backgrounds, out, content_font = data::kDefaultContentFont;
  std::size_t count = 0;
  uint64_t seed = 0;
  int k = geometry::kDefaultFiducialCount;
};

int run_forge(const ForgeArgs& a) {
  data::ForgeConfig cfg;
  cfg.fonts_dir = a.fonts;
  cfg.backgrounds_dir = a.backgrounds;
  cfg.out_dir = a.out;
  cfg.count = a.count;
  cfg.seed = a.seed;
  cfg.k = a.k;
  cfg.content_font = a.content_font;
  const auto s = data::forge_dataset(cfg);
  std::cout << "samples: " << s.count << "\n"
            << "curved: " << s.curved << "\n";
  for (const auto& [font, n] : s.font_histogram) std::cout << "font " << font << ": " << n << "\n";
  std::cout << "manifest: " << s.manifest_path.string() << "\n"
            << "manifest digest: " << s.manifest_digest << "\n";
  return 0;
}

struct BackgroundArgs {
  std::string out;
  std::size_t count = 8;
  uint64_t seed = 0;
};

int run_backgrounds(const BackgroundArgs& a) {
  const auto files = data::generate_backgrounds(a.out, a.count, a.seed);
  std::cout << "wrote " << files.size() << " backgrounds to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, dataset, out, attention, vgg_weights, resume;
  int64_t steps = 0;
  int64_t log_every = 100;
  bool no_cstn = false, no_dilated = false, no_vgg = false;
  CLI::Option* steps_opt = nullptr;
};

int run_train(const TrainArgs& a) {
  auto cfg = train::load_train_config(a.config);
  if (!a.dataset.empty()) cfg.dataset = a.dataset;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.steps_opt->count() > 0) cfg.steps = a.steps;
  if (a.no_cstn) cfg.use_cstn = false;
  if (a.no_dilated) cfg.use_dilated = false;
  if (a.no_vgg) cfg.use_vgg = false;
  if (!a.attention.empty()) cfg.attention = nets::parse_attention_mode(a.attention);
  if (!a.vgg_weights.empty()) cfg.vgg_weights = a.vgg_weights;
  cfg.validate();

  train::TrainOptions opts;
  if (!a.resume.empty()) opts.resume_from = a.resume;
  opts.on_report = [&](const losses::LossReport& r) {
    if (a.log_every > 0 && (r.step % a.log_every == 0 || r.step == cfg.steps)) {
      std::printf("step %lld  L_total %.5f  L_P %.5f  L_swap %.5f  L_B %.5f  L_F %.5f  D_b %.4f  D_fuse %.4f\n",
                  static_cast<long long>(r.step), r.total, r.fiducial, r.swap, r.background(), r.fusion(),
                  r.disc_background, r.disc_fusion);
      std::fflush(stdout);
    }
  };
  const auto result = train::train(cfg, opts);
  std::cout << "loss log: " << result.log_path.string() << "\n"
            << "final checkpoint: " << result.final_checkpoint.string() << "\n";
  return 0;
}

struct SwapArgs {
  std::string checkpoint, image, text, out, content_font = data::kDefaultContentFont;
};

int run_swap(const SwapArgs& a) {
  auto loaded = nets::load_checkpoint(a.checkpoint);
  const auto style = read_word_image(a.image, loaded.bundle.config.input);
  data::FontLibrary fonts;
  const auto render = train::make_content_renderer(fonts, a.content_font, loaded.bundle.config.input);
  const auto r = train::infer_swap(loaded.bundle, style, a.text, render);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_png(out / "i_c_warped.png", r.warped_content);
  write_png(out / "i_f.png", r.foreground);
  write_png(out / "i_b.png", r.background);
  write_png(out / "i_t.png", r.target);
  write_png(out / "grid.png", make_grid({style, r.content, r.warped_content, r.foreground, r.background, r.target}));
  std::cout << "wrote i_c_warped.png i_f.png i_b.png i_t.png grid.png to " << out.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, dataset, out;
  bool perfect_stub = false;
};

int run_eval(const EvalArgs& a) {
  const auto ds = data::Dataset::open(a.dataset);
  metrics::EvalReport report;
  if (a.perfect_stub) {
    report = metrics::evaluate(ds, [](const data::PairedSample& s) { return s.target; }, "ground truth", "none");
  } else {
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required unless --perfect-stub is given");
    auto loaded = nets::load_checkpoint(a.checkpoint);
    report = metrics::evaluate(loaded.bundle, ds);
  }
  const fs::path json_path(a.out);
  if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
  data::write_text_file(json_path, report.to_json().dump(2) + "\n");
  auto table_path = json_path;
  table_path.replace_extension(".txt");
  data::write_text_file(table_path, report.table());
  std::cout << report.table() << "report: " << json_path.string() << "\n"
            << "table: " << table_path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene-text swapping: data forging, training, inference and evaluation"};
  app.require_subcommand(1);

  ForgeArgs forge;
  auto* f = app.add_subcommand("forge", "Forge a synthetic paired dataset");
  f->add_option("--fonts", forge.fonts, "Directory of .ttf/.otf fonts")->required();
  f->add_option("--backgrounds", forge.backgrounds, "Directory of text-free background images")->required();
  f->add_option("--count", forge.count, "Number of samples")->required();
  f->add_option("--seed", forge.seed, "Random seed")->required();
  f->add_option("--out", forge.out, "Output dataset directory")->required();
  f->add_option("--k", forge.k, "Fiducial points per side")->capture_default_str();
  f->add_option("--content-font", forge.content_font, "Font used for the plain content image")->capture_default_str();

  BackgroundArgs bgs;
  auto* b = app.add_subcommand("backgrounds", "Generate procedural text-free background images");
  b->add_option("--out", bgs.out, "Output directory")->required();
  b->add_option("--count", bgs.count, "Number of images")->capture_default_str();
  b->add_option("--seed", bgs.seed, "Random seed")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the three-stage network");
  t->add_option("--config", tr.config, "Training config JSON")->required();
  t->add_option("--dataset", tr.dataset, "Override the dataset directory");
  t->add_option("--out", tr.out, "Override the run directory");
  tr.steps_opt = t->add_option("--steps", tr.steps, "Override the number of steps");
  t->add_flag("--no-cstn", tr.no_cstn, "Disable the shape transformer");
  t->add_option("--attention", tr.attention, "Self-attention mode")->check(CLI::IsMember({"off", "single", "multi"}));
  t->add_flag("--no-dilated", tr.no_dilated, "Disable dilated convolutions in the background network");
  t->add_flag("--no-vgg", tr.no_vgg, "Disable the perceptual/style loss");
  t->add_option("--vgg-weights", tr.vgg_weights, "VGG-19 weights file for the perceptual loss");
  t->add_option("--resume", tr.resume, "Resume from a checkpoint");
  t->add_option("--log-every", tr.log_every, "Print losses every N steps (0 = quiet)")->capture_default_str();

  SwapArgs sw;
  auto* s = app.add_subcommand("swap", "Replace the text of one word image");
  s->add_option("--checkpoint", sw.checkpoint, "Trained checkpoint")->required();
  s->add_option("--image", sw.image, "Style image (resized to the network input)")->required();
  s->add_option("--text", sw.text, "Replacement text")->required();
  s->add_option("--out", sw.out, "Output directory")->required();
  s->add_option("--content-font", sw.content_font, "Font for the content image")->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset (l2, PSNR, SSIM)");
  e->add_option("--checkpoint", ev.checkpoint, "Trained checkpoint");
  e->add_option("--dataset", ev.dataset, "Dataset directory")->required();
  e->add_option("--out", ev.out, "Report JSON path; the text table goes next to it as .txt")->required();
  e->add_flag("--perfect-stub", ev.perfect_stub, "Score the ground truth against itself (sanity check)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 1;
  }

  try {
    if (f->parsed()) return run_forge(forge);
    if (b->parsed()) return run_backgrounds(bgs);
    if (t->parsed()) return run_train(tr);
    if (s->parsed()) return run_swap(sw);
    if (e->parsed()) return run_eval(ev);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
