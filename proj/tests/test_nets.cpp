#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "support.hpp"
#include "swaptext/nets.hpp"

using namespace swaptext;
using nets::AttentionMode;
using nets::NetConfig;

namespace {

torch::Tensor random_images(int64_t batch, ImageSize size = kWordImageSize, uint64_t seed = 0,
                            torch::Dtype dtype = torch::kFloat32) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({batch, 3, size.height, size.width}, gen, torch::TensorOptions().dtype(dtype)) * 2.0 - 1.0;
}

NetConfig small_config(int width = 4) {
  NetConfig c;
  c.width = width;
  c.residual_blocks = 1;
  return c;
}

void set_gates(nets::SwapGenerator& g, double value) {
  torch::NoGradGuard guard;
  g->attention_mid->gamma.fill_(value);
  g->attention_deep->gamma.fill_(value);
}

}  // namespace

TEST(BackgroundGenerator, LayerTableMatchesReferenceLayout) {
  nets::BackgroundGenerator g(NetConfig{});
  const auto rows = g->layer_table();
  const auto expected = swaptext::testing::reference_background_layers();
  ASSERT_EQ(rows.size(), expected.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i], expected[i]) << "row " << i << ": " << rows[i].type << " k" << rows[i].kernel << " d"
                                    << rows[i].dilation << " s" << rows[i].stride << " c" << rows[i].channels;
  }
}

TEST(BackgroundGenerator, DilationOffUsesPlainConvs) {
  NetConfig c;
  c.use_dilated = false;
  nets::BackgroundGenerator g(c);
  const auto rows = g->layer_table();
  for (int i = 10; i < 13; ++i) {
    EXPECT_EQ(rows[i].type, "conv");
    EXPECT_EQ(rows[i].dilation, 1);
  }
}

TEST(BackgroundGenerator, ShapeTrace) {
  nets::BackgroundGenerator g(NetConfig{});
  torch::NoGradGuard guard;
  const auto x = random_images(1);
  EXPECT_EQ(g->bottleneck(x).sizes(), torch::IntArrayRef({1, 256, 8, 32}));
  const auto out = g->forward(x);
  EXPECT_EQ(out.image.sizes(), torch::IntArrayRef({1, 3, 64, 256}));
  ASSERT_EQ(out.features.size(), 3u);
  EXPECT_EQ(out.features[0].sizes(), torch::IntArrayRef({1, 256, 16, 64}));
  EXPECT_EQ(out.features[1].sizes(), torch::IntArrayRef({1, 128, 32, 128}));
  EXPECT_EQ(out.features[2].sizes(), torch::IntArrayRef({1, 64, 64, 256}));
  EXPECT_LE(out.image.abs().max().item<float>(), 1.0f);
  EXPECT_THROW(g->forward(torch::zeros({1, 3, 32, 256})), ShapeError);
}

TEST(BackgroundGenerator, DilatedLayerParameterCount) {
  nets::BackgroundGenerator g(NetConfig{});
  int64_t count = 0;
  for (const auto& p : g->dilated->parameters()) count += p.numel();
  EXPECT_EQ(count, 3 * (3 * 3 * 256 * 256 + 256));
}

TEST(SwapGenerator, FiducialPredictionShapeAndRange) {
  nets::NetBundle b = nets::make_bundle(small_config(), 1);
  torch::NoGradGuard guard;
  const auto one = b.swap->predict_fiducials(random_images(1));
  EXPECT_EQ(one.sizes(), torch::IntArrayRef({1, 10, 2}));
  const auto three = b.swap->predict_fiducials(random_images(3, kWordImageSize, 5));
  EXPECT_EQ(three.sizes(), torch::IntArrayRef({3, 10, 2}));
  EXPECT_GE(three.min().item<float>(), 0.0f);
  EXPECT_LE(three.max().item<float>(), 1.0f);
  // The initial prediction sits on the canonical layout.
  const auto canonical = geometry::canonical_fiducials(5).to_tensor(torch::kFloat32);
  EXPECT_LT((three - canonical).abs().max().item<float>(), 1e-2f);
  EXPECT_THROW(b.swap->predict_fiducials(torch::zeros({1, 1, 64, 256})), ShapeError);
}

TEST(SwapGenerator, OutputContract) {
  nets::NetBundle b = nets::make_bundle(small_config(), 2);
  torch::NoGradGuard guard;
  const auto out = b.swap->forward(random_images(2, kWordImageSize, 1), random_images(2, kWordImageSize, 2));
  EXPECT_EQ(out.foreground.sizes(), torch::IntArrayRef({2, 3, 64, 256}));
  EXPECT_EQ(out.warped_content.sizes(), torch::IntArrayRef({2, 3, 64, 256}));
  EXPECT_LE(out.foreground.abs().max().item<float>(), 1.0f);
  EXPECT_THROW(b.swap->forward(random_images(2), random_images(1)), ShapeError);
  EXPECT_THROW(b.swap->forward(random_images(1), torch::zeros({1, 3, 64, 128})), ShapeError);
}

TEST(SwapGenerator, CanonicalPredictionLeavesContentInPlace) {
  // Warping canonical -> canonical is the identity up to the float32 solve.
  nets::NetBundle b = nets::make_bundle(small_config(), 3);
  const auto content = random_images(1, kWordImageSize, 9);
  const auto canonical = geometry::canonical_fiducials(5).to_tensor(torch::kFloat32).unsqueeze(0);
  const auto warped = b.swap->warp_content(content, canonical);
  EXPECT_LT((warped - content).abs().max().item<float>(), 2e-3f);
}

TEST(SwapGenerator, AttentionGateAtZeroIsTransparent) {
  nets::NetBundle b = nets::make_bundle(small_config(), 4);
  torch::NoGradGuard guard;
  const auto s = random_images(2, kWordImageSize, 11), c = random_images(2, kWordImageSize, 12);
  b.swap->set_attention_mode(AttentionMode::off);
  const auto off = b.swap->forward(s, c).foreground;
  for (auto mode : {AttentionMode::single, AttentionMode::multi}) {
    b.swap->set_attention_mode(mode);
    EXPECT_TRUE(torch::equal(b.swap->forward(s, c).foreground, off)) << nets::to_string(mode);
  }
}

TEST(SwapGenerator, AttentionModesDifferWhenGatesAreOpen) {
  nets::NetBundle b = nets::make_bundle(small_config(), 5);
  set_gates(b.swap, 0.7);
  torch::NoGradGuard guard;
  const auto s = random_images(1, kWordImageSize, 13), c = random_images(1, kWordImageSize, 14);
  b.swap->set_attention_mode(AttentionMode::off);
  const auto off = b.swap->forward(s, c).foreground;
  b.swap->set_attention_mode(AttentionMode::single);
  const auto single = b.swap->forward(s, c).foreground;
  b.swap->set_attention_mode(AttentionMode::multi);
  const auto multi = b.swap->forward(s, c).foreground;
  EXPECT_GT((off - single).abs().max().item<float>(), 0.0f);
  EXPECT_GT((single - multi).abs().max().item<float>(), 0.0f);
}

TEST(SwapGenerator, AttentionApplicationCount) {
  nets::NetBundle b = nets::make_bundle(small_config(), 6);
  torch::NoGradGuard guard;
  const auto s = random_images(1), c = random_images(1, kWordImageSize, 1);
  for (auto [mode, expected] : {std::pair{AttentionMode::off, 0}, {AttentionMode::single, 1}, {AttentionMode::multi, 2}}) {
    b.swap->set_attention_mode(mode);
    const int64_t before = b.swap->attention_mid->calls + b.swap->attention_deep->calls;
    b.swap->forward(s, c);
    EXPECT_EQ(b.swap->attention_mid->calls + b.swap->attention_deep->calls - before, expected);
  }
}

TEST(SwapGenerator, MultiLevelFusionPreservesShapesAndNeedsTwoLevels) {
  NetConfig cfg = small_config();
  cfg.attention = AttentionMode::multi;
  nets::SwapGenerator g(cfg);
  torch::NoGradGuard guard;
  auto mid = torch::randn({2, 16, 16, 64}), deep = torch::randn({2, 32, 8, 32});
  const auto fused = g->fuse_levels({{mid, mid + 1}, {deep, deep - 1}});
  ASSERT_EQ(fused.size(), 2u);
  EXPECT_EQ(fused[0].sizes(), mid.sizes());
  EXPECT_EQ(fused[1].sizes(), deep.sizes());
  EXPECT_THROW(g->fuse_levels({{mid, mid}}), ConfigError);
  EXPECT_THROW(g->fuse_levels({{deep, deep}, {deep, deep}}), ShapeError);
}

TEST(SwapGenerator, GradientsReachBothEncoders) {
  nets::NetBundle b = nets::make_bundle(small_config(), 7);
  const auto out = b.swap->forward(random_images(1, kWordImageSize, 3), random_images(1, kWordImageSize, 4));
  out.foreground.mean().backward();
  for (auto* enc : {&b.swap->style_encoder, &b.swap->content_encoder}) {
    double total = 0.0;
    for (const auto& p : (*enc)->parameters()) {
      if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
    }
    EXPECT_GT(total, 0.0);
  }
}

TEST(SelfAttention, GateZeroEqualsProjection) {
  torch::manual_seed(3);
  nets::SelfAttention att(16);
  torch::NoGradGuard guard;
  const auto c = torch::randn({2, 16, 4, 8}), s = torch::randn({2, 16, 4, 8});
  const auto with_branch = att->forward(c, s);
  att->branch_enabled = false;
  EXPECT_TRUE(torch::equal(with_branch, att->forward(c, s)));
  EXPECT_TRUE(torch::equal(with_branch, att->project->forward(torch::cat({c, s}, 1))));
}

TEST(SelfAttention, WeightsAreRowStochastic) {
  torch::manual_seed(4);
  nets::SelfAttention att(16);
  torch::NoGradGuard guard;
  const auto [out, weights] = att->forward_with_attention(torch::randn({3, 16, 4, 8}), torch::randn({3, 16, 4, 8}));
  EXPECT_EQ(weights.sizes(), torch::IntArrayRef({3, 32, 32}));
  EXPECT_LT((weights.sum(-1) - 1.0).abs().max().item<float>(), 1e-5f);
  EXPECT_EQ(out.sizes(), torch::IntArrayRef({3, 16, 4, 8}));
}

TEST(SelfAttention, BatchPermutationCommutes) {
  torch::manual_seed(5);
  nets::SelfAttention att(8);
  torch::NoGradGuard guard;
  att->gamma.fill_(0.9);
  const auto c = torch::randn({4, 8, 4, 4}), s = torch::randn({4, 8, 4, 4});
  const auto perm = torch::tensor({2, 0, 3, 1});
  const auto a = att->forward(c, s).index_select(0, perm);
  const auto b = att->forward(c.index_select(0, perm), s.index_select(0, perm));
  EXPECT_LT((a - b).abs().max().item<float>(), 1e-6f);
}

TEST(SelfAttention, SpatialMismatchIsShapeError) {
  nets::SelfAttention att(8);
  EXPECT_THROW(att->forward(torch::randn({1, 8, 4, 4}), torch::randn({1, 8, 4, 8})), ShapeError);
}

TEST(FusionGenerator, ContractSkipsAndGradients) {
  nets::NetBundle b = nets::make_bundle(small_config(), 8);
  const auto style = random_images(1, kWordImageSize, 21);
  const auto fg = random_images(1, kWordImageSize, 22);
  const auto bg = b.background->forward(style);
  const auto out = b.fusion->forward(fg, bg.features);
  EXPECT_EQ(out.sizes(), torch::IntArrayRef({1, 3, 64, 256}));
  EXPECT_LE(out.abs().max().item<float>(), 1.0f);
  {
    torch::NoGradGuard guard;
    std::vector<torch::Tensor> zeros;
    for (const auto& f : bg.features) zeros.push_back(torch::zeros_like(f));
    EXPECT_GT((b.fusion->forward(fg, zeros) - out).abs().max().item<float>(), 0.0f);
  }
  out.mean().backward();
  double total = 0.0;
  for (const auto& p : b.background->parameters()) {
    if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
  }
  EXPECT_GT(total, 0.0);
  std::vector<torch::Tensor> bad{bg.features[1], bg.features[1], bg.features[2]};
  EXPECT_THROW(b.fusion->forward(fg, bad), ShapeError);
}

TEST(PatchDiscriminator, PatchLogitsAndAsymmetry) {
  nets::NetBundle b = nets::make_bundle(small_config(), 9);
  torch::NoGradGuard guard;
  const auto x = random_images(2, kWordImageSize, 31), y = random_images(2, kWordImageSize, 32);
  const auto d = b.disc_background->forward(x, y);
  EXPECT_EQ(d.sizes(), torch::IntArrayRef({2, 1, 4, 16}));
  EXPECT_GT((d - b.disc_background->forward(y, x)).abs().max().item<float>(), 0.0f);
  EXPECT_EQ(b.disc_fusion->forward(x.narrow(0, 0, 1), y.narrow(0, 0, 1)).sizes(),
            torch::IntArrayRef({1, 1, 4, 16}));
}

TEST(InitWeights, NormalStatisticsAndDeterminism) {
  nets::NetBundle a = nets::make_bundle(NetConfig{}, 42);
  int checked = 0;
  for (const auto& [name, p] : a.named_parameters()) {
    if (name.ends_with(".bias") || name.ends_with(".gamma")) {
      EXPECT_EQ(p.abs().max().item<double>(), 0.0) << name;
      continue;
    }
    const auto n = p.numel();
    if (n < 10000) continue;
    const double mean = p.mean().item<double>();
    const double sd = p.std().item<double>();
    EXPECT_LE(std::abs(mean), 3.0 * 0.01 / std::sqrt(static_cast<double>(n))) << name;
    EXPECT_NEAR(sd, 0.01, 0.05 * 0.01) << name;
    ++checked;
  }
  EXPECT_GT(checked, 20);

  nets::NetBundle b = nets::make_bundle(NetConfig{}, 42);
  nets::NetBundle c = nets::make_bundle(NetConfig{}, 43);
  const auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(torch::equal(pa[i].second, pb[i].second)) << pa[i].first;
    any_diff = any_diff || !torch::equal(pa[i].second, pc[i].second);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Networks, FiniteOutputsAcrossSeeds) {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    nets::NetBundle b = nets::make_bundle(small_config(2), seed);
    set_gates(b.swap, 0.5);
    torch::NoGradGuard guard;
    const auto s = random_images(1, kWordImageSize, seed), c = random_images(1, kWordImageSize, seed + 1000);
    const auto sw = b.swap->forward(s, c);
    const auto bg = b.background->forward(s);
    const auto t = b.fusion->forward(sw.foreground, bg.features);
    for (const auto& x : {sw.foreground, sw.fiducials, bg.image, t, b.disc_background->forward(bg.image, s),
                          b.disc_fusion->forward(t, c)}) {
      ASSERT_TRUE(torch::isfinite(x).all().item<bool>()) << "seed " << seed;
    }
  }
}

namespace {

// Central differences on a scalar probe for `count` randomly chosen parameter
// entries, compared with autodiff in float64.
void check_gradients(torch::nn::Module& module, const std::function<torch::Tensor()>& probe, int count,
                     uint64_t seed, const std::string& label) {
  auto params = module.named_parameters();
  for (auto& p : params) {
    if (p.value().grad().defined()) p.value().mutable_grad().zero_();
  }
  probe().backward();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value().requires_grad()) eligible.push_back(i);
  }
  // Instance norm rescales 0.01-sized weights by ~100x, so the step must stay
  // well below ReLU kink spacing.
  const double h = 1e-8;
  for (int trial = 0; trial < count; ++trial) {
    const auto& entry = params[eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)]];
    auto flat = entry.value().detach().view({-1});
    const auto idx = std::uniform_int_distribution<int64_t>(0, flat.numel() - 1)(rng);
    const double analytic = entry.value().grad().view({-1})[idx].item<double>();
    double numeric = 0.0;
    {
      torch::NoGradGuard guard;
      const double orig = flat[idx].item<double>();
      flat[idx] = orig + h;
      const double up = probe().item<double>();
      flat[idx] = orig - h;
      const double down = probe().item<double>();
      flat[idx] = orig;
      numeric = (up - down) / (2 * h);
    }
    // Floor at 1e-5: with h = 1e-8 the round-off in `numeric` is about 1e-8.
    const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-5});
    EXPECT_LT(std::abs(numeric - analytic) / scale, 1e-3)
        << label << " " << entry.key() << "[" << idx << "] numeric " << numeric << " analytic " << analytic;
  }
}

NetConfig gradcheck_config() {
  NetConfig c;
  c.width = 2;
  c.residual_blocks = 1;
  c.input = {16, 64};
  c.attention = AttentionMode::multi;
  c.use_cstn = false;  // the warp consumes a detached prediction
  return c;
}

}  // namespace

TEST(Networks, FiniteDifferenceGradients) {
  const NetConfig cfg = gradcheck_config();
  nets::NetBundle b = nets::make_bundle(cfg, 11);
  set_gates(b.swap, 0.3);
  b.to(torch::kFloat64);
  const auto s = random_images(2, cfg.input, 1, torch::kFloat64);
  const auto c = random_images(2, cfg.input, 2, torch::kFloat64);
  const auto fg = random_images(2, cfg.input, 3, torch::kFloat64);

  check_gradients(*b.swap, [&] {
    auto out = b.swap->forward(s, c);
    return out.foreground.mean() + out.fiducials.mean();
  }, 20, 1, "swap");
  check_gradients(*b.background, [&] { return b.background->forward(s).image.mean(); }, 20, 2, "background");
  const auto features = [&] {
    torch::NoGradGuard guard;
    return b.background->forward(s).features;
  }();
  check_gradients(*b.fusion, [&] { return b.fusion->forward(fg, features).mean(); }, 20, 4, "fusion");
  check_gradients(*b.disc_background, [&] { return b.disc_background->forward(fg, s).mean(); }, 20, 5, "d_b");
  check_gradients(*b.disc_fusion, [&] { return b.disc_fusion->forward(fg, c).mean(); }, 20, 6, "d_fuse");
}

TEST(Checkpoint, RoundTripReproducesOutputs) {
  swaptext::testing::ScratchDir dir("ckpt");
  NetConfig cfg = small_config();
  cfg.attention = AttentionMode::multi;
  cfg.use_dilated = false;
  nets::NetBundle b = nets::make_bundle(cfg, 12);
  set_gates(b.swap, 0.25);
  const auto path = dir / "model.pt";
  nets::save_checkpoint(path, b, 17);
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));

  auto loaded = nets::load_checkpoint(path);
  EXPECT_EQ(loaded.step, 17);
  EXPECT_EQ(loaded.bundle.config, cfg);
  const auto names_a = b.named_parameters(), names_b = loaded.bundle.named_parameters();
  ASSERT_EQ(names_a.size(), names_b.size());
  for (std::size_t i = 0; i < names_a.size(); ++i) EXPECT_EQ(names_a[i].first, names_b[i].first);

  torch::NoGradGuard guard;
  const auto s = random_images(1, kWordImageSize, 41), c = random_images(1, kWordImageSize, 42);
  const auto a = b.swap->forward(s, c);
  const auto r = loaded.bundle.swap->forward(s, c);
  EXPECT_LE((a.foreground - r.foreground).abs().max().item<float>(), 1e-6f);
  EXPECT_LE((b.background->forward(s).image - loaded.bundle.background->forward(s).image).abs().max().item<float>(),
            1e-6f);
  EXPECT_THROW(nets::load_checkpoint(dir / "missing.pt"), LoadError);
}

TEST(Vgg19Features, LoadsTorchvisionNamedWeights) {
  swaptext::testing::ScratchDir dir("vgg");
  nets::Vgg19Features vgg;
  c10::Dict<std::string, torch::Tensor> dict;
  torch::manual_seed(0);
  for (auto& [index, layer] : vgg->convs) {
    dict.insert("features." + std::to_string(index) + ".weight", torch::randn_like(layer->weight) * 0.05);
    dict.insert("features." + std::to_string(index) + ".bias", torch::zeros_like(layer->bias));
  }
  const auto bytes = torch::pickle_save(c10::IValue(dict));
  {
    std::ofstream out(dir / "vgg.pth", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  vgg->load_weights(dir / "vgg.pth");
  EXPECT_TRUE(torch::equal(vgg->convs[3].second->weight, dict.at("features.7.weight")));
  torch::NoGradGuard guard;
  const auto taps = vgg->forward(random_images(1));
  ASSERT_EQ(taps.size(), 5u);
  EXPECT_EQ(taps[0].sizes(), torch::IntArrayRef({1, 64, 64, 256}));
  EXPECT_EQ(taps[4].sizes(), torch::IntArrayRef({1, 512, 4, 16}));
  for (const auto& p : vgg->parameters()) EXPECT_FALSE(p.requires_grad());
  EXPECT_THROW(vgg->load_weights(dir / "nope.pth"), ConfigError);
}
