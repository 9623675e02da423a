#include <fstream>

#include <gtest/gtest.h>

#include "metric_oracles.hpp"
#include "support.hpp"
#include "swaptext/metrics.hpp"

using namespace swaptext;
using namespace swaptext::metrics;
using swaptext::testing::ScratchDir;

namespace {

torch::Tensor random_image(torch::Generator& g, int64_t h = 32, int64_t w = 48) {
  return torch::rand({3, h, w}, g, torch::kFloat64);
}

torch::Generator seeded(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

}  // namespace

TEST(Mse, ClosedFormsAndNaiveOracle) {
  const auto a = torch::zeros({3, 16, 16}, torch::kFloat64);
  EXPECT_EQ(mse(a, a), 0.0);
  EXPECT_NEAR(mse(a, a + 0.1), 0.01, 1e-15);
  auto g = seeded(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_image(g, 12, 17), y = random_image(g, 12, 17);
    EXPECT_NEAR(mse(x, y), swaptext::testing::naive_mse(x, y), 1e-10);
    EXPECT_EQ(mse(x, y), mse(y, x));
  }
  EXPECT_THROW(mse(a, torch::zeros({3, 16, 15})), ShapeError);
}

TEST(Psnr, ClosedFormsCapAndMonotonicity) {
  const auto a = torch::full({3, 20, 20}, 0.3, torch::kFloat64);
  EXPECT_NEAR(psnr(a, a + 0.1), 20.0, 1e-12);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  EXPECT_EQ(psnr(torch::zeros({1, 4, 4}), torch::ones({1, 4, 4})), 0.0);

  auto g = seeded(11);
  const auto noise = torch::randn({3, 20, 20}, g, torch::kFloat64);
  double previous_mse = 0.0, previous_psnr = kPsnrCap + 1.0;
  for (double sigma = 0.01; sigma < 0.5; sigma *= 1.5) {
    const auto b = a + sigma * noise;
    const double m = mse(a, b), p = psnr(a, b);
    EXPECT_GT(m, previous_mse);
    EXPECT_LT(p, previous_psnr);
    previous_mse = m;
    previous_psnr = p;
  }
}

TEST(Ssim, IdentityAndSymmetry) {
  auto g = seeded(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_image(g), y = random_image(g);
    EXPECT_NEAR(ssim(x, x), 1.0, 1e-9);
    EXPECT_NEAR(ssim(x, y), ssim(y, x), 1e-9);
    const double s = ssim(x, y);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
    EXPECT_GT(ssim(x, x + 1e-4), 0.9999);
  }
}

TEST(Ssim, MatchesNaiveWindowOracleOnRandomPairs) {
  auto g = seeded(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_image(g, 16 + trial % 5, 20 + trial);
    const auto y = (0.5 * x + 0.5 * random_image(g, x.size(1), x.size(2))).clamp(0.0, 1.0);
    const double expected = swaptext::testing::naive_ssim(swaptext::testing::to_plane(to_gray(x)),
                                                          swaptext::testing::to_plane(to_gray(y)));
    EXPECT_NEAR(ssim(x, y), expected, 1e-6) << "pair " << trial;
  }
}

// Values frozen from scikit-image 0.25 (gaussian_weights, sigma 1.5,
// population covariance, data_range 1); see tests/ssim_reference.py.
TEST(Ssim, MatchesScikitImageValues) {
  struct Case {
    uint64_t seed;
    int64_t h, w;
    double value;
  };
  const Case cases[] = {{1, 16, 20, 0.78827693056457393},
                        {2, 24, 24, 0.78117431826922867},
                        {3, 11, 30, 0.73776493965225654},
                        {4, 40, 13, 0.8005520637244723}};
  for (const auto& c : cases) {
    const auto [a, b] = swaptext::testing::lcg_pair(c.seed, c.h, c.w);
    EXPECT_NEAR(ssim(a, b), c.value, 1e-9) << "seed " << c.seed;
  }
}

TEST(Ssim, InvertedCheckerboardIsNegative) {
  const auto i = torch::arange(32).reshape({32, 1}), j = torch::arange(32).reshape({1, 32});
  const auto board = ((i / 4 + j / 4) % 2).to(torch::kFloat64);
  EXPECT_LT(ssim(board, 1.0 - board), 0.0);
}

TEST(Ssim, RejectsImagesSmallerThanTheWindow) {
  const auto small = torch::zeros({3, 10, 40});
  EXPECT_THROW(ssim(small, small), InvalidInputError);
  EXPECT_THROW(ssim(torch::zeros({2, 20, 20}), torch::zeros({2, 20, 20})), ShapeError);
}

class Evaluate : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new ScratchDir("metrics");
    data::ForgeConfig cfg{swaptext::testing::make_font_dir(*dir_ / "fonts", 2),
                          swaptext::testing::make_background_dir(*dir_ / "bgs", 2), *dir_ / "data", 3, 8};
    data::forge_dataset(cfg);
    cfg.out_dir = *dir_ / "empty";
    cfg.count = 0;
    data::forge_dataset(cfg);
  }
  static void TearDownTestSuite() { delete dir_; }
  static ScratchDir* dir_;
};
ScratchDir* Evaluate::dir_ = nullptr;

TEST_F(Evaluate, PerfectStubScoresCapAndAggregatesAreMeans) {
  const auto ds = data::Dataset::open(*dir_ / "data");
  const auto perfect = evaluate(ds, [](const data::PairedSample& s) { return s.target; }, "perfect", "0");
  ASSERT_EQ(perfect.count(), 3u);
  for (const auto& r : perfect.rows) {
    EXPECT_EQ(r.l2, 0.0);
    EXPECT_EQ(r.psnr, kPsnrCap);
    EXPECT_NEAR(r.ssim, 1.0, 1e-9);
  }

  const auto gray = evaluate(ds, [](const data::PairedSample& s) { return torch::zeros_like(s.target); }, "gray", "0");
  double l2 = 0, p = 0, s = 0;
  for (const auto& r : gray.rows) {
    l2 += r.l2;
    p += r.psnr;
    s += r.ssim;
    EXPECT_GE(r.l2, 0.0);
    EXPECT_GE(r.ssim, -1.0);
    EXPECT_LE(r.ssim, 1.0);
  }
  EXPECT_NEAR(gray.l2, l2 / 3, 1e-9);
  EXPECT_NEAR(gray.psnr, p / 3, 1e-9);
  EXPECT_NEAR(gray.ssim, s / 3, 1e-9);

  const auto back = EvalReport::from_json(nlohmann::json::parse(gray.to_json().dump()));
  EXPECT_EQ(back.to_json(), gray.to_json());
  const auto table = perfect.table();
  EXPECT_NE(table.find("Method"), std::string::npos);
  EXPECT_NE(table.find("0.0000"), std::string::npos);
  EXPECT_NE(table.find("99.00"), std::string::npos);
  EXPECT_NE(table.find("1.0000"), std::string::npos);
}

TEST_F(Evaluate, EmptyDatasetIsAConfigError) {
  const auto ds = data::Dataset::open(*dir_ / "empty");
  EXPECT_THROW(evaluate(ds, [](const data::PairedSample& s) { return s.target; }, "x", "0"), ConfigError);
}

TEST_F(Evaluate, BundleEvaluationAndDigestTracksAblations) {
  nets::NetConfig config;
  config.width = 2;
  config.residual_blocks = 1;
  auto bundle = nets::make_bundle(config, 1);
  const auto ds = data::Dataset::open(*dir_ / "data");
  const auto report = evaluate(bundle, ds);
  EXPECT_EQ(report.count(), 3u);
  EXPECT_EQ(report.config_digest, config_digest(config));
  EXPECT_EQ(report.to_json().dump(), evaluate(bundle, ds).to_json().dump());

  for (auto change : std::vector<std::function<void(nets::NetConfig&)>>{
           [](nets::NetConfig& c) { c.use_cstn = false; }, [](nets::NetConfig& c) { c.use_dilated = false; },
           [](nets::NetConfig& c) { c.attention = nets::AttentionMode::multi; }}) {
    auto other = config;
    change(other);
    EXPECT_NE(config_digest(other), config_digest(config));
    EXPECT_NE(method_label(other), method_label(config));
  }
}
