#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"

using namespace deshadow;

namespace {

Tensor random_image(std::uint64_t seed, std::size_t H, std::size_t W) {
  Rng rng(seed);
  return oracle::random_tensor(rng, {3, H, W}, 0.0, 1.0);
}

}  // namespace

TEST(Semantic, LevelShapes) {
  const auto s = compute_semantic(random_image(1, 64, 64), 8);
  EXPECT_EQ(s[0].shape(), (Shape{8, 16, 16}));
  EXPECT_EQ(s[1].shape(), (Shape{8, 8, 8}));
  EXPECT_EQ(s[2].shape(), (Shape{8, 4, 4}));
  EXPECT_EQ(s[3].shape(), (Shape{8, 2, 2}));
}

TEST(Semantic, ConstantInputHasZeroGradientChannels) {
  const auto s = compute_semantic(Tensor::full({3, 64, 64}, 0.4), 8);
  for (const Tensor& level : s) {
    const std::size_t n = level.dim(1) * level.dim(2);
    for (std::size_t c = 0; c < level.dim(0); ++c) {
      if (c % 4 != 1 && c % 4 != 2) continue;  // gradient-magnitude channels
      for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(level[c * n + i], 0.0);
    }
  }
}

TEST(Semantic, IndivisibleSizeAsksToPad) {
  try {
    compute_semantic(Tensor::zeros({3, 48, 64}), 8);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos) << e.what();
  }
}

TEST(Provider, PureAcrossRepeatedCalls) {
  const ReferenceProvider p(8);
  const Tensor x = random_image(2, 32, 64);
  const std::uint64_t first = p.compute(x).fingerprint();
  for (int i = 0; i < 100; ++i) ASSERT_EQ(p.compute(x).fingerprint(), first);
}

TEST(Depth, ConstantImageIsHalf) {
  const Tensor d = compute_depth(Tensor::full({3, 32, 32}, 0.8));
  for (double v : d.data()) EXPECT_EQ(v, 0.5);
}

TEST(Depth, RangeWithinUnitInterval) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor d = compute_depth(random_image(s, 32, 32));
    double lo = 1, hi = 0;
    for (double v : d.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    EXPECT_GE(lo, 0.0);
    EXPECT_LE(hi, 1.0);
    EXPECT_EQ(lo, 0.0);
    EXPECT_EQ(hi, 1.0);
  }
}

TEST(Depth, DarkSideIsDeeperOnStepImage) {
  std::vector<double> v(3 * 16);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) v[(c * 4 + y) * 4 + x] = x < 2 ? 0.1 : 0.9;
  const Tensor d = compute_depth(Tensor(Shape{3, 4, 4}, v));
  // 1 - blur(luminance) is monotone decreasing across the step; after the
  // min-max stretch the outer columns sit at exactly 1 and 0.
  for (std::size_t y = 0; y < 4; ++y) {
    EXPECT_EQ(d[y * 4 + 0], 1.0);
    EXPECT_GT(d[y * 4 + 1], d[y * 4 + 2]);
    EXPECT_EQ(d[y * 4 + 3], 0.0);
  }
}

TEST(Normals, ConstantDepthPointsUp) {
  const Tensor n = depth_to_normals(Tensor::full({1, 8, 8}, 0.3));
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_EQ(n[i], 0.0);
    EXPECT_EQ(n[64 + i], 0.0);
    EXPECT_EQ(n[128 + i], 1.0);
  }
}

TEST(Normals, PlaneHasAnalyticNormal) {
  const std::size_t W = 16, H = 8;
  std::vector<double> z(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) z[y * W + x] = static_cast<double>(x) / W;
  const Tensor n = depth_to_normals(Tensor(Shape{1, H, W}, z));
  const double inv = 1.0 / W, want = -inv / std::sqrt(inv * inv + 1.0);
  for (std::size_t i = 0; i < H * W; ++i) {
    EXPECT_NEAR(n[i], want, 1e-15);
    EXPECT_NEAR(n[H * W + i], 0.0, 1e-15);
  }
}

TEST(Normals, UnitNormForRandomDepth) {
  Rng rng(6);
  const Tensor n = depth_to_normals(oracle::random_tensor(rng, {1, 12, 10}, 0.0, 1.0));
  const std::size_t m = 120;
  for (std::size_t i = 0; i < m; ++i) {
    const double len = std::sqrt(n[i] * n[i] + n[m + i] * n[m + i] + n[2 * m + i] * n[2 * m + i]);
    EXPECT_NEAR(len, 1.0, 1e-9);
  }
}

TEST(Points, UnitDepthGivesCoordinateGrid) {
  const std::size_t H = 4, W = 8;
  const Tensor p = depth_to_points(Tensor::full({1, H, W}, 1.0));
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      EXPECT_DOUBLE_EQ(p[y * W + x], (2.0 * x + 1.0) / W - 1.0);
      EXPECT_DOUBLE_EQ(p[H * W + y * W + x], (2.0 * y + 1.0) / H - 1.0);
      EXPECT_EQ(p[2 * H * W + y * W + x], 1.0);
    }
  }
}

TEST(Points, ZeroDepthAndCentre) {
  const Tensor flat = depth_to_points(Tensor::zeros({1, 5, 5}));
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  const Tensor p = depth_to_points(Tensor::full({1, 5, 5}, 0.7));
  EXPECT_EQ(p[12], 0.0);
  EXPECT_EQ(p[25 + 12], 0.0);
  EXPECT_EQ(p[50 + 12], 0.7);
}

TEST(Bundle, RejectsGraphTensors) {
  const GuidanceBundle g = ReferenceProvider(4).compute(random_image(3, 32, 32));
  Tensor depth = g.depth().clone();
  depth.set_requires_grad();
  EXPECT_THROW(GuidanceBundle(g.semantic(), depth, g.normals(), g.points()), Error);
  EXPECT_THROW(GuidanceBundle(g.semantic(), Tensor::zeros({1, 16, 32}), g.normals(), g.points()),
               ShapeError);
}

TEST(Bundle, PrecomputedRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "deshadow_bundle_test";
  std::filesystem::remove_all(dir);
  const Tensor x = random_image(4, 64, 32);
  const GuidanceBundle g = ReferenceProvider(8).compute(x);
  save_bundle(dir / "img7", g);
  for (const char* f : {"sem_0.rtn", "sem_3.rtn", "depth.rtn", "normals.rtn", "points.rtn"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / "img7" / f)) << f;
  }
  const PrecomputedProvider pre(dir, "img7");
  EXPECT_EQ(pre.compute(x).fingerprint(), g.fingerprint());
  EXPECT_THROW(pre.compute(random_image(4, 32, 32)), ShapeError);
  EXPECT_THROW(PrecomputedProvider(dir, "missing").compute(x), IoError);
  std::filesystem::remove_all(dir);
}
