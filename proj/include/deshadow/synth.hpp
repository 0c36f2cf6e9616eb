#pragma once

// Synthetic paired shadow data. A clean scene is built from layered colour
// gradients and textured rectangles/ellipses; a shadow field made of soft
// random polygons attenuates it. In misaligned mode the clean target is
// shifted by a sub-pixel offset, emulating approximately aligned pairs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "deshadow/filters.hpp"
#include "deshadow/guidance.hpp"
#include "deshadow/parallel.hpp"
#include "deshadow/random.hpp"

namespace deshadow {

struct ScenePair {
  Tensor clean;         // [3,H,W] target
  Tensor shadowed;      // [3,H,W] input
  Tensor shadow_field;  // [1,H,W] attenuation in (0,1]
  std::array<double, 2> misalignment{0.0, 0.0};  // (dx, dy) applied to clean
};

struct SceneOptions {
  int shadows = -1;  // number of shadow polygons; -1 draws 1..3
  double attenuation_lo = 0.2;
  double attenuation_hi = 0.8;
  bool penumbra = true;  // Gaussian soft edge plus content blur in the band
};

namespace detail {

inline bool inside_polygon(const std::vector<std::array<double, 2>>& poly,
                           double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) &&
        x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) {
      in = !in;
    }
  }
  return in;
}

inline Tensor render_clean(Rng& rng, std::size_t H, std::size_t W) {
  const std::size_t n = H * W;
  std::vector<double> img(3 * n);
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cx = rng.uniform(), cy = rng.uniform();
  std::array<double, 3> base, slope, radial;
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.35, 0.7);
    slope[c] = rng.uniform(-0.25, 0.25);
    radial[c] = rng.uniform(-0.15, 0.15);
  }
  for (std::size_t y = 0; y < H; ++y) {
    const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
      const double t = (u - 0.5) * ct + (v - 0.5) * st;
      const double r = std::hypot(u - cx, v - cy);
      for (int c = 0; c < 3; ++c) {
        img[c * n + y * W + x] = base[c] + slope[c] * t + radial[c] * r;
      }
    }
  }
  const auto shapes = rng.integer(4, 8);
  for (std::int64_t s = 0; s < shapes; ++s) {
    const bool ellipse = rng.uniform() < 0.5;
    const double sx = rng.uniform(0.0, 1.0), sy = rng.uniform(0.0, 1.0);
    const double hw = rng.uniform(0.06, 0.22), hh = rng.uniform(0.06, 0.22);
    std::array<double, 3> color;
    for (double& c : color) c = rng.uniform(0.1, 0.95);
    const double freq = rng.uniform(6.0, 30.0);
    const double phi = rng.uniform(0.0, std::numbers::pi);
    const double amp = rng.uniform(0.0, 0.12);
    for (std::size_t y = 0; y < H; ++y) {
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
      for (std::size_t x = 0; x < W; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
        const double du = (u - sx) / hw, dv = (v - sy) / hh;
        const bool in = ellipse ? du * du + dv * dv <= 1.0
                                : std::abs(du) <= 1.0 && std::abs(dv) <= 1.0;
        if (!in) continue;
        const double tex =
            1.0 + amp * std::sin(freq * (u * std::cos(phi) + v * std::sin(phi)));
        for (int c = 0; c < 3; ++c) img[c * n + y * W + x] = color[c] * tex;
      }
    }
  }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  return Tensor(Shape{3, H, W}, std::move(img));
}

// Bilinear sample of every channel shifted by (dx, dy), clamping at edges.
inline Tensor shift_bilinear(const Tensor& img, double dx, double dy) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const auto& v = img.values();
  std::vector<double> out(v.size());
  auto at = [&](std::size_t c, long y, long x) {
    y = std::clamp(y, 0L, static_cast<long>(H) - 1);
    x = std::clamp(x, 0L, static_cast<long>(W) - 1);
    return v[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)];
  };
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      const double sy = static_cast<double>(y) - dy;
      const long y0 = static_cast<long>(std::floor(sy));
      const double fy = sy - static_cast<double>(y0);
      for (std::size_t x = 0; x < W; ++x) {
        const double sx = static_cast<double>(x) - dx;
        const long x0 = static_cast<long>(std::floor(sx));
        const double fx = sx - static_cast<double>(x0);
        const double top = at(c, y0, x0) * (1 - fx) + at(c, y0, x0 + 1) * fx;
        const double bot = at(c, y0 + 1, x0) * (1 - fx) + at(c, y0 + 1, x0 + 1) * fx;
        out[(c * H + y) * W + x] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return Tensor(img.shape(), std::move(out));
}

}  // namespace detail

inline ScenePair generate_scene(std::uint64_t seed, std::size_t H, std::size_t W,
                                double misalign_px,
                                const SceneOptions& opts = {}) {
  require_divisible(H, W, "generate_scene");
  Rng rng(seed);
  ScenePair pair;
  const Tensor clean = detail::render_clean(rng, H, W);
  const std::size_t n = H * W;

  const auto shadows = opts.shadows >= 0 ? opts.shadows : rng.integer(1, 3);
  std::vector<double> mask(n, 0.0);
  for (std::int64_t s = 0; s < shadows; ++s) {
    const double cx = rng.uniform(0.1, 0.9) * static_cast<double>(W);
    const double cy = rng.uniform(0.1, 0.9) * static_cast<double>(H);
    const double radius =
        rng.uniform(0.15, 0.4) * static_cast<double>(std::min(H, W));
    const auto verts = rng.integer(3, 6);
    std::vector<double> angles(static_cast<std::size_t>(verts));
    for (double& a : angles) a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::sort(angles.begin(), angles.end());
    std::vector<std::array<double, 2>> poly;
    for (double a : angles) {
      const double r = radius * rng.uniform(0.6, 1.0);
      poly.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        if (detail::inside_polygon(poly, static_cast<double>(x) + 0.5,
                                   static_cast<double>(y) + 0.5)) {
          mask[y * W + x] = 1.0;
        }
      }
    }
  }
  const double attenuation = rng.uniform(opts.attenuation_lo, opts.attenuation_hi);
  const double penumbra_sigma = rng.uniform(1.0, 3.0);
  Tensor soft(Shape{1, H, W}, mask);
  if (opts.penumbra) soft = gaussian_blur(soft, penumbra_sigma);

  std::vector<double> field(n);
  for (std::size_t i = 0; i < n; ++i) {
    field[i] = 1.0 - (1.0 - attenuation) * soft[i];
  }
  pair.shadow_field = Tensor(Shape{1, H, W}, field);

  std::vector<double> content(clean.values());
  if (opts.penumbra && shadows > 0) {
    const Tensor blurred = gaussian_blur(clean, 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        const double m = soft[i];
        const double band = 4.0 * m * (1.0 - m);
        double& v = content[c * n + i];
        v += band * (blurred[c * n + i] - v);
      }
    }
  }
  std::vector<double> shadowed(3 * n);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      shadowed[c * n + i] = std::clamp(content[c * n + i] * field[i], 0.0, 1.0);
    }
  }
  pair.shadowed = Tensor(Shape{3, H, W}, std::move(shadowed));

  if (misalign_px > 0.0) {
    const double dx = rng.uniform(-misalign_px, misalign_px);
    const double dy = rng.uniform(-misalign_px, misalign_px);
    pair.misalignment = {dx, dy};
    pair.clean = detail::shift_bilinear(clean, dx, dy);
  } else {
    pair.clean = clean;
  }
  return pair;
}

/// Same window [y0, y0+size) x [x0, x0+size) of every map in the pair.
inline ScenePair crop_pair(const ScenePair& p, std::size_t y0, std::size_t x0,
                           std::size_t size) {
  NoGradGuard no_grad;
  ScenePair out;
  out.clean = crop(p.clean, y0, x0, size, size);
  out.shadowed = crop(p.shadowed, y0, x0, size, size);
  out.shadow_field = crop(p.shadow_field, y0, x0, size, size);
  out.misalignment = p.misalignment;
  return out;
}

inline ScenePair random_crop(const ScenePair& p, std::size_t size,
                             std::uint64_t seed) {
  const std::size_t H = p.clean.dim(1), W = p.clean.dim(2);
  if (size == 0 || size > H || size > W) {
    throw ShapeError("random_crop: crop size " + std::to_string(size) +
                     " does not fit a " + std::to_string(H) + "x" +
                     std::to_string(W) + " scene");
  }
  Rng rng(seed);
  const auto y0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(H - size)));
  const auto x0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(W - size)));
  return crop_pair(p, y0, x0, size);
}

struct DataSpec {
  std::uint64_t seed = 1;
  std::size_t train = 200;
  std::size_t val = 40;
  std::size_t scene_size = 128;
  double misalign_px = 0.0;
  SceneOptions scene;
};

struct Dataset {
  std::vector<ScenePair> train;
  std::vector<ScenePair> val;
};

inline std::vector<ScenePair> generate_scenes(std::uint64_t master, std::size_t count,
                                              std::size_t size, double misalign,
                                              const SceneOptions& opts = {}) {
  std::vector<ScenePair> out(count);
  parallel_for(count, [&](std::size_t i) {
    out[i] = generate_scene(mix_seed(master, i), size, size, misalign, opts);
  });
  return out;
}

/// Train and validation splits seeded independently from one master seed.
/// Validation pairs are always aligned.
inline Dataset make_dataset(const DataSpec& spec) {
  Dataset d;
  d.train = generate_scenes(mix_seed(spec.seed, 1), spec.train, spec.scene_size,
                            spec.misalign_px, spec.scene);
  d.val = generate_scenes(mix_seed(spec.seed, 2), spec.val, spec.scene_size, 0.0,
                          spec.scene);
  return d;
}

}  // namespace deshadow
