#pragma once

// Frozen semantic and geometric guidance computed once from the shadowed
// input. The reference provider is a deterministic hand-crafted stand-in for
// pretrained encoders; it keeps the shape and stride contracts so externally
// computed features can be loaded in its place.

#include <array>
#include <filesystem>
#include <string>

#include "deshadow/filters.hpp"
#include "deshadow/rtn.hpp"

namespace deshadow {

inline constexpr std::array<std::size_t, 4> kSemanticStrides{4, 8, 16, 32};
inline constexpr std::size_t kSpatialMultiple = 32;

inline void require_divisible(std::size_t H, std::size_t W, const char* what) {
  if (H == 0 || W == 0 || H % kSpatialMultiple || W % kSpatialMultiple) {
    throw ShapeError(std::string(what) + ": spatial size " + std::to_string(H) +
                     "x" + std::to_string(W) + " must be a multiple of " +
                     std::to_string(kSpatialMultiple) +
                     "; pad the image first");
  }
}

inline void require_rgb(const Tensor& x, const char* what) {
  if (x.rank() != 3 || x.dim(0) != 3) {
    throw ShapeError(std::string(what) + ": expected [3,H,W], got " +
                     shape_str(x.shape()));
  }
}

/// Four feature maps at strides 4, 8, 16 and 32. Each level stacks luminance,
/// |d/dx|, |d/dy| and 3x3 local variance of a Gaussian luminance pyramid,
/// repeated cyclically up to `channels`.
inline std::array<Tensor, 4> compute_semantic(const Tensor& x,
                                              std::size_t channels) {
  require_rgb(x, "compute_semantic");
  require_divisible(x.dim(1), x.dim(2), "compute_semantic");
  if (channels == 0) throw ShapeError("compute_semantic: zero channels");
  Tensor level = luminance(x);
  std::array<Tensor, 4> out;
  std::size_t stride = 1, slot = 0;
  while (slot < out.size()) {
    level = avg_pool2(gaussian_blur(level, 1.0));
    stride *= 2;
    if (stride != kSemanticStrides[slot]) continue;
    const auto [gx, gy] = gradient_magnitudes(level);
    const Tensor var = local_variance(level);
    const std::array<const Tensor*, 4> base{&level, &gx, &gy, &var};
    const std::size_t h = level.dim(1), w = level.dim(2);
    std::vector<double> data;
    data.reserve(channels * h * w);
    for (std::size_t c = 0; c < channels; ++c) {
      const auto& src = base[c % base.size()]->values();
      data.insert(data.end(), src.begin(), src.end());
    }
    out[slot++] = Tensor(Shape{channels, h, w}, std::move(data));
  }
  return out;
}

/// 1 - blurred luminance (sigma 2), min-max normalized to [0,1]. A constant
/// image maps to 0.5 everywhere.
inline Tensor compute_depth(const Tensor& x) {
  require_rgb(x, "compute_depth");
  Tensor blurred = gaussian_blur(luminance(x), 2.0);
  std::vector<double> d(blurred.values());
  for (double& v : d) v = 1.0 - v;
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  const double mn = *lo, mx = *hi;
  if (mx - mn <= 1e-12) {
    std::fill(d.begin(), d.end(), 0.5);
  } else {
    for (double& v : d) v = std::clamp((v - mn) / (mx - mn), 0.0, 1.0);
  }
  return Tensor(blurred.shape(), std::move(d));
}

/// n = normalize(-dz/du, -dz/dv, 1) with central differences in pixel units
/// (one-sided at the borders).
inline Tensor depth_to_normals(const Tensor& depth) {
  if (depth.rank() != 3 || depth.dim(0) != 1) {
    throw ShapeError("depth_to_normals: expected [1,H,W], got " +
                     shape_str(depth.shape()));
  }
  const std::size_t H = depth.dim(1), W = depth.dim(2), n = H * W;
  const auto& z = depth.values();
  std::vector<double> out(3 * n);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t xl = x > 0 ? x - 1 : x, xr = x + 1 < W ? x + 1 : x;
      const std::size_t yu = y > 0 ? y - 1 : y, yd = y + 1 < H ? y + 1 : y;
      const double du = xr > xl ? (z[y * W + xr] - z[y * W + xl]) /
                                      static_cast<double>(xr - xl)
                                : 0.0;
      const double dv = yd > yu ? (z[yd * W + x] - z[yu * W + x]) /
                                      static_cast<double>(yd - yu)
                                : 0.0;
      const double len = std::sqrt(du * du + dv * dv + 1.0);
      const std::size_t i = y * W + x;
      out[i] = -du / len;
      out[n + i] = -dv / len;
      out[2 * n + i] = 1.0 / len;
    }
  }
  return Tensor(Shape{3, H, W}, std::move(out));
}

/// Point map (u*z, v*z, z) with u, v the pixel-centre coordinates in [-1,1].
inline Tensor depth_to_points(const Tensor& depth) {
  if (depth.rank() != 3 || depth.dim(0) != 1) {
    throw ShapeError("depth_to_points: expected [1,H,W], got " +
                     shape_str(depth.shape()));
  }
  const std::size_t H = depth.dim(1), W = depth.dim(2), n = H * W;
  const auto& z = depth.values();
  std::vector<double> out(3 * n);
  for (std::size_t y = 0; y < H; ++y) {
    const double v = (2.0 * static_cast<double>(y) + 1.0) / static_cast<double>(H) - 1.0;
    for (std::size_t x = 0; x < W; ++x) {
      const double u = (2.0 * static_cast<double>(x) + 1.0) / static_cast<double>(W) - 1.0;
      const std::size_t i = y * W + x;
      out[i] = u * z[i];
      out[n + i] = v * z[i];
      out[2 * n + i] = z[i];
    }
  }
  return Tensor(Shape{3, H, W}, std::move(out));
}

/// Immutable per-image guidance. None of its tensors participate in a graph.
class GuidanceBundle {
 public:
  GuidanceBundle(std::array<Tensor, 4> semantic, Tensor depth, Tensor normals,
                 Tensor points)
      : semantic_(std::move(semantic)),
        depth_(std::move(depth)),
        normals_(std::move(normals)),
        points_(std::move(points)) {
    validate();
  }

  const std::array<Tensor, 4>& semantic() const { return semantic_; }
  const Tensor& depth() const { return depth_; }
  const Tensor& normals() const { return normals_; }
  const Tensor& points() const { return points_; }
  std::size_t height() const { return depth_.dim(1); }
  std::size_t width() const { return depth_.dim(2); }
  std::size_t semantic_channels() const { return semantic_[0].dim(0); }

  std::uint64_t fingerprint() const {
    std::uint64_t h = deshadow::fingerprint(depth_);
    for (const auto& s : semantic_) h = deshadow::fingerprint(s, h);
    h = deshadow::fingerprint(normals_, h);
    return deshadow::fingerprint(points_, h);
  }

 private:
  void validate() const {
    if (depth_.rank() != 3 || depth_.dim(0) != 1) {
      throw ShapeError("guidance depth must be [1,H,W], got " +
                       shape_str(depth_.shape()));
    }
    const std::size_t H = height(), W = width();
    require_divisible(H, W, "guidance");
    if (normals_.shape() != Shape{3, H, W} || points_.shape() != Shape{3, H, W}) {
      throw ShapeError("guidance normals/points must be [3," + std::to_string(H) +
                       "," + std::to_string(W) + "], got " +
                       shape_str(normals_.shape()) + " and " +
                       shape_str(points_.shape()));
    }
    const std::size_t C = semantic_[0].rank() == 3 ? semantic_[0].dim(0) : 0;
    for (std::size_t i = 0; i < semantic_.size(); ++i) {
      const std::size_t s = kSemanticStrides[i];
      const Shape want{C, H / s, W / s};
      if (semantic_[i].shape() != want || C == 0) {
        throw ShapeError("guidance semantic level " + std::to_string(i) +
                         " must be " + shape_str(want) + ", got " +
                         shape_str(semantic_[i].shape()));
      }
    }
    for (const Tensor* t : {&depth_, &normals_, &points_, &semantic_[0],
                            &semantic_[1], &semantic_[2], &semantic_[3]}) {
      if (t->requires_grad()) throw Error("guidance tensors must be frozen");
    }
  }

  std::array<Tensor, 4> semantic_;
  Tensor depth_, normals_, points_;
};

class GuidanceProvider {
 public:
  virtual ~GuidanceProvider() = default;
  virtual GuidanceBundle compute(const Tensor& x) const = 0;
};

/// Deterministic hand-crafted guidance.
class ReferenceProvider final : public GuidanceProvider {
 public:
  explicit ReferenceProvider(std::size_t semantic_channels = 8)
      : channels_(semantic_channels) {}

  GuidanceBundle compute(const Tensor& x) const override {
    require_rgb(x, "ReferenceProvider");
    require_divisible(x.dim(1), x.dim(2), "ReferenceProvider");
    Tensor depth = compute_depth(x);
    Tensor normals = depth_to_normals(depth);
    Tensor points = depth_to_points(depth);
    return GuidanceBundle(compute_semantic(x, channels_), std::move(depth),
                          std::move(normals), std::move(points));
  }

  std::size_t channels() const { return channels_; }

 private:
  std::size_t channels_;
};

/// Writes sem_0..sem_3, depth, normals and points as RTN1 files into `dir`.
inline void save_bundle(const std::filesystem::path& dir,
                        const GuidanceBundle& g) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < 4; ++i) {
    save_rtn(dir / ("sem_" + std::to_string(i) + ".rtn"), g.semantic()[i]);
  }
  save_rtn(dir / "depth.rtn", g.depth());
  save_rtn(dir / "normals.rtn", g.normals());
  save_rtn(dir / "points.rtn", g.points());
}

inline GuidanceBundle load_bundle(const std::filesystem::path& dir) {
  std::array<Tensor, 4> sem;
  for (std::size_t i = 0; i < 4; ++i) {
    sem[i] = load_rtn(dir / ("sem_" + std::to_string(i) + ".rtn"));
  }
  return GuidanceBundle(std::move(sem), load_rtn(dir / "depth.rtn"),
                        load_rtn(dir / "normals.rtn"),
                        load_rtn(dir / "points.rtn"));
}

/// Serves externally precomputed bundles stored as <root>/<image id>/.
class PrecomputedProvider final : public GuidanceProvider {
 public:
  PrecomputedProvider(std::filesystem::path root, std::string image_id)
      : dir_(std::move(root) / std::move(image_id)) {}

  GuidanceBundle compute(const Tensor& x) const override {
    require_rgb(x, "PrecomputedProvider");
    GuidanceBundle g = load_bundle(dir_);
    if (g.height() != x.dim(1) || g.width() != x.dim(2)) {
      throw ShapeError("precomputed guidance in " + dir_.string() + " is " +
                       std::to_string(g.height()) + "x" +
                       std::to_string(g.width()) + " but the image is " +
                       shape_str(x.shape()));
    }
    return g;
  }

 private:
  std::filesystem::path dir_;
};

}  // namespace deshadow
