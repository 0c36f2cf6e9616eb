#pragma once

// Non-differentiable image filters used to build guidance and synthetic data.
// All filters replicate edge pixels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "deshadow/image_ops.hpp"

namespace deshadow {

/// Rec. 601 luma of a [3,H,W] image -> [1,H,W].
inline Tensor luminance(const Tensor& rgb) {
  require_chw(rgb, "luminance");
  if (rgb.dim(0) != 3) {
    throw ShapeError("luminance: expected 3 channels, got " +
                     shape_str(rgb.shape()));
  }
  const std::size_t H = rgb.dim(1), W = rgb.dim(2), n = H * W;
  const auto& v = rgb.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = 0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i];
  }
  return Tensor(Shape{1, H, W}, std::move(out));
}

/// Normalized Gaussian taps covering +-ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[i + radius];
  }
  for (double& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur of every channel.
inline Tensor gaussian_blur(const Tensor& img, double sigma) {
  require_chw(img, "gaussian_blur");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const auto k = gaussian_kernel(sigma);
  const long r = static_cast<long>(k.size() / 2);
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  const auto& src = img.values();
  std::vector<double> tmp(src.size()), out(src.size());
  for (std::size_t c = 0; c < C; ++c) {
    const double* s = src.data() + c * H * W;
    double* t = tmp.data() + c * H * W;
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long i = -r; i <= r; ++i) {
          acc += k[i + r] * s[y * w + std::clamp(x + i, 0L, w - 1)];
        }
        t[y * w + x] = acc;
      }
    }
    double* o = out.data() + c * H * W;
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long i = -r; i <= r; ++i) {
          acc += k[i + r] * t[std::clamp(y + i, 0L, h - 1) * w + x];
        }
        o[y * w + x] = acc;
      }
    }
  }
  return Tensor(img.shape(), std::move(out));
}

/// Central-difference derivative magnitudes |d/dx| and |d/dy| (one-sided at
/// the borders).
inline std::pair<Tensor, Tensor> gradient_magnitudes(const Tensor& img) {
  require_chw(img, "gradient_magnitudes");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const auto& v = img.values();
  std::vector<double> gx(v.size()), gy(v.size());
  for (std::size_t c = 0; c < C; ++c) {
    const double* s = v.data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t xl = x > 0 ? x - 1 : x, xr = x + 1 < W ? x + 1 : x;
        const std::size_t yu = y > 0 ? y - 1 : y, yd = y + 1 < H ? y + 1 : y;
        const double dx = xr > xl ? (s[y * W + xr] - s[y * W + xl]) /
                                        static_cast<double>(xr - xl)
                                  : 0.0;
        const double dy = yd > yu ? (s[yd * W + x] - s[yu * W + x]) /
                                        static_cast<double>(yd - yu)
                                  : 0.0;
        gx[c * H * W + y * W + x] = std::abs(dx);
        gy[c * H * W + y * W + x] = std::abs(dy);
      }
    }
  }
  return {Tensor(img.shape(), std::move(gx)), Tensor(img.shape(), std::move(gy))};
}

/// Variance over the 3x3 neighbourhood of each pixel.
inline Tensor local_variance(const Tensor& img) {
  require_chw(img, "local_variance");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  const auto& v = img.values();
  std::vector<double> out(v.size());
  for (std::size_t c = 0; c < C; ++c) {
    const double* s = v.data() + c * H * W;
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        double m = 0.0, m2 = 0.0;
        for (long dy = -1; dy <= 1; ++dy) {
          for (long dx = -1; dx <= 1; ++dx) {
            const double p = s[std::clamp(y + dy, 0L, h - 1) * w +
                               std::clamp(x + dx, 0L, w - 1)];
            m += p;
            m2 += p * p;
          }
        }
        m /= 9.0;
        out[c * H * W + y * W + x] = std::max(0.0, m2 / 9.0 - m * m);
      }
    }
  }
  return Tensor(img.shape(), std::move(out));
}

/// FNV-1a over shape and raw value bytes.
inline std::uint64_t fingerprint(const Tensor& t,
                                 std::uint64_t h = 1469598103934665603ull) {
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (std::size_t e : t.shape()) mix(&e, sizeof e);
  for (double v : t.data()) mix(&v, sizeof v);
  return h;
}

}  // namespace deshadow
