#pragma once

// Differentiable operations on [C,H,W] feature maps.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "deshadow/ops.hpp"

namespace deshadow {

inline void require_chw(const Tensor& t, const char* op) {
  if (t.rank() != 3) {
    throw ShapeError(std::string(op) + ": expected [C,H,W], got " +
                     shape_str(t.shape()));
  }
}

/// Same-size cross-correlation with zero padding (k-1)/2.
/// input [C,H,W], kernel [F,C,k,k], bias [F] -> [F,H,W].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel,
                     const Tensor& bias) {
  require_chw(input, "conv2d");
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3) ||
      kernel.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: kernel must be [F,C,k,k] with odd k, got " +
                     shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: channel mismatch, input " +
                     shape_str(input.shape()) + " vs kernel " +
                     shape_str(kernel.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " does not match kernel " + shape_str(kernel.shape()));
  }
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t F = kernel.dim(0), K = kernel.dim(2);
  const long pad = static_cast<long>(K / 2);
  const long h = static_cast<long>(H), w = static_cast<long>(W);

  // Visits every (f, c, ky, kx) tap with the overlapping row/column ranges.
  auto for_taps = [=](auto&& body) {
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < K; ++ky) {
          const long dy = static_cast<long>(ky) - pad;
          const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
          for (std::size_t kx = 0; kx < K; ++kx) {
            const long dx = static_cast<long>(kx) - pad;
            const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
            const std::size_t widx = ((f * C + c) * K + ky) * K + kx;
            body(f, c, dy, dx, y0, y1, x0, x1, widx);
          }
        }
      }
    }
  };

  const auto& in = input.values();
  const auto& wt = kernel.values();
  const auto& bs = bias.values();
  std::vector<double> out(F * H * W);
  for (std::size_t f = 0; f < F; ++f) {
    std::fill(out.begin() + f * H * W, out.begin() + (f + 1) * H * W, bs[f]);
  }
  for_taps([&](std::size_t f, std::size_t c, long dy, long dx, long y0, long y1,
               long x0, long x1, std::size_t widx) {
    const double k = wt[widx];
    for (long y = y0; y < y1; ++y) {
      double* orow = out.data() + (f * H + y) * W;
      const double* irow = in.data() + (c * H + (y + dy)) * W;
      for (long x = x0; x < x1; ++x) orow[x] += k * irow[x + dx];
    }
  });

  auto in_n = input.node();
  auto k_n = kernel.node();
  auto b_n = bias.node();
  return Tensor::make_result(
      Shape{F, H, W}, std::move(out), "conv2d", {in_n, k_n, b_n},
      [=](detail::Node& self) {
        const auto& g = self.grad;
        if (b_n->requires_grad) {
          auto& gb = b_n->ensure_grad();
          for (std::size_t f = 0; f < F; ++f) {
            double s = 0.0;
            for (std::size_t i = 0; i < H * W; ++i) s += g[f * H * W + i];
            gb[f] += s;
          }
        }
        const bool need_in = in_n->requires_grad;
        const bool need_k = k_n->requires_grad;
        if (!need_in && !need_k) return;
        double* gin = need_in ? in_n->ensure_grad().data() : nullptr;
        double* gk = need_k ? k_n->ensure_grad().data() : nullptr;
        const double* iv = in_n->data.data();
        const double* kv = k_n->data.data();
        for_taps([&](std::size_t f, std::size_t c, long dy, long dx, long y0,
                     long y1, long x0, long x1, std::size_t widx) {
          const double k = kv[widx];
          double acc = 0.0;
          for (long y = y0; y < y1; ++y) {
            const double* grow = g.data() + (f * H + y) * W;
            const std::size_t ioff = (c * H + (y + dy)) * W;
            if (need_in) {
              double* girow = gin + ioff;
              for (long x = x0; x < x1; ++x) girow[x + dx] += k * grow[x];
            }
            if (need_k) {
              const double* irow = iv + ioff;
              for (long x = x0; x < x1; ++x) acc += grow[x] * irow[x + dx];
            }
          }
          if (need_k) gk[widx] += acc;
        });
      });
}

/// 2x2 average pooling: [C,H,W] -> [C,H/2,W/2]; H and W must be even.
inline Tensor avg_pool2(const Tensor& input) {
  require_chw(input, "avg_pool2");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (H % 2 || W % 2) {
    throw ShapeError("avg_pool2: odd spatial size " + shape_str(input.shape()));
  }
  const std::size_t h = H / 2, w = W / 2;
  const auto& in = input.values();
  std::vector<double> out(C * h * w);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* r0 = in.data() + (c * H + 2 * y) * W;
      const double* r1 = r0 + W;
      double* o = out.data() + (c * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) {
        o[x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
      }
    }
  }
  auto in_n = input.node();
  return Tensor::make_result(
      Shape{C, h, w}, std::move(out), "avg_pool2", {in_n},
      [=](detail::Node& self) {
        if (!in_n->requires_grad) return;
        auto& gi = in_n->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t y = 0; y < h; ++y) {
            double* r0 = gi.data() + (c * H + 2 * y) * W;
            double* r1 = r0 + W;
            const double* g = self.grad.data() + (c * h + y) * w;
            for (std::size_t x = 0; x < w; ++x) {
              const double q = 0.25 * g[x];
              r0[2 * x] += q;
              r0[2 * x + 1] += q;
              r1[2 * x] += q;
              r1[2 * x + 1] += q;
            }
          }
        }
      });
}

namespace detail {

// Half-pixel-centred linear interpolation taps along one axis with edge
// clamping.
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps linear_taps(std::size_t src, std::size_t dst) {
  LinearTaps t;
  t.lo.resize(dst);
  t.hi.resize(dst);
  t.frac.resize(dst);
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    double pos = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
    const auto l = static_cast<std::size_t>(std::floor(pos));
    t.lo[i] = l;
    t.hi[i] = std::min(l + 1, src - 1);
    t.frac[i] = pos - static_cast<double>(l);
  }
  return t;
}

}  // namespace detail

/// Bilinear resampling of [C,H,W] to [C,out_h,out_w] (half-pixel centres).
inline Tensor resize_bilinear(const Tensor& input, std::size_t out_h,
                              std::size_t out_w) {
  require_chw(input, "resize_bilinear");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (H == 0 || W == 0 || out_h == 0 || out_w == 0) {
    throw ShapeError("resize_bilinear: empty extent");
  }
  if (H == out_h && W == out_w) return input;
  const auto ty = detail::linear_taps(H, out_h);
  const auto tx = detail::linear_taps(W, out_w);
  const auto& in = input.values();
  std::vector<double> out(C * out_h * out_w);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const double* r0 = in.data() + (c * H + ty.lo[y]) * W;
      const double* r1 = in.data() + (c * H + ty.hi[y]) * W;
      const double fy = ty.frac[y];
      double* o = out.data() + (c * out_h + y) * out_w;
      for (std::size_t x = 0; x < out_w; ++x) {
        const double fx = tx.frac[x];
        const double top = r0[tx.lo[x]] * (1.0 - fx) + r0[tx.hi[x]] * fx;
        const double bot = r1[tx.lo[x]] * (1.0 - fx) + r1[tx.hi[x]] * fx;
        o[x] = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  auto in_n = input.node();
  return Tensor::make_result(
      Shape{C, out_h, out_w}, std::move(out), "resize_bilinear", {in_n},
      [=](detail::Node& self) {
        if (!in_n->requires_grad) return;
        auto& gi = in_n->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t y = 0; y < out_h; ++y) {
            double* r0 = gi.data() + (c * H + ty.lo[y]) * W;
            double* r1 = gi.data() + (c * H + ty.hi[y]) * W;
            const double fy = ty.frac[y];
            const double* g = self.grad.data() + (c * out_h + y) * out_w;
            for (std::size_t x = 0; x < out_w; ++x) {
              const double fx = tx.frac[x];
              const double gt = g[x] * (1.0 - fy), gb = g[x] * fy;
              r0[tx.lo[x]] += gt * (1.0 - fx);
              r0[tx.hi[x]] += gt * fx;
              r1[tx.lo[x]] += gb * (1.0 - fx);
              r1[tx.hi[x]] += gb * fx;
            }
          }
        }
      });
}

/// Concatenates [C_i,H,W] maps along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) require_chw(p, "concat_channels");
  const std::size_t H = parts[0].dim(1), W = parts[0].dim(2);
  std::size_t C = 0;
  for (const auto& p : parts) {
    if (p.dim(1) != H || p.dim(2) != W) {
      throw ShapeError("concat_channels: spatial mismatch " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    C += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(C * H * W);
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.node());
  }
  auto captured = nodes;
  return Tensor::make_result(Shape{C, H, W}, std::move(out), "concat_channels",
                             std::move(nodes), [captured](detail::Node& self) {
                               std::size_t off = 0;
                               for (const auto& n : captured) {
                                 const std::size_t m = n->data.size();
                                 if (n->requires_grad) {
                                   auto& g = n->ensure_grad();
                                   for (std::size_t i = 0; i < m; ++i) {
                                     g[i] += self.grad[off + i];
                                   }
                                 }
                                 off += m;
                               }
                             });
}

/// Forward difference along x: out[c,y,x] = in[c,y,x+1] - in[c,y,x].
inline Tensor diff_x(const Tensor& input) {
  require_chw(input, "diff_x");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (W < 2) throw ShapeError("diff_x: width < 2 in " + shape_str(input.shape()));
  const auto& in = input.values();
  std::vector<double> out(C * H * (W - 1));
  for (std::size_t r = 0; r < C * H; ++r) {
    for (std::size_t x = 0; x + 1 < W; ++x) {
      out[r * (W - 1) + x] = in[r * W + x + 1] - in[r * W + x];
    }
  }
  auto in_n = input.node();
  return Tensor::make_result(Shape{C, H, W - 1}, std::move(out), "diff_x",
                             {in_n}, [=](detail::Node& self) {
                               if (!in_n->requires_grad) return;
                               auto& gi = in_n->ensure_grad();
                               for (std::size_t r = 0; r < C * H; ++r) {
                                 for (std::size_t x = 0; x + 1 < W; ++x) {
                                   const double g = self.grad[r * (W - 1) + x];
                                   gi[r * W + x + 1] += g;
                                   gi[r * W + x] -= g;
                                 }
                               }
                             });
}

/// Forward difference along y: out[c,y,x] = in[c,y+1,x] - in[c,y,x].
inline Tensor diff_y(const Tensor& input) {
  require_chw(input, "diff_y");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (H < 2) throw ShapeError("diff_y: height < 2 in " + shape_str(input.shape()));
  const auto& in = input.values();
  std::vector<double> out(C * (H - 1) * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y + 1 < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        out[(c * (H - 1) + y) * W + x] =
            in[(c * H + y + 1) * W + x] - in[(c * H + y) * W + x];
      }
    }
  }
  auto in_n = input.node();
  return Tensor::make_result(
      Shape{C, H - 1, W}, std::move(out), "diff_y", {in_n},
      [=](detail::Node& self) {
        if (!in_n->requires_grad) return;
        auto& gi = in_n->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t y = 0; y + 1 < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
              const double g = self.grad[(c * (H - 1) + y) * W + x];
              gi[(c * H + y + 1) * W + x] += g;
              gi[(c * H + y) * W + x] -= g;
            }
          }
        }
      });
}

/// Spatial crop [C, y0:y0+h, x0:x0+w].
inline Tensor crop(const Tensor& input, std::size_t y0, std::size_t x0,
                   std::size_t h, std::size_t w) {
  require_chw(input, "crop");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (y0 + h > H || x0 + w > W) {
    throw ShapeError("crop: window exceeds " + shape_str(input.shape()));
  }
  const auto& in = input.values();
  std::vector<double> out(C * h * w);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(in.data() + (c * H + y0 + y) * W + x0, w,
                  out.data() + (c * h + y) * w);
    }
  }
  auto in_n = input.node();
  return Tensor::make_result(Shape{C, h, w}, std::move(out), "crop", {in_n},
                             [=](detail::Node& self) {
                               if (!in_n->requires_grad) return;
                               auto& gi = in_n->ensure_grad();
                               for (std::size_t c = 0; c < C; ++c) {
                                 for (std::size_t y = 0; y < h; ++y) {
                                   for (std::size_t x = 0; x < w; ++x) {
                                     gi[(c * H + y0 + y) * W + x0 + x] +=
                                         self.grad[(c * h + y) * w + x];
                                   }
                                 }
                               }
                             });
}

}  // namespace deshadow
