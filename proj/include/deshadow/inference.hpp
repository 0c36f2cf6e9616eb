#pragma once

// Tiled inference with overlap blending, and checkpoint ensembles.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deshadow/cascade.hpp"
#include "deshadow/checkpoint.hpp"
#include "deshadow/guidance.hpp"
#include "deshadow/image_ops.hpp"
#include "deshadow/parallel.hpp"

namespace deshadow {

struct TileRect {
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
  bool operator==(const TileRect&) const = default;
};

/// Tiles at stride s - o, the last row/column moved inward to stay inside
/// the image. Each tile carries a separable weight that ramps linearly over
/// the o pixels of every edge shared with the image interior and is 1
/// elsewhere. `total` is the accumulated weight per pixel.
struct TilePlan {
  std::size_t H = 0, W = 0, tile = 0, overlap = 0;
  std::vector<TileRect> tiles;
  std::vector<std::vector<double>> weights;  // per tile, h*w raw weights
  std::vector<double> total;                 // H*W

  /// Weight of tile t at image pixel (y, x) after normalization.
  double normalized(std::size_t t, std::size_t y, std::size_t x) const {
    const TileRect& r = tiles[t];
    if (y < r.y0 || y >= r.y0 + r.h || x < r.x0 || x >= r.x0 + r.w) return 0.0;
    return weights[t][(y - r.y0) * r.w + (x - r.x0)] / total[y * W + x];
  }
};

namespace detail {

inline std::vector<std::size_t> tile_starts(std::size_t L, std::size_t s, std::size_t o) {
  if (L <= s) return {0};
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p + s < L; p += s - o) out.push_back(p);
  if (out.back() != L - s) out.push_back(L - s);
  return out;
}

inline std::vector<double> edge_ramp(std::size_t start, std::size_t len, std::size_t L,
                                     std::size_t o) {
  std::vector<double> r(len, 1.0);
  if (o == 0) return r;
  for (std::size_t i = 0; i < len && i < o; ++i) {
    if (start > 0) r[i] = std::min(r[i], (static_cast<double>(i) + 0.5) / static_cast<double>(o));
    if (start + len < L) {
      const std::size_t j = len - 1 - i;
      r[j] = std::min(r[j], (static_cast<double>(i) + 0.5) / static_cast<double>(o));
    }
  }
  return r;
}

}  // namespace detail

inline TilePlan plan_tiles(std::size_t H, std::size_t W, std::size_t s, std::size_t o) {
  if (s <= o) {
    throw Error("plan_tiles: tile size " + std::to_string(s) + " must exceed overlap " +
                std::to_string(o));
  }
  if (H == 0 || W == 0) throw ShapeError("plan_tiles: empty image");
  TilePlan p;
  p.H = H;
  p.W = W;
  p.tile = s;
  p.overlap = o;
  p.total.assign(H * W, 0.0);
  const auto ys = detail::tile_starts(H, s, o), xs = detail::tile_starts(W, s, o);
  const std::size_t th = std::min(s, H), tw = std::min(s, W);
  for (std::size_t y0 : ys) {
    const auto ry = detail::edge_ramp(y0, th, H, o);
    for (std::size_t x0 : xs) {
      const auto rx = detail::edge_ramp(x0, tw, W, o);
      std::vector<double> w(th * tw);
      for (std::size_t y = 0; y < th; ++y) {
        for (std::size_t x = 0; x < tw; ++x) {
          w[y * tw + x] = ry[y] * rx[x];
          p.total[(y0 + y) * W + x0 + x] += w[y * tw + x];
        }
      }
      p.tiles.push_back({y0, x0, th, tw});
      p.weights.push_back(std::move(w));
    }
  }
  return p;
}

/// Guidance for every tile, computed from the tile's crop of x.
inline std::vector<GuidanceBundle> tile_guidance(const TilePlan& plan, const Tensor& x,
                                                 const GuidanceProvider& provider) {
  require_rgb(x, "tile_guidance");
  if (x.dim(1) != plan.H || x.dim(2) != plan.W) {
    throw ShapeError("tile plan is for " + std::to_string(plan.H) + "x" +
                     std::to_string(plan.W) + " but the image is " + shape_str(x.shape()));
  }
  for (const TileRect& r : plan.tiles) {
    if (r.h % kSpatialMultiple || r.w % kSpatialMultiple) {
      throw ShapeError("tile of " + std::to_string(r.h) + "x" + std::to_string(r.w) +
                       " is not a multiple of " + std::to_string(kSpatialMultiple) +
                       "; choose a tile size divisible by 32 or pad the image");
    }
  }
  std::vector<std::optional<GuidanceBundle>> tmp(plan.tiles.size());
  parallel_for(tmp.size(), [&](std::size_t t) {
    NoGradGuard no_grad;
    const TileRect& r = plan.tiles[t];
    tmp[t].emplace(provider.compute(crop(x, r.y0, r.x0, r.h, r.w)));
  });
  std::vector<GuidanceBundle> out;
  for (auto& g : tmp) out.push_back(std::move(*g));
  return out;
}

/// Blended prediction before clamping. Tiles contribute their weighted
/// residual over x in plan order, so an identity model returns x exactly.
inline Tensor infer_tiled_raw(const Cascade& model, const Tensor& x, const TilePlan& plan,
                              const std::vector<GuidanceBundle>& guidance) {
  NoGradGuard no_grad;
  std::vector<Tensor> preds(plan.tiles.size());
  parallel_for(preds.size(), [&](std::size_t t) {
    const TileRect& r = plan.tiles[t];
    preds[t] = model.predict_raw(crop(x, r.y0, r.x0, r.h, r.w), guidance.at(t));
  });
  const std::size_t C = x.dim(0), H = plan.H, W = plan.W;
  std::vector<double> acc(C * H * W, 0.0), only(C * H * W, 0.0);
  std::vector<unsigned> contributors(H * W, 0);
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const TileRect& r = plan.tiles[t];
    const auto& w = plan.weights[t];
    for (std::size_t y = 0; y < r.h; ++y) {
      for (std::size_t xx = 0; xx < r.w; ++xx) {
        if (w[y * r.w + xx] > 0.0) ++contributors[(r.y0 + y) * W + r.x0 + xx];
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < r.h; ++y) {
        for (std::size_t xx = 0; xx < r.w; ++xx) {
          const std::size_t gi = (c * H + r.y0 + y) * W + r.x0 + xx;
          const double p = preds[t][(c * r.h + y) * r.w + xx];
          const double wt = w[y * r.w + xx];
          acc[gi] += wt * (p - x[gi]);
          if (wt > 0.0) only[gi] = p;
        }
      }
    }
  }
  // Pixels seen by one tile take its prediction as is.
  std::vector<double> out(C * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H * W; ++i) {
      const std::size_t gi = c * H * W + i;
      out[gi] = contributors[i] == 1 ? only[gi] : x[gi] + acc[gi] / plan.total[i];
    }
  }
  return Tensor(x.shape(), std::move(out));
}

inline Tensor infer_tiled(const Cascade& model, const Tensor& x, const GuidanceProvider& provider,
                          const TilePlan& plan) {
  NoGradGuard no_grad;
  return clamp(infer_tiled_raw(model, x, plan, tile_guidance(plan, x, provider)), 0.0, 1.0);
}

enum class InferMode { whole, tiled };

inline InferMode parse_infer_mode(const std::string& s) {
  if (s == "whole") return InferMode::whole;
  if (s == "tiled") return InferMode::tiled;
  throw Error("unknown inference mode '" + s + "' (expected whole or tiled)");
}

struct EnsembleMember {
  std::string id;
  Checkpoint checkpoint;
};

/// Checkpoints of one architecture, kept sorted by id.
class EnsembleSet {
 public:
  explicit EnsembleSet(std::vector<EnsembleMember> members) : members_(std::move(members)) {
    if (members_.empty()) throw Error("ensemble needs at least one checkpoint");
    std::stable_sort(members_.begin(), members_.end(),
                     [](const EnsembleMember& a, const EnsembleMember& b) { return a.id < b.id; });
    const Cascade& ref = members_.front().checkpoint.model;
    for (const auto& m : members_) {
      const Cascade& c = m.checkpoint.model;
      if (c.size() != ref.size() || !(c.arch() == ref.arch())) {
        throw Error("checkpoint " + m.id + " is incompatible with " + members_.front().id +
                    ": " + std::to_string(c.size()) + " stages/width " +
                    std::to_string(c.arch().width) + " vs " + std::to_string(ref.size()) +
                    " stages/width " + std::to_string(ref.arch().width));
      }
    }
  }

  static EnsembleSet load(const std::vector<std::filesystem::path>& dirs) {
    std::vector<EnsembleMember> m;
    for (const auto& d : dirs) {
      try {
        m.push_back({d.generic_string(), load_checkpoint(d)});
      } catch (const std::exception& e) {
        throw IoError("checkpoint " + d.generic_string() + ": " + e.what());
      }
    }
    return EnsembleSet(std::move(m));
  }

  static EnsembleSet of(const std::vector<Checkpoint>& cks) {
    std::vector<EnsembleMember> m;
    for (const auto& c : cks) m.push_back({c.id(), c});
    return EnsembleSet(std::move(m));
  }

  std::size_t size() const { return members_.size(); }
  const std::vector<EnsembleMember>& members() const { return members_; }
  const ArchConfig& arch() const { return members_.front().checkpoint.model.arch(); }

 private:
  std::vector<EnsembleMember> members_;
};

struct TileOptions {
  std::size_t tile = 64;
  std::size_t overlap = 16;
};

/// Mean of the members' unclamped predictions, clamped once. The mean is
/// taken as the first member plus the average deviation from it, in id
/// order: identical members reproduce a single model bit for bit.
inline Tensor infer_ensemble(const EnsembleSet& ens, const Tensor& x, InferMode mode,
                             const GuidanceProvider& provider, const TileOptions& tiles = {}) {
  NoGradGuard no_grad;
  require_rgb(x, "infer_ensemble");
  std::vector<Tensor> preds;
  if (mode == InferMode::whole) {
    const GuidanceBundle g = provider.compute(x);
    for (const auto& m : ens.members()) preds.push_back(m.checkpoint.model.predict_raw(x, g));
  } else {
    const TilePlan plan = plan_tiles(x.dim(1), x.dim(2), tiles.tile, tiles.overlap);
    const auto g = tile_guidance(plan, x, provider);
    for (const auto& m : ens.members()) preds.push_back(infer_tiled_raw(m.checkpoint.model, x, plan, g));
  }
  const Tensor& base = preds.front();
  std::vector<double> out(base.numel());
  const double n = static_cast<double>(preds.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double dev = 0.0;
    for (std::size_t m = 1; m < preds.size(); ++m) dev += preds[m][i] - base[i];
    out[i] = base[i] + dev / n;
  }
  return clamp(Tensor(base.shape(), std::move(out)), 0.0, 1.0);
}

}  // namespace deshadow
