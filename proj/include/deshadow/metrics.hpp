#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "deshadow/cascade.hpp"
#include "deshadow/filters.hpp"
#include "deshadow/losses.hpp"
#include "deshadow/parallel.hpp"
#include "deshadow/synth.hpp"

namespace deshadow {

inline double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

/// 10 log10(max^2 / MSE); +infinity for identical images.
inline double psnr(const Tensor& a, const Tensor& b, double max_val = 1.0) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / m);
}

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// 11x11 Gaussian window, normalized to unit sum.
inline std::vector<double> ssim_window_1d() {
  std::vector<double> w(kSsimWindow);
  const double c = (kSsimWindow - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

namespace detail {

// Separable "valid" filtering of one H x W plane.
inline std::vector<double> filter_valid(const double* src, std::size_t H,
                                        std::size_t W,
                                        const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = H - n + 1, ow = W - n + 1;
  std::vector<double> tmp(H * ow), out(oh * ow);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * src[y * W + x + i];
      tmp[y * ow + x] = acc;
    }
  }
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += k[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace detail

/// Mean structural similarity over channels and all valid window positions,
/// for images with unit dynamic range.
inline double ssim(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "ssim");
  require_chw(a, "ssim");
  const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2);
  if (H < kSsimWindow || W < kSsimWindow) {
    throw ShapeError("ssim: image " + shape_str(a.shape()) +
                     " is smaller than the 11x11 window");
  }
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const auto k = ssim_window_1d();
  const std::size_t n = H * W;
  std::vector<double> aa(n), bb(n), ab(n);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double* pa = a.data().data() + c * n;
    const double* pb = b.data().data() + c * n;
    for (std::size_t i = 0; i < n; ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto mu_a = detail::filter_valid(pa, H, W, k);
    const auto mu_b = detail::filter_valid(pb, H, W, k);
    const auto e_aa = detail::filter_valid(aa.data(), H, W, k);
    const auto e_bb = detail::filter_valid(bb.data(), H, W, k);
    const auto e_ab = detail::filter_valid(ab.data(), H, W, k);
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb;
      const double cov = e_ab[i] - ma * mb;
      total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) /
               ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    count += mu_a.size();
  }
  return total / static_cast<double>(count);
}

struct MetricReport {
  std::vector<double> psnr_db;
  std::vector<double> ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

inline MetricReport evaluate_pairs(const std::vector<Tensor>& preds,
                                   const std::vector<Tensor>& targets) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw Error("evaluate_pairs: need equally many non-zero predictions and targets");
  }
  MetricReport r;
  r.psnr_db.resize(preds.size());
  r.ssim.resize(preds.size());
  parallel_for(preds.size(), [&](std::size_t i) {
    r.psnr_db[i] = psnr(preds[i], targets[i]);
    r.ssim[i] = ssim(preds[i], targets[i]);
  });
  for (std::size_t i = 0; i < preds.size(); ++i) {
    r.mean_psnr += r.psnr_db[i];
    r.mean_ssim += r.ssim[i];
  }
  r.mean_psnr /= static_cast<double>(preds.size());
  r.mean_ssim /= static_cast<double>(preds.size());
  return r;
}

struct StageProfile {
  std::vector<double> mean_d;                 // per stage
  double monotone_fraction = 0.0;             // share of non-increasing profiles
  std::vector<std::vector<double>> per_sample;
};

/// Summarizes per-stage errors d_k. A single-stage profile counts as
/// non-increasing.
inline StageProfile summarize_stage_errors(const std::vector<StageErrors>& errs) {
  if (errs.empty()) throw Error("stage error profile: empty split");
  StageProfile p;
  const std::size_t K = errs[0].d.size();
  p.mean_d.assign(K, 0.0);
  std::size_t monotone = 0;
  for (const auto& e : errs) {
    if (e.d.size() != K) throw Error("stage error profile: ragged stage counts");
    for (std::size_t k = 0; k < K; ++k) p.mean_d[k] += e.d[k];
    if (e.non_increasing()) ++monotone;
    p.per_sample.push_back(e.d);
  }
  for (double& m : p.mean_d) m /= static_cast<double>(errs.size());
  p.monotone_fraction = static_cast<double>(monotone) / static_cast<double>(errs.size());
  return p;
}

inline StageProfile stage_error_profile(const Cascade& cascade,
                                        const std::vector<ScenePair>& split,
                                        const GuidanceProvider& provider) {
  if (split.empty()) throw Error("stage_error_profile: empty split");
  std::vector<StageErrors> errs(split.size());
  parallel_for(split.size(), [&](std::size_t i) {
    NoGradGuard no_grad;
    const GuidanceBundle g = provider.compute(split[i].shadowed);
    errs[i] = stage_errors(cascade.forward_all(split[i].shadowed, g), split[i].clean);
  });
  return summarize_stage_errors(errs);
}

}  // namespace deshadow
