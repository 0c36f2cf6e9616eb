#pragma once

// Training objective for the cascade:
//   total = pre(yK) + l_hessian * hessian(yK) + l_stage * stage + l_contr * contraction
//   pre   = l_mse * mean((yK - y*)^2) + l_perc * perceptual(yK, y*)
//   stage = 1/2 * sum_{k<K} ||yk - y*||^2
//   contraction = sum_{k>=2} [d_k - sg(d_{k-1})]_+ ,  d_k = ||yk - y*||_2
// With Reduction::mean the stage and contraction terms use per-element
// forms instead: ||.||^2 / n and d_k / sqrt(n).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "deshadow/image_ops.hpp"

namespace deshadow {

enum class Reduction { sum, mean };

inline std::string to_string(Reduction r) { return r == Reduction::sum ? "sum" : "mean"; }

inline Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::sum;
  if (s == "mean") return Reduction::mean;
  throw Error("unknown loss reduction '" + s + "' (expected sum or mean)");
}

struct LossWeights {
  double mse = 1.0;
  double perc = 0.05;
  double hessian = 0.1;
  double stage = 0.5;
  double contraction = 1.0;
  Reduction reduction = Reduction::sum;

  void validate() const {
    for (double w : {mse, perc, hessian, stage, contraction}) {
      if (!(w >= 0.0)) throw Error("loss weights must be nonnegative");
    }
  }
};

using PerceptualFn = std::function<Tensor(const Tensor&, const Tensor&)>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_loss");
  return mean_squares(a - b);
}

/// Differentiable stand-in for a learned perceptual metric: squared
/// differences of horizontal and vertical image gradients plus the squared
/// difference of the 2x-downsampled images.
inline Tensor perceptual_proxy(const Tensor& y_hat, const Tensor& y_star) {
  require_same_shape(y_hat, y_star, "perceptual_proxy");
  const Tensor e = y_hat - y_star;
  return mean_squares(diff_x(e)) + mean_squares(diff_y(e)) +
         mean_squares(avg_pool2(e));
}

/// Matches second-order finite differences (xx, yy, xy) of the two images.
inline Tensor hessian_loss(const Tensor& y_hat, const Tensor& y_star) {
  require_same_shape(y_hat, y_star, "hessian_loss");
  const Tensor e = y_hat - y_star;
  const Tensor ex = diff_x(e);
  return mean_squares(diff_x(ex)) + mean_squares(diff_y(diff_y(e))) +
         mean_squares(diff_y(ex));
}

inline Tensor loss_pre(const Tensor& y_hat, const Tensor& y_star,
                       const LossWeights& w,
                       const PerceptualFn& perceptual = perceptual_proxy) {
  require_same_shape(y_hat, y_star, "loss_pre");
  Tensor out = scale(mse_loss(y_hat, y_star), w.mse);
  if (w.perc != 0.0) out = out + scale(perceptual(y_hat, y_star), w.perc);
  return out;
}

/// Euclidean distance between a prediction and the target.
inline Tensor stage_distance(const Tensor& pred, const Tensor& y_star) {
  require_same_shape(pred, y_star, "stage_distance");
  return l2_norm(pred - y_star);
}

/// 1/2 sum_{k=1}^{K-1} ||yk - y*||^2; the final stage is excluded.
inline Tensor stage_loss(const std::vector<Tensor>& preds, const Tensor& y_star,
                         Reduction r = Reduction::sum) {
  if (preds.empty()) throw Error("stage_loss: no predictions");
  Tensor out = Tensor::scalar(0.0);
  for (std::size_t k = 0; k + 1 < preds.size(); ++k) {
    require_same_shape(preds[k], y_star, "stage_loss");
    const Tensor e = preds[k] - y_star;
    out = out + (r == Reduction::sum ? sum_squares(e) : mean_squares(e));
  }
  return scale(out, 0.5);
}

/// sum_{k=2}^{K} max(d_k - sg(d_{k-1}), 0).
inline Tensor contraction_loss(const std::vector<Tensor>& preds,
                               const Tensor& y_star, Reduction r = Reduction::sum) {
  if (preds.empty()) throw Error("contraction_loss: no predictions");
  Tensor out = Tensor::scalar(0.0);
  if (preds.size() < 2) return out;
  const double per = r == Reduction::sum ? 1.0 : 1.0 / std::sqrt(static_cast<double>(y_star.numel()));
  auto dist = [&](const Tensor& p) {
    Tensor d = stage_distance(p, y_star);
    return r == Reduction::sum ? d : scale(d, per);
  };
  Tensor prev = dist(preds[0]);
  for (std::size_t k = 1; k < preds.size(); ++k) {
    Tensor d = dist(preds[k]);
    out = out + positive_part(d - stop_gradient(prev));
    prev = d;
  }
  return out;
}

struct StageErrors {
  std::vector<double> d;

  bool non_increasing() const {
    for (std::size_t k = 1; k < d.size(); ++k) {
      if (d[k] > d[k - 1]) return false;
    }
    return true;
  }
};

inline StageErrors stage_errors(const std::vector<Tensor>& preds,
                                const Tensor& y_star) {
  NoGradGuard no_grad;
  StageErrors e;
  for (const auto& p : preds) e.d.push_back(stage_distance(p, y_star).item());
  return e;
}

struct LossTerms {
  Tensor total;
  double pre = 0.0;
  double hessian = 0.0;
  double stage = 0.0;
  double contraction = 0.0;
};

inline LossTerms total_loss(const std::vector<Tensor>& preds, const Tensor& y_star,
                            const LossWeights& w,
                            const PerceptualFn& perceptual = perceptual_proxy) {
  if (preds.empty()) throw Error("total_loss: no predictions");
  const Tensor& final_pred = preds.back();
  LossTerms t;
  Tensor total = loss_pre(final_pred, y_star, w, perceptual);
  t.pre = total.item();
  if (w.hessian != 0.0) {
    const Tensor h = hessian_loss(final_pred, y_star);
    t.hessian = h.item();
    total = total + scale(h, w.hessian);
  }
  if (preds.size() > 1 && w.stage != 0.0) {
    const Tensor s = stage_loss(preds, y_star, w.reduction);
    t.stage = s.item();
    total = total + scale(s, w.stage);
  }
  if (preds.size() > 1 && w.contraction != 0.0) {
    const Tensor c = contraction_loss(preds, y_star, w.reduction);
    t.contraction = c.item();
    total = total + scale(c, w.contraction);
  }
  t.total = total;
  return t;
}

}  // namespace deshadow
