#pragma once

// AdamW with decoupled weight decay and global gradient-norm clipping.

#include <cmath>
#include <string>
#include <vector>

#include "deshadow/cascade.hpp"

namespace deshadow {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

inline double global_grad_norm(const std::vector<Parameter>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    for (double g : p.value.grad()) s += g * g;
  }
  return std::sqrt(s);
}

/// Rescales all gradients so their joint norm is at most max_norm and returns
/// the norm before clipping. Norms within a few ulps of the bound are left as
/// they are, which makes clipping idempotent.
inline double clip_grad_norm(std::vector<Parameter>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm * (1.0 + 8.0 * 0x1.0p-52)) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.value.has_grad()) continue;
      for (double& g : p.value.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

class AdamW {
 public:
  explicit AdamW(std::vector<Parameter> params, AdamWConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }

  /// Clips, then applies one update at learning rate lr. Parameters without
  /// an accumulated gradient are treated as having a zero gradient.
  void step(double lr) {
    for (const auto& p : params_) {
      for (double g : p.value.grad()) {
        if (!std::isfinite(g)) {
          throw Error("non-finite gradient in parameter " + p.name);
        }
      }
    }
    clip_grad_norm(params_, cfg_.clip_norm);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& w = params_[i].value;
      auto data = w.mutable_data();
      const auto grad = w.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = grad.empty() ? 0.0 : grad[j];
        data[j] -= lr * cfg_.weight_decay * data[j];
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        data[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  std::uint64_t steps() const { return t_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  const AdamWConfig& config() const { return cfg_; }

  void restore(std::uint64_t steps, std::vector<std::vector<double>> m,
               std::vector<std::vector<double>> v) {
    if (m.size() != params_.size() || v.size() != params_.size()) {
      throw Error("optimizer state does not match parameter list");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (m[i].size() != params_[i].value.numel() ||
          v[i].size() != params_[i].value.numel()) {
        throw Error("optimizer moment shape mismatch for " + params_[i].name);
      }
    }
    t_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<Parameter> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace deshadow
