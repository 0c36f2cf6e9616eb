#pragma once

// Elementwise arithmetic, reductions and stop_gradient.
//
// Binary ops accept equal shapes or a single-element operand on either side
// (scalar broadcast). Nothing else broadcasts.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "deshadow/tensor.hpp"

namespace deshadow {

namespace detail {

using NodePtr = std::shared_ptr<Node>;

inline void add_into(const NodePtr& target, const std::vector<double>& g) {
  if (!target->requires_grad) return;
  auto& acc = target->ensure_grad();
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

enum class Bcast { none, left_scalar, right_scalar };

inline Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::none;
  if (b.numel() == 1) return Bcast::right_scalar;
  if (a.numel() == 1) return Bcast::left_scalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " +
                   shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Generic binary op. `f(x, y)` computes the value; `dfx`/`dfy` return the
// partial derivatives at (x, y, out).
template <class F, class DX, class DY>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DX dfx,
              DY dfy) {
  const Bcast kind = broadcast_kind(a, b, op);
  const Shape out_shape = kind == Bcast::left_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t sa = kind == Bcast::left_scalar ? 0 : 1;
  const std::size_t sb = kind == Bcast::right_scalar ? 0 : 1;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i * sa], bv[i * sb]);
  auto an = a.node();
  auto bn = b.node();
  return Tensor::make_result(
      out_shape, std::move(out), op, {an, bn},
      [an, bn, sa, sb, dfx, dfy](Node& self) {
        const std::size_t m = self.data.size();
        const auto& g = self.grad;
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            ga[i * sa] += g[i] * dfx(an->data[i * sa], bn->data[i * sb],
                                     self.data[i]);
          }
        }
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            gb[i * sb] += g[i] * dfy(an->data[i * sa], bn->data[i * sb],
                                     self.data[i]);
          }
        }
      });
}

// Generic unary op with derivative `df(x, out)`.
template <class F, class DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto an = a.node();
  return Tensor::make_result(a.shape(), std::move(out), op, {an},
                             [an, df](Node& self) {
                               if (!an->requires_grad) return;
                               auto& ga = an->ensure_grad();
                               for (std::size_t i = 0; i < ga.size(); ++i) {
                                 ga[i] += self.grad[i] *
                                          df(an->data[i], self.data[i]);
                               }
                             });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      a, "scale", [s](double x) { return s * x; },
      [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(
      a, "add_scalar", [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

/// max(x, 0); the subgradient at 0 is 0.
inline Tensor positive_part(const Tensor& a) {
  return detail::unary(
      a, "positive_part", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor relu(const Tensor& a) { return positive_part(a); }

inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

// Derivative at 0 is taken as 0 rather than +inf.
inline Tensor sqrt(const Tensor& a) {
  return detail::unary(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, "clamp", [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline void require_nonempty(const Tensor& a, const char* op) {
  if (a.numel() == 0) throw ShapeError(std::string(op) + ": empty tensor");
}

inline Tensor sum(const Tensor& a) {
  require_nonempty(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return Tensor::make_result(Shape{}, {s}, "sum", {an}, [an](detail::Node& self) {
    if (!an->requires_grad) return;
    const double g = self.grad[0];
    for (double& v : an->ensure_grad()) v += g;
  });
}

inline Tensor mean(const Tensor& a) {
  require_nonempty(a, "mean");
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return Tensor::make_result(Shape{}, {s / n}, "mean", {an},
                             [an, n](detail::Node& self) {
                               if (!an->requires_grad) return;
                               const double g = self.grad[0] / n;
                               for (double& v : an->ensure_grad()) v += g;
                             });
}

/// Sum of squared entries.
inline Tensor sum_squares(const Tensor& a) {
  require_nonempty(a, "sum_squares");
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  auto an = a.node();
  return Tensor::make_result(Shape{}, {s}, "sum_squares", {an},
                             [an](detail::Node& self) {
                               if (!an->requires_grad) return;
                               const double g = 2.0 * self.grad[0];
                               auto& ga = an->ensure_grad();
                               for (std::size_t i = 0; i < ga.size(); ++i) {
                                 ga[i] += g * an->data[i];
                               }
                             });
}

/// Mean of squared entries.
inline Tensor mean_squares(const Tensor& a) {
  require_nonempty(a, "mean_squares");
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  auto an = a.node();
  return Tensor::make_result(Shape{}, {s / n}, "mean_squares", {an},
                             [an, n](detail::Node& self) {
                               if (!an->requires_grad) return;
                               const double g = 2.0 * self.grad[0] / n;
                               auto& ga = an->ensure_grad();
                               for (std::size_t i = 0; i < ga.size(); ++i) {
                                 ga[i] += g * an->data[i];
                               }
                             });
}

/// Euclidean norm over all entries. The gradient at the zero vector is zero.
inline Tensor l2_norm(const Tensor& a) {
  require_nonempty(a, "l2_norm");
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  const double norm = std::sqrt(s);
  auto an = a.node();
  return Tensor::make_result(Shape{}, {norm}, "l2_norm", {an},
                             [an](detail::Node& self) {
                               if (!an->requires_grad) return;
                               const double y = self.data[0];
                               if (y == 0.0) return;
                               const double g = self.grad[0] / y;
                               auto& ga = an->ensure_grad();
                               for (std::size_t i = 0; i < ga.size(); ++i) {
                                 ga[i] += g * an->data[i];
                               }
                             });
}

/// Identity forward; the result is a fresh leaf, so no gradient crosses it.
inline Tensor stop_gradient(const Tensor& a) {
  Tensor out(a.shape(), a.values());
  return out;
}

}  // namespace deshadow
