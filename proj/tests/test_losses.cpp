#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace deshadow;

namespace {

const Shape kImg{3, 8, 8};

Tensor offset(const Tensor& a, double c) {
  std::vector<double> v = a.values();
  for (double& x : v) x += c;
  return Tensor(a.shape(), std::move(v));
}

// K stage predictions stacked along the height axis of one [3, 8K, 8] tensor.
std::vector<Tensor> split(const Tensor& stacked, std::size_t K) {
  NoGradGuard no_grad;
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < K; ++k) out.push_back(crop(stacked, 8 * k, 0, 8, 8).clone());
  return out;
}

std::vector<Tensor> slice_preds(const Tensor& stacked, std::size_t K) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < K; ++k) out.push_back(crop(stacked, 8 * k, 0, 8, 8));
  return out;
}

std::vector<oracle::Img> imgs(const std::vector<Tensor>& ts) {
  std::vector<oracle::Img> out;
  for (const auto& t : ts) out.emplace_back(t);
  return out;
}

}  // namespace

TEST(LossPre, Examples) {
  Rng rng(1);
  const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
  const LossWeights w;
  EXPECT_EQ(loss_pre(y, y, w).item(), 0.0);
  LossWeights mse_only;
  mse_only.perc = 0.0;
  EXPECT_NEAR(loss_pre(offset(y, 0.1), y, mse_only).item(), 0.01, 1e-15);
  EXPECT_THROW(loss_pre(y, Tensor::zeros({3, 8, 4}), w), ShapeError);
}

TEST(Perceptual, Examples) {
  Rng rng(2);
  const Tensor a = oracle::random_tensor(rng, kImg, 0, 1);
  EXPECT_EQ(perceptual_proxy(a, a).item(), 0.0);
  EXPECT_NEAR(perceptual_proxy(offset(a, 0.3), a).item(), 0.09, 1e-15);
  for (int t = 0; t < 20; ++t) {
    const Tensor p = oracle::random_tensor(rng, kImg), q = oracle::random_tensor(rng, kImg);
    EXPECT_NEAR(perceptual_proxy(p, q).item(), oracle::perceptual(oracle::Img(p), oracle::Img(q)), 1e-13);
  }
}

TEST(Hessian, AffineRampIsInvisible) {
  Rng rng(3);
  const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
  EXPECT_EQ(hessian_loss(y, y).item(), 0.0);
  std::vector<double> v = y.values();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t q = 0; q < 8; ++q) v[(c * 8 + r) * 8 + q] += 0.25 + 0.125 * q - 0.0625 * r;
  EXPECT_NEAR(hessian_loss(Tensor(kImg, v), y).item(), 0.0, 1e-28);
  for (int t = 0; t < 20; ++t) {
    const Tensor p = oracle::random_tensor(rng, kImg), q = oracle::random_tensor(rng, kImg);
    EXPECT_NEAR(hessian_loss(p, q).item(), oracle::hessian(oracle::Img(p), oracle::Img(q)), 1e-12);
  }
}

TEST(StageLoss, Examples) {
  const Tensor y = Tensor::zeros(kImg);
  Tensor e1 = Tensor::zeros(kImg), e2 = Tensor::zeros(kImg);
  e1.mutable_data()[0] = 2.0;  // ||e1||^2 = 4
  e2.mutable_data()[5] = 1.0;  // ||e2||^2 = 1
  EXPECT_EQ(stage_loss({e1, e2, Tensor::full(kImg, 7.0)}, y).item(), 2.5);
  EXPECT_EQ(stage_loss({e1}, y).item(), 0.0);
  EXPECT_EQ(stage_loss({y, y, e1}, y).item(), 0.0);
}

namespace {

// Predictions at prescribed distances from a zero target.
std::vector<Tensor> at_distances(const std::vector<double>& d) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < d.size(); ++k) {
    Tensor t = Tensor::zeros(kImg);
    t.mutable_data()[k] = d[k];
    out.push_back(t);
  }
  return out;
}

}  // namespace

TEST(Contraction, Examples) {
  const Tensor y = Tensor::zeros(kImg);
  EXPECT_EQ(contraction_loss(at_distances({2, 1, 3}), y).item(), 2.0);
  EXPECT_EQ(contraction_loss(at_distances({3, 2, 1}), y).item(), 0.0);
  EXPECT_EQ(contraction_loss(at_distances({3}), y).item(), 0.0);
}

TEST(Contraction, ExhaustiveOverSmallProfiles) {
  const Tensor y = Tensor::zeros(kImg);
  int zero = 0;
  for (int a = 1; a <= 3; ++a) {
    for (int b = 1; b <= 3; ++b) {
      for (int c = 1; c <= 3; ++c) {
        const std::vector<double> d{double(a), double(b), double(c)};
        const double got = contraction_loss(at_distances(d), y).item();
        EXPECT_EQ(got, oracle::contraction_of_d(d)) << a << b << c;
        const bool monotone = a >= b && b >= c;
        EXPECT_EQ(got == 0.0, monotone) << a << b << c;
        zero += got == 0.0;
      }
    }
  }
  EXPECT_EQ(zero, 10);  // non-increasing triples over {1,2,3}
}

TEST(Contraction, StopGradientAsymmetry) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
    Tensor p1 = offset(y, 0.01 * rng.uniform(-1, 1));
    Tensor p2 = oracle::random_tensor(rng, kImg, 0, 1);
    p1.set_requires_grad();
    p2.set_requires_grad();
    const StageErrors e = stage_errors({p1, p2}, y);
    ASSERT_GT(e.d[1], e.d[0]);
    backward(contraction_loss({p1, p2}, y));
    for (double g : p1.grad()) ASSERT_EQ(std::bit_cast<std::uint64_t>(g), 0u);
    // The norm derivative computes (p2 - y) * (1/d2) elementwise.
    const double inv = 1.0 / e.d[1];
    for (std::size_t i = 0; i < p2.numel(); ++i) {
      ASSERT_EQ(p2.grad()[i], (p2[i] - y[i]) * inv) << i;
    }
  }
}

TEST(StageErrors, LengthAndSign) {
  Rng rng(6);
  std::vector<Tensor> preds;
  for (int k = 0; k < 4; ++k) preds.push_back(oracle::random_tensor(rng, kImg));
  const StageErrors e = stage_errors(preds, preds[2]);
  ASSERT_EQ(e.d.size(), 4u);
  for (double d : e.d) EXPECT_GE(d, 0.0);
  EXPECT_EQ(e.d[2], 0.0);
}

TEST(TotalLoss, Examples) {
  Rng rng(7);
  const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
  LossWeights only_mse{1.0, 0.0, 0.0, 0.0, 0.0};
  EXPECT_EQ(total_loss({oracle::random_tensor(rng, kImg), y}, y, only_mse).total.item(), 0.0);

  const LossWeights w;
  const Tensor p = oracle::random_tensor(rng, kImg);
  const double single = total_loss({p}, y, w).total.item();
  EXPECT_DOUBLE_EQ(single, loss_pre(p, y, w).item() + w.hessian * hessian_loss(p, y).item());
}

TEST(TotalLoss, TermByTermOracle) {
  Rng rng(8);
  const LossWeights w;
  for (int t = 0; t < 30; ++t) {
    const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
    std::vector<Tensor> preds;
    for (int k = 0; k < 3; ++k) preds.push_back(oracle::random_tensor(rng, kImg, 0, 1));
    const auto im = imgs(preds);
    const LossTerms terms = total_loss(preds, y, w);
    EXPECT_NEAR(terms.total.item(), oracle::total(im, im, oracle::Img(y), w), 1e-12);
    EXPECT_NEAR(terms.stage, oracle::stage(im, oracle::Img(y)), 1e-12);
    EXPECT_NEAR(terms.contraction, oracle::contraction(im, im, oracle::Img(y)), 1e-12);
  }
}

TEST(LossProperties, NonnegativeAndZeroAtTarget) {
  Rng rng(9);
  const LossWeights w;
  for (int t = 0; t < 50; ++t) {
    const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
    std::vector<Tensor> preds;
    for (int k = 0; k < 3; ++k) preds.push_back(oracle::random_tensor(rng, kImg, 0, 1));
    const LossTerms terms = total_loss(preds, y, w);
    EXPECT_GE(terms.pre, 0.0);
    EXPECT_GE(terms.hessian, 0.0);
    EXPECT_GE(terms.stage, 0.0);
    EXPECT_GE(terms.contraction, 0.0);
    const LossTerms zero = total_loss({y, y, y}, y, w);
    EXPECT_EQ(zero.total.item(), 0.0);
  }
}

namespace {

using TermFn = std::function<Tensor(const Tensor&, const Tensor&)>;

double check_pair_term(Rng& rng, const TermFn& fn) {
  const Tensor p = oracle::random_tensor(rng, kImg);
  const Tensor y = oracle::random_tensor(rng, kImg);
  return oracle::grad_check([&](const Tensor& t) { return fn(t, y); }, p);
}

}  // namespace

TEST(LossGradients, PairTermsMatchFiniteDifferences) {
  Rng rng(10);
  const LossWeights w;
  const std::vector<std::pair<const char*, TermFn>> terms{
      {"mse", mse_loss},
      {"perceptual", perceptual_proxy},
      {"hessian", hessian_loss},
      {"pre", [&](const Tensor& a, const Tensor& b) { return loss_pre(a, b, w); }},
  };
  for (const auto& [name, fn] : terms) {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) worst = std::max(worst, check_pair_term(rng, fn));
    EXPECT_LT(worst, 1e-5) << name;
  }
}

TEST(LossGradients, CascadeTermsMatchFiniteDifferences) {
  Rng rng(11);
  const LossWeights w;
  const std::size_t K = 3;
  double worst_stage = 0.0, worst_contr = 0.0, worst_total = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
    const Tensor flat = oracle::random_tensor(rng, {3, 8 * K, 8}, 0, 1);
    const auto frozen = imgs(split(flat, K));
    const oracle::Img yi(y);

    // Autodiff through the library; finite differences through the oracle
    // with detached references pinned at the unperturbed point.
    auto fd = [&](auto&& f) {
      return oracle::numeric_grad([&](const std::vector<double>& v) { return f(imgs(split(Tensor(Shape{3, 8 * K, 8}, v), K))); },
                                  flat.values());
    };
    auto ad = [&](auto&& f) { return oracle::autodiff_grad([&](const Tensor& x) { return f(slice_preds(x, K)); }, flat); };

    worst_stage = std::max(worst_stage, oracle::rel_error(ad([&](const auto& p) { return stage_loss(p, y); }),
                                                          fd([&](const auto& p) { return oracle::stage(p, yi); })));
    worst_contr = std::max(worst_contr,
                           oracle::rel_error(ad([&](const auto& p) { return contraction_loss(p, y); }),
                                             fd([&](const auto& p) { return oracle::contraction(p, frozen, yi); })));
    worst_total = std::max(worst_total,
                           oracle::rel_error(ad([&](const auto& p) { return total_loss(p, y, w).total; }),
                                             fd([&](const auto& p) { return oracle::total(p, frozen, yi, w); })));
  }
  EXPECT_LT(worst_stage, 1e-5);
  EXPECT_LT(worst_contr, 1e-5);
  EXPECT_LT(worst_total, 1e-5);
}

TEST(LossWeights, NegativeWeightRejected) {
  LossWeights w;
  w.stage = -0.5;
  EXPECT_THROW(w.validate(), Error);
}

TEST(Reduction, MeanFormsArePerElement) {
  Rng rng(12);
  const double n = 3.0 * 8 * 8;
  for (int t = 0; t < 20; ++t) {
    const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
    std::vector<Tensor> preds;
    for (int k = 0; k < 3; ++k) preds.push_back(oracle::random_tensor(rng, kImg, 0, 1));
    EXPECT_NEAR(stage_loss(preds, y, Reduction::mean).item(), stage_loss(preds, y).item() / n, 1e-12);
    std::vector<double> d;
    for (const auto& p : preds) d.push_back(oracle::norm(oracle::sub(oracle::Img(p), oracle::Img(y))) / std::sqrt(n));
    EXPECT_NEAR(contraction_loss(preds, y, Reduction::mean).item(), oracle::contraction_of_d(d), 1e-12);
  }
  EXPECT_EQ(parse_reduction("mean"), Reduction::mean);
  EXPECT_EQ(to_string(Reduction::sum), "sum");
  EXPECT_THROW(parse_reduction("max"), Error);
}

TEST(Reduction, MeanTotalMatchesFiniteDifferences) {
  Rng rng(13);
  LossWeights w;
  w.reduction = Reduction::mean;
  const std::size_t K = 3;
  double worst = 0.0;
  for (int t = 0; t < 30; ++t) {
    const Tensor y = oracle::random_tensor(rng, kImg, 0, 1);
    const Tensor flat = oracle::random_tensor(rng, {3, 8 * K, 8}, 0, 1);
    const auto frozen = split(flat, K);
    // Detached references pinned at the unperturbed point, as in the sum case.
    std::vector<double> prev;
    for (const auto& p : frozen) prev.push_back(stage_distance(p, y).item() / std::sqrt(192.0));
    const auto f = [&](const std::vector<double>& v) {
      const auto p = split(Tensor(Shape{3, 8 * K, 8}, v), K);
      double c = 0.0;
      for (std::size_t k = 1; k < K; ++k) c += std::max(stage_distance(p[k], y).item() / std::sqrt(192.0) - prev[k - 1], 0.0);
      return loss_pre(p.back(), y, w).item() + w.hessian * hessian_loss(p.back(), y).item() +
             w.stage * stage_loss(p, y, Reduction::mean).item() + w.contraction * c;
    };
    const auto ad = oracle::autodiff_grad([&](const Tensor& x) { return total_loss(slice_preds(x, K), y, w).total; }, flat);
    worst = std::max(worst, oracle::rel_error(ad, oracle::numeric_grad(f, flat.values())));
  }
  EXPECT_LT(worst, 1e-5);
}
