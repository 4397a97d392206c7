#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gradient_cases.hpp"
#include "oracles.hpp"
#include "pafedfv/losses.hpp"

using namespace pafedfv;

using gradcase::PipelineCase;
using gradcase::random_vector;
using gradcase::worst_for;

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(cross_entropy(std::vector<double>(4, 0.7), 2), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, HandSoftmax) {
  const std::vector<double> f{std::log(2.0), 0.0};
  EXPECT_NEAR(cross_entropy(f, std::vector<double>{1, 0}), std::log(1.5), 1e-15);
}

TEST(CrossEntropy, SaturatedNoOverflow) {
  const std::vector<double> f{1000.0, 0.0};
  const double v = cross_entropy(f, 0);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 0.0, 1e-300);
  EXPECT_NEAR(cross_entropy(f, 1), 1000.0, 1e-9);
}

TEST(CrossEntropy, OneHotErrors) {
  const std::vector<double> f{0.1, 0.2, 0.3};
  EXPECT_THROW(cross_entropy(f, std::vector<double>{0, 0, 0}), DomainError);
  EXPECT_THROW(cross_entropy(f, std::vector<double>{1, 1, 0}), DomainError);
  EXPECT_THROW(cross_entropy(f, std::vector<double>{1, 0}), ShapeError);
}

TEST(CrossEntropy, NonNegativeAndDecreasingInTrueLogit) {
  Rng rng(4);
  for (int c = 0; c < 200; ++c) {
    auto f = random_vector(rng, 5, 10.0);
    EXPECT_GE(cross_entropy(f, 3), 0.0);
    EXPECT_NEAR(cross_entropy(f, 3), oracle::softmax_ce(f, 3), 1e-12);
  }
  double prev = INFINITY;
  for (double big = 0; big < 30; big += 3) {
    const double v = cross_entropy(std::vector<double>{big, 1.0, -1.0}, 0);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(FvCos, AlgebraCases) {
  EXPECT_EQ(fv_cos_loss(std::vector<double>{3, 4}, std::vector<double>{3, 4}), 0.0);
  EXPECT_EQ(fv_cos_loss(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 1.0);
  EXPECT_EQ(fv_cos_loss(std::vector<double>{1, 0}, std::vector<double>{-1, 0}), 2.0);
}

TEST(FvCos, ZeroNormRejected) {
  EXPECT_THROW(fv_cos_loss(std::vector<double>{0, 0}, std::vector<double>{1, 0}), DomainError);
  EXPECT_THROW(fv_cos_loss(std::vector<double>{1, 0}, std::vector<double>{0, 0}), DomainError);
}

TEST(FvCos, ScaleInvariantAndBounded) {
  Rng rng(12);
  for (int c = 0; c < 500; ++c) {
    const auto a = random_vector(rng, 6), b = random_vector(rng, 6);
    const double sa = std::exp(rng.uniform(-5, 5)), sb = std::exp(rng.uniform(-5, 5));
    auto as = a, bs = b;
    for (auto& v : as) v *= sa;
    for (auto& v : bs) v *= sb;
    const double base = fv_cos_loss(a, b);
    EXPECT_NEAR(fv_cos_loss(as, bs), base, 1e-12);
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 2.0);
    EXPECT_NEAR(base, 1.0 - oracle::cosine(a, b), 1e-12);
  }
}

TEST(CenterLoss, ZeroAtCenters) {
  const CenterBank bank({{1, 2}, {3, 4}}, 0.5);
  const std::vector<std::vector<double>> e{{1, 2}, {3, 4}, {1, 2}};
  const std::vector<std::size_t> y{0, 1, 0};
  EXPECT_EQ(center_loss(e, y, bank), 0.0);
}

TEST(CenterLoss, HalfSquaredNorm) {
  const CenterBank bank({{0, 0}}, 0.5);
  const std::vector<std::vector<double>> e{{1, 0}};
  const std::vector<std::size_t> y{0};
  EXPECT_EQ(center_loss(e, y, bank), 0.5);
}

TEST(CenterLoss, SeededBatchMatchesStraightLineFormula) {
  Rng rng(33);
  std::vector<std::vector<double>> centers{random_vector(rng, 4), random_vector(rng, 4)};
  const CenterBank bank(centers, 0.5);
  const std::vector<std::vector<double>> e{random_vector(rng, 4), random_vector(rng, 4), random_vector(rng, 4)};
  const std::vector<std::size_t> y{1, 0, 1};
  double expect = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int d = 0; d < 4; ++d) expect += 0.5 * (e[i][d] - centers[y[i]][d]) * (e[i][d] - centers[y[i]][d]);
  EXPECT_NEAR(center_loss(e, y, bank), expect, 1e-14);
}

TEST(CenterLoss, UnknownLabel) {
  const CenterBank bank({{0, 0}}, 0.5);
  const std::vector<std::vector<double>> e{{1, 0}};
  const std::vector<std::size_t> y{3};
  EXPECT_THROW(center_loss(e, y, bank), LookupError);
}

TEST(UpdateCenters, ZeroRateKeepsBank) {
  const CenterBank bank({{1, 1}, {2, 2}}, 0.0);
  const std::vector<std::vector<double>> e{{5, 5}};
  const std::vector<std::size_t> y{0};
  EXPECT_EQ(update_centers(bank, e, y), bank);
}

TEST(UpdateCenters, FullStepToSample) {
  const CenterBank bank({{1, 1}, {2, 2}}, 1.0);
  const std::vector<std::vector<double>> e{{5, -5}, {7, 8}};
  const std::vector<std::size_t> y{0, 1};
  const auto next = update_centers(bank, e, y);
  EXPECT_EQ(next.center(0), (std::vector<double>{5, -5}));
  EXPECT_EQ(next.center(1), (std::vector<double>{7, 8}));
}

TEST(UpdateCenters, HalfStepHandCase) {
  const CenterBank bank({{0, 0}, {9, 9}}, 0.5);
  const std::vector<std::vector<double>> e{{2, 2}};
  const std::vector<std::size_t> y{0};
  const auto next = update_centers(bank, e, y);
  EXPECT_EQ(next.center(0), (std::vector<double>{1, 1}));
  EXPECT_EQ(next.center(1), (std::vector<double>{9, 9}));  // untouched
}

TEST(TotalLoss, Linearity) {
  EXPECT_NEAR(total_loss(0.1, 0.2, 0.3, {1, 1, 1}), 0.6, 1e-15);
  EXPECT_EQ(total_loss(0.1, 0.2, 0.3, {0, 1, 0}), 0.2);
  EXPECT_NEAR(total_loss(2.0, std::log(4.0), 0.5, {0.5, 1.0, 0.01}), 2.3913, 1e-4);
  EXPECT_NEAR(total_loss(2.0, std::log(4.0), 0.5, {0.5, 1.0, 0.01}), 1.0 + std::log(4.0) + 0.005, 1e-15);
}

TEST(TotalLoss, LinearInEachWeight) {
  const double a = total_loss(0.3, 0.7, 1.1, {1.0, 2.0, 3.0});
  const double b = total_loss(0.3, 0.7, 1.1, {2.0, 2.0, 3.0});
  const double c = total_loss(0.3, 0.7, 1.1, {3.0, 2.0, 3.0});
  EXPECT_NEAR(c - b, b - a, 1e-14);
  EXPECT_NEAR(b - a, 0.3, 1e-14);
}

TEST(FusedLogits, ZeroChannelsGiveZeroLogits) {
  const ChannelArch arch{{3, 4, 2}, Activation::Tanh};
  const ChannelModel l(arch, ParamVector::zeros(ChannelModel::param_count(arch)));
  const ChannelModel g(arch, ParamVector::zeros(ChannelModel::param_count(arch)));
  Rng rng(1);
  const auto f = Head::init(HeadKind::Fusion, 4, 3, rng);
  const auto k = Head::init(HeadKind::Classifier, 3, 5, rng);
  EXPECT_EQ(fused_logits(l, g, f, k, std::vector<double>{1, 2, 3}), std::vector<double>(5, 0.0));
}

TEST(FusedLogits, ConcatenationOrderLocalFirst) {
  // Bias-only channels: local emits (1, 0), federated emits (0, 1).
  const ChannelArch arch{{1, 2}, Activation::Identity};
  const ChannelModel l(arch, ParamVector({0, 0, 1, 0}));
  const ChannelModel g(arch, ParamVector({0, 0, 0, 1}));
  // Classifier-kind identity keeps the concatenation visible without the tanh.
  const Head f = Head::identity(HeadKind::Classifier, 4, 4);
  const Head k = Head::identity(HeadKind::Classifier, 4, 4);
  const std::vector<double> x{0.5};
  EXPECT_EQ(fused_logits(l, g, f, k, x), (std::vector<double>{1, 0, 0, 1}));
  EXPECT_EQ(concat(std::vector<double>{1, 0}, std::vector<double>{0, 1}), (std::vector<double>{1, 0, 0, 1}));

  // With the tanh fusion layer the order is the same.
  const Head ft = Head::identity(HeadKind::Fusion, 4, 4);
  const auto y = fused_logits(l, g, ft, k, x);
  EXPECT_DOUBLE_EQ(y[0], std::tanh(1.0));
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 0.0);
  EXPECT_DOUBLE_EQ(y[3], std::tanh(1.0));
}

TEST(FusedLogits, SeededGolden) {
  // Pinned from a one-off numpy evaluation of the same parameters.
  Rng rng(11);
  const auto l = ChannelModel::init({{3, 5, 2}, Activation::Tanh}, rng);
  const auto g = ChannelModel::init({{3, 4, 2}, Activation::Tanh}, rng);
  const auto f = Head::init(HeadKind::Fusion, 4, 3, rng);
  const auto k = Head::init(HeadKind::Classifier, 3, 4, rng);
  const std::vector<double> x{0.3, -1.2, 0.7};
  const std::vector<double> golden{-0.07392449960340902, -0.020071505953512283, 0.060657087921095074,
                                   0.05015996819021868};
  const auto y = fused_logits(l, g, f, k, x);
  ASSERT_EQ(y.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], golden[i], 1e-14);
}

TEST(FusedLogits, ShapeMismatch) {
  Rng rng(1);
  const auto l = ChannelModel::init({{3, 2}}, rng);
  const auto g = ChannelModel::init({{3, 2}}, rng);
  const auto f = Head::init(HeadKind::Fusion, 5, 3, rng);
  const auto k = Head::init(HeadKind::Classifier, 3, 2, rng);
  EXPECT_THROW(fused_logits(l, g, f, k, std::vector<double>{1, 2, 3}), ShapeError);
}

// Gradient checks: every loss over >= 100 seeded cases, each checking all parameters.

TEST(LossGradients, CrossEntropyOnLocalChannel) { EXPECT_LT(gradcase::worst_local_ce(101, 120), 1e-4); }

TEST(LossGradients, CrossEntropyOnFusedLogits) { EXPECT_LT(worst_for({0.0, 1.0, 0.0}, 102, 110), 1e-4); }

TEST(LossGradients, CenterLoss) { EXPECT_LT(worst_for({0.0, 0.0, 1.0}, 103, 110), 1e-4); }

TEST(LossGradients, FvCos) { EXPECT_LT(worst_for({1.0, 0.0, 0.0}, 104, 110), 1e-4); }

TEST(LossGradients, Total) { EXPECT_LT(worst_for({0.5, 1.0, 0.01}, 105, 110), 1e-4); }

TEST(LossGradients, FvCosInputGradient) {
  Rng rng(106);
  for (int c = 0; c < 100; ++c) {
    const auto a = random_vector(rng, 5), b = random_vector(rng, 5);
    const auto g = fv_cos_grad(a, b);
    const auto na = oracle::numeric_gradient([&](const oracle::Vec& v) { return fv_cos_loss(v, b); }, a);
    const auto nb = oracle::numeric_gradient([&](const oracle::Vec& v) { return fv_cos_loss(a, v); }, b);
    for (int i = 0; i < 5; ++i) {
      EXPECT_LT(oracle::rel_error(g.first[i], na[i]), 1e-4);
      EXPECT_LT(oracle::rel_error(g.second[i], nb[i]), 1e-4);
    }
  }
}

TEST(TotalLossBatch, TermsMatchDirectEvaluation) {
  Rng rng(107);
  const auto c = PipelineCase::make(rng);
  const LossWeights w{0.5, 1.0, 0.01};
  const auto r = c.eval(c.flat, w);
  double fv = 0.0, ce = 0.0, cen = 0.0;
  const std::size_t n = c.inputs.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto fl = oracle::mlp_forward(c.la.widths, c.slice(c.flat, 0, c.nl), c.inputs[i]);
    const auto fg = oracle::mlp_forward(c.ga.widths, c.slice(c.flat, c.nl, c.ng), c.inputs[i]);
    const auto joined = concat(fl, fg);
    const auto emb = oracle::mlp_forward({joined.size(), c.emb}, c.slice(c.flat, c.nl + c.ng, c.nf), joined, true, false);
    const auto logits = oracle::mlp_forward({c.emb, c.classes}, c.slice(c.flat, c.nl + c.ng + c.nf, c.nc), emb, false, false);
    fv += (1.0 - oracle::cosine(fl, fg)) / n;
    ce += oracle::softmax_ce(logits, c.labels[i]) / n;
    for (std::size_t d = 0; d < c.emb; ++d) {
      const double diff = emb[d] - c.bank.center(c.labels[i])[d];
      cen += 0.5 * diff * diff / n;
    }
  }
  EXPECT_NEAR(r.terms.fv_cos, fv, 1e-12);
  EXPECT_NEAR(r.terms.cross2, ce, 1e-12);
  EXPECT_NEAR(r.terms.center, cen, 1e-12);
  EXPECT_NEAR(r.terms.total, 0.5 * fv + ce + 0.01 * cen, 1e-12);
}
