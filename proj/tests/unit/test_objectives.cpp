#include <gtest/gtest.h>

#include <cmath>

#include "dmil/objectives.hpp"

using namespace dmil;

namespace {

ForwardTrace trace_with_cls(std::vector<std::array<double, 3>> rows) {
  ForwardTrace t;
  t.p_cls = Matrix(rows.size(), 3);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) t.p_cls(i, c) = rows[i][c];
  return t;
}

ForwardTrace trace_with_det(std::vector<double> p_m) {
  ForwardTrace t;
  t.p_cls = Matrix(p_m.size(), 3, 1.0 / 3.0);
  t.p_det_full = Matrix(p_m.size(), 2);
  for (std::size_t i = 0; i < p_m.size(); ++i) t.p_det_full(i, kDetM) = p_m[i];
  return t;
}

}  // namespace

TEST(WeakLoss, PerfectPredictionIsZero) {
  EXPECT_EQ(weak_image_loss(ImageProbs{0.0, 1.0}, {1, 0}).total(), 0.0);
}

TEST(WeakLoss, HalfProbabilities) {
  EXPECT_NEAR(weak_image_loss(ImageProbs{0.5, 0.5}, {1, 0}).total(), 2.0 * std::log(2.0), 1e-15);
  EXPECT_NEAR(weak_image_loss(ImageProbs{0.5, 0.5}, {1, 0}).total(), 1.3863, 5e-5);
}

TEST(WeakLoss, ConfidentWrongBenign) {
  EXPECT_NEAR(weak_image_loss(ImageProbs{0.9, 0.0}, {0, 0}).b, -std::log(0.1), 1e-12);
  EXPECT_NEAR(weak_image_loss(ImageProbs{0.9, 0.0}, {0, 0}).b, 2.3026, 5e-5);
}

TEST(WeakLoss, ClampedAtCertainty) {
  const WeakTerms w = weak_image_loss(ImageProbs{0.0, 1.0}, {0, 0});
  EXPECT_TRUE(std::isfinite(w.m));
  EXPECT_NEAR(w.m, -std::log(kProbEps), 1e-9);
}

TEST(FullClsLoss, PerfectIsZero) {
  const auto t = trace_with_cls({{0, 0, 1}, {0.5, 0.5, 0}});
  const std::vector<RegionLabel> l = {RegionLabel::M, RegionLabel::BN};
  EXPECT_EQ(full_cls_loss(t, l), 0.0);
}

TEST(FullClsLoss, HandValues) {
  const auto m = trace_with_cls({{0.25, 0.25, 0.5}});
  EXPECT_NEAR(full_cls_loss(m, std::vector<RegionLabel>{RegionLabel::M}), std::log(2.0), 1e-15);
  const auto bn = trace_with_cls({{0.4, 0.3, 0.3}});
  EXPECT_NEAR(full_cls_loss(bn, std::vector<RegionLabel>{RegionLabel::BN}), -std::log(0.7), 1e-15);
  EXPECT_NEAR(full_cls_loss(bn, std::vector<RegionLabel>{RegionLabel::BN}), 0.3567, 5e-5);
}

TEST(FullClsLoss, IgnoredRegionsDoNotCount) {
  const auto t = trace_with_cls({{0.4, 0.3, 0.3}, {0.1, 0.1, 0.8}});
  EXPECT_EQ(full_cls_loss(t, std::vector<RegionLabel>{RegionLabel::Ignored, RegionLabel::Ignored}),
            0.0);
}

TEST(FullDetLoss, AllMassOnMalignantIsZero) {
  const auto t = trace_with_det({0.5, 0.5, 0.0});
  const std::vector<RegionLabel> l = {RegionLabel::M, RegionLabel::M, RegionLabel::BN};
  EXPECT_NEAR(*full_det_loss(t, l), 0.0, 1e-15);
}

TEST(FullDetLoss, HandValue) {
  const auto t = trace_with_det({0.25, 0.25, 0.5});
  const std::vector<RegionLabel> l = {RegionLabel::M, RegionLabel::M, RegionLabel::BN};
  EXPECT_NEAR(*full_det_loss(t, l), std::log(2.0), 1e-15);
}

TEST(FullDetLoss, SingleMalignantRegionIsZero) {
  EXPECT_EQ(*full_det_loss(trace_with_det({1.0}), std::vector<RegionLabel>{RegionLabel::M}), 0.0);
}

TEST(FullDetLoss, SkipsImagesWithoutMalignantRegions) {
  const auto t = trace_with_det({0.5, 0.5});
  EXPECT_FALSE(full_det_loss(t, std::vector<RegionLabel>{RegionLabel::BN, RegionLabel::Ignored}));
}

TEST(TotalLoss, NoFullImagesEqualsWeakLoss) {
  std::vector<ForwardTrace> tr = {trace_with_det({1.0}), trace_with_det({1.0})};
  tr[0].p_image = {0.3, 0.6};
  tr[1].p_image = {0.8, 0.1};
  const std::vector<WeakLabel> y = {{1, 0}, {0, 1}};
  const std::vector<std::vector<RegionLabel>> labels(2, {RegionLabel::Ignored});
  const auto split = all_weak_split(2);
  const LossBreakdown l = total_loss(tr, y, labels, split, {});
  const double expect = 0.5 * (-std::log(0.6) - std::log(0.7)) + 0.5 * (-std::log(0.9) - std::log(0.8));
  EXPECT_NEAR(l.total, expect, 1e-15);
  EXPECT_NEAR(l.weak, expect, 1e-15);
}

TEST(TotalLoss, TwoImageBatchByHand) {
  // Image 0 is weak with both weak terms 0.5. Image 1 is full with one M and
  // one BN region; its classification term sums to 1 over m_f = 2 regions
  // and its detection term is 0.2.
  ForwardTrace weak = trace_with_det({1.0});
  weak.p_image.m = 1.0 - std::exp(-0.5);  // y_M = 0: -log(1 - p) = 0.5
  weak.p_image.b = std::exp(-0.5);        // y_B = 1: -log p = 0.5
  ForwardTrace full;
  full.p_cls = Matrix(2, 3);
  full.p_cls(0, kColM) = std::exp(-0.4);
  full.p_cls(0, kColN) = 1.0 - std::exp(-0.4);
  full.p_cls(1, kColM) = 1.0 - std::exp(-0.6);
  full.p_cls(1, kColB) = std::exp(-0.6);
  full.p_det_full = Matrix(2, 2);
  full.p_det_full(0, kDetM) = std::exp(-0.2);
  full.p_det_full(1, kDetM) = 1.0 - std::exp(-0.2);
  full.p_image = {0.25, 0.75};  // y = (1, 0): B term -log 0.75

  const std::vector<ForwardTrace> tr = {weak, full};
  const std::vector<WeakLabel> y = {{0, 1}, {1, 0}};
  const std::vector<std::vector<RegionLabel>> labels = {{RegionLabel::Ignored},
                                                        {RegionLabel::M, RegionLabel::BN}};
  const std::vector<Supervision> sup = {Supervision::Weak, Supervision::Full};
  const auto split = make_split(sup, labels);
  ASSERT_EQ(split.m_f, 2u);
  LossWeights w;
  w.beta = 2.0;  // lambda1 = beta / m_f = 1
  const LossBreakdown l = total_loss(tr, y, labels, split, w);

  // Weak: M term over W = {0}; B term over all n = 2 images.
  const double weak_part = 0.5 + (0.5 + -std::log(0.75)) / 2.0;
  const double full_part = 1.0 * 1.0 + 0.2;
  EXPECT_NEAR(l.weak, weak_part, 1e-12);
  EXPECT_NEAR(l.full_cls, 1.0, 1e-12);
  EXPECT_NEAR(l.full_det, 0.2, 1e-12);
  EXPECT_NEAR(l.total, weak_part + full_part, 1e-12);

  w.lambda2 = 0.0;
  EXPECT_NEAR(total_loss(tr, y, labels, split, w).total, weak_part, 1e-12);

  w.lambda2 = 1.0;
  w.b_term_all_images = false;  // B term over W only
  EXPECT_NEAR(total_loss(tr, y, labels, split, w).weak, 1.0, 1e-12);
}

TEST(TotalLoss, DefaultWeights) {
  const LossWeights w;
  EXPECT_EQ(w.lambda2, 1.0);
  EXPECT_TRUE(w.b_term_all_images);
}

TEST(TotalLoss, EmptyWeakSetIsDegenerate) {
  const std::vector<ForwardTrace> tr = {trace_with_det({1.0})};
  const std::vector<WeakLabel> y = {{1, 0}};
  const std::vector<std::vector<RegionLabel>> labels = {{RegionLabel::M}};
  const std::vector<Supervision> sup = {Supervision::Full};
  const auto split = make_split(sup, labels);
  EXPECT_THROW(total_loss(tr, y, labels, split, {}), DegenerateSplitError);
  LossWeights w;
  w.weak_m_term = false;
  EXPECT_NO_THROW(total_loss(tr, y, labels, split, w));
}

TEST(TotalLoss, ImagesWithoutMalignantRegionsLeaveTheDetectionAverage) {
  std::vector<ForwardTrace> tr = {trace_with_det({1.0}), trace_with_det({0.25, 0.75}),
                                  trace_with_det({0.5, 0.5})};
  const std::vector<WeakLabel> y = {{0, 0}, {1, 0}, {1, 0}};
  const std::vector<std::vector<RegionLabel>> labels = {
      {RegionLabel::Ignored}, {RegionLabel::M, RegionLabel::BN}, {RegionLabel::BN, RegionLabel::Ignored}};
  const std::vector<Supervision> sup = {Supervision::Weak, Supervision::Full, Supervision::Full};
  const auto split = make_split(sup, labels);
  const LossBreakdown l = total_loss(tr, y, labels, split, {});
  EXPECT_NEAR(l.full_det, std::log(4.0), 1e-12);
}
