#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "dmil/evaluation.hpp"
#include "dmil/experiment.hpp"

using namespace dmil;

namespace {

double pair_count_auroc(const std::vector<double>& s, const std::vector<int>& l) {
  double num = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) {
        pairs += 1;
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return num / pairs;
}

EvalCurve diagonal() {
  EvalCurve c;
  c.points = {{1.0, 0.0, 0.0}, {0.0, 1.0, 1.0}};
  return c;
}

// Two regions side by side; region 0 covers [0,224)^2.
ScoredImage two_region_image(double d0, double d1, std::vector<LesionAnnotation> lesions) {
  ScoredImage s;
  s.geometry = {{0, 0, 0, 0, 224}, {0, 1, 448, 0, 224}};
  s.region_scores = Matrix(2, 2);
  s.region_scores(0, kDetM) = d0;
  s.region_scores(1, kDetM) = d1;
  s.annotations = std::move(lesions);
  s.true_class = s.annotations.empty() ? ImageClass::N : ImageClass::M;
  return s;
}

const LesionAnnotation kLesionOnRegion0{LesionClass::M, {0, 0, 224, 224}};

}  // namespace

TEST(TaskScores, ClassMappingAndScores) {
  ScoredImage s;
  s.p_M = 0.3;
  s.p_B = 0.7;
  s.true_class = ImageClass::MB;
  EXPECT_EQ(task_scores(s, Task::MvsBN).label, 1);
  EXPECT_EQ(task_scores(s, Task::MvsBN).score, 0.3);
  EXPECT_EQ(task_scores(s, Task::MBvsN).score, 0.7);
  s.true_class = ImageClass::B;
  EXPECT_EQ(task_scores(s, Task::MvsBN).label, 0);
  EXPECT_EQ(task_scores(s, Task::MBvsN).label, 1);
  s.true_class = ImageClass::N;
  EXPECT_EQ(task_scores(s, Task::MBvsN).label, 0);
}

TEST(Auroc, HandExample) {
  const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  const std::vector<int> l = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auroc(s, l), 0.75);
}

TEST(Auroc, SeparatedAndTied) {
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.5, 0.5, 0.5}, std::vector<int>{0, 1, 1}), 0.5);
}

TEST(Auroc, SingleClassIsUndefined) {
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetricError);
}

TEST(Auroc, MatchesPairCounting) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> q(0, 9), n(2, 40);
  for (int trial = 0; trial < 500; ++trial) {
    const int size = n(rng);
    std::vector<double> s;
    std::vector<int> l;
    for (int i = 0; i < size; ++i) {
      s.push_back(q(rng) / 9.0);
      l.push_back(i == 0 ? 0 : i == 1 ? 1 : q(rng) % 2);
    }
    EXPECT_EQ(auroc(s, l), pair_count_auroc(s, l));
  }
}

TEST(RocCurve, StartsAtOriginAndEndsAtOne) {
  const EvalCurve c = roc_curve(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1});
  EXPECT_TRUE(std::isinf(c.points.front().threshold));
  EXPECT_EQ(c.points.front().x, 0.0);
  EXPECT_EQ(c.points.back().x, 1.0);
  EXPECT_EQ(c.points.back().y, 1.0);
  EXPECT_EQ(c.points.size(), 5u);
}

TEST(Paucr, PerfectAndChance) {
  const EvalCurve perfect = roc_curve(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1});
  EXPECT_DOUBLE_EQ(paucr(perfect), 1.0);
  EXPECT_NEAR(paucr(diagonal(), 0.8, 1.0), 0.1, 1e-15);
}

TEST(Paucr, FullRangeEqualsAuroc) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s;
    std::vector<int> l;
    for (int i = 0; i < 30; ++i) {
      l.push_back(i % 3 == 0);
      s.push_back(std::round((g(rng) + l.back()) * 4) / 4);
    }
    EXPECT_NEAR(paucr(roc_curve(s, l), 0.0, 1.0), auroc(s, l), 1e-12);
  }
}

TEST(Paucr, DegenerateRangeThrows) {
  EXPECT_THROW(paucr(diagonal(), 0.9, 0.9), std::invalid_argument);
  EXPECT_THROW(paucr(diagonal(), 0.5, 1.2), std::invalid_argument);
}

TEST(SpecAtSensTest, PerfectAndChance) {
  const EvalCurve perfect = roc_curve(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1});
  EXPECT_DOUBLE_EQ(spec_at_sens(perfect, 0.85).specificity, 1.0);
  EXPECT_NEAR(spec_at_sens(diagonal(), 0.9).specificity, 0.1, 1e-15);
  EXPECT_TRUE(spec_at_sens(diagonal(), 0.9).reachable);
}

TEST(SpecAtSensTest, UnreachableIsFlagged) {
  EvalCurve c;
  c.points = {{1.0, 0.0, 0.0}, {0.5, 0.3, 0.6}};
  const SpecAtSens r = spec_at_sens(c, 0.9);
  EXPECT_FALSE(r.reachable);
  EXPECT_EQ(r.specificity, 0.0);
}

TEST(Froc, HighThresholdFiresNothing) {
  const std::vector<ScoredImage> set = {two_region_image(0.9, 0.2, {kLesionOnRegion0}),
                                        two_region_image(0.3, 0.1, {})};
  const EvalCurve c = froc(set, LesionClass::M, {2.0});
  EXPECT_EQ(c.points[0].x, 0.0);
  EXPECT_EQ(c.points[0].y, 0.0);
}

TEST(Froc, ZeroThresholdGivesUpperEnvelope) {
  // The second positive image's lesion is covered by no region.
  const std::vector<ScoredImage> set = {
      two_region_image(0.9, 0.2, {kLesionOnRegion0}),
      two_region_image(0.3, 0.1, {{LesionClass::M, {224, 300, 448, 400}}})};
  const EvalCurve c = froc(set, LesionClass::M, {0.0});
  EXPECT_DOUBLE_EQ(c.points[0].y, 0.5);
  EXPECT_DOUBLE_EQ(c.points[0].x, 3.0 / 2.0);
}

TEST(Froc, ToyExample) {
  const std::vector<ScoredImage> set = {two_region_image(0.9, 0.2, {kLesionOnRegion0}),
                                        two_region_image(0.3, 0.1, {})};
  const EvalCurve c = froc(set, LesionClass::M, {0.25});
  EXPECT_DOUBLE_EQ(c.points[0].y, 1.0);
  EXPECT_DOUBLE_EQ(c.points[0].x, 0.5);

  FrocOptions positives_only;
  positives_only.fppi_denominator = FrocOptions::Denominator::PositiveImages;
  EXPECT_DOUBLE_EQ(froc(set, LesionClass::M, {0.25}, positives_only).points[0].x, 0.0);

  FrocOptions filtered;
  filtered.include = {true, false};
  EXPECT_DOUBLE_EQ(froc(set, LesionClass::M, {0.25}, filtered).points[0].x, 0.0);
}

TEST(Froc, NoAnnotatedImagesThrows) {
  const std::vector<ScoredImage> set = {two_region_image(0.3, 0.1, {})};
  EXPECT_THROW(froc(set, LesionClass::M), UndefinedMetricError);
}

TEST(Froc, DefaultThresholdsAreMonotone) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u;
  std::vector<ScoredImage> set;
  for (int i = 0; i < 20; ++i)
    set.push_back(two_region_image(u(rng), u(rng), i % 2 ? std::vector{kLesionOnRegion0}
                                                         : std::vector<LesionAnnotation>{}));
  const EvalCurve c = froc(set, LesionClass::M);
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    EXPECT_LT(c.points[i].threshold, c.points[i - 1].threshold);
    EXPECT_GE(c.points[i].x, c.points[i - 1].x);
    EXPECT_GE(c.points[i].y, c.points[i - 1].y);
  }
  EXPECT_DOUBLE_EQ(sensitivity_at_fppi(c, 1e9), 1.0);
}

TEST(ProbabilityPlane, SingleRowAndRoundTrip) {
  ScoredImage s;
  s.image_id = "a";
  s.p_M = 0.01;
  s.p_B = 0.02;
  std::ostringstream os;
  write_probability_plane(os, std::vector<ScoredImage>{s});
  EXPECT_EQ(os.str(), "image_id,p_M,p_B,true_class\na,0.01,0.02,N\n");

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u;
  std::vector<ScoredImage> set;
  const ImageClass classes[] = {ImageClass::N, ImageClass::B, ImageClass::M, ImageClass::MB};
  for (int i = 0; i < 50; ++i) {
    ScoredImage t;
    t.image_id = "img" + std::to_string(i);
    t.p_M = u(rng);
    t.p_B = u(rng);
    t.true_class = classes[i % 4];
    set.push_back(t);
  }
  std::stringstream ss;
  write_probability_plane(ss, set);
  const auto rows = read_probability_plane(ss);
  ASSERT_EQ(rows.size(), set.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].p_M, set[i].p_M);
    EXPECT_EQ(rows[i].p_B, set[i].p_B);
    EXPECT_EQ(rows[i].true_class, set[i].true_class);
  }
}

TEST(ProbabilityPlane, RejectsUnknownClass) {
  std::istringstream is("image_id,p_M,p_B,true_class\na,0.1,0.2,X\n");
  EXPECT_THROW(read_probability_plane(is), ParseError);
}

TEST(Report, CoversBothTasks) {
  GenConfig g;
  g.n_images = 40;
  g.feature_dim = 8;
  g.seed = 5;
  const auto bags = generate(g);
  Rng rng(1);
  TrainConfig c;
  c.hidden_dim = 8;
  const ModelParams p = initialize(c, 8, rng);
  const EvalReport r = evaluate(p, bags);
  std::ostringstream a, b;
  write_report_text(a, r);
  write_report_text(b, evaluate(p, bags));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str().find("MvsBN"), std::string::npos);
  EXPECT_NE(a.str().find("MBvsN"), std::string::npos);
}

TEST(Sweep, RatioZeroRowMatchesPlainWeakRun) {
  GenConfig g;
  g.n_images = 40;
  g.feature_dim = 8;
  g.seed = 6;
  g.full_ratio = 1.0;
  const auto train_bags = generate(g);
  g.seed = 7;
  g.full_ratio = 0.0;
  const auto test_bags = generate(g);
  TrainConfig c;
  c.epochs = 2;
  c.hidden_dim = 8;
  c.batch_size_images = 8;
  const std::vector<Variant> variants = {Variant::ClsDetRS};
  const std::vector<double> ratios = {1.0, 0.0};
  const std::vector<std::uint64_t> seeds = {3};
  const auto rows = run_sweep(train_bags, test_bags, c, variants, ratios, seeds, 2);
  ASSERT_EQ(rows.size(), 2u);
  const auto serial = run_sweep(train_bags, test_bags, c, variants, ratios, seeds, 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(serial[i].ratio, rows[i].ratio);
    EXPECT_EQ(serial[i].auroc, rows[i].auroc);
  }

  c.lambda2 = 0.0;
  c.seed = 3;
  const EvalReport weak = evaluate(train(train_bags, c).params, test_bags);
  EXPECT_EQ(rows[1].ratio, 0.0);
  EXPECT_EQ(rows[1].auroc, weak.mvsbn.auroc);
  EXPECT_EQ(rows[1].froc_sens, weak.froc_m_sens_at_fppi);
}

TEST(Sweep, DefaultRatioGrid) {
  EXPECT_EQ(kDefaultSweepRatios, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
}

TEST(Stats, MeanAndStandardError) {
  const std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
  const MeanSe m = mean_se(v);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  // sample variance 5/3, se = sqrt(5/3 / 4)
  EXPECT_NEAR(m.se, std::sqrt(5.0 / 12.0), 1e-15);
  EXPECT_NEAR(pooled_se(m, m), std::sqrt(2.0 * 5.0 / 12.0), 1e-15);
}
