#include <gtest/gtest.h>

#include <sstream>

#include "dmil/evaluation.hpp"
#include "dmil/synthdata.hpp"
#include "dmil/training.hpp"

using namespace dmil;

namespace {

GenConfig small(std::uint64_t seed = 1) {
  GenConfig g;
  g.n_images = 40;
  g.feature_dim = 8;
  g.seed = seed;
  return g;
}

std::string text_of(const Dataset& ds) {
  std::ostringstream os;
  write_dataset(os, ds);
  return os.str();
}

}  // namespace

TEST(Generate, PureNormalMix) {
  GenConfig g = small();
  g.class_mix = {1, 0, 0, 0};
  for (const auto& b : generate(g)) {
    EXPECT_EQ(b.weak_label, (WeakLabel{0, 0}));
    EXPECT_TRUE(b.annotations.empty());
  }
}

TEST(Generate, FullRatioOneTagsEveryMalignantImage) {
  GenConfig g = small();
  g.full_ratio = 1.0;
  for (const auto& b : generate(g))
    EXPECT_EQ(b.supervision == Supervision::Full, b.weak_label.y_M == 1);
}

TEST(Generate, FullRatioHalfTagsHalf) {
  GenConfig g = small(7);
  g.n_images = 300;
  g.full_ratio = 0.5;
  int malignant = 0, full = 0;
  for (const auto& b : generate(g)) {
    malignant += b.weak_label.y_M;
    full += b.supervision == Supervision::Full;
  }
  EXPECT_EQ(full, int(std::llround(0.5 * malignant)));
}

TEST(Generate, Deterministic) {
  EXPECT_EQ(generate(small(5)), generate(small(5)));
  EXPECT_NE(generate(small(5)), generate(small(6)));
}

TEST(Generate, AnnotationsMatchWeakLabels) {
  for (const auto& b : generate(small(2))) {
    bool has_m = false, has_b = false;
    for (const auto& a : b.annotations) (a.cls == LesionClass::M ? has_m : has_b) = true;
    EXPECT_EQ(has_m, bool(b.weak_label.y_M));
    EXPECT_EQ(has_b, bool(b.weak_label.y_B));
  }
}

TEST(Generate, EveryLesionIsCoveredByARegion) {
  const GenConfig g = small(3);
  for (const auto& b : generate(g)) {
    EXPECT_EQ(b.m(), 77u);
    for (const auto& a : b.annotations) {
      EXPECT_GE(a.box.x_min, 0);
      EXPECT_LE(a.box.x_max, g.image_width);
      EXPECT_LE(a.box.y_max, g.image_height);
      double best = 0.0;
      for (const auto& r : b.geometry) best = std::max(best, iom(r.box(), a.box));
      EXPECT_GE(best, 0.5);
    }
  }
}

TEST(Generate, SignalSitsOnLesionRegions) {
  GenConfig g = small(4);
  g.n_images = 100;
  g.separation = 4.0;
  double m_sum = 0, m_n = 0, other_sum = 0, other_n = 0;
  for (const auto& b : generate(g)) {
    for (std::size_t i = 0; i < b.m(); ++i) {
      bool hit = false;
      for (const auto& a : b.annotations)
        hit |= a.cls == LesionClass::M && iom(b.geometry[i].box(), a.box) >= 0.5;
      (hit ? m_sum : other_sum) += b.features(i, 0);
      (hit ? m_n : other_n) += 1;
    }
  }
  EXPECT_NEAR(m_sum / m_n, 4.0, 0.3);
  EXPECT_NEAR(other_sum / other_n, 0.0, 0.1);
}

TEST(Generate, InvalidConfigsRejected) {
  GenConfig g = small();
  g.class_mix = {0.5, 0.5, 0.5, 0};
  EXPECT_THROW(generate(g), std::invalid_argument);
  g = small();
  g.image_width = 100;
  EXPECT_THROW(generate(g), std::invalid_argument);
  g = small();
  g.full_ratio = 1.5;
  EXPECT_THROW(generate(g), std::invalid_argument);
}

TEST(Generate, NoSeparationGivesChanceLevelAuroc) {
  GenConfig g;
  g.feature_dim = 16;
  g.separation = 0.0;
  g.n_images = 200;
  g.seed = 21;
  const auto train_bags = generate(g);
  g.n_images = 500;
  g.seed = 22;
  const auto test_bags = generate(g);
  TrainConfig c;
  c.epochs = 10;
  c.hidden_dim = 16;
  c.learning_rate = 1e-3;
  c.batch_size_images = 16;
  const ModelParams p = train(train_bags, c).params;
  const auto scored = score_dataset(test_bags, p);
  std::vector<double> s;
  std::vector<int> l;
  task_vectors(scored, Task::MvsBN, s, l);
  const double a = auroc(s, l);
  EXPECT_GE(a, 0.4);
  EXPECT_LE(a, 0.6);
}

TEST(SubsampleFull, NestedAndExactCounts) {
  GenConfig g = small(8);
  g.n_images = 200;
  g.full_ratio = 1.0;
  const auto bags = generate(g);
  std::vector<std::vector<bool>> kept;
  for (double r : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const auto sub = subsample_full(bags, r, 3);
    std::vector<bool> f;
    std::size_t total = 0, count = 0;
    for (std::size_t i = 0; i < sub.size(); ++i) {
      f.push_back(sub[i].supervision == Supervision::Full);
      count += f.back();
      total += bags[i].supervision == Supervision::Full;
      EXPECT_EQ(sub[i].annotations, bags[i].annotations);
    }
    EXPECT_EQ(count, std::size_t(std::llround(r * double(total))));
    kept.push_back(f);
  }
  for (std::size_t k = 1; k < kept.size(); ++k)
    for (std::size_t i = 0; i < kept[k].size(); ++i)
      if (kept[k - 1][i]) EXPECT_TRUE(kept[k][i]);
}

TEST(DatasetFormat, EmptyListIsHeaderOnly) {
  const Dataset ds{{8, 224, 112}, {}};
  const std::string text = text_of(ds);
  EXPECT_EQ(text, "DMILDS v1 8 224 112\n");
  std::istringstream is(text);
  const Dataset back = read_dataset(is);
  EXPECT_EQ(back.header, ds.header);
  EXPECT_TRUE(back.bags.empty());
}

TEST(DatasetFormat, RewriteIsByteIdentical) {
  GenConfig g = small(9);
  g.n_images = 3;
  g.class_mix = {0, 0, 0, 1};
  g.full_ratio = 1.0;
  const Dataset ds{header_for(g), generate(g)};
  const std::string text = text_of(ds);
  std::istringstream is(text);
  const Dataset back = read_dataset(is);
  EXPECT_EQ(back.bags, ds.bags);
  EXPECT_EQ(text_of(back), text);
}

TEST(DatasetFormat, TruncatedRowNamesTheImage) {
  GenConfig g = small(10);
  g.n_images = 2;
  std::string text = text_of({header_for(g), generate(g)});
  // Drop the last value of the final feature row.
  const auto end = text.find_last_of(' ');
  text = text.substr(0, end) + "\n";
  std::istringstream is(text);
  try {
    read_dataset(is);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.image_id(), "img00001");
    EXPECT_GT(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("img00001"), std::string::npos);
  }
}

TEST(DatasetFormat, BadHeaderRejected) {
  std::istringstream is("NOTADATASET\n");
  EXPECT_THROW(read_dataset(is), ParseError);
}

TEST(DatasetFormat, ShortestRoundTripFloats) {
  for (double v : {0.1, -1e-300, 1.0 / 3.0, 123456.789, 0.0}) {
    double back = 0;
    ASSERT_TRUE(parse_double(format_double(v), back));
    EXPECT_EQ(back, v);
  }
  EXPECT_EQ(format_double(0.1), "0.1");
}
