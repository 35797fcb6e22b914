#include "emberxp/gbdt.h"

#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "emberxp/error.h"
#include "test_support.h"

namespace emberxp {
namespace {

constexpr const char* kStumpModel = R"(tree
version=v3
num_class=1
num_tree_per_iteration=1
label_index=0
max_feature_idx=2
objective=binary sigmoid:1
feature_names=Column_0 Column_1 Column_2

Tree=0
num_leaves=2
num_cat=0
split_feature=0
split_gain=12.5
threshold=0.5
decision_type=2
left_child=-1
right_child=-2
leaf_value=-1 2
leaf_weight=10 30
leaf_count=10 30
internal_value=0
internal_weight=40
internal_count=40
is_linear=0
shrinkage=1


end of trees

feature_importances:
Column_0=1
)";

// Two-level tree over features 1 and 2 plus a single-leaf tree.
constexpr const char* kTwoTreeModel = R"(tree
version=v3
num_class=1
max_feature_idx=3
objective=binary sigmoid:1

Tree=0
num_leaves=3
num_cat=0
split_feature=1 2
threshold=1.5 -0.25
decision_type=2 0
left_child=1 -2
right_child=-1 -3
leaf_value=0.75 -0.5 0.25
leaf_count=20 5 15
internal_count=40 20
is_linear=0
shrinkage=0.1

Tree=1
num_leaves=1
num_cat=0
leaf_value=0.125
leaf_count=40
is_linear=0
shrinkage=1

end of trees
)";

TEST(ParseModel, Stump) {
  auto ens = ParseModel(kStumpModel);
  ASSERT_EQ(ens.trees.size(), 1u);
  EXPECT_EQ(ens.num_features, 3u);
  const auto& t = ens.trees[0];
  EXPECT_EQ(t.split_feature, std::vector<int>{0});
  EXPECT_EQ(t.threshold, std::vector<double>{0.5});
  EXPECT_EQ(t.leaf_value, (std::vector<double>{-1.0, 2.0}));
  EXPECT_EQ(t.leaf_cover, (std::vector<double>{10.0, 30.0}));
  EXPECT_EQ(t.internal_cover, std::vector<double>{40.0});
  EXPECT_TRUE(t.default_left[0]);
  EXPECT_EQ(t.missing_type[0], MissingType::kNone);
}

TEST(RawMargin, HandStump) {
  auto ens = ParseModel(kStumpModel);
  EXPECT_EQ(RawMargin(ens, std::vector<double>{0.3, 0, 0}), -1.0);
  EXPECT_EQ(RawMargin(ens, std::vector<double>{0.5, 0, 0}), -1.0);  // <= goes left
  EXPECT_EQ(RawMargin(ens, std::vector<double>{0.51, 0, 0}), 2.0);
  EXPECT_NEAR(PredictScore(ens, std::vector<double>{0.3, 0, 0}), 0.26894, 1e-5);
}

TEST(RawMargin, HandTwoTreeFixture) {
  auto ens = ParseModel(kTwoTreeModel);
  ASSERT_EQ(ens.trees.size(), 2u);
  // x1 <= 1.5 -> node 1: x2 <= -0.25 -> leaf 1 (-0.5) else leaf 2 (0.25); x1 > 1.5 -> leaf 0.
  EXPECT_NEAR(RawMargin(ens, std::vector<double>{0, 1.0, -1.0, 0}), -0.5 + 0.125, 1e-12);
  EXPECT_NEAR(RawMargin(ens, std::vector<double>{0, 1.0, 0.0, 0}), 0.25 + 0.125, 1e-12);
  EXPECT_NEAR(RawMargin(ens, std::vector<double>{0, 2.0, -1.0, 0}), 0.75 + 0.125, 1e-12);
  // NaN on node 0 (default left) then node 1 (default right).
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_NEAR(RawMargin(ens, std::vector<double>{0, nan, nan, 0}), 0.25 + 0.125, 1e-12);
}

TEST(RawMargin, EmptyEnsembleAndZeroTreeFile) {
  Ensemble empty;
  empty.num_features = 2;
  EXPECT_EQ(RawMargin(empty, std::vector<double>{1, 2}), 0.0);
  auto parsed = ParseModel("tree\nmax_feature_idx=4\nobjective=binary sigmoid:1\n\nend of trees\n");
  EXPECT_TRUE(parsed.trees.empty());
  EXPECT_EQ(parsed.num_features, 5u);
  EXPECT_EQ(RawMargin(parsed, std::vector<double>(5, 0.0)), 0.0);
}

TEST(RawMargin, Linearity) {
  Ensemble one;
  one.num_features = 1;
  one.trees = {testing::Stump(0, 0.5, -1.0, 2.0)};
  Ensemble two = one;
  two.trees.push_back(one.trees[0]);
  for (double x : {0.1, 0.9}) {
    EXPECT_EQ(RawMargin(two, std::vector<double>{x}), 2.0 * RawMargin(one, std::vector<double>{x}));
  }
}

TEST(RawMargin, DimensionMismatch) {
  auto ens = ParseModel(kStumpModel);
  EXPECT_THROW(RawMargin(ens, std::vector<double>{0.1}), DimensionError);
}

TEST(MissingValues, ZeroTypeRoutesZeroToDefault) {
  Ensemble ens;
  ens.num_features = 1;
  auto t = testing::Stump(0, -1.0, -1.0, 2.0);
  t.missing_type = {MissingType::kZero};
  t.default_left = {true};
  ens.trees = {t};
  EXPECT_EQ(RawMargin(ens, std::vector<double>{0.0}), -1.0);
  EXPECT_EQ(RawMargin(ens, std::vector<double>{0.5}), 2.0);
  ens.trees[0].missing_type = {MissingType::kNone};
  EXPECT_EQ(RawMargin(ens, std::vector<double>{0.0}), 2.0);
}

TEST(PredictScore, SigmoidProperties) {
  EXPECT_EQ(Sigmoid(0.0), 0.5);
  EXPECT_GT(Sigmoid(20.0), 0.9999);
  EXPECT_LT(Sigmoid(800.0), 1.0);
  EXPECT_GT(Sigmoid(-800.0), 0.0);
  double prev = Sigmoid(-30.0);
  for (double m = -29.9; m <= 30.0; m += 0.1) {
    const double s = Sigmoid(m);
    EXPECT_GT(s, prev) << m;
    prev = s;
  }
}

TEST(PredictScore, SigmoidParameterScalesMargin) {
  std::string text = kStumpModel;
  text.replace(text.find("sigmoid:1"), 9, "sigmoid:2");
  auto ens = ParseModel(text);
  EXPECT_EQ(ens.sigmoid, 2.0);
  EXPECT_NEAR(PredictScore(ens, std::vector<double>{0.3, 0, 0}), Sigmoid(-2.0), 1e-15);
}

std::string Replace(std::string text, const std::string& from, const std::string& to) {
  text.replace(text.find(from), from.size(), to);
  return text;
}

void ExpectFormatError(const std::string& text, const std::string& needle) {
  try {
    ParseModel(text);
    FAIL() << "accepted model; expected error containing " << needle;
  } catch (const ModelFormatError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(ParseModel, Rejections) {
  ExpectFormatError(Replace(kStumpModel, "decision_type=2", "decision_type=3"), "categorical");
  ExpectFormatError(Replace(kStumpModel, "num_cat=0", "num_cat=1"), "num_cat");
  ExpectFormatError(Replace(kStumpModel, "objective=binary sigmoid:1", "objective=regression"),
                    "objective");
  ExpectFormatError(Replace(kStumpModel, "num_class=1", "num_class=3"), "num_class");
  ExpectFormatError(Replace(kStumpModel, "leaf_value=-1 2", "leaf_value=-1"), "Tree=0 key leaf_value");
  ExpectFormatError(Replace(kStumpModel, "threshold=0.5\n", ""), "Tree=0: missing key threshold");
  ExpectFormatError(Replace(kStumpModel, "internal_count=40", "internal_count=41"), "internal_count");
  ExpectFormatError(Replace(kStumpModel, "split_feature=0", "split_feature=7"), "split_feature");
  ExpectFormatError(Replace(kStumpModel, "threshold=0.5", "threshold=abc"), "threshold");
  ExpectFormatError(Replace(kStumpModel, "is_linear=0", "is_linear=1"), "linear");
  ExpectFormatError(Replace(kTwoTreeModel, "Tree=1", "Tree=3"), "Tree=3");
}

TEST(SerializeModel, RoundTripPreservesPredictions) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    testing::RandomEnsembleSpec spec;
    auto ens = testing::RandomEnsemble(rng, spec);
    auto again = ParseModel(SerializeModel(ens));
    ASSERT_EQ(again.trees.size(), ens.trees.size());
    for (std::size_t t = 0; t < ens.trees.size(); ++t) {
      EXPECT_EQ(again.trees[t].leaf_value, ens.trees[t].leaf_value);
      EXPECT_EQ(again.trees[t].threshold, ens.trees[t].threshold);
      EXPECT_EQ(again.trees[t].leaf_cover, ens.trees[t].leaf_cover);
      EXPECT_EQ(again.trees[t].default_left, ens.trees[t].default_left);
    }
    for (int k = 0; k < 20; ++k) {
      auto x = testing::RandomInput(rng, ens.num_features);
      EXPECT_EQ(RawMargin(again, x), RawMargin(ens, x));
    }
  }
}

TEST(TrainGbdt, SeparatesSyntheticClasses) {
  SyntheticCorpusOptions o;
  o.benign = 150;
  o.malicious = 150;
  o.unlabeled = 0;
  auto fx = BuildSyntheticFixture(o);
  int correct = 0, total = 0;
  for (const auto& r : fx.records) {
    const double s = PredictScore(fx.model, Vectorize(r).values);
    correct += (s > 0.5) == (r.label == Label::kMalicious);
    ++total;
  }
  EXPECT_GT(static_cast<double>(correct) / total, 0.85);
  for (std::size_t t = 0; t < fx.model.trees.size(); ++t) {
    EXPECT_NO_THROW(fx.model.trees[t].Validate(fx.model.num_features, "tree"));
  }
}

}  // namespace
}  // namespace emberxp
