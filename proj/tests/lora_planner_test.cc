#include "emberxp/lora_planner.h"

#include <cmath>

#include <gtest/gtest.h>

#include "emberxp/error.h"

namespace emberxp {
namespace {

// Independent recount: every layer gets each module's (in x r) and (r x out) factors.
int64_t CountParams(const BaseModelSpec& spec, int64_t rank) {
  int64_t total = 0;
  for (int64_t layer = 0; layer < spec.layers; ++layer) {
    for (const auto& m : spec.injected_modules) total += m.in_dim * rank + rank * m.out_dim;
  }
  return total;
}

double Round2(double v) { return std::round(v * 100.0) / 100.0; }

TEST(BaseModelSpec, DefaultArchitecture) {
  BaseModelSpec spec;
  EXPECT_EQ(spec.injection_points(), 154);
  EXPECT_EQ(spec.params_per_rank(), CountParams(spec, 1));
  EXPECT_EQ(spec.params_per_rank(), 788'480);
}

TEST(Plan, MatchesRecount) {
  BaseModelSpec spec;
  for (int64_t r : {0, 1, 16, 96, 256, 512, 896, 1000}) {
    auto p = Plan(spec, r);
    EXPECT_EQ(p.trainable_params, CountParams(spec, r)) << r;
    EXPECT_EQ(p.adapter_bytes, 4 * p.trainable_params);
    EXPECT_DOUBLE_EQ(p.adapter_mib, static_cast<double>(p.adapter_bytes) / (1024.0 * 1024.0));
    EXPECT_DOUBLE_EQ(p.trainable_pct, 100.0 * static_cast<double>(p.trainable_params) /
                                          static_cast<double>(spec.base_params + p.trainable_params));
    EXPECT_EQ(p.alpha, 32.0);
    EXPECT_EQ(p.dropout, 0.1);
  }
}

TEST(Plan, LinearInRank) {
  BaseModelSpec spec;
  const auto one = Plan(spec, 1).trainable_params;
  for (int64_t r = 0; r <= 1024; r += 37) EXPECT_EQ(Plan(spec, r).trainable_params, r * one);
}

TEST(Plan, RankZeroAndNegative) {
  BaseModelSpec spec;
  auto p = Plan(spec, 0);
  EXPECT_EQ(p.trainable_params, 0);
  EXPECT_EQ(p.adapter_bytes, 0);
  EXPECT_EQ(p.trainable_pct, 0.0);
  EXPECT_THROW(Plan(spec, -1), Error);
}

TEST(PlanTable, DefaultRanksReproducePercentagesAndSizes) {
  BaseModelSpec spec;
  auto t = PlanTable(spec, DefaultRanks());
  ASSERT_EQ(t.rows.size(), 5u);
  const double pct[] = {1.13, 6.44, 15.50, 26.85, 39.11};
  const double mib[] = {48.13, 288.75, 770.00, 1540.00, 2695.00};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(t.rows[i].rank, DefaultRanks()[i]);
    EXPECT_DOUBLE_EQ(Round2(t.rows[i].trainable_pct), pct[i]) << i;
    EXPECT_DOUBLE_EQ(Round2(t.rows[i].adapter_mib), mib[i]) << i;
  }
  EXPECT_EQ(t.full_params, spec.base_params);
  EXPECT_EQ(t.full_bytes, 4 * spec.base_params);
  EXPECT_DOUBLE_EQ(Round2(t.full_mib), 4196.35);
}

TEST(Savings, RankTwoFiftySix) {
  auto s = ComputeSavings(BaseModelSpec{}, 256);
  EXPECT_NEAR(s.size_reduction_pct, 81.65, 0.2);
  EXPECT_NEAR(s.size_reduction_pct, s.params_reduction_pct, 1e-12);
  EXPECT_THROW(ComputeSavings(BaseModelSpec{}, 0), Error);
}

TEST(Savings, MonotoneDecreasingInRank) {
  BaseModelSpec spec;
  double prev = 100.0;
  for (int64_t r = 1; r <= 1024; r *= 2) {
    double s = ComputeSavings(spec, r).size_reduction_pct;
    EXPECT_LT(s, prev) << r;
    prev = s;
  }
}

TEST(Savings, ZeroWhenAdapterMatchesModel) {
  BaseModelSpec spec;
  spec.layers = 1;
  spec.injected_modules = {{"w", 4, 6}};
  spec.base_params = 20;  // rank 2 -> 2 * (4 + 6) = 20 params
  auto s = ComputeSavings(spec, 2);
  EXPECT_DOUBLE_EQ(s.size_reduction_pct, 0.0);
  EXPECT_DOUBLE_EQ(Plan(spec, 2).trainable_pct, 50.0);
}

TEST(TableCsv, DefaultTable) {
  auto csv = TableCsv(PlanTable(BaseModelSpec{}, DefaultRanks()));
  EXPECT_EQ(csv,
            "rank,trainable_params,trainable_pct,adapter_bytes,adapter_mib\n"
            "16,12615680,1.13,50462720,48.13\n"
            "96,75694080,6.44,302776320,288.75\n"
            "256,201850880,15.50,807403520,770.00\n"
            "512,403701760,26.85,1614807040,1540.00\n"
            "896,706478080,39.11,2825912320,2695.00\n"
            "full,1100048384,100.00,4400193536,4196.35\n");
}

TEST(TableText, OneLinePerRowPlusHeader) {
  auto text = TableText(PlanTable(BaseModelSpec{}, DefaultRanks()));
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 7);
  EXPECT_NE(text.find("full"), std::string::npos);
  EXPECT_NE(text.find("2695.00"), std::string::npos);
}

}  // namespace
}  // namespace emberxp
