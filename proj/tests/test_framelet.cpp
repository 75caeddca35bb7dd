#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lr2flow/framelet.hpp"
#include "lr2flow/rng.hpp"

using namespace lr2flow;

namespace {

const BankKind kAllBanks[] = {BankKind::LinearBspline, BankKind::Haar, BankKind::PixelUnshuffle};

double max_diff(const Coefficients& a, const Coefficients& b) {
  double m = max_abs_diff(a.low, b.low);
  for (std::size_t i = 0; i < a.high.size(); ++i) m = std::max(m, max_abs_diff(a.high[i], b.high[i]));
  return m;
}

}  // namespace

TEST(MakeBank, Taps) {
  const FilterBank b = make_bank(BankKind::LinearBspline);
  EXPECT_EQ(b.r(), 2u);
  EXPECT_EQ(b.name, "linear-bspline");
  EXPECT_NEAR(b.filters[0][0] + b.filters[0][1] + b.filters[0][2], std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(b.filters[1][0] + b.filters[1][1] + b.filters[1][2], 0.0, 1e-15);
  EXPECT_NEAR(b.filters[2][0] + b.filters[2][1] + b.filters[2][2], 0.0, 1e-15);
  EXPECT_EQ(make_bank("haar").r(), 1u);
  EXPECT_EQ(make_bank("pixel-unshuffle").filters[1], (std::vector<double>{0.0, 1.0}));
  EXPECT_THROW(make_bank("db4"), std::invalid_argument);
}

TEST(VerifyUep, BsplineAt16) { EXPECT_LT(verify_uep(make_bank(BankKind::LinearBspline), 16), 1e-12); }

TEST(VerifyUep, HaarAt8) { EXPECT_LT(verify_uep(make_bank(BankKind::Haar), 8), 1e-14); }

TEST(VerifyUep, DetectsScaledLowpass) {
  FilterBank b = make_bank(BankKind::Haar);
  for (double& v : b.filters[0]) v *= 2.0;
  EXPECT_GT(verify_uep(b, 8), 0.1);
}

TEST(VerifyUep, OddSizeThrows) { EXPECT_THROW(verify_uep(make_bank(BankKind::Haar), 7), std::invalid_argument); }

TEST(VerifyUep, AllBanksAllSizes1dAnd2d) {
  for (BankKind k : kAllBanks) {
    const FilterBank b = make_bank(k);
    for (std::size_t n : {8, 16, 32, 64}) {
      EXPECT_LT(verify_uep(b, n), 1e-10) << b.name << " n=" << n;
      if (n <= 16) {
        EXPECT_LT(verify_uep_2d(b, n), 1e-10) << b.name << " 2-D n=" << n;
      }
    }
  }
}

TEST(Analyze, HaarImpulse) {
  Tensor e(Shape{8});
  e[0] = 1.0;
  const Coefficients c = analyze(e, make_bank(BankKind::Haar));
  const double s = 1.0 / std::sqrt(2.0);
  EXPECT_EQ(c.low.values(), (std::vector<double>{s, 0, 0, 0}));
  ASSERT_EQ(c.high.size(), 1u);
  EXPECT_EQ(c.high[0].values(), (std::vector<double>{s, 0, 0, 0}));
  EXPECT_LT(max_abs_diff(synthesize(c, make_bank(BankKind::Haar)), e), 1e-15);
}

TEST(Analyze, PixelUnshufflePermutation) {
  const Coefficients c = analyze(Tensor::vector({1, 2, 3, 4}), make_bank(BankKind::PixelUnshuffle));
  EXPECT_EQ(c.low.values(), (std::vector<double>{1, 3}));
  EXPECT_EQ(c.high[0].values(), (std::vector<double>{2, 4}));
}

TEST(Analyze, ConstantSignalHasNoHighFrequency) {
  for (BankKind k : {BankKind::LinearBspline, BankKind::Haar}) {
    const Coefficients c = analyze(Tensor({16}, 0.7), make_bank(k));
    for (const Tensor& h : c.high) EXPECT_LT(max_abs(h), 1e-15);
    const Coefficients c2 = analyze(Tensor({8, 8}, 0.7), make_bank(k), 2);
    for (const Tensor& h : c2.high) EXPECT_LT(max_abs(h), 1e-15);
  }
}

TEST(Analyze, BsplineTotalLengthIsThreeHalves) {
  const Coefficients c = analyze(Tensor({32}, 1.0), make_bank(BankKind::LinearBspline));
  std::size_t total = c.low.size();
  for (const Tensor& h : c.high) total += h.size();
  EXPECT_EQ(total, 48u);
}

TEST(Analyze, TwoDimensionalSubbandCount) {
  const Coefficients c = analyze(Tensor({8, 8}, 1.0), make_bank(BankKind::LinearBspline), 2);
  EXPECT_EQ(c.subbands(), 9u);
  EXPECT_EQ(c.low.shape(), (Shape{4, 4}));
}

TEST(Analyze, OddAxisNamed) {
  try {
    analyze(Tensor({4, 6, 5}), make_bank(BankKind::Haar), 2);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 2"), std::string::npos);
  }
}

TEST(Analyze, MatchesExplicitMatrix) {
  Rng r(3, 0);
  const FilterBank b = make_bank(BankKind::LinearBspline);
  const Tensor x = randn({32}, r);
  const Coefficients c = analyze(x, b);
  const Tensor wx = kernels::matmul(analysis_matrix(b, 32), x.reshaped({32, 1}));
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_NEAR(wx[i], c.low[i], 1e-14);
    EXPECT_NEAR(wx[16 + i], c.high[0][i], 1e-14);
    EXPECT_NEAR(wx[32 + i], c.high[1][i], 1e-14);
  }
  EXPECT_LT(max_abs_diff(synthesize(c, b), x), 1e-10);
}

TEST(Synthesize, RoundTripAllBanks1dAnd2d) {
  Rng r(11, 0);
  double worst = 0.0;
  for (BankKind k : kAllBanks) {
    const FilterBank b = make_bank(k);
    for (int i = 0; i < 50; ++i) {
      const Tensor x1 = randn({32}, r);
      worst = std::max(worst, max_abs_diff(synthesize(analyze(x1, b), b), x1));
      const Tensor x2 = randn({8, 16}, r);
      worst = std::max(worst, max_abs_diff(synthesize(analyze(x2, b, 2), b, 2), x2));
    }
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(Synthesize, HaarZeroHighIsLowpassProjection) {
  Rng r(12, 0);
  const FilterBank b = make_bank(BankKind::Haar);
  const Tensor x = randn({8}, r);
  Coefficients c = analyze(x, b);
  c.high[0] = Tensor::zeros(c.high[0].shape());
  const Tensor wl = low_matrix(b, 8);
  const Tensor proj = kernels::matmul(kernels::matmul(wl, wl, true, false), x.reshaped({8, 1}));
  EXPECT_LT(max_abs_diff(synthesize(c, b), proj.reshaped({8})), 1e-14);
}

TEST(Synthesize, IsAdjointOfAnalyze) {
  Rng r(13, 0);
  for (BankKind k : kAllBanks) {
    const FilterBank b = make_bank(k);
    for (std::size_t dims : {1, 2}) {
      const Tensor x = dims == 1 ? randn({16}, r) : randn({8, 8}, r);
      const Coefficients wx = analyze(x, b, dims);
      Coefficients c = wx;
      c.low = randn(wx.low.shape(), r);
      for (Tensor& h : c.high) h = randn(h.shape(), r);
      double lhs = 0.0;
      for (std::size_t s = 0; s < c.subbands(); ++s) lhs += dot(wx.band(s), c.band(s));
      EXPECT_NEAR(lhs, dot(x, synthesize(c, b, dims)), 1e-10);
    }
  }
}

TEST(Synthesize, InconsistentShapesThrow) {
  const FilterBank b = make_bank(BankKind::Haar);
  Coefficients c = analyze(Tensor({8}, 1.0), b);
  c.high[0] = Tensor::zeros({3});
  EXPECT_THROW(synthesize(c, b), ShapeError);
  c.high.clear();
  EXPECT_THROW(synthesize(c, b), ShapeError);
}

TEST(Properties, Linearity) {
  Rng r(14, 0);
  const FilterBank b = make_bank(BankKind::LinearBspline);
  const Tensor x = randn({16}, r), y = randn({16}, r);
  Tensor z(Shape{16});
  for (std::size_t i = 0; i < 16; ++i) z[i] = 1.5 * x[i] - 0.25 * y[i];
  const Coefficients cx = analyze(x, b), cy = analyze(y, b), cz = analyze(z, b);
  for (std::size_t s = 0; s < cz.subbands(); ++s)
    for (std::size_t i = 0; i < cz.band(s).size(); ++i)
      EXPECT_NEAR(cz.band(s)[i], 1.5 * cx.band(s)[i] - 0.25 * cy.band(s)[i], 1e-12);
}

TEST(Properties, BsplineEnergyPreserved) {
  Rng r(15, 0);
  const FilterBank b = make_bank(BankKind::LinearBspline);
  for (int i = 0; i < 10; ++i) {
    const Tensor x = randn({32}, r);
    const Coefficients c = analyze(x, b);
    double e = 0.0;
    for (std::size_t s = 0; s < c.subbands(); ++s) e += sum_squares(c.band(s));
    EXPECT_NEAR(e, sum_squares(x), 1e-10);
  }
}

TEST(Properties, SeparableAxisOrderIrrelevant) {
  Rng r(16, 0);
  const FilterBank b = make_bank(BankKind::LinearBspline);
  const Tensor x = randn({8, 16}, r);
  const Coefficients c = analyze(x, b, 2);
  const std::size_t k = b.channels();
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const Tensor rows_first = kernels::conv_stride(kernels::conv_stride(x, b.filters[i], 0, 2), b.filters[j], 1, 2);
      const Tensor cols_first = kernels::conv_stride(kernels::conv_stride(x, b.filters[j], 1, 2), b.filters[i], 0, 2);
      EXPECT_LT(max_abs_diff(c.band(i * k + j), rows_first), 1e-14);
      EXPECT_LT(max_abs_diff(c.band(i * k + j), cols_first), 1e-14);
    }
  }
}

TEST(MultiLevel, SingleLevelEqualsAnalyze) {
  Rng r(17, 0);
  const FilterBank b = make_bank(BankKind::LinearBspline);
  const Tensor x = randn({16}, r);
  const auto lv = multi_level_analyze(x, b, 1);
  ASSERT_EQ(lv.size(), 1u);
  EXPECT_EQ(max_diff(lv[0], analyze(x, b)), 0.0);
}

TEST(MultiLevel, TwoLevelsQuarterLength) {
  const auto lv = multi_level_analyze(Tensor({16}, 1.0), make_bank(BankKind::LinearBspline), 2);
  EXPECT_EQ(lv[1].low.size(), 4u);
  EXPECT_EQ(lv[1].level, 2u);
}

TEST(MultiLevel, ThreeLevelRoundTrip) {
  Rng r(18, 0);
  for (BankKind k : kAllBanks) {
    const FilterBank b = make_bank(k);
    const Tensor x = randn({64}, r);
    EXPECT_LT(max_abs_diff(multi_level_synthesize(multi_level_analyze(x, b, 3), b), x), 1e-9);
  }
}

TEST(MultiLevel, DivisibilityEnforced) {
  EXPECT_THROW(multi_level_analyze(Tensor({12}, 1.0), make_bank(BankKind::Haar), 3), ShapeError);
}

TEST(Stacked, MatchesCoefficientForm) {
  Rng r(19, 0);
  for (BankKind k : kAllBanks) {
    const FilterBank b = make_bank(k);
    for (std::size_t dims : {1, 2}) {
      const Tensor x = dims == 1 ? randn({2, 16}, r) : randn({2, 8, 8}, r);
      ad::Tape t;
      ad::Var c = analyze_stacked(t.constant(x), b, dims);
      const Coefficients ref = analyze(x, b, dims);
      ASSERT_EQ(c.shape()[1], ref.subbands());
      for (std::size_t s = 0; s < ref.subbands(); ++s) {
        const Tensor band = ad::slice(c, 1, s, 1).value();
        for (std::size_t i = 0; i < band.size(); ++i) EXPECT_EQ(band[i], ref.band(s)[i]);
      }
      Shape spatial(x.shape().begin() + 1, x.shape().end());
      const Tensor back = synthesize_stacked(c, b, dims, spatial).value();
      EXPECT_LT(max_abs_diff(back, x), 1e-12);
    }
  }
}

TEST(Serialization, WritesSubbandsAndManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "lr2flow_coeffs";
  std::filesystem::remove_all(dir);
  const FilterBank b = make_bank(BankKind::LinearBspline);
  const auto lv = multi_level_analyze(Tensor({8, 8}, 0.5), b, 1, 2);
  save_coefficients(dir, lv, b);
  EXPECT_TRUE(std::filesystem::exists(dir / "subbands.txt"));
  for (int s = 0; s < 9; ++s) EXPECT_TRUE(std::filesystem::exists(dir / ("level1_band" + std::to_string(s) + ".lrtf")));
  EXPECT_EQ(load_lrtf((dir / "level1_band0.lrtf").string()), lv[0].low);
  std::filesystem::remove_all(dir);
}
