#include <gtest/gtest.h>

#include <cmath>

#include "lr2flow/framelet.hpp"
#include "lr2flow/operators.hpp"

using namespace lr2flow;

namespace {

FlowConfig config(BankKind bank, std::size_t dims, std::size_t levels, std::size_t blocks = 2) {
  FlowConfig c;
  c.bank = bank;
  c.dims = dims;
  c.spatial = dims == 1 ? Shape{16} : Shape{8, 8};
  c.levels = levels;
  c.blocks = blocks;
  c.width = 16;
  return c;
}

Tensor lowpass_projection(const Tensor& x, const FilterBank& bank, std::size_t levels, std::size_t dims) {
  auto lv = multi_level_analyze(x, bank, levels, dims);
  for (auto& c : lv)
    for (Tensor& h : c.high) h = Tensor::zeros(h.shape());
  return multi_level_synthesize(lv, bank, dims);
}

}  // namespace

TEST(Downscale, IdentityModelIsLowSubband) {
  for (BankKind bank : {BankKind::LinearBspline, BankKind::Haar, BankKind::PixelUnshuffle}) {
    FlowModel m = make_flow_model(config(bank, 2, 2));
    Rng r(1, 0);
    const Tensor x = randn({8, 8}, r);
    EXPECT_LT(max_abs_diff(downscale(m, x), multi_level_analyze(x, m.bank, 2, 2)[1].low), 1e-14);
  }
}

TEST(Downscale, PixelUnshufflePermutation) {
  FlowConfig c = config(BankKind::PixelUnshuffle, 1, 1);
  c.spatial = {4};
  const Tensor y = downscale(make_flow_model(c), Tensor::vector({1, 2, 3, 4}));
  EXPECT_EQ(y, Tensor::vector({1, 3}));
}

TEST(Downscale, ShapeAndFinitenessAudit) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const BankKind bank = static_cast<BankKind>(seed % 3);
    FlowConfig c = config(bank, 2, 1 + seed % 2, 1);
    c.width = 8;
    c.kind = seed % 4 == 0 ? BlockKind::IRes : BlockKind::Coupling;
    FlowModel m = make_flow_model(c);
    randomize_parameters(m, seed, 0.5);
    Rng r(2, seed);
    const Tensor y = downscale(m, rand_uniform({8, 8}, r, 0.0, 1.0));
    EXPECT_EQ(y.shape(), m.level_spatial(c.levels + 1));
    EXPECT_TRUE(y.all_finite());
  }
}

TEST(Downscale, DeterministicAndSeedIndependent) {
  FlowModel m = make_flow_model(config(BankKind::LinearBspline, 2, 1));
  randomize_parameters(m, 3, 0.3);
  Rng r(3, 0);
  const Tensor x = randn({8, 8}, r);
  EXPECT_EQ(downscale(m, x), downscale(m, x));
}

TEST(Upscale, ZeroSigmaIgnoresSeed) {
  FlowModel m = make_flow_model(config(BankKind::LinearBspline, 2, 2));
  randomize_parameters(m, 4, 0.3);
  Rng r(4, 0);
  const Tensor y = downscale(m, randn({8, 8}, r));
  EXPECT_EQ(upscale(m, y, {0.0}, 1, 1), upscale(m, y, {0.0}, 1, 999));
  EXPECT_EQ(upscale(m, y, {0.0}, 3, 1), upscale(m, y, {0.0}, 1, 1));
}

TEST(Upscale, IdentityModelIsLowpassProjection) {
  for (std::size_t dims : {1, 2}) {
    FlowModel m = make_flow_model(config(BankKind::LinearBspline, dims, 2));
    Rng r(5, dims);
    const Tensor x = dims == 1 ? randn({16}, r) : randn({8, 8}, r);
    EXPECT_LT(max_abs_diff(upscale(m, downscale(m, x), {0.0}, 1, 0), lowpass_projection(x, m.bank, 2, dims)), 1e-13);
  }
}

TEST(Upscale, BatchedInput) {
  FlowModel m = make_flow_model(config(BankKind::Haar, 2, 1));
  randomize_parameters(m, 6, 0.3);
  Rng r(6, 0);
  const Tensor x = randn({3, 8, 8}, r);
  const Tensor up = upscale(m, downscale(m, x), {0.2}, 4, 7);
  EXPECT_EQ(up.shape(), x.shape());
}

TEST(Upscale, MonteCarloStability) {
  FlowModel m = make_flow_model(config(BankKind::Haar, 1, 1));
  randomize_parameters(m, 7, 0.3);
  Rng r(7, 0);
  const Tensor y = downscale(m, randn({16}, r));
  const double sigma = 0.1;
  const Tensor a = upscale(m, y, {sigma}, 1024, 11);
  const Tensor b = upscale(m, y, {sigma}, 2048, 11);
  double mean_abs = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean_abs += std::abs(a[i] - b[i]);
  mean_abs /= static_cast<double>(a.size());
  EXPECT_LT(mean_abs, 3.0 * sigma / std::sqrt(1024.0));
  EXPECT_GT(max_abs_diff(a, b), 0.0);
}

TEST(Upscale, RejectsBadArguments) {
  FlowModel m = make_flow_model(config(BankKind::Haar, 1, 1));
  const Tensor y(Shape{8});
  EXPECT_THROW(upscale(m, y, {0.1}, 0, 0), std::invalid_argument);
  EXPECT_THROW(upscale(m, y, {-0.1}, 1, 0), std::invalid_argument);
}

TEST(Operators, TrueLatentsAreLossless) {
  for (BlockKind kind : {BlockKind::Coupling, BlockKind::IRes}) {
    FlowConfig c = config(BankKind::LinearBspline, 2, 2);
    c.kind = kind;
    FlowModel m = make_flow_model(c);
    randomize_parameters(m, 8, 0.3);
    Rng r(8, 0);
    const Tensor x = randn({8, 8}, r);
    const LatentSplit s = flow_forward(m, x);
    EXPECT_LT(max_abs_diff(flow_inverse(m, downscale(m, x), s.z), x), 1e-8);
  }
}

TEST(RoundtripReport, RetainedSubspaceIsExact) {
  FlowModel m = make_flow_model(config(BankKind::Haar, 2, 1));
  Rng r(9, 0);
  Tensor x(Shape{8, 8});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double v = r.normal();
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) x.at(2 * i + a, 2 * j + b) = v;
    }
  const RoundtripReport rep = roundtrip_report(m, x, {0.0}, 1, 0);
  EXPECT_LT(rep.mse, 1e-20);
  EXPECT_TRUE(rep.psnr > 200.0);
  ASSERT_EQ(rep.z_energy.size(), 1u);
  EXPECT_LT(rep.z_energy[0], 1e-20);
}

TEST(RoundtripReport, HaarMseIsDiscardedEnergy) {
  FlowModel m = make_flow_model(config(BankKind::Haar, 2, 2));
  Rng r(10, 0);
  const Tensor x = randn({8, 8}, r);
  const auto lv = multi_level_analyze(x, m.bank, 2, 2);
  double discarded = 0.0;
  for (const auto& c : lv)
    for (const Tensor& h : c.high) discarded += sum_squares(h);
  const RoundtripReport rep = roundtrip_report(m, x, {0.0}, 1, 0);
  EXPECT_NEAR(rep.mse, discarded / 64.0, 1e-14);
  EXPECT_NEAR(rep.psnr, 10.0 * std::log10(1.0 / rep.mse), 1e-12);
}

TEST(RoundtripReport, ZEnergyPerLevel) {
  FlowModel m = make_flow_model(config(BankKind::LinearBspline, 2, 2));
  randomize_parameters(m, 11, 0.3);
  Rng r(11, 0);
  const Tensor x = randn({8, 8}, r);
  const LatentSplit s = flow_forward(m, x);
  const RoundtripReport rep = roundtrip_report(m, x, {0.0}, 1, 0);
  ASSERT_EQ(rep.z_energy.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l)
    EXPECT_DOUBLE_EQ(rep.z_energy[l], sum_squares(s.z[l]) / static_cast<double>(s.z[l].size()));
}
