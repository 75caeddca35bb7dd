#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "lr2flow/lrtf.hpp"
#include "lr2flow/train.hpp"

using namespace lr2flow;

namespace {

FlowConfig small(BankKind bank, std::size_t levels = 1, BlockKind kind = BlockKind::Coupling) {
  FlowConfig c;
  c.bank = bank;
  c.kind = kind;
  c.spatial = {8, 8};
  c.levels = levels;
  c.blocks = 2;
  c.width = 16;
  return c;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lr2flow_tasks_" + name);
  std::filesystem::remove_all(p);
  return p;
}

// Quantizer indices of every 8x8 block of a [H, W] image.
std::vector<double> quantizer_indices(const Tensor& img, int quality) {
  const auto q = quantization_table(quality);
  const Tensor d = dct_matrix_64();
  std::vector<double> out;
  for (std::size_t bi = 0; bi < img.dim(0) / 8; ++bi)
    for (std::size_t bj = 0; bj < img.dim(1) / 8; ++bj)
      for (std::size_t k = 0; k < 64; ++k) {
        double c = 0.0;
        for (std::size_t p = 0; p < 64; ++p) c += d.at(k, p) * (255.0 * img[(bi * 8 + p / 8) * img.dim(1) + bj * 8 + p % 8] - 128.0);
        out.push_back(std::nearbyint(c / q[k]));
      }
  return out;
}

double model_distance(FlowModel& a, FlowModel& b) {
  auto pa = parameters(a), pb = parameters(b);
  double m = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) m = std::max(m, max_abs_diff(*pa[i], *pb[i]));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bicubic

TEST(Bicubic, ConstantIsPreserved) {
  const Tensor c(Shape{8, 12}, 0.3);
  const Tensor down = bicubic_resize(c, 0.5);
  const Tensor up = bicubic_resize(c, 2.0);
  EXPECT_EQ(down.shape(), (Shape{4, 6}));
  EXPECT_EQ(up.shape(), (Shape{16, 24}));
  EXPECT_LT(max_abs_diff(down, Tensor(Shape{4, 6}, 0.3)), 1e-15);
  EXPECT_LT(max_abs_diff(up, Tensor(Shape{16, 24}, 0.3)), 1e-15);
  EXPECT_LT(max_abs_diff(bicubic_resize(up, 0.5), c), 1e-15);
}

TEST(Bicubic, CosineResponse) {
  // Decimation samples 2j + 1/2 with taps -1/16, 9/16, 9/16, -1/16 at offsets -3/2, -1/2, 1/2, 3/2.
  const double w = 2.0 * std::numbers::pi / 8.0;
  const double gain = 2.0 * (9.0 / 16.0 * std::cos(w / 2.0) - 1.0 / 16.0 * std::cos(1.5 * w));
  EXPECT_NEAR(gain, 1.0, 0.02);
  Tensor x(Shape{16, 16});
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) x.at(i, j) = std::cos(w * static_cast<double>(j));
  const Tensor y = bicubic_resize(x, 0.5);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y.at(i, j), gain * std::cos(w * (2.0 * j + 0.5)), 1e-12);
}

TEST(Bicubic, KernelWeights) {
  const Tensor r = bicubic_matrix(8, 4);
  EXPECT_DOUBLE_EQ(r.at(1, 1), -0.0625);
  EXPECT_DOUBLE_EQ(r.at(1, 2), 0.5625);
  EXPECT_DOUBLE_EQ(r.at(1, 3), 0.5625);
  EXPECT_DOUBLE_EQ(r.at(1, 4), -0.0625);
  EXPECT_DOUBLE_EQ(r.at(0, 7), -0.0625);
}

TEST(Bicubic, BatchedAndErrors) {
  Rng g(1, 0);
  const Tensor x = randn({3, 8, 8}, g);
  const Tensor y = bicubic_resize(x, 0.5);
  EXPECT_EQ(y.shape(), (Shape{3, 4, 4}));
  Tensor one(Shape{8, 8});
  std::copy(x.data().begin() + 64, x.data().begin() + 128, one.data().begin());
  const Tensor y1 = bicubic_resize(one, 0.5);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(y[16 + i], y1[i]);
  EXPECT_THROW(bicubic_resize(Tensor(Shape{7, 8}), 0.5), ShapeError);
  EXPECT_THROW(bicubic_resize(Tensor(Shape{8, 8}), 3.0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// JPEG simulator

TEST(Jpeg, QualityScaling) {
  const auto q50 = quantization_table(50);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(q50[i], kLuminanceTable[i]);
  for (double v : quantization_table(100)) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(quantization_table(10)[0], 80.0);   // (16 * 500 + 50) / 100
  EXPECT_EQ(quantization_table(90)[0], 3.0);    // (16 * 20 + 50) / 100
  EXPECT_EQ(quantization_table(1)[63], 255.0);  // clamped
  EXPECT_THROW(quantization_table(0), std::invalid_argument);
  EXPECT_THROW(quantization_table(101), std::invalid_argument);
}

TEST(Jpeg, DctIsOrthonormal) {
  const Tensor d = dct_matrix_64();
  EXPECT_LT(max_abs_diff(kernels::matmul(d, d, false, true), Tensor::eye(64)), 1e-14);
}

TEST(Jpeg, ConstantHalf) {
  // 0.5 shifts to -0.5, DC = -4, -4 / 16 rounds to 0, decodes to 128 / 255.
  JpegSimConfig cfg;
  const Tensor out = jpeg_simulate(Tensor(Shape{8, 8}, 0.5), cfg);
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 128.0 / 255.0);
  for (int qf : {10, 50, 95}) {
    cfg.quality = qf;
    const double step = quantization_table(qf)[0] / 8.0 / 255.0;
    for (double c : {0.1, 0.5, 0.77}) {
      const Tensor o = jpeg_simulate(Tensor(Shape{16, 16}, c), cfg);
      EXPECT_LE(max_abs_diff(o, Tensor(Shape{16, 16}, o[0])), 1e-12);
      EXPECT_LE(std::abs(o[0] - c), step);
    }
  }
}

TEST(Jpeg, IdempotentOnQuantizerLattice) {
  Rng g(2, 0);
  JpegSimConfig cfg;
  for (int qf : {30, 50, 90}) {
    cfg.quality = qf;
    const Tensor once = jpeg_simulate(rand_uniform({16, 16}, g, 0.2, 0.8), cfg);
    const Tensor twice = jpeg_simulate(once, cfg);
    const auto a = quantizer_indices(once, qf), b = quantizer_indices(twice, qf);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(std::abs(a[i] - b[i]), 1.0);
  }
}

TEST(Jpeg, AgreesWithReferenceCodec) {
  const std::string dir = LR2FLOW_FIXTURE_DIR;
  const Tensor input = load_lrtf(dir + "/ramp16_input.lrtf");
  const Tensor reference = load_lrtf(dir + "/ramp16_q50_decoded.lrtf");
  JpegSimConfig cfg;
  cfg.quality = 50;
  const double ours = psnr(input, jpeg_simulate(input, cfg));
  const double theirs = psnr(input, reference);
  EXPECT_NEAR(theirs, 46.747777, 1e-5);
  EXPECT_NEAR(ours, theirs, 1.0);
}

TEST(Jpeg, PaddingAndBatch) {
  Rng g(3, 0);
  JpegSimConfig cfg;
  const Tensor x = rand_uniform({2, 10, 12}, g, 0.0, 1.0);
  const Tensor y = jpeg_simulate(x, cfg);
  EXPECT_EQ(y.shape(), x.shape());
  for (double v : y.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(jpeg_simulate(Tensor(Shape{8}), cfg), ShapeError);
}

TEST(Jpeg, StraightThroughGradientIsIdentity) {
  Rng g(4, 0);
  ad::Tape t;
  ad::Var x = t.leaf(rand_uniform({8, 8}, g, 0.3, 0.7));
  JpegSimConfig cfg;
  cfg.quality = 95;
  ad::Var y = jpeg_simulate(x, cfg);
  t.backward(ad::sum(y));
  const Tensor gx = t.grad(x);
  for (double v : gx.data()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Jpeg, AdditiveNoiseMode) {
  Rng g(5, 0);
  const Tensor x = rand_uniform({8, 8}, g, 0.3, 0.7);
  JpegSimConfig cfg;
  cfg.rounding = RoundingMode::AdditiveNoise;
  const Tensor eval = jpeg_simulate(x, cfg);
  JpegSimConfig st;
  EXPECT_EQ(eval, jpeg_simulate(x, st));
  cfg.train = true;
  EXPECT_THROW(jpeg_simulate(x, cfg), std::invalid_argument);
  Rng n1(6, 0), n2(6, 0);
  const Tensor a = jpeg_simulate(x, cfg, &n1);
  EXPECT_EQ(a, jpeg_simulate(x, cfg, &n2));
  EXPECT_GT(max_abs_diff(a, eval), 0.0);
}

// ---------------------------------------------------------------------------
// Losses

TEST(RescaleLoss, RetainedSubspaceHasZeroHrLoss) {
  FlowModel m = make_flow_model(small(BankKind::Haar));
  Rng g(7, 0);
  Tensor x(Shape{8, 8});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double v = g.uniform();
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) x.at(2 * i + a, 2 * j + b) = v;
    }
  EXPECT_LT(loss_rescaling(m, x, {}).c1, 1e-13);
}

TEST(RescaleLoss, TrueLatentsGiveZeroLoss) {
  FlowModel m = make_flow_model(small(BankKind::LinearBspline, 2));
  randomize_parameters(m, 8, 0.3);
  Rng g(8, 0);
  EXPECT_LT(loss_rescaling(m, rand_uniform({2, 8, 8}, g, 0, 1), {1.0, 0.0, 0.0}, true).total, 1e-8);
}

TEST(RescaleLoss, ComponentsMatchIndependentRecomputation) {
  FlowModel m = make_flow_model(small(BankKind::LinearBspline, 2));
  randomize_parameters(m, 9, 0.3);
  Rng g(9, 0);
  const Tensor x = rand_uniform({3, 8, 8}, g, 0, 1);
  const RescaleLossWeights w{1.0, 0.05, 1e-5};
  const LossValues v = loss_rescaling(m, x, w);
  const LatentSplit s = flow_forward(m, x);
  double dist = 0.0;
  for (const Tensor& z : s.z) dist += sum_squares(z);
  dist /= 3.0;
  const Tensor rec = upscale(m, s.y, {0.0}, 1, 0);
  double hr = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) hr += std::abs(rec[i] - x[i]);
  hr /= 3.0;
  const Tensor bic = bicubic_resize(bicubic_resize(x, 0.5), 0.5);
  double lr = 0.0;
  for (std::size_t i = 0; i < bic.size(); ++i) lr += (s.y[i] - bic[i]) * (s.y[i] - bic[i]);
  lr /= 3.0;
  EXPECT_NEAR(v.c1, hr, 1e-12 * hr);
  EXPECT_NEAR(v.c2, lr, 1e-12 * lr);
  EXPECT_NEAR(v.c3, dist, 1e-12 * dist);
  EXPECT_NEAR(v.total, hr + 0.05 * lr + 1e-5 * dist, 1e-12 * v.total);
}

TEST(RescaleLoss, RejectsZeroOrNegativeWeights) {
  FlowModel m = make_flow_model(small(BankKind::Haar));
  EXPECT_THROW(loss_rescaling(m, Tensor(Shape{8, 8}), {0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(loss_rescaling(m, Tensor(Shape{8, 8}), {-1, 0, 0}), std::invalid_argument);
}

TEST(CompressionLoss, UnitTableIsNearRescaling) {
  FlowConfig c = small(BankKind::LinearBspline);
  c.spatial = {16, 16};
  FlowModel m = make_flow_model(c);
  Rng g(10, 0);
  const Tensor x = rand_uniform({16, 16}, g, 0.0, 0.5);  // keeps y inside [0, 1]
  JpegSimConfig cfg;
  cfg.quality = 100;
  const double comp = loss_compression(m, x, {}, cfg).c1;
  const double resc = loss_rescaling(m, x, {}).c1;
  // one 8x8 block of y, coefficient error <= 1/2 each: ||dy||_2 <= 4/255
  EXPECT_LE(std::abs(comp - resc), 16.0 * 4.0 / 255.0);
}

TEST(CompressionLoss, QuantizationOnlyHurtsOnIdentityModel) {
  FlowConfig c = small(BankKind::LinearBspline);
  c.spatial = {16, 16};
  FlowModel m = make_flow_model(c);
  const ToyDataset d = make_synthetic_dataset(50, {16, 16}, 11);
  JpegSimConfig cfg;
  cfg.quality = 30;
  int violations = 0;
  for (const Tensor& x : d.patches)
    if (loss_compression(m, x, {}, cfg).c1 < loss_rescaling(m, x, {}).c1) ++violations;
  EXPECT_EQ(violations, 0);
}

TEST(CompressionLoss, RequiresTwoDimensionalModel) {
  FlowConfig c = small(BankKind::Haar);
  c.dims = 1;
  c.spatial = {16};
  EXPECT_THROW(loss_compression(make_flow_model(c), Tensor(Shape{16}), {}, JpegSimConfig{}), std::invalid_argument);
}

TEST(Denoise, IdentityHeadReproducesInput) {
  FlowModel m = make_flow_model(small(BankKind::LinearBspline, 2));
  randomize_parameters(m, 12, 0.3);
  const RestorationHead h = make_restoration_head(m, 16, 2, 1);
  Rng g(12, 0);
  const Tensor xn = rand_uniform({8, 8}, g, 0, 1);
  EXPECT_LT(max_abs_diff(denoise(m, h, xn), xn), 1e-10);
}

TEST(Denoise, ZeroHeadIsLowpassProjection) {
  FlowModel m = make_flow_model(small(BankKind::LinearBspline, 2));
  RestorationHead h = make_restoration_head(m, 16, 2, 1);
  h.residual = false;
  Rng g(13, 0);
  const Tensor xn = rand_uniform({8, 8}, g, 0, 1);
  auto lv = multi_level_analyze(xn, m.bank, 2, 2);
  for (auto& c : lv)
    for (Tensor& b : c.high) b = Tensor::zeros(b.shape());
  EXPECT_LT(max_abs_diff(denoise(m, h, xn), multi_level_synthesize(lv, m.bank, 2)), 1e-13);
}

TEST(DenoiseLoss, CleanInputIdentityHeadIsZero) {
  FlowModel m = make_flow_model(small(BankKind::LinearBspline));
  randomize_parameters(m, 14, 0.3);
  const RestorationHead h = make_restoration_head(m, 16, 2, 1);
  Rng g(14, 0);
  const Tensor x = rand_uniform({2, 8, 8}, g, 0, 1);
  const LossValues v = loss_denoising(m, h, x, x, {});
  EXPECT_LT(v.c1, 1e-9);
  EXPECT_EQ(v.c2, 0.0);
  EXPECT_EQ(v.c3, 0.0);
}

TEST(DenoiseLoss, WeightsIsolateLowFrequencyTerm) {
  FlowModel m = make_flow_model(small(BankKind::LinearBspline));
  randomize_parameters(m, 15, 0.3);
  const RestorationHead h = make_restoration_head(m, 16, 2, 1);
  Rng g(15, 0);
  const Tensor xc = rand_uniform({8, 8}, g, 0, 1);
  Tensor xn = xc;
  for (double& v : xn.data()) v += 0.1 * g.normal();
  const LossValues v = loss_denoising(m, h, xc, xn, {0.0, 1.0, 0.0});
  EXPECT_EQ(v.total, v.c2);
  EXPECT_GT(v.c2, 0.0);
}

TEST(DenoiseLoss, ComponentsMatchIndependentRecomputation) {
  FlowModel m = make_flow_model(small(BankKind::LinearBspline, 2));
  randomize_parameters(m, 16, 0.3);
  RestorationHead h = make_restoration_head(m, 16, 2, 1);
  Rng g(16, 0);
  for (Tensor& w : h.mlp.w)
    for (double& v : w.data()) v = 0.1 * g.normal();
  const Tensor xc = rand_uniform({8, 8}, g, 0, 1);
  Tensor xn = xc;
  for (double& v : xn.data()) v += 0.1 * g.normal();
  const LossValues v = loss_denoising(m, h, xc, xn, {});

  const LatentSplit sc = flow_forward(m, xc), sn = flow_forward(m, xn);
  Tensor in(Shape{1, h.mlp.w[0].dim(0)});
  std::size_t k = 0;
  for (const Tensor& z : sn.z)
    for (double e : z.data()) in[k++] = e;
  for (double e : sn.y.data()) in[k++] = e;
  const Tensor r = mlp_eval(h.mlp, in);
  std::vector<Tensor> zhat = sn.z;
  k = 0;
  for (Tensor& z : zhat)
    for (double& e : z.data()) e += r[k++];
  const Tensor xhat = flow_inverse(m, sn.y, zhat);
  double img = 0.0, lf = 0.0, hf = 0.0;
  for (std::size_t i = 0; i < xc.size(); ++i) img += std::abs(xhat[i] - xc[i]);
  for (std::size_t i = 0; i < sc.y.size(); ++i) lf += (sn.y[i] - sc.y[i]) * (sn.y[i] - sc.y[i]);
  for (std::size_t l = 0; l < zhat.size(); ++l)
    for (std::size_t i = 0; i < zhat[l].size(); ++i) hf += (sc.z[l][i] - zhat[l][i]) * (sc.z[l][i] - zhat[l][i]);
  EXPECT_NEAR(v.c1, img, 1e-12);
  EXPECT_NEAR(v.c2, lf, 1e-12);
  EXPECT_NEAR(v.c3, hf, 1e-12);
}

TEST(TaskLosses, GradientsMatchFiniteDifferences) {
  FlowModel m = make_flow_model(small(BankKind::LinearBspline));
  randomize_parameters(m, 17, 0.3);
  RestorationHead h = make_restoration_head(m, 8, 2, 1);
  Rng g(17, 0);
  for (Tensor& w : h.mlp.w)
    for (double& v : w.data()) v = 0.1 * g.normal();
  const Tensor xc = rand_uniform({1, 8, 8}, g, 0.2, 0.8);
  Tensor xn = xc;
  for (double& v : xn.data()) v += 0.05 * g.normal();

  std::vector<Tensor> params;
  for (Tensor* p : parameters(m)) params.push_back(*p);
  const std::size_t nm = params.size();
  std::vector<Tensor> with_head = params;
  for (std::size_t i = 0; i < h.mlp.layers(); ++i) {
    with_head.push_back(h.mlp.w[i]);
    with_head.push_back(h.mlp.b[i]);
  }

  const ad::GraphFn rescale = [&](ad::Tape& t, std::span<const ad::Var> v) {
    return loss_rescaling(bind_vars(m, v), t.constant(xc), {}).total;
  };
  const ad::GraphFn compress = [&](ad::Tape& t, std::span<const ad::Var> v) {
    JpegSimConfig cfg;
    cfg.quality = 50;
    cfg.rounding = RoundingMode::AdditiveNoise;
    cfg.train = true;
    Rng frozen(99, 0);
    return loss_compression(bind_vars(m, v), t.constant(xc), {}, cfg, &frozen).total;
  };
  const ad::GraphFn denoise = [&](ad::Tape& t, std::span<const ad::Var> v) {
    return loss_denoising(bind_vars(m, v.first(nm)), bind_head_vars(v.subspan(nm)), true, t.constant(xc), t.constant(xn), {})
        .total;
  };
  // actnorm, inv1x1, first rho and eta layers of block 1, last layer of block 2
  for (std::size_t p : std::vector<std::size_t>{0, 1, 2, 3, 7, nm - 1}) {
    EXPECT_LT(ad::fd_check(rescale, params, p, 1e-4), 1e-4) << "rescale param " << p;
    EXPECT_LT(ad::fd_check(compress, params, p, 1e-4), 1e-4) << "compress param " << p;
    EXPECT_LT(ad::fd_check(denoise, with_head, p, 1e-4), 1e-4) << "denoise param " << p;
  }
  EXPECT_LT(ad::fd_check(denoise, with_head, nm, 1e-4), 1e-4);
  EXPECT_LT(ad::fd_check(denoise, with_head, with_head.size() - 2, 1e-4), 1e-4);
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, IdenticalImages) {
  Rng g(18, 0);
  const Tensor a = rand_uniform({16, 16}, g, 0, 1);
  EXPECT_EQ(psnr(a, a), std::numeric_limits<double>::infinity());
  EXPECT_DOUBLE_EQ(ssim(a, a), 1.0);
}

TEST(Metrics, ConstantOffsetIsTwentyDb) {
  Rng g(19, 0);
  const Tensor a = rand_uniform({16, 16}, g, 0, 0.5);
  Tensor b = a;
  for (double& v : b.data()) v += 0.1;
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
}

TEST(Metrics, InvertedCheckerboardSsim) {
  Tensor a(Shape{16, 16}), b(Shape{16, 16});
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) {
      a.at(i, j) = (i + j) % 2 == 0 ? 1.0 : 0.0;
      b.at(i, j) = 1.0 - a.at(i, j);
    }
  EXPECT_LT(ssim(a, b), 0.1);
}

TEST(Metrics, ShapeErrors) {
  EXPECT_THROW(psnr(Tensor(Shape{4}), Tensor(Shape{5})), ShapeError);
  EXPECT_THROW(ssim(Tensor(Shape{16, 16}), Tensor(Shape{16, 15})), ShapeError);
  EXPECT_THROW(ssim(Tensor(Shape{8, 8}), Tensor(Shape{8, 8})), ShapeError);
}

// ---------------------------------------------------------------------------
// Dataset and training

TEST(Dataset, SyntheticPatches) {
  const ToyDataset a = make_synthetic_dataset(20, {16, 16}, 5), b = make_synthetic_dataset(20, {16, 16}, 5);
  ASSERT_EQ(a.size(), 20u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.patches[i].shape(), (Shape{16, 16}));
    EXPECT_EQ(a.patches[i], b.patches[i]);
    for (double v : a.patches[i].data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_GT(max_abs_diff(a.patches[0], make_synthetic_dataset(1, {16, 16}, 6).patches[0]), 0.0);
}

TEST(Dataset, ImagePatches) {
  Tensor img(Shape{20, 30});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i) / img.size();
  const ToyDataset d = make_image_dataset(img, 5, {8, 8}, 1);
  ASSERT_EQ(d.size(), 5u);
  for (const Tensor& p : d.patches) {
    const double dx = p.at(0, 1) - p.at(0, 0), dy = p.at(1, 0) - p.at(0, 0);
    EXPECT_NEAR(dx, 1.0 / 600.0, 1e-15);
    EXPECT_NEAR(dy, 30.0 / 600.0, 1e-15);
  }
  EXPECT_THROW(make_image_dataset(img, 1, {32, 8}, 1), ShapeError);
}

TEST(Train, ZeroStepsLeavesModelUnchanged) {
  FlowModel m = make_flow_model(small(BankKind::Haar)), ref = m;
  TrainConfig tc;
  tc.steps = 0;
  const TrainResult r = train(m, nullptr, make_synthetic_dataset(8, {8, 8}, 1), nullptr, tc);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(model_distance(m, ref), 0.0);
}

TEST(Train, LearningRateSchedule) {
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.milestones = {10, 20};
  EXPECT_EQ(learning_rate(tc, 0), 1e-3);
  EXPECT_EQ(learning_rate(tc, 10), 5e-4);
  EXPECT_EQ(learning_rate(tc, 25), 2.5e-4);
}

TEST(Train, DeterministicLogAndParameters) {
  const ToyDataset d = make_synthetic_dataset(32, {8, 8}, 2), v = make_synthetic_dataset(4, {8, 8}, 3);
  for (Task task : {Task::Rescale, Task::Compress, Task::Denoise}) {
    FlowModel a = make_flow_model(small(BankKind::LinearBspline)), b = a;
    RestorationHead ha = make_restoration_head(a, 16, 2, 1), hb = ha;
    TrainConfig tc;
    tc.task = task;
    tc.steps = 6;
    tc.batch = 4;
    tc.lr = 1e-3;
    tc.val_every = 3;
    tc.seed = 7;
    const auto dir = scratch_dir(std::string("det_") + task_name(task));
    std::filesystem::create_directories(dir);
    tc.log_path = (dir / "a.csv").string();
    const TrainResult ra = train(a, &ha, d, &v, tc);
    tc.log_path = (dir / "b.csv").string();
    const TrainResult rb = train(b, &hb, d, &v, tc);
    ASSERT_FALSE(ra.aborted) << ra.message;
    EXPECT_EQ(ra.log.size(), 6u);
    EXPECT_EQ(read_file(dir / "a.csv"), read_file(dir / "b.csv"));
    EXPECT_EQ(model_distance(a, b), 0.0);
    EXPECT_EQ(a.step, 6u);
    EXPECT_TRUE(ra.log[2].psnr_val.has_value());
    EXPECT_FALSE(ra.log[1].psnr_val.has_value());
    std::ifstream f(dir / "a.csv");
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, log_header(task));
    std::filesystem::remove_all(dir);
  }
}

TEST(Train, ShortRescaleRunBeatsIdentityModel) {
  FlowConfig c = small(BankKind::Haar);
  c.spatial = {16, 16};
  FlowModel m = make_flow_model(c);
  const ToyDataset d = make_synthetic_dataset(256, {16, 16}, 4), v = make_synthetic_dataset(16, {16, 16}, 5);
  TrainConfig tc;
  tc.steps = 300;
  tc.batch = 8;
  tc.lr = 2e-3;
  tc.seed = 3;
  const double before = eval_rescaling_psnr(m, v);
  const TrainResult r = train(m, nullptr, d, nullptr, tc);
  ASSERT_FALSE(r.aborted) << r.message;
  const double after = eval_rescaling_psnr(m, v);
  EXPECT_GT(after, before);
  const FlowModel identity = make_flow_model(c);
  EXPECT_LT(roundtrip_report(m, v.patches[0], {0.0}, 1, 0).mse, roundtrip_report(identity, v.patches[0], {0.0}, 1, 0).mse);
}

TEST(Train, IResTrainingKeepsLipschitzBudget) {
  FlowModel m = make_flow_model(small(BankKind::Haar, 1, BlockKind::IRes));
  TrainConfig tc;
  tc.steps = 5;
  tc.batch = 4;
  tc.lr = 1e-2;
  const TrainResult r = train(m, nullptr, make_synthetic_dataset(16, {8, 8}, 6), nullptr, tc);
  ASSERT_FALSE(r.aborted) << r.message;
  EXPECT_LE(lipschitz_estimate(m), 0.9 + 1e-3);
}

TEST(Train, NonFiniteLossAbortsAndKeepsLastCheckpoint) {
  FlowModel m = make_flow_model(small(BankKind::Haar));
  const auto dir = scratch_dir("abort");
  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 2;
  tc.lr = 1e-3;
  tc.checkpoint_dir = dir.string();
  tc.checkpoint_every = 1;
  ASSERT_FALSE(train(m, nullptr, make_synthetic_dataset(8, {8, 8}, 7), nullptr, tc).aborted);
  const std::string saved = read_file(dir / "manifest.txt");
  const FlowModel good = m;

  ToyDataset bad = make_synthetic_dataset(4, {8, 8}, 8);
  for (Tensor& p : bad.patches) p[5] = std::numeric_limits<double>::quiet_NaN();
  const TrainResult r = train(m, nullptr, bad, nullptr, tc);
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.message.empty());
  EXPECT_EQ(r.steps_done, 0u);
  FlowModel g2 = good;
  EXPECT_EQ(model_distance(m, g2), 0.0);
  EXPECT_EQ(read_file(dir / "manifest.txt"), saved);
  FlowModel loaded = load_checkpoint(dir);
  EXPECT_EQ(model_distance(loaded, g2), 0.0);
  std::filesystem::remove_all(dir);
}

TEST(Train, HeadCheckpointRoundTrip) {
  FlowModel m = make_flow_model(small(BankKind::Haar));
  RestorationHead h = make_restoration_head(m, 8, 2, 3);
  const auto dir = scratch_dir("head");
  save_head(dir, h);
  const RestorationHead back = load_head(dir);
  ASSERT_EQ(back.mlp.layers(), h.mlp.layers());
  for (std::size_t i = 0; i < h.mlp.layers(); ++i) EXPECT_EQ(back.mlp.w[i], h.mlp.w[i]);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_head(dir), CheckpointError);
}

TEST(Train, DenoiseNeedsHead) {
  FlowModel m = make_flow_model(small(BankKind::Haar));
  TrainConfig tc;
  tc.task = Task::Denoise;
  EXPECT_THROW(train(m, nullptr, make_synthetic_dataset(4, {8, 8}, 1), nullptr, tc), std::invalid_argument);
}
