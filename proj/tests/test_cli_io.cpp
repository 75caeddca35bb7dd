#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lr2flow/cli.hpp"

using namespace lr2flow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lr2flow_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

std::string read(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int run(std::vector<std::string> args) {
  std::vector<const char*> argv{"lr2flow"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

ImageBuffer random_image(std::size_t w, std::size_t h, std::size_t ch, std::uint64_t seed) {
  Rng r(seed, 0);
  ImageBuffer img;
  img.width = w;
  img.height = h;
  img.channels = ch;
  img.data.resize(w * h * ch);
  for (double& v : img.data) v = r.uniform();
  return img;
}

}  // namespace

TEST(Rng, SameStreamRepeats) {
  Rng a(5, 2), b(5, 2);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, StreamsDiffer) {
  Rng a(5, 0), b(5, 1);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_EQ(same, 0);
}

TEST(Rng, GaussianMoments) {
  Rng g(9, 0);
  double s = 0.0, s2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = g.normal();
    s += v;
    s2 += v * v;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_LT(std::abs(mean), 0.01);
  EXPECT_LT(std::abs(var - 1.0), 0.02);
}

TEST(ImageIo, RoundTripWithinHalfStep) {
  const fs::path d = scratch("img");
  for (std::size_t ch : {1, 3}) {
    const ImageBuffer img = random_image(13, 7, ch, ch);
    const fs::path p = d / (ch == 1 ? "a.pgm" : "a.ppm");
    save_image(p.string(), img);
    const ImageBuffer back = load_image(p.string());
    ASSERT_EQ(back.width, 13u);
    ASSERT_EQ(back.height, 7u);
    ASSERT_EQ(back.channels, ch);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_LE(std::abs(back.data[i] - img.data[i]), 1.0 / 510.0 + 1e-15);
  }
}

TEST(ImageIo, ZerosExact) {
  ImageBuffer img;
  img.width = 4;
  img.height = 3;
  img.data.assign(12, 0.0);
  const ImageBuffer back = decode_image(encode_image(img));
  EXPECT_EQ(back.data, img.data);
}

TEST(ImageIo, EightBitMapping) {
  const std::string bytes = std::string("P5\n# comment\n3 1\n255\n") + std::string("\x00\x80\xff", 3);
  const ImageBuffer img = decode_image(bytes);
  EXPECT_EQ(img.data[0], 0.0);
  EXPECT_EQ(img.data[1], 128.0 / 255.0);
  EXPECT_EQ(img.data[2], 1.0);
}

TEST(ImageIo, HalfToEvenRounding) {
  ImageBuffer img;
  img.width = 2;
  img.height = 1;
  img.data = {0.5 / 255.0, 1.5 / 255.0};
  const std::string enc = encode_image(img);
  EXPECT_EQ(static_cast<unsigned char>(enc[enc.size() - 2]), 0);
  EXPECT_EQ(static_cast<unsigned char>(enc[enc.size() - 1]), 2);
}

TEST(ImageIo, RejectsUnsupported) {
  EXPECT_THROW(decode_image("P5\n2 2\n65535\n" + std::string(8, '\0')), ImageError);
  EXPECT_THROW(decode_image("P2\n2 2\n255\n0 0 0 0"), ImageError);
  EXPECT_THROW(decode_image("P5\n2 x\n255\n"), ImageError);
  EXPECT_THROW(decode_image("P5\n2 2\n255\n\x01"), ImageError);
  EXPECT_THROW(load_image("/nonexistent/file.pgm"), ImageError);
}

TEST(ImageIo, LumaConversion) {
  ImageBuffer img;
  img.width = 1;
  img.height = 1;
  img.channels = 3;
  img.data = {1.0, 0.5, 0.25};
  const Tensor y = image_to_tensor(img);
  EXPECT_NEAR(y[0], 0.299 + 0.587 * 0.5 + 0.114 * 0.25, 1e-15);
}

TEST(Config, ParsesAndRoundTrips) {
  const RunConfig c = parse_config(
      "# run\ntask = denoise\nbank = haar\nlevels = 2\nmilestones = 10, 20\nqualities = 30,40\nlr = 1e-3\n"
      "patch = 8x8\nrounding = ste\n");
  EXPECT_EQ(c.task, Task::Denoise);
  EXPECT_EQ(c.bank, BankKind::Haar);
  EXPECT_EQ(c.levels, 2u);
  EXPECT_EQ(c.milestones, (std::vector<std::size_t>{10, 20}));
  EXPECT_EQ(c.qualities, (std::vector<int>{30, 40}));
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.patch, (Shape{8, 8}));
  EXPECT_EQ(c.rounding, RoundingMode::StraightThrough);
  const RunConfig back = parse_config(serialize_config(c));
  EXPECT_EQ(serialize_config(back), serialize_config(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("seed = 1\nseed = 2\n"), ConfigError);
  try {
    parse_config("colour = red\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("colour"), std::string::npos);
  }
  EXPECT_THROW(parse_config("steps = -3\n"), ConfigError);
  EXPECT_THROW(parse_config("bank = daubechies\n"), ConfigError);
  EXPECT_THROW(parse_config("just text\n"), ConfigError);
}

TEST(Config, HashTracksContent) {
  RunConfig a, b;
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
}

TEST(Tiling, RoundTrip) {
  Rng r(3, 0);
  const Tensor img = randn({20, 36}, r);
  const auto [tiles, t] = to_tiles(img, {8, 16});
  EXPECT_EQ(tiles.shape(), (Shape{4, 8, 16}));
  const Tensor back = from_tiles(tiles, t);
  ASSERT_EQ(back.shape(), (Shape{16, 32}));
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(back.at(i, j), img.at(i, j));
  EXPECT_THROW(to_tiles(img, {32, 8}), ShapeError);
}

TEST(Cli, TransformWritesSubbands) {
  const fs::path d = scratch("transform");
  save_image((d / "x.pgm").string(), random_image(32, 32, 1, 4));
  write(d / "c.txt", "input = " + (d / "x.pgm").string() + "\nbank = haar\n");
  ASSERT_EQ(run({"transform", "--config", (d / "c.txt").string(), "--out", (d / "o").string()}), 0);
  EXPECT_TRUE(fs::exists(d / "o" / "level1_band0.lrtf"));
  for (int b = 1; b < 4; ++b) EXPECT_TRUE(fs::exists(d / "o" / ("level1_band" + std::to_string(b) + ".lrtf")));
  EXPECT_EQ(load_lrtf((d / "o" / "level1_band0.lrtf").string()).shape(), (Shape{16, 16}));
  const std::string m = read(d / "o" / "manifest.txt");
  EXPECT_NE(m.find("config_hash = fnv1a64:"), std::string::npos);
  EXPECT_NE(m.find("seed = 0"), std::string::npos);
  EXPECT_NE(m.find("version = "), std::string::npos);
}

TEST(Cli, UsageErrors) {
  const fs::path d = scratch("usage");
  write(d / "dup.txt", "steps = 1\nsteps = 2\n");
  write(d / "unk.txt", "nonsense = 1\n");
  EXPECT_EQ(run({"train", "--config", (d / "dup.txt").string(), "--out", (d / "o").string()}), 1);
  EXPECT_EQ(run({"train", "--config", (d / "unk.txt").string(), "--out", (d / "o").string()}), 1);
  EXPECT_EQ(run({"train", "--config", (d / "missing.txt").string(), "--out", (d / "o").string()}), 1);
  EXPECT_EQ(run({"frobnicate"}), 1);
  EXPECT_EQ(run({}), 1);
  EXPECT_EQ(run({"train"}), 1);
  EXPECT_EQ(run({"transform", "--out", (d / "o").string()}), 1);
  EXPECT_EQ(run({"train", "--seed", "abc", "--out", (d / "o").string()}), 1);
}

TEST(Cli, RuntimeFailure) {
  const fs::path d = scratch("runtime");
  write(d / "c.txt", "input = " + (d / "absent.pgm").string() + "\n");
  EXPECT_EQ(run({"transform", "--config", (d / "c.txt").string(), "--out", (d / "o").string()}), 2);
}

TEST(Cli, TrainIsDeterministic) {
  const fs::path d = scratch("train");
  write(d / "c.txt", "steps = 6\ntrain_count = 32\nval_count = 4\nval_every = 3\nblocks = 1\nwidth = 8\npatch = 8x8\n");
  for (const char* o : {"a", "b"})
    ASSERT_EQ(run({"train", "--config", (d / "c.txt").string(), "--seed", "5", "--out", (d / o).string()}), 0);
  EXPECT_EQ(read(d / "a" / "log.csv"), read(d / "b" / "log.csv"));
  EXPECT_EQ(read(d / "a" / "checkpoint" / "l1.b1.coupling.eta.w0.lrtf"), read(d / "b" / "checkpoint" / "l1.b1.coupling.eta.w0.lrtf"));
  EXPECT_EQ(read(d / "a" / "manifest.txt"), read(d / "b" / "manifest.txt"));
  EXPECT_NE(read(d / "a" / "manifest.txt").find("seed = 5"), std::string::npos);
  const std::string log = read(d / "a" / "log.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "step,loss,l_hr,l_lr,l_dist,z_energy,psnr_val");
}

TEST(Cli, EvalDenoiseCompress) {
  const fs::path d = scratch("tasks");
  fs::create_directories(d / "imgs");
  save_image((d / "imgs" / "a.pgm").string(), random_image(16, 16, 1, 6));
  save_image((d / "imgs" / "b.ppm").string(), random_image(24, 16, 3, 7));
  write(d / "t.txt", "task = denoise\nsteps = 3\ntrain_count = 16\nval_count = 2\nblocks = 1\nwidth = 8\nhead_width = 8\npatch = 8x8\n");
  ASSERT_EQ(run({"train", "--config", (d / "t.txt").string(), "--out", (d / "tr").string()}), 0);
  const std::string ck = "checkpoint = " + (d / "tr" / "checkpoint").string() + "\n";
  write(d / "e.txt", "input = " + (d / "imgs").string() + "\n" + ck);
  ASSERT_EQ(run({"eval", "--config", (d / "e.txt").string(), "--out", (d / "ev").string()}), 0);
  const std::string csv = read(d / "ev" / "eval.csv");
  EXPECT_NE(csv.find("a.pgm,"), std::string::npos);
  EXPECT_NE(csv.find("b.ppm,"), std::string::npos);
  write(d / "x.txt", "input = " + (d / "imgs" / "b.ppm").string() + "\n" + ck);
  ASSERT_EQ(run({"denoise", "--config", (d / "x.txt").string(), "--out", (d / "dn").string()}), 0);
  EXPECT_EQ(load_image((d / "dn" / "denoised.pgm").string()).width, 24u);
  ASSERT_EQ(run({"compress", "--config", (d / "x.txt").string(), "--out", (d / "cp").string()}), 0);
  EXPECT_EQ(load_image((d / "cp" / "lr.pgm").string()).width, 12u);
  write(d / "nock.txt", "input = " + (d / "imgs" / "b.ppm").string() + "\n");
  EXPECT_EQ(run({"denoise", "--config", (d / "nock.txt").string(), "--out", (d / "dn2").string()}), 1);
}

TEST(Cli, VerifyTheoryQuick) {
  const fs::path d = scratch("theory");
  ASSERT_EQ(run({"verify-theory", "--quick", "--seed", "7", "--out", (d / "o").string()}), 0);
  const std::string csv = read(d / "o" / "bound_reports.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "name,analytic,empirical,samples,tol,relation,pass");
  EXPECT_NE(csv.find("example.polar.error"), std::string::npos);
  EXPECT_NE(csv.find("prop1.haar.optimal_coupling"), std::string::npos);
}

TEST(Cli, BinaryExitCodes) {
  const fs::path d = scratch("binary");
  write(d / "dup.txt", "seed = 1\nseed = 1\n");
  const std::string bin = LR2FLOW_CLI;
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " train --config " + (d / "dup.txt").string() + " --out " + (d / "o").string() +
                                     " 2>/dev/null").c_str())),
            1);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " --help >/dev/null").c_str())), 0);
}
