#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "unips/train.hpp"

using namespace unips;

namespace {

ModelConfig tiny_model(std::uint64_t seed = 2) {
  ModelConfig m;
  m.encoder.s = 32;
  m.encoder.c = 8;
  m.encoder.d_e = 8;
  m.decoder.d_e = 8;
  m.decoder.d_t = 16;
  m.decoder.ff = 32;
  m.decoder.depth = 1;
  m.seed = seed;
  return m;
}

std::vector<TrainScene> tiny_scenes(int n = 2, int q = 3) {
  rk::DatasetConfig dc;
  dc.n_objects = n;
  dc.q = q;
  dc.height = 40;
  dc.width = 40;
  dc.env_samples = 16;
  dc.seed = 4;
  dc.entropy_threshold = 2.0;
  std::vector<TrainScene> out;
  for (const auto& s : rk::generate_dataset(rk::AssetPools{}, dc)) out.push_back(to_train_scene(s));
  return out;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 2;
  t.batch = 2;
  t.n_r = 64;
  t.lr = 1e-3;
  t.seed = 9;
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Mask full_mask(int h, int w) { return Mask(h, w, true); }

}  // namespace

// ---------------------------------------------------------------- sampling

TEST(Alignment, BruteForceAgreesWithIntegerTest) {
  for (auto [extent, s] : {std::pair{128, 64}, {96, 32}, {64, 64}, {100, 64}, {90, 30}, {45, 32}}) {
    std::vector<int> brute, fast;
    for (int x = 0; x < extent; ++x) {
      const double c = (x + 0.5) / extent * s - 0.5;
      if (c >= -1e-9 && std::abs(c - std::round(c)) < 1e-9) brute.push_back(x);
      if (aligned_index(x, 0, extent, s)) fast.push_back(x);
    }
    EXPECT_EQ(brute, fast) << extent << "->" << s;
  }
}

TEST(Alignment, HalvingHasNoCoincidentCenters) {
  const auto p = aligned_pixels(full_mask(128, 128), {0, 0, 127, 127}, 64);
  EXPECT_TRUE(p.empty());
}

TEST(Alignment, ThirdingPicksEveryThirdPixel) {
  const auto p = aligned_pixels(full_mask(96, 96), {0, 0, 95, 95}, 32);
  ASSERT_EQ(p.size(), 32u * 32u);
  for (const auto& c : p) {
    EXPECT_EQ(c[0] % 3, 1);
    EXPECT_EQ(c[1] % 3, 1);
  }
}

TEST(Alignment, IdentityResolutionAlignsEveryMaskedPixel) {
  Mask m(32, 32);
  for (int y = 3; y < 20; ++y)
    for (int x = 5; x < 30; ++x) m.set(y, x, (x + y) % 3 != 0);
  EXPECT_EQ(aligned_pixels(m, {0, 0, 31, 31}, 32), mask_pixels(m));
}

TEST(SamplePixels, ZeroRandomIsAlignedOnly) {
  const Mask m = full_mask(96, 96);
  EXPECT_EQ(sample_pixels(m, {0, 0, 95, 95}, 32, 0, 1), aligned_pixels(m, {0, 0, 95, 95}, 32));
}

TEST(SamplePixels, InsideMaskDistinctDeterministic) {
  nk::Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    Mask m(50, 60);
    for (int y = 0; y < 50; ++y)
      for (int x = 0; x < 60; ++x) m.set(y, x, rng.bernoulli(0.3));
    const prep::Rect r = prep::bounding_rect(m, 4);
    const int n_r = static_cast<int>(rng.below(400));
    const auto a = sample_pixels(m, r, 32, n_r, 77 + t);
    EXPECT_EQ(a, sample_pixels(m, r, 32, n_r, 77 + t));
    std::set<std::array<int, 2>> uniq(a.begin(), a.end());
    EXPECT_EQ(uniq.size(), a.size());
    for (const auto& c : a) EXPECT_TRUE(m(c[0], c[1]));
    EXPECT_GE(a.size(), std::min<std::size_t>(n_r, m.count()));
  }
}

TEST(SamplePixels, EmptyMaskRejected) {
  EXPECT_THROW(sample_pixels(Mask(8, 8), {0, 0, 7, 7}, 32, 10, 1), prep::PrepError);
}

// -------------------------------------------------------------------- loss

TEST(MseLoss, IdentityAndOpposite) {
  const auto n = nk::Tensor<double>::from({2, 3}, {0, 0, 1, 0.6, 0.8, 0});
  EXPECT_EQ(mse_loss(n, n).item(), 0.0);
  EXPECT_EQ(mse_loss(nk::Tensor<double>::from({1, 3}, {0, 0, 1}), nk::Tensor<double>::from({1, 3}, {0, 0, -1})).item(),
            4.0);
}

TEST(MseLoss, MatchesBruteForceMean) {
  nk::Rng rng(5);
  std::vector<double> a(300), b(300);
  for (auto& v : a) v = rng.uniform(-1, 1);
  for (auto& v : b) v = rng.uniform(-1, 1);
  double want = 0;
  for (int p = 0; p < 100; ++p) {
    double d = 0;
    for (int k = 0; k < 3; ++k) d += (a[p * 3 + k] - b[p * 3 + k]) * (a[p * 3 + k] - b[p * 3 + k]);
    want += d;
  }
  want /= 100;
  EXPECT_NEAR(mse_loss(nk::Tensor<double>::from({100, 3}, a), nk::Tensor<double>::from({100, 3}, b)).item(), want,
              1e-13);
  EXPECT_THROW(mse_loss(nk::Tensor<double>::zeros({0, 3}), nk::Tensor<double>::zeros({0, 3})), nk::ShapeError);
}

TEST(Schedule, StepDecayAtEpochSix) {
  TrainConfig t;
  EXPECT_NEAR(t.schedule().lr_at(6), 0.64e-4, 1e-18);
  EXPECT_EQ(t.schedule().lr_at(2), 1e-4);
  EXPECT_NEAR(t.schedule().lr_at(3), 0.8e-4, 1e-18);
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  t.batch = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.lr = -1;
  EXPECT_THROW(t.validate(), ConfigError);
}

// -------------------------------------------------------------------- loop

TEST(Train, LossDecreasesAndRunsAreIdentical) {
  const auto scenes = tiny_scenes();
  Model<float> a(tiny_model()), b(tiny_model());
  auto cfg = tiny_train();
  cfg.epochs = 6;
  const auto ca = train(a, scenes, cfg), cb = train(b, scenes, cfg);
  ASSERT_EQ(ca.size(), 6u);
  for (std::size_t i = 0; i < ca.size(); ++i) EXPECT_EQ(ca[i].loss, cb[i].loss);
  EXPECT_LT(ca.back().loss, ca.front().loss);
  const auto pa = a.params(), pb = b.params();
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::int64_t i = 0; i < pa[k].tensor->numel(); ++i)
      ASSERT_EQ(pa[k].tensor->data()[i], pb[k].tensor->data()[i]);
}

TEST(Train, CheckpointsCsvAndResume) {
  const auto dir = std::filesystem::temp_directory_path() / "unips_train_resume";
  std::filesystem::remove_all(dir);
  const auto scenes = tiny_scenes();
  auto cfg = tiny_train();
  cfg.epochs = 3;

  Model<float> full(tiny_model());
  const auto curve = train(full, scenes, cfg, {(dir / "full").string(), "", nullptr});
  for (int e = 0; e < 3; ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.upsw", e);
    EXPECT_TRUE(std::filesystem::exists(dir / "full" / name));
  }
  const auto csv = slurp(dir / "full" / "loss.csv");
  EXPECT_EQ(csv.rfind("step,epoch,lr,loss\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  // Stop after one epoch, then resume from its checkpoint.
  Model<float> part(tiny_model());
  auto first = cfg;
  first.epochs = 1;
  train(part, scenes, first, {(dir / "part").string(), "", nullptr});
  Model<float> resumed(tiny_model(77));
  const auto rest = train(resumed, scenes, cfg, {(dir / "part").string(), (dir / "part" / "epoch_000.upsw").string(), nullptr});
  ASSERT_EQ(rest.size(), 2u);
  EXPECT_EQ(rest[0].step, 1);
  EXPECT_EQ(rest[0].loss, curve[1].loss);
  EXPECT_EQ(rest[1].loss, curve[2].loss);
  EXPECT_EQ(slurp(dir / "full" / "model.upsw"), slurp(dir / "part" / "model.upsw"));
  EXPECT_EQ(slurp(dir / "full" / "loss.csv"), slurp(dir / "part" / "loss.csv"));
  std::filesystem::remove_all(dir);
}

TEST(Train, NonFiniteLossAborts) {
  auto scenes = tiny_scenes(1);
  scenes[0].normals.n.px.assign(scenes[0].normals.n.px.size(), std::nanf(""));
  Model<float> m(tiny_model());
  auto cfg = tiny_train();
  cfg.augment = false;
  EXPECT_THROW(train(m, scenes, cfg), TrainError);
}

TEST(Train, ImageSubsetPerStep) {
  const auto scenes = tiny_scenes(1, 5);
  auto cfg = tiny_train();
  cfg.q = 2;
  const auto v = prepare_training_view(scenes[0], cfg, 123);
  EXPECT_EQ(v.images.size(), 2u);
  EXPECT_EQ(v.normals.valid.count(), scenes[0].normals.valid.count());
}

TEST(Train, EmptyDatasetRejected) {
  Model<float> m(tiny_model());
  EXPECT_THROW(train(m, {}, tiny_train()), TrainError);
}
