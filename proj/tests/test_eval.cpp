#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "unips/eval.hpp"

using namespace unips;

namespace {

NormalMap random_normals(int h, int w, std::uint64_t seed, double p_valid = 0.8) {
  nk::Rng rng(seed);
  NormalMap nm(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!rng.bernoulli(p_valid)) continue;
      double v[3] = {rng.normal(), rng.normal(), std::abs(rng.normal()) + 0.1};
      const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      for (int k = 0; k < 3; ++k) nm.n.at(y, x, k) = static_cast<float>(v[k] / n);
      nm.valid.set(y, x, true);
    }
  return nm;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Mae, IdenticalIsZero) {
  const auto a = random_normals(20, 20, 1);
  EXPECT_EQ(mae_degrees(a, a), 0.0);
}

TEST(Mae, OrthogonalIsNinety) {
  NormalMap a(4, 4), b(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      a.n.at(y, x, 2) = 1;
      b.n.at(y, x, (x + y) % 2) = 1;
      a.valid.set(y, x, true);
      b.valid.set(y, x, true);
    }
  EXPECT_DOUBLE_EQ(mae_degrees(a, b), 90.0);
}

TEST(Mae, MatchesPerPixelBruteForce) {
  const auto a = random_normals(30, 25, 2), b = random_normals(30, 25, 3);
  double sum = 0;
  int n = 0;
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 25; ++x) {
      if (!a.valid(y, x) || !b.valid(y, x)) continue;
      double d = 0;
      for (int k = 0; k < 3; ++k) d += double(a.n.at(y, x, k)) * b.n.at(y, x, k);
      sum += std::acos(std::max(-1.0, std::min(1.0, d))) * 180.0 / M_PI;
      ++n;
    }
  EXPECT_NEAR(mae_degrees(a, b), sum / n, 1e-4);
  EXPECT_EQ(mae_degrees(a, b), mae_degrees(b, a));
  const double m = mae_degrees(a, b);
  EXPECT_GE(m, 0.0);
  EXPECT_LE(m, 180.0);
}

TEST(Mae, InvariantToPixelRelabeling) {
  auto a = random_normals(10, 10, 4, 1.0), b = random_normals(10, 10, 5, 1.0);
  const double before = mae_degrees(a, b);
  // Transpose both maps: same multiset of pixel pairs.
  NormalMap at(10, 10), bt(10, 10);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      for (int k = 0; k < 3; ++k) {
        at.n.at(x, y, k) = a.n.at(y, x, k);
        bt.n.at(x, y, k) = b.n.at(y, x, k);
      }
      at.valid.set(x, y, true);
      bt.valid.set(x, y, true);
    }
  EXPECT_NEAR(mae_degrees(at, bt), before, 1e-12);
}

TEST(Mae, EmptyIntersectionOrSizeMismatchRejected) {
  NormalMap a(4, 4), b(4, 4);
  a.valid.set(0, 0, true);
  b.valid.set(1, 1, true);
  EXPECT_THROW(mae_degrees(a, b), EvalError);
  EXPECT_THROW(mae_degrees(a, NormalMap(4, 5)), EvalError);
}

TEST(ErrorMap, CappedColorScale) {
  Image err(1, 3, 1);
  err.px = {0.f, 40.f, 200.f};
  const auto c = colorize_error(err, Mask(1, 3, true));
  EXPECT_EQ(c.at(0, 0, 2), 1.f);  // blue at zero
  EXPECT_EQ(c.at(0, 1, 1), 1.f);  // green at half the cap
  EXPECT_EQ(c.at(0, 2, 0), 1.f);  // red at and above the cap
  EXPECT_EQ(c.at(0, 2, 2), 0.f);
}

TEST(Report, MeansRecomputeFromRows) {
  EvalReport r;
  r.rows = {{"a", "directional", 10}, {"b", "directional", 20}, {"c", "environment", 40}};
  EXPECT_DOUBLE_EQ(r.mean(), 70.0 / 3);
  const auto vm = r.variant_means();
  EXPECT_DOUBLE_EQ(vm.at("directional"), 15);
  EXPECT_DOUBLE_EQ(vm.at("environment"), 40);
}

TEST(Report, DirectoryEvaluationRoundTrip) {
  const auto root = std::filesystem::temp_directory_path() / "unips_eval_dirs";
  std::filesystem::remove_all(root);
  rk::DatasetConfig dc;
  dc.n_objects = 2;
  dc.q = 2;
  dc.height = 32;
  dc.width = 32;
  dc.env_samples = 16;
  dc.seed = 3;
  dc.entropy_threshold = 2.0;
  const auto ds = rk::generate_dataset(rk::AssetPools{}, dc);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    rk::write_sample(root / "gt" / rk::scene_dir_name(static_cast<int>(i)), ds[i]);
    std::filesystem::create_directories(root / "pred" / rk::scene_dir_name(static_cast<int>(i)));
    write_pfm((root / "pred" / rk::scene_dir_name(static_cast<int>(i)) / "normal.pfm").string(), ds[i].normals.n);
  }
  const auto rep = evaluate_directories(root / "pred", root / "gt", (root / "err").string());
  ASSERT_EQ(rep.rows.size(), ds.size());
  for (const auto& row : rep.rows) {
    EXPECT_EQ(row.mae, 0.0);
    EXPECT_EQ(row.variant, "directional");
    EXPECT_TRUE(std::filesystem::exists(root / "err" / (row.scene + "_error.png")));
  }
  write_report_csv((root / "r.csv").string(), rep);
  EXPECT_EQ(slurp(root / "r.csv").rfind("scene,variant,mae_deg\n", 0), 0u);
  EXPECT_THROW(evaluate_directories(root / "missing", root / "gt"), IoError);
  std::filesystem::remove_all(root);
}

// ------------------------------------------------------------------ ablation

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder.s = 32;
  m.encoder.c = 8;
  m.encoder.d_e = 8;
  m.decoder.d_e = 8;
  m.decoder.d_t = 16;
  m.decoder.ff = 32;
  m.decoder.depth = 1;
  m.seed = 1;
  return m;
}

struct TinyData {
  std::vector<TrainScene> train;
  std::vector<EvalScene> test;
};

TinyData tiny_data() {
  TinyData d;
  rk::DatasetConfig dc;
  dc.n_objects = 2;
  dc.q = 4;
  dc.height = 32;
  dc.width = 32;
  dc.env_samples = 16;
  dc.seed = 8;
  dc.entropy_threshold = 2.0;
  for (const auto& s : rk::generate_dataset(rk::AssetPools{}, dc)) d.train.push_back(to_train_scene(s));
  dc.seed = 9;
  dc.lighting = rk::LightingVariant::Environment;
  for (const auto& s : rk::generate_dataset(rk::AssetPools{}, dc))
    d.test.push_back({"t" + std::to_string(s.object_index), "environment", s.images, s.normals});
  return d;
}

AblationSetup tiny_setup(AblationAxis axis, std::vector<std::string> values) {
  AblationSetup a;
  a.axis = axis;
  a.values = std::move(values);
  a.model = tiny_model();
  a.train.epochs = 1;
  a.train.batch = 1;
  a.train.n_r = 32;
  a.test_q = 4;
  return a;
}

}  // namespace

TEST(Ablation, AxisParsing) {
  EXPECT_EQ(parse_axis("q"), AblationAxis::Q);
  EXPECT_THROW(parse_axis("depth"), ConfigError);
  EXPECT_TRUE(apply_axis_value(tiny_model(), AblationAxis::Uniform, "uniform").encoder.uniform);
  EXPECT_EQ(apply_axis_value(tiny_model(), AblationAxis::Canonical, "64").encoder.s, 64);
  EXPECT_THROW(apply_axis_value(tiny_model(), AblationAxis::Canonical, "48"), ConfigError);
  EXPECT_THROW(apply_axis_value(tiny_model(), AblationAxis::Q, "x"), ConfigError);
}

TEST(Ablation, SingleValueGivesOneRow) {
  const auto d = tiny_data();
  const auto rows = run_ablation<float>(tiny_setup(AblationAxis::Aggregation, {"maxpool"}), d.train, d.test);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].value, "maxpool");
  EXPECT_EQ(rows[0].variant_mae.count("environment"), 1u);
}

TEST(Ablation, ReproducibleAndCached) {
  const auto d = tiny_data();
  const auto cache = std::filesystem::temp_directory_path() / "unips_ablation_cache";
  std::filesystem::remove_all(cache);
  auto setup = tiny_setup(AblationAxis::Q, {"1", "4", "2"});
  const auto a = run_ablation<float>(setup, d.train, d.test);
  setup.cache_dir = cache.string();
  const auto b = run_ablation<float>(setup, d.train, d.test);  // trains into the cache
  const auto c = run_ablation<float>(setup, d.train, d.test);  // loads from it
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].value, b[i].value);
    EXPECT_EQ(a[i].mae, b[i].mae);
    EXPECT_EQ(b[i].mae, c[i].mae);
  }
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_LE(a[i - 1].mae, a[i].mae);
  write_ablation_csv((cache / "a.csv").string(), AblationAxis::Q, a);
  write_ablation_csv((cache / "c.csv").string(), AblationAxis::Q, c);
  EXPECT_EQ(slurp(cache / "a.csv"), slurp(cache / "c.csv"));
  EXPECT_EQ(slurp(cache / "a.csv").rfind("rank,q,mae_environment,mae_all\n", 0), 0u);
  std::filesystem::remove_all(cache);
}
