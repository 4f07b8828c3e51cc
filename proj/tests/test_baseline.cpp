#include <gtest/gtest.h>

#include <cmath>

#include "unips/baseline.hpp"
#include "unips/eval.hpp"
#include "unips/renderkit/render.hpp"

using namespace unips;
using namespace unips::baseline;
using Eigen::Vector3d;

namespace {

std::vector<double> zeros(std::size_t n) { return std::vector<double>(n, 0.0); }

}  // namespace

TEST(SolvePixel, AxisLightsIdentitySystem) {
  const std::vector<Vector3d> dirs{Vector3d::UnitX(), Vector3d::UnitY(), Vector3d::UnitZ()};
  const auto s = solve_pixel(dirs, {0.0, 0.0, 0.6}, {-1, -1, -1});
  ASSERT_TRUE(s.valid);
  EXPECT_EQ(s.normal, Vector3d(0, 0, 1));
  EXPECT_DOUBLE_EQ(s.albedo, 0.6);
}

TEST(SolvePixel, NoiseFreeResidualVanishes) {
  nk::Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const Vector3d n = Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.2, 1)).normalized();
    const double rho = rng.uniform(0.1, 2);
    std::vector<Vector3d> dirs;
    std::vector<double> obs;
    while (dirs.size() < 8) {
      const Vector3d l = Vector3d(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 1).normalized();
      if (l.dot(n) <= 0) continue;
      dirs.push_back(l);
      obs.push_back(rho * l.dot(n));
    }
    const auto s = solve_pixel(dirs, obs, zeros(8));
    ASSERT_TRUE(s.valid);
    EXPECT_LT(s.residual, 1e-10);
    EXPECT_LT((s.normal - n).norm(), 1e-10);
    EXPECT_NEAR(s.albedo, rho, 1e-10);
  }
}

TEST(SolvePixel, ShadowedRowMatchesThreeLightSolve) {
  const Vector3d n = Vector3d(0.2, -0.3, 0.9).normalized();
  const std::vector<Vector3d> three{Vector3d(0.5, 0, 1).normalized(), Vector3d(0, 0.5, 1).normalized(),
                                    Vector3d(-0.4, -0.4, 1).normalized()};
  std::vector<double> obs3;
  for (const auto& l : three) obs3.push_back(0.8 * l.dot(n));
  auto four = three;
  four.push_back(Vector3d(-1, 1, 0.05).normalized());
  ASSERT_LT(four[3].dot(n), 0);
  auto obs4 = obs3;
  obs4.push_back(0.0);  // clamped by the shadow
  const auto a = solve_pixel(three, obs3, zeros(3));
  const auto b = solve_pixel(four, obs4, std::vector<double>(4, 1e-4));
  ASSERT_TRUE(a.valid && b.valid);
  EXPECT_EQ(b.used, 3);
  EXPECT_LT((a.normal - b.normal).norm(), 1e-12);
  EXPECT_LT((a.normal - n).norm(), 1e-12);
}

TEST(SolvePixel, InsufficientOrDegenerateLightsInvalid) {
  const std::vector<Vector3d> dirs{Vector3d::UnitX(), Vector3d::UnitY(), Vector3d::UnitZ()};
  EXPECT_FALSE(solve_pixel(dirs, {0.5, 0.0, 0.5}, zeros(3)).valid);
  const std::vector<Vector3d> coplanar{Vector3d(1, 0, 1).normalized(), Vector3d(-1, 0, 1).normalized(),
                                       Vector3d::UnitZ(), Vector3d(0.5, 0, 1).normalized()};
  EXPECT_FALSE(solve_pixel(coplanar, {0.5, 0.5, 0.7, 0.6}, zeros(4)).valid);
}

namespace {

/// Lambertian unit sphere filling most of the frame under `q` lights.
CalibratedProblem rendered_sphere(int q, int h = 96, int w = 96) {
  rk::SceneDescription scene;
  scene.object.shape = rk::SphereSet{{{rk::Vec3::Zero(), 1.0}}};
  scene.object.scale = 0.45;
  scene.object.translation = rk::Vec3(0.5, 0.5, 0.0);
  scene.material = rk::MaterialMaps::uniform(rk::Vec3(0.8, 0.6, 0.4), 1.0, 0.0);
  rk::RenderConfig cfg;
  cfg.height = h;
  cfg.width = w;
  CalibratedProblem p;
  nk::Rng rng(11);
  for (int k = 0; k < q; ++k) {
    const rk::Vec3 d = rk::random_upper_direction(rng, 0.5);
    const rk::Vec3 rgb = rk::random_light_color(rng);
    const auto r = rk::render_image(scene, rk::LightingCondition::make_directional({d, rgb}), cfg);
    p.images.push_back(r.image);
    p.lights.push_back({d, rgb * r.exposure});
  }
  const auto g = rk::trace_gbuffer(scene, h, w);
  p.mask = g.normals.valid;
  return p;
}

NormalMap sphere_truth(int h = 96, int w = 96) {
  rk::SceneDescription scene;
  scene.object.shape = rk::SphereSet{{{rk::Vec3::Zero(), 1.0}}};
  scene.object.scale = 0.45;
  scene.object.translation = rk::Vec3(0.5, 0.5, 0.0);
  return rk::trace_gbuffer(scene, h, w).normals;
}

}  // namespace

TEST(Lambertian, RenderedSphereRecoveredUnderHalfDegree) {
  const auto p = rendered_sphere(8);
  const auto r = solve_lambertian(p);
  const auto gt = sphere_truth();
  EXPECT_GT(r.normals.valid.count(), 0.9 * gt.valid.count());
  EXPECT_LT(mae_degrees(r.normals, gt), 0.5);
  // Albedo is proportional to the material color, up to the 1/pi of the BRDF.
  const int y = 48, x = 48;
  EXPECT_NEAR(r.albedo.at(y, x, 0) / r.albedo.at(y, x, 2), 2.0, 1e-3);
  EXPECT_NEAR(r.albedo.at(y, x, 1) / r.albedo.at(y, x, 2), 1.5, 1e-3);
}

TEST(Lambertian, ScalingImagesScalesAlbedoOnly) {
  const auto p = rendered_sphere(5, 48, 48);
  const auto a = solve_lambertian(p);
  auto scaled = p;
  for (auto& img : scaled.images)
    for (auto& v : img.px) v *= 4.f;
  const auto b = solve_lambertian(scaled);
  EXPECT_EQ(a.normals.valid, b.normals.valid);
  EXPECT_EQ(a.normals.n, b.normals.n);
  for (std::size_t i = 0; i < a.albedo.px.size(); ++i) EXPECT_EQ(4.f * a.albedo.px[i], b.albedo.px[i]);
  // A non-dyadic factor agrees up to rounding.
  for (auto& img : scaled.images)
    for (auto& v : img.px) v *= 0.3f;
  const auto c = solve_lambertian(scaled);
  for (std::size_t i = 0; i < a.normals.n.px.size(); ++i) EXPECT_NEAR(a.normals.n.px[i], c.normals.n.px[i], 1e-6);
}

TEST(Lambertian, RejectsBadProblems) {
  auto p = rendered_sphere(3, 16, 16);
  p.images.pop_back();
  EXPECT_THROW(solve_lambertian(p), BaselineError);
  p = rendered_sphere(3, 16, 16);
  p.lights.pop_back();
  EXPECT_THROW(solve_lambertian(p), BaselineError);
}

TEST(Lambertian, LightsFromFileRows) {
  const auto l = lights_from_rows({{0, 0, 2, 1, 2, 3}});
  EXPECT_EQ(l[0].direction, Vector3d(0, 0, 1));
  EXPECT_EQ(l[0].rgb, Vector3d(1, 2, 3));
  EXPECT_THROW(lights_from_rows({{0, 0, 0, 1, 1, 1}}), BaselineError);
}
