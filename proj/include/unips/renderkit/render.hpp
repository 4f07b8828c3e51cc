#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "unips/image.hpp"
#include "unips/parallel.hpp"
#include "unips/renderkit/geometry.hpp"
#include "unips/renderkit/lighting.hpp"
#include "unips/renderkit/material.hpp"

namespace unips::rk {

class RenderError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct SceneDescription {
  Object object;
  MaterialMaps material;

  void validate() const {
    const Mat3& R = object.rotation;
    if (!(R.transpose() * R).isApprox(Mat3::Identity(), 1e-9) || R.determinant() < 0)
      throw std::invalid_argument("scene: pose rotation is not orthonormal");
    if (const auto* hf = std::get_if<Heightfield>(&object.shape))
      for (double z : hf->z)
        if (!std::isfinite(z)) throw std::invalid_argument("scene: heightfield has non-finite elevation");
  }
};

struct RenderConfig {
  int height = 128;
  int width = 128;
  int env_samples = 64;
  bool exposure = true;
  double exposure_target = 0.3;
  double shadow_offset = 1e-4;
};

inline const Vec3 kViewDir{0, 0, 1};

/// Outgoing radiance toward the camera at a surface point. `occluded(ray)`
/// returns true when the ray toward a light hits geometry.
inline Vec3 shade(const Vec3& point, const Vec3& normal, const MaterialSample& m,
                  const std::vector<LightSample>& lights, const std::function<bool(const Ray&)>& occluded,
                  double shadow_offset = 1e-4) {
  Vec3 out = Vec3::Zero();
  for (const auto& l : lights) {
    const double cosine = normal.dot(l.direction);
    if (cosine <= 0.0) continue;
    if (occluded && occluded({point + shadow_offset * normal, l.direction})) continue;
    out += (brdf(normal, l.direction, kViewDir, m).array() * l.radiance.array()).matrix() * cosine;
  }
  return out;
}

/// Per-pixel first-hit geometry: mask, camera-space normals, world points
/// and material samples. Independent of lighting.
struct GBuffer {
  int height = 0, width = 0;
  NormalMap normals;
  std::vector<Vec3> points;
  std::vector<MaterialSample> materials;
};

inline GBuffer trace_gbuffer(const SceneDescription& scene, int h, int w) {
  scene.validate();
  GBuffer g;
  g.height = h;
  g.width = w;
  g.normals = NormalMap(h, w);
  g.points.assign(static_cast<std::size_t>(h) * w, Vec3::Zero());
  g.materials.assign(static_cast<std::size_t>(h) * w, MaterialSample{});
  parallel_for(0, h, [&](int row) {
    for (int col = 0; col < w; ++col) {
      const Ray ray = camera_ray(row, col, h, w);
      const auto hit = scene.object.intersect(ray);
      if (!hit) continue;
      const std::size_t i = static_cast<std::size_t>(row) * w + col;
      const Vec3 p = ray.origin + hit->t * ray.dir;
      g.points[i] = p;
      g.materials[i] = scene.material.sample(scene.object.object_point(p));
      g.normals.valid.set(row, col, true);
      for (int k = 0; k < 3; ++k) g.normals.n.at(row, col, k) = static_cast<float>(hit->normal[k]);
    }
  });
  return g;
}

struct RenderResult {
  Image image;
  double exposure = 1.0;
};

inline RenderResult shade_gbuffer(const SceneDescription& scene, const GBuffer& g, const LightingCondition& lighting,
                                  const RenderConfig& cfg) {
  if (g.normals.valid.empty()) throw RenderError("render rejected: empty mask (object off-camera)");
  const auto lights = lighting.samples(cfg.env_samples);
  const auto occluded = [&](const Ray& r) { return scene.object.occluded(r); };
  RenderResult res;
  res.image = Image(g.height, g.width, 3);
  std::vector<double> radiance(static_cast<std::size_t>(g.height) * g.width * 3, 0.0);
  parallel_for(0, g.height, [&](int row) {
    for (int col = 0; col < g.width; ++col) {
      if (!g.normals.valid(row, col)) continue;
      const std::size_t i = static_cast<std::size_t>(row) * g.width + col;
      Vec3 n;
      for (int k = 0; k < 3; ++k) n[k] = g.normals.n.at(row, col, k);
      const Vec3 L = shade(g.points[i], n.normalized(), g.materials[i], lights, occluded, cfg.shadow_offset);
      for (int k = 0; k < 3; ++k) radiance[i * 3 + k] = L[k];
    }
  });
  if (cfg.exposure) {
    double sum = 0;
    for (int row = 0; row < g.height; ++row)
      for (int col = 0; col < g.width; ++col)
        if (g.normals.valid(row, col))
          for (int k = 0; k < 3; ++k) sum += radiance[(static_cast<std::size_t>(row) * g.width + col) * 3 + k];
    const double mean = sum / (3.0 * static_cast<double>(g.normals.valid.count()));
    if (!(mean > 0.0)) throw RenderError("render rejected: object receives no light");
    res.exposure = cfg.exposure_target / mean;
  }
  for (std::size_t i = 0; i < radiance.size(); ++i) res.image.px[i] = static_cast<float>(radiance[i] * res.exposure);
  return res;
}

inline RenderResult render_image(const SceneDescription& scene, const LightingCondition& lighting,
                                 const RenderConfig& cfg) {
  return shade_gbuffer(scene, trace_gbuffer(scene, cfg.height, cfg.width), lighting, cfg);
}

inline constexpr int kEntropyBins = 8;

/// Shannon entropy in bits of valid normals binned on an 8x8 grid over
/// (n_x, n_y) in [-1,1]^2.
inline double normal_entropy(const NormalMap& nm) {
  std::vector<std::size_t> hist(kEntropyBins * kEntropyBins, 0);
  std::size_t total = 0;
  auto bin = [](float v) {
    const int b = static_cast<int>(std::floor((static_cast<double>(v) + 1.0) * 0.5 * kEntropyBins));
    return std::clamp(b, 0, kEntropyBins - 1);
  };
  for (int y = 0; y < nm.height(); ++y)
    for (int x = 0; x < nm.width(); ++x) {
      if (!nm.valid(y, x)) continue;
      ++hist[static_cast<std::size_t>(bin(nm.n.at(y, x, 1))) * kEntropyBins + bin(nm.n.at(y, x, 0))];
      ++total;
    }
  if (total == 0) throw std::invalid_argument("normal_entropy: empty mask");
  double h = 0;
  for (std::size_t c : hist) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return h;
}

}  // namespace unips::rk
