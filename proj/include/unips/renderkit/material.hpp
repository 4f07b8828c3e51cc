#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "unips/numkit/rng.hpp"
#include "unips/renderkit/geometry.hpp"

namespace unips::rk {

struct MaterialSample {
  Vec3 base_color{0.5, 0.5, 0.5};
  double roughness = 0.5;
  double metallic = 0.0;
};

/// Smooth 3-D value noise in [0,1] on an integer lattice keyed by `seed`.
inline double value_noise(const Vec3& p, std::uint64_t seed) {
  auto lattice = [seed](std::int64_t x, std::int64_t y, std::int64_t z) {
    std::uint64_t h = nk::splitmix64(seed ^ static_cast<std::uint64_t>(x) * 0x9E3779B185EBCA87ull);
    h = nk::splitmix64(h ^ static_cast<std::uint64_t>(y) * 0xC2B2AE3D27D4EB4Full);
    h = nk::splitmix64(h ^ static_cast<std::uint64_t>(z) * 0x165667B19E3779F9ull);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  };
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy),
             iz = static_cast<std::int64_t>(fz);
  auto fade = [](double t) { return t * t * (3 - 2 * t); };
  const double ux = fade(p.x() - fx), uy = fade(p.y() - fy), uz = fade(p.z() - fz);
  double acc = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? ux : 1 - ux) * (dy ? uy : 1 - uy) * (dz ? uz : 1 - uz);
        acc += w * lattice(ix + dx, iy + dy, iz + dz);
      }
  return acc;
}

/// Spatially varying base color / roughness / metallic maps, evaluated in
/// object space so the texture moves with the surface. `frequency == 0`
/// gives a uniform material with the `*_a` values.
struct MaterialMaps {
  Vec3 color_a{0.5, 0.5, 0.5}, color_b{0.5, 0.5, 0.5};
  double roughness_a = 1.0, roughness_b = 1.0;
  double metallic_a = 0.0, metallic_b = 0.0;
  double frequency = 0.0;
  std::uint64_t seed = 0;

  static MaterialMaps uniform(const Vec3& color, double roughness, double metallic) {
    MaterialMaps m;
    m.color_a = m.color_b = color;
    m.roughness_a = m.roughness_b = roughness;
    m.metallic_a = m.metallic_b = metallic;
    return m;
  }

  MaterialSample sample(const Vec3& object_point) const {
    MaterialSample s;
    if (frequency <= 0.0) {
      s.base_color = color_a;
      s.roughness = roughness_a;
      s.metallic = metallic_a;
    } else {
      const Vec3 p = object_point * frequency;
      const double t0 = value_noise(p, seed), t1 = value_noise(p, seed + 1), t2 = value_noise(p, seed + 2);
      s.base_color = color_a + t0 * (color_b - color_a);
      s.roughness = roughness_a + t1 * (roughness_b - roughness_a);
      s.metallic = metallic_a + t2 * (metallic_b - metallic_a);
    }
    s.base_color = s.base_color.cwiseMax(0.0).cwiseMin(1.0);
    s.roughness = std::clamp(s.roughness, 0.0, 1.0);
    s.metallic = std::clamp(s.metallic, 0.0, 1.0);
    return s;
  }
};

inline constexpr double kMinRoughness = 0.05;

/// Blinn-Phong exponent for a roughness value: 2 / r^2 - 2.
inline double specular_exponent(double roughness) {
  const double r = std::max(roughness, kMinRoughness);
  return 2.0 / (r * r) - 2.0;
}

/// Weight of the specular lobe. Vanishes for rough dielectrics, so
/// metallic 0 / roughness 1 is exactly Lambertian.
inline double specular_weight(const MaterialSample& m) {
  return m.metallic + (1.0 - m.metallic) * 0.3 * (1.0 - m.roughness);
}

/// BRDF value for unit incident `wi`, outgoing `wo`, normal `n`:
/// (1-metallic) base/pi + w_s * lerp(white, base, metallic) * (e+2)/(2 pi) (n.h)^e.
inline Vec3 brdf(const Vec3& n, const Vec3& wi, const Vec3& wo, const MaterialSample& m) {
  const Vec3 diffuse = (1.0 - m.metallic) * m.base_color / std::numbers::pi;
  const double ws = specular_weight(m);
  if (ws <= 0.0) return diffuse;
  const Vec3 h = (wi + wo).normalized();
  const double e = specular_exponent(m.roughness);
  const double lobe = (e + 2.0) / (2.0 * std::numbers::pi) * std::pow(std::max(0.0, n.dot(h)), e);
  const Vec3 spec_color = Vec3::Ones() + m.metallic * (m.base_color - Vec3::Ones());
  return diffuse + ws * lobe * spec_color;
}

}  // namespace unips::rk
