#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/numkit/rng.hpp"
#include "unips/renderkit/geometry.hpp"

namespace unips::rk {

enum class LightingVariant { Directional, Environment, Mixture };

inline const char* variant_name(LightingVariant v) {
  switch (v) {
    case LightingVariant::Directional: return "directional";
    case LightingVariant::Environment: return "environment";
    case LightingVariant::Mixture: return "mixture";
  }
  return "?";
}

inline LightingVariant parse_variant(const std::string& s) {
  if (s == "directional") return LightingVariant::Directional;
  if (s == "environment") return LightingVariant::Environment;
  if (s == "mixture") return LightingVariant::Mixture;
  throw std::invalid_argument("unknown lighting variant '" + s + "' (directional|environment|mixture)");
}

struct DirectionalLight {
  Vec3 direction{0, 0, 1};  // unit, toward the light
  Vec3 intensity{1, 1, 1};
};

/// Latitude-longitude radiance grid. Row 0 is the +y pole; azimuth phi is
/// measured from +z toward +x and spans the columns from -pi to pi.
struct EnvironmentMap {
  int height = 0, width = 0;
  std::vector<float> rgb;  // height*width*3

  EnvironmentMap() = default;
  EnvironmentMap(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0.f) {}

  Vec3 texel(int r, int c) const {
    r = std::clamp(r, 0, height - 1);
    c = ((c % width) + width) % width;
    const float* p = &rgb[(static_cast<std::size_t>(r) * width + c) * 3];
    return {p[0], p[1], p[2]};
  }

  /// Bilinear lookup; wraps in azimuth, clamps at the poles.
  Vec3 lookup(const Vec3& d) const {
    const double theta = std::acos(std::clamp(d.y(), -1.0, 1.0));
    const double phi = std::atan2(d.x(), d.z());
    const double u = (phi + std::numbers::pi) / (2 * std::numbers::pi) * width - 0.5;
    const double v = theta / std::numbers::pi * height - 0.5;
    const int c0 = static_cast<int>(std::floor(u)), r0 = static_cast<int>(std::floor(v));
    const double a = u - c0, b = v - r0;
    return (1 - b) * ((1 - a) * texel(r0, c0) + a * texel(r0, c0 + 1)) +
           b * ((1 - a) * texel(r0 + 1, c0) + a * texel(r0 + 1, c0 + 1));
  }

  void validate() const {
    if (height <= 0 || width <= 0 || rgb.size() != static_cast<std::size_t>(height) * width * 3)
      throw std::invalid_argument("environment map: bad dimensions");
    for (float v : rgb)
      if (!std::isfinite(v) || v < 0.f) throw std::invalid_argument("environment map: negative or non-finite radiance");
  }
};

inline Vec3 direction_from_angles(double cos_theta, double phi) {
  const double s = std::sqrt(std::max(0.0, 1 - cos_theta * cos_theta));
  return {s * std::sin(phi), cos_theta, s * std::cos(phi)};
}

/// One incident direction with its radiance times solid-angle weight.
struct LightSample {
  Vec3 direction;
  Vec3 radiance;
};

/// Stratified quadrature of the sphere: `n` strata uniform in cos(theta) x phi,
/// each carrying the mean radiance of a 4x4 sub-grid times 4 pi / n.
inline std::vector<LightSample> stratified_env_samples(const EnvironmentMap& env, int n) {
  if (n < 1) throw std::invalid_argument("environment sample count must be positive");
  int rows = static_cast<int>(std::round(std::sqrt(static_cast<double>(n))));
  while (n % rows != 0) --rows;
  const int cols = n / rows;
  constexpr int kSub = 4;
  std::vector<LightSample> out;
  out.reserve(static_cast<std::size_t>(n));
  const double w = 4 * std::numbers::pi / n;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      Vec3 acc = Vec3::Zero();
      for (int a = 0; a < kSub; ++a)
        for (int b = 0; b < kSub; ++b) {
          const double ct = 1 - 2 * (i + (a + 0.5) / kSub) / rows;
          const double phi = -std::numbers::pi + 2 * std::numbers::pi * (j + (b + 0.5) / kSub) / cols;
          acc += env.lookup(direction_from_angles(ct, phi));
        }
      const double ct = 1 - 2 * (i + 0.5) / rows;
      const double phi = -std::numbers::pi + 2 * std::numbers::pi * (j + 0.5) / cols;
      out.push_back({direction_from_angles(ct, phi), acc / (kSub * kSub) * w});
    }
  return out;
}

inline Mat3 rotation_about_y(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitY()).toRotationMatrix();
}

struct EnvironmentLight {
  std::shared_ptr<const EnvironmentMap> map;
  double rotation = 0.0;  // radians about +y
};

struct LightingCondition {
  LightingVariant variant = LightingVariant::Directional;
  std::optional<DirectionalLight> directional;
  std::optional<EnvironmentLight> environment;

  static LightingCondition make_directional(const DirectionalLight& d) {
    return {LightingVariant::Directional, d, std::nullopt};
  }
  static LightingCondition make_environment(const EnvironmentLight& e) {
    return {LightingVariant::Environment, std::nullopt, e};
  }
  static LightingCondition make_mixture(const DirectionalLight& d, const EnvironmentLight& e) {
    return {LightingVariant::Mixture, d, e};
  }

  void validate() const {
    const bool need_dir = variant != LightingVariant::Environment;
    const bool need_env = variant != LightingVariant::Directional;
    if (need_dir) {
      if (!directional) throw std::invalid_argument("lighting: directional component missing");
      if (std::abs(directional->direction.norm() - 1.0) > 1e-9)
        throw std::invalid_argument("lighting: direction is not unit length");
      if ((directional->intensity.array() < 0).any()) throw std::invalid_argument("lighting: negative intensity");
    }
    if (need_env) {
      if (!environment || !environment->map) throw std::invalid_argument("lighting: environment grid missing");
      environment->map->validate();
    }
  }

  /// Flattens the condition into directional samples.
  std::vector<LightSample> samples(int env_samples = 64) const {
    validate();
    std::vector<LightSample> out;
    if (variant != LightingVariant::Environment) out.push_back({directional->direction, directional->intensity});
    if (variant != LightingVariant::Directional) {
      const Mat3 rot = rotation_about_y(environment->rotation);
      for (auto s : stratified_env_samples(*environment->map, env_samples)) {
        s.direction = rot * s.direction;
        out.push_back(s);
      }
    }
    return out;
  }
};

/// Uniform direction on the hemisphere facing the camera (z > 0), kept
/// away from grazing so every light reaches part of the visible surface.
inline Vec3 random_upper_direction(nk::Rng& rng, double min_z = 0.2) {
  const double z = rng.uniform(min_z, 1.0);
  const double phi = rng.uniform(0.0, 2 * std::numbers::pi);
  const double s = std::sqrt(1 - z * z);
  return {s * std::cos(phi), s * std::sin(phi), z};
}

inline Vec3 random_light_color(nk::Rng& rng, double saturation = 0.3) {
  Vec3 c;
  for (int k = 0; k < 3; ++k) c[k] = 1.0 - saturation * rng.uniform();
  return c / c.maxCoeff();
}

/// Procedural HDR environment: sky gradient over a darker ground plus a few
/// bright emitters (sun / lamps) and broad colored patches.
inline EnvironmentMap procedural_environment(nk::Rng& rng, int h = 32, int w = 64) {
  EnvironmentMap env(h, w);
  const Vec3 zenith = random_light_color(rng, 0.6) * rng.uniform(0.3, 1.0);
  const Vec3 horizon = random_light_color(rng, 0.4) * rng.uniform(0.5, 1.2);
  const Vec3 ground = random_light_color(rng, 0.5) * rng.uniform(0.05, 0.3);
  struct Lobe {
    Vec3 dir, color;
    double sharpness;
  };
  std::vector<Lobe> lobes;
  const int n_lobes = 1 + static_cast<int>(rng.below(3));
  for (int k = 0; k < n_lobes; ++k) {
    const Vec3 d = direction_from_angles(rng.uniform(-0.3, 1.0), rng.uniform(-std::numbers::pi, std::numbers::pi));
    const bool sun = rng.bernoulli(0.5);
    lobes.push_back({d, random_light_color(rng, 0.5) * (sun ? rng.uniform(20, 60) : rng.uniform(1, 4)),
                     sun ? rng.uniform(200, 800) : rng.uniform(4, 20)});
  }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double ct = std::cos((r + 0.5) / h * std::numbers::pi);
      const double phi = -std::numbers::pi + (c + 0.5) / w * 2 * std::numbers::pi;
      const Vec3 d = direction_from_angles(ct, phi);
      Vec3 L = ct >= 0 ? Vec3(horizon + ct * (zenith - horizon)) : ground;
      for (const auto& l : lobes) L += l.color * std::exp(l.sharpness * (d.dot(l.dir) - 1));
      float* p = &env.rgb[(static_cast<std::size_t>(r) * w + c) * 3];
      for (int k = 0; k < 3; ++k) p[k] = static_cast<float>(L[k]);
    }
  return env;
}

}  // namespace unips::rk
