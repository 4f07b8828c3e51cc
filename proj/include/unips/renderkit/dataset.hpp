#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "unips/image.hpp"
#include "unips/numkit/rng.hpp"
#include "unips/renderkit/geometry.hpp"
#include "unips/renderkit/lighting.hpp"
#include "unips/renderkit/material.hpp"
#include "unips/renderkit/render.hpp"

namespace unips::rk {

enum class AssetKind { Sphere, SphereSet, Blobs, Heightfield, Plane };

inline const char* asset_name(AssetKind k) {
  switch (k) {
    case AssetKind::Sphere: return "sphere";
    case AssetKind::SphereSet: return "spheres";
    case AssetKind::Blobs: return "blobs";
    case AssetKind::Heightfield: return "heightfield";
    case AssetKind::Plane: return "plane";
  }
  return "?";
}

inline AssetKind parse_asset(const std::string& s) {
  for (auto k : {AssetKind::Sphere, AssetKind::SphereSet, AssetKind::Blobs, AssetKind::Heightfield, AssetKind::Plane})
    if (s == asset_name(k)) return k;
  throw std::invalid_argument("unknown asset kind '" + s + "'");
}

/// What objects and materials may be drawn.
struct AssetPools {
  std::vector<AssetKind> shapes{AssetKind::SphereSet, AssetKind::Blobs, AssetKind::Heightfield};
  bool textured = true;   // spatially varying material maps
  bool specular = true;   // allow non-Lambertian materials
};

struct DatasetConfig {
  int n_objects = 10;
  int q = 10;
  int height = 128;
  int width = 128;
  LightingVariant lighting = LightingVariant::Directional;
  std::uint64_t seed = 0;
  int env_samples = 64;
  int max_rotation_retries = 8;
  int max_light_retries = 8;
  double entropy_threshold = 4.0;
  double exposure_target = 0.3;
};

struct RenderedSample {
  std::vector<Image> images;
  NormalMap normals;  // normals.valid is the object mask
  std::vector<LightingCondition> lighting;
  std::vector<double> exposures;
  std::uint64_t seed = 0;
  int object_index = 0;
  std::string shape;
  double entropy = 0;

  const Mask& mask() const { return normals.valid; }
  int height() const { return normals.height(); }
  int width() const { return normals.width(); }
};

// ---------------------------------------------------------------- asset draws

inline Heightfield fractal_heightfield(nk::Rng& rng, int n = 33, double amplitude = 0.6) {
  Heightfield hf = Heightfield::flat(n);
  const std::uint64_t key = rng.next();
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const Vec3 p(2.0 * i / (n - 1) - 1, 2.0 * j / (n - 1) - 1, 0.5);
      double z = 0, a = amplitude, f = 1.5;
      for (int o = 0; o < 4; ++o) {
        z += a * (value_noise(p * f, key + o) - 0.5);
        a *= 0.5;
        f *= 2;
      }
      hf.z[static_cast<std::size_t>(j) * n + i] = z;
    }
  hf.update_bounds();
  return hf;
}

inline Shape random_shape(AssetKind kind, nk::Rng& rng) {
  switch (kind) {
    case AssetKind::Sphere: return SphereSet{{{Vec3::Zero(), 1.0}}};
    case AssetKind::SphereSet: {
      SphereSet s;
      const int n = 2 + static_cast<int>(rng.below(3));
      for (int k = 0; k < n; ++k) {
        const Vec3 c(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6));
        s.spheres.push_back({c, rng.uniform(0.3, 0.7)});
      }
      return s;
    }
    case AssetKind::Blobs: {
      BlobUnion b;
      const int n = 3 + static_cast<int>(rng.below(4));
      for (int k = 0; k < n; ++k) {
        const Vec3 c(rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7));
        b.blobs.push_back({c, rng.uniform(0.25, 0.55)});
      }
      return b;
    }
    case AssetKind::Heightfield: return fractal_heightfield(rng);
    case AssetKind::Plane: {
      Heightfield h = Heightfield::flat();
      h.update_bounds();
      return h;
    }
  }
  throw std::logic_error("random_shape: bad kind");
}

inline MaterialMaps random_material(const AssetPools& pools, nk::Rng& rng) {
  MaterialMaps m;
  auto color = [&] { return Vec3(rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)); };
  m.color_a = color();
  m.color_b = color();
  if (pools.specular) {
    m.roughness_a = rng.uniform(0.05, 1.0);
    m.roughness_b = rng.uniform(0.05, 1.0);
    const double u = rng.uniform();
    if (u < 0.2) {
      m.metallic_a = m.metallic_b = 1.0;
    } else if (u < 0.4) {
      m.metallic_b = 1.0;
    }
  }
  m.seed = rng.next();
  m.frequency = pools.textured && rng.bernoulli(0.5) ? rng.uniform(1.0, 4.0) : 0.0;
  if (m.frequency == 0.0) return MaterialMaps::uniform(m.color_a, m.roughness_a, m.metallic_a);
  return m;
}

/// Stream ids keep lighting draws independent of object draws, so one seed
/// yields the same objects and poses under every lighting variant.
enum Stream : std::uint64_t { kObjectStream = 1, kLightStream = 16 };

inline DirectionalLight random_directional(nk::Rng& rng, double scale = 1.0) {
  return {random_upper_direction(rng), random_light_color(rng) * scale * rng.uniform(0.8, 1.2)};
}

inline LightingCondition draw_lighting(LightingVariant v, const std::shared_ptr<const EnvironmentMap>& env,
                                       nk::Rng& rng) {
  switch (v) {
    case LightingVariant::Directional: return LightingCondition::make_directional(random_directional(rng));
    case LightingVariant::Environment:
      return LightingCondition::make_environment({env, rng.uniform(0.0, 2 * std::numbers::pi)});
    case LightingVariant::Mixture: {
      const EnvironmentLight e{env, rng.uniform(0.0, 2 * std::numbers::pi)};
      return LightingCondition::make_mixture(random_directional(rng, 3.0), e);
    }
  }
  throw std::logic_error("draw_lighting: bad variant");
}

using DatasetLog = std::function<void(const std::string&)>;

/// Renders one object (index `obj`) or returns nullopt when no pose passes
/// the entropy filter or every light draw is rejected.
inline std::optional<RenderedSample> generate_object(const AssetPools& pools, const DatasetConfig& cfg, int obj,
                                                     const DatasetLog& log = {}) {
  if (pools.shapes.empty()) throw std::invalid_argument("generate_dataset: empty shape pool");
  nk::Rng orng(nk::counter_key(cfg.seed, kObjectStream, static_cast<std::uint64_t>(obj)));
  nk::Rng lrng(nk::counter_key(cfg.seed, kLightStream + static_cast<std::uint64_t>(cfg.lighting),
                               static_cast<std::uint64_t>(obj)));
  const AssetKind kind = pools.shapes[orng.below(pools.shapes.size())];
  SceneDescription scene;
  scene.object.shape = random_shape(kind, orng);
  scene.material = random_material(pools, orng);

  std::optional<GBuffer> gbuf;
  double entropy = 0;
  for (int attempt = 0; attempt < cfg.max_rotation_retries; ++attempt) {
    scene.object.rotation = random_rotation(orng);
    try {
      fit_to_frame(scene.object);
    } catch (const std::runtime_error&) {
      continue;  // edge-on plane
    }
    GBuffer g = trace_gbuffer(scene, cfg.height, cfg.width);
    if (g.normals.valid.empty()) continue;
    entropy = normal_entropy(g.normals);
    if (entropy >= cfg.entropy_threshold) {
      gbuf = std::move(g);
      break;
    }
  }
  if (!gbuf) {
    if (log)
      log("object " + std::to_string(obj) + " (" + asset_name(kind) + ") skipped: entropy below threshold after " +
          std::to_string(cfg.max_rotation_retries) + " rotations");
    return std::nullopt;
  }

  std::shared_ptr<const EnvironmentMap> env;
  if (cfg.lighting != LightingVariant::Directional)
    env = std::make_shared<const EnvironmentMap>(procedural_environment(lrng));

  RenderConfig rc;
  rc.height = cfg.height;
  rc.width = cfg.width;
  rc.env_samples = cfg.env_samples;
  rc.exposure_target = cfg.exposure_target;

  RenderedSample s;
  s.normals = gbuf->normals;
  s.seed = cfg.seed;
  s.object_index = obj;
  s.shape = asset_name(kind);
  s.entropy = entropy;
  for (int k = 0; k < cfg.q; ++k) {
    bool ok = false;
    for (int attempt = 0; attempt < cfg.max_light_retries && !ok; ++attempt) {
      const auto light = draw_lighting(cfg.lighting, env, lrng);
      try {
        auto r = shade_gbuffer(scene, *gbuf, light, rc);
        s.images.push_back(std::move(r.image));
        s.exposures.push_back(r.exposure);
        s.lighting.push_back(light);
        ok = true;
      } catch (const RenderError&) {
      }
    }
    if (!ok) {
      if (log) log("object " + std::to_string(obj) + " skipped: every light draw left it unlit");
      return std::nullopt;
    }
  }
  return s;
}

/// Draws `n_objects` objects; emitted samples all pass the entropy filter.
inline std::vector<RenderedSample> generate_dataset(const AssetPools& pools, const DatasetConfig& cfg,
                                                    const DatasetLog& log = {}) {
  std::vector<RenderedSample> out;
  for (int obj = 0; obj < cfg.n_objects; ++obj)
    if (auto s = generate_object(pools, cfg, obj, log)) out.push_back(std::move(*s));
  return out;
}

// -------------------------------------------------------------- augmentation

/// Pixel remap of a spatial transform: output (i, j) reads input (si, sj).
struct SpatialOp {
  enum Kind { HFlip, VFlip, Rot90 } kind;

  std::pair<int, int> out_size(int h, int w) const { return kind == Rot90 ? std::pair{w, h} : std::pair{h, w}; }

  /// Rot90 turns the frame counter-clockwise.
  std::pair<int, int> source(int i, int j, int h, int w) const {
    switch (kind) {
      case HFlip: return {i, w - 1 - j};
      case VFlip: return {h - 1 - i, j};
      case Rot90: return {j, w - 1 - i};
    }
    return {i, j};
  }
};

inline Image apply_spatial(const Image& img, SpatialOp op) {
  const auto [oh, ow] = op.out_size(img.height, img.width);
  Image out(oh, ow, img.channels);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      const auto [si, sj] = op.source(i, j, img.height, img.width);
      for (int c = 0; c < img.channels; ++c) out.at(i, j, c) = img.at(si, sj, c);
    }
  return out;
}

inline Mask apply_spatial(const Mask& m, SpatialOp op) {
  const auto [oh, ow] = op.out_size(m.height, m.width);
  Mask out(oh, ow);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      const auto [si, sj] = op.source(i, j, m.height, m.width);
      out.set(i, j, m(si, sj));
    }
  return out;
}

inline NormalMap apply_spatial(const NormalMap& nm, SpatialOp op) {
  NormalMap out;
  out.n = apply_spatial(nm.n, op);
  out.valid = apply_spatial(nm.valid, op);
  for (std::size_t p = 0; p < out.n.px.size(); p += 3) {
    float& x = out.n.px[p];
    float& y = out.n.px[p + 1];
    switch (op.kind) {
      case SpatialOp::HFlip: x = -x; break;
      case SpatialOp::VFlip: y = -y; break;
      case SpatialOp::Rot90: {
        const float ox = x, oy = y;
        x = -oy;
        y = ox;
        break;
      }
    }
    if (x == 0.f) x = 0.f;  // no negative zeros
    if (y == 0.f) y = 0.f;
  }
  return out;
}

inline RenderedSample apply_spatial(const RenderedSample& s, SpatialOp op) {
  RenderedSample out = s;
  for (auto& img : out.images) img = apply_spatial(img, op);
  out.normals = apply_spatial(s.normals, op);
  return out;
}

/// Output channel c reads input channel perm[c].
inline void permute_channels(Image& img, const std::array<int, 3>& perm) {
  for (std::size_t p = 0; p < img.px.size(); p += 3) {
    const float v[3] = {img.px[p], img.px[p + 1], img.px[p + 2]};
    for (int c = 0; c < 3; ++c) img.px[p + c] = v[perm[c]];
  }
}

/// Horizontal flip, vertical flip, 90-degree rotation and channel swap, each
/// with probability `p`. The channel swap draws one permutation per image.
inline RenderedSample augment(const RenderedSample& s, std::uint64_t seed, double p = 0.5) {
  nk::Rng rng(seed);
  RenderedSample out = s;
  if (rng.bernoulli(p)) out = apply_spatial(out, {SpatialOp::HFlip});
  if (rng.bernoulli(p)) out = apply_spatial(out, {SpatialOp::VFlip});
  if (rng.bernoulli(p)) out = apply_spatial(out, {SpatialOp::Rot90});
  if (rng.bernoulli(p)) {
    for (auto& img : out.images) {
      std::array<int, 3> perm{0, 1, 2};
      rng.shuffle(perm.begin(), perm.end());
      permute_channels(img, perm);
    }
  }
  return out;
}

// ------------------------------------------------------------------------ I/O

inline std::string scene_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d", index);
  return buf;
}

inline std::string image_file_name(int k, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%02d.%s", k, ext);
  return buf;
}

inline nlohmann::json lighting_to_json(const LightingCondition& l, double exposure) {
  nlohmann::json j;
  j["variant"] = variant_name(l.variant);
  j["exposure"] = exposure;
  if (l.directional) {
    j["direction"] = {l.directional->direction.x(), l.directional->direction.y(), l.directional->direction.z()};
    j["intensity"] = {l.directional->intensity.x(), l.directional->intensity.y(), l.directional->intensity.z()};
  }
  if (l.environment) j["env_rotation"] = l.environment->rotation;
  return j;
}

/// Writes one sample directory. Directional scenes also get `lights.txt`:
/// one line per image, "dx dy dz r g b" with the exposure folded into rgb.
inline void write_sample(const std::filesystem::path& dir, const RenderedSample& s, bool png16 = false) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < s.images.size(); ++k) {
    write_pfm((dir / image_file_name(static_cast<int>(k), "pfm")).string(), s.images[k]);
    if (png16) write_png16_linear((dir / image_file_name(static_cast<int>(k), "png")).string(), s.images[k], 1.f);
  }
  write_pfm((dir / "normal.pfm").string(), s.normals.n);
  write_mask_png((dir / "mask.png").string(), s.normals.valid);

  nlohmann::json meta;
  meta["seed"] = s.seed;
  meta["object_index"] = s.object_index;
  meta["shape"] = s.shape;
  meta["entropy"] = s.entropy;
  meta["lighting_variant"] = s.lighting.empty() ? "none" : variant_name(s.lighting.front().variant);
  meta["exposure_scales"] = s.exposures;
  meta["lights"] = nlohmann::json::array();
  for (std::size_t k = 0; k < s.lighting.size(); ++k) meta["lights"].push_back(lighting_to_json(s.lighting[k], s.exposures[k]));
  std::ofstream(dir / "meta.json") << std::setw(2) << meta << '\n';

  const bool directional =
      !s.lighting.empty() && s.lighting.front().variant == LightingVariant::Directional;
  if (directional) {
    std::ofstream lt(dir / "lights.txt");
    lt << std::setprecision(9);
    for (std::size_t k = 0; k < s.lighting.size(); ++k) {
      const auto& d = *s.lighting[k].directional;
      const Vec3 rgb = d.intensity * s.exposures[k];
      lt << d.direction.x() << ' ' << d.direction.y() << ' ' << d.direction.z() << ' ' << rgb.x() << ' ' << rgb.y()
         << ' ' << rgb.z() << '\n';
    }
  }
}

/// A scene as the network and baselines consume it.
struct SceneData {
  std::string name;
  std::vector<Image> images;
  NormalMap normals;
  std::vector<std::array<double, 6>> lights;  // empty unless lights.txt exists
};

inline SceneData read_scene(const std::filesystem::path& dir, int max_images = -1) {
  SceneData sd;
  sd.name = dir.filename().string();
  for (int k = 0; max_images < 0 || k < max_images; ++k) {
    const auto p = dir / image_file_name(k, "pfm");
    if (!std::filesystem::exists(p)) break;
    sd.images.push_back(read_pfm(p.string()));
  }
  if (sd.images.empty()) throw IoError("no img_00.pfm in " + dir.string());
  const auto np = dir / "normal.pfm";
  const auto mp = dir / "mask.png";
  sd.normals.valid = std::filesystem::exists(mp) ? read_mask_png(mp.string())
                                                 : Mask(sd.images[0].height, sd.images[0].width, true);
  sd.normals.n = std::filesystem::exists(np) ? read_pfm(np.string())
                                             : Image(sd.images[0].height, sd.images[0].width, 3);
  for (const auto& img : sd.images)
    if (!img.same_size(sd.images[0]) || img.channels != 3)
      throw IoError("inconsistent image sizes in " + dir.string());
  if (sd.normals.valid.height != sd.images[0].height || sd.normals.valid.width != sd.images[0].width)
    throw IoError("mask size does not match images in " + dir.string());
  if (std::ifstream lt(dir / "lights.txt"); lt) {
    std::array<double, 6> row{};
    while (lt >> row[0] >> row[1] >> row[2] >> row[3] >> row[4] >> row[5]) sd.lights.push_back(row);
  }
  return sd;
}

/// Scene directories of a dataset root, sorted by name.
inline std::vector<std::filesystem::path> list_scenes(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(root)) throw IoError("not a directory: " + root.string());
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && std::filesystem::exists(e.path() / "img_00.pfm")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace unips::rk
