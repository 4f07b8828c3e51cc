#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "unips/image.hpp"
#include "unips/parallel.hpp"

// Calibrated Lambertian photometric stereo by per-pixel least squares.

namespace unips::baseline {

class BaselineError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Light {
  Eigen::Vector3d direction;  // unit, towards the light
  Eigen::Vector3d rgb;        // intensity per channel
};

/// Parses lights.txt rows "dx dy dz r g b".
inline std::vector<Light> lights_from_rows(const std::vector<std::array<double, 6>>& rows) {
  std::vector<Light> out;
  for (const auto& r : rows) {
    Eigen::Vector3d d(r[0], r[1], r[2]);
    if (!(d.norm() > 0)) throw BaselineError("light with zero direction");
    out.push_back({d.normalized(), {r[3], r[4], r[5]}});
  }
  return out;
}

struct CalibratedProblem {
  std::vector<Image> images;
  std::vector<Light> lights;
  Mask mask;
  double shadow_threshold = 0.01;  // fraction of each image's maximum

  void validate() const {
    if (images.size() < 3) throw BaselineError("need at least 3 images, got " + std::to_string(images.size()));
    if (lights.size() != images.size())
      throw BaselineError(std::to_string(images.size()) + " images but " + std::to_string(lights.size()) + " lights");
    for (const auto& img : images)
      if (img.height != mask.height || img.width != mask.width || img.channels != 3)
        throw BaselineError("image size does not match the mask");
  }
};

struct PixelSolution {
  bool valid = false;
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  double albedo = 0;    // |b|
  double residual = 0;  // |L b - i| over the usable rows
  int used = 0;
};

/// Least squares L b = i over rows with obs > threshold[k]; rank < 3 or
/// fewer than 3 usable rows leaves the pixel invalid.
inline PixelSolution solve_pixel(const std::vector<Eigen::Vector3d>& dirs, const std::vector<double>& obs,
                                 const std::vector<double>& threshold) {
  PixelSolution s;
  std::vector<int> rows;
  for (std::size_t k = 0; k < obs.size(); ++k)
    if (obs[k] > threshold[k]) rows.push_back(static_cast<int>(k));
  s.used = static_cast<int>(rows.size());
  if (rows.size() < 3) return s;
  Eigen::MatrixXd L(rows.size(), 3);
  Eigen::VectorXd i(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    L.row(static_cast<Eigen::Index>(r)) = dirs[rows[r]].transpose();
    i(static_cast<Eigen::Index>(r)) = obs[rows[r]];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(L);
  qr.setThreshold(1e-6);
  if (qr.rank() < 3) return s;
  const Eigen::Vector3d b = qr.solve(i);
  const double n = b.norm();
  if (!(n > 0)) return s;
  s.valid = true;
  s.normal = b / n;
  s.albedo = n;
  s.residual = (L * b - i).norm();
  return s;
}

struct LambertianResult {
  NormalMap normals;
  Image albedo;  // 3 channels
};

/// Per-image gray observation: channel mean of I / light rgb.
inline double gray_observation(const Image& img, int y, int x, const Light& l) {
  double s = 0;
  int n = 0;
  for (int c = 0; c < 3; ++c)
    if (l.rgb[c] > 0) {
      s += img.at(y, x, c) / l.rgb[c];
      ++n;
    }
  return n ? s / n : 0.0;
}

inline LambertianResult solve_lambertian(const CalibratedProblem& p) {
  p.validate();
  const auto q = p.images.size();
  std::vector<Eigen::Vector3d> dirs;
  for (const auto& l : p.lights) dirs.push_back(l.direction);
  std::vector<double> threshold(q, 0.0);
  for (std::size_t k = 0; k < q; ++k) {
    double mx = 0;
    for (int y = 0; y < p.mask.height; ++y)
      for (int x = 0; x < p.mask.width; ++x)
        if (p.mask(y, x)) mx = std::max(mx, gray_observation(p.images[k], y, x, p.lights[k]));
    threshold[k] = p.shadow_threshold * mx;
  }
  LambertianResult out{NormalMap(p.mask.height, p.mask.width), Image(p.mask.height, p.mask.width, 3)};
  parallel_for(0, p.mask.height, [&](std::int64_t yy) {
    const int y = static_cast<int>(yy);
    std::vector<double> obs(q);
    for (int x = 0; x < p.mask.width; ++x) {
      if (!p.mask(y, x)) continue;
      for (std::size_t k = 0; k < q; ++k) obs[k] = gray_observation(p.images[k], y, x, p.lights[k]);
      const auto s = solve_pixel(dirs, obs, threshold);
      if (!s.valid) continue;
      out.normals.valid.set(y, x, true);
      for (int c = 0; c < 3; ++c) out.normals.n.at(y, x, c) = static_cast<float>(s.normal[c]);
      // Per-channel albedo: 1-D least squares of I_c / e_c against shading.
      for (int c = 0; c < 3; ++c) {
        double num = 0, den = 0;
        for (std::size_t k = 0; k < q; ++k) {
          if (!(obs[k] > threshold[k]) || !(p.lights[k].rgb[c] > 0)) continue;
          const double sh = dirs[k].dot(s.normal);
          num += sh * p.images[k].at(y, x, c) / p.lights[k].rgb[c];
          den += sh * sh;
        }
        out.albedo.at(y, x, c) = den > 0 ? static_cast<float>(num / den) : 0.f;
      }
    }
  });
  return out;
}

}  // namespace unips::baseline
