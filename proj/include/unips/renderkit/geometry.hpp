#pragma once

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "unips/numkit/rng.hpp"

// Procedural surface types and ray queries. World frame = camera frame:
// x right, y up, z toward the (orthographic) camera; the image plane covers
// the unit square [0,1]^2 in (x, y).

namespace unips::rk {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
};

struct Hit {
  double t;
  Vec3 normal;  // unit, object space, outward
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Entry/exit parameters of a ray against a sphere, if it intersects.
inline std::optional<std::pair<double, double>> ray_sphere(const Ray& r, const Vec3& c, double radius) {
  const Vec3 oc = r.origin - c;
  const double b = oc.dot(r.dir);
  const double cc = oc.squaredNorm() - radius * radius;
  const double disc = b * b - cc;
  if (disc < 0) return std::nullopt;
  const double s = std::sqrt(disc);
  return std::make_pair(-b - s, -b + s);
}

struct Sphere {
  Vec3 center;
  double radius;
};

/// Union of spheres, intersected analytically.
struct SphereSet {
  std::vector<Sphere> spheres;

  std::optional<Hit> intersect(const Ray& r, double tmin, double tmax) const {
    std::optional<Hit> best;
    for (const auto& s : spheres) {
      auto ts = ray_sphere(r, s.center, s.radius);
      if (!ts) continue;
      for (double t : {ts->first, ts->second}) {
        if (t > tmin && t < tmax && (!best || t < best->t)) {
          best = Hit{t, (r.origin + t * r.dir - s.center).normalized()};
          break;
        }
      }
    }
    return best;
  }

  double bounding_radius() const {
    double r = 0;
    for (const auto& s : spheres) r = std::max(r, s.center.norm() + s.radius);
    return r;
  }
};

/// Elevation grid z = h(x, y) over [-1,1]^2 with bilinear interpolation;
/// normals from central differences of the interpolant. Two-sided.
struct Heightfield {
  int n = 2;                  // samples per side
  std::vector<double> z;      // n*n, row j = y index
  double zmin = 0, zmax = 0;

  static Heightfield flat(int n = 2) {
    Heightfield h;
    h.n = n;
    h.z.assign(static_cast<std::size_t>(n) * n, 0.0);
    return h;
  }

  void update_bounds() {
    zmin = *std::min_element(z.begin(), z.end());
    zmax = *std::max_element(z.begin(), z.end());
  }

  double height(double x, double y) const {
    const double fx = std::clamp((x + 1.0) * 0.5 * (n - 1), 0.0, double(n - 1));
    const double fy = std::clamp((y + 1.0) * 0.5 * (n - 1), 0.0, double(n - 1));
    const int i0 = std::min(static_cast<int>(fx), n - 2), j0 = std::min(static_cast<int>(fy), n - 2);
    const double ax = fx - i0, ay = fy - j0;
    auto at = [&](int i, int j) { return z[static_cast<std::size_t>(j) * n + i]; };
    return (1 - ay) * ((1 - ax) * at(i0, j0) + ax * at(i0 + 1, j0)) +
           ay * ((1 - ax) * at(i0, j0 + 1) + ax * at(i0 + 1, j0 + 1));
  }

  Vec3 normal_at(double x, double y) const {
    const double e = 1.0 / (n - 1);
    const double dx = (height(x + e, y) - height(x - e, y)) / (2 * e);
    const double dy = (height(x, y + e) - height(x, y - e)) / (2 * e);
    return Vec3(-dx, -dy, 1.0).normalized();
  }

  std::optional<Hit> intersect(const Ray& r, double tmin, double tmax) const {
    // Clip against the bounding slab, then march with bisection refinement.
    double t0 = tmin, t1 = tmax;
    const double lo[3] = {-1, -1, zmin - 1e-9}, hi[3] = {1, 1, zmax + 1e-9};
    for (int a = 0; a < 3; ++a) {
      if (std::abs(r.dir[a]) < 1e-15) {
        if (r.origin[a] < lo[a] || r.origin[a] > hi[a]) return std::nullopt;
        continue;
      }
      double ta = (lo[a] - r.origin[a]) / r.dir[a], tb = (hi[a] - r.origin[a]) / r.dir[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) return std::nullopt;
    }
    auto f = [&](double t) {
      const Vec3 p = r.origin + t * r.dir;
      return p.z() - height(p.x(), p.y());
    };
    const double step = 0.5 / (n - 1);
    double ta = t0, fa = f(ta);
    if (fa == 0.0) return make_hit(r, ta);
    while (ta < t1) {
      const double tb = std::min(ta + step, t1);
      const double fb = f(tb);
      if ((fa < 0) != (fb < 0) || fb == 0.0) {
        double a = ta, b = tb, fa2 = fa;
        for (int it = 0; it < 50; ++it) {
          const double m = 0.5 * (a + b), fm = f(m);
          if ((fa2 < 0) == (fm < 0) && fm != 0.0) {
            a = m;
            fa2 = fm;
          } else {
            b = m;
          }
        }
        return make_hit(r, b);
      }
      ta = tb;
      fa = fb;
    }
    return std::nullopt;
  }

  double bounding_radius() const {
    return std::sqrt(2.0 + std::max(zmin * zmin, zmax * zmax));
  }

private:
  std::optional<Hit> make_hit(const Ray& r, double t) const {
    const Vec3 p = r.origin + t * r.dir;
    return Hit{t, normal_at(p.x(), p.y())};
  }
};

/// Union of spheres blended by a polynomial smooth minimum of their signed
/// distances; intersected by sphere tracing.
struct BlobUnion {
  std::vector<Sphere> blobs;
  double blend = 0.25;

  double sdf(const Vec3& p) const {
    double d = kInf;
    for (const auto& b : blobs) {
      const double di = (p - b.center).norm() - b.radius;
      if (d == kInf) {
        d = di;
        continue;
      }
      const double h = std::max(blend - std::abs(d - di), 0.0) / blend;
      d = std::min(d, di) - h * h * blend * 0.25;
    }
    return d;
  }

  Vec3 gradient(const Vec3& p) const {
    const double e = 1e-5;
    Vec3 g;
    for (int a = 0; a < 3; ++a) {
      Vec3 dp = Vec3::Zero();
      dp[a] = e;
      g[a] = sdf(p + dp) - sdf(p - dp);
    }
    return g.normalized();
  }

  std::optional<Hit> intersect(const Ray& r, double tmin, double tmax) const {
    auto range = ray_sphere(r, Vec3::Zero(), bounding_radius());
    if (!range) return std::nullopt;
    double t = std::max(tmin, range->first);
    const double tend = std::min(tmax, range->second);
    for (int it = 0; it < 512 && t < tend; ++it) {
      const double d = sdf(r.origin + t * r.dir);
      if (d < 1e-7) return Hit{t, gradient(r.origin + t * r.dir)};
      t += std::max(d, 1e-6);
    }
    return std::nullopt;
  }

  double bounding_radius() const {
    double r = 0;
    for (const auto& b : blobs) r = std::max(r, b.center.norm() + b.radius);
    return r + blend;
  }
};

using Shape = std::variant<SphereSet, Heightfield, BlobUnion>;

inline const char* shape_kind(const Shape& s) {
  if (std::holds_alternative<SphereSet>(s)) return "spheres";
  if (std::holds_alternative<Heightfield>(s)) return "heightfield";
  return "blobs";
}

/// A shape placed in the world: p_world = translation + scale * R * p_object.
struct Object {
  Shape shape;
  Mat3 rotation = Mat3::Identity();
  double scale = 1.0;
  Vec3 translation = Vec3::Zero();

  Ray to_object(const Ray& w) const {
    return {rotation.transpose() * (w.origin - translation) / scale, rotation.transpose() * w.dir};
  }

  /// Nearest hit in world units with a world-space unit normal facing the
  /// ray origin.
  std::optional<Hit> intersect(const Ray& w, double tmin = 1e-9, double tmax = kInf) const {
    const Ray r = to_object(w);
    auto h = std::visit([&](const auto& s) { return s.intersect(r, tmin / scale, tmax / scale); }, shape);
    if (!h) return std::nullopt;
    Vec3 n = rotation * h->normal;
    if (n.dot(w.dir) > 0) n = -n;
    return Hit{h->t * scale, n.normalized()};
  }

  bool occluded(const Ray& w, double tmax = kInf) const { return intersect(w, 1e-9, tmax).has_value(); }

  Vec3 object_point(const Vec3& world) const { return rotation.transpose() * (world - translation) / scale; }

  double bounding_radius() const {
    return std::visit([](const auto& s) { return s.bounding_radius(); }, shape);
  }
};

/// Uniformly distributed rotation (quaternion from four normals).
inline Mat3 random_rotation(nk::Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

/// Orthographic camera ray through pixel (row, col) of an h x w frame.
inline Ray camera_ray(int row, int col, int h, int w) {
  const double x = (col + 0.5) / w;
  const double y = 1.0 - (row + 0.5) / h;
  return {Vec3(x, y, 1e3), Vec3(0, 0, -1)};
}

/// Rescales and recenters `obj` so the bounding box of its silhouette spans
/// the unit frame along its longer side and is centered along the other.
inline void fit_to_frame(Object& obj, int probe = 256) {
  obj.scale = 1.0;
  obj.translation = Vec3::Zero();
  const double R = obj.bounding_radius() * 1.01;
  double xmin = kInf, xmax = -kInf, ymin = kInf, ymax = -kInf;
  const double cell = 2 * R / probe;
  for (int i = 0; i < probe; ++i)
    for (int j = 0; j < probe; ++j) {
      const double x = -R + (j + 0.5) * cell, y = -R + (i + 0.5) * cell;
      if (obj.intersect({Vec3(x, y, 10 * R + 10), Vec3(0, 0, -1)})) {
        xmin = std::min(xmin, x - 0.5 * cell);
        xmax = std::max(xmax, x + 0.5 * cell);
        ymin = std::min(ymin, y - 0.5 * cell);
        ymax = std::max(ymax, y + 0.5 * cell);
      }
    }
  if (xmin > xmax) throw std::runtime_error("fit_to_frame: object has an empty silhouette");
  const double extent = std::max(xmax - xmin, ymax - ymin);
  obj.scale = 1.0 / extent;
  const Vec3 center(0.5 * (xmin + xmax), 0.5 * (ymin + ymax), 0.0);
  obj.translation = Vec3(0.5, 0.5, 0.0) - obj.scale * center;
}

}  // namespace unips::rk
