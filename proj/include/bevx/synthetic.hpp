#pragma once
// Synthetic scenes of oriented boxes on the ground plane, silhouette
// rendering into a camera rig, and BEV ground-truth rasterization.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bevx/camera.hpp"
#include "bevx/nn.hpp"
#include "bevx/tensor.hpp"

namespace bevx {

/// Oriented box resting on z = 0. `length` runs along the heading `yaw`,
/// `width` across it.
struct Box {
  double cx = 0, cy = 0, yaw = 0;
  double width = 2.0, length = 4.5, height = 1.6;

  bool contains_xy(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double along = dx * c + dy * s;
    const double across = -dx * s + dy * c;
    return std::abs(along) <= 0.5 * length && std::abs(across) <= 0.5 * width;
  }

  std::array<Eigen::Vector3d, 8> corners() const {
    std::array<Eigen::Vector3d, 8> out;
    const double c = std::cos(yaw), s = std::sin(yaw);
    std::size_t i = 0;
    for (double a : {-0.5, 0.5})
      for (double b : {-0.5, 0.5})
        for (double z : {0.0, height}) {
          const double lx = a * length, ly = b * width;
          out[i++] = {cx + lx * c - ly * s, cy + lx * s + ly * c, z};
        }
    return out;
  }

  Eigen::Vector3d center() const { return {cx, cy, 0.5 * height}; }

  double footprint_radius() const { return 0.5 * std::hypot(width, length); }
};

struct Scene {
  std::vector<Box> objects;
  std::uint64_t seed = 0;

  Scene rotated(double yaw) const {
    Scene r = *this;
    const double c = std::cos(yaw), s = std::sin(yaw);
    for (auto& b : r.objects) {
      const double x = b.cx, y = b.cy;
      b.cx = c * x - s * y;
      b.cy = s * x + c * y;
      b.yaw += yaw;
    }
    return r;
  }
};

/// Car-like boxes (about 2 x 4.5 x 1.6 m) with jittered size and uniform
/// heading, fully inside +/-extent and outside the ego clearance square.
inline Scene gen_scene(std::uint64_t seed, std::size_t n_objects, double extent, double ego_clearance = 3.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Scene scene;
  scene.seed = seed;
  for (std::size_t i = 0; i < n_objects; ++i) {
    Box b;
    b.width = 1.8 + 0.4 * unit(rng);
    b.length = 4.0 + 1.0 * unit(rng);
    b.height = 1.4 + 0.4 * unit(rng);
    b.yaw = std::numbers::pi * (2.0 * unit(rng) - 1.0);
    const double r = b.footprint_radius();
    const double span = extent - r;
    if (span <= 0.0) throw std::invalid_argument("gen_scene: extent too small for a car-sized box");
    for (int attempt = 0; attempt < 1000; ++attempt) {
      b.cx = span * (2.0 * unit(rng) - 1.0);
      b.cy = span * (2.0 * unit(rng) - 1.0);
      if (std::abs(b.cx) > ego_clearance + r || std::abs(b.cy) > ego_clearance + r) break;
    }
    scene.objects.push_back(b);
  }
  return scene;
}

/// Binary [rows, cols] mask; a cell is set iff its center lies inside some
/// box footprint. Cell centers follow the BEV grid convention (row 0 at
/// x = +extent_x, column 0 at y = +extent_y).
inline Tensor rasterize_bev(const Scene& scene, std::size_t rows, std::size_t cols, double resolution) {
  if (!(resolution > 0.0)) throw std::invalid_argument("rasterize_bev: resolution must be positive");
  const double ex = 0.5 * resolution * static_cast<double>(rows);
  const double ey = 0.5 * resolution * static_cast<double>(cols);
  std::vector<double> m(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = ex - (static_cast<double>(r) + 0.5) * resolution;
      const double y = ey - (static_cast<double>(c) + 0.5) * resolution;
      for (const auto& b : scene.objects) {
        if (b.contains_xy(x, y)) {
          m[r * cols + c] = 1.0;
          break;
        }
      }
    }
  return Tensor({rows, cols}, std::move(m));
}

inline Tensor rasterize_bev(const Scene& scene, double extent, double resolution) {
  const auto n = static_cast<std::size_t>(std::llround(2.0 * extent / resolution));
  return rasterize_bev(scene, n, n, resolution);
}

namespace detail {

inline double cross2(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

/// Counter-clockwise hull (monotone chain).
inline std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> p) {
  std::sort(p.begin(), p.end(), [](const auto& a, const auto& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  if (p.size() < 3) return p;
  std::vector<Eigen::Vector2d> h(2 * p.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    while (k >= 2 && cross2(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  for (std::size_t i = p.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross2(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  h.resize(k - 1);
  return h;
}

inline bool hull_contains(const std::vector<Eigen::Vector2d>& hull, const Eigen::Vector2d& q) {
  if (hull.size() < 3) return false;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    if (cross2(hull[i], hull[(i + 1) % hull.size()], q) < 0) return false;
  }
  return true;
}

}  // namespace detail

/// Silhouette intensity for a box whose center sits at `depth` meters.
inline double depth_intensity(double depth) { return std::min(1.0, 4.0 / depth); }

/// Renders [N_I, 1, H, W] grayscale images. A box is drawn in a view when
/// its center is inside the frustum and every corner is in front of the
/// camera; its projected corners' hull is filled far-to-near.
inline Tensor render_views(const Scene& scene, const CameraRig& rig) {
  rig.validate();
  const std::size_t H = rig.height(), W = rig.width();
  std::vector<double> img(rig.size() * H * W, 0.0);
  for (std::size_t n = 0; n < rig.size(); ++n) {
    const CameraView& view = rig.views[n];
    struct Item {
      double depth;
      std::vector<Eigen::Vector2d> hull;
    };
    std::vector<Item> items;
    for (const auto& b : scene.objects) {
      if (!frustum_contains(view, b.center())) continue;
      std::vector<Eigen::Vector2d> pts;
      bool ok = true;
      for (const auto& c : b.corners()) {
        const Projection p = view.project(c);
        if (!(p.depth > 0.05)) {
          ok = false;
          break;
        }
        pts.push_back(p.pixel);
      }
      if (!ok) continue;
      items.push_back({view.project(b.center()).depth, detail::convex_hull(std::move(pts))});
    }
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.depth > b.depth; });
    double* dst = img.data() + n * H * W;
    for (const auto& it : items) {
      double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
      for (const auto& p : it.hull) {
        umin = std::min(umin, p.x());
        umax = std::max(umax, p.x());
        vmin = std::min(vmin, p.y());
        vmax = std::max(vmax, p.y());
      }
      const auto lo = [](double v) { return static_cast<std::ptrdiff_t>(std::max(0.0, std::ceil(v))); };
      const std::ptrdiff_t u0 = lo(umin), v0 = lo(vmin);
      const auto u1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(W) - 1, static_cast<std::ptrdiff_t>(std::floor(umax)));
      const auto v1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(H) - 1, static_cast<std::ptrdiff_t>(std::floor(vmax)));
      const double value = depth_intensity(it.depth);
      for (std::ptrdiff_t v = v0; v <= v1; ++v)
        for (std::ptrdiff_t u = u0; u <= u1; ++u) {
          if (detail::hull_contains(it.hull, {static_cast<double>(u), static_cast<double>(v)})) {
            dst[static_cast<std::size_t>(v) * W + static_cast<std::size_t>(u)] = value;
          }
        }
    }
  }
  return Tensor({rig.size(), 1, H, W}, std::move(img));
}

// Scene file: "SCENE v1" then one "box cx cy yaw w l h" line per object.

inline void write_scene(std::ostream& os, const Scene& scene) {
  os << "SCENE v1\n" << std::setprecision(17);
  for (const auto& b : scene.objects) {
    os << "box " << b.cx << ' ' << b.cy << ' ' << b.yaw << ' ' << b.width << ' ' << b.length << ' '
       << b.height << '\n';
  }
}

inline Scene read_scene(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "SCENE v1") {
    throw std::runtime_error("scene file: missing 'SCENE v1' header");
  }
  Scene s;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag, extra;
    Box b;
    ls >> tag >> b.cx >> b.cy >> b.yaw >> b.width >> b.length >> b.height;
    if (!ls || tag != "box" || (ls >> extra) || !(b.width > 0 && b.length > 0 && b.height > 0)) {
      throw std::runtime_error("scene file: malformed box on line " + std::to_string(lineno));
    }
    s.objects.push_back(b);
  }
  return s;
}

/// Binary PGM (P5) of a [H, W] map with values clamped to [0, 1].
inline void write_pgm(const std::string& path, std::span<const double> values, std::size_t h, std::size_t w) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << "P5\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(values[i], 0.0, 1.0)))));
  }
}

}  // namespace bevx
