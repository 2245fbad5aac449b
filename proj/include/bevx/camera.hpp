#pragma once
// Pinhole camera rig.
//
// Frames: the vehicle frame is x forward, y left, z up. A camera frame is
// x right, y down, z along the optical axis. A view maps a vehicle point X
// to the camera frame as R (X - T), then to pixels with K. Pixel centers
// sit at integer coordinates.

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevx/tensor.hpp"

namespace bevx {

class SingularMatrixError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class CalibrationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Eigen::Matrix3d invert_intrinsics(const Eigen::Matrix3d& K) {
  const double det = K.determinant();
  if (!(std::abs(det) > 1e-9)) {
    throw SingularMatrixError("invert_intrinsics: |det K| = " + std::to_string(std::abs(det)) +
                              " <= 1e-9");
  }
  return K.inverse();
}

/// Rotation about the vehicle z axis (counter-clockwise seen from above).
inline Eigen::Matrix3d yaw_matrix(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Eigen::Matrix3d m;
  m << c, -s, 0, s, c, 0, 0, 0, 1;
  return m;
}

/// Vehicle-to-camera rotation of a level camera whose optical axis points
/// along heading `yaw` in the vehicle frame.
inline Eigen::Matrix3d camera_rotation_for_yaw(double yaw) {
  Eigen::Matrix3d forward;  // camera looking along vehicle +x
  forward << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  return forward * yaw_matrix(yaw).transpose();
}

struct Projection {
  Eigen::Vector2d pixel;
  double depth;
};

struct CameraView {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  std::size_t height = 1;
  std::size_t width = 1;

  void validate() const {
    if (!(std::abs(intrinsics.determinant()) > 1e-9)) {
      throw CalibrationError("camera view: intrinsics not invertible");
    }
    if (!((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-6)) {
      throw CalibrationError("camera view: rotation is not orthonormal");
    }
    if (!(std::abs(rotation.determinant() - 1.0) <= 1e-6)) {
      throw CalibrationError("camera view: rotation determinant is not +1");
    }
    if (!translation.allFinite() || !intrinsics.allFinite()) {
      throw CalibrationError("camera view: non-finite calibration");
    }
    if (height == 0 || width == 0) throw CalibrationError("camera view: empty image size");
  }

  /// Unit vector of the optical axis in the vehicle frame.
  Eigen::Vector3d optical_axis() const { return rotation.transpose() * Eigen::Vector3d::UnitZ(); }

  Projection project(const Eigen::Vector3d& point) const {
    const Eigen::Vector3d cam = rotation * (point - translation);
    const Eigen::Vector3d h = intrinsics * cam;
    return {Eigen::Vector2d(h.x() / h.z(), h.y() / h.z()), cam.z()};
  }

  /// Vehicle-frame point at camera depth `depth` along the pixel's ray.
  Eigen::Vector3d unproject(const Eigen::Vector2d& pixel, double depth) const {
    const Eigen::Vector3d ray = invert_intrinsics(intrinsics) * Eigen::Vector3d(pixel.x(), pixel.y(), 1.0);
    return rotation.transpose() * (ray * (depth / ray.z())) + translation;
  }
};

/// True iff the point is in front of the camera and projects inside the
/// image (pixel-center coordinates, each pixel owning [c-0.5, c+0.5)).
inline bool frustum_contains(const CameraView& view, const Eigen::Vector3d& point) {
  const Eigen::Vector3d cam = view.rotation * (point - view.translation);
  if (!(cam.z() > 0.0)) return false;
  const Eigen::Vector3d h = view.intrinsics * cam;
  const double u = h.x() / h.z(), v = h.y() / h.z();
  return u >= -0.5 && u < static_cast<double>(view.width) - 0.5 && v >= -0.5 &&
         v < static_cast<double>(view.height) - 0.5;
}

/// Pixel positions (u, v) of a feature map's cells: cell (r, c) sits at
/// pixel (c * stride, r * stride). Row-major over cells.
inline std::vector<Eigen::Vector2d> feature_pixel_grid(std::size_t rows, std::size_t cols,
                                                       std::size_t stride) {
  std::vector<Eigen::Vector2d> g;
  g.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      g.emplace_back(static_cast<double>(c * stride), static_cast<double>(r * stride));
  return g;
}

/// Lifts each pixel to (u, v, 1) and maps it through R^-1 K^-1. Result is
/// [pixels, 3], unnormalized vehicle-frame ray directions.
inline Tensor pixel_direction_grid(const CameraView& view, const std::vector<Eigen::Vector2d>& pixels) {
  const Eigen::Matrix3d m = view.rotation.transpose() * invert_intrinsics(view.intrinsics);
  std::vector<double> d;
  d.reserve(pixels.size() * 3);
  for (const auto& p : pixels) {
    const Eigen::Vector3d dir = m * Eigen::Vector3d(p.x(), p.y(), 1.0);
    d.insert(d.end(), {dir.x(), dir.y(), dir.z()});
  }
  return Tensor({pixels.size(), 3}, std::move(d));
}

struct CameraRig {
  std::vector<CameraView> views;

  std::size_t size() const { return views.size(); }
  std::size_t height() const { return views.at(0).height; }
  std::size_t width() const { return views.at(0).width; }

  void validate() const {
    if (views.empty()) throw CalibrationError("camera rig: needs at least one view");
    for (const auto& v : views) {
      v.validate();
      if (v.height != views[0].height || v.width != views[0].width) {
        throw CalibrationError("camera rig: image sizes differ across views");
      }
    }
  }

  /// Translations stacked as [views, 3].
  Tensor translations() const {
    std::vector<double> d;
    for (const auto& v : views) d.insert(d.end(), {v.translation.x(), v.translation.y(), v.translation.z()});
    return Tensor({views.size(), 3}, std::move(d));
  }

  CameraRig rotated(double yaw) const {
    CameraRig r = *this;
    const Eigen::Matrix3d m = yaw_matrix(yaw);
    for (auto& v : r.views) {
      v.translation = m * v.translation;
      v.rotation = v.rotation * m.transpose();
    }
    return r;
  }
};

/// Level cameras evenly spread in heading. Six views use the surround
/// order front-left, front, front-right, back-left, back, back-right.
inline CameraRig make_surround_rig(std::size_t n_views, std::size_t height, std::size_t width,
                                   double horizontal_fov_deg = 90.0, double mount_height = 1.5,
                                   double mount_radius = 1.0) {
  if (n_views == 0) throw CalibrationError("make_surround_rig: zero views");
  std::vector<double> yaws_deg;
  if (n_views == 6) {
    yaws_deg = {60, 0, -60, 120, 180, -120};
  } else {
    for (std::size_t k = 0; k < n_views; ++k) yaws_deg.push_back(360.0 * static_cast<double>(k) / n_views);
  }
  const double f = 0.5 * static_cast<double>(width) / std::tan(0.5 * horizontal_fov_deg * std::numbers::pi / 180.0);
  CameraRig rig;
  for (double yd : yaws_deg) {
    const double yaw = yd * std::numbers::pi / 180.0;
    CameraView v;
    v.intrinsics << f, 0, 0.5 * (static_cast<double>(width) - 1.0), 0, f,
        0.5 * (static_cast<double>(height) - 1.0), 0, 0, 1;
    v.rotation = camera_rotation_for_yaw(yaw);
    v.translation = {mount_radius * std::cos(yaw), mount_radius * std::sin(yaw), mount_height};
    v.height = height;
    v.width = width;
    rig.views.push_back(v);
  }
  return rig;
}

// Rig file: "RIG v1" then one line per view:
//   view fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz w h
// Intrinsics are [[fx,0,cx],[0,fy,cy],[0,0,1]].

inline void write_rig(std::ostream& os, const CameraRig& rig) {
  os << "RIG v1\n" << std::setprecision(17);
  for (const auto& v : rig.views) {
    const auto& K = v.intrinsics;
    os << "view " << K(0, 0) << ' ' << K(1, 1) << ' ' << K(0, 2) << ' ' << K(1, 2);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) os << ' ' << v.rotation(r, c);
    os << ' ' << v.translation.x() << ' ' << v.translation.y() << ' ' << v.translation.z() << ' '
       << v.width << ' ' << v.height << '\n';
  }
}

inline CameraRig read_rig(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "RIG v1") throw CalibrationError("rig file: missing 'RIG v1' header");
  CameraRig rig;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    double fx, fy, cx, cy;
    double r[9];
    double t[3];
    long long w, h;
    ls >> tag >> fx >> fy >> cx >> cy;
    for (double& x : r) ls >> x;
    for (double& x : t) ls >> x;
    ls >> w >> h;
    std::string extra;
    if (!ls || tag != "view" || (ls >> extra) || w <= 0 || h <= 0) {
      throw CalibrationError("rig file: malformed view on line " + std::to_string(lineno));
    }
    CameraView v;
    v.intrinsics << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    v.rotation << r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8];
    v.translation = {t[0], t[1], t[2]};
    v.width = static_cast<std::size_t>(w);
    v.height = static_cast<std::size_t>(h);
    rig.views.push_back(v);
  }
  rig.validate();
  return rig;
}

inline void save_rig(const std::string& path, const CameraRig& rig) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_rig(f, rig);
}

inline CameraRig load_rig(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  return read_rig(f);
}

}  // namespace bevx
