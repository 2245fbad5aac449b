#pragma once
// Geometry-aware query/key construction.
//
//   BEV query of view n:   B + f_P_bev(P) - f_T(T_n)
//   camera key of view n:  f_F(F_n) + f_P_cam(R_n^-1 K_n^-1 P_n) - f_T(T_n)

#include <cmath>
#include <string>
#include <vector>

#include "bevx/camera.hpp"
#include "bevx/nn.hpp"
#include "bevx/tensor.hpp"

namespace bevx {

/// Vehicle-frame (x, y) of every BEV cell center, as [rows, cols, 2].
/// Row 0 is the far-forward edge, column 0 the far-left edge.
struct BevPositionGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  double resolution = 0.0;
  Tensor coords;

  double half_extent_x() const { return 0.5 * resolution * static_cast<double>(rows); }
  double half_extent_y() const { return 0.5 * resolution * static_cast<double>(cols); }
};

/// `extent_x`/`extent_y` are half-widths in meters along forward/left.
inline BevPositionGrid bev_position_grid(std::size_t rows, std::size_t cols, double extent_x,
                                         double extent_y, double resolution) {
  if (rows == 0 || cols == 0 || !(resolution > 0.0)) {
    throw std::invalid_argument("bev_position_grid: empty size or non-positive resolution");
  }
  auto consistent = [&](std::size_t n, double ext) {
    return std::abs(static_cast<double>(n) * resolution - 2.0 * ext) <= 1e-9 * std::max(1.0, ext);
  };
  if (!consistent(rows, extent_x) || !consistent(cols, extent_y)) {
    throw std::invalid_argument("bev_position_grid: size " + std::to_string(rows) + "x" +
                                std::to_string(cols) + " at " + std::to_string(resolution) +
                                " m/cell does not span +/-" + std::to_string(extent_x) + " x +/-" +
                                std::to_string(extent_y) + " m");
  }
  std::vector<double> d;
  d.reserve(rows * cols * 2);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      d.push_back(extent_x - (static_cast<double>(r) + 0.5) * resolution);
      d.push_back(extent_y - (static_cast<double>(c) + 0.5) * resolution);
    }
  return {rows, cols, resolution, Tensor({rows, cols, 2}, std::move(d))};
}

inline BevPositionGrid bev_position_grid(std::size_t rows, std::size_t cols, double extent,
                                         double resolution) {
  return bev_position_grid(rows, cols, extent, extent, resolution);
}

/// Grid spanning fixed half-widths at whatever resolution `rows` implies.
inline BevPositionGrid bev_grid_for_extent(std::size_t rows, std::size_t cols, double extent) {
  const double res = 2.0 * extent / static_cast<double>(rows);
  return bev_position_grid(rows, cols, extent, 0.5 * res * static_cast<double>(cols), res);
}

struct ProjectionHeads {
  Linear pos_bev;      // 2 -> D
  Linear pos_cam;      // 3 -> D
  Linear translation;  // 3 -> D
  Linear feature;      // C_I -> D

  ProjectionHeads() = default;
  ProjectionHeads(std::size_t width, std::size_t feature_channels, double bev_extent, Rng& rng)
      : pos_bev(2, width, false, rng, 1.0 / std::max(1.0, bev_extent)),
        pos_cam(3, width, false, rng),
        translation(3, width, false, rng),
        feature(feature_channels, width, true, rng) {}

  std::size_t width() const { return feature.out_features(); }

  void collect(const std::string& prefix, ParamList& out) {
    pos_bev.collect(prefix + ".f_p_bev", out);
    pos_cam.collect(prefix + ".f_p_cam", out);
    translation.collect(prefix + ".f_t", out);
    feature.collect(prefix + ".f_f", out);
  }
};

/// bev: [H, W, D]. Returns [N_I, H*W, D].
inline Tensor embed_bev_queries(const Tensor& bev, const BevPositionGrid& grid, const CameraRig& rig,
                                const ProjectionHeads& heads) {
  const Shape& s = bev.shape();
  if (s.size() != 3 || s[0] != grid.rows || s[1] != grid.cols) {
    throw ShapeError("embed_bev_queries: BEV " + shape_str(s) + " vs grid " +
                     shape_str(grid.coords.shape()));
  }
  if (s[2] != heads.width()) {
    throw ShapeError("embed_bev_queries: BEV width " + std::to_string(s[2]) + " vs head width " +
                     std::to_string(heads.width()));
  }
  const std::size_t nq = s[0] * s[1];
  const std::size_t d = s[2];
  Tensor pos = heads.pos_bev(reshape(grid.coords, {nq, 2}));
  Tensor base = add(reshape(bev, {1, nq, d}), reshape(pos, {1, nq, d}));
  Tensor t = heads.translation(rig.translations());
  return sub(base, reshape(t, {rig.size(), 1, d}));
}

/// features: [N_I, h, w, C_I] sampled at `stride` pixels. Returns [N_I, h*w, D].
inline Tensor embed_camera_keys(const Tensor& features, std::size_t stride, const CameraRig& rig,
                                const ProjectionHeads& heads) {
  const Shape& s = features.shape();
  if (s.size() != 4 || s[0] != rig.size()) {
    throw ShapeError("embed_camera_keys: features " + shape_str(s) + " for " +
                     std::to_string(rig.size()) + " views");
  }
  const std::size_t h = s[1], w = s[2];
  if (stride == 0 || h * stride != rig.height() || w * stride != rig.width()) {
    throw ShapeError("embed_camera_keys: stride " + std::to_string(stride) + " inconsistent with " +
                     std::to_string(rig.height()) + "x" + std::to_string(rig.width()) +
                     " images and " + std::to_string(h) + "x" + std::to_string(w) + " features");
  }
  const std::size_t nk = h * w;
  const std::size_t d = heads.width();
  const auto pixels = feature_pixel_grid(h, w, stride);
  std::vector<Tensor> dirs;
  dirs.reserve(rig.size());
  for (const auto& v : rig.views) dirs.push_back(reshape(pixel_direction_grid(v, pixels), {1, nk, 3}));
  Tensor directions = concat(dirs, 0);
  Tensor feat = heads.feature(reshape(features, {rig.size(), nk, s[3]}));
  Tensor pos = heads.pos_cam(directions);
  Tensor t = heads.translation(rig.translations());
  return sub(add(feat, pos), reshape(t, {rig.size(), 1, d}));
}

}  // namespace bevx
