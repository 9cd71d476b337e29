#pragma once

// Pinhole camera model, depth rasters, mapping grids between views and
// ground-truth cell correspondences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "viewsynth/errors.hpp"
#include "viewsynth/mapping_grid.hpp"

namespace viewsynth {

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
};

/// Pinhole intrinsics plus a world-to-camera rigid transform. Pixel centers
/// sit at half-integer coordinates: pixel (x, y) covers [x, x+1) x [y, y+1).
struct CameraParams {
  Intrinsics intrinsics;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  int width = 0;
  int height = 0;

  void validate() const {
    if (!(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0)) {
      throw InvalidCameraError("focal lengths must be positive");
    }
    const Eigen::Matrix3d rrt = rotation * rotation.transpose();
    if (!rrt.isApprox(Eigen::Matrix3d::Identity(), 1e-6) ||
        std::abs(rotation.determinant() - 1.0) > 1e-6) {
      throw InvalidCameraError("rotation is not a proper orthonormal matrix");
    }
  }

  /// Camera intrinsics expressed in units of `factor`-pixel cells.
  CameraParams scaled_down(int factor) const {
    CameraParams c = *this;
    const double s = 1.0 / static_cast<double>(factor);
    c.intrinsics = {intrinsics.fx * s, intrinsics.fy * s, intrinsics.cx * s, intrinsics.cy * s};
    c.width = (width + factor - 1) / factor;
    c.height = (height + factor - 1) / factor;
    return c;
  }

  /// Position of the optical center in world coordinates.
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
};

/// Depth raster in meters; a pixel is valid iff its depth is finite and > 0.
struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<double> depth;
  double max_depth = 10.0;
  CameraParams camera;

  DepthImage() = default;
  DepthImage(int w, int h, double max_d, CameraParams cam)
      : width(w), height(h), depth(static_cast<std::size_t>(w) * h, 0.0),
        max_depth(max_d), camera(std::move(cam)) {}

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  double at(int x, int y) const { return depth[index(x, y)]; }
  bool valid(int x, int y) const {
    const double d = at(x, y);
    return std::isfinite(d) && d > 0.0;
  }
  std::vector<std::uint8_t> validity_mask() const {
    std::vector<std::uint8_t> m(depth.size());
    for (std::size_t i = 0; i < depth.size(); ++i) {
      m[i] = std::isfinite(depth[i]) && depth[i] > 0.0;
    }
    return m;
  }
};

/// clamp(depth / max_depth, 0, 1) with invalid pixels mapped to 0.
inline std::vector<double> normalize_depth(const DepthImage& img) {
  std::vector<double> out(img.depth.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = img.depth[i];
    if (std::isfinite(d) && d > 0.0) out[i] = std::clamp(d / img.max_depth, 0.0, 1.0);
  }
  return out;
}

/// Block-average downsampling: each factor x factor block averages its valid
/// depths, and blocks with fewer than a quarter valid pixels become invalid.
/// The camera is rescaled to cell units.
inline DepthImage downsample_depth(const DepthImage& img, int factor = 8) {
  const CameraParams cam = img.camera.scaled_down(factor);
  const int w = (img.width + factor - 1) / factor;
  const int h = (img.height + factor - 1) / factor;
  DepthImage out(w, h, img.max_depth, cam);
  for (int by = 0; by < h; ++by) {
    for (int bx = 0; bx < w; ++bx) {
      double total = 0.0;
      int valid = 0, pixels = 0;
      for (int y = by * factor; y < std::min((by + 1) * factor, img.height); ++y) {
        for (int x = bx * factor; x < std::min((bx + 1) * factor, img.width); ++x) {
          ++pixels;
          if (img.valid(x, y)) {
            total += img.at(x, y);
            ++valid;
          }
        }
      }
      if (valid > 0 && 4 * valid >= pixels) out.depth[out.index(bx, by)] = total / valid;
    }
  }
  return out;
}

inline Eigen::Vector3d unproject(const Eigen::Vector2d& pixel, double depth,
                                 const CameraParams& cam) {
  if (!(depth > 0.0) || !std::isfinite(depth)) {
    throw InvalidDepthError("unproject requires positive depth");
  }
  const auto& k = cam.intrinsics;
  const Eigen::Vector3d p_cam((pixel.x() - k.cx) * depth / k.fx,
                              (pixel.y() - k.cy) * depth / k.fy, depth);
  return cam.rotation.transpose() * (p_cam - cam.translation);
}

struct Projection {
  Eigen::Vector2d pixel;
  double depth = 0.0;
};

inline Projection project(const Eigen::Vector3d& world, const CameraParams& cam) {
  const Eigen::Vector3d p = cam.rotation * world + cam.translation;
  if (p.z() <= 1e-9) throw BehindCameraError("point is behind the camera");
  const auto& k = cam.intrinsics;
  return {{k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy}, p.z()};
}

/// Rigid transform taking points from one camera frame to another.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

/// Maps camera-1 coordinates to camera-2 coordinates.
inline RigidTransform relative_pose(const CameraParams& cam1, const CameraParams& cam2) {
  RigidTransform t;
  t.rotation = cam2.rotation * cam1.rotation.transpose();
  t.translation = cam2.translation - t.rotation * cam1.translation;
  return t;
}

/// Grid of cell-center positions (r + 0.5, c + 0.5).
struct GridPositions {
  std::size_t height = 0;
  std::size_t width = 0;

  GridCoord at(std::size_t r, std::size_t c) const {
    return {static_cast<double>(r) + 0.5, static_cast<double>(c) + 0.5};
  }
};

/// For every target cell with valid depth: lift its center into 3D with the
/// target camera and project it into the source camera. Both cameras must
/// already be in cell units. A cell is valid iff its depth is valid, the point
/// lies in front of the source camera and lands inside the source grid.
/// Occlusion in the source view does not invalidate a cell.
inline MappingGrid compute_mapping_grid(const DepthImage& target_coarse,
                                        const CameraParams& cam_target,
                                        const CameraParams& cam_source,
                                        std::size_t source_height, std::size_t source_width) {
  const auto h = static_cast<std::size_t>(target_coarse.height);
  const auto w = static_cast<std::size_t>(target_coarse.width);
  MappingGrid grid(h, w, source_height, source_width);
  const auto& ks = cam_source.intrinsics;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (!target_coarse.valid(static_cast<int>(c), static_cast<int>(r))) continue;
      const double d = target_coarse.at(static_cast<int>(c), static_cast<int>(r));
      const Eigen::Vector3d world =
          unproject({static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5}, d, cam_target);
      const Eigen::Vector3d p = cam_source.rotation * world + cam_source.translation;
      if (p.z() <= 1e-9) continue;
      const double u = ks.fx * p.x() / p.z() + ks.cx;
      const double v = ks.fy * p.y() / p.z() + ks.cy;
      if (u < 0.0 || v < 0.0 || u >= static_cast<double>(source_width) ||
          v >= static_cast<double>(source_height)) {
        continue;
      }
      grid.coords[grid.index(r, c)] = {v, u};
      grid.valid[grid.index(r, c)] = 1;
    }
  }
  return grid;
}

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct Correspondence {
  Cell first;   // cell in grid 1
  Cell second;  // cell in grid 2
  friend bool operator==(const Correspondence&, const Correspondence&) = default;
};

/// Cell correspondences between two downsampled depth images (cameras in
/// cell units). Each valid cell of image 2 is mapped into grid 1 and rounded
/// to the containing cell; the pair is kept iff that cell's own 3D point lies
/// within `occlusion_eps` meters of the image-2 point. A grid-1 cell may
/// appear in several pairs.
inline std::vector<Correspondence> ground_truth_correspondences(const DepthImage& coarse1,
                                                                const DepthImage& coarse2,
                                                                double occlusion_eps = 0.05) {
  std::vector<Correspondence> out;
  const MappingGrid grid =
      compute_mapping_grid(coarse2, coarse2.camera, coarse1.camera,
                           static_cast<std::size_t>(coarse1.height),
                           static_cast<std::size_t>(coarse1.width));
  for (int r2 = 0; r2 < coarse2.height; ++r2) {
    for (int c2 = 0; c2 < coarse2.width; ++c2) {
      const std::size_t idx = grid.index(static_cast<std::size_t>(r2), static_cast<std::size_t>(c2));
      if (!grid.valid[idx]) continue;
      const int r1 = static_cast<int>(std::floor(grid.coords[idx].row));
      const int c1 = static_cast<int>(std::floor(grid.coords[idx].col));
      if (!coarse1.valid(c1, r1)) continue;
      const Eigen::Vector3d p2 = unproject({c2 + 0.5, r2 + 0.5}, coarse2.at(c2, r2), coarse2.camera);
      const Eigen::Vector3d p1 = unproject({c1 + 0.5, r1 + 0.5}, coarse1.at(c1, r1), coarse1.camera);
      if ((p1 - p2).norm() <= occlusion_eps) out.push_back({{r1, c1}, {r2, c2}});
    }
  }
  return out;
}

/// Camera looking from `eye` towards `target`; `up` is a world direction that
/// appears upward in the image (camera y axis points down).
inline CameraParams look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                            const Eigen::Vector3d& up, Intrinsics k, int width, int height) {
  const Eigen::Vector3d z = (target - eye).normalized();
  const Eigen::Vector3d x = z.cross(up).normalized();
  const Eigen::Vector3d y = z.cross(x);
  CameraParams cam;
  cam.intrinsics = k;
  cam.rotation.row(0) = x.transpose();
  cam.rotation.row(1) = y.transpose();
  cam.rotation.row(2) = z.transpose();
  cam.translation = -cam.rotation * eye;
  cam.width = width;
  cam.height = height;
  return cam;
}

}  // namespace viewsynth
