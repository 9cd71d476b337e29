#pragma once

// Shared random cameras, depth rasters and scratch directories for tests.

#include <filesystem>
#include <random>
#include <string>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "viewsynth/geometry.hpp"

namespace viewsynth::testing {

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

/// Rotation by `deg` degrees about a random axis.
inline Eigen::Matrix3d small_rotation(std::mt19937_64& rng, double deg) {
  std::normal_distribution<double> n(0.0, 1.0);
  const Eigen::Vector3d axis = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  return Eigen::AngleAxisd(deg * M_PI / 180.0, axis).toRotationMatrix();
}

inline CameraParams random_camera(std::mt19937_64& rng, int width = 64, int height = 48) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  CameraParams cam;
  cam.width = width;
  cam.height = height;
  cam.intrinsics.fx = width * (0.5 + u(rng));
  cam.intrinsics.fy = cam.intrinsics.fx * (0.9 + 0.2 * u(rng));
  cam.intrinsics.cx = width * (0.4 + 0.2 * u(rng));
  cam.intrinsics.cy = height * (0.4 + 0.2 * u(rng));
  cam.rotation = random_rotation(rng);
  cam.translation = Eigen::Vector3d(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5) * 4.0;
  return cam;
}

/// Camera close to `base`: rotated by up to `max_deg` and moved by up to
/// `max_shift` meters.
inline CameraParams perturbed_camera(const CameraParams& base, std::mt19937_64& rng,
                                     double max_deg, double max_shift) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  CameraParams cam = base;
  const Eigen::Matrix3d dr = small_rotation(rng, max_deg * std::abs(u(rng)));
  const Eigen::Vector3d center = base.center() + max_shift * Eigen::Vector3d(u(rng), u(rng), u(rng));
  cam.rotation = dr * base.rotation;
  cam.translation = -cam.rotation * center;
  return cam;
}

/// Depth raster with uniform depths in [lo, hi]; a fraction of pixels is
/// left invalid.
inline DepthImage random_depth(std::mt19937_64& rng, const CameraParams& cam, double lo, double hi,
                               double invalid_fraction = 0.1, double max_depth = 10.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DepthImage img(cam.width, cam.height, max_depth, cam);
  for (auto& d : img.depth) d = u(rng) < invalid_fraction ? 0.0 : lo + (hi - lo) * u(rng);
  return img;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "viewsynth_test";
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace viewsynth::testing
