#pragma once

// EPnP camera pose from 2D-3D correspondences, a RANSAC wrapper and pose
// error metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "viewsynth/geometry.hpp"

namespace viewsynth {

struct PnPCorrespondence {
  Eigen::Vector3d world;
  Eigen::Vector2d pixel;
};

struct PoseEstimate {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world -> camera
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  std::size_t inlier_count = 0;
  std::vector<std::uint8_t> inlier_mask;
  double reprojection_error = 0.0;  // mean, px
};

inline double reprojection_residual(const Eigen::Matrix3d& r, const Eigen::Vector3d& t,
                                    const Intrinsics& k, const PnPCorrespondence& c) {
  const Eigen::Vector3d p = r * c.world + t;
  if (p.z() <= 1e-9) return std::numeric_limits<double>::infinity();
  const Eigen::Vector2d uv(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy);
  return (uv - c.pixel).norm();
}

inline double mean_reprojection_error(const Eigen::Matrix3d& r, const Eigen::Vector3d& t,
                                      const Intrinsics& k,
                                      std::span<const PnPCorrespondence> corr) {
  double total = 0.0;
  for (const auto& c : corr) total += reprojection_residual(r, t, k, c);
  return total / static_cast<double>(corr.size());
}

namespace detail {

struct EpnpSystem {
  int control_count = 0;                 // 4, or 3 for coplanar points
  std::vector<Eigen::Vector3d> control;  // world control points
  Eigen::MatrixXd alphas;                // n x control_count
  Eigen::MatrixXd null_vectors;          // (3 * control_count) x control_count
};

// Rigid transform (R, t) with camera = R * world + t, least squares.
inline void absolute_orientation(std::span<const Eigen::Vector3d> world,
                                 std::span<const Eigen::Vector3d> camera, Eigen::Matrix3d& r,
                                 Eigen::Vector3d& t) {
  Eigen::Vector3d cw = Eigen::Vector3d::Zero(), cc = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < world.size(); ++i) {
    cw += world[i];
    cc += camera[i];
  }
  cw /= static_cast<double>(world.size());
  cc /= static_cast<double>(camera.size());
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < world.size(); ++i) {
    h += (camera[i] - cc) * (world[i] - cw).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  r = u * v.transpose();
  t = cc - r * cw;
}

inline EpnpSystem build_epnp_system(std::span<const PnPCorrespondence> corr, const Intrinsics& k) {
  const std::size_t n = corr.size();
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& c : corr) centroid += c.world;
  centroid /= static_cast<double>(n);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& c : corr) cov += (c.world - centroid) * (c.world - centroid).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  // Eigenvalues ascending; principal extents are sqrt(lambda / n).
  Eigen::Vector3d extent;
  for (int i = 0; i < 3; ++i) {
    extent(i) = std::sqrt(std::max(eig.eigenvalues()(i), 0.0) / static_cast<double>(n));
  }
  if (!(extent(2) > 1e-12) || extent(1) / extent(2) < 1e-8) {
    throw DegenerateConfigurationError("3D points are coincident or collinear");
  }
  EpnpSystem sys;
  sys.control_count = extent(0) / extent(2) < 1e-6 ? 3 : 4;
  const int m = sys.control_count;
  sys.control.push_back(centroid);
  for (int i = 2; i > 3 - m; --i) {
    sys.control.push_back(centroid + extent(i) * eig.eigenvectors().col(i));
  }

  // Barycentric coordinates relative to the control points.
  Eigen::MatrixXd basis(3, m - 1);
  for (int j = 1; j < m; ++j) basis.col(j - 1) = sys.control[j] - centroid;
  const Eigen::MatrixXd pinv =
      basis.completeOrthogonalDecomposition().pseudoInverse();
  sys.alphas.resize(static_cast<Eigen::Index>(n), m);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::VectorXd a = pinv * (corr[i].world - centroid);
    sys.alphas(static_cast<Eigen::Index>(i), 0) = 1.0 - a.sum();
    for (int j = 1; j < m; ++j) sys.alphas(static_cast<Eigen::Index>(i), j) = a(j - 1);
  }

  Eigen::MatrixXd mm(2 * static_cast<Eigen::Index>(n), 3 * m);
  mm.setZero();
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = 2 * static_cast<Eigen::Index>(i);
    for (int j = 0; j < m; ++j) {
      const double a = sys.alphas(static_cast<Eigen::Index>(i), j);
      mm(row, 3 * j) = a * k.fx;
      mm(row, 3 * j + 2) = a * (k.cx - corr[i].pixel.x());
      mm(row + 1, 3 * j + 1) = a * k.fy;
      mm(row + 1, 3 * j + 2) = a * (k.cy - corr[i].pixel.y());
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> null_eig(mm.transpose() * mm);
  sys.null_vectors = null_eig.eigenvectors().leftCols(m);
  return sys;
}

// Squared distances between control-point pairs and the matching differences
// of each null vector.
struct DistanceConstraints {
  std::vector<double> rho;
  std::vector<std::vector<Eigen::Vector3d>> diffs;  // [pair][null vector]
};

inline DistanceConstraints distance_constraints(const EpnpSystem& sys) {
  DistanceConstraints dc;
  const int m = sys.control_count;
  for (int a = 0; a < m; ++a) {
    for (int b = a + 1; b < m; ++b) {
      dc.rho.push_back((sys.control[a] - sys.control[b]).squaredNorm());
      std::vector<Eigen::Vector3d> d;
      for (int v = 0; v < m; ++v) {
        d.push_back(sys.null_vectors.block<3, 1>(3 * a, v) - sys.null_vectors.block<3, 1>(3 * b, v));
      }
      dc.diffs.push_back(std::move(d));
    }
  }
  return dc;
}

// Linearized betas using the first `count` null vectors: unknowns are the
// products beta_a * beta_b, solved in least squares (minimum norm when there
// are more products than constraints).
inline std::optional<Eigen::VectorXd> linear_betas(const DistanceConstraints& dc, int count,
                                                   int total) {
  const int unknowns = count * (count + 1) / 2;
  const auto rows = static_cast<Eigen::Index>(dc.rho.size());
  Eigen::MatrixXd l(rows, unknowns);
  Eigen::VectorXd rho(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    int col = 0;
    for (int a = 0; a < count; ++a) {
      for (int b = a; b < count; ++b) {
        const double dot = dc.diffs[r][a].dot(dc.diffs[r][b]);
        l(r, col++) = a == b ? dot : 2.0 * dot;
      }
    }
    rho(r) = dc.rho[static_cast<std::size_t>(r)];
  }
  const Eigen::VectorXd prod = l.completeOrthogonalDecomposition().solve(rho);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(total);
  beta(0) = std::sqrt(std::abs(prod(0)));
  if (!(beta(0) > 0.0)) return std::nullopt;
  // prod layout: (0,0), (0,1), ..., (0,count-1), (1,1), ...
  for (int b = 1; b < count; ++b) beta(b) = prod(b) / beta(0);
  return beta;
}

inline void refine_betas(const DistanceConstraints& dc, Eigen::VectorXd& beta) {
  const auto rows = static_cast<Eigen::Index>(dc.rho.size());
  const auto k = beta.size();
  for (int iter = 0; iter < 10; ++iter) {
    Eigen::MatrixXd jac(rows, k);
    Eigen::VectorXd res(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      Eigen::Vector3d d = Eigen::Vector3d::Zero();
      for (Eigen::Index v = 0; v < k; ++v) d += beta(v) * dc.diffs[r][v];
      res(r) = d.squaredNorm() - dc.rho[static_cast<std::size_t>(r)];
      for (Eigen::Index v = 0; v < k; ++v) jac(r, v) = 2.0 * d.dot(dc.diffs[r][v]);
    }
    const Eigen::VectorXd step = jac.completeOrthogonalDecomposition().solve(-res);
    beta += step;
    if (step.cwiseAbs().maxCoeff() < 1e-10) break;
  }
}

// Damped Gauss-Newton on the reprojection error over rotation (left
// perturbation) and translation. Keeps a step only if it lowers the error.
inline double refine_pose(std::span<const PnPCorrespondence> corr, const Intrinsics& k,
                          Eigen::Matrix3d& r, Eigen::Vector3d& t, int iterations = 20) {
  const auto n = static_cast<Eigen::Index>(corr.size());
  auto sq_error = [&](const Eigen::Matrix3d& rr, const Eigen::Vector3d& tt) {
    double e = 0.0;
    for (const auto& c : corr) {
      const Eigen::Vector3d p = rr * c.world + tt;
      if (p.z() <= 1e-9) return std::numeric_limits<double>::infinity();
      e += (Eigen::Vector2d(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy) - c.pixel)
               .squaredNorm();
    }
    return e;
  };
  double current = sq_error(r, t);
  double lambda = 1e-3;
  for (int iter = 0; iter < iterations && std::isfinite(current) && current > 1e-24; ++iter) {
    Eigen::MatrixXd jac(2 * n, 6);
    Eigen::VectorXd res(2 * n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& c = corr[static_cast<std::size_t>(i)];
      const Eigen::Vector3d rx = r * c.world;
      const Eigen::Vector3d p = rx + t;
      const double iz = 1.0 / p.z();
      res(2 * i) = k.fx * p.x() * iz + k.cx - c.pixel.x();
      res(2 * i + 1) = k.fy * p.y() * iz + k.cy - c.pixel.y();
      Eigen::Matrix<double, 2, 3> dproj;
      dproj << k.fx * iz, 0.0, -k.fx * p.x() * iz * iz, 0.0, k.fy * iz, -k.fy * p.y() * iz * iz;
      Eigen::Matrix3d skew;
      skew << 0.0, -rx.z(), rx.y(), rx.z(), 0.0, -rx.x(), -rx.y(), rx.x(), 0.0;
      jac.block<2, 3>(2 * i, 0) = -dproj * skew;
      jac.block<2, 3>(2 * i, 3) = dproj;
    }
    const Eigen::Matrix<double, 6, 6> jtj = jac.transpose() * jac;
    const Eigen::Matrix<double, 6, 1> jtr = jac.transpose() * res;
    bool improved = false;
    for (int attempt = 0; attempt < 10 && !improved; ++attempt) {
      Eigen::Matrix<double, 6, 6> a = jtj;
      a.diagonal() *= 1.0 + lambda;
      const Eigen::Matrix<double, 6, 1> step = a.ldlt().solve(-jtr);
      const double angle = step.head<3>().norm();
      const Eigen::Matrix3d dr =
          angle > 0.0 ? Eigen::AngleAxisd(angle, step.head<3>() / angle).toRotationMatrix()
                      : Eigen::Matrix3d::Identity();
      const Eigen::Matrix3d r_new = dr * r;
      const Eigen::Vector3d t_new = dr * t + step.tail<3>();
      const double e = sq_error(r_new, t_new);
      if (e < current) {
        r = r_new;
        t = t_new;
        current = e;
        lambda = std::max(lambda * 0.1, 1e-12);
        improved = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
  return current;
}

// Camera-frame solutions of the three-point problem. Depth s1 along the first
// ray is scanned; s2 and s3 follow from the two distance constraints that
// involve point 1 (two sign branches each), and roots of the remaining
// constraint are bracketed and bisected.
inline std::vector<std::array<Eigen::Vector3d, 3>> p3p_points(
    const std::array<Eigen::Vector3d, 3>& world, const std::array<Eigen::Vector3d, 3>& rays) {
  const double c12 = rays[0].dot(rays[1]), c13 = rays[0].dot(rays[2]);
  const double d12 = (world[0] - world[1]).squaredNorm();
  const double d13 = (world[0] - world[2]).squaredNorm();
  const double d23 = (world[1] - world[2]).squaredNorm();
  const double s_max = std::min(std::sqrt(d12 / std::max(1.0 - c12 * c12, 1e-15)),
                                std::sqrt(d13 / std::max(1.0 - c13 * c13, 1e-15)));
  std::vector<std::array<Eigen::Vector3d, 3>> out;
  if (!std::isfinite(s_max) || !(s_max > 0.0)) return out;
  for (int b2 = -1; b2 <= 1; b2 += 2) {
    for (int b3 = -1; b3 <= 1; b3 += 2) {
      // nullopt when a branch has no real depth or puts a point behind.
      auto depths = [&](double s1) -> std::optional<Eigen::Vector3d> {
        const double q2 = d12 - s1 * s1 * (1.0 - c12 * c12);
        const double q3 = d13 - s1 * s1 * (1.0 - c13 * c13);
        if (q2 < 0.0 || q3 < 0.0) return std::nullopt;
        const double s2 = s1 * c12 + b2 * std::sqrt(q2);
        const double s3 = s1 * c13 + b3 * std::sqrt(q3);
        if (s2 <= 0.0 || s3 <= 0.0) return std::nullopt;
        return Eigen::Vector3d(s1, s2, s3);
      };
      auto residual = [&](const Eigen::Vector3d& s) {
        return (s(1) * rays[1] - s(2) * rays[2]).squaredNorm() - d23;
      };
      constexpr int kSamples = 400;
      bool have_prev = false;
      double prev_s = 0.0, prev_f = 0.0;
      for (int i = 1; i <= kSamples; ++i) {
        const double s1 = s_max * static_cast<double>(i) / kSamples;
        const auto d = depths(s1);
        if (!d) {
          have_prev = false;
          continue;
        }
        const double f = residual(*d);
        if (have_prev && ((prev_f <= 0.0) != (f <= 0.0))) {
          double lo = prev_s, hi = s1, flo = prev_f;
          for (int it = 0; it < 100; ++it) {
            const double mid = 0.5 * (lo + hi);
            const auto dm = depths(mid);
            if (!dm) break;
            const double fm = residual(*dm);
            if ((fm <= 0.0) == (flo <= 0.0)) {
              lo = mid;
              flo = fm;
            } else {
              hi = mid;
            }
          }
          if (const auto root = depths(0.5 * (lo + hi))) {
            out.push_back({(*root)(0) * rays[0], (*root)(1) * rays[1], (*root)(2) * rays[2]});
          }
        }
        have_prev = true;
        prev_s = s1;
        prev_f = f;
      }
    }
  }
  return out;
}

}  // namespace detail

/// EPnP: control-point formulation with 4 control points (3 for coplanar
/// input), linearized null-space solutions for 1..4 vectors, Gauss-Newton
/// refinement of the betas and then of the pose, and selection by mean
/// reprojection error. Four general points also get three-point starts.
inline PoseEstimate epnp(std::span<const PnPCorrespondence> corr, const Intrinsics& k) {
  if (corr.size() < 4) throw InsufficientPointsError("EPnP needs at least 4 correspondences");
  const detail::EpnpSystem sys = detail::build_epnp_system(corr, k);
  const detail::DistanceConstraints dc = detail::distance_constraints(sys);
  const int m = sys.control_count;
  const std::size_t n = corr.size();

  std::vector<Eigen::Vector3d> world(n);
  for (std::size_t i = 0; i < n; ++i) world[i] = corr[i].world;

  PoseEstimate best;
  double best_err = std::numeric_limits<double>::infinity();
  for (int count = 1; count <= m; ++count) {
    auto beta = detail::linear_betas(dc, count, m);
    if (!beta) continue;
    detail::refine_betas(dc, *beta);
    const Eigen::VectorXd x = sys.null_vectors * *beta;
    std::vector<Eigen::Vector3d> camera(n);
    int behind = 0;
    for (std::size_t i = 0; i < n; ++i) {
      camera[i].setZero();
      for (int j = 0; j < m; ++j) {
        camera[i] += sys.alphas(static_cast<Eigen::Index>(i), j) * x.segment<3>(3 * j);
      }
      behind += camera[i].z() < 0.0 ? 1 : 0;
    }
    if (2 * behind > static_cast<int>(n)) {
      for (auto& p : camera) p = -p;
    }
    Eigen::Matrix3d r;
    Eigen::Vector3d t;
    detail::absolute_orientation(world, camera, r, t);
    detail::refine_pose(corr, k, r, t);
    const double err = mean_reprojection_error(r, t, k, corr);
    if (err < best_err) {
      best_err = err;
      best.rotation = r;
      best.translation = t;
    }
  }
  // The minimal general case leaves the four-vector null space
  // underdetermined; three-point solutions checked against the fourth point
  // give the remaining starting poses.
  if (n == 4 && m == 4) {
    for (std::size_t skip = 0; skip < 4; ++skip) {
      std::array<Eigen::Vector3d, 3> w3, rays;
      for (std::size_t i = 0, j = 0; i < 4; ++i) {
        if (i == skip) continue;
        w3[j] = corr[i].world;
        rays[j] = Eigen::Vector3d((corr[i].pixel.x() - k.cx) / k.fx,
                                  (corr[i].pixel.y() - k.cy) / k.fy, 1.0)
                      .normalized();
        ++j;
      }
      for (const auto& cam_pts : detail::p3p_points(w3, rays)) {
        Eigen::Matrix3d r;
        Eigen::Vector3d t;
        detail::absolute_orientation(w3, cam_pts, r, t);
        detail::refine_pose(corr, k, r, t);
        const double err = mean_reprojection_error(r, t, k, corr);
        if (err < best_err) {
          best_err = err;
          best.rotation = r;
          best.translation = t;
        }
      }
    }
  }
  if (!std::isfinite(best_err)) {
    throw DegenerateConfigurationError("EPnP found no pose with all points in front");
  }
  best.reprojection_error = best_err;
  best.inlier_count = n;
  best.inlier_mask.assign(n, 1);
  return best;
}

struct RansacConfig {
  std::size_t iterations = 1000;
  double reprojection_threshold_px = 8.0;
  std::uint64_t seed = 0;
};

/// Hypothesize-and-verify over minimal 4-point samples; the best model has
/// the most inliers, ties broken by lower mean inlier error. The returned
/// pose is an EPnP refit on all inliers of the best model.
inline PoseEstimate ransac_pnp(std::span<const PnPCorrespondence> corr, const Intrinsics& k,
                               const RansacConfig& cfg) {
  const std::size_t n = corr.size();
  if (n < 4) throw LocalizationFailure("fewer than 4 correspondences");
  std::mt19937_64 rng(cfg.seed);
  std::size_t best_count = 0;
  double best_err = std::numeric_limits<double>::infinity();
  std::vector<std::uint8_t> best_mask;

  auto score = [&](const Eigen::Matrix3d& r, const Eigen::Vector3d& t,
                   std::vector<std::uint8_t>& mask, double& mean_err) {
    mask.assign(n, 0);
    std::size_t count = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = reprojection_residual(r, t, k, corr[i]);
      if (e <= cfg.reprojection_threshold_px) {
        mask[i] = 1;
        ++count;
        total += e;
      }
    }
    mean_err = count ? total / static_cast<double>(count) : std::numeric_limits<double>::infinity();
    return count;
  };

  std::vector<std::uint8_t> mask;
  std::array<PnPCorrespondence, 4> sample;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::array<std::size_t, 4> idx{};
    for (std::size_t s = 0; s < 4; ++s) {
      bool fresh = false;
      while (!fresh) {
        idx[s] = static_cast<std::size_t>(rng() % n);
        fresh = std::find(idx.begin(), idx.begin() + static_cast<long>(s), idx[s]) ==
                idx.begin() + static_cast<long>(s);
      }
      sample[s] = corr[idx[s]];
    }
    PoseEstimate hyp;
    try {
      hyp = epnp(sample, k);
    } catch (const Error&) {
      continue;
    }
    double err = 0.0;
    const std::size_t count = score(hyp.rotation, hyp.translation, mask, err);
    if (count > best_count || (count == best_count && count > 0 && err < best_err)) {
      best_count = count;
      best_err = err;
      best_mask = mask;
    }
  }
  if (best_count < 4) throw LocalizationFailure("no hypothesis reached 4 inliers");

  std::vector<PnPCorrespondence> inliers;
  for (std::size_t i = 0; i < n; ++i) {
    if (best_mask[i]) inliers.push_back(corr[i]);
  }
  PoseEstimate out;
  try {
    out = epnp(inliers, k);
  } catch (const Error& e) {
    throw LocalizationFailure(std::string("refit on inliers failed: ") + e.what());
  }
  double err = 0.0;
  out.inlier_count = score(out.rotation, out.translation, out.inlier_mask, err);
  out.reprojection_error = err;
  return out;
}

struct PoseError {
  double position_m = 0.0;
  double orientation_deg = 0.0;
};

inline PoseError pose_error(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation,
                            const CameraParams& truth) {
  const Eigen::Vector3d c_est = -rotation.transpose() * translation;
  // atan2 of the skew and trace parts stays accurate near 0 and 180 degrees.
  const Eigen::Matrix3d rel = rotation.transpose() * truth.rotation;
  const Eigen::Vector3d skew(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
  const double angle = std::atan2(0.5 * skew.norm(), 0.5 * (rel.trace() - 1.0));
  return {(c_est - truth.center()).norm(), angle * 180.0 / M_PI};
}

inline PoseError pose_error(const PoseEstimate& estimate, const CameraParams& truth) {
  return pose_error(estimate.rotation, estimate.translation, truth);
}

struct PoseThreshold {
  double position_m = 0.0;
  double orientation_deg = 0.0;
};

inline const std::vector<PoseThreshold>& default_pose_thresholds() {
  static const std::vector<PoseThreshold> t{{0.5, 2.0}, {1.0, 5.0}, {5.0, 10.0}};
  return t;
}

/// Percentage of images within each (position, orientation) threshold pair.
/// Localization failures are passed as nullopt and count as misses.
inline std::vector<double> localization_accuracy(const std::vector<std::optional<PoseError>>& errors,
                                                 const std::vector<PoseThreshold>& thresholds) {
  std::vector<double> out;
  for (const auto& th : thresholds) {
    if (errors.empty()) {
      out.push_back(0.0);
      continue;
    }
    std::size_t ok = 0;
    for (const auto& e : errors) {
      if (e && e->position_m <= th.position_m && e->orientation_deg <= th.orientation_deg) ++ok;
    }
    out.push_back(100.0 * static_cast<double>(ok) / static_cast<double>(errors.size()));
  }
  return out;
}

}  // namespace viewsynth
