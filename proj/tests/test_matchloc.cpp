#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "viewsynth/matchloc.hpp"
#include "viewsynth/pnp.hpp"

using namespace viewsynth;
using viewsynth::testing::random_camera;
using viewsynth::testing::random_depth;
using viewsynth::testing::random_rotation;

namespace {

std::vector<double> random_unit(std::size_t f, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(f);
  double s = 0.0;
  for (auto& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (auto& x : v) x /= std::sqrt(s);
  return v;
}

KeypointRepository random_repo(std::size_t n, std::size_t f, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  KeypointRepository repo;
  repo.descriptor_dim = f;
  for (std::size_t i = 0; i < n; ++i) {
    RepositoryEntry e;
    e.keypoint.descriptor = random_unit(f, rng);
    e.keypoint.world = Eigen::Vector3d(u(rng), u(rng), u(rng));
    e.image_id = static_cast<int>(i / 50);
    repo.entries.push_back(std::move(e));
  }
  return repo;
}

Keypoint3D query_at(std::vector<double> descriptor, std::optional<Eigen::Vector3d> world) {
  Keypoint3D k;
  k.descriptor = std::move(descriptor);
  k.world = world;
  return k;
}

// Ground-truth camera and noiseless correspondences in front of it.
struct PnPScene {
  CameraParams camera;
  std::vector<PnPCorrespondence> corr;
};

PnPScene pnp_scene(std::mt19937_64& rng, std::size_t n, bool planar = false) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PnPScene s;
  s.camera.intrinsics = {500.0, 480.0, 320.0, 240.0};
  s.camera.width = 640;
  s.camera.height = 480;
  s.camera.rotation = random_rotation(rng);
  s.camera.translation = Eigen::Vector3d(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5) * 6.0;
  // A random plane through the view when planar, otherwise a depth range.
  const Eigen::Vector3d normal = Eigen::Vector3d(u(rng) - 0.5, u(rng) - 0.5, 2.0).normalized();
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d px(640 * u(rng), 480 * u(rng));
    const Eigen::Vector3d ray((px.x() - 320.0) / 500.0, (px.y() - 240.0) / 480.0, 1.0);
    const double depth = planar ? 4.0 / normal.dot(ray) * ray.z() : 2.0 + 4.0 * u(rng);
    const Eigen::Vector3d world = unproject(px, depth, s.camera);
    s.corr.push_back({world, px});
  }
  return s;
}

double rotation_deg(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const Eigen::Quaterniond qa(a), qb(b);
  const Eigen::Quaterniond rel = qa.conjugate() * qb;
  return 2.0 * std::atan2(rel.vec().norm(), std::abs(rel.w())) * 180.0 / M_PI;
}

}  // namespace

TEST(Repository, CountsAndPerImageCut) {
  std::mt19937_64 rng(1);
  std::vector<DepthImage> images;
  for (int i = 0; i < 10; ++i) {
    const CameraParams cam = random_camera(rng, 64, 48);
    images.push_back(random_depth(rng, cam, 1.0, 4.0, 0.0));
  }
  std::vector<RepositoryImage> input;
  std::uniform_real_distribution<double> ux(0.0, 64.0), uy(0.0, 48.0);
  for (int i = 0; i < 10; ++i) {
    RepositoryImage ri{&images[static_cast<std::size_t>(i)], {}, i};
    for (int k = 0; k < 70; ++k) {
      Keypoint3D kp;
      kp.position = {ux(rng), uy(rng)};
      kp.score = 1.0 - k * 0.01;
      kp.descriptor = random_unit(8, rng);
      ri.keypoints.push_back(kp);
    }
    input.push_back(ri);
  }
  EXPECT_EQ(build_repository(input).size(), 500u);
  input[3].keypoints.resize(3);
  EXPECT_EQ(build_repository(input).size(), 453u);
  const auto repo = build_repository(input);
  EXPECT_EQ(std::count_if(repo.entries.begin(), repo.entries.end(),
                          [](const RepositoryEntry& e) { return e.image_id == 3; }),
            3);
}

TEST(Repository, InvalidDepthKeypointsAreDroppedBeforeTheCut) {
  std::mt19937_64 rng(2);
  const CameraParams cam = random_camera(rng, 16, 16);
  DepthImage img = random_depth(rng, cam, 1.0, 4.0, 0.0);
  img.depth[img.index(0, 0)] = 0.0;
  RepositoryImage ri{&img, {}, 0};
  Keypoint3D invalid;
  invalid.position = {0.5, 0.5};
  invalid.descriptor = {1.0};
  ri.keypoints.push_back(invalid);
  for (int k = 1; k <= 3; ++k) {
    Keypoint3D kp;
    kp.position = {k + 0.5, 2.5};
    kp.descriptor = {1.0};
    ri.keypoints.push_back(kp);
  }
  const auto repo = build_repository({ri}, 2);
  ASSERT_EQ(repo.size(), 2u);
  EXPECT_EQ(repo.entries[0].keypoint.position, Eigen::Vector2d(1.5, 2.5));
}

// World points via the inverse of the 4x4 camera matrix.
TEST(Repository, WorldCoordinatesMatchHomogeneousOracle) {
  std::mt19937_64 rng(3);
  const CameraParams cam = random_camera(rng, 40, 30);
  const DepthImage img = random_depth(rng, cam, 1.0, 4.0, 0.0);
  RepositoryImage ri{&img, {}, 7};
  std::uniform_real_distribution<double> ux(0.0, 40.0), uy(0.0, 30.0);
  for (int k = 0; k < 50; ++k) {
    Keypoint3D kp;
    kp.position = {ux(rng), uy(rng)};
    kp.descriptor = random_unit(4, rng);
    ri.keypoints.push_back(kp);
  }
  const auto repo = build_repository({ri});
  ASSERT_EQ(repo.size(), 50u);
  Eigen::Matrix4d world_to_cam = Eigen::Matrix4d::Identity();
  world_to_cam.topLeftCorner<3, 3>() = cam.rotation;
  world_to_cam.topRightCorner<3, 1>() = cam.translation;
  const Eigen::Matrix4d cam_to_world = world_to_cam.inverse();
  const auto& k = cam.intrinsics;
  for (const auto& e : repo.entries) {
    const auto& p = e.keypoint.position;
    const double z = img.depth[img.index(static_cast<int>(p.x()), static_cast<int>(p.y()))];
    const Eigen::Vector4d pc((p.x() - k.cx) / k.fx * z, (p.y() - k.cy) / k.fy * z, z, 1.0);
    const Eigen::Vector4d w = cam_to_world * pc;
    EXPECT_LT((*e.keypoint.world - w.head<3>()).norm(), 1e-9);
    EXPECT_EQ(e.image_id, 7);
  }
}

TEST(Matching, ExactDescriptorMatchesItsEntry) {
  std::mt19937_64 rng(4);
  const auto repo = random_repo(100, 16, rng);
  const auto m = match_keypoints({query_at(repo.entries[42].keypoint.descriptor, std::nullopt)}, repo);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].entry, 42u);
  EXPECT_EQ(m[0].distance, 0.0);
}

TEST(Matching, SingleEntryRepositoryTakesEverything) {
  std::mt19937_64 rng(5);
  const auto repo = random_repo(1, 8, rng);
  std::vector<Keypoint3D> queries;
  for (int i = 0; i < 20; ++i) queries.push_back(query_at(random_unit(8, rng), std::nullopt));
  for (const auto& m : match_keypoints(queries, repo)) EXPECT_EQ(m.entry, 0u);
}

TEST(Matching, EmptyRepositoryRaises) {
  KeypointRepository repo;
  EXPECT_THROW(match_keypoints({}, repo), EmptyRepositoryError);
}

TEST(Matching, MatchesBruteForceOnLargeInstance) {
  std::mt19937_64 rng(6);
  const auto repo = random_repo(1000, 32, rng);
  std::vector<Keypoint3D> queries;
  for (int i = 0; i < 200; ++i) queries.push_back(query_at(random_unit(32, rng), std::nullopt));
  const auto linear = match_keypoints(queries, repo, MatchMode::LinearScan);
  const auto partial = match_keypoints(queries, repo, MatchMode::PartialDistance);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t e = 0; e < repo.size(); ++e) {
      double s = 0.0;
      for (std::size_t k = 0; k < 32; ++k) {
        s += std::pow(queries[q].descriptor[k] - repo.entries[e].keypoint.descriptor[k], 2);
      }
      if (std::sqrt(s) < best_d) {
        best_d = std::sqrt(s);
        best = e;
      }
    }
    EXPECT_EQ(linear[q].entry, best);
    EXPECT_NEAR(linear[q].distance, best_d, 1e-12);
    EXPECT_EQ(partial[q], linear[q]);
  }
}

// Tiny quantized descriptors make ties common; both modes must pick the
// lowest index.
TEST(Matching, PartialDistanceEqualsLinearScanExhaustively) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 300; ++t) {
    KeypointRepository repo;
    repo.descriptor_dim = 2;
    const std::size_t n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) {
      RepositoryEntry e;
      e.keypoint.descriptor = {static_cast<double>(rng() % 3), static_cast<double>(rng() % 3)};
      repo.entries.push_back(e);
    }
    std::vector<Keypoint3D> queries;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) queries.push_back(query_at({a * 1.0, b * 1.0}, std::nullopt));
    EXPECT_EQ(match_keypoints(queries, repo, MatchMode::PartialDistance),
              match_keypoints(queries, repo, MatchMode::LinearScan));
  }
}

TEST(Mma, CoincidentPointsGiveHundred) {
  std::mt19937_64 rng(8);
  const auto repo = random_repo(20, 4, rng);
  ImageMatches im;
  for (std::size_t i = 0; i < 20; ++i) {
    im.queries.push_back(query_at(repo.entries[i].keypoint.descriptor, repo.entries[i].keypoint.world));
  }
  im.matches = match_keypoints(im.queries, repo);
  EXPECT_DOUBLE_EQ(mean_matching_accuracy({im}, repo, 0.1), 100.0);
}

TEST(Mma, AveragesPerImage) {
  std::mt19937_64 rng(9);
  const auto repo = random_repo(2, 4, rng);
  ImageMatches good, bad;
  good.queries = {query_at({}, repo.entries[0].keypoint.world)};
  good.matches = {{0, 0, 0.0}};
  // Three wrong matches and one query without depth, which is ignored.
  for (int i = 0; i < 3; ++i) {
    bad.queries.push_back(query_at({}, *repo.entries[0].keypoint.world + Eigen::Vector3d(5, 0, 0)));
    bad.matches.push_back({static_cast<std::size_t>(i), 0, 0.0});
  }
  bad.queries.push_back(query_at({}, std::nullopt));
  bad.matches.push_back({3, 0, 0.0});
  EXPECT_DOUBLE_EQ(mean_matching_accuracy({good, bad}, repo, 0.1), 50.0);
}

TEST(Mma, NoEvaluableImageRaises) {
  std::mt19937_64 rng(10);
  const auto repo = random_repo(2, 4, rng);
  ImageMatches im;
  im.queries = {query_at({}, std::nullopt)};
  im.matches = {{0, 1, 0.0}};
  EXPECT_THROW(mean_matching_accuracy({im}, repo, 0.1), EvaluationError);
  EXPECT_THROW(mean_matching_accuracy({}, repo, 0.1), EvaluationError);
}

TEST(Mma, MonotoneInThresholdAndBaselineIsExact) {
  std::mt19937_64 rng(11);
  const auto repo = random_repo(300, 8, rng);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<ImageMatches> images(4);
  for (auto& im : images) {
    for (int i = 0; i < 25; ++i) {
      im.queries.push_back(query_at(random_unit(8, rng), Eigen::Vector3d(u(rng), u(rng), u(rng))));
    }
    im.matches = match_keypoints(im.queries, repo);
  }
  double prev = 0.0, prev_random = 0.0;
  for (double th : {0.05, 0.1, 0.25, 0.5, 1.0, 4.0}) {
    const double v = mean_matching_accuracy(images, repo, th);
    EXPECT_GE(v, prev);
    prev = v;
    // Average over every possible assignment of each query.
    double total = 0.0;
    for (const auto& im : images) {
      double acc = 0.0;
      for (const auto& q : im.queries) {
        for (const auto& e : repo.entries) acc += (*q.world - *e.keypoint.world).norm() <= th;
      }
      total += acc / (static_cast<double>(im.queries.size()) * repo.size());
    }
    const double r = random_assignment_mma(images, repo, th);
    EXPECT_NEAR(r, 100.0 * total / images.size(), 1e-9);
    EXPECT_GE(r, prev_random);
    prev_random = r;
  }
  EXPECT_DOUBLE_EQ(prev, 100.0);
}

TEST(Epnp, NoiselessSixPoints) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 20; ++t) {
    const PnPScene s = pnp_scene(rng, 6);
    const PoseEstimate est = epnp(s.corr, s.camera.intrinsics);
    const PoseError err = pose_error(est, s.camera);
    EXPECT_LT(err.position_m, 1e-4);
    EXPECT_LT(err.orientation_deg, 1e-3);
  }
}

TEST(Epnp, IdentityPose) {
  std::mt19937_64 rng(13);
  PnPScene s = pnp_scene(rng, 10);
  for (auto& c : s.corr) c.world = s.camera.rotation * c.world + s.camera.translation;
  const PoseEstimate est = epnp(s.corr, s.camera.intrinsics);
  EXPECT_LT((est.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-6);
  EXPECT_LT(est.translation.norm(), 1e-6);
}

TEST(Epnp, CoplanarPoints) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 20; ++t) {
    const PnPScene s = pnp_scene(rng, 8, true);
    const PoseError err = pose_error(epnp(s.corr, s.camera.intrinsics), s.camera);
    EXPECT_LT(err.position_m, 1e-3);
    EXPECT_LT(err.orientation_deg, 1e-2);
  }
}

TEST(Epnp, TooFewOrCollinearPointsRaise) {
  std::mt19937_64 rng(15);
  const PnPScene s = pnp_scene(rng, 3);
  EXPECT_THROW(epnp(s.corr, s.camera.intrinsics), InsufficientPointsError);
  std::vector<PnPCorrespondence> line;
  for (int i = 0; i < 6; ++i) {
    const Eigen::Vector3d w(0.1 * i, 0.2 * i, 3.0 + 0.3 * i);
    line.push_back({w, Eigen::Vector2d(320 + 500 * w.x() / w.z(), 240 + 480 * w.y() / w.z())});
  }
  EXPECT_THROW(epnp(line, {500.0, 480.0, 320.0, 240.0}), DegenerateConfigurationError);
}

TEST(Epnp, ReprojectionNoWorseThanGroundTruth) {
  std::mt19937_64 rng(16);
  for (int t = 0; t < 30; ++t) {
    const PnPScene s = pnp_scene(rng, 4 + rng() % 20, t % 3 == 0);
    const PoseEstimate est = epnp(s.corr, s.camera.intrinsics);
    const double own = mean_reprojection_error(est.rotation, est.translation, s.camera.intrinsics, s.corr);
    const double truth = mean_reprojection_error(s.camera.rotation, s.camera.translation,
                                                 s.camera.intrinsics, s.corr);
    EXPECT_LE(own, truth + 1e-6);
  }
}

TEST(Ransac, OutlierFreeMatchesEpnp) {
  std::mt19937_64 rng(17);
  const PnPScene s = pnp_scene(rng, 30);
  const PoseEstimate plain = epnp(s.corr, s.camera.intrinsics);
  const PoseEstimate robust = ransac_pnp(s.corr, s.camera.intrinsics, {200, 8.0, 3});
  EXPECT_EQ(robust.inlier_count, 30u);
  EXPECT_LT((robust.rotation - plain.rotation).norm(), 1e-6);
  EXPECT_LT((robust.translation - plain.translation).norm(), 1e-6);
}

TEST(Ransac, RecoversPoseWithOutliers) {
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    PnPScene s = pnp_scene(rng, 30);
    for (int i = 0; i < 13; ++i) {
      s.corr.push_back({s.corr[static_cast<std::size_t>(i)].world,
                        Eigen::Vector2d(640 * u(rng), 480 * u(rng))});
    }
    const PoseEstimate est = ransac_pnp(s.corr, s.camera.intrinsics, {500, 8.0, 100u + t});
    const PoseError err = pose_error(est, s.camera);
    EXPECT_GE(est.inlier_count, 30u);
    EXPECT_LT(err.position_m, 1e-3);
    EXPECT_LT(err.orientation_deg, 1e-2);
  }
}

TEST(Ransac, SeededRunsAreBitwiseIdentical) {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PnPScene s = pnp_scene(rng, 20);
  for (auto& c : s.corr) c.pixel += Eigen::Vector2d(u(rng), u(rng));
  for (int i = 0; i < 10; ++i) s.corr.push_back({s.corr[0].world, {640 * u(rng), 480 * u(rng)}});
  const PoseEstimate a = ransac_pnp(s.corr, s.camera.intrinsics, {300, 8.0, 5});
  const PoseEstimate b = ransac_pnp(s.corr, s.camera.intrinsics, {300, 8.0, 5});
  EXPECT_EQ(a.rotation, b.rotation);
  EXPECT_EQ(a.translation, b.translation);
  EXPECT_EQ(a.inlier_mask, b.inlier_mask);
}

TEST(Ransac, TooFewCorrespondencesFail) {
  std::mt19937_64 rng(20);
  const PnPScene s = pnp_scene(rng, 3);
  EXPECT_THROW(ransac_pnp(s.corr, s.camera.intrinsics, {}), LocalizationFailure);
}

TEST(PoseError, ZeroAndHalfTurn) {
  std::mt19937_64 rng(21);
  const CameraParams truth = random_camera(rng);
  const PoseError zero = pose_error(truth.rotation, truth.translation, truth);
  EXPECT_NEAR(zero.position_m, 0.0, 1e-12);
  EXPECT_NEAR(zero.orientation_deg, 0.0, 1e-5);
  for (const Eigen::Vector3d& axis :
       std::vector<Eigen::Vector3d>{Eigen::Vector3d::UnitX(), Eigen::Vector3d(1, 2, 3).normalized()}) {
    const Eigen::Matrix3d r = truth.rotation * Eigen::AngleAxisd(M_PI, axis).toRotationMatrix();
    const Eigen::Vector3d t = -r * truth.center();
    const PoseError e = pose_error(r, t, truth);
    EXPECT_NEAR(e.position_m, 0.0, 1e-12);
    EXPECT_NEAR(e.orientation_deg, 180.0, 1e-6);
  }
}

TEST(PoseError, MatchesQuaternionOracle) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const CameraParams truth = random_camera(rng);
    const Eigen::Matrix3d r =
        Eigen::AngleAxisd(2.5 * std::abs(u(rng)) + 0.05, Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized())
            .toRotationMatrix() *
        truth.rotation;
    const Eigen::Vector3d center = truth.center() + Eigen::Vector3d(u(rng), u(rng), u(rng));
    const PoseError e = pose_error(r, -r * center, truth);
    EXPECT_NEAR(e.position_m, (center - truth.center()).norm(), 1e-9);
    EXPECT_NEAR(e.orientation_deg, rotation_deg(r, truth.rotation), 1e-9);
  }
}

TEST(LocalizationAccuracy, Examples) {
  const auto& th = default_pose_thresholds();
  const auto all = localization_accuracy({PoseError{0, 0}, PoseError{0, 0}}, th);
  for (double v : all) EXPECT_DOUBLE_EQ(v, 100.0);
  const auto one = localization_accuracy({PoseError{0.7, 3.0}}, th);
  EXPECT_EQ(one, (std::vector<double>{0.0, 100.0, 100.0}));
  const auto with_miss = localization_accuracy({PoseError{0.1, 1.0}, std::nullopt}, th);
  EXPECT_EQ(with_miss, (std::vector<double>{50.0, 50.0, 50.0}));
}

TEST(LocalizationAccuracy, MonotoneAsThresholdsLoosen) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::optional<PoseError>> errors;
  for (int i = 0; i < 100; ++i) {
    if (u(rng) < 0.1) {
      errors.push_back(std::nullopt);
    } else {
      errors.push_back(PoseError{6 * u(rng), 12 * u(rng)});
    }
  }
  std::vector<PoseThreshold> th;
  for (int i = 1; i <= 20; ++i) th.push_back({0.3 * i, 0.6 * i});
  const auto acc = localization_accuracy(errors, th);
  for (std::size_t i = 1; i < acc.size(); ++i) EXPECT_GE(acc[i], acc[i - 1]);
  // The loosest pair covers every successful estimate; failures never count.
  const auto failures = std::count(errors.begin(), errors.end(), std::nullopt);
  EXPECT_DOUBLE_EQ(acc.back(), static_cast<double>(100 - failures));
}
