#pragma once

// Reference keypoint repository, nearest-neighbour descriptor matching and
// mean matching accuracy.

#include <cmath>
#include <limits>
#include <vector>

#include "viewsynth/featnet.hpp"
#include "viewsynth/geometry.hpp"

namespace viewsynth {

struct RepositoryEntry {
  Keypoint3D keypoint;  // world coordinate always set
  int image_id = -1;
};

struct KeypointRepository {
  std::vector<RepositoryEntry> entries;
  std::size_t descriptor_dim = 0;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

/// Depth at a keypoint position, read from the pixel containing it.
inline std::optional<double> depth_at(const DepthImage& image, const Eigen::Vector2d& position) {
  const int x = static_cast<int>(std::floor(position.x()));
  const int y = static_cast<int>(std::floor(position.y()));
  if (x < 0 || y < 0 || x >= image.width || y >= image.height || !image.valid(x, y)) {
    return std::nullopt;
  }
  return image.at(x, y);
}

/// Sets the world coordinate of every keypoint with valid depth; the others
/// keep an empty world coordinate.
inline void lift_keypoints(std::vector<Keypoint3D>& keypoints, const DepthImage& image) {
  for (auto& kp : keypoints) {
    if (auto d = depth_at(image, kp.position)) {
      kp.world = unproject(kp.position, *d, image.camera);
    } else {
      kp.world.reset();
    }
  }
}

struct RepositoryImage {
  const DepthImage* image = nullptr;
  std::vector<Keypoint3D> keypoints;  // sorted by descending score
  int image_id = -1;
};

/// Lifts keypoints of each reference image to 3D and keeps at most
/// `per_image` of them. Keypoints without valid depth are dropped before the
/// cut.
inline KeypointRepository build_repository(const std::vector<RepositoryImage>& images,
                                           std::size_t per_image = 50) {
  KeypointRepository repo;
  for (const auto& img : images) {
    std::size_t taken = 0;
    for (const auto& kp : img.keypoints) {
      if (taken >= per_image) break;
      auto d = depth_at(*img.image, kp.position);
      if (!d) continue;
      RepositoryEntry e{kp, img.image_id};
      e.keypoint.world = unproject(kp.position, *d, img.image->camera);
      if (repo.descriptor_dim == 0) repo.descriptor_dim = kp.descriptor.size();
      if (kp.descriptor.size() != repo.descriptor_dim) {
        throw ShapeError("repository descriptors must share one dimensionality");
      }
      repo.entries.push_back(std::move(e));
      ++taken;
    }
  }
  return repo;
}

struct Match {
  std::size_t query = 0;
  std::size_t entry = 0;
  double distance = 0.0;
  friend bool operator==(const Match&, const Match&) = default;
};

enum class MatchMode { LinearScan, PartialDistance };

/// Exact nearest repository entry per query by L2 descriptor distance; ties
/// go to the lowest repository index. PartialDistance abandons a candidate
/// once its running sum exceeds the best so far and returns the same result.
inline std::vector<Match> match_keypoints(const std::vector<Keypoint3D>& queries,
                                          const KeypointRepository& repo,
                                          MatchMode mode = MatchMode::LinearScan) {
  if (repo.empty()) throw EmptyRepositoryError("cannot match against an empty repository");
  std::vector<Match> out;
  out.reserve(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& a = queries[q].descriptor;
    if (a.size() != repo.descriptor_dim) throw ShapeError("query descriptor dimensionality");
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    for (std::size_t e = 0; e < repo.entries.size(); ++e) {
      const auto& b = repo.entries[e].keypoint.descriptor;
      double ss = 0.0;
      bool abandoned = false;
      for (std::size_t k = 0; k < a.size(); ++k) {
        ss += (a[k] - b[k]) * (a[k] - b[k]);
        if (mode == MatchMode::PartialDistance && ss > best) {
          abandoned = true;
          break;
        }
      }
      if (!abandoned && ss < best) {
        best = ss;
        best_idx = e;
      }
    }
    out.push_back({q, best_idx, std::sqrt(best)});
  }
  return out;
}

/// Matches of one test image together with the query keypoints they index.
struct ImageMatches {
  std::vector<Keypoint3D> queries;
  std::vector<Match> matches;
};

/// Percentage of correct matches per image, averaged over images. A match is
/// correct when query and entry world points are within `threshold_m`.
/// Matches whose query lacks a world point do not count; images left with no
/// evaluable match are excluded from the mean.
inline double mean_matching_accuracy(const std::vector<ImageMatches>& per_image,
                                     const KeypointRepository& repo, double threshold_m) {
  double total = 0.0;
  std::size_t images = 0;
  for (const auto& im : per_image) {
    std::size_t evaluable = 0, correct = 0;
    for (const auto& m : im.matches) {
      const auto& q = im.queries.at(m.query);
      if (!q.world) continue;
      ++evaluable;
      if ((*q.world - *repo.entries.at(m.entry).keypoint.world).norm() <= threshold_m) ++correct;
    }
    if (evaluable == 0) continue;
    total += static_cast<double>(correct) / static_cast<double>(evaluable);
    ++images;
  }
  if (images == 0) throw EvaluationError("no evaluable test images for MMA");
  return 100.0 * total / static_cast<double>(images);
}

/// Expected MMA when every query is assigned a uniformly random repository
/// entry.
inline double random_assignment_mma(const std::vector<ImageMatches>& per_image,
                                    const KeypointRepository& repo, double threshold_m) {
  if (repo.empty()) throw EmptyRepositoryError("cannot match against an empty repository");
  double total = 0.0;
  std::size_t images = 0;
  for (const auto& im : per_image) {
    std::size_t evaluable = 0;
    double expected = 0.0;
    for (const auto& q : im.queries) {
      if (!q.world) continue;
      ++evaluable;
      std::size_t near = 0;
      for (const auto& e : repo.entries) {
        if ((*q.world - *e.keypoint.world).norm() <= threshold_m) ++near;
      }
      expected += static_cast<double>(near) / static_cast<double>(repo.size());
    }
    if (evaluable == 0) continue;
    total += expected / static_cast<double>(evaluable);
    ++images;
  }
  if (images == 0) throw EvaluationError("no evaluable test images for MMA");
  return 100.0 * total / static_cast<double>(images);
}

}  // namespace viewsynth
