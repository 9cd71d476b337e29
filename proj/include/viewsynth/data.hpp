#pragma once

// Depth sequences: TUM- and 7-Scenes-style loaders, training pair sampling
// and a ray-cast synthetic scene generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>
#include <json.hpp>

#include "viewsynth/geometry.hpp"
#include "viewsynth/image_io.hpp"

namespace viewsynth {

struct Frame {
  DepthImage depth;  // carries the frame's camera
  double timestamp = 0.0;
  int index = 0;
};

struct Sequence {
  std::string name;
  std::vector<Frame> frames;
  Intrinsics intrinsics;
  double depth_scale = 1.0;  // meters per raw unit
  double max_depth = 10.0;

  std::size_t size() const { return frames.size(); }
};

struct PairSpec {
  int sequence = 0;
  int first = 0;
  int offset = 10;
  friend bool operator==(const PairSpec&, const PairSpec&) = default;
};

/// All (i, i + offset) with i a multiple of `stride`.
inline std::vector<PairSpec> sample_pairs(const Sequence& seq, int offset, int stride,
                                          int sequence_id = 0) {
  if (offset < 1 || stride < 1) throw ConfigError("offset and stride must be positive");
  std::vector<PairSpec> out;
  const int n = static_cast<int>(seq.size());
  for (int i = 0; i + offset < n; i += stride) out.push_back({sequence_id, i, offset});
  return out;
}

// ---------------------------------------------------------------- loaders

struct LoaderOptions {
  Intrinsics intrinsics;
  double depth_scale = 1.0;   // meters per raw unit
  double max_depth = 10.0;
  double max_time_difference = 0.02;  // seconds, TUM association
};

inline LoaderOptions tum_defaults() {
  return {{525.0, 525.0, 319.5, 239.5}, 1.0 / 5000.0, 10.0, 0.02};
}

inline LoaderOptions seven_scenes_defaults() {
  return {{585.0, 585.0, 320.0, 240.0}, 1.0 / 1000.0, 10.0, 0.02};
}

inline DepthImage depth_from_raw(const GrayImage& raw, const LoaderOptions& opt,
                                 const CameraParams& cam) {
  DepthImage img(raw.width, raw.height, opt.max_depth, cam);
  img.camera.width = raw.width;
  img.camera.height = raw.height;
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
    const auto v = raw.pixels[i];
    // 65535 marks missing depth in 7-Scenes.
    img.depth[i] = (v == 0 || v == 65535) ? 0.0 : v * opt.depth_scale;
  }
  return img;
}

/// Camera-to-world pose to the world-to-camera convention used here.
inline CameraParams camera_from_c2w(const Eigen::Matrix3d& r_c2w, const Eigen::Vector3d& t_c2w,
                                    const Intrinsics& k) {
  CameraParams cam;
  cam.intrinsics = k;
  // Re-orthonormalize: text files carry limited precision.
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(r_c2w, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) throw IngestionError("pose rotation is a reflection");
  cam.rotation = r.transpose();
  cam.translation = -cam.rotation * t_c2w;
  return cam;
}

namespace detail {

inline std::vector<std::vector<std::string>> read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("missing file: " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string f;
    while (ls >> f) fields.push_back(f);
    if (!fields.empty()) rows.push_back(std::move(fields));
  }
  return rows;
}

inline double parse_double(const std::string& s, const std::filesystem::path& file) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IngestionError("bad number '" + s + "' in " + file.string());
  }
}

}  // namespace detail

struct TumPose {
  double timestamp = 0.0;
  Eigen::Vector3d translation;
  Eigen::Quaterniond rotation;
};

inline std::vector<TumPose> read_tum_trajectory(const std::filesystem::path& path) {
  std::vector<TumPose> poses;
  for (const auto& row : detail::read_table(path)) {
    if (row.size() != 8) throw IngestionError("trajectory line needs 8 fields: " + path.string());
    double v[8];
    for (int i = 0; i < 8; ++i) v[i] = detail::parse_double(row[static_cast<std::size_t>(i)], path);
    TumPose p;
    p.timestamp = v[0];
    p.translation = {v[1], v[2], v[3]};
    p.rotation = Eigen::Quaterniond(v[7], v[4], v[5], v[6]).normalized();
    poses.push_back(p);
  }
  std::sort(poses.begin(), poses.end(),
            [](const TumPose& a, const TumPose& b) { return a.timestamp < b.timestamp; });
  return poses;
}

/// TUM layout: `depth.txt` (timestamp, relative PNG path) and
/// `groundtruth.txt` (timestamp tx ty tz qx qy qz qw, camera-to-world).
/// Each depth frame takes the nearest pose within the time tolerance;
/// frames without one are dropped.
inline Sequence load_tum_sequence(const std::filesystem::path& root,
                                  const LoaderOptions& opt = tum_defaults()) {
  const auto index_path = root / "depth.txt";
  const auto traj_path = root / "groundtruth.txt";
  const auto poses = read_tum_trajectory(traj_path);
  Sequence seq;
  seq.name = root.filename().string();
  seq.intrinsics = opt.intrinsics;
  seq.depth_scale = opt.depth_scale;
  seq.max_depth = opt.max_depth;
  int index = 0;
  for (const auto& row : detail::read_table(index_path)) {
    if (row.size() < 2) throw IngestionError("depth index line needs 2 fields");
    const double ts = detail::parse_double(row[0], index_path);
    auto it = std::lower_bound(poses.begin(), poses.end(), ts,
                               [](const TumPose& p, double t) { return p.timestamp < t; });
    const TumPose* best = nullptr;
    double best_dt = std::numeric_limits<double>::infinity();
    for (auto cand : {it, it == poses.begin() ? poses.end() : std::prev(it)}) {
      if (cand == poses.end()) continue;
      const double dt = std::abs(cand->timestamp - ts);
      if (dt < best_dt) {
        best_dt = dt;
        best = &*cand;
      }
    }
    if (!best || best_dt > opt.max_time_difference) continue;
    const GrayImage raw = read_png_gray(root / row[1]);
    CameraParams cam =
        camera_from_c2w(best->rotation.toRotationMatrix(), best->translation, opt.intrinsics);
    Frame fr{depth_from_raw(raw, opt, cam), ts, index++};
    seq.frames.push_back(std::move(fr));
  }
  if (seq.frames.empty()) throw EmptySequenceError("no depth frame matched a pose in " + root.string());
  return seq;
}

/// 7-Scenes layout: `frame-XXXXXX.depth.png` (millimeters) with a matching
/// `frame-XXXXXX.pose.txt` holding a 4x4 camera-to-world matrix.
inline Sequence load_7scenes_sequence(const std::filesystem::path& root,
                                      const LoaderOptions& opt = seven_scenes_defaults()) {
  if (!std::filesystem::is_directory(root)) throw IngestionError("missing directory: " + root.string());
  std::vector<std::filesystem::path> depth_files;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("frame-", 0) == 0 && name.size() > 10 &&
        name.substr(name.size() - 10) == ".depth.png") {
      depth_files.push_back(entry.path());
    }
  }
  std::sort(depth_files.begin(), depth_files.end());
  Sequence seq;
  seq.name = root.filename().string();
  seq.intrinsics = opt.intrinsics;
  seq.depth_scale = opt.depth_scale;
  seq.max_depth = opt.max_depth;
  int index = 0;
  for (const auto& depth_path : depth_files) {
    const std::string name = depth_path.filename().string();
    const std::string stem = name.substr(0, name.size() - 10);
    const auto pose_path = root / (stem + ".pose.txt");
    const auto rows = detail::read_table(pose_path);
    if (rows.size() != 4) throw IngestionError("pose file needs 4 rows: " + pose_path.string());
    Eigen::Matrix4d m;
    for (int r = 0; r < 4; ++r) {
      if (rows[static_cast<std::size_t>(r)].size() != 4) {
        throw IngestionError("pose row needs 4 values: " + pose_path.string());
      }
      for (int c = 0; c < 4; ++c) {
        m(r, c) = detail::parse_double(rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)],
                                       pose_path);
      }
    }
    const GrayImage raw = read_png_gray(depth_path);
    CameraParams cam = camera_from_c2w(m.block<3, 3>(0, 0), m.block<3, 1>(0, 3), opt.intrinsics);
    Frame fr{depth_from_raw(raw, opt, cam), static_cast<double>(index), index};
    ++index;
    seq.frames.push_back(std::move(fr));
  }
  if (seq.frames.empty()) throw EmptySequenceError("no frames found in " + root.string());
  return seq;
}

// ------------------------------------------------------------- synthetic

struct Box {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half_extents = Eigen::Vector3d::Constant(0.5);
};

struct Sphere {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.5;
};

/// Square patch of the plane z = height.
struct GroundPlane {
  bool enabled = true;
  double height = 0.0;
  double half_extent = 4.0;
};

/// Orbit around `target` in the xy-plane; frame i sits at azimuth
/// start + i * step plus seeded per-frame jitter.
struct Orbit {
  Eigen::Vector3d target{0.0, 0.0, 0.4};
  double radius = 3.0;
  double height = 1.4;
  double start_deg = 0.0;
  double step_deg = 1.5;
  double jitter_deg = 0.2;
  double jitter_radius = 0.02;
};

struct SyntheticScene {
  std::uint64_t seed = 0;
  std::vector<Box> boxes;
  std::vector<Sphere> spheres;
  GroundPlane ground;
  Orbit orbit;

  /// Random boxes and spheres resting within [-1.2, 1.2]^2 x [0, 1.3].
  static SyntheticScene generate(std::uint64_t seed) {
    SyntheticScene s;
    s.seed = seed;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int count = 6 + static_cast<int>(rng() % 4);
    for (int i = 0; i < count; ++i) {
      const Eigen::Vector2d xy(-1.2 + 2.4 * u(rng), -1.2 + 2.4 * u(rng));
      if (u(rng) < 0.55) {
        Box b;
        b.half_extents = {0.1 + 0.35 * u(rng), 0.1 + 0.35 * u(rng), 0.1 + 0.5 * u(rng)};
        b.center = {xy.x(), xy.y(), b.half_extents.z() + 0.3 * u(rng) * (u(rng) < 0.3)};
        s.boxes.push_back(b);
      } else {
        Sphere sp;
        sp.radius = 0.15 + 0.3 * u(rng);
        sp.center = {xy.x(), xy.y(), sp.radius + 0.5 * u(rng)};
        s.spheres.push_back(sp);
      }
    }
    s.orbit.start_deg = 360.0 * u(rng);
    return s;
  }
};

inline Intrinsics default_synthetic_intrinsics(int width, int height) {
  const double f = width / (2.0 * std::tan(30.0 * M_PI / 180.0));
  return {f, f, width / 2.0, height / 2.0};
}

namespace detail {

// Ray o + t d; returns smallest t > tmin.
inline std::optional<double> intersect_sphere(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                              const Sphere& s, double tmin) {
  const Eigen::Vector3d oc = o - s.center;
  const double a = d.squaredNorm();
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - a * c;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  const double t0 = (-b - sq) / a;
  const double t1 = (-b + sq) / a;
  if (t0 > tmin) return t0;
  if (t1 > tmin) return t1;
  return std::nullopt;
}

inline std::optional<double> intersect_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                           const Box& b, double tmin) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    const double lo = b.center(i) - b.half_extents(i);
    const double hi = b.center(i) + b.half_extents(i);
    if (std::abs(d(i)) < 1e-15) {
      if (o(i) < lo || o(i) > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - o(i)) / d(i);
    double t1 = (hi - o(i)) / d(i);
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far) return std::nullopt;
  if (t_near > tmin) return t_near;
  if (t_far > tmin) return t_far;
  return std::nullopt;
}

inline std::optional<double> intersect_ground(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                              const GroundPlane& g, double tmin) {
  if (!g.enabled || std::abs(d.z()) < 1e-15) return std::nullopt;
  const double t = (g.height - o.z()) / d.z();
  if (!(t > tmin)) return std::nullopt;
  const Eigen::Vector3d p = o + t * d;
  if (std::abs(p.x()) > g.half_extent || std::abs(p.y()) > g.half_extent) return std::nullopt;
  return t;
}

inline double jitter(std::uint64_t seed, int frame, int channel) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(frame), static_cast<std::uint32_t>(channel)};
  std::mt19937_64 rng(seq);
  return std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
}

}  // namespace detail

inline CameraParams synthetic_camera(const SyntheticScene& scene, int frame, int width, int height,
                                     const Intrinsics& k) {
  const Orbit& o = scene.orbit;
  const double az = (o.start_deg + frame * o.step_deg +
                     o.jitter_deg * detail::jitter(scene.seed, frame, 0)) * M_PI / 180.0;
  const double r = o.radius + o.jitter_radius * detail::jitter(scene.seed, frame, 1);
  const Eigen::Vector3d eye(o.target.x() + r * std::cos(az), o.target.y() + r * std::sin(az),
                            o.height);
  return look_at(eye, o.target, Eigen::Vector3d::UnitZ(), k, width, height);
}

/// Depth along the optical axis of the nearest hit through pixel (x, y)'s
/// center; nullopt on a miss.
inline std::optional<double> cast_ray(const SyntheticScene& scene, const CameraParams& cam,
                                      double u, double v) {
  const auto& k = cam.intrinsics;
  const Eigen::Vector3d d_cam((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
  const Eigen::Vector3d d = cam.rotation.transpose() * d_cam;
  const Eigen::Vector3d o = cam.center();
  constexpr double tmin = 1e-9;
  std::optional<double> best;
  auto consider = [&](std::optional<double> t) {
    if (t && (!best || *t < *best)) best = t;
  };
  for (const auto& s : scene.spheres) consider(detail::intersect_sphere(o, d, s, tmin));
  for (const auto& b : scene.boxes) consider(detail::intersect_box(o, d, b, tmin));
  consider(detail::intersect_ground(o, d, scene.ground, tmin));
  // d has unit camera-z component, so the ray parameter is the depth.
  return best;
}

struct RenderedFrame {
  DepthImage depth;
  CameraParams camera;
};

inline RenderedFrame render_synthetic(const SyntheticScene& scene, const CameraParams& cam,
                                      double max_depth = 5.0) {
  DepthImage img(cam.width, cam.height, max_depth, cam);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      if (auto t = cast_ray(scene, cam, x + 0.5, y + 0.5)) img.depth[img.index(x, y)] = *t;
    }
  }
  return {std::move(img), cam};
}

inline RenderedFrame render_synthetic(const SyntheticScene& scene, int frame, int width, int height,
                                      const Intrinsics& k, double max_depth = 5.0) {
  return render_synthetic(scene, synthetic_camera(scene, frame, width, height, k), max_depth);
}

inline Sequence synthetic_sequence(const SyntheticScene& scene, int frames, int width, int height,
                                   double max_depth = 5.0) {
  Sequence seq;
  seq.name = "synthetic-" + std::to_string(scene.seed);
  seq.intrinsics = default_synthetic_intrinsics(width, height);
  seq.max_depth = max_depth;
  for (int i = 0; i < frames; ++i) {
    auto r = render_synthetic(scene, i, width, height, seq.intrinsics, max_depth);
    seq.frames.push_back({std::move(r.depth), static_cast<double>(i), i});
  }
  return seq;
}

// Scene files are versioned JSON.
inline constexpr int kSceneFileVersion = 1;

inline nlohmann::json scene_to_json(const SyntheticScene& s) {
  using nlohmann::json;
  auto vec = [](const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); };
  json j;
  j["version"] = kSceneFileVersion;
  j["seed"] = s.seed;
  j["boxes"] = json::array();
  for (const auto& b : s.boxes) {
    j["boxes"].push_back({{"center", vec(b.center)}, {"half_extents", vec(b.half_extents)}});
  }
  j["spheres"] = json::array();
  for (const auto& sp : s.spheres) {
    j["spheres"].push_back({{"center", vec(sp.center)}, {"radius", sp.radius}});
  }
  j["ground_plane"] = {{"enabled", s.ground.enabled},
                       {"height", s.ground.height},
                       {"half_extent", s.ground.half_extent}};
  j["trajectory"] = {{"target", vec(s.orbit.target)},   {"radius", s.orbit.radius},
                     {"height", s.orbit.height},        {"start_deg", s.orbit.start_deg},
                     {"step_deg", s.orbit.step_deg},    {"jitter_deg", s.orbit.jitter_deg},
                     {"jitter_radius", s.orbit.jitter_radius}};
  return j;
}

inline SyntheticScene scene_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kSceneFileVersion) throw FormatError("unsupported scene file version");
    auto vec = [](const nlohmann::json& a) {
      return Eigen::Vector3d(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>());
    };
    SyntheticScene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& b : j.at("boxes")) s.boxes.push_back({vec(b.at("center")), vec(b.at("half_extents"))});
    for (const auto& sp : j.at("spheres")) {
      s.spheres.push_back({vec(sp.at("center")), sp.at("radius").get<double>()});
    }
    const auto& g = j.at("ground_plane");
    s.ground = {g.at("enabled").get<bool>(), g.at("height").get<double>(),
                g.at("half_extent").get<double>()};
    const auto& t = j.at("trajectory");
    s.orbit.target = vec(t.at("target"));
    s.orbit.radius = t.at("radius").get<double>();
    s.orbit.height = t.at("height").get<double>();
    s.orbit.start_deg = t.at("start_deg").get<double>();
    s.orbit.step_deg = t.at("step_deg").get<double>();
    s.orbit.jitter_deg = t.at("jitter_deg").get<double>();
    s.orbit.jitter_radius = t.at("jitter_radius").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scene file: ") + e.what());
  }
}

inline SyntheticScene load_scene_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open scene file: " + path.string());
  try {
    return scene_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("scene file is not valid JSON: ") + e.what());
  }
}

inline void save_scene_file(const SyntheticScene& scene, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write scene file: " + path.string());
  out << scene_to_json(scene).dump(2) << '\n';
}

}  // namespace viewsynth
