#pragma once

// Delimited-text keypoint and repository files.
//
//   line 1: "viewsynth-keypoints,1"  or  "viewsynth-repository,1"
//   line 2: column header
//   then one record per keypoint:
//     image_id,x,y,score,wx,wy,wz,d0,...,d{f-1}
//
// x, y are full-resolution pixel coordinates (pixel (i, j) spans [i, i+1)).
// World fields are empty when a keypoint has no valid depth; repository files
// require them. Reals are written with 17 significant digits so files round
// trip exactly.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "viewsynth/featnet.hpp"
#include "viewsynth/matchloc.hpp"

namespace viewsynth {

inline constexpr int kKeypointFileVersion = 1;

struct KeypointRecord {
  int image_id = -1;
  Keypoint3D keypoint;
};

namespace detail {

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_records(std::ostream& os, const char* kind,
                          const std::vector<KeypointRecord>& records) {
  os << kind << ',' << kKeypointFileVersion << '\n';
  const std::size_t dim = records.empty() ? 0 : records.front().keypoint.descriptor.size();
  os << "image_id,x,y,score,wx,wy,wz";
  for (std::size_t i = 0; i < dim; ++i) os << ",d" << i;
  os << '\n';
  for (const auto& r : records) {
    const auto& kp = r.keypoint;
    if (kp.descriptor.size() != dim) throw FormatError("descriptor dimensionality varies");
    os << r.image_id << ',' << format_real(kp.position.x()) << ',' << format_real(kp.position.y())
       << ',' << format_real(kp.score);
    for (int a = 0; a < 3; ++a) {
      os << ',';
      if (kp.world) os << format_real((*kp.world)(a));
    }
    for (double d : kp.descriptor) os << ',' << format_real(d);
    os << '\n';
  }
}

inline std::vector<KeypointRecord> read_records(std::istream& is, const std::string& kind) {
  std::string line;
  if (!std::getline(is, line) || line != kind + "," + std::to_string(kKeypointFileVersion)) {
    throw FormatError("expected header '" + kind + "," + std::to_string(kKeypointFileVersion) + "'");
  }
  if (!std::getline(is, line) || line.rfind("image_id,x,y,score,wx,wy,wz", 0) != 0) {
    throw FormatError("missing column header");
  }
  std::vector<KeypointRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() < 7) throw FormatError("short keypoint record");
    auto num = [](const std::string& s) {
      try {
        return std::stod(s);
      } catch (const std::exception&) {
        throw FormatError("bad number '" + s + "' in keypoint file");
      }
    };
    KeypointRecord r;
    r.image_id = static_cast<int>(num(f[0]));
    r.keypoint.position = {num(f[1]), num(f[2])};
    r.keypoint.score = num(f[3]);
    const bool has_world = !f[4].empty() || !f[5].empty() || !f[6].empty();
    if (has_world) r.keypoint.world = Eigen::Vector3d(num(f[4]), num(f[5]), num(f[6]));
    for (std::size_t i = 7; i < f.size(); ++i) r.keypoint.descriptor.push_back(num(f[i]));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace detail

inline void write_keypoints(const std::filesystem::path& path, int image_id,
                            const std::vector<Keypoint3D>& keypoints) {
  std::vector<KeypointRecord> records;
  for (const auto& kp : keypoints) records.push_back({image_id, kp});
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  detail::write_records(os, "viewsynth-keypoints", records);
}

inline std::vector<KeypointRecord> read_keypoints(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  return detail::read_records(is, "viewsynth-keypoints");
}

inline void write_repository(const std::filesystem::path& path, const KeypointRepository& repo) {
  std::vector<KeypointRecord> records;
  for (const auto& e : repo.entries) {
    if (!e.keypoint.world) throw FormatError("repository entry without world coordinate");
    records.push_back({e.image_id, e.keypoint});
  }
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  detail::write_records(os, "viewsynth-repository", records);
}

inline KeypointRepository read_repository(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  KeypointRepository repo;
  for (auto& r : detail::read_records(is, "viewsynth-repository")) {
    if (!r.keypoint.world) throw FormatError("repository record without world coordinate");
    if (repo.descriptor_dim == 0) repo.descriptor_dim = r.keypoint.descriptor.size();
    repo.entries.push_back({std::move(r.keypoint), r.image_id});
  }
  return repo;
}

}  // namespace viewsynth
