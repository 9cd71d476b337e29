#pragma once

// Run configuration, stored as versioned JSON. Every field has a default, so
// a config file only needs the keys it changes.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "viewsynth/errors.hpp"
#include "viewsynth/geometry.hpp"
#include "viewsynth/optim.hpp"
#include "viewsynth/pnp.hpp"

namespace viewsynth {

inline constexpr int kConfigVersion = 1;

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | tum | 7scenes

  // Synthetic scenes: training and evaluation use disjoint scene seeds.
  std::vector<std::uint64_t> train_seeds{1, 2, 3, 4, 5, 6};
  std::vector<std::uint64_t> test_seeds{1001, 1002};
  std::string scene_dir;  // optional directory of <seed>.json scene files
  int frames = 120;
  int width = 64;
  int height = 64;

  // Recorded sequences. The repository is built from reference sequences and
  // queried with test sequences.
  std::vector<std::string> train_paths;
  std::vector<std::string> reference_paths;
  std::vector<std::string> test_paths;
  bool override_intrinsics = false;
  Intrinsics intrinsics;
  double depth_scale = 0.0;  // 0 = dataset default
  double max_depth = 0.0;    // 0 = default (5 m synthetic, 10 m recorded)

  int pair_stride = 1;
};

struct ModelConfig {
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t feature_dim = 64;
  std::vector<double> scales{0.5, 1.0, 2.0};
  std::size_t top_k = 50;
  std::size_t max_pixels = 1'000'000;
};

struct LossConfig {
  double tau = 4.0;      // exclusion radius, feature cells
  double margin = 1.5;
  double alpha = 10.0;
  double occlusion_eps = 0.05;  // meters
  std::size_t max_correspondences = 512;
  bool use_vsm = true;
  bool symmetric_vsm = true;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t checkpoint_every = 500;
  std::size_t accumulate = 1;  // pairs per optimizer step
  AdamConfig adam;
  std::size_t skip_window = 20;  // abort when more than half of this many recent pairs skip
};

struct EvalConfig {
  std::vector<double> mma_thresholds{0.1, 0.25, 0.5};
  std::vector<PoseThreshold> pose_thresholds = default_pose_thresholds();
  RansacConfig ransac;
  bool self_match = false;  // query with the reference images themselves
};

struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  int offset = 10;
  DatasetConfig data;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;
  std::string checkpoint_path = "viewsynth.ckpt";
  std::string log_path = "train_log.jsonl";
  std::string report_path = "report.json";

  void validate() const {
    if (version != kConfigVersion) throw ConfigError("unsupported config version");
    if (offset < 1) throw ConfigError("offset must be positive");
    if (data.kind != "synthetic" && data.kind != "tum" && data.kind != "7scenes") {
      throw ConfigError("dataset kind must be synthetic, tum or 7scenes");
    }
    if (data.kind == "synthetic" && (data.width < 16 || data.height < 16 || data.frames < 2)) {
      throw ConfigError("synthetic images must be at least 16x16 with 2 or more frames");
    }
    if (data.kind != "synthetic") {
      for (const auto* list : {&data.train_paths, &data.reference_paths, &data.test_paths}) {
        for (const auto& p : *list) {
          if (!std::filesystem::exists(p)) throw ConfigError("path does not exist: " + p);
        }
      }
    }
    if (!data.scene_dir.empty() && !std::filesystem::is_directory(data.scene_dir)) {
      throw ConfigError("scene_dir is not a directory: " + data.scene_dir);
    }
    if (data.pair_stride < 1) throw ConfigError("pair_stride must be positive");
    if (model.scales.empty()) throw ConfigError("at least one extraction scale is required");
    if (model.top_k < 1) throw ConfigError("top_k must be at least 1");
    if (loss.tau < 0.0 || !(loss.margin > 0.0) || loss.alpha < 0.0) {
      throw ConfigError("need tau >= 0, margin > 0, alpha >= 0");
    }
    if (train.accumulate < 1) throw ConfigError("accumulate must be at least 1");
  }
};

// ------------------------------------------------------------ JSON mapping

inline void to_json(nlohmann::json& j, const Intrinsics& k) {
  j = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
}
inline void from_json(const nlohmann::json& j, Intrinsics& k) {
  k.fx = j.value("fx", k.fx);
  k.fy = j.value("fy", k.fy);
  k.cx = j.value("cx", k.cx);
  k.cy = j.value("cy", k.cy);
}

inline void to_json(nlohmann::json& j, const PoseThreshold& t) {
  j = {{"position_m", t.position_m}, {"orientation_deg", t.orientation_deg}};
}
inline void from_json(const nlohmann::json& j, PoseThreshold& t) {
  t.position_m = j.at("position_m").get<double>();
  t.orientation_deg = j.at("orientation_deg").get<double>();
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  using nlohmann::json;
  json j;
  j["version"] = c.version;
  j["seed"] = c.seed;
  j["offset"] = c.offset;
  j["data"] = {{"kind", c.data.kind},
               {"train_seeds", c.data.train_seeds},
               {"test_seeds", c.data.test_seeds},
               {"scene_dir", c.data.scene_dir},
               {"frames", c.data.frames},
               {"width", c.data.width},
               {"height", c.data.height},
               {"train_paths", c.data.train_paths},
               {"reference_paths", c.data.reference_paths},
               {"test_paths", c.data.test_paths},
               {"override_intrinsics", c.data.override_intrinsics},
               {"intrinsics", c.data.intrinsics},
               {"depth_scale", c.data.depth_scale},
               {"max_depth", c.data.max_depth},
               {"pair_stride", c.data.pair_stride}};
  j["model"] = {{"stage_channels", c.model.stage_channels},
                {"feature_dim", c.model.feature_dim},
                {"scales", c.model.scales},
                {"top_k", c.model.top_k},
                {"max_pixels", c.model.max_pixels}};
  j["loss"] = {{"tau", c.loss.tau},
               {"margin", c.loss.margin},
               {"alpha", c.loss.alpha},
               {"occlusion_eps", c.loss.occlusion_eps},
               {"max_correspondences", c.loss.max_correspondences},
               {"use_vsm", c.loss.use_vsm},
               {"symmetric_vsm", c.loss.symmetric_vsm}};
  j["train"] = {{"steps", c.train.steps},
                {"checkpoint_every", c.train.checkpoint_every},
                {"accumulate", c.train.accumulate},
                {"learning_rate", c.train.adam.learning_rate},
                {"beta1", c.train.adam.beta1},
                {"beta2", c.train.adam.beta2},
                {"epsilon", c.train.adam.epsilon},
                {"skip_window", c.train.skip_window}};
  j["eval"] = {{"mma_thresholds", c.eval.mma_thresholds},
               {"pose_thresholds", c.eval.pose_thresholds},
               {"ransac_iterations", c.eval.ransac.iterations},
               {"ransac_threshold_px", c.eval.ransac.reprojection_threshold_px},
               {"ransac_seed", c.eval.ransac.seed},
               {"self_match", c.eval.self_match}};
  j["checkpoint_path"] = c.checkpoint_path;
  j["log_path"] = c.log_path;
  j["report_path"] = c.report_path;
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.version = j.value("version", c.version);
    c.seed = j.value("seed", c.seed);
    c.offset = j.value("offset", c.offset);
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.data.kind = d.value("kind", c.data.kind);
      c.data.train_seeds = d.value("train_seeds", c.data.train_seeds);
      c.data.test_seeds = d.value("test_seeds", c.data.test_seeds);
      c.data.scene_dir = d.value("scene_dir", c.data.scene_dir);
      c.data.frames = d.value("frames", c.data.frames);
      c.data.width = d.value("width", c.data.width);
      c.data.height = d.value("height", c.data.height);
      c.data.train_paths = d.value("train_paths", c.data.train_paths);
      c.data.reference_paths = d.value("reference_paths", c.data.reference_paths);
      c.data.test_paths = d.value("test_paths", c.data.test_paths);
      c.data.override_intrinsics = d.value("override_intrinsics", c.data.override_intrinsics);
      c.data.intrinsics = d.value("intrinsics", c.data.intrinsics);
      c.data.depth_scale = d.value("depth_scale", c.data.depth_scale);
      c.data.max_depth = d.value("max_depth", c.data.max_depth);
      c.data.pair_stride = d.value("pair_stride", c.data.pair_stride);
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      c.model.stage_channels = m.value("stage_channels", c.model.stage_channels);
      c.model.feature_dim = m.value("feature_dim", c.model.feature_dim);
      c.model.scales = m.value("scales", c.model.scales);
      c.model.top_k = m.value("top_k", c.model.top_k);
      c.model.max_pixels = m.value("max_pixels", c.model.max_pixels);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      c.loss.tau = l.value("tau", c.loss.tau);
      c.loss.margin = l.value("margin", c.loss.margin);
      c.loss.alpha = l.value("alpha", c.loss.alpha);
      c.loss.occlusion_eps = l.value("occlusion_eps", c.loss.occlusion_eps);
      c.loss.max_correspondences = l.value("max_correspondences", c.loss.max_correspondences);
      c.loss.use_vsm = l.value("use_vsm", c.loss.use_vsm);
      c.loss.symmetric_vsm = l.value("symmetric_vsm", c.loss.symmetric_vsm);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      c.train.steps = t.value("steps", c.train.steps);
      c.train.checkpoint_every = t.value("checkpoint_every", c.train.checkpoint_every);
      c.train.accumulate = t.value("accumulate", c.train.accumulate);
      c.train.adam.learning_rate = t.value("learning_rate", c.train.adam.learning_rate);
      c.train.adam.beta1 = t.value("beta1", c.train.adam.beta1);
      c.train.adam.beta2 = t.value("beta2", c.train.adam.beta2);
      c.train.adam.epsilon = t.value("epsilon", c.train.adam.epsilon);
      c.train.skip_window = t.value("skip_window", c.train.skip_window);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      c.eval.mma_thresholds = e.value("mma_thresholds", c.eval.mma_thresholds);
      c.eval.pose_thresholds = e.value("pose_thresholds", c.eval.pose_thresholds);
      c.eval.ransac.iterations = e.value("ransac_iterations", c.eval.ransac.iterations);
      c.eval.ransac.reprojection_threshold_px =
          e.value("ransac_threshold_px", c.eval.ransac.reprojection_threshold_px);
      c.eval.ransac.seed = e.value("ransac_seed", c.eval.ransac.seed);
      c.eval.self_match = e.value("self_match", c.eval.self_match);
    }
    c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
    c.log_path = j.value("log_path", c.log_path);
    c.report_path = j.value("report_path", c.report_path);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

inline void save_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config: " + path.string());
  out << config_to_json(c).dump(2) << '\n';
}

}  // namespace viewsynth
