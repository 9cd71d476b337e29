// viewsynth command-line front end.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "viewsynth/viewsynth.hpp"

namespace fs = std::filesystem;
using namespace viewsynth;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string out;
  std::optional<int> offset;
  std::optional<double> alpha;
  bool no_vsm = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "global seed");
  cmd->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  cmd->add_option("--out", o.out, "output path");
  cmd->add_option("--offset", o.offset, "frame offset between paired images")
      ->check(CLI::IsMember({10, 30}));
  cmd->add_option("--alpha", o.alpha, "weight of the view synthesis loss");
  cmd->add_flag("--no-vsm", o.no_vsm, "train with the matching loss only");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.offset) cfg.offset = *o.offset;
  if (o.alpha) cfg.loss.alpha = *o.alpha;
  if (o.no_vsm) cfg.loss.use_vsm = false;
  if (!o.checkpoint.empty()) cfg.checkpoint_path = o.checkpoint;
  cfg.validate();
  return cfg;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "reference") return Split::Reference;
  return Split::Test;
}

std::unique_ptr<Model> trained_model(const RunConfig& cfg) {
  if (!fs::exists(cfg.checkpoint_path)) {
    throw ConfigError("checkpoint not found: " + cfg.checkpoint_path);
  }
  return load_model(cfg, fs::path(cfg.checkpoint_path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-image keypoints trained with a view synthesis objective"};
  std::string default_config_path;
  app.add_option("--write-default-config", default_config_path,
                 "write the default configuration and exit");

  CommonOptions train_o, extract_o, eval_o, loc_o, synth_o;

  auto* train = app.add_subcommand("train", "train the feature network");
  add_common(train, train_o);

  auto* extract = app.add_subcommand("extract", "write keypoint files for a set of images");
  add_common(extract, extract_o);
  std::string extract_split = "test";
  std::vector<std::string> extract_images;
  extract->add_option("--split", extract_split, "dataset split to extract")
      ->check(CLI::IsMember({"train", "reference", "test"}));
  extract->add_option("--images", extract_images, "16-bit depth PNGs instead of a split")
      ->check(CLI::ExistingFile);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "matching accuracy and localization report");
  add_common(evaluate_cmd, eval_o);
  bool self_match = false;
  evaluate_cmd->add_flag("--self-match", self_match, "query with the reference images");

  auto* localize = app.add_subcommand("localize", "estimate query camera poses");
  add_common(localize, loc_o);

  auto* synthesize = app.add_subcommand("synthesize", "export a synthesized depth view");
  add_common(synthesize, synth_o);
  std::string synth_split = "test";
  int synth_sequence = 0, synth_first = 0;
  synthesize->add_option("--split", synth_split, "dataset split")
      ->check(CLI::IsMember({"train", "reference", "test"}));
  synthesize->add_option("--sequence", synth_sequence, "sequence index within the split");
  synthesize->add_option("--first", synth_first, "index of the source frame");

  app.require_subcommand(0, 1);
  CLI11_PARSE(app, argc, argv);

  try {
    if (!default_config_path.empty()) {
      save_config(RunConfig{}, default_config_path);
      return 0;
    }
    if (*train) {
      const RunConfig cfg = resolve(train_o);
      const fs::path log = train_o.out.empty() ? fs::path(cfg.log_path) : fs::path(train_o.out);
      const TrainResult r = cmd_train(cfg, cfg.checkpoint_path, log);
      std::printf("trained %zu steps (%zu pairs skipped); checkpoint %s, log %s\n", r.steps.size(),
                  r.skipped, cfg.checkpoint_path.c_str(), log.string().c_str());
    } else if (*extract) {
      const RunConfig cfg = resolve(extract_o);
      const auto model = trained_model(cfg);
      const fs::path out = extract_o.out.empty() ? fs::path("keypoints") : fs::path(extract_o.out);
      std::vector<DepthImage> owned;
      std::vector<Sequence> seqs;
      std::vector<const DepthImage*> images;
      if (!extract_images.empty()) {
        const LoaderOptions opt = loader_options(cfg);
        for (const auto& p : extract_images) {
          const GrayImage raw = read_png_gray(p);
          CameraParams cam;
          cam.intrinsics = opt.intrinsics;
          owned.push_back(depth_from_raw(raw, opt, cam));
        }
        for (const auto& d : owned) images.push_back(&d);
      } else {
        seqs = load_split(cfg, parse_split(extract_split));
        for (const auto& s : seqs) {
          for (const auto& f : s.frames) images.push_back(&f.depth);
        }
      }
      const auto counts = cmd_extract(cfg, *model, images, out);
      std::printf("wrote %zu keypoint files to %s\n", counts.size(), out.string().c_str());
    } else if (*evaluate_cmd) {
      RunConfig cfg = resolve(eval_o);
      if (self_match) cfg.eval.self_match = true;
      const auto model = trained_model(cfg);
      const fs::path out = eval_o.out.empty() ? fs::path(cfg.report_path) : fs::path(eval_o.out);
      const EvaluationReport rep = cmd_evaluate(cfg, *model, out);
      std::cout << report_table(rep);
    } else if (*localize) {
      const RunConfig cfg = resolve(loc_o);
      const auto model = trained_model(cfg);
      const fs::path out = loc_o.out.empty() ? fs::path("poses.json") : fs::path(loc_o.out);
      const EvaluationReport rep = cmd_localize(cfg, *model, out);
      std::cout << report_table(rep);
    } else if (*synthesize) {
      const RunConfig cfg = resolve(synth_o);
      const auto model = trained_model(cfg);
      const auto seqs = load_split(cfg, parse_split(synth_split));
      if (synth_sequence < 0 || synth_sequence >= static_cast<int>(seqs.size())) {
        throw ConfigError("sequence index out of range");
      }
      const auto& seq = seqs[static_cast<std::size_t>(synth_sequence)];
      const int second = synth_first + cfg.offset;
      if (synth_first < 0 || second >= static_cast<int>(seq.size())) {
        throw ConfigError("frame pair out of range");
      }
      const fs::path out = synth_o.out.empty() ? fs::path("synthesis") : fs::path(synth_o.out);
      const SynthesisExport ex =
          cmd_synthesize(*model, seq.frames[static_cast<std::size_t>(synth_first)].depth,
                         seq.frames[static_cast<std::size_t>(second)].depth, out);
      std::printf("masked MAE %.4f (constant-mean predictor %.4f) over %zu cells\n", ex.masked_mae,
                  ex.constant_mae, ex.cells);
    } else {
      std::cerr << app.help();
      return 2;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
