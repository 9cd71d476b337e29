#pragma once

// End-to-end commands: training, keypoint extraction, evaluation,
// localization and view-synthesis export. Everything here is driven by a
// RunConfig and is deterministic for a fixed seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "viewsynth/checkpoint.hpp"
#include "viewsynth/config.hpp"
#include "viewsynth/data.hpp"
#include "viewsynth/featnet.hpp"
#include "viewsynth/image_io.hpp"
#include "viewsynth/keypoint_io.hpp"
#include "viewsynth/losses.hpp"
#include "viewsynth/matchloc.hpp"
#include "viewsynth/pnp.hpp"
#include "viewsynth/vsm.hpp"

namespace viewsynth {

/// Independent generator seed for one purpose of a run.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    stream, 0x5eedu};
  std::mt19937_64 rng(seq);
  return rng();
}

// ------------------------------------------------------------------ model

/// Feature network plus view synthesis module over one parameter set. The
/// VSM is always built so checkpoints have one layout with or without it.
class Model {
 public:
  explicit Model(const RunConfig& cfg)
      : rng_(derive_seed(cfg.seed, 0)),
        net_(params_, FeatureNetConfig{cfg.model.stage_channels, cfg.model.feature_dim}, rng_),
        vsm_(params_, cfg.model.feature_dim, rng_) {}

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const FeatureNet& net() const { return net_; }
  const ViewSynthesisModule& vsm() const { return vsm_; }

 private:
  ParameterSet params_;
  std::mt19937_64 rng_;
  FeatureNet net_;
  ViewSynthesisModule vsm_;
};

inline std::unique_ptr<Model> load_model(const RunConfig& cfg,
                                         const std::optional<std::filesystem::path>& checkpoint) {
  auto model = std::make_unique<Model>(cfg);
  if (checkpoint) load_checkpoint(model->params(), *checkpoint);
  return model;
}

// ---------------------------------------------------------------- datasets

enum class Split { Train, Reference, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Reference: return "reference";
    case Split::Test: return "test";
  }
  return "?";
}

inline LoaderOptions loader_options(const RunConfig& cfg) {
  LoaderOptions opt = cfg.data.kind == "tum" ? tum_defaults() : seven_scenes_defaults();
  if (cfg.data.override_intrinsics) opt.intrinsics = cfg.data.intrinsics;
  if (cfg.data.depth_scale > 0.0) opt.depth_scale = cfg.data.depth_scale;
  if (cfg.data.max_depth > 0.0) opt.max_depth = cfg.data.max_depth;
  return opt;
}

inline SyntheticScene synthetic_scene_for(const RunConfig& cfg, std::uint64_t seed) {
  if (!cfg.data.scene_dir.empty()) {
    const auto path = std::filesystem::path(cfg.data.scene_dir) / (std::to_string(seed) + ".json");
    if (std::filesystem::exists(path)) return load_scene_file(path);
  }
  return SyntheticScene::generate(seed);
}

/// Sequences of one split. Synthetic reference and test splits are the same
/// held-out scenes; frames are divided between them by index.
inline std::vector<Sequence> load_split(const RunConfig& cfg, Split split) {
  std::vector<Sequence> out;
  if (cfg.data.kind == "synthetic") {
    const auto& seeds = split == Split::Train ? cfg.data.train_seeds : cfg.data.test_seeds;
    const double max_depth = cfg.data.max_depth > 0.0 ? cfg.data.max_depth : 5.0;
    for (auto seed : seeds) {
      out.push_back(synthetic_sequence(synthetic_scene_for(cfg, seed), cfg.data.frames,
                                       cfg.data.width, cfg.data.height, max_depth));
    }
    return out;
  }
  const auto& paths = split == Split::Train       ? cfg.data.train_paths
                      : split == Split::Reference ? cfg.data.reference_paths
                                                  : cfg.data.test_paths;
  const LoaderOptions opt = loader_options(cfg);
  for (const auto& p : paths) {
    out.push_back(cfg.data.kind == "tum" ? load_tum_sequence(p, opt) : load_7scenes_sequence(p, opt));
  }
  return out;
}

// ------------------------------------------------------------ pair losses

struct PairLosses {
  std::optional<Tensor> l_cm;
  std::optional<Tensor> l_v;
  std::size_t correspondences = 0;
  std::string skip_reason;  // set when l_cm is absent
};

inline Tensor features_of(const Model& model, const DepthImage& img) {
  return extract_features(normalize_depth(img), img.width, img.height, model.net()).features;
}

/// Masked synthesis loss for view `to` from the features of view `from`.
inline std::optional<Tensor> synthesis_loss(const Model& model, const Tensor& features_from,
                                            const DepthImage& coarse_from,
                                            const DepthImage& coarse_to) {
  auto synth = model.vsm().synthesize_view(features_from, coarse_from, coarse_to);
  if (!synth) return std::nullopt;
  return view_synthesis_loss(synth->synthesized, normalize_depth(coarse_to), synth->grid.valid);
}

/// Forward pass for one training pair. Correspondences beyond the configured
/// cap are subsampled with `rng`.
inline PairLosses pair_losses(const Model& model, const RunConfig& cfg, const DepthImage& img1,
                              const DepthImage& img2, std::mt19937_64& rng) {
  PairLosses out;
  const DepthImage coarse1 = downsample_depth(img1, FeatureNet::kDownsample);
  const DepthImage coarse2 = downsample_depth(img2, FeatureNet::kDownsample);
  auto pairs = ground_truth_correspondences(coarse1, coarse2, cfg.loss.occlusion_eps);
  if (pairs.size() > cfg.loss.max_correspondences) {
    std::shuffle(pairs.begin(), pairs.end(), rng);
    pairs.resize(cfg.loss.max_correspondences);
  }
  out.correspondences = pairs.size();
  if (pairs.empty()) {
    out.skip_reason = "no ground-truth correspondences";
    return out;
  }

  const FeatureMap fm1{features_of(model, img1)};
  const FeatureMap fm2{features_of(model, img2)};
  CorrespondenceBatch batch{describe(fm1).descriptors, describe(fm2).descriptors,
                            soft_scores(fm1).scores,   soft_scores(fm2).scores,
                            std::move(pairs),          cfg.loss.tau,
                            cfg.loss.margin};
  out.l_cm = contrastive_matching_loss(batch);
  if (!out.l_cm) {
    out.skip_reason = "no eligible negatives";
    return out;
  }

  if (cfg.loss.use_vsm) {
    auto forward = synthesis_loss(model, fm1.features, coarse1, coarse2);
    std::optional<Tensor> backward;
    if (cfg.loss.symmetric_vsm) backward = synthesis_loss(model, fm2.features, coarse2, coarse1);
    if (forward && backward) {
      out.l_v = scale(add(*forward, *backward), 0.5);
    } else if (forward) {
      out.l_v = forward;
    } else if (backward) {
      out.l_v = backward;
    }
  }
  return out;
}

// ---------------------------------------------------------------- training

struct StepRecord {
  std::size_t step = 0;
  double l_cm = 0.0;
  std::optional<double> l_v;
  double total = 0.0;
  std::size_t correspondences = 0;
};

inline nlohmann::json step_to_json(const StepRecord& r) {
  nlohmann::json j = {{"step", r.step},
                      {"l_cm", r.l_cm},
                      {"total", r.total},
                      {"correspondences", r.correspondences}};
  j["l_v"] = r.l_v ? nlohmann::json(*r.l_v) : nlohmann::json(nullptr);
  return j;
}

struct TrainResult {
  std::vector<StepRecord> steps;
  std::size_t skipped = 0;
};

/// Training loop: one pair per forward pass, `accumulate` pairs per Adam
/// step. Skipped pairs are logged and do not count as steps; training aborts
/// when more than half of the last `skip_window` attempts were skipped.
class Trainer {
 public:
  Trainer(const RunConfig& cfg, Model& model, std::vector<Sequence> sequences)
      : cfg_(cfg), model_(model), sequences_(std::move(sequences)),
        pair_rng_(derive_seed(cfg.seed, 1)), sample_rng_(derive_seed(cfg.seed, 2)) {
    for (std::size_t s = 0; s < sequences_.size(); ++s) {
      auto p = sample_pairs(sequences_[s], cfg.offset, cfg.data.pair_stride, static_cast<int>(s));
      pairs_.insert(pairs_.end(), p.begin(), p.end());
    }
  }

  const std::vector<PairSpec>& pairs() const { return pairs_; }

  /// `log` receives one JSON object per line; `on_step` runs after every
  /// optimizer step with the number of completed steps.
  TrainResult run(std::ostream* log = nullptr,
                  const std::function<void(std::size_t)>& on_step = {}) {
    TrainResult result;
    if (cfg_.train.steps == 0) return result;
    if (pairs_.empty()) {
      throw TrainingAborted("no training pairs: sequences shorter than the frame offset");
    }
    std::deque<bool> recent;
    std::size_t attempts = 0;
    model_.params().zero_grad();
    for (std::size_t step = 1; step <= cfg_.train.steps; ++step) {
      StepRecord rec;
      rec.step = step;
      std::size_t done = 0, with_lv = 0;
      double lv_sum = 0.0;
      while (done < cfg_.train.accumulate) {
        const PairSpec& ps = pairs_[pair_rng_() % pairs_.size()];
        const auto& seq = sequences_[static_cast<std::size_t>(ps.sequence)];
        const auto& img1 = seq.frames[static_cast<std::size_t>(ps.first)].depth;
        const auto& img2 = seq.frames[static_cast<std::size_t>(ps.first + ps.offset)].depth;
        ++attempts;
        PairLosses pl = pair_losses(model_, cfg_, img1, img2, sample_rng_);
        const bool skipped = !pl.l_cm.has_value();
        recent.push_back(skipped);
        if (recent.size() > cfg_.train.skip_window) recent.pop_front();
        if (skipped) {
          ++result.skipped;
          if (log) {
            *log << nlohmann::json{{"event", "skip"},
                                   {"sequence", seq.name},
                                   {"first", ps.first},
                                   {"offset", ps.offset},
                                   {"reason", pl.skip_reason}}
                        .dump()
                 << '\n';
          }
          const auto n_skip = static_cast<std::size_t>(std::count(recent.begin(), recent.end(), true));
          if (recent.size() == cfg_.train.skip_window && 2 * n_skip > recent.size()) {
            std::ostringstream msg;
            msg << "aborting: " << n_skip << " of the last " << recent.size()
                << " pairs were skipped (" << result.skipped << " skips in " << attempts
                << " attempts; last: " << seq.name << " frame " << ps.first << ", "
                << pl.skip_reason << ")";
            throw TrainingAborted(msg.str());
          }
          continue;
        }
        Tensor total = *pl.l_cm;
        rec.l_cm += pl.l_cm->item();
        if (pl.l_v) {
          total = total_loss(*pl.l_cm, *pl.l_v, cfg_.loss.alpha);
          lv_sum += pl.l_v->item();
          ++with_lv;
        }
        rec.total += total.item();
        rec.correspondences += pl.correspondences;
        scale(total, 1.0 / static_cast<double>(cfg_.train.accumulate)).backward();
        ++done;
      }
      adam_step(model_.params(), cfg_.train.adam);
      model_.params().zero_grad();
      const double n = static_cast<double>(done);
      rec.l_cm /= n;
      rec.total /= n;
      if (with_lv > 0) rec.l_v = lv_sum / static_cast<double>(with_lv);
      if (log) *log << step_to_json(rec).dump() << '\n';
      result.steps.push_back(rec);
      if (on_step) on_step(step);
    }
    return result;
  }

 private:
  const RunConfig& cfg_;
  Model& model_;
  std::vector<Sequence> sequences_;
  std::vector<PairSpec> pairs_;
  std::mt19937_64 pair_rng_;
  std::mt19937_64 sample_rng_;
};

/// Trains from the seeded initialization, writing the JSON-lines log and a
/// checkpoint every `checkpoint_every` steps and at the end.
inline TrainResult cmd_train(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                             const std::filesystem::path& log_path) {
  cfg.validate();
  Model model(cfg);
  Trainer trainer(cfg, model, load_split(cfg, Split::Train));
  std::ofstream log(log_path);
  if (!log) throw ConfigError("cannot write training log: " + log_path.string());
  TrainResult r = trainer.run(&log, [&](std::size_t step) {
    if (cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0) {
      save_checkpoint(model.params(), checkpoint);
    }
  });
  save_checkpoint(model.params(), checkpoint);
  return r;
}

// -------------------------------------------------------------- extraction

inline MultiscaleConfig multiscale_config(const RunConfig& cfg) {
  MultiscaleConfig m;
  m.scales = cfg.model.scales;
  m.top_k = cfg.model.top_k;
  m.max_pixels = cfg.model.max_pixels;
  return m;
}

/// Keypoints of one image, lifted to world coordinates where depth is valid.
inline std::vector<Keypoint3D> extract_keypoints(const Model& model, const RunConfig& cfg,
                                                 const DepthImage& image) {
  auto kps = extract_multiscale(image, model.net(), multiscale_config(cfg));
  lift_keypoints(kps, image);
  return kps;
}

inline std::string keypoint_file_name(int image_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "image_%06d.csv", image_id);
  return buf;
}

/// Writes one keypoint file per image plus `manifest.txt` with lines
/// "<image_id>\t<file>\t<count>". Returns the per-image keypoint counts.
inline std::vector<std::size_t> cmd_extract(const RunConfig& cfg, const Model& model,
                                            const std::vector<const DepthImage*>& images,
                                            const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream manifest(out_dir / "manifest.txt");
  if (!manifest) throw FormatError("cannot write manifest in " + out_dir.string());
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int id = static_cast<int>(i);
    const auto kps = extract_keypoints(model, cfg, *images[i]);
    const std::string name = keypoint_file_name(id);
    write_keypoints(out_dir / name, id, kps);
    manifest << id << '\t' << name << '\t' << kps.size() << '\n';
    counts.push_back(kps.size());
  }
  return counts;
}

// -------------------------------------------------------------- evaluation

/// Reference frames that form one repository and the query frames matched
/// against it. Frames of one group share a world frame.
struct EvalGroup {
  std::string name;
  std::vector<const Frame*> references;
  std::vector<const Frame*> queries;
};

/// Synthetic: one group per held-out scene, references every `offset`-th
/// frame and queries halfway between them. Recorded: one group, references
/// every `offset`-th frame of the reference sequences, queries every
/// `offset`-th frame of the test sequences. With self_match the queries are
/// the reference frames.
inline std::vector<EvalGroup> evaluation_groups(const RunConfig& cfg,
                                                const std::vector<Sequence>& reference,
                                                const std::vector<Sequence>& test) {
  const int offset = cfg.offset;
  std::vector<EvalGroup> groups;
  if (cfg.data.kind == "synthetic") {
    for (const auto& seq : test) {
      EvalGroup g{seq.name, {}, {}};
      for (const auto& f : seq.frames) {
        if (f.index % offset == 0) g.references.push_back(&f);
        else if (f.index % offset == offset / 2) g.queries.push_back(&f);
      }
      if (cfg.eval.self_match) g.queries = g.references;
      groups.push_back(std::move(g));
    }
    return groups;
  }
  EvalGroup g{"recorded", {}, {}};
  for (const auto& seq : reference) {
    for (const auto& f : seq.frames) {
      if (f.index % offset == 0) g.references.push_back(&f);
    }
  }
  if (cfg.eval.self_match) {
    g.queries = g.references;
  } else {
    for (const auto& seq : test) {
      for (const auto& f : seq.frames) {
        if (f.index % offset == 0) g.queries.push_back(&f);
      }
    }
  }
  groups.push_back(std::move(g));
  return groups;
}

struct QueryResult {
  std::string group;
  int frame = 0;
  std::size_t keypoints = 0;
  std::vector<double> correct_fraction;  // per MMA threshold, empty if not evaluable
  std::vector<double> random_fraction;
  std::optional<PoseEstimate> pose;
  std::optional<PoseError> error;
};

struct EvaluationReport {
  std::vector<double> mma_thresholds;
  std::vector<double> mma;
  std::vector<double> random_mma;
  std::vector<PoseThreshold> pose_thresholds;
  std::vector<double> localization;
  std::size_t query_images = 0;
  std::size_t evaluable_images = 0;
  std::size_t repository_entries = 0;
  std::vector<QueryResult> queries;
};

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string threshold_key(double t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", t);
  return buf;
}

inline std::string pose_key(const PoseThreshold& t) {
  return threshold_key(t.position_m) + "m_" + threshold_key(t.orientation_deg) + "deg";
}

inline EvaluationReport evaluate(const Model& model, const RunConfig& cfg,
                                 const std::vector<EvalGroup>& groups) {
  EvaluationReport rep;
  rep.mma_thresholds = cfg.eval.mma_thresholds;
  rep.pose_thresholds = cfg.eval.pose_thresholds;
  const std::size_t nt = rep.mma_thresholds.size();
  std::vector<double> mma_sum(nt, 0.0), rnd_sum(nt, 0.0);
  std::vector<std::optional<PoseError>> errors;
  std::uint64_t query_counter = 0;

  for (const auto& g : groups) {
    if (g.queries.empty()) continue;
    std::vector<RepositoryImage> ref_images;
    for (const Frame* f : g.references) {
      ref_images.push_back({&f->depth, extract_keypoints(model, cfg, f->depth), f->index});
    }
    const KeypointRepository repo = build_repository(ref_images, cfg.model.top_k);
    if (repo.empty()) throw EmptyRepositoryError("no reference keypoint with valid depth in " + g.name);
    rep.repository_entries += repo.size();

    for (const Frame* f : g.queries) {
      QueryResult q;
      q.group = g.name;
      q.frame = f->index;
      ImageMatches im;
      im.queries = extract_keypoints(model, cfg, f->depth);
      im.matches = match_keypoints(im.queries, repo);
      q.keypoints = im.queries.size();
      ++rep.query_images;

      const bool evaluable = std::any_of(im.queries.begin(), im.queries.end(),
                                         [](const Keypoint3D& k) { return k.world.has_value(); });
      if (evaluable) {
        ++rep.evaluable_images;
        const std::vector<ImageMatches> one{im};
        for (std::size_t t = 0; t < nt; ++t) {
          q.correct_fraction.push_back(mean_matching_accuracy(one, repo, rep.mma_thresholds[t]));
          q.random_fraction.push_back(random_assignment_mma(one, repo, rep.mma_thresholds[t]));
          mma_sum[t] += q.correct_fraction.back();
          rnd_sum[t] += q.random_fraction.back();
        }
      }

      std::vector<PnPCorrespondence> corr;
      for (const auto& m : im.matches) {
        corr.push_back({*repo.entries[m.entry].keypoint.world, im.queries[m.query].position});
      }
      RansacConfig rc = cfg.eval.ransac;
      rc.seed = derive_seed(cfg.eval.ransac.seed, static_cast<std::uint32_t>(query_counter++));
      try {
        q.pose = ransac_pnp(corr, f->depth.camera.intrinsics, rc);
        q.error = pose_error(*q.pose, f->depth.camera);
      } catch (const InsufficientPointsError&) {
      } catch (const DegenerateConfigurationError&) {
      } catch (const LocalizationFailure&) {
      }
      errors.push_back(q.error);
      rep.queries.push_back(std::move(q));
    }
  }
  if (rep.query_images == 0) throw EvaluationError("test split has no query images");
  if (rep.evaluable_images == 0) throw EvaluationError("no query image has a keypoint with valid depth");
  for (std::size_t t = 0; t < nt; ++t) {
    rep.mma.push_back(mma_sum[t] / static_cast<double>(rep.evaluable_images));
    rep.random_mma.push_back(rnd_sum[t] / static_cast<double>(rep.evaluable_images));
  }
  rep.localization = localization_accuracy(errors, rep.pose_thresholds);
  return rep;
}

inline nlohmann::json report_to_json(const EvaluationReport& rep) {
  using nlohmann::json;
  json j;
  json mma = json::object(), rnd = json::object(), loc = json::object();
  for (std::size_t t = 0; t < rep.mma_thresholds.size(); ++t) {
    mma[threshold_key(rep.mma_thresholds[t])] = rep.mma[t];
    rnd[threshold_key(rep.mma_thresholds[t])] = rep.random_mma[t];
  }
  for (std::size_t t = 0; t < rep.pose_thresholds.size(); ++t) {
    loc[pose_key(rep.pose_thresholds[t])] = rep.localization[t];
  }
  j["mma"] = mma;
  j["random_mma"] = rnd;
  j["localization"] = loc;
  j["query_images"] = rep.query_images;
  j["evaluable_images"] = rep.evaluable_images;
  j["repository_entries"] = rep.repository_entries;
  json per = json::array();
  for (const auto& q : rep.queries) {
    json e = {{"group", q.group}, {"frame", q.frame}, {"keypoints", q.keypoints}};
    e["localized"] = q.error.has_value();
    if (q.error) {
      e["position_error_m"] = q.error->position_m;
      e["orientation_error_deg"] = q.error->orientation_deg;
    }
    per.push_back(std::move(e));
  }
  j["queries"] = per;
  return j;
}

inline std::string report_table(const EvaluationReport& rep) {
  std::ostringstream os;
  os << "query images: " << rep.query_images << " (" << rep.evaluable_images
     << " evaluable), repository entries: " << rep.repository_entries << "\n\n";
  os << "threshold   MMA (%)   random (%)\n";
  for (std::size_t t = 0; t < rep.mma_thresholds.size(); ++t) {
    char line[96];
    std::snprintf(line, sizeof(line), "%6.2f m   %7.2f   %10.3f\n", rep.mma_thresholds[t],
                  rep.mma[t], rep.random_mma[t]);
    os << line;
  }
  os << "\nthreshold          localized (%)\n";
  for (std::size_t t = 0; t < rep.pose_thresholds.size(); ++t) {
    char line[96];
    std::snprintf(line, sizeof(line), "%5.2f m, %5.1f deg   %8.2f\n",
                  rep.pose_thresholds[t].position_m, rep.pose_thresholds[t].orientation_deg,
                  rep.localization[t]);
    os << line;
  }
  return os.str();
}

/// Builds the repositories from the reference split, queries the test split
/// and writes `<out>.json` and `<out>.txt`.
inline EvaluationReport cmd_evaluate(const RunConfig& cfg, const Model& model,
                                     const std::filesystem::path& out) {
  cfg.validate();
  const auto test = load_split(cfg, Split::Test);
  const auto reference = cfg.data.kind == "synthetic" ? std::vector<Sequence>{}
                                                       : load_split(cfg, Split::Reference);
  const EvaluationReport rep = evaluate(model, cfg, evaluation_groups(cfg, reference, test));
  auto json_path = out;
  json_path.replace_extension(".json");
  auto txt_path = out;
  txt_path.replace_extension(".txt");
  std::ofstream(json_path) << report_to_json(rep).dump(2) << '\n';
  std::ofstream(txt_path) << report_table(rep);
  return rep;
}

/// Per-query pose estimates as JSON.
inline nlohmann::json localization_to_json(const EvaluationReport& rep) {
  using nlohmann::json;
  json arr = json::array();
  for (const auto& q : rep.queries) {
    json e = {{"group", q.group}, {"frame", q.frame}};
    if (q.pose) {
      json r = json::array();
      for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 3; ++k) r.push_back(q.pose->rotation(i, k));
      }
      e["rotation"] = r;
      e["translation"] = {q.pose->translation.x(), q.pose->translation.y(),
                          q.pose->translation.z()};
      e["inliers"] = q.pose->inlier_count;
      e["position_error_m"] = q.error->position_m;
      e["orientation_error_deg"] = q.error->orientation_deg;
    } else {
      e["rotation"] = nullptr;
    }
    arr.push_back(std::move(e));
  }
  json j;
  j["poses"] = arr;
  json loc = json::object();
  for (std::size_t t = 0; t < rep.pose_thresholds.size(); ++t) {
    loc[pose_key(rep.pose_thresholds[t])] = rep.localization[t];
  }
  j["localization"] = loc;
  return j;
}

inline EvaluationReport cmd_localize(const RunConfig& cfg, const Model& model,
                                     const std::filesystem::path& out) {
  cfg.validate();
  const auto test = load_split(cfg, Split::Test);
  const auto reference = cfg.data.kind == "synthetic" ? std::vector<Sequence>{}
                                                       : load_split(cfg, Split::Reference);
  const EvaluationReport rep = evaluate(model, cfg, evaluation_groups(cfg, reference, test));
  std::ofstream os(out);
  if (!os) throw FormatError("cannot write " + out.string());
  os << localization_to_json(rep).dump(2) << '\n';
  return rep;
}

// --------------------------------------------------------------- synthesis

struct SynthesisExport {
  std::size_t height = 0, width = 0;
  std::vector<double> view1;        // I'1, normalized coarse depth
  std::vector<double> view2;        // I'2
  std::vector<double> synthesized;  // synthesized view 2
  std::vector<double> error;        // |synthesized - I'2| on the frustum set, else 0
  std::vector<std::uint8_t> mask;
  std::size_t cells = 0;
  double masked_mae = 0.0;
  double constant_mae = 0.0;  // predicting the masked mean of I'2 everywhere
};

/// Synthesizes view 2 from view 1 without recording gradients.
inline SynthesisExport synthesize_pair(const Model& model, const DepthImage& img1,
                                       const DepthImage& img2) {
  NoGradGuard no_grad;
  const DepthImage coarse1 = downsample_depth(img1, FeatureNet::kDownsample);
  const DepthImage coarse2 = downsample_depth(img2, FeatureNet::kDownsample);
  const Tensor f1 = features_of(model, img1);
  auto synth = model.vsm().synthesize_view(f1, coarse1, coarse2);
  if (!synth) throw EvaluationError("no cell of view 2 maps into view 1");
  SynthesisExport ex;
  ex.height = synth->grid.height;
  ex.width = synth->grid.width;
  ex.view1 = normalize_depth(coarse1);
  ex.view2 = normalize_depth(coarse2);
  ex.mask = synth->grid.valid;
  const auto s = synth->synthesized.values();
  ex.synthesized.assign(s.begin(), s.end());
  ex.error.assign(ex.view2.size(), 0.0);
  double mean = 0.0;
  for (std::size_t i = 0; i < ex.mask.size(); ++i) {
    if (!ex.mask[i]) continue;
    ex.error[i] = std::abs(ex.synthesized[i] - ex.view2[i]);
    ex.masked_mae += ex.error[i];
    mean += ex.view2[i];
    ++ex.cells;
  }
  const double n = static_cast<double>(ex.cells);
  ex.masked_mae /= n;
  mean /= n;
  for (std::size_t i = 0; i < ex.mask.size(); ++i) {
    if (ex.mask[i]) ex.constant_mae += std::abs(mean - ex.view2[i]);
  }
  ex.constant_mae /= n;
  return ex;
}

inline GrayImage to_gray8(std::span<const double> v, std::size_t width, std::size_t height) {
  GrayImage img;
  img.width = static_cast<int>(width);
  img.height = static_cast<int>(height);
  img.bit_depth = 8;
  img.pixels.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(255.0 * std::clamp(v[i], 0.0, 1.0)));
  }
  return img;
}

/// Writes view1.png, view2.png, synthesized.png, error.png and
/// synthesis.json into `out_dir`.
inline SynthesisExport cmd_synthesize(const Model& model, const DepthImage& img1,
                                      const DepthImage& img2,
                                      const std::filesystem::path& out_dir) {
  SynthesisExport ex = synthesize_pair(model, img1, img2);
  std::filesystem::create_directories(out_dir);
  write_png_gray(out_dir / "view1.png", to_gray8(ex.view1, ex.width, ex.height));
  write_png_gray(out_dir / "view2.png", to_gray8(ex.view2, ex.width, ex.height));
  write_png_gray(out_dir / "synthesized.png", to_gray8(ex.synthesized, ex.width, ex.height));
  write_png_gray(out_dir / "error.png", to_gray8(ex.error, ex.width, ex.height));
  nlohmann::json j = {{"height", ex.height},
                      {"width", ex.width},
                      {"frustum_cells", ex.cells},
                      {"masked_mae", ex.masked_mae},
                      {"constant_mean_mae", ex.constant_mae}};
  std::ofstream(out_dir / "synthesis.json") << j.dump(2) << '\n';
  return ex;
}

}  // namespace viewsynth
