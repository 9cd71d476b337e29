#include <algorithm>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "viewsynth/pipeline.hpp"

namespace viewsynth {
namespace {

using testing::TempDir;

RunConfig tiny_config() {
  RunConfig c;
  c.seed = 7;
  c.offset = 10;
  c.data.train_seeds = {1};
  c.data.test_seeds = {1001};
  c.data.frames = 24;
  c.data.width = 48;
  c.data.height = 48;
  c.model.stage_channels = {4, 6, 8};
  c.model.feature_dim = 8;
  c.model.scales = {1.0};
  c.model.top_k = 20;
  c.loss.occlusion_eps = 0.25;
  c.loss.max_correspondences = 64;
  c.train.steps = 3;
  c.train.checkpoint_every = 2;
  c.eval.ransac.iterations = 100;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<double> all_values(const ParameterSet& params) {
  std::vector<double> out;
  for (const auto& p : params) {
    const auto v = p.tensor.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

TEST(Train, AlphaZeroTotalEqualsContrastive) {
  RunConfig cfg = tiny_config();
  cfg.loss.alpha = 0.0;
  Model model(cfg);
  Trainer trainer(cfg, model, load_split(cfg, Split::Train));
  const TrainResult r = trainer.run();
  ASSERT_EQ(r.steps.size(), 3u);
  for (const auto& s : r.steps) {
    ASSERT_TRUE(s.l_v.has_value());
    EXPECT_GT(*s.l_v, 0.0);
    EXPECT_EQ(s.total, s.l_cm);
  }
}

TEST(Train, AlphaScalesSynthesisTerm) {
  RunConfig cfg = tiny_config();
  cfg.train.steps = 1;
  Model model(cfg);
  Trainer trainer(cfg, model, load_split(cfg, Split::Train));
  const TrainResult r = trainer.run();
  ASSERT_EQ(r.steps.size(), 1u);
  ASSERT_TRUE(r.steps[0].l_v.has_value());
  EXPECT_NEAR(r.steps[0].total, r.steps[0].l_cm + 10.0 * *r.steps[0].l_v, 1e-12);
}

TEST(Train, NoVsmLeavesSynthesisUnlogged) {
  RunConfig cfg = tiny_config();
  cfg.loss.use_vsm = false;
  cfg.train.steps = 2;
  Model model(cfg);
  Trainer trainer(cfg, model, load_split(cfg, Split::Train));
  for (const auto& s : trainer.run().steps) {
    EXPECT_FALSE(s.l_v.has_value());
    EXPECT_EQ(s.total, s.l_cm);
  }
}

TEST(Train, ZeroStepsCheckpointEqualsInit) {
  TempDir dir;
  RunConfig cfg = tiny_config();
  cfg.train.steps = 0;
  const TrainResult r = cmd_train(cfg, dir / "m.ckpt", dir / "log.jsonl");
  EXPECT_TRUE(r.steps.empty());
  RunConfig other = cfg;
  other.seed = 99;
  auto loaded = load_model(other, dir / "m.ckpt");
  const Model fresh(cfg);
  EXPECT_EQ(all_values(loaded->params()), all_values(fresh.params()));
  EXPECT_NE(all_values(Model(other).params()), all_values(fresh.params()));
}

TEST(Train, SameSeedGivesIdenticalLogs) {
  TempDir dir;
  const RunConfig cfg = tiny_config();
  cmd_train(cfg, dir / "a.ckpt", dir / "a.jsonl");
  cmd_train(cfg, dir / "b.ckpt", dir / "b.jsonl");
  const std::string log = slurp(dir / "a.jsonl");
  EXPECT_FALSE(log.empty());
  EXPECT_EQ(log, slurp(dir / "b.jsonl"));
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));

  // Each line is a step record with every loss component.
  std::istringstream lines(log);
  std::string line;
  std::size_t steps = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("event")) continue;
    ++steps;
    EXPECT_TRUE(j.contains("l_cm"));
    EXPECT_TRUE(j.contains("l_v"));
    EXPECT_TRUE(j.contains("total"));
  }
  EXPECT_EQ(steps, cfg.train.steps);
}

TEST(Train, TrainingChangesParameters) {
  TempDir dir;
  const RunConfig cfg = tiny_config();
  cmd_train(cfg, dir / "m.ckpt", dir / "log.jsonl");
  auto trained = load_model(cfg, dir / "m.ckpt");
  EXPECT_NE(all_values(trained->params()), all_values(Model(cfg).params()));
}

TEST(Train, AbortsWhenMostPairsSkip) {
  RunConfig cfg = tiny_config();
  cfg.train.skip_window = 6;
  SyntheticScene empty;
  empty.ground.enabled = false;
  std::vector<Sequence> seqs{synthetic_sequence(empty, 12, 48, 48)};
  Model model(cfg);
  Trainer trainer(cfg, model, std::move(seqs));
  std::ostringstream log;
  try {
    trainer.run(&log);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_NE(std::string(e.what()).find("6 of the last 6"), std::string::npos) << e.what();
  }
  // Every attempt was logged as a skip with its reason.
  std::istringstream lines(log.str());
  std::string line;
  int skips = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("event"), "skip");
    EXPECT_EQ(j.at("reason"), "no ground-truth correspondences");
    ++skips;
  }
  EXPECT_EQ(skips, 6);
}

TEST(Train, SequencesShorterThanOffsetAbort) {
  RunConfig cfg = tiny_config();
  cfg.offset = 30;
  Model model(cfg);
  Trainer trainer(cfg, model, load_split(cfg, Split::Train));
  EXPECT_TRUE(trainer.pairs().empty());
  EXPECT_THROW(trainer.run(), TrainingAborted);
}

TEST(Extract, EmptySetGivesEmptyManifest) {
  TempDir dir;
  const RunConfig cfg = tiny_config();
  const Model model(cfg);
  EXPECT_TRUE(cmd_extract(cfg, model, {}, dir / "out").empty());
  EXPECT_EQ(slurp(dir / "out" / "manifest.txt"), "");
}

TEST(Extract, RerunIsByteIdenticalAndBounded) {
  TempDir dir;
  RunConfig cfg = tiny_config();
  cfg.model.top_k = 5;
  cfg.model.scales = {0.5, 1.0, 1.5};
  const Model model(cfg);
  const auto seqs = load_split(cfg, Split::Test);
  std::vector<const DepthImage*> images;
  for (int i = 0; i < 4; ++i) images.push_back(&seqs[0].frames[static_cast<std::size_t>(5 * i)].depth);
  const auto counts = cmd_extract(cfg, model, images, dir / "a");
  cmd_extract(cfg, model, images, dir / "b");
  ASSERT_EQ(counts.size(), 4u);
  EXPECT_EQ(slurp(dir / "a" / "manifest.txt"), slurp(dir / "b" / "manifest.txt"));
  for (int i = 0; i < 4; ++i) {
    const std::string name = keypoint_file_name(i);
    EXPECT_EQ(slurp(dir / "a" / name), slurp(dir / "b" / name));
    EXPECT_LE(counts[static_cast<std::size_t>(i)], 5u);
    EXPECT_GT(counts[static_cast<std::size_t>(i)], 0u);
    const auto recs = read_keypoints(dir / "a" / name);
    EXPECT_EQ(recs.size(), counts[static_cast<std::size_t>(i)]);
    for (const auto& r : recs) EXPECT_EQ(r.image_id, i);
  }
}

TEST(Evaluate, EmptyTestSplitErrors) {
  TempDir dir;
  RunConfig cfg = tiny_config();
  cfg.data.test_seeds.clear();
  const Model model(cfg);
  EXPECT_THROW(cmd_evaluate(cfg, model, dir / "report"), EvaluationError);
}

TEST(Evaluate, ReportHasAllThresholdKeys) {
  TempDir dir;
  const RunConfig cfg = tiny_config();
  const Model model(cfg);
  const EvaluationReport rep = cmd_evaluate(cfg, model, dir / "report");
  const auto j = nlohmann::json::parse(slurp(dir / "report.json"));
  for (const char* k : {"0.1", "0.25", "0.5"}) {
    EXPECT_TRUE(j.at("mma").contains(k)) << k;
    EXPECT_TRUE(j.at("random_mma").contains(k)) << k;
  }
  for (const char* k : {"0.5m_2deg", "1m_5deg", "5m_10deg"}) {
    EXPECT_TRUE(j.at("localization").contains(k)) << k;
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "report.txt"));
  // 24 frames at offset 10: references 0, 10, 20 and queries 5, 15.
  EXPECT_EQ(rep.query_images, 2u);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_GE(rep.mma[t], 0.0);
    EXPECT_LE(rep.mma[t], 100.0);
  }
  EXPECT_LE(rep.mma[0], rep.mma[1]);
  EXPECT_LE(rep.mma[1], rep.mma[2]);
}

TEST(Evaluate, GroupsFollowOffset) {
  RunConfig cfg = tiny_config();
  const auto test = load_split(cfg, Split::Test);
  auto groups = evaluation_groups(cfg, {}, test);
  ASSERT_EQ(groups.size(), 1u);
  std::vector<int> refs, queries;
  for (const Frame* f : groups[0].references) refs.push_back(f->index);
  for (const Frame* f : groups[0].queries) queries.push_back(f->index);
  EXPECT_EQ(refs, (std::vector<int>{0, 10, 20}));
  EXPECT_EQ(queries, (std::vector<int>{5, 15}));
  cfg.eval.self_match = true;
  groups = evaluation_groups(cfg, {}, test);
  EXPECT_EQ(groups[0].queries, groups[0].references);
}

TEST(Evaluate, SelfMatchingIsAccurate) {
  RunConfig cfg = tiny_config();
  cfg.eval.self_match = true;
  cfg.model.top_k = 30;
  const Model model(cfg);
  const auto test = load_split(cfg, Split::Test);
  const EvaluationReport rep = evaluate(model, cfg, evaluation_groups(cfg, {}, test));
  EXPECT_GE(rep.mma[0], 95.0);
  EXPECT_GT(rep.mma[0], 3.0 * rep.random_mma[0]);
}

TEST(Synthesize, WritesImagesAndSummary) {
  TempDir dir;
  const RunConfig cfg = tiny_config();
  const Model model(cfg);
  const auto seqs = load_split(cfg, Split::Train);
  const auto ex = cmd_synthesize(model, seqs[0].frames[0].depth, seqs[0].frames[10].depth, dir / "s");
  for (const char* f : {"view1.png", "view2.png", "synthesized.png", "error.png", "synthesis.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / "s" / f)) << f;
  }
  const GrayImage synth = read_png_gray(dir / "s" / "synthesized.png");
  EXPECT_EQ(static_cast<std::size_t>(synth.width), ex.width);
  EXPECT_EQ(static_cast<std::size_t>(synth.height), ex.height);
  EXPECT_GT(ex.cells, 0u);
  for (std::size_t i = 0; i < ex.mask.size(); ++i) {
    if (!ex.mask[i]) {
      EXPECT_EQ(ex.error[i], 0.0);
    }
  }
}

TEST(Synthesize, IdenticalCamerasKeepShape) {
  const RunConfig cfg = tiny_config();
  const Model model(cfg);
  const auto seqs = load_split(cfg, Split::Train);
  const DepthImage& img = seqs[0].frames[3].depth;
  const auto ex = synthesize_pair(model, img, img);
  EXPECT_EQ(ex.width, 6u);
  EXPECT_EQ(ex.height, 6u);
  EXPECT_EQ(ex.synthesized.size(), ex.view2.size());
}

TEST(Synthesize, TrainedModelBeatsUntrained) {
  RunConfig cfg = tiny_config();
  cfg.data.frames = 12;
  cfg.train.steps = 60;
  Model model(cfg);
  const auto seqs = load_split(cfg, Split::Train);
  const DepthImage& a = seqs[0].frames[0].depth;
  const DepthImage& b = seqs[0].frames[10].depth;
  const double before = synthesize_pair(model, a, b).masked_mae;
  Trainer trainer(cfg, model, seqs);
  trainer.run();
  const double after = synthesize_pair(model, a, b).masked_mae;
  EXPECT_LT(after, before);
  EXPECT_LT(after, synthesize_pair(model, a, b).constant_mae);
}

}  // namespace
}  // namespace viewsynth
