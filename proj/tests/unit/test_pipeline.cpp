/*
 * Copyright 2026 The xmodal Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <filesystem>

#include "xmodal/gradcheck.hpp"
#include "xmodal/pipeline.hpp"

namespace xmodal {
namespace {

namespace fs = std::filesystem;

RunConfig tiny_config() { return load_config(fs::path(XMODAL_TEST_DATA_DIR) / "tiny.ini"); }

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    base_ = fs::temp_directory_path() /
            ("xmodal_pipeline_" +
             std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(base_);
  }
  void TearDown() override { fs::remove_all(base_); }

  RunPaths run(const std::string& name) const { return RunPaths{base_ / name}; }

  static void full_run(const RunPaths& run, const RunConfig& requested) {
    const RunConfig cfg = open_run(run, requested, false);
    ensure_dataset(run, cfg, false);
    for (StrategyKind k : kAllStrategies) train_stage(run, cfg, k, false);
    eval_stage(run, cfg, cfg.eval_layer, cfg.protocol);
    units_stage(run, cfg, LayerId::kSharedIn, cfg.top_k);
  }

  fs::path base_;
};

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) {
      out[fs::relative(e.path(), root).string()] = detail::read_text(e.path());
    }
  }
  return out;
}

TEST_F(PipelineTest, IdenticalRunsProduceIdenticalArtifacts) {
  const RunConfig cfg = tiny_config();
  full_run(run("a"), cfg);
  full_run(run("b"), cfg);
  const auto a = tree_contents(run("a").root);
  const auto b = tree_contents(run("b").root);
  EXPECT_GT(a.size(), 20u);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) {
    ASSERT_TRUE(b.count(name)) << name;
    EXPECT_TRUE(bytes == b.at(name)) << name;
  }
}

TEST_F(PipelineTest, StagesSkipExistingOutputs) {
  const RunConfig cfg = tiny_config();
  const RunPaths r = run("a");
  open_run(r, cfg, false);
  bool created = false;
  ensure_dataset(r, cfg, false, &created);
  EXPECT_TRUE(created);
  ensure_dataset(r, cfg, false, &created);
  EXPECT_FALSE(created);
  EXPECT_FALSE(train_stage(r, cfg, StrategyKind::kCJoint, false).skipped);
  const auto stamp = fs::last_write_time(r.model(StrategyKind::kCJoint));
  EXPECT_TRUE(train_stage(r, cfg, StrategyKind::kCJoint, false).skipped);
  EXPECT_EQ(fs::last_write_time(r.model(StrategyKind::kCJoint)), stamp);
  EXPECT_TRUE(fs::exists(r.frozen_phase(StrategyKind::kCJoint)));
  EXPECT_TRUE(fs::exists(r.anchor()));
  EXPECT_TRUE(fs::exists(r.density(DensityKind::kGmm, LayerId::kFc7)));
}

TEST_F(PipelineTest, ConfigMismatchNeedsForce) {
  RunConfig cfg = tiny_config();
  const RunPaths r = run("a");
  open_run(r, cfg, false);
  ensure_dataset(r, cfg, false);
  train_stage(r, cfg, StrategyKind::kBlIndividual, false);
  cfg.seed = 99;
  EXPECT_THROW(open_run(r, cfg, false), ConfigError);
  EXPECT_TRUE(fs::exists(r.model(StrategyKind::kBlIndividual)));
  open_run(r, cfg, true);
  EXPECT_FALSE(fs::exists(r.dataset()));
  EXPECT_FALSE(fs::exists(r.model(StrategyKind::kBlIndividual)));
  EXPECT_EQ(load_config(r.config()).seed, 99u);
}

TEST_F(PipelineTest, StoredConfigIsUsedWithoutRequest) {
  RunConfig cfg = tiny_config();
  cfg.seed = 7;
  const RunPaths r = run("a");
  open_run(r, cfg, false);
  EXPECT_EQ(open_run(r, std::nullopt, false, false).seed, 7u);
  EXPECT_THROW(open_run(run("missing"), std::nullopt, false, false), MissingArtifactError);
  EXPECT_FALSE(fs::exists(run("missing").root));
}

TEST_F(PipelineTest, DatasetMustMatchConfig) {
  RunConfig cfg = tiny_config();
  const RunPaths r = run("a");
  open_run(r, cfg, false);
  ensure_dataset(r, cfg, false);
  cfg.seed = 5;
  EXPECT_THROW(load_dataset(r, cfg), ConfigError);
}

TEST_F(PipelineTest, MissingArtifactsReported) {
  const RunConfig cfg = tiny_config();
  const RunPaths r = run("a");
  open_run(r, cfg, false);
  EXPECT_THROW(train_stage(r, cfg, StrategyKind::kCJoint, false), MissingArtifactError);
  ensure_dataset(r, cfg, false);
  EXPECT_THROW(eval_stage(r, cfg, LayerId::kFc7, cfg.protocol), MissingArtifactError);
  EXPECT_THROW(load_model(r, StrategyKind::kATuneFrozen), MissingArtifactError);
}

TEST_F(PipelineTest, ZeroShotNeedsHoldout) {
  RunConfig cfg = tiny_config();
  const RunPaths r = run("a");
  open_run(r, cfg, false);
  ensure_dataset(r, cfg, false);
  train_stage(r, cfg, StrategyKind::kBlSharedScratch, false);
  EXPECT_THROW(zeroshot_stage(r, cfg), NoHoldoutError);

  cfg.holdout_frac = 0.5;
  const RunPaths h = run("h");
  open_run(h, cfg, false);
  const CrossModalDataset ds = ensure_dataset(h, cfg, false);
  EXPECT_EQ(ds.holdout_classes.size(), 2u);
  train_stage(h, cfg, StrategyKind::kBlSharedScratch, false);
  EXPECT_EQ(zeroshot_stage(h, cfg).rows.size(), 1u);
  train_stage(h, cfg, StrategyKind::kBGauss, false);
  const auto res = zeroshot_stage(h, cfg);
  ASSERT_EQ(res.rows.size(), 3u);
  EXPECT_EQ(res.rows.front().label, "Anchor + untrained encoders");
  EXPECT_TRUE(fs::exists(h.reports() / "zeroshot.json"));
}

TEST_F(PipelineTest, ExportWritesOneFilePerStrategy) {
  const RunConfig cfg = tiny_config();
  const RunPaths r = run("a");
  open_run(r, cfg, false);
  ensure_dataset(r, cfg, false);
  train_stage(r, cfg, StrategyKind::kBlIndividual, false);
  train_stage(r, cfg, StrategyKind::kBGauss, false);
  const auto files = export_stage(r, cfg, LayerId::kFc7);
  EXPECT_EQ(files.size(), 2u);
  for (const auto& f : files) EXPECT_TRUE(fs::exists(f));
}

TEST_F(PipelineTest, CompareAggregatesRuns) {
  RunConfig cfg = tiny_config();
  std::vector<fs::path> roots;
  for (std::uint64_t s : {1, 2}) {
    cfg.seed = s;
    const RunPaths r = run("s" + std::to_string(s));
    open_run(r, cfg, false);
    ensure_dataset(r, cfg, false);
    train_stage(r, cfg, StrategyKind::kCJoint, false);
    eval_stage(r, cfg, LayerId::kFc7, cfg.protocol);
    roots.push_back(r.root);
  }
  Json j;
  const std::string table = compare_runs(roots, LayerId::kFc7, &j);
  ASSERT_EQ(j["retrieval"].size(), 1u);
  const std::string label = j["retrieval"].begin().key();
  EXPECT_NE(table.find(label), std::string::npos);
  EXPECT_EQ(j["runs"].get<std::size_t>(), 2u);
}

TEST(Aggregate, MeanAndSampleStd) {
  const Aggregate a = aggregate({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(a.mean, 2.0);
  EXPECT_DOUBLE_EQ(a.stddev, 1.0);
}

TEST(Gradcheck, SuitePasses) {
  const GradcheckReport r = run_gradcheck({});
  EXPECT_TRUE(r.passed()) << r.format();
  EXPECT_EQ(r.cases.size(), 50u);
}

TEST(Gradcheck, DetectsCorruptedGradient) {
  GradcheckOptions opt;
  opt.num_seeds = 2;
  opt.corrupt = [](std::vector<LayerGrad>& g) {
    double& w = g.front().weight.data().front();
    w *= 1.0 + 1e-4;
    w += 1e-9;
  };
  EXPECT_FALSE(run_gradcheck(opt).passed());
}

}  // namespace
}  // namespace xmodal
