// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <unistd.h>

#include <cstdlib>
#include <sstream>
#include <string>

#include "moekd/pipeline.hpp"

namespace moekd {
namespace {

nlohmann::json tiny_spec() {
  return {{"groups",
           {{{"name", "CWE-707"}, {"signals", {"memcpy_unchecked", "strcpy_raw"}}, {"vulnerable", 40}},
            {{"name", "CWE-399"}, {"signals", {"free_twice", "alloc_leak"}}, {"vulnerable", 40}}}},
          {"noise", {"buf", "len", "ptr", "idx", "tmp", "size"}},
          {"projects", 2},
          {"loc", {6, 10}},
          {"signals_per_sample", {2, 3}}};
}

nlohmann::json tiny_config() {
  const nlohmann::json quick = {{"epochs", 3}, {"learning_rate", 1.0}};
  return {{"seed", 7},
          {"workdir", "work"},
          {"synthetic", {{"spec", "spec.json"}}},
          {"min_count", 10},
          {"k", 2},
          {"teacher", {{"input_dim", 64}}},
          {"train",
           {{"experts", quick},
            {"single_teacher", quick},
            {"router", {{"epochs", 3}, {"learning_rate", 1.0}, {"loss", {{"kind", "focal"}, {"gamma", 2.0}}}}},
            {"student", {{"epochs", 3}, {"learning_rate", 1.0}, {"loss", {{"kind", "kd"}, {"temperature", 2.0}}}}}}},
          {"students", {{{"name", "a"}, {"input_dim", 16}}, {{"name", "b"}, {"input_dim", 32}}}},
          {"attacks", {{{"kind", "wir_random"}, {"candidates", 3}}, {{"kind", "mhm"}, {"candidates", 3}, {"max_iterations", 5}}}},
          {"vocab_fallback", 20}};
}

/// A scratch directory holding spec.json and pipeline.json.
class PipelineDir : public ::testing::Test {
 protected:
  void SetUp() override {
    unsetenv("MOEKD_WORKDIR");
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() /
           ("moekd-" + std::string(info->name()) + "-" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_file(dir_ / "spec.json", tiny_spec().dump());
    write_config(tiny_config());
  }
  void TearDown() override { fs::remove_all(dir_); }

  void write_config(const nlohmann::json& j) { write_file(dir_ / "pipeline.json", j.dump(2)); }
  PipelineConfig config() const { return load_pipeline_config(dir_ / "pipeline.json"); }
  fs::path work() const { return dir_ / "work"; }
  std::string manifest() const { return read_file(work() / "manifest.json"); }

  fs::path dir_;
};

TEST(Sha256, PublishedVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_F(PipelineDir, ConfigResolvesPathsAgainstItsDirectory) {
  const auto c = config();
  EXPECT_EQ(c.workdir, (dir_ / "work").lexically_normal());
  EXPECT_EQ(*c.synthetic_spec, (dir_ / "spec.json").lexically_normal());
  EXPECT_EQ(c.primary_student, "a");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_TRUE(std::holds_alternative<FocalLossSpec>(c.router.loss));
}

TEST_F(PipelineDir, WorkdirEnvironmentOverride) {
  setenv("MOEKD_WORKDIR", (dir_ / "elsewhere").c_str(), 1);
  const auto c = config();
  unsetenv("MOEKD_WORKDIR");
  EXPECT_EQ(c.workdir, dir_ / "elsewhere");
}

TEST_F(PipelineDir, ConfigErrors) {
  auto j = tiny_config();
  j.erase("seed");
  write_config(j);
  EXPECT_THROW(config(), FormatError);

  j = tiny_config();
  j["corpus"] = "raw.jsonl";
  write_config(j);
  EXPECT_THROW(config(), FormatError);

  j = tiny_config();
  j["primary_student"] = "zzz";
  write_config(j);
  EXPECT_THROW(config(), FormatError);

  j = tiny_config();
  j["students"][1]["name"] = "a";
  write_config(j);
  EXPECT_THROW(config(), FormatError);

  j = tiny_config();
  j["train"]["student"]["loss"] = {{"kind", "bce"}};
  write_config(j);
  EXPECT_THROW(config(), FormatError);

  j = tiny_config();
  j["teacher"]["input_dim"] = 100;
  write_config(j);
  EXPECT_THROW(config(), InvalidArgument);
}

TEST_F(PipelineDir, RunProducesEveryArtifactAndRecordsIt) {
  run_pipeline(config());
  for (const char* f : {layout::kRaw, layout::kBalanced, layout::kSplits, layout::kGrouping, layout::kRouter,
                        layout::kSingleTeacher, layout::kSoftMoe, layout::kSoftSingle, layout::kEvalMetrics,
                        layout::kAttackMetrics, layout::kReportMd, layout::kReportJson}) {
    EXPECT_TRUE(fs::exists(work() / f)) << f;
  }
  // Every file in the workdir is some stage's recorded output, with its hash.
  const auto m = Manifest::from_json(nlohmann::json::parse(manifest()));
  std::map<std::string, std::string> recorded;
  for (const auto& [stage, rec] : m.stages) recorded.insert(rec.outputs.begin(), rec.outputs.end());
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(work())) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    ++files;
    const auto key = fs::relative(e.path(), work()).generic_string();
    ASSERT_TRUE(recorded.contains(key)) << key;
    EXPECT_EQ(recorded[key], sha256_hex(read_file(e.path()))) << key;
  }
  EXPECT_EQ(files, recorded.size());
  EXPECT_EQ(m.stages.size(), kStages.size());
  EXPECT_TRUE(m.stages.at("gen-data").inputs.contains("external/spec.json"));
}

TEST_F(PipelineDir, SecondRunSkipsEverything) {
  run_pipeline(config());
  const auto first = manifest();
  std::ostringstream log;
  run_pipeline(config(), 0, &log);
  EXPECT_EQ(manifest(), first);
  std::size_t skipped = 0;
  std::istringstream lines(log.str());
  for (std::string line; std::getline(lines, line);) skipped += line.find("up to date") != std::string::npos;
  EXPECT_EQ(skipped, kStages.size()) << log.str();
}

TEST_F(PipelineDir, SeparateWorkdirsGiveIdenticalManifests) {
  run_pipeline(config());
  const auto first = manifest();
  auto j = tiny_config();
  j["workdir"] = "work2";
  write_config(j);
  run_pipeline(config());
  EXPECT_EQ(read_file(dir_ / "work2" / "manifest.json"), first);
}

TEST_F(PipelineDir, CorruptedOutputIsRefused) {
  run_pipeline(config());
  {
    std::ofstream out(work() / layout::kSoftMoe, std::ios::app);
    out << "tampered\n";
  }
  try {
    run_pipeline(config());
    FAIL() << "expected a refusal";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "fuse");
    EXPECT_NE(std::string(e.what()).find("soft/moe.jsonl"), std::string::npos);
  }
}

TEST_F(PipelineDir, ConsumerRefusesInputThatDiffersFromProducerRecord) {
  run_pipeline(config());
  write_file(work() / layout::kSplits, "{}\n");
  Workspace ws(config(), 0, nullptr);
  EXPECT_THROW(stage_train_router(ws), IntegrityError);
}

TEST_F(PipelineDir, DeletedOutputIsRebuiltIdentically) {
  run_pipeline(config());
  const auto first = manifest();
  const auto before = read_file(work() / layout::kRouter);
  fs::remove(work() / layout::kRouter);
  std::ostringstream log;
  run_pipeline(config(), 0, &log);
  EXPECT_EQ(read_file(work() / layout::kRouter), before);
  EXPECT_EQ(manifest(), first);
  EXPECT_NE(log.str().find("[train-router] done"), std::string::npos);
  EXPECT_NE(log.str().find("[fuse] up to date"), std::string::npos);
}

TEST_F(PipelineDir, ParameterChangeRerunsDownstreamOnly) {
  run_pipeline(config());
  auto j = tiny_config();
  j["k"] = 1;
  write_config(j);
  std::ostringstream log;
  run_pipeline(config(), 0, &log);
  EXPECT_NE(log.str().find("[train-router] up to date"), std::string::npos);
  EXPECT_NE(log.str().find("[fuse] done"), std::string::npos);
  EXPECT_NE(log.str().find("[distill] done"), std::string::npos);
}

TEST_F(PipelineDir, StageSeedOffsetChangesSeededStages) {
  run_pipeline(config());
  const auto first = Manifest::from_json(nlohmann::json::parse(manifest()));
  Workspace ws(config(), 5, nullptr);
  stage_train_router(ws);
  const auto second = Manifest::from_json(nlohmann::json::parse(manifest()));
  EXPECT_EQ(second.stages.at("train-router").seed, 12u);
  EXPECT_NE(second.stages.at("train-router").outputs, first.stages.at("train-router").outputs);
  EXPECT_EQ(second.stages.at("prepare").outputs, first.stages.at("prepare").outputs);
}

TEST_F(PipelineDir, StageOutOfOrderNamesTheMissingProducer) {
  Workspace ws(config(), 0, nullptr);
  try {
    run_named_stage(ws, "fuse");
    FAIL();
  } catch (const StageError& e) {
    EXPECT_NE(std::string(e.what()).find("stage fuse failed"), std::string::npos);
  }
}

TEST_F(PipelineDir, ReportOnEmptyWorkdirListsMissingArtifacts) {
  Workspace ws(config(), 0, nullptr);
  try {
    stage_report(ws);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("metrics/eval.json (stage eval)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("metrics/attacks.json (stage attack)"), std::string::npos) << msg;
  }
}

TEST_F(PipelineDir, ReportIsAFunctionOfMetricBytes) {
  run_pipeline(config());
  const auto md = read_file(work() / layout::kReportMd);
  const auto js = read_file(work() / layout::kReportJson);
  fs::remove(work() / layout::kReportMd);
  fs::remove(work() / layout::kReportJson);
  Workspace ws(config(), 0, nullptr);
  stage_report(ws);
  EXPECT_EQ(read_file(work() / layout::kReportMd), md);
  EXPECT_EQ(read_file(work() / layout::kReportJson), js);
  EXPECT_NE(md.find("| method | model | accuracy |"), std::string::npos);
  EXPECT_NE(md.find("| method | size (params) | D | H | accuracy |"), std::string::npos);
}

TEST(Report, TablesAndStatistics) {
  nlohmann::ordered_json eval = {
      {"experts", {{{"group", "g"}, {"in_subspace_accuracy", 1.0}, {"subspace_size", 3}}}},
      {"router", {{"heldout_top1", 0.5}, {"heldout_size", 2}}},
      {"teachers", {{"moe", 0.75}, {"single", 0.5}}},
      {"students", nlohmann::ordered_json::array()}};
  for (int i = 0; i < 5; ++i) {
    eval["students"].push_back({{"name", "s" + std::to_string(i)}, {"input_dim", 16}, {"hidden", 0},
                                {"param_count", 34},
                                {"moe", {{"test_accuracy", 0.9 - 0.01 * i}, {"teacher_agreement", 1.0}}},
                                {"single", {{"test_accuracy", 0.5}, {"teacher_agreement", 1.0}}}});
  }
  nlohmann::ordered_json attacks = {{"runs",
                                     {{{"attack", "mhm"}, {"student", "s0"}, {"method", "moe"}, {"attacked", 0},
                                       {"flipped", 0}, {"skipped", 4}, {"asr", nullptr}}}}};
  const auto [md, js] = render_report(eval, attacks, 2);
  EXPECT_NE(md.find("| MoE teacher (k=2) | router + experts | 0.7500 |"), std::string::npos) << md;
  EXPECT_NE(md.find("| mhm | s0 | moe | 0 | 0 | n/a |"), std::string::npos) << md;
  ASSERT_EQ(js["stats"].size(), 2u);
  EXPECT_TRUE(js["stats"][0]["wilcoxon"].contains("error"));  // no ASR pairs
  EXPECT_DOUBLE_EQ(js["stats"][1]["wilcoxon"]["p_value"].get<double>(), 0.0625);
  EXPECT_DOUBLE_EQ(js["stats"][1]["cliffs_delta"].get<double>(), 1.0);
  EXPECT_EQ(js["rq3"].size(), 10u);
}

// ---------------------------------------------------------------------------
// Command line

int cli(const std::string& args) {
  const std::string cmd = std::string(MOEKD_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST_F(PipelineDir, CliExitCodes) {
  const auto cfg = (dir_ / "pipeline.json").string();
  EXPECT_EQ(cli(""), 1);
  EXPECT_EQ(cli("frobnicate"), 1);
  EXPECT_EQ(cli("prepare"), 1);  // --config is required
  EXPECT_EQ(cli("prepare --config " + (dir_ / "absent.json").string()), 1);
  EXPECT_EQ(cli("report --config " + cfg), 2);
  EXPECT_EQ(cli("fuse --config " + cfg), 2);
  EXPECT_EQ(cli("stats --x 1,2,3,4,5 --y 0,0,0,0,0"), 0);
  EXPECT_EQ(cli("stats --x 1,2 --y 0"), 1);
  EXPECT_EQ(cli("--help"), 0);

  write_file(dir_ / "bad.json", "{not json");
  EXPECT_EQ(cli("run --config " + (dir_ / "bad.json").string()), 1);
}

TEST_F(PipelineDir, CliRunsStagesOneByOne) {
  const auto cfg = " --config " + (dir_ / "pipeline.json").string();
  for (const auto stage : kStages) ASSERT_EQ(cli(std::string(stage) + cfg), 0) << stage;
  const auto by_stage = manifest();
  fs::remove_all(work());
  run_pipeline(config());
  EXPECT_EQ(manifest(), by_stage);
  EXPECT_EQ(cli("run" + cfg + " --stage-seed-offset 0"), 0);
  EXPECT_EQ(manifest(), by_stage);
}

}  // namespace
}  // namespace moekd
