// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

// moekd: command-line driver for the MoEKD pipeline.
//
// Exit codes: 0 success, 1 usage (bad flags or config), 2 stage failure.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moekd/pipeline.hpp"
#include "moekd/stats.hpp"

namespace {

constexpr int kUsage = 1;
constexpr int kStageFailure = 2;

struct CommonFlags {
  std::string config;
  std::uint64_t seed_offset = 0;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool config_required) {
  auto* opt = cmd->add_option("--config", flags.config, "pipeline config (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--stage-seed-offset", flags.seed_offset, "added to the config seed for this invocation");
}

int run_stats(const std::vector<double>& x, const std::vector<double>& y, const std::string& pairs_file) {
  std::vector<double> a = x, b = y;
  if (!pairs_file.empty()) {
    const auto j = nlohmann::json::parse(moekd::read_file(pairs_file));
    a = j.at("x").get<std::vector<double>>();
    b = j.at("y").get<std::vector<double>>();
  }
  if (a.size() != b.size() || a.empty()) {
    std::cerr << "stats needs paired vectors of equal, non-zero length\n";
    return kUsage;
  }
  nlohmann::ordered_json out{{"n_pairs", a.size()}};
  try {
    const auto w = moekd::wilcoxon_signed_rank(a, b);
    out["wilcoxon"] = {{"p_value", w.p_value}, {"w_plus", w.w_plus}, {"n", w.n}, {"exact", w.exact}};
  } catch (const moekd::InvalidArgument& e) {
    out["wilcoxon"] = {{"error", e.what()}};
  }
  const double d = moekd::cliffs_delta(a, b);
  out["cliffs_delta"] = d;
  out["effect"] = moekd::effect_size_label(d);
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoEKD: mixture-of-experts knowledge distillation for vulnerability detection"};
  app.require_subcommand(1);

  CommonFlags flags;
  const std::vector<std::string> stages = {"gen-data", "prepare", "train-experts", "train-router", "fuse",
                                           "distill",  "eval",    "attack",        "report",       "run"};
  for (const auto& name : stages) {
    const char* help = name == "run" ? "run every stage in order, skipping those already up to date"
                                     : "run one pipeline stage";
    add_common(app.add_subcommand(name, help), flags, true);
  }

  std::vector<double> xs, ys;
  std::string pairs_file;
  auto* stats = app.add_subcommand("stats", "Wilcoxon signed-rank and Cliff's delta on paired vectors");
  add_common(stats, flags, false);
  stats->add_option("--x", xs, "first vector")->delimiter(',');
  stats->add_option("--y", ys, "second vector (paired with --x)")->delimiter(',');
  stats->add_option("--pairs", pairs_file, "JSON file with arrays \"x\" and \"y\"")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();

  if (name == "stats") {
    try {
      return run_stats(xs, ys, pairs_file);
    } catch (const std::exception& e) {
      std::cerr << "stats: " << e.what() << '\n';
      return kUsage;
    }
  }

  moekd::PipelineConfig cfg;
  try {
    cfg = moekd::load_pipeline_config(flags.config);
  } catch (const std::exception& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (name == "run") {
      moekd::run_pipeline(cfg, flags.seed_offset, &std::cerr);
    } else {
      moekd::Workspace ws(cfg, flags.seed_offset, &std::cerr);
      moekd::run_named_stage(ws, name);
    }
  } catch (const moekd::StageError& e) {
    std::cerr << e.what() << '\n';
    return kStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "stage " << name << " failed: " << e.what() << '\n';
    return kStageFailure;
  }
  return 0;
}
