// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "moekd/attacks.hpp"
#include "moekd/checkpoint.hpp"
#include "moekd/corpus.hpp"
#include "moekd/distill.hpp"
#include "moekd/error.hpp"
#include "moekd/features.hpp"
#include "moekd/moe.hpp"
#include "moekd/stats.hpp"
#include "moekd/synthetic.hpp"

namespace moekd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Files and hashing

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xF];
  }
  return out;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes through a sibling temporary so readers never see a partial file.
inline void write_file(const fs::path& path, std::string_view bytes) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  fs::path config_path;
  fs::path workdir;
  std::optional<fs::path> corpus;          // external raw corpus
  std::optional<fs::path> synthetic_spec;  // or generate one into the workdir
  std::uint64_t seed = 0;
  int min_count = 100;
  std::size_t k = 2;
  std::size_t teacher_dim = 1024;
  std::size_t teacher_hidden = 0;
  TrainConfig experts, router, single_teacher, student;
  std::vector<StudentSpec> students;
  std::string primary_student;
  std::vector<AttackConfig> attacks;
  std::size_t vocab_fallback = 1000;
  std::size_t threads = 1;
};

namespace detail {

inline TrainConfig train_block(const nlohmann::json& j, const char* key, LossSpec default_loss) {
  TrainConfig defaults;
  defaults.loss = std::move(default_loss);
  if (!j.contains(key)) return defaults;
  auto c = train_config_from_json(j[key], defaults);
  c.validate();
  return c;
}

}  // namespace detail

/// Parses a pipeline config. Relative paths resolve against `base_dir`;
/// MOEKD_WORKDIR, when set, replaces the workdir.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  PipelineConfig c;
  const auto resolve = [&](const std::string& p) { return (base_dir / p).lexically_normal(); };
  if (!j.contains("seed") || !j["seed"].is_number_unsigned()) {
    throw FormatError("config needs an explicit non-negative integer 'seed'");
  }
  c.seed = j["seed"].get<std::uint64_t>();
  c.workdir = resolve(j.value("workdir", std::string("moekd-work")));
  if (const char* env = std::getenv("MOEKD_WORKDIR"); env && *env) c.workdir = fs::path(env);
  if (j.contains("corpus")) c.corpus = resolve(j["corpus"].get<std::string>());
  if (j.contains("synthetic")) c.synthetic_spec = resolve(j["synthetic"].at("spec").get<std::string>());
  if (c.corpus.has_value() == c.synthetic_spec.has_value()) {
    throw FormatError("config needs exactly one of 'corpus' and 'synthetic'");
  }
  c.min_count = j.value("min_count", c.min_count);
  c.k = j.value("k", c.k);
  if (j.contains("teacher")) {
    c.teacher_dim = j["teacher"].value("input_dim", c.teacher_dim);
    c.teacher_hidden = j["teacher"].value("hidden", c.teacher_hidden);
  }
  check_feature_dim(c.teacher_dim);
  const auto& t = j.contains("train") ? j["train"] : nlohmann::json::object();
  c.experts = detail::train_block(t, "experts", CrossEntropyLoss{});
  c.router = detail::train_block(t, "router", FocalLossSpec{});
  c.single_teacher = detail::train_block(t, "single_teacher", CrossEntropyLoss{});
  c.student = detail::train_block(t, "student", DistillLossSpec{});
  if (!std::holds_alternative<DistillLossSpec>(c.student.loss)) throw FormatError("student training needs a kd loss");
  if (std::holds_alternative<DistillLossSpec>(c.experts.loss) || std::holds_alternative<DistillLossSpec>(c.router.loss) ||
      std::holds_alternative<DistillLossSpec>(c.single_teacher.loss)) {
    throw FormatError("teachers and router train on labels, not kd");
  }
  for (const auto& s : j.at("students")) c.students.push_back(student_spec_from_json(s));
  if (c.students.empty()) throw FormatError("config lists no students");
  std::set<std::string> names;
  for (const auto& s : c.students) {
    if (!is_identifier(s.name) || !names.insert(s.name).second) {
      throw FormatError("student name '" + s.name + "' must be a unique identifier");
    }
  }
  c.primary_student = j.value("primary_student", c.students.front().name);
  if (!names.contains(c.primary_student)) throw FormatError("primary_student '" + c.primary_student + "' is not listed");
  if (j.contains("attacks")) {
    for (const auto& a : j["attacks"]) c.attacks.push_back(attack_config_from_json(a));
  }
  c.vocab_fallback = j.value("vocab_fallback", c.vocab_fallback);
  c.threads = std::max<std::size_t>(1, j.value("threads", c.threads));
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  try {
    auto c = pipeline_config_from_json(j, fs::absolute(path).parent_path());
    c.config_path = path;
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Manifest

inline constexpr std::array<std::string_view, 9> kStages = {
    "gen-data", "prepare", "train-experts", "train-router", "fuse", "distill", "eval", "attack", "report"};

struct StageRecord {
  std::string params;  // sha256 of the stage parameters
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // artifact key -> sha256
  std::map<std::string, std::string> outputs;  // artifact key -> sha256
};

/// Content hashes of every artifact each stage read and wrote. Keys are
/// workdir-relative paths; files outside the workdir appear as
/// "external/<file name>".
struct Manifest {
  std::map<std::string, StageRecord> stages;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json out{{"version", 1}};
    nlohmann::ordered_json st = nlohmann::ordered_json::object();
    for (const auto name : kStages) {
      const auto it = stages.find(std::string(name));
      if (it == stages.end()) continue;
      const auto& r = it->second;
      st[std::string(name)] = {{"params", r.params}, {"seed", r.seed}, {"inputs", r.inputs}, {"outputs", r.outputs}};
    }
    out["stages"] = st;
    return out;
  }

  static Manifest from_json(const nlohmann::json& j) {
    Manifest m;
    for (const auto& [name, r] : j.at("stages").items()) {
      m.stages[name] = {r.at("params").get<std::string>(), r.at("seed").get<std::uint64_t>(),
                        r.at("inputs").get<std::map<std::string, std::string>>(),
                        r.at("outputs").get<std::map<std::string, std::string>>()};
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// Workspace

namespace layout {
inline constexpr const char* kRaw = "corpus/raw.jsonl";
inline constexpr const char* kBalanced = "corpus/balanced.jsonl";
inline constexpr const char* kSplits = "corpus/splits.json";
inline constexpr const char* kGrouping = "corpus/grouping.json";
inline constexpr const char* kPrepareMetrics = "metrics/prepare.json";
inline constexpr const char* kSingleTeacher = "checkpoints/single_teacher.ckpt";
inline constexpr const char* kExpertMetrics = "metrics/train_experts.json";
inline constexpr const char* kRouter = "checkpoints/router.ckpt";
inline constexpr const char* kRouterMetrics = "metrics/train_router.json";
inline constexpr const char* kSoftMoe = "soft/moe.jsonl";
inline constexpr const char* kSoftSingle = "soft/single_teacher.jsonl";
inline constexpr const char* kDistillMetrics = "metrics/distill.json";
inline constexpr const char* kEvalMetrics = "metrics/eval.json";
inline constexpr const char* kAttackMetrics = "metrics/attacks.json";
inline constexpr const char* kReportMd = "report/report.md";
inline constexpr const char* kReportJson = "report/report.json";
inline constexpr const char* kManifest = "manifest.json";

inline std::string sanitize(std::string_view name) {
  std::string out;
  for (const char c : name) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}
inline std::string expert(std::size_t index, std::string_view group) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02zu", index);
  return "checkpoints/expert_" + std::string(buf) + "_" + sanitize(group) + ".ckpt";
}
inline std::string student(std::string_view name, std::string_view method) {
  return "checkpoints/student_" + std::string(name) + "_" + std::string(method) + ".ckpt";
}
inline std::string attack(std::string_view kind, std::string_view name, std::string_view method) {
  return "attacks/" + std::string(kind) + "__" + std::string(name) + "__" + std::string(method);
}
}  // namespace layout

inline constexpr std::array<std::string_view, 2> kMethods = {"moe", "single"};

/// Everything the prepare stage produces, reloaded from disk.
struct PreparedData {
  Corpus corpus;
  Splits splits;
  CweGrouping grouping;
  std::vector<CodeSample> expert_train, distill_train, valid, test;
};

class Workspace {
 public:
  Workspace(PipelineConfig cfg, std::uint64_t seed_offset, std::ostream* log)
      : cfg_(std::move(cfg)), seed_(cfg_.seed + seed_offset), log_(log) {
    fs::create_directories(cfg_.workdir);
    const auto mpath = cfg_.workdir / layout::kManifest;
    if (fs::exists(mpath)) {
      try {
        manifest_ = Manifest::from_json(nlohmann::json::parse(read_file(mpath)));
      } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("manifest.json is unreadable: ") + e.what());
      }
    }
  }

  const PipelineConfig& config() const noexcept { return cfg_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const Manifest& manifest() const noexcept { return manifest_; }
  fs::path path(std::string_view key) const {
    if (key.starts_with("external/")) {
      for (const auto* p : {&cfg_.corpus, &cfg_.synthetic_spec}) {
        if (*p && "external/" + (*p)->filename().string() == key) return **p;
      }
      throw InvalidArgument("unknown external artifact " + std::string(key));
    }
    return cfg_.workdir / key;
  }
  std::string raw_corpus_key() const {
    return cfg_.corpus ? "external/" + cfg_.corpus->filename().string() : layout::kRaw;
  }
  void log(const std::string& line) const {
    if (log_) *log_ << line << '\n';
  }

  /// Runs `body` unless the manifest shows the stage up to date. Recorded
  /// outputs whose bytes changed on disk abort with IntegrityError.
  void run_stage(const std::string& name, const nlohmann::ordered_json& params,
                 const std::vector<std::string>& inputs,
                 const std::function<void(std::map<std::string, std::string>&)>& body) {
    const auto params_hash = sha256_hex(params.dump());
    for (const auto& key : inputs) {
      if (!fs::exists(path(key))) {
        throw Error("missing input " + key + (producer(key).empty() ? "" : " (run stage " + producer(key) + " first)"));
      }
    }
    std::map<std::string, std::string> input_hashes;
    for (const auto& key : inputs) {
      input_hashes[key] = sha256_hex(read_file(path(key)));
      verify_against_producer(key, input_hashes[key], name);
    }
    if (const auto it = manifest_.stages.find(name); it != manifest_.stages.end()) {
      bool complete = true;
      for (const auto& [key, hash] : it->second.outputs) {
        if (!fs::exists(path(key))) {
          complete = false;
          continue;
        }
        if (sha256_hex(read_file(path(key))) != hash) {
          throw IntegrityError("refusing to resume: " + key + " does not match its manifest hash (stage " + name +
                               "); delete it or the workdir to rebuild");
        }
      }
      if (complete && it->second.params == params_hash && it->second.inputs == input_hashes) {
        log("[" + name + "] up to date, skipped");
        return;
      }
    }
    std::map<std::string, std::string> outputs;
    body(outputs);
    manifest_.stages[name] = {params_hash, seed_, std::move(input_hashes), std::move(outputs)};
    write_file(cfg_.workdir / layout::kManifest, manifest_.to_json().dump(2) + "\n");
    log("[" + name + "] done");
  }

  /// Writes an artifact and records its hash in `outputs`.
  void emit(std::map<std::string, std::string>& outputs, const std::string& key, std::string_view bytes) const {
    write_file(path(key), bytes);
    outputs[key] = sha256_hex(bytes);
  }

  PreparedData load_prepared() const {
    PreparedData d;
    d.corpus = load_corpus(path(layout::kBalanced));
    d.splits = splits_from_json(nlohmann::json::parse(read_file(path(layout::kSplits))));
    d.grouping = grouping_from_json(nlohmann::json::parse(read_file(path(layout::kGrouping))));
    d.expert_train = d.corpus.select(d.splits.expert_train);
    d.distill_train = d.corpus.select(d.splits.distill_train);
    d.valid = d.corpus.select(d.splits.valid);
    d.test = d.corpus.select(d.splits.test);
    return d;
  }

  CweGrouping load_grouping() const {
    return grouping_from_json(nlohmann::json::parse(read_file(path(layout::kGrouping))));
  }

 private:
  std::string producer(const std::string& key) const {
    for (const auto& [stage, rec] : manifest_.stages) {
      if (rec.outputs.contains(key)) return stage;
    }
    return {};
  }

  void verify_against_producer(const std::string& key, const std::string& hash, const std::string& consumer) const {
    for (const auto& [stage, rec] : manifest_.stages) {
      const auto it = rec.outputs.find(key);
      if (it != rec.outputs.end() && it->second != hash) {
        throw IntegrityError("refusing to run " + consumer + ": " + key + " does not match the hash recorded by " +
                             stage);
      }
    }
  }

  PipelineConfig cfg_;
  std::uint64_t seed_;
  std::ostream* log_;
  Manifest manifest_;
};

// ---------------------------------------------------------------------------
// Stages

namespace detail {

inline TrainConfig seeded(TrainConfig c, std::uint64_t seed) {
  c.seed = seed;
  return c;
}

inline std::vector<std::string> prepared_keys() { return {layout::kBalanced, layout::kSplits, layout::kGrouping}; }

inline std::vector<std::string> expert_keys(const CweGrouping& g) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < g.size(); ++i) out.push_back(layout::expert(i, g.groups[i].name));
  return out;
}

inline std::vector<std::string> student_keys(const PipelineConfig& c) {
  std::vector<std::string> out;
  for (const auto& s : c.students) {
    for (const auto m : kMethods) out.push_back(layout::student(s.name, m));
  }
  return out;
}

inline nlohmann::ordered_json trace_json(const std::vector<double>& trace) { return trace; }

inline ExpertSet load_experts(const Workspace& ws, const CweGrouping& grouping) {
  ExpertSet set{{}, grouping};
  for (std::size_t i = 0; i < grouping.size(); ++i) {
    set.experts.push_back({grouping.groups[i].name, load_checkpoint(ws.path(layout::expert(i, grouping.groups[i].name))).params});
  }
  return set;
}

inline std::vector<FusedKnowledge> load_soft(const Workspace& ws, const char* key) {
  std::istringstream in(read_file(ws.path(key)));
  return parse_fused_jsonl(in);
}

template <typename... Parts>
std::vector<std::string> concat(Parts&&... parts) {
  std::vector<std::string> out;
  (out.insert(out.end(), parts.begin(), parts.end()), ...);
  return out;
}

}  // namespace detail

/// Writes the synthetic corpus into the workdir (synthetic configs only).
inline void generate_data(Workspace& ws) {
  const auto& c = ws.config();
  if (!c.synthetic_spec) throw InvalidArgument("gen-data needs a 'synthetic' block in the config");
  const auto key = "external/" + c.synthetic_spec->filename().string();
  const nlohmann::ordered_json params{{"stage", "gen-data"}, {"seed", ws.seed()}};
  ws.run_stage("gen-data", params, {key}, [&](auto& out) {
    const auto spec = synthetic_spec_from_json(nlohmann::json::parse(read_file(ws.path(key))));
    const auto corpus = generate_synthetic(spec, ws.seed());
    ws.emit(out, layout::kRaw, corpus_to_jsonl(corpus));
    ws.log("[gen-data] generated " + std::to_string(corpus.size()) + " samples");
  });
}

inline void stage_prepare(Workspace& ws) {
  const auto& c = ws.config();
  const nlohmann::ordered_json params{{"stage", "prepare"}, {"seed", ws.seed()}, {"min_count", c.min_count}};
  ws.run_stage("prepare", params, {ws.raw_corpus_key()}, [&](auto& out) {
    const auto raw = load_corpus(ws.path(ws.raw_corpus_key()));
    const auto balanced = balance_corpus_detailed(raw, ws.seed());
    const auto splits = split_corpus(balanced.corpus, ws.seed());
    const auto grouping = group_cwes(balanced.corpus, splits.expert_train, c.min_count);
    std::size_t fallbacks = 0;
    for (const auto& m : balanced.matches) fallbacks += m.fallback;
    ws.emit(out, layout::kBalanced, corpus_to_jsonl(balanced.corpus));
    ws.emit(out, layout::kSplits, to_json(splits).dump() + "\n");
    ws.emit(out, layout::kGrouping, to_json(grouping).dump() + "\n");
    const nlohmann::ordered_json metrics{{"raw_samples", raw.size()},
                                         {"balanced_samples", balanced.corpus.size()},
                                         {"length_fallbacks", fallbacks},
                                         {"expert_train", splits.expert_train.size()},
                                         {"distill_train", splits.distill_train.size()},
                                         {"valid", splits.valid.size()},
                                         {"test", splits.test.size()},
                                         {"groups", to_json(grouping)["groups"]}};
    ws.emit(out, layout::kPrepareMetrics, metrics.dump(2) + "\n");
  });
}

inline void stage_train_experts(Workspace& ws) {
  const auto& c = ws.config();
  const nlohmann::ordered_json params{{"stage", "train-experts"}, {"seed", ws.seed()},
                                      {"teacher_dim", c.teacher_dim}, {"teacher_hidden", c.teacher_hidden},
                                      {"experts", to_json(c.experts)}, {"single_teacher", to_json(c.single_teacher)}};
  ws.run_stage("train-experts", params, detail::prepared_keys(), [&](auto& out) {
    const auto d = ws.load_prepared();
    const FeatureTable features(c.teacher_dim, d.corpus.samples);
    const auto cfg = detail::seeded(c.experts, ws.seed());
    nlohmann::ordered_json metrics{{"experts", nlohmann::ordered_json::array()}};
    for (std::size_t i = 0; i < d.grouping.size(); ++i) {
      const auto& g = d.grouping.groups[i].name;
      auto r = train_expert(g, d.expert_train, d.grouping, features, c.teacher_hidden, cfg);
      ws.emit(out, layout::expert(i, g), encode_checkpoint({std::move(r.params), cfg.loss, cfg.seed}));
      metrics["experts"].push_back({{"group", g}, {"loss_trace", detail::trace_json(r.loss_trace)}});
    }
    const auto scfg = detail::seeded(c.single_teacher, ws.seed());
    auto single = train_monolithic_teacher(d.expert_train, features, c.teacher_hidden, scfg);
    ws.emit(out, layout::kSingleTeacher, encode_checkpoint({std::move(single.params), scfg.loss, scfg.seed}));
    metrics["single_teacher"] = {{"loss_trace", detail::trace_json(single.loss_trace)}};
    ws.emit(out, layout::kExpertMetrics, metrics.dump(2) + "\n");
  });
}

inline void stage_train_router(Workspace& ws) {
  const auto& c = ws.config();
  const nlohmann::ordered_json params{{"stage", "train-router"}, {"seed", ws.seed()},
                                      {"teacher_dim", c.teacher_dim}, {"teacher_hidden", c.teacher_hidden},
                                      {"router", to_json(c.router)}};
  ws.run_stage("train-router", params, detail::prepared_keys(), [&](auto& out) {
    const auto d = ws.load_prepared();
    const FeatureTable features(c.teacher_dim, d.corpus.samples);
    auto cfg = detail::seeded(c.router, ws.seed());
    if (auto* f = std::get_if<FocalLossSpec>(&cfg.loss); f && f->alpha.empty()) {
      std::vector<std::size_t> counts(d.grouping.size(), 0);
      for (const auto& s : d.expert_train) {
        if (s.vulnerable()) ++counts[*d.grouping.group_of(s)];
      }
      f->alpha = inverse_frequency_alpha(counts);
    }
    std::vector<double> trace;
    auto router = train_router(d.expert_train, d.grouping, features, c.teacher_hidden, cfg, &trace);
    ws.emit(out, layout::kRouter, encode_checkpoint({std::move(router.params), cfg.loss, cfg.seed}));
    const nlohmann::ordered_json metrics{{"loss", to_json(cfg.loss)}, {"loss_trace", detail::trace_json(trace)}};
    ws.emit(out, layout::kRouterMetrics, metrics.dump(2) + "\n");
  });
}

inline void stage_fuse(Workspace& ws) {
  const auto& c = ws.config();
  const auto grouping = ws.load_grouping();
  const double t = std::get<DistillLossSpec>(c.student.loss).temperature;
  const nlohmann::ordered_json params{{"stage", "fuse"}, {"k", c.k}, {"teacher_dim", c.teacher_dim}, {"temperature", t}};
  const auto inputs = detail::concat(detail::prepared_keys(), detail::expert_keys(grouping),
                                     std::vector<std::string>{layout::kRouter, layout::kSingleTeacher});
  ws.run_stage("fuse", params, inputs, [&](auto& out) {
    const auto d = ws.load_prepared();
    const FeatureTable features(c.teacher_dim, d.distill_train);
    const auto experts = detail::load_experts(ws, d.grouping);
    const RouterModel router{load_checkpoint(ws.path(layout::kRouter)).params, d.grouping};
    const auto single = load_checkpoint(ws.path(layout::kSingleTeacher)).params;
    const auto moe = generate_soft_knowledge(router, experts, d.distill_train, features, c.k, t);
    const auto st = single_teacher_soft_labels(single, d.distill_train, features, t);
    ws.emit(out, layout::kSoftMoe, fused_to_jsonl(moe.records));
    ws.emit(out, layout::kSoftSingle, fused_to_jsonl(st.records));
  });
}

inline void stage_distill(Workspace& ws) {
  const auto& c = ws.config();
  nlohmann::ordered_json specs = nlohmann::ordered_json::array();
  for (const auto& s : c.students) specs.push_back(to_json(s));
  const nlohmann::ordered_json params{{"stage", "distill"}, {"seed", ws.seed()}, {"student", to_json(c.student)},
                                      {"students", specs}};
  const std::vector<std::string> inputs = {layout::kBalanced, layout::kSplits, layout::kSoftMoe, layout::kSoftSingle};
  ws.run_stage("distill", params, inputs, [&](auto& out) {
    const auto d = ws.load_prepared();
    const auto cfg = detail::seeded(c.student, ws.seed());
    const double t = std::get<DistillLossSpec>(cfg.loss).temperature;
    const std::array<SoftLabelSet, 2> soft = {SoftLabelSet{detail::load_soft(ws, layout::kSoftMoe), t},
                                              SoftLabelSet{detail::load_soft(ws, layout::kSoftSingle), t}};
    nlohmann::ordered_json metrics{{"students", nlohmann::ordered_json::array()}};
    for (const auto& spec : c.students) {
      const FeatureTable features(spec.input_dim, d.distill_train);
      nlohmann::ordered_json row{{"name", spec.name}};
      for (std::size_t m = 0; m < kMethods.size(); ++m) {
        auto r = train_student(spec, soft[m], features, cfg);
        ws.emit(out, layout::student(spec.name, kMethods[m]), encode_checkpoint({std::move(r.params), cfg.loss, cfg.seed}));
        row[std::string(kMethods[m])] = {{"epochs_run", r.loss_trace.size()}, {"kd_loss_trace", detail::trace_json(r.loss_trace)}};
      }
      metrics["students"].push_back(row);
    }
    ws.emit(out, layout::kDistillMetrics, metrics.dump(2) + "\n");
  });
}

/// Accuracy of each expert on its subspace: the group's vulnerable samples
/// plus every non-vulnerable sample of `samples`.
inline std::pair<double, std::size_t> in_subspace_accuracy(const ClassifierParams& expert, std::size_t group,
                                                           const CweGrouping& grouping,
                                                           std::span<const CodeSample> samples,
                                                           const FeatureTable& features) {
  std::size_t correct = 0, total = 0;
  for (const auto& s : samples) {
    if (s.vulnerable() && grouping.group_of(s) != group) continue;
    ++total;
    correct += argmax(forward(expert, features.features(s.id))) == expert_target(s, group, grouping);
  }
  return {total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0, total};
}

inline void stage_eval(Workspace& ws) {
  const auto& c = ws.config();
  const auto grouping = ws.load_grouping();
  nlohmann::ordered_json specs = nlohmann::ordered_json::array();
  for (const auto& s : c.students) specs.push_back(to_json(s));
  const nlohmann::ordered_json params{{"stage", "eval"}, {"k", c.k}, {"teacher_dim", c.teacher_dim}, {"students", specs}};
  const auto inputs = detail::concat(detail::prepared_keys(), detail::expert_keys(grouping), detail::student_keys(c),
                                     std::vector<std::string>{layout::kRouter, layout::kSingleTeacher,
                                                              layout::kSoftMoe, layout::kSoftSingle});
  ws.run_stage("eval", params, inputs, [&](auto& out) {
    const auto d = ws.load_prepared();
    const FeatureTable features(c.teacher_dim, d.corpus.samples);
    const auto experts = detail::load_experts(ws, d.grouping);
    const RouterModel router{load_checkpoint(ws.path(layout::kRouter)).params, d.grouping};
    const auto single = load_checkpoint(ws.path(layout::kSingleTeacher)).params;

    nlohmann::ordered_json m;
    m["experts"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < experts.size(); ++i) {
      const auto [acc, n] = in_subspace_accuracy(experts.experts[i].params, i, d.grouping, d.test, features);
      m["experts"].push_back({{"group", experts.experts[i].group}, {"in_subspace_accuracy", acc}, {"subspace_size", n}});
    }
    std::size_t routed = 0, held_out = 0;
    for (const auto* split : {&d.valid, &d.test}) {
      for (const auto& s : *split) {
        if (!s.vulnerable()) continue;
        ++held_out;
        routed += argmax(route(router, features.features(s.id))) == d.grouping.group_of(s);
      }
    }
    m["router"] = {{"heldout_top1", held_out ? static_cast<double>(routed) / static_cast<double>(held_out) : 0.0},
                   {"heldout_size", held_out}};
    m["teachers"] = {{"moe", evaluate_moe_accuracy(router, experts, c.k, d.test, features)},
                     {"single", evaluate_accuracy(single, d.test, features)}};
    const double t = std::get<DistillLossSpec>(c.student.loss).temperature;
    const std::array<SoftLabelSet, 2> soft = {SoftLabelSet{detail::load_soft(ws, layout::kSoftMoe), t},
                                              SoftLabelSet{detail::load_soft(ws, layout::kSoftSingle), t}};
    m["students"] = nlohmann::ordered_json::array();
    for (const auto& spec : c.students) {
      const FeatureTable sf(spec.input_dim, d.corpus.samples);
      nlohmann::ordered_json row{{"name", spec.name}, {"input_dim", spec.input_dim}, {"hidden", spec.hidden},
                                 {"param_count", spec.param_count()}};
      for (std::size_t k = 0; k < kMethods.size(); ++k) {
        const auto p = load_checkpoint(ws.path(layout::student(spec.name, kMethods[k]))).params;
        row[std::string(kMethods[k])] = {{"test_accuracy", evaluate_accuracy(p, d.test, sf)},
                                         {"teacher_agreement", teacher_agreement(p, soft[k], sf)}};
      }
      m["students"].push_back(row);
    }
    ws.emit(out, layout::kEvalMetrics, m.dump(2) + "\n");
  });
}

inline void stage_attack(Workspace& ws) {
  const auto& c = ws.config();
  nlohmann::ordered_json attacks = nlohmann::ordered_json::array();
  for (const auto& a : c.attacks) attacks.push_back(to_json(a));
  const nlohmann::ordered_json params{{"stage", "attack"}, {"seed", ws.seed()}, {"attacks", attacks},
                                      {"vocab_fallback", c.vocab_fallback}};
  const auto inputs = detail::concat(std::vector<std::string>{layout::kBalanced, layout::kSplits}, detail::student_keys(c));
  ws.run_stage("attack", params, inputs, [&](auto& out) {
    const auto d = ws.load_prepared();
    const auto vocab = build_vocabulary(d.expert_train, c.vocab_fallback);
    nlohmann::ordered_json summary = nlohmann::ordered_json::array();
    for (auto cfg : c.attacks) {
      cfg.seed = ws.seed();
      for (const auto& spec : c.students) {
        for (const auto m : kMethods) {
          const HashedClassifier model{load_checkpoint(ws.path(layout::student(spec.name, m))).params};
          const auto rep = evaluate_asr(model, d.test, vocab, cfg, c.threads);
          const auto base = layout::attack(to_string(cfg.kind), spec.name, m);
          ws.emit(out, base + ".json", to_json(rep).dump() + "\n");
          ws.emit(out, base + ".perturbed.jsonl", perturbed_jsonl(rep));
          summary.push_back({{"attack", rep.attack}, {"student", spec.name}, {"method", m},
                             {"attacked", rep.attacked}, {"flipped", rep.flipped}, {"skipped", rep.skipped},
                             {"asr", rep.asr ? nlohmann::ordered_json(*rep.asr) : nlohmann::ordered_json(nullptr)}});
          ws.log("[attack] " + rep.attack + " on " + spec.name + "/" + std::string(m) + ": " +
                 std::to_string(rep.flipped) + "/" + std::to_string(rep.attacked) + " flipped");
        }
      }
    }
    ws.emit(out, layout::kAttackMetrics, nlohmann::ordered_json{{"runs", summary}}.dump(2) + "\n");
  });
}

// ---------------------------------------------------------------------------
// Report

struct Comparison {
  std::string metric;
  std::vector<std::string> pairs;  // what each paired entry is
  std::vector<double> moe, single;
  std::optional<WilcoxonResult> wilcoxon;
  std::string wilcoxon_error;
  double cliffs = 0.0;
};

inline Comparison compare(std::string metric, std::vector<std::string> pairs, std::vector<double> moe,
                          std::vector<double> single) {
  Comparison c{std::move(metric), std::move(pairs), std::move(moe), std::move(single), std::nullopt, {}, 0.0};
  try {
    c.wilcoxon = wilcoxon_signed_rank(c.moe, c.single);
  } catch (const InvalidArgument& e) {
    c.wilcoxon_error = e.what();
  }
  if (!c.moe.empty()) c.cliffs = cliffs_delta(c.moe, c.single);
  return c;
}

inline nlohmann::ordered_json to_json(const Comparison& c) {
  nlohmann::ordered_json j{{"metric", c.metric}, {"pairs", c.pairs}, {"moe", c.moe}, {"single", c.single}};
  if (c.wilcoxon) {
    j["wilcoxon"] = {{"p_value", c.wilcoxon->p_value}, {"w_plus", c.wilcoxon->w_plus}, {"n", c.wilcoxon->n},
                     {"exact", c.wilcoxon->exact}};
  } else {
    j["wilcoxon"] = {{"error", c.wilcoxon_error}};
  }
  j["cliffs_delta"] = c.cliffs;
  j["effect"] = effect_size_label(c.cliffs);
  return j;
}

/// Renders the RQ-style tables. A pure function of the metric files.
inline std::pair<std::string, nlohmann::ordered_json> render_report(const nlohmann::ordered_json& eval,
                                                                    const nlohmann::ordered_json& attacks,
                                                                    std::size_t k) {
  std::ostringstream md;
  nlohmann::ordered_json js;
  md << "# MoEKD report\n\n## Teacher and student accuracy (RQ1)\n\n"
     << "| method | model | accuracy |\n|---|---|---|\n";
  js["rq1"] = nlohmann::ordered_json::array();
  const auto row1 = [&](const std::string& method, const std::string& model, double acc) {
    md << "| " << method << " | " << model << " | " << fixed(acc) << " |\n";
    js["rq1"].push_back({{"method", method}, {"model", model}, {"accuracy", acc}});
  };
  row1("MoE teacher (k=" + std::to_string(k) + ")", "router + experts", eval["teachers"]["moe"].get<double>());
  row1("single teacher", "monolithic", eval["teachers"]["single"].get<double>());
  for (const auto& s : eval["students"]) {
    row1("MoEKD", s["name"].get<std::string>(), s["moe"]["test_accuracy"].get<double>());
    row1("single-teacher KD", s["name"].get<std::string>(), s["single"]["test_accuracy"].get<double>());
  }

  md << "\n### Experts and router\n\n| group | in-subspace accuracy | subspace size |\n|---|---|---|\n";
  for (const auto& e : eval["experts"]) {
    md << "| " << e["group"].get<std::string>() << " | " << fixed(e["in_subspace_accuracy"].get<double>()) << " | "
       << e["subspace_size"].get<std::size_t>() << " |\n";
  }
  md << "\nRouter top-1 on held-out vulnerable samples: " << fixed(eval["router"]["heldout_top1"].get<double>())
     << " (n=" << eval["router"]["heldout_size"].get<std::size_t>() << ")\n";
  js["experts"] = eval["experts"];
  js["router"] = eval["router"];

  md << "\n## Attack success rate (RQ2)\n\n| attack | student | method | attacked | flipped | ASR |\n"
     << "|---|---|---|---|---|---|\n";
  js["rq2"] = attacks["runs"];
  std::vector<std::string> asr_pairs;
  std::vector<double> asr_moe, asr_single;
  std::map<std::string, double> asr_by_key;
  for (const auto& r : attacks["runs"]) {
    const auto asr = r["asr"];
    md << "| " << r["attack"].get<std::string>() << " | " << r["student"].get<std::string>() << " | "
       << r["method"].get<std::string>() << " | " << r["attacked"].get<std::size_t>() << " | "
       << r["flipped"].get<std::size_t>() << " | " << (asr.is_null() ? std::string("n/a") : fixed(asr.get<double>()))
       << " |\n";
    if (!asr.is_null()) {
      asr_by_key[r["attack"].get<std::string>() + "/" + r["student"].get<std::string>() + "/" +
                 r["method"].get<std::string>()] = asr.get<double>();
    }
  }
  for (const auto& r : attacks["runs"]) {
    if (r["method"] != "moe") continue;
    const auto key = r["attack"].get<std::string>() + "/" + r["student"].get<std::string>();
    const auto a = asr_by_key.find(key + "/moe");
    const auto b = asr_by_key.find(key + "/single");
    if (a == asr_by_key.end() || b == asr_by_key.end()) continue;
    asr_pairs.push_back(key);
    asr_moe.push_back(a->second);
    asr_single.push_back(b->second);
  }

  md << "\n## Capacity sweep (RQ3)\n\n| method | size (params) | D | H | accuracy |\n|---|---|---|---|---|\n";
  js["rq3"] = nlohmann::ordered_json::array();
  std::vector<std::string> acc_pairs;
  std::vector<double> acc_moe, acc_single;
  for (const auto& s : eval["students"]) {
    for (const auto m : kMethods) {
      const double acc = s[std::string(m)]["test_accuracy"].get<double>();
      const std::string method = m == "moe" ? "MoEKD" : "single-teacher KD";
      md << "| " << method << " | " << s["param_count"].get<std::size_t>() << " | " << s["input_dim"].get<std::size_t>()
         << " | " << s["hidden"].get<std::size_t>() << " | " << fixed(acc) << " |\n";
      js["rq3"].push_back({{"method", method}, {"student", s["name"]}, {"size", s["param_count"]}, {"accuracy", acc}});
    }
    acc_pairs.push_back(s["name"].get<std::string>());
    acc_moe.push_back(s["moe"]["test_accuracy"].get<double>());
    acc_single.push_back(s["single"]["test_accuracy"].get<double>());
  }

  md << "\n## Statistics (MoEKD vs single-teacher KD)\n\n"
     << "| metric | pairs | Wilcoxon p | Cliff's delta | effect |\n|---|---|---|---|---|\n";
  js["stats"] = nlohmann::ordered_json::array();
  for (const auto& c : {compare("asr", asr_pairs, asr_moe, asr_single), compare("accuracy", acc_pairs, acc_moe, acc_single)}) {
    md << "| " << c.metric << " | " << c.pairs.size() << " | "
       << (c.wilcoxon ? fixed(c.wilcoxon->p_value) + (c.wilcoxon->exact ? " (exact)" : " (normal)")
                      : "n/a: " + c.wilcoxon_error)
       << " | " << fixed(c.cliffs) << " | " << effect_size_label(c.cliffs) << " |\n";
    js["stats"].push_back(to_json(c));
  }
  md << "\nPairs are matched by (attack, student) for ASR and by student for accuracy.\n";
  return {md.str(), js};
}

inline void stage_report(Workspace& ws) {
  const auto& c = ws.config();
  const nlohmann::ordered_json params{{"stage", "report"}, {"k", c.k}};
  const std::vector<std::string> inputs = {layout::kEvalMetrics, layout::kAttackMetrics};
  const std::map<std::string, std::string> producers = {{layout::kEvalMetrics, "eval"},
                                                        {layout::kAttackMetrics, "attack"}};
  std::string missing;
  for (const auto& key : inputs) {
    if (!fs::exists(ws.path(key))) missing += " " + key + " (stage " + producers.at(key) + ")";
  }
  if (!missing.empty()) throw Error("report needs missing artifacts:" + missing);
  ws.run_stage("report", params, inputs, [&](auto& out) {
    const auto eval = nlohmann::ordered_json::parse(read_file(ws.path(layout::kEvalMetrics)));
    const auto attacks = nlohmann::ordered_json::parse(read_file(ws.path(layout::kAttackMetrics)));
    const auto [md, js] = render_report(eval, attacks, c.k);
    ws.emit(out, layout::kReportMd, md);
    ws.emit(out, layout::kReportJson, js.dump(2) + "\n");
  });
}

/// A stage failure, tagged with the stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::exception& cause)
      : Error("stage " + stage + " failed: " + cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

inline void run_named_stage(Workspace& ws, std::string_view name) {
  using Fn = void (*)(Workspace&);
  static const std::map<std::string_view, Fn> table = {
      {"gen-data", generate_data},   {"prepare", stage_prepare}, {"train-experts", stage_train_experts},
      {"train-router", stage_train_router}, {"fuse", stage_fuse}, {"distill", stage_distill},
      {"eval", stage_eval},          {"attack", stage_attack},   {"report", stage_report}};
  const auto it = table.find(name);
  if (it == table.end()) throw InvalidArgument("unknown stage '" + std::string(name) + "'");
  try {
    it->second(ws);
  } catch (const std::exception& e) {
    throw StageError(std::string(name), e);
  }
}

/// Every stage in order; gen-data only for synthetic configs.
inline void run_pipeline(const PipelineConfig& cfg, std::uint64_t seed_offset = 0, std::ostream* log = nullptr) {
  Workspace ws(cfg, seed_offset, log);
  for (const auto name : kStages) {
    if (name != "gen-data" || cfg.synthetic_spec) run_named_stage(ws, name);
  }
}

}  // namespace moekd
