// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moekd/corpus.hpp"
#include "moekd/features.hpp"
#include "moekd/random.hpp"

namespace moekd {

struct SyntheticGroup {
  std::string name;
  std::vector<std::string> signals;
  std::size_t vulnerable = 0;
  /// Calls that mark the group's code context. Empty, or set for every group.
  std::vector<std::string> context = {};
};

/// Configuration of a desk-scale corpus with planted per-group signals.
struct SyntheticSpec {
  std::vector<SyntheticGroup> groups;
  std::vector<std::string> noise;
  std::size_t projects = 4;
  int loc_min = 6;
  int loc_max = 30;
  /// Non-vulnerable samples generated per vulnerable sample, per project.
  double nonvuln_ratio = 1.0;
  int signals_min = 1;
  int signals_max = 2;
  /// With contexts: probability that a non-vulnerable sample in one group's
  /// context also calls another group's signals (benign there).
  double decoy_rate = 0.0;

  bool has_context() const noexcept { return !groups.empty() && !groups.front().context.empty(); }
};

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec spec;
  for (const auto& g : j.at("groups")) {
    spec.groups.push_back({g.at("name").get<std::string>(),
                           g.at("signals").get<std::vector<std::string>>(),
                           g.at("vulnerable").get<std::size_t>(),
                           g.value("context", std::vector<std::string>{})});
  }
  spec.noise = j.at("noise").get<std::vector<std::string>>();
  spec.projects = j.value("projects", spec.projects);
  if (j.contains("loc")) {
    spec.loc_min = j["loc"].at(0).get<int>();
    spec.loc_max = j["loc"].at(1).get<int>();
  }
  spec.nonvuln_ratio = j.value("nonvuln_ratio", spec.nonvuln_ratio);
  if (j.contains("signals_per_sample")) {
    spec.signals_min = j["signals_per_sample"].at(0).get<int>();
    spec.signals_max = j["signals_per_sample"].at(1).get<int>();
  }
  spec.decoy_rate = j.value("decoy_rate", spec.decoy_rate);
  return spec;
}

inline void validate(const SyntheticSpec& spec) {
  if (spec.groups.size() < 2) throw InvalidArgument("synthetic spec needs at least 2 CWE groups");
  if (spec.noise.size() < 4) throw InvalidArgument("synthetic spec needs at least 4 noise tokens");
  if (spec.projects < 1) throw InvalidArgument("synthetic spec needs at least 1 project");
  if (spec.signals_min < 1 || spec.signals_max < spec.signals_min) {
    throw InvalidArgument("signals_per_sample must satisfy 1 <= min <= max");
  }
  const int context_lines = spec.has_context() ? 1 : 0;
  if (spec.loc_min < 3 + spec.signals_max + context_lines || spec.loc_max < spec.loc_min) {
    throw InvalidArgument("loc range must satisfy 3 + max signals (+1 with contexts) <= min <= max");
  }
  if (!(spec.nonvuln_ratio >= 1.0)) throw InvalidArgument("nonvuln_ratio must be >= 1");
  if (!(spec.decoy_rate >= 0.0 && spec.decoy_rate <= 1.0)) throw InvalidArgument("decoy_rate must lie in [0, 1]");
  if (spec.decoy_rate > 0.0 && !spec.has_context()) throw InvalidArgument("decoys need group contexts");
  for (const auto& g : spec.groups) {
    if (g.context.empty() == spec.has_context()) {
      throw InvalidArgument("either every group or no group must declare context tokens");
    }
  }

  const auto check_name = [](const std::string& t) {
    if (!is_identifier(t) || is_keyword(t)) {
      throw InvalidArgument("'" + t + "' is not a usable identifier");
    }
  };
  std::map<std::string, std::string> owner;
  std::set<std::string> names;
  for (const auto& g : spec.groups) {
    if (!names.insert(g.name).second) throw InvalidArgument("duplicate group name " + g.name);
    if (g.signals.empty()) throw InvalidArgument("group " + g.name + " has no signal tokens");
    for (const auto& t : g.context) {
      check_name(t);
      if (!owner.emplace(t, g.name).second) throw InvalidArgument("context token '" + t + "' is not unique");
    }
    for (const auto& t : g.signals) {
      check_name(t);
      const auto [it, fresh] = owner.emplace(t, g.name);
      if (!fresh && it->second != g.name) {
        throw InvalidArgument("signal token '" + t + "' is shared by groups " + it->second +
                              " and " + g.name);
      }
    }
  }
  for (const auto& t : spec.noise) {
    check_name(t);
    if (owner.contains(t)) {
      throw InvalidArgument("noise token '" + t + "' is also a signal of " + owner[t]);
    }
  }
}

namespace detail {

class FunctionWriter {
 public:
  FunctionWriter(const SyntheticSpec& spec, SplitMix64& rng) : spec_(spec), rng_(rng) {}

  /// A function of exactly `loc` lines; `signals` are called on distinct
  /// body lines.
  std::string write(int loc, const std::vector<std::string>& signals) {
    const int body = loc - 2;  // last body line is the return
    std::vector<int> slots(static_cast<std::size_t>(body - 1));
    for (int i = 0; i < body - 1; ++i) slots[static_cast<std::size_t>(i)] = i;
    shuffle(std::span<int>(slots), rng_);
    std::map<int, std::string> signal_at;
    for (std::size_t i = 0; i < signals.size(); ++i) signal_at[slots[i]] = signals[i];

    std::string out = "int " + noise() + "(char *" + noise() + ", int " + noise() + ") {\n";
    for (int line = 0; line < body - 1; ++line) {
      const auto it = signal_at.find(line);
      out += it != signal_at.end() ? "  " + it->second + "(" + noise() + ", " + noise() + ", " +
                                         number() + ");\n"
                                   : statement();
    }
    out += "  return " + noise() + ";\n}";
    return out;
  }

 private:
  const std::string& noise() { return spec_.noise[rng_.below(spec_.noise.size())]; }
  std::string number() { return std::to_string(rng_.between(0, 255)); }

  std::string statement() {
    switch (rng_.below(7)) {
      case 0: return "  int " + noise() + " = " + noise() + " + " + number() + ";\n";
      case 1: return "  if (" + noise() + " > " + noise() + ") { " + noise() + " = " + noise() + "; }\n";
      case 2: return "  " + noise() + " = " + noise() + " * " + number() + ";\n";
      case 3: return "  " + noise() + "(" + noise() + ", " + noise() + ");\n";
      case 4: return "  while (" + noise() + " < " + number() + ") { " + noise() + "++; }\n";
      case 5: return "  " + noise() + "->" + noise() + " = " + noise() + ";\n";
      default: return "  " + noise() + "(\"" + noise() + " %d\", " + noise() + "); /* " + noise() + " */\n";
    }
  }

  const SyntheticSpec& spec_;
  SplitMix64& rng_;
};

}  // namespace detail

/// Generates a corpus whose vulnerable samples of group g each call at
/// least one of g's signal tokens, and whose non-vulnerable samples use
/// noise tokens only.
///
/// With contexts, every sample also calls one context token: vulnerable
/// samples their own group's, non-vulnerable samples a uniformly drawn
/// group's. A decoy is a non-vulnerable sample in group h's context that
/// calls signals of some other group, so a signal only indicates a flaw
/// inside its own context. Every project receives ceil(ratio x its vulnerable
/// count) non-vulnerable samples so length-matched balancing always has
/// enough candidates.
inline Corpus generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  validate(spec);
  SplitMix64 rng(derive_seed(seed, "synthetic"));
  detail::FunctionWriter writer(spec, rng);

  Corpus corpus;
  corpus.provenance = "synthetic(seed=" + std::to_string(seed) + ")";
  std::vector<std::size_t> per_project(spec.projects, 0);
  std::size_t serial = 0;
  const auto next_id = [&] {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%06zu", ++serial);
    return std::string(buf);
  };
  const auto project_name = [](std::size_t p) { return "proj_" + std::to_string(p); };

  for (const auto& g : spec.groups) {
    for (std::size_t i = 0; i < g.vulnerable; ++i) {
      const auto project = static_cast<std::size_t>(rng.below(spec.projects));
      ++per_project[project];
      const int loc = static_cast<int>(rng.between(spec.loc_min, spec.loc_max));
      const auto count = static_cast<std::size_t>(rng.between(spec.signals_min, spec.signals_max));
      std::vector<std::string> chosen;
      if (spec.has_context()) chosen.push_back(g.context[rng.below(g.context.size())]);
      for (std::size_t s = 0; s < count; ++s) chosen.push_back(g.signals[rng.below(g.signals.size())]);
      corpus.samples.push_back({next_id(), writer.write(loc, chosen), 1, g.name, project_name(project), loc});
    }
  }
  for (std::size_t p = 0; p < spec.projects; ++p) {
    const auto count = static_cast<std::size_t>(
        std::ceil(spec.nonvuln_ratio * static_cast<double>(per_project[p])));
    for (std::size_t i = 0; i < count; ++i) {
      const int loc = static_cast<int>(rng.between(spec.loc_min, spec.loc_max));
      std::vector<std::string> chosen;
      if (spec.has_context()) {
        const auto h = static_cast<std::size_t>(rng.below(spec.groups.size()));
        const auto& ctx = spec.groups[h].context;
        chosen.push_back(ctx[rng.below(ctx.size())]);
        if (rng.unit() < spec.decoy_rate) {
          auto o = static_cast<std::size_t>(rng.below(spec.groups.size() - 1));
          if (o >= h) ++o;
          const auto& sig = spec.groups[o].signals;
          const auto count = static_cast<std::size_t>(rng.between(spec.signals_min, spec.signals_max));
          for (std::size_t s = 0; s < count; ++s) chosen.push_back(sig[rng.below(sig.size())]);
        }
      }
      corpus.samples.push_back({next_id(), writer.write(loc, chosen), 0, std::nullopt, project_name(p), loc});
    }
  }
  shuffle(std::span<CodeSample>(corpus.samples), rng);
  return corpus;
}

}  // namespace moekd
