// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "moekd/error.hpp"
#include "moekd/random.hpp"

namespace moekd {

inline constexpr const char* kUnknownCwe = "CWE-unknown";
inline constexpr const char* kOtherCwe = "CWE-other";

/// One labeled function. label is 1 for vulnerable, 0 for non-vulnerable.
struct CodeSample {
  std::string id;
  std::string code;
  int label = 0;
  std::optional<std::string> cwe;
  std::string project;
  int loc = 1;

  bool vulnerable() const noexcept { return label == 1; }

  /// The CWE tag with an absent field folded into "CWE-unknown".
  std::string cwe_tag() const { return cwe.value_or(kUnknownCwe); }

  bool operator==(const CodeSample&) const = default;
};

struct Corpus {
  std::vector<CodeSample> samples;
  std::string provenance;

  std::size_t size() const noexcept { return samples.size(); }

  /// Index from sample id to position. Throws if ids are not unique.
  std::unordered_map<std::string, std::size_t> index() const {
    std::unordered_map<std::string, std::size_t> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (!out.emplace(samples[i].id, i).second) {
        throw InvalidArgument("duplicate sample id '" + samples[i].id + "'");
      }
    }
    return out;
  }

  /// Samples with the given ids, in the order of `ids`.
  std::vector<CodeSample> select(const std::vector<std::string>& ids) const {
    const auto idx = index();
    std::vector<CodeSample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      const auto it = idx.find(id);
      if (it == idx.end()) throw InvalidArgument("unknown sample id '" + id + "'");
      out.push_back(samples[it->second]);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// JSONL persistence

inline nlohmann::ordered_json to_json(const CodeSample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["code"] = s.code;
  j["label"] = s.label;
  if (s.cwe) {
    j["cwe"] = *s.cwe;
  } else {
    j["cwe"] = nullptr;
  }
  j["project"] = s.project;
  j["loc"] = s.loc;
  return j;
}

namespace detail {

inline CodeSample parse_sample(const std::string& line, std::size_t line_no) {
  const auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("line " + std::to_string(line_no) + ": " + why);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(std::string("invalid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw fail("record is not a JSON object");

  const auto string_field = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) {
      throw fail(std::string("field '") + key + "' must be a string");
    }
    return j[key].get<std::string>();
  };

  CodeSample s;
  s.id = string_field("id");
  s.code = string_field("code");
  s.project = string_field("project");
  if (!j.contains("label") || !j["label"].is_number_integer()) {
    throw fail("field 'label' must be 0 or 1");
  }
  s.label = j["label"].get<int>();
  if (s.label != 0 && s.label != 1) throw fail("field 'label' must be 0 or 1");
  if (!j.contains("loc") || !j["loc"].is_number_integer()) {
    throw fail("field 'loc' must be an integer");
  }
  const auto loc = j["loc"].get<std::int64_t>();
  if (loc < 1 || loc > INT32_MAX) throw fail("field 'loc' must be a positive integer");
  s.loc = static_cast<int>(loc);
  if (j.contains("cwe") && !j["cwe"].is_null()) {
    if (!j["cwe"].is_string()) throw fail("field 'cwe' must be a string or null");
    s.cwe = j["cwe"].get<std::string>();
  }
  return s;
}

}  // namespace detail

/// Parses a JSONL corpus. Blank lines are ignored; line numbers are 1-based.
inline Corpus parse_corpus(std::istream& in, std::string provenance = {}) {
  Corpus corpus;
  corpus.provenance = std::move(provenance);
  std::unordered_map<std::string, std::size_t> first_line;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto sample = detail::parse_sample(line, line_no);
    const auto [it, inserted] = first_line.emplace(sample.id, line_no);
    if (!inserted) {
      throw FormatError("duplicate id '" + sample.id + "' on lines " +
                        std::to_string(it->second) + " and " + std::to_string(line_no));
    }
    corpus.samples.push_back(std::move(sample));
  }
  return corpus;
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open corpus file " + path.string());
  return parse_corpus(in, "file:" + path.filename().string());
}

inline std::string corpus_to_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& s : corpus.samples) {
    out += to_json(s).dump();
    out += '\n';
  }
  return out;
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write corpus file " + path.string());
  out << corpus_to_jsonl(corpus);
}

// ---------------------------------------------------------------------------
// Length-matched class balancing

/// One vulnerable sample and the non-vulnerable sample drawn for it.
/// `fallback` marks draws made because no candidate was within +/-20% loc.
struct BalanceMatch {
  std::string vulnerable_id;
  std::string matched_id;
  bool fallback = false;
};

struct BalanceResult {
  Corpus corpus;
  std::vector<BalanceMatch> matches;
};

/// True when `candidate_loc` lies within [0.8, 1.2] x `loc` (inclusive).
/// Integer cross-multiplication keeps the real-valued bound exact.
constexpr bool within_length_band(int loc, int candidate_loc) noexcept {
  const auto c = static_cast<std::int64_t>(candidate_loc) * 10;
  const auto v = static_cast<std::int64_t>(loc);
  return c >= 8 * v && c <= 12 * v;
}

/// Keeps every vulnerable sample and pairs each with an unused non-vulnerable
/// sample of the same project, preferring one within the +/-20% length band.
/// Vulnerable samples are visited in corpus order; the pick among eligible
/// candidates is uniform. The output is shuffled with the seed.
inline BalanceResult balance_corpus_detailed(const Corpus& raw, std::uint64_t seed) {
  (void)raw.index();  // id uniqueness

  // Unused non-vulnerable samples per project, keyed by loc then corpus order.
  std::map<std::string, std::multimap<int, std::size_t>> pool;
  std::map<std::string, std::size_t> vulnerable_per_project;
  for (std::size_t i = 0; i < raw.samples.size(); ++i) {
    const auto& s = raw.samples[i];
    if (s.vulnerable()) {
      ++vulnerable_per_project[s.project];
    } else {
      pool[s.project].emplace(s.loc, i);
    }
  }
  for (const auto& [project, count] : vulnerable_per_project) {
    const auto it = pool.find(project);
    const std::size_t available = it == pool.end() ? 0 : it->second.size();
    if (available < count) {
      throw InvalidArgument("project '" + project + "' has " + std::to_string(available) +
                            " non-vulnerable samples for " + std::to_string(count) +
                            " vulnerable samples");
    }
  }

  SplitMix64 rng(derive_seed(seed, "balance"));
  BalanceResult result;
  result.corpus.provenance = raw.provenance + " | balanced(seed=" + std::to_string(seed) + ")";
  for (const auto& v : raw.samples) {
    if (!v.vulnerable()) continue;
    auto& candidates = pool[v.project];

    // [ceil(0.8 loc), floor(1.2 loc)] in integers.
    const int lo = static_cast<int>((8LL * v.loc + 9) / 10);
    const int hi = static_cast<int>((12LL * v.loc) / 10);
    auto first = candidates.lower_bound(lo);
    const auto last = candidates.upper_bound(hi);
    const auto in_band = static_cast<std::size_t>(std::distance(first, last));

    BalanceMatch match{v.id, {}, in_band == 0};
    std::multimap<int, std::size_t>::iterator pick;
    if (in_band > 0) {
      pick = std::next(first, static_cast<std::ptrdiff_t>(rng.below(in_band)));
    } else {
      pick = std::next(candidates.begin(),
                       static_cast<std::ptrdiff_t>(rng.below(candidates.size())));
    }
    const auto& nv = raw.samples[pick->second];
    match.matched_id = nv.id;
    result.corpus.samples.push_back(v);
    result.corpus.samples.push_back(nv);
    result.matches.push_back(std::move(match));
    candidates.erase(pick);
  }
  shuffle(std::span<CodeSample>(result.corpus.samples), rng);
  return result;
}

inline Corpus balance_corpus(const Corpus& raw, std::uint64_t seed) {
  return balance_corpus_detailed(raw, seed).corpus;
}

// ---------------------------------------------------------------------------
// CWE grouping

struct CweGroup {
  std::string name;
  std::vector<std::string> members;  // raw tags, sorted
  std::size_t sample_count = 0;      // vulnerable samples on the counting basis

  bool operator==(const CweGroup&) const = default;
};

/// Partition of raw CWE tags into expert subspaces.
struct CweGrouping {
  std::vector<CweGroup> groups;
  int min_count = 100;

  std::size_t size() const noexcept { return groups.size(); }

  std::optional<std::size_t> find(const std::string& group_name) const {
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (groups[i].name == group_name) return i;
    }
    return std::nullopt;
  }

  /// Group index for a raw tag. Tags never seen while grouping fall into
  /// the consolidation group when one exists.
  std::optional<std::size_t> group_of(const std::string& tag) const {
    std::optional<std::size_t> other;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      const auto& m = groups[i].members;
      if (std::binary_search(m.begin(), m.end(), tag)) return i;
      if (groups[i].name == kOtherCwe) other = i;
    }
    return other;
  }

  std::optional<std::size_t> group_of(const CodeSample& s) const { return group_of(s.cwe_tag()); }

  bool operator==(const CweGrouping&) const = default;
};

/// Builds the grouping over every tag present in `corpus`, counting
/// vulnerable samples only among `count_ids` (all samples when empty).
/// Tags with at least `min_count` samples keep their own group,
/// "CWE-unknown" is always separate, everything else merges into
/// "CWE-other". Empty groups are not emitted.
inline CweGrouping group_cwes(const Corpus& corpus, const std::vector<std::string>& count_ids,
                             int min_count = 100) {
  if (min_count < 1) throw InvalidArgument("min_count must be positive");
  std::unordered_set<std::string> basis(count_ids.begin(), count_ids.end());
  const bool all = count_ids.empty();

  std::map<std::string, std::size_t> counts;  // every raw tag, counted on the basis
  std::size_t vulnerable = 0;
  for (const auto& s : corpus.samples) {
    if (!s.vulnerable()) continue;
    auto& c = counts[s.cwe_tag()];
    if (all || basis.contains(s.id)) {
      ++c;
      ++vulnerable;
    }
  }
  if (vulnerable == 0) throw InvalidArgument("corpus has no vulnerable samples to group");

  CweGrouping grouping;
  grouping.min_count = min_count;
  CweGroup other{kOtherCwe, {}, 0};
  for (const auto& [tag, count] : counts) {
    if (tag == kUnknownCwe || (tag != kOtherCwe && count >= static_cast<std::size_t>(min_count))) {
      grouping.groups.push_back({tag, {tag}, count});
    } else {
      other.members.push_back(tag);
      other.sample_count += count;
    }
  }
  if (!other.members.empty()) grouping.groups.push_back(std::move(other));
  std::sort(grouping.groups.begin(), grouping.groups.end(), [](const auto& a, const auto& b) {
    if (a.sample_count != b.sample_count) return a.sample_count > b.sample_count;
    return a.name < b.name;
  });
  return grouping;
}

inline CweGrouping group_cwes(const Corpus& corpus, int min_count = 100) {
  return group_cwes(corpus, {}, min_count);
}

inline nlohmann::ordered_json to_json(const CweGrouping& g) {
  nlohmann::ordered_json j;
  j["min_count"] = g.min_count;
  j["groups"] = nlohmann::ordered_json::array();
  for (const auto& grp : g.groups) {
    j["groups"].push_back(
        {{"name", grp.name}, {"members", grp.members}, {"sample_count", grp.sample_count}});
  }
  return j;
}

inline CweGrouping grouping_from_json(const nlohmann::json& j) {
  CweGrouping g;
  g.min_count = j.at("min_count").get<int>();
  for (const auto& grp : j.at("groups")) {
    g.groups.push_back({grp.at("name").get<std::string>(),
                        grp.at("members").get<std::vector<std::string>>(),
                        grp.at("sample_count").get<std::size_t>()});
  }
  return g;
}

// ---------------------------------------------------------------------------
// Splits

struct Splits {
  std::vector<std::string> expert_train;
  std::vector<std::string> distill_train;
  std::vector<std::string> valid;
  std::vector<std::string> test;

  bool operator==(const Splits&) const = default;
};

/// 80/10/10 split of a seeded shuffle: valid and test get floor(0.1 N) each,
/// the remainder is training, halved into expert_train (ceil) and
/// distill_train (floor).
inline Splits split_corpus(const Corpus& corpus, std::uint64_t seed) {
  const std::size_t n = corpus.size();
  if (n < 10) throw InvalidArgument("corpus of " + std::to_string(n) + " samples is too small to split (need >= 10)");
  (void)corpus.index();

  std::vector<std::string> ids;
  ids.reserve(n);
  for (const auto& s : corpus.samples) ids.push_back(s.id);
  SplitMix64 rng(derive_seed(seed, "split"));
  shuffle(std::span<std::string>(ids), rng);

  const std::size_t tenth = n / 10;
  const std::size_t train = n - 2 * tenth;
  const std::size_t expert = (train + 1) / 2;

  Splits s;
  auto it = ids.begin();
  const auto take = [&](std::vector<std::string>& dst, std::size_t count) {
    dst.assign(it, it + static_cast<std::ptrdiff_t>(count));
    it += static_cast<std::ptrdiff_t>(count);
  };
  take(s.valid, tenth);
  take(s.test, tenth);
  take(s.expert_train, expert);
  take(s.distill_train, train - expert);
  return s;
}

inline nlohmann::ordered_json to_json(const Splits& s) {
  return {{"expert_train", s.expert_train},
          {"distill_train", s.distill_train},
          {"valid", s.valid},
          {"test", s.test}};
}

inline Splits splits_from_json(const nlohmann::json& j) {
  Splits s;
  s.expert_train = j.at("expert_train").get<std::vector<std::string>>();
  s.distill_train = j.at("distill_train").get<std::vector<std::string>>();
  s.valid = j.at("valid").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

}  // namespace moekd
