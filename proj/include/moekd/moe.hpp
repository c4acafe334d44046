// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moekd/corpus.hpp"
#include "moekd/error.hpp"
#include "moekd/features.hpp"
#include "moekd/nn.hpp"

namespace moekd {

struct Expert {
  std::string group;
  ClassifierParams params;  // two classes: 0 non-vulnerable, 1 vulnerable
};

struct ExpertSet {
  std::vector<Expert> experts;
  CweGrouping grouping;

  std::size_t size() const noexcept { return experts.size(); }
};

struct RouterModel {
  ClassifierParams params;  // one class per expert, in grouping order
  CweGrouping grouping;
};

/// Top-k experts (descending router probability) and their convex weights.
struct Selection {
  std::vector<std::size_t> indices;
  std::vector<double> weights;
};

/// Teacher-side supervision for one sample.
struct FusedKnowledge {
  std::string id;
  Logits fused_logits;
  Selection selection;
};

// ---------------------------------------------------------------------------
// Training

/// 1 for a vulnerable sample of group `group`, 0 for everything else
/// (other groups' vulnerable samples and all non-vulnerable code).
inline std::size_t expert_target(const CodeSample& s, std::size_t group, const CweGrouping& grouping) {
  if (!s.vulnerable()) return 0;
  const auto g = grouping.group_of(s);
  return g && *g == group ? 1 : 0;
}

inline TrainResult train_expert(const std::string& group, std::span<const CodeSample> expert_train,
                                const CweGrouping& grouping, const FeatureTable& features,
                                std::size_t hidden, const TrainConfig& cfg) {
  const auto gi = grouping.find(group);
  if (!gi) throw InvalidArgument("unknown expert group '" + group + "'");
  if (expert_train.empty()) throw InvalidArgument("expert training set is empty");
  std::vector<TrainExample> data;
  data.reserve(expert_train.size());
  std::size_t positives = 0;
  for (const auto& s : expert_train) {
    const auto t = expert_target(s, *gi, grouping);
    positives += t;
    data.push_back({features.features(s.id), t});
  }
  if (positives == 0) throw InvalidArgument("group '" + group + "' has no positive samples in expert_train");
  const Architecture arch{features.dim(), hidden, 2};
  return train(init_params(arch, derive_seed(cfg.seed, group)), data, cfg);
}

/// Per-class weights proportional to 1/count, rescaled to mean 1.
inline std::vector<double> inverse_frequency_alpha(std::span<const std::size_t> counts) {
  std::vector<double> alpha(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) throw InvalidArgument("class " + std::to_string(i) + " has no samples");
    alpha[i] = 1.0 / static_cast<double>(counts[i]);
  }
  const double mean = std::accumulate(alpha.begin(), alpha.end(), 0.0) / static_cast<double>(alpha.size());
  for (double& a : alpha) a /= mean;
  return alpha;
}

/// Router training examples: vulnerable samples only, target = group index.
inline std::vector<TrainExample> router_examples(std::span<const CodeSample> samples,
                                                 const CweGrouping& grouping, const FeatureTable& features) {
  std::vector<TrainExample> data;
  for (const auto& s : samples) {
    if (!s.vulnerable()) continue;
    const auto g = grouping.group_of(s);
    if (!g) throw InvalidArgument("sample '" + s.id + "' has a CWE tag outside the grouping");
    data.push_back({features.features(s.id), *g});
  }
  return data;
}

/// Multi-class router over CWE groups trained with the focal loss (or
/// plain cross-entropy when cfg says so). An empty focal alpha is filled
/// with inverse group frequencies.
inline RouterModel train_router(std::span<const CodeSample> expert_train, const CweGrouping& grouping,
                                const FeatureTable& features, std::size_t hidden, TrainConfig cfg,
                                std::vector<double>* loss_trace = nullptr) {
  const auto data = router_examples(expert_train, grouping, features);
  std::vector<std::size_t> counts(grouping.size(), 0);
  for (const auto& ex : data) ++counts[std::get<std::size_t>(ex.target)];
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (counts[g] == 0) {
      throw InvalidArgument("group '" + grouping.groups[g].name + "' has no vulnerable samples for router training");
    }
  }
  if (auto* focal = std::get_if<FocalLossSpec>(&cfg.loss)) {
    if (focal->alpha.empty()) focal->alpha = inverse_frequency_alpha(counts);
    if (focal->alpha.size() != grouping.size()) throw InvalidArgument("focal alpha length must equal the number of groups");
  }
  const Architecture arch{features.dim(), hidden, grouping.size()};
  auto result = train(init_params(arch, derive_seed(cfg.seed, "router")), data, cfg);
  if (loss_trace) *loss_trace = result.loss_trace;
  return {std::move(result.params), grouping};
}

// ---------------------------------------------------------------------------
// Routing and fusion

inline Probabilities route(const RouterModel& router, std::span<const double> x) {
  return softmax_t(forward(router.params, x), 1.0);
}

/// Picks the k largest probabilities (ties to the lower index) and
/// renormalizes them into convex weights.
inline Selection select_topk(std::span<const double> probs, std::size_t k) {
  if (k < 1 || k > probs.size()) {
    throw InvalidArgument("k = " + std::to_string(k) + " outside [1, " + std::to_string(probs.size()) + "]");
  }
  for (const double p : probs) {
    if (!std::isfinite(p) || p < 0.0) throw InvalidArgument("router probabilities must be finite and >= 0");
  }
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
  Selection sel;
  sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  double total = 0.0;
  for (const auto i : sel.indices) total += probs[i];
  if (!(total > 0.0)) throw InvalidArgument("selected experts have zero total probability");
  for (const auto i : sel.indices) sel.weights.push_back(probs[i] / total);
  return sel;
}

/// Weighted sum of the selected experts' logits; only those experts run.
inline Logits fuse_logits(const ExpertSet& experts, const Selection& sel, std::span<const double> x) {
  if (sel.indices.size() != sel.weights.size()) throw InvalidArgument("selection indices/weights mismatch");
  Logits fused(2, 0.0);
  for (std::size_t m = 0; m < sel.indices.size(); ++m) {
    const auto i = sel.indices[m];
    if (i >= experts.size()) throw InvalidArgument("selection refers to missing expert " + std::to_string(i));
    const auto logits = forward(experts.experts[i].params, x);
    for (std::size_t c = 0; c < 2; ++c) fused[c] += sel.weights[m] * logits[c];
  }
  return fused;
}

/// route -> select_topk -> fuse_logits for one input.
inline FusedKnowledge fuse(const RouterModel& router, const ExpertSet& experts, std::string id,
                           std::span<const double> x, std::size_t k) {
  auto sel = select_topk(route(router, x), k);
  auto logits = fuse_logits(experts, sel, x);
  return {std::move(id), std::move(logits), std::move(sel)};
}

// ---------------------------------------------------------------------------
// Fused-knowledge JSONL

inline nlohmann::ordered_json to_json(const FusedKnowledge& f) {
  return {{"id", f.id},
          {"fused_logits", f.fused_logits},
          {"indices", f.selection.indices},
          {"weights", f.selection.weights}};
}

inline FusedKnowledge fused_from_json(const nlohmann::json& j) {
  FusedKnowledge f;
  f.id = j.at("id").get<std::string>();
  f.fused_logits = j.at("fused_logits").get<Logits>();
  f.selection.indices = j.at("indices").get<std::vector<std::size_t>>();
  f.selection.weights = j.at("weights").get<std::vector<double>>();
  if (f.fused_logits.size() != 2) throw FormatError("fused_logits must have two entries");
  for (const double v : f.fused_logits) {
    if (!std::isfinite(v)) throw FormatError("non-finite fused logit for '" + f.id + "'");
  }
  return f;
}

inline std::string fused_to_jsonl(std::span<const FusedKnowledge> records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<FusedKnowledge> parse_fused_jsonl(std::istream& in) {
  std::vector<FusedKnowledge> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(fused_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("fused knowledge line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace moekd
