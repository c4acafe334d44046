// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "moekd/corpus.hpp"
#include "moekd/features.hpp"
#include "moekd/moe.hpp"
#include "moekd/synthetic.hpp"

namespace moekd::testing {

inline SyntheticSpec three_group_spec(std::size_t per_group = 150) {
  SyntheticSpec spec;
  spec.groups = {{"CWE-707", {"memcpy_unchecked", "strcpy_raw"}, per_group},
                 {"CWE-399", {"free_twice", "alloc_leak"}, per_group},
                 {"CWE-264", {"setuid_raw", "chmod_open"}, per_group}};
  spec.noise = {"buf", "len", "ptr", "idx", "count", "tmp", "size", "node", "ctx", "flags"};
  spec.projects = 3;
  spec.loc_min = 6;
  spec.loc_max = 14;
  spec.signals_min = 2;
  spec.signals_max = 3;
  return spec;
}

/// A balanced synthetic corpus with its split, grouping and features.
struct World {
  Corpus corpus;
  Splits splits;
  CweGrouping grouping;
  FeatureTable features{256};
  std::vector<CodeSample> expert_train, distill_train, valid, test;

  explicit World(std::uint64_t seed = 42, std::size_t per_group = 150, std::size_t dim = 256, int min_count = 5)
      : World(seed, three_group_spec(per_group), dim, min_count) {}

  World(std::uint64_t seed, const SyntheticSpec& spec, std::size_t dim, int min_count) : features(dim) {
    corpus = balance_corpus(generate_synthetic(spec, seed), seed);
    splits = split_corpus(corpus, seed);
    grouping = group_cwes(corpus, splits.expert_train, min_count);
    features.add(corpus.samples);
    expert_train = corpus.select(splits.expert_train);
    distill_train = corpus.select(splits.distill_train);
    valid = corpus.select(splits.valid);
    test = corpus.select(splits.test);
  }

  /// Teacher schedule used by the accuracy tests.
  static TrainConfig teacher_config(std::uint64_t seed = 42) {
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.learning_rate = 2.0;
    cfg.seed = seed;
    return cfg;
  }

  ExpertSet train_experts(const TrainConfig& cfg, std::size_t hidden = 0) const {
    ExpertSet set{{}, grouping};
    for (const auto& g : grouping.groups) {
      set.experts.push_back({g.name, train_expert(g.name, expert_train, grouping, features, hidden, cfg).params});
    }
    return set;
  }
};

}  // namespace moekd::testing
