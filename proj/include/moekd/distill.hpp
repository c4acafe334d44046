// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <concepts>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moekd/corpus.hpp"
#include "moekd/features.hpp"
#include "moekd/moe.hpp"
#include "moekd/nn.hpp"

namespace moekd {

/// Fixed teacher logits over the distillation split. Records produced by a
/// single teacher carry an empty selection.
struct SoftLabelSet {
  std::vector<FusedKnowledge> records;
  double temperature = 2.0;
};

/// Student capacity: a (D, H) micro classifier with a parameter budget.
struct StudentSpec {
  std::string name;
  std::size_t input_dim = 256;
  std::size_t hidden = 0;
  std::size_t budget = 0;  // 0 means unconstrained

  Architecture arch() const noexcept { return {input_dim, hidden, 2}; }
  std::size_t param_count() const noexcept { return arch().param_count(); }

  void validate() const {
    check_feature_dim(input_dim);
    if (budget != 0 && param_count() > budget) {
      throw InvalidArgument("student '" + name + "' has " + std::to_string(param_count()) +
                            " parameters, over its budget of " + std::to_string(budget));
    }
  }
};

inline nlohmann::ordered_json to_json(const StudentSpec& s) {
  return {{"name", s.name},
          {"input_dim", s.input_dim},
          {"hidden", s.hidden},
          {"budget", s.budget},
          {"param_count", s.param_count()}};
}

inline StudentSpec student_spec_from_json(const nlohmann::json& j) {
  StudentSpec s;
  s.name = j.at("name").get<std::string>();
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.value("hidden", std::size_t{0});
  s.budget = j.value("budget", std::size_t{0});
  s.validate();
  return s;
}

/// Anything that yields a feature vector for a sample id.
template <typename T>
concept FeatureSource = requires(const T& src, const std::string& id) {
  { src.features(id) } -> std::convertible_to<std::span<const double>>;
};

/// Fused MoE knowledge for each sample, in the given order.
inline SoftLabelSet generate_soft_knowledge(const RouterModel& router, const ExpertSet& experts,
                                            std::span<const CodeSample> distill_train,
                                            const FeatureTable& features, std::size_t k,
                                            double temperature = 2.0) {
  SoftLabelSet out;
  out.temperature = temperature;
  out.records.reserve(distill_train.size());
  for (const auto& s : distill_train) {
    out.records.push_back(fuse(router, experts, s.id, features.features(s.id), k));
  }
  return out;
}

/// Soft labels from one monolithic teacher.
inline SoftLabelSet single_teacher_soft_labels(const ClassifierParams& teacher,
                                               std::span<const CodeSample> distill_train,
                                               const FeatureTable& features, double temperature = 2.0) {
  SoftLabelSet out;
  out.temperature = temperature;
  for (const auto& s : distill_train) {
    out.records.push_back({s.id, forward(teacher, features.features(s.id)), {}});
  }
  return out;
}

/// Trains a student on soft labels alone. Only `features` and the soft
/// records are consulted; ground-truth labels never reach this function.
template <FeatureSource Source>
TrainResult train_student(const StudentSpec& spec, const SoftLabelSet& soft, const Source& features,
                          const TrainConfig& cfg) {
  spec.validate();
  if (!std::holds_alternative<DistillLossSpec>(cfg.loss)) {
    throw InvalidArgument("student training needs a kd loss");
  }
  std::vector<TrainExample> data;
  data.reserve(soft.records.size());
  for (const auto& r : soft.records) {
    std::span<const double> x;
    try {
      x = features.features(r.id);
    } catch (const InvalidArgument&) {
      throw InvalidArgument("no features for soft record '" + r.id + "'");
    }
    if (x.size() != spec.input_dim) throw InvalidArgument("feature dimension does not match student spec");
    data.push_back({x, r.fused_logits});
  }
  return train(init_params(spec.arch(), derive_seed(cfg.seed, "student")), data, cfg);
}

/// Monolithic teacher: one binary classifier on all of expert_train.
inline TrainResult train_monolithic_teacher(std::span<const CodeSample> expert_train, const FeatureTable& features,
                                            std::size_t hidden, const TrainConfig& cfg) {
  std::vector<TrainExample> data;
  for (const auto& s : expert_train) {
    data.push_back({features.features(s.id), static_cast<std::size_t>(s.label)});
  }
  const Architecture arch{features.dim(), hidden, 2};
  return train(init_params(arch, derive_seed(cfg.seed, "single-teacher")), data, cfg);
}

/// Same distillation procedure as train_student; only the supervision
/// differs (one teacher's logits instead of fused expert logits).
template <FeatureSource Source>
TrainResult train_single_teacher_baseline(const StudentSpec& spec, const ClassifierParams& teacher,
                                          std::span<const CodeSample> distill_train,
                                          const FeatureTable& teacher_features, const Source& student_features,
                                          const TrainConfig& cfg) {
  const double t = std::get<DistillLossSpec>(cfg.loss).temperature;
  const auto soft = single_teacher_soft_labels(teacher, distill_train, teacher_features, t);
  return train_student(spec, soft, student_features, cfg);
}

// ---------------------------------------------------------------------------
// Shared evaluation path

/// Fraction of samples whose argmax class equals the binary label.
template <typename Predict>
double accuracy_of(std::span<const CodeSample> samples, Predict&& predict) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    if (predict(s) == static_cast<std::size_t>(s.label)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

inline double evaluate_accuracy(const ClassifierParams& model, std::span<const CodeSample> samples,
                                const FeatureTable& features) {
  return accuracy_of(samples, [&](const CodeSample& s) { return argmax(forward(model, features.features(s.id))); });
}

inline double evaluate_moe_accuracy(const RouterModel& router, const ExpertSet& experts, std::size_t k,
                                    std::span<const CodeSample> samples, const FeatureTable& features) {
  return accuracy_of(samples, [&](const CodeSample& s) {
    return argmax(fuse(router, experts, s.id, features.features(s.id), k).fused_logits);
  });
}

/// Fraction of records where the student's argmax matches the teacher's.
template <FeatureSource Source>
double teacher_agreement(const ClassifierParams& student, const SoftLabelSet& soft, const Source& features) {
  if (soft.records.empty()) return 0.0;
  std::size_t agree = 0;
  for (const auto& r : soft.records) {
    if (argmax(forward(student, features.features(r.id))) == argmax(r.fused_logits)) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(soft.records.size());
}

}  // namespace moekd
