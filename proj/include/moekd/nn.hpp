// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "moekd/error.hpp"
#include "moekd/random.hpp"

namespace moekd {

using Logits = std::vector<double>;
using Probabilities = std::vector<double>;

/// Shape of a micro classifier. hidden == 0 is a plain linear model.
struct Architecture {
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  std::size_t classes = 2;

  std::size_t param_count() const noexcept {
    if (hidden == 0) return input_dim * classes + classes;
    return input_dim * hidden + hidden + hidden * classes + classes;
  }
  bool operator==(const Architecture&) const = default;
};

/// Dense parameters stored as one flat block in w1, b1, w2, b2 order.
/// w1 is D x H row-major, w2 is H x C (or D x C when H == 0).
class ClassifierParams {
 public:
  ClassifierParams() = default;
  explicit ClassifierParams(Architecture arch) : arch_(arch), values_(arch.param_count(), 0.0) {
    if (arch.input_dim == 0 || arch.classes < 2) {
      throw InvalidArgument("architecture needs input_dim >= 1 and classes >= 2");
    }
  }

  const Architecture& arch() const noexcept { return arch_; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::span<double> w1() noexcept { return block(0, w1_size()); }
  std::span<double> b1() noexcept { return block(w1_size(), arch_.hidden); }
  std::span<double> w2() noexcept { return block(w1_size() + arch_.hidden, w2_size()); }
  std::span<double> b2() noexcept { return block(values_.size() - arch_.classes, arch_.classes); }
  std::span<const double> w1() const noexcept { return block(0, w1_size()); }
  std::span<const double> b1() const noexcept { return block(w1_size(), arch_.hidden); }
  std::span<const double> w2() const noexcept { return block(w1_size() + arch_.hidden, w2_size()); }
  std::span<const double> b2() const noexcept { return block(values_.size() - arch_.classes, arch_.classes); }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const ClassifierParams&) const = default;

 private:
  std::size_t w1_size() const noexcept { return arch_.input_dim * arch_.hidden; }
  std::size_t w2_size() const noexcept {
    return (arch_.hidden == 0 ? arch_.input_dim : arch_.hidden) * arch_.classes;
  }
  std::span<double> block(std::size_t off, std::size_t len) noexcept {
    return std::span<double>(values_).subspan(off, len);
  }
  std::span<const double> block(std::size_t off, std::size_t len) const noexcept {
    return std::span<const double>(values_).subspan(off, len);
  }

  Architecture arch_;
  std::vector<double> values_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
inline ClassifierParams init_params(Architecture arch, std::uint64_t seed) {
  ClassifierParams p(arch);
  SplitMix64 rng(derive_seed(seed, "init"));
  const auto fill = [&](std::span<double> w, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w) v = rng.uniform(-bound, bound);
  };
  if (arch.hidden > 0) fill(p.w1(), arch.input_dim);
  fill(p.w2(), arch.hidden > 0 ? arch.hidden : arch.input_dim);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardPass {
  std::vector<double> hidden;  // post-ReLU activations; empty when H == 0
  Logits logits;
};

inline ForwardPass forward_pass(const ClassifierParams& p, std::span<const double> x) {
  const auto& a = p.arch();
  if (x.size() != a.input_dim) {
    throw InvalidArgument("input has dimension " + std::to_string(x.size()) + ", model expects " +
                          std::to_string(a.input_dim));
  }
  ForwardPass out;
  out.logits.assign(p.b2().begin(), p.b2().end());
  const auto w2 = p.w2();
  if (a.hidden == 0) {
    for (std::size_t d = 0; d < a.input_dim; ++d) {
      if (x[d] == 0.0) continue;
      for (std::size_t c = 0; c < a.classes; ++c) out.logits[c] += x[d] * w2[d * a.classes + c];
    }
    return out;
  }
  out.hidden.assign(p.b1().begin(), p.b1().end());
  const auto w1 = p.w1();
  for (std::size_t d = 0; d < a.input_dim; ++d) {
    if (x[d] == 0.0) continue;
    const double xd = x[d];
    const double* row = &w1[d * a.hidden];
    for (std::size_t h = 0; h < a.hidden; ++h) out.hidden[h] += xd * row[h];
  }
  for (std::size_t h = 0; h < a.hidden; ++h) {
    out.hidden[h] = std::max(0.0, out.hidden[h]);
    if (out.hidden[h] == 0.0) continue;
    for (std::size_t c = 0; c < a.classes; ++c) out.logits[c] += out.hidden[h] * w2[h * a.classes + c];
  }
  return out;
}

inline Logits forward(const ClassifierParams& p, std::span<const double> x) {
  return forward_pass(p, x).logits;
}

/// Accumulates scale * d(loss)/d(params) into `grad` (same layout as params)
/// given d(loss)/d(logits).
inline void backward(const ClassifierParams& p, std::span<const double> x, const ForwardPass& fp,
                     std::span<const double> dlogits, std::span<double> grad, double scale = 1.0) {
  const auto& a = p.arch();
  const std::size_t n1 = a.input_dim * a.hidden;
  const std::size_t w2_off = n1 + a.hidden;
  const std::size_t b2_off = grad.size() - a.classes;
  for (std::size_t c = 0; c < a.classes; ++c) grad[b2_off + c] += scale * dlogits[c];
  if (a.hidden == 0) {
    for (std::size_t d = 0; d < a.input_dim; ++d) {
      if (x[d] == 0.0) continue;
      for (std::size_t c = 0; c < a.classes; ++c) {
        grad[w2_off + d * a.classes + c] += scale * x[d] * dlogits[c];
      }
    }
    return;
  }
  const auto w2 = p.w2();
  std::vector<double> dhidden(a.hidden, 0.0);
  for (std::size_t h = 0; h < a.hidden; ++h) {
    if (fp.hidden[h] <= 0.0) continue;  // ReLU gate
    double acc = 0.0;
    for (std::size_t c = 0; c < a.classes; ++c) {
      grad[w2_off + h * a.classes + c] += scale * fp.hidden[h] * dlogits[c];
      acc += w2[h * a.classes + c] * dlogits[c];
    }
    dhidden[h] = acc;
  }
  for (std::size_t h = 0; h < a.hidden; ++h) grad[n1 + h] += scale * dhidden[h];
  for (std::size_t d = 0; d < a.input_dim; ++d) {
    if (x[d] == 0.0) continue;
    const double xd = scale * x[d];
    for (std::size_t h = 0; h < a.hidden; ++h) grad[d * a.hidden + h] += xd * dhidden[h];
  }
}

// ---------------------------------------------------------------------------
// Softmax and losses

inline constexpr double kProbabilityFloor = 1e-12;

/// Temperature softmax with max-subtraction.
inline Probabilities softmax_t(std::span<const double> logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  for (const double v : logits) {
    if (!std::isfinite(v)) throw InvalidArgument("non-finite logit");
  }
  Probabilities p(logits.size());
  double m = -INFINITY;
  for (const double v : logits) m = std::max(m, v / temperature);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

/// Loss value and its gradient with respect to the pre-softmax logits.
struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
  bool clamped = false;  // the true-class probability hit the 1e-12 floor
};

/// -log p_t with gradient p - onehot(t).
inline LossGrad cross_entropy(std::span<const double> probs, std::size_t target) {
  if (target >= probs.size()) throw InvalidArgument("target class out of range");
  LossGrad r;
  const double pt = probs[target];
  r.clamped = pt < kProbabilityFloor;
  r.loss = -std::log(std::max(pt, kProbabilityFloor));
  r.grad.assign(probs.begin(), probs.end());
  r.grad[target] -= 1.0;
  return r;
}

/// Single-sample focal loss -alpha_t (1 - p_t)^gamma log p_t.
///
/// With q = 1 - p_t the gradient w.r.t. logit j is
///   -alpha_t * [q^gamma - gamma q^(gamma-1) p_t log p_t] * (delta_tj - p_j).
inline LossGrad focal_loss(std::span<const double> probs, std::size_t target,
                           std::span<const double> alpha, double gamma) {
  if (target >= probs.size()) throw InvalidArgument("target class out of range");
  if (target >= alpha.size()) throw InvalidArgument("alpha has no weight for the target class");
  if (!(gamma >= 0.0)) throw InvalidArgument("gamma must be >= 0");
  LossGrad r;
  const double pt_raw = probs[target];
  r.clamped = pt_raw < kProbabilityFloor;
  const double pt = std::max(pt_raw, kProbabilityFloor);
  const double q = 1.0 - pt_raw;
  const double log_pt = std::log(pt);
  const double a = alpha[target];
  const double q_gamma = std::pow(q, gamma);
  r.loss = -a * q_gamma * log_pt;

  double focus_term = 0.0;  // gamma q^(gamma-1) p_t log p_t
  if (gamma != 0.0 && q > 0.0) focus_term = gamma * std::pow(q, gamma - 1.0) * pt_raw * log_pt;
  const double coeff = -a * (q_gamma - focus_term);
  r.grad.resize(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const double delta = j == target ? 1.0 : 0.0;
    r.grad[j] = coeff * (delta - probs[j]);
  }
  return r;
}

/// Soft cross-entropy -T^2 sum_c softmax(teacher/T)_c log softmax(student/T)_c.
/// Gradient w.r.t. student logits is T (p_student - p_teacher).
inline LossGrad kd_loss(std::span<const double> student, std::span<const double> teacher,
                        double temperature) {
  if (student.size() != teacher.size()) throw InvalidArgument("student/teacher logit lengths differ");
  const auto ps = softmax_t(student, temperature);
  const auto pt = softmax_t(teacher, temperature);
  LossGrad r;
  const double t2 = temperature * temperature;
  double ce = 0.0;
  r.grad.resize(ps.size());
  for (std::size_t c = 0; c < ps.size(); ++c) {
    if (ps[c] < kProbabilityFloor) r.clamped = true;
    ce -= pt[c] * std::log(std::max(ps[c], kProbabilityFloor));
    r.grad[c] = temperature * (ps[c] - pt[c]);
  }
  r.loss = t2 * ce;
  return r;
}

/// Shannon entropy in nats.
inline double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (const double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Loss kinds and training

struct CrossEntropyLoss {
  bool operator==(const CrossEntropyLoss&) const = default;
};
struct FocalLossSpec {
  std::vector<double> alpha;  // per class; empty means "fill in inverse frequency"
  double gamma = 2.0;
  bool operator==(const FocalLossSpec&) const = default;
};
struct DistillLossSpec {
  double temperature = 2.0;
  bool operator==(const DistillLossSpec&) const = default;
};
using LossSpec = std::variant<CrossEntropyLoss, FocalLossSpec, DistillLossSpec>;

/// A class index for CE/focal, teacher logits for distillation.
using Target = std::variant<std::size_t, Logits>;

inline LossGrad loss_on_logits(const LossSpec& spec, std::span<const double> logits, const Target& target) {
  return std::visit(
      [&](const auto& s) -> LossGrad {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, DistillLossSpec>) {
          const auto* teacher = std::get_if<Logits>(&target);
          if (!teacher) throw InvalidArgument("distillation loss needs teacher logits as target");
          return kd_loss(logits, *teacher, s.temperature);
        } else {
          const auto* cls = std::get_if<std::size_t>(&target);
          if (!cls) throw InvalidArgument("classification loss needs a class index as target");
          const auto probs = softmax_t(logits, 1.0);
          if constexpr (std::is_same_v<S, FocalLossSpec>) {
            return focal_loss(probs, *cls, s.alpha, s.gamma);
          } else {
            return cross_entropy(probs, *cls);
          }
        }
      },
      spec);
}

inline nlohmann::ordered_json to_json(const LossSpec& spec) {
  return std::visit(
      [](const auto& s) -> nlohmann::ordered_json {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, CrossEntropyLoss>) {
          return {{"kind", "bce"}};
        } else if constexpr (std::is_same_v<S, FocalLossSpec>) {
          return {{"kind", "focal"}, {"alpha", s.alpha}, {"gamma", s.gamma}};
        } else {
          return {{"kind", "kd"}, {"temperature", s.temperature}};
        }
      },
      spec);
}

inline LossSpec loss_spec_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "bce" || kind == "ce") return CrossEntropyLoss{};
  if (kind == "focal") {
    FocalLossSpec f;
    f.alpha = j.value("alpha", std::vector<double>{});
    f.gamma = j.value("gamma", 2.0);
    return f;
  }
  if (kind == "kd") return DistillLossSpec{j.value("temperature", 2.0)};
  throw FormatError("unknown loss kind '" + kind + "'");
}

struct EarlyStopping {
  std::size_t patience = 5;
  double min_delta = 1e-5;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  LossSpec loss = CrossEntropyLoss{};
  std::optional<EarlyStopping> early_stopping;

  void validate() const {
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw InvalidArgument("learning rate must be finite and >= 0");
    }
    if (const auto* f = std::get_if<FocalLossSpec>(&loss)) {
      if (!(f->gamma >= 0.0)) throw InvalidArgument("focal gamma must be >= 0");
      for (const double a : f->alpha) {
        if (!(a > 0.0)) throw InvalidArgument("focal alpha entries must be > 0");
      }
    }
    if (const auto* k = std::get_if<DistillLossSpec>(&loss)) {
      if (!(k->temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
    }
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j{{"epochs", c.epochs},
                           {"batch_size", c.batch_size},
                           {"learning_rate", c.learning_rate},
                           {"momentum", c.momentum},
                           {"seed", c.seed},
                           {"loss", to_json(c.loss)}};
  if (c.early_stopping) {
    j["early_stopping"] = {{"patience", c.early_stopping->patience},
                           {"min_delta", c.early_stopping->min_delta}};
  }
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {}) {
  TrainConfig c = std::move(defaults);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss")) c.loss = loss_spec_from_json(j["loss"]);
  if (j.contains("early_stopping")) {
    if (j["early_stopping"].is_null()) {
      c.early_stopping.reset();
    } else {
      c.early_stopping = EarlyStopping{j["early_stopping"].value("patience", std::size_t{5}),
                                       j["early_stopping"].value("min_delta", 1e-5)};
    }
  }
  return c;
}

struct TrainExample {
  std::span<const double> x;
  Target target;
};

struct TrainResult {
  ClassifierParams params;
  std::vector<double> loss_trace;  // mean training loss per epoch
};

/// Mini-batch SGD with classical momentum (v <- mu v - lr g; w <- w + v).
/// Epoch e visits examples in a shuffle seeded by (cfg.seed, e).
inline TrainResult train(ClassifierParams init, std::span<const TrainExample> data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw InvalidArgument("training data is empty");
  TrainResult result{std::move(init), {}};
  auto& params = result.params;
  const std::size_t n_params = params.values().size();
  std::vector<double> grad(n_params), velocity(n_params, 0.0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  double best = INFINITY;
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    SplitMix64 rng(derive_seed(cfg.seed, epoch));
    shuffle(std::span<std::size_t>(order), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = data[order[i]];
        const auto fp = forward_pass(params, ex.x);
        if (!std::all_of(fp.logits.begin(), fp.logits.end(), [](double v) { return std::isfinite(v); })) {
          throw DivergenceError("logits became non-finite at epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(batch));
        }
        const auto lg = loss_on_logits(cfg.loss, fp.logits, ex.target);
        if (!std::isfinite(lg.loss)) {
          throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(batch));
        }
        epoch_loss += lg.loss;
        backward(params, ex.x, fp, lg.grad, grad, scale);
      }
      auto w = params.values();
      for (std::size_t k = 0; k < n_params; ++k) {
        velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * grad[k];
        w[k] += velocity[k];
      }
      if (!params.all_finite()) {
        throw DivergenceError("parameters became non-finite at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batch));
      }
    }
    epoch_loss /= static_cast<double>(data.size());
    result.loss_trace.push_back(epoch_loss);

    if (cfg.early_stopping) {
      if (epoch_loss < best - cfg.early_stopping->min_delta) {
        best = epoch_loss;
        stale = 0;
      } else if (++stale >= cfg.early_stopping->patience) {
        break;
      }
    }
  }
  return result;
}

/// Loss of a single example, without gradients.
inline double example_loss(const ClassifierParams& p, std::span<const double> x, const LossSpec& spec,
                           const Target& target) {
  return loss_on_logits(spec, forward(p, x), target).loss;
}

/// Analytic parameter gradient of a single example's loss.
inline std::vector<double> example_gradient(const ClassifierParams& p, std::span<const double> x,
                                            const LossSpec& spec, const Target& target) {
  const auto fp = forward_pass(p, x);
  const auto lg = loss_on_logits(spec, fp.logits, target);
  std::vector<double> grad(p.values().size(), 0.0);
  backward(p, x, fp, lg.grad, grad);
  return grad;
}

/// Largest |g_analytic - g_numeric| / max(1, |g_analytic|, |g_numeric|)
/// over every parameter, with central differences of step h.
inline double grad_check(const ClassifierParams& params, std::span<const double> x, const LossSpec& spec,
                         const Target& target, double h = 1e-5) {
  const auto analytic = example_gradient(params, x, spec, target);
  ClassifierParams probe = params;
  auto w = probe.values();
  double worst = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double orig = w[k];
    w[k] = orig + h;
    const double up = example_loss(probe, x, spec, target);
    w[k] = orig - h;
    const double down = example_loss(probe, x, spec, target);
    w[k] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[k]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
  }
  return worst;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

}  // namespace moekd
