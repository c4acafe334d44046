// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <exception>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "moekd/corpus.hpp"
#include "moekd/error.hpp"
#include "moekd/features.hpp"
#include "moekd/nn.hpp"
#include "moekd/random.hpp"

namespace moekd {

/// Reserved name used to blank out an identifier while probing influence.
inline constexpr const char* kInfluencePlaceholder = "__wir_hole__";

enum class AttackKind { WirRandom, Mhm };

inline std::string to_string(AttackKind k) { return k == AttackKind::WirRandom ? "wir_random" : "mhm"; }

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "wir_random" || s == "wir-random") return AttackKind::WirRandom;
  if (s == "mhm") return AttackKind::Mhm;
  throw FormatError("unknown attack kind '" + s + "'");
}

struct AttackConfig {
  AttackKind kind = AttackKind::WirRandom;
  std::size_t candidates = 30;
  std::size_t max_iterations = 100;
  /// Model queries allowed after the initial prediction (and, for
  /// WIR-Random, after influence ranking). Unset means the attack default:
  /// |identifiers| x candidates for WIR-Random, unlimited for MHM.
  std::optional<std::size_t> query_budget;
  std::uint64_t seed = 0;

  void validate() const {
    if (candidates < 1) throw InvalidArgument("attack needs at least 1 candidate per identifier");
    if (max_iterations < 1) throw InvalidArgument("attack needs at least 1 iteration");
  }
};

inline nlohmann::ordered_json to_json(const AttackConfig& c) {
  nlohmann::ordered_json j{{"kind", to_string(c.kind)},
                           {"candidates", c.candidates},
                           {"max_iterations", c.max_iterations},
                           {"seed", c.seed}};
  j["query_budget"] = c.query_budget ? nlohmann::ordered_json(*c.query_budget) : nlohmann::ordered_json(nullptr);
  return j;
}

inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.kind = attack_kind_from_string(j.at("kind").get<std::string>());
  c.candidates = j.value("candidates", c.candidates);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  if (j.contains("query_budget") && !j["query_budget"].is_null()) c.query_budget = j["query_budget"].get<std::size_t>();
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

struct AttackResult {
  std::string id;
  bool success = false;
  std::map<std::string, std::string> renames;  // original name -> final name
  std::size_t queries = 0;
  std::size_t true_label = 0;
  std::size_t original_prediction = 0;
  std::size_t final_prediction = 0;
  std::string perturbed_code;
};

struct AsrReport {
  std::string attack;
  std::uint64_t seed = 0;
  std::size_t attacked = 0;
  std::size_t flipped = 0;
  std::size_t skipped = 0;
  std::optional<double> asr;  // unset when nothing could be attacked
  std::vector<AttackResult> per_sample;
};

// ---------------------------------------------------------------------------
// Models under attack

/// A model maps a token stream to class probabilities.
template <typename M>
concept CodeClassifier = requires(const M& m, std::span<const Token> tokens) {
  { m.probabilities(tokens) } -> std::convertible_to<Probabilities>;
};

/// A micro classifier over hashed features of its own input dimension.
struct HashedClassifier {
  ClassifierParams params;

  Probabilities probabilities(std::span<const Token> tokens) const {
    return softmax_t(forward(params, featurize(tokens, params.arch().input_dim).values), 1.0);
  }
};

/// Counts every model invocation.
template <CodeClassifier Model>
class QueryOracle {
 public:
  explicit QueryOracle(const Model& model) : model_(model) {}

  Probabilities operator()(std::span<const Token> tokens) {
    ++queries_;
    return model_.probabilities(tokens);
  }
  std::size_t queries() const noexcept { return queries_; }

 private:
  const Model& model_;
  std::size_t queries_ = 0;
};

// ---------------------------------------------------------------------------
// Renaming

/// Replaces every renameable occurrence of `old_name` with `new_name`.
/// Throws when `old_name` is not a renameable identifier, `new_name` is not
/// an identifier, is a keyword, or already names any identifier token.
inline std::vector<Token> rename_identifier(std::span<const Token> tokens, const std::string& old_name,
                                            const std::string& new_name) {
  if (!is_identifier(new_name) || is_keyword(new_name)) {
    throw InvalidArgument("'" + new_name + "' is not a valid identifier");
  }
  const auto mask = renameable_mask(tokens);
  bool found = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].kind != TokenKind::Identifier) continue;
    if (tokens[i].text == new_name) throw InvalidArgument("'" + new_name + "' collides with an existing identifier");
    found = found || (mask[i] && tokens[i].text == old_name);
  }
  if (!found) throw InvalidArgument("'" + old_name + "' is not a renameable identifier");

  std::vector<Token> out(tokens.begin(), tokens.end());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i] && out[i].text == old_name) out[i].text = new_name;
    out[i].offset = offset;
    offset += out[i].text.size();
  }
  return out;
}

/// Empty string when `perturbed` differs from `original` only by the
/// renames; otherwise a description of the first violation.
inline std::string rename_violation(std::string_view original, std::string_view perturbed,
                                    const std::map<std::string, std::string>& renames) {
  const auto a = tokenize(original);
  const auto b = tokenize(perturbed);
  if (a.size() != b.size()) return "token count changed";
  const auto mask = renameable_mask(a);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].kind != b[i].kind) return "token kind changed at index " + std::to_string(i);
    if (a[i].text == b[i].text) {
      if (mask[i] && renames.contains(a[i].text) && renames.at(a[i].text) != a[i].text) {
        return "identifier '" + a[i].text + "' left unrenamed at index " + std::to_string(i);
      }
      continue;
    }
    if (!mask[i]) return "non-renameable token changed at index " + std::to_string(i);
    const auto it = renames.find(a[i].text);
    if (it == renames.end() || it->second != b[i].text) {
      return "identifier '" + a[i].text + "' changed without a matching rename";
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Substitution vocabulary

/// Candidate names: identifiers harvested from a corpus plus a generated
/// pool id_0001, id_0002, ... Sorted and duplicate-free.
inline std::vector<std::string> build_vocabulary(std::span<const CodeSample> corpus, std::size_t fallback = 1000) {
  std::set<std::string> names;
  for (const auto& s : corpus) {
    for (auto& id : extract_identifiers(tokenize(s.code))) names.insert(std::move(id));
  }
  for (std::size_t i = 1; i <= fallback; ++i) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "id_%04zu", i);
    names.insert(buf);
  }
  names.erase(kInfluencePlaceholder);
  return {names.begin(), names.end()};
}

namespace detail {

inline std::unordered_set<std::string> identifier_texts(std::span<const Token> tokens) {
  std::unordered_set<std::string> out;
  for (const auto& t : tokens) {
    if (t.kind == TokenKind::Identifier) out.insert(t.text);
  }
  return out;
}

/// A vocabulary name not used by the sample (originally or currently).
inline std::optional<std::string> draw_candidate(std::span<const std::string> vocab,
                                                 const std::unordered_set<std::string>& original,
                                                 std::span<const Token> current, SplitMix64& rng) {
  if (vocab.empty()) return std::nullopt;
  const auto used = identifier_texts(current);
  for (int attempt = 0; attempt < 64; ++attempt) {
    const auto& name = vocab[rng.below(vocab.size())];
    if (!original.contains(name) && !used.contains(name) && name != kInfluencePlaceholder) return name;
  }
  return std::nullopt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Influence ranking

struct RankedIdentifiers {
  std::vector<std::string> names;
  std::vector<double> influence;  // aligned with names
  Probabilities original_probs;
  double original_p_true = 0.0;
};

/// Ranks renameable identifiers by |p_true(original) - p_true(identifier
/// blanked to the placeholder)|, descending, ties by first occurrence.
/// Costs 1 + |identifiers| queries.
template <CodeClassifier Model>
RankedIdentifiers rank_identifiers_by_influence(QueryOracle<Model>& oracle, std::span<const Token> tokens,
                                                std::size_t true_label) {
  RankedIdentifiers out;
  out.original_probs = oracle(tokens);
  out.original_p_true = out.original_probs.at(true_label);
  const auto ids = extract_identifiers(tokens);
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto probe = rename_identifier(tokens, ids[i], kInfluencePlaceholder);
    scored.emplace_back(std::abs(out.original_p_true - oracle(probe)[true_label]), i);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (const auto& [inf, i] : scored) {
    out.names.push_back(ids[i]);
    out.influence.push_back(inf);
  }
  return out;
}

template <CodeClassifier Model>
RankedIdentifiers rank_identifiers_by_influence(const Model& model, const CodeSample& sample) {
  QueryOracle<Model> oracle(model);
  return rank_identifiers_by_influence(oracle, tokenize(sample.code), static_cast<std::size_t>(sample.label));
}

// ---------------------------------------------------------------------------
// Attacks

namespace detail {

inline void require_correct(std::span<const double> probs, const CodeSample& sample) {
  if (argmax(probs) != static_cast<std::size_t>(sample.label)) {
    throw InvalidArgument("sample '" + sample.id + "' is misclassified before the attack");
  }
}

inline void finish(AttackResult& r, std::span<const Token> tokens, std::span<const double> probs) {
  r.final_prediction = argmax(probs);
  r.success = r.final_prediction != r.true_label;
  r.perturbed_code = join(tokens);
}

}  // namespace detail

/// WIR-Random: visit identifiers by influence; for each, try up to n random
/// substitutions and keep the one that lowers p_true the most, provided it
/// lowers it strictly. Stops at the first misclassification or when the
/// query budget is spent.
template <CodeClassifier Model>
AttackResult wir_random_attack(const Model& model, const CodeSample& sample, std::span<const std::string> vocab,
                               const AttackConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(derive_seed(cfg.seed, sample.id));
  QueryOracle<Model> oracle(model);
  auto tokens = tokenize(sample.code);
  const auto label = static_cast<std::size_t>(sample.label);
  AttackResult r{sample.id, false, {}, 0, label, 0, 0, {}};

  const auto ranked = rank_identifiers_by_influence(oracle, tokens, label);
  const auto& original_probs = ranked.original_probs;
  detail::require_correct(original_probs, sample);
  r.original_prediction = argmax(original_probs);
  const std::size_t ranking_cost = oracle.queries();
  const std::size_t budget = cfg.query_budget.value_or(ranked.names.size() * cfg.candidates);
  const auto original_ids = detail::identifier_texts(tokens);

  double p_current = ranked.original_p_true;
  Probabilities current_probs = original_probs;
  for (const auto& name : ranked.names) {
    const std::string current_name = r.renames.contains(name) ? r.renames[name] : name;
    std::optional<std::string> best;
    double best_p = p_current;
    std::vector<Token> best_tokens;
    Probabilities best_probs;
    bool flipped = false;
    for (std::size_t c = 0; c < cfg.candidates; ++c) {
      if (oracle.queries() - ranking_cost >= budget) break;
      const auto cand = detail::draw_candidate(vocab, original_ids, tokens, rng);
      if (!cand) break;
      auto trial = rename_identifier(tokens, current_name, *cand);
      auto probs = oracle(trial);
      if (probs[label] < best_p || argmax(probs) != label) {
        best = cand;
        best_p = probs[label];
        best_tokens = std::move(trial);
        best_probs = std::move(probs);
        if (argmax(best_probs) != label) {
          flipped = true;
          break;
        }
      }
    }
    if (best) {
      tokens = std::move(best_tokens);
      current_probs = std::move(best_probs);
      p_current = best_p;
      r.renames[name] = *best;
    }
    if (flipped || oracle.queries() - ranking_cost >= budget) break;
  }
  r.queries = oracle.queries();
  detail::finish(r, tokens, current_probs);
  return r;
}

/// Acceptance probability min(1, (1 - p_new) / (1 - p_current)); equal
/// probabilities accept with certainty.
inline double mhm_acceptance(double p_current, double p_new) {
  if (p_new <= p_current) return 1.0;
  const double denom = 1.0 - p_current;
  if (!(denom > 0.0)) return 1.0;
  return std::min(1.0, (1.0 - p_new) / denom);
}

/// Metropolis-Hastings renaming: each iteration picks an identifier
/// uniformly, scores n candidate names, proposes the best one and accepts
/// it with mhm_acceptance. Stops at the first misclassification.
template <CodeClassifier Model>
AttackResult mhm_attack(const Model& model, const CodeSample& sample, std::span<const std::string> vocab,
                        const AttackConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(derive_seed(cfg.seed, sample.id));
  QueryOracle<Model> oracle(model);
  auto tokens = tokenize(sample.code);
  const auto label = static_cast<std::size_t>(sample.label);
  AttackResult r{sample.id, false, {}, 0, label, 0, 0, {}};

  auto current_probs = oracle(tokens);
  detail::require_correct(current_probs, sample);
  r.original_prediction = argmax(current_probs);
  const std::size_t budget = cfg.query_budget.value_or(std::numeric_limits<std::size_t>::max());
  const auto ids = extract_identifiers(tokens);
  const auto original_ids = detail::identifier_texts(tokens);

  for (std::size_t iter = 0; iter < cfg.max_iterations && !ids.empty(); ++iter) {
    if (argmax(current_probs) != label) break;
    if (oracle.queries() - 1 >= budget) break;
    const auto& name = ids[rng.below(ids.size())];
    const std::string current_name = r.renames.contains(name) ? r.renames[name] : name;

    std::optional<std::string> best;
    std::vector<Token> best_tokens;
    Probabilities best_probs;
    for (std::size_t c = 0; c < cfg.candidates && oracle.queries() - 1 < budget; ++c) {
      const auto cand = detail::draw_candidate(vocab, original_ids, tokens, rng);
      if (!cand) break;
      auto trial = rename_identifier(tokens, current_name, *cand);
      auto probs = oracle(trial);
      if (!best || probs[label] < best_probs[label]) {
        best = cand;
        best_tokens = std::move(trial);
        best_probs = std::move(probs);
      }
    }
    if (!best) continue;
    const double u = rng.unit();
    if (u < mhm_acceptance(current_probs[label], best_probs[label])) {
      tokens = std::move(best_tokens);
      current_probs = std::move(best_probs);
      r.renames[name] = *best;
    }
  }
  r.queries = oracle.queries();
  detail::finish(r, tokens, current_probs);
  return r;
}

template <CodeClassifier Model>
AttackResult run_attack(const Model& model, const CodeSample& sample, std::span<const std::string> vocab,
                        const AttackConfig& cfg) {
  return cfg.kind == AttackKind::WirRandom ? wir_random_attack(model, sample, vocab, cfg)
                                           : mhm_attack(model, sample, vocab, cfg);
}

// ---------------------------------------------------------------------------
// Attack success rate

/// Attacks every test sample the model classifies correctly; ASR is the
/// fraction of those that end up misclassified. Each sample draws from
/// its own stream derived from (cfg.seed, id), so the report does not
/// depend on `threads`.
template <CodeClassifier Model>
AsrReport evaluate_asr(const Model& model, std::span<const CodeSample> test, std::span<const std::string> vocab,
                       const AttackConfig& cfg, std::size_t threads = 1) {
  cfg.validate();
  if (test.empty()) throw InvalidArgument("test set is empty");
  std::vector<std::optional<AttackResult>> results(test.size());
  std::vector<std::exception_ptr> errors(test.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < test.size(); i = next++) {
      try {
        const auto& s = test[i];
        const auto probs = model.probabilities(tokenize(s.code));
        if (argmax(probs) != static_cast<std::size_t>(s.label)) continue;
        results[i] = run_attack(model, s, vocab, cfg);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  threads = std::max<std::size_t>(1, threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AsrReport report;
  report.attack = to_string(cfg.kind);
  report.seed = cfg.seed;
  for (auto& r : results) {
    if (!r) {
      ++report.skipped;
      continue;
    }
    ++report.attacked;
    if (r->success) ++report.flipped;
    report.per_sample.push_back(std::move(*r));
  }
  if (report.attacked > 0) {
    report.asr = static_cast<double>(report.flipped) / static_cast<double>(report.attacked);
  }
  return report;
}

inline nlohmann::ordered_json to_json(const AttackResult& r) {
  nlohmann::ordered_json renames = nlohmann::ordered_json::object();
  for (const auto& [from, to] : r.renames) renames[from] = to;
  return {{"id", r.id},
          {"success", r.success},
          {"queries", r.queries},
          {"true_label", r.true_label},
          {"original_prediction", r.original_prediction},
          {"final_prediction", r.final_prediction},
          {"renames", renames}};
}

inline nlohmann::ordered_json to_json(const AsrReport& r) {
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& s : r.per_sample) per.push_back(to_json(s));
  return {{"attack", r.attack},
          {"seed", r.seed},
          {"attacked", r.attacked},
          {"flipped", r.flipped},
          {"asr", r.asr ? nlohmann::ordered_json(*r.asr) : nlohmann::ordered_json(nullptr)},
          {"skipped", r.skipped},
          {"per_sample", per}};
}

/// One {"id", "code", "renames"} line per attacked sample, for audit.
inline std::string perturbed_jsonl(const AsrReport& r) {
  std::string out;
  for (const auto& s : r.per_sample) {
    nlohmann::ordered_json j{{"id", s.id}, {"success", s.success}, {"code", s.perturbed_code}};
    j["renames"] = to_json(s)["renames"];
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace moekd
