// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "fixtures.hpp"
#include "moekd/attacks.hpp"

using namespace moekd;
using moekd::testing::World;

namespace {

// p(vulnerable) is 0.9 while an identifier named "danger" is present.
struct KeywordModel {
  Probabilities probabilities(std::span<const Token> tokens) const {
    const bool hit = std::any_of(tokens.begin(), tokens.end(), [](const Token& t) {
      return t.kind == TokenKind::Identifier && t.text == "danger";
    });
    return hit ? Probabilities{0.1, 0.9} : Probabilities{0.8, 0.2};
  }
};

// Ignores its input.
struct ConstantModel {
  Probabilities probabilities(std::span<const Token>) const { return {0.3, 0.7}; }
};

CodeSample vuln(std::string code, std::string id = "v") { return {std::move(id), std::move(code), 1, "CWE-1", "p", 1}; }

std::vector<std::string> small_vocab() {
  return build_vocabulary(std::span<const CodeSample>{}, 50);
}

}  // namespace

TEST(Rename, AllUsesButNotFields) {
  const auto t = tokenize("int len = p->len; len++; q.len = len;");
  const auto r = rename_identifier(t, "len", "n");
  EXPECT_EQ(join(r), "int n = p->len; n++; q.len = n;");
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_EQ(r[i].offset, r[i - 1].offset + r[i - 1].length());
}

TEST(Rename, RejectsInvalidTargets) {
  const auto t = tokenize("int a = b; s->c = a;");
  EXPECT_THROW((void)rename_identifier(t, "a", "while"), InvalidArgument);
  EXPECT_THROW((void)rename_identifier(t, "a", "9x"), InvalidArgument);
  EXPECT_THROW((void)rename_identifier(t, "a", "b"), InvalidArgument);
  EXPECT_THROW((void)rename_identifier(t, "a", "c"), InvalidArgument);  // collides with a field name
  EXPECT_THROW((void)rename_identifier(t, "c", "z"), InvalidArgument);  // field, not renameable
  EXPECT_THROW((void)rename_identifier(t, "missing", "z"), InvalidArgument);
}

TEST(Rename, ViolationDetector) {
  const std::string a = "int a = b + 1;";
  EXPECT_EQ(rename_violation(a, "int z = b + 1;", {{"a", "z"}}), "");
  EXPECT_NE(rename_violation(a, "int z = b + 2;", {{"a", "z"}}), "");
  EXPECT_NE(rename_violation(a, "int z = b + 1;", {}), "");
  EXPECT_NE(rename_violation(a, "long z = b + 1;", {{"a", "z"}}), "");
  EXPECT_NE(rename_violation("int a = a;", "int z = a;", {{"a", "z"}}), "");
}

TEST(Vocabulary, SortedWithFallbackPool) {
  std::vector<CodeSample> c = {{"x", "int zeta = alpha;", 0, {}, "p", 1}};
  const auto v = build_vocabulary(c, 3);
  EXPECT_EQ(v, (std::vector<std::string>{"alpha", "id_0001", "id_0002", "id_0003", "zeta"}));
  EXPECT_EQ(build_vocabulary(std::span<const CodeSample>{}).size(), 1000u);
}

TEST(Mhm, AcceptanceOracle) {
  EXPECT_DOUBLE_EQ(mhm_acceptance(0.8, 0.9), 0.5);
  EXPECT_DOUBLE_EQ(mhm_acceptance(0.8, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(mhm_acceptance(0.8, 0.8), 1.0);
  EXPECT_DOUBLE_EQ(mhm_acceptance(1.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(mhm_acceptance(0.5, 1.0), 0.0);
}

TEST(Influence, RankingCostAndOrder) {
  const KeywordModel m;
  QueryOracle<KeywordModel> oracle(m);
  const auto t = tokenize("int x = danger(y);");
  const auto r = rank_identifiers_by_influence(oracle, t, 1);
  EXPECT_EQ(oracle.queries(), 4u);
  EXPECT_EQ(r.names, (std::vector<std::string>{"danger", "x", "y"}));
  EXPECT_NEAR(r.influence[0], 0.7, 1e-15);
  EXPECT_EQ(r.influence[1], 0.0);
}

TEST(Wir, FlipsOnFirstCandidate) {
  const KeywordModel m;
  AttackConfig cfg;
  cfg.seed = 1;
  const auto vocab = small_vocab();
  const auto s = vuln("int x = danger(y);");
  const auto r = wir_random_attack(m, s, vocab, cfg);
  EXPECT_TRUE(r.success);
  EXPECT_EQ(r.queries, 1u + 3u + 1u);
  ASSERT_EQ(r.renames.size(), 1u);
  EXPECT_TRUE(r.renames.contains("danger"));
  EXPECT_EQ(rename_violation(s.code, r.perturbed_code, r.renames), "");
  EXPECT_EQ(r.final_prediction, 0u);
}

TEST(Wir, SpendsExactlyTheDefaultBudget) {
  const ConstantModel m;
  AttackConfig cfg;
  cfg.candidates = 5;
  const auto vocab = small_vocab();
  const auto r = wir_random_attack(m, vuln("int a = b + c;"), vocab, cfg);
  EXPECT_FALSE(r.success);
  EXPECT_EQ(r.queries, 1u + 3u + 3u * 5u);
  EXPECT_TRUE(r.renames.empty());  // nothing lowered p_true strictly
}

TEST(Wir, ExplicitBudget) {
  const ConstantModel m;
  AttackConfig cfg;
  cfg.candidates = 5;
  cfg.query_budget = 7;
  const auto vocab = small_vocab();
  EXPECT_EQ(wir_random_attack(m, vuln("int a = b + c;"), vocab, cfg).queries, 1u + 3u + 7u);
}

TEST(Wir, NoIdentifiers) {
  const ConstantModel m;
  const auto vocab = small_vocab();
  const auto r = wir_random_attack(m, vuln("return 1;"), vocab, AttackConfig{});
  EXPECT_FALSE(r.success);
  EXPECT_EQ(r.queries, 1u);
  EXPECT_EQ(r.perturbed_code, "return 1;");
}

TEST(Wir, MisclassifiedInputRejected) {
  const KeywordModel m;
  const auto vocab = small_vocab();
  EXPECT_THROW((void)wir_random_attack(m, vuln("int x = y;"), vocab, AttackConfig{}), InvalidArgument);
}

TEST(Mhm, QueryAccounting) {
  const ConstantModel m;
  AttackConfig cfg;
  cfg.kind = AttackKind::Mhm;
  cfg.candidates = 4;
  cfg.max_iterations = 10;
  const auto vocab = small_vocab();
  const auto s = vuln("int a = b + c;");
  const auto r = mhm_attack(m, s, vocab, cfg);
  EXPECT_EQ(r.queries, 1u + 10u * 4u);
  EXPECT_FALSE(r.success);
  EXPECT_EQ(rename_violation(s.code, r.perturbed_code, r.renames), "");
}

TEST(Mhm, FindsTheSignal) {
  const KeywordModel m;
  AttackConfig cfg;
  cfg.kind = AttackKind::Mhm;
  cfg.seed = 3;
  const auto vocab = small_vocab();
  const auto r = mhm_attack(m, vuln("int x = danger(y);"), vocab, cfg);
  EXPECT_TRUE(r.success);
  EXPECT_TRUE(r.renames.contains("danger"));
}

TEST(Mhm, BudgetCapsQueries) {
  const ConstantModel m;
  AttackConfig cfg;
  cfg.kind = AttackKind::Mhm;
  cfg.candidates = 4;
  cfg.query_budget = 6;
  const auto vocab = small_vocab();
  EXPECT_EQ(mhm_attack(m, vuln("int a = b;"), vocab, cfg).queries, 7u);
}

TEST(Asr, SkipsMisclassifiedAndCountsFlips) {
  const KeywordModel m;
  std::vector<CodeSample> test = {vuln("int x = danger(y);", "a"), vuln("int x = y;", "b"),
                                  {"c", "int q = r;", 0, {}, "p", 1}};
  const auto vocab = small_vocab();
  const auto rep = evaluate_asr(m, test, vocab, AttackConfig{});
  EXPECT_EQ(rep.attacked, 2u);
  EXPECT_EQ(rep.skipped, 1u);
  EXPECT_EQ(rep.flipped, 1u);
  ASSERT_TRUE(rep.asr);
  EXPECT_DOUBLE_EQ(*rep.asr, 0.5);
}

TEST(Asr, UndefinedWhenNothingAttackable) {
  const KeywordModel m;
  std::vector<CodeSample> test = {vuln("int x = y;", "b")};
  const auto vocab = small_vocab();
  const auto rep = evaluate_asr(m, test, vocab, AttackConfig{});
  EXPECT_FALSE(rep.asr);
  EXPECT_TRUE(to_json(rep)["asr"].is_null());
  EXPECT_THROW((void)evaluate_asr(m, std::span<const CodeSample>{}, vocab, AttackConfig{}), InvalidArgument);
}

TEST(Asr, ThreadCountDoesNotChangeResults) {
  World w(21, 40, 64);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 1;
  std::vector<TrainExample> data;
  for (const auto& s : w.expert_train) data.push_back({w.features.features(s.id), static_cast<std::size_t>(s.label)});
  const HashedClassifier model{train(init_params({64, 0, 2}, 1), data, cfg).params};
  const auto vocab = build_vocabulary(w.expert_train);
  for (const auto kind : {AttackKind::WirRandom, AttackKind::Mhm}) {
    AttackConfig ac;
    ac.kind = kind;
    ac.seed = 99;
    ac.candidates = 5;
    ac.max_iterations = 10;
    const auto one = evaluate_asr(model, w.test, vocab, ac, 1);
    const auto three = evaluate_asr(model, w.test, vocab, ac, 3);
    EXPECT_EQ(to_json(one).dump(), to_json(three).dump());
    EXPECT_EQ(perturbed_jsonl(one), perturbed_jsonl(three));
    for (const auto& r : one.per_sample) {
      const auto& orig = *std::find_if(w.test.begin(), w.test.end(), [&](const auto& s) { return s.id == r.id; });
      EXPECT_EQ(rename_violation(orig.code, r.perturbed_code, r.renames), "") << r.id;
      EXPECT_EQ(r.success, r.final_prediction != r.true_label);
    }
  }
}

TEST(AttackConfig, JsonRoundTrip) {
  AttackConfig c;
  c.kind = AttackKind::Mhm;
  c.query_budget = 12;
  const auto back = attack_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_THROW((void)attack_kind_from_string("greedy"), FormatError);
}

TEST(Wir, ZeroBudgetSpendsOnlyTheRanking) {
  const ConstantModel m;
  AttackConfig cfg;
  cfg.query_budget = 0;
  const auto vocab = small_vocab();
  const auto s = vuln("int a = b + c;");
  const auto r = wir_random_attack(m, s, vocab, cfg);
  EXPECT_EQ(r.queries, 1u + 3u);
  EXPECT_FALSE(r.success);
  EXPECT_EQ(r.perturbed_code, s.code);
}

TEST(Mhm, ZeroBudgetSpendsOnlyTheInitialQuery) {
  const KeywordModel m;
  AttackConfig cfg;
  cfg.kind = AttackKind::Mhm;
  cfg.query_budget = 0;
  const auto vocab = small_vocab();
  const auto r = mhm_attack(m, vuln("int x = danger(y);"), vocab, cfg);
  EXPECT_EQ(r.queries, 1u);
  EXPECT_FALSE(r.success);
}

TEST(Rename, RenamingBackRestoresTheSource) {
  const World w(3, 30, 64);
  std::size_t checked = 0;
  for (const auto& s : w.corpus.samples) {
    const auto tokens = tokenize(s.code);
    const auto mask = renameable_mask(tokens);
    for (const auto& name : extract_identifiers(tokens)) {
      bool also_field = false;
      for (std::size_t i = 0; i < tokens.size(); ++i) also_field |= !mask[i] && tokens[i].text == name;
      const auto there = rename_identifier(tokens, name, "zz_fresh");
      if (also_field) {
        // The field keeps the old name, so renaming back would collide.
        EXPECT_THROW((void)rename_identifier(there, "zz_fresh", name), InvalidArgument);
        continue;
      }
      EXPECT_EQ(join(rename_identifier(there, "zz_fresh", name)), s.code) << s.id << " " << name;
      ++checked;
    }
  }
  EXPECT_GT(checked, 100u);
}

TEST(Influence, ZeroModelKeepsFirstOccurrenceOrder) {
  const HashedClassifier zero{ClassifierParams({64, 0, 2})};
  const auto s = vuln("int off = sig; off = buf[idx] + sig;");
  const auto r = rank_identifiers_by_influence(zero, s);
  EXPECT_EQ(r.names, extract_identifiers(tokenize(s.code)));
  for (const double v : r.influence) EXPECT_EQ(v, 0.0);
}

TEST(Asr, RenamesAreInjectiveAndFresh) {
  World w(22, 40, 64);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 2;
  std::vector<TrainExample> data;
  for (const auto& s : w.expert_train) data.push_back({w.features.features(s.id), static_cast<std::size_t>(s.label)});
  const HashedClassifier model{train(init_params({64, 0, 2}, 2), data, cfg).params};
  const auto vocab = build_vocabulary(w.expert_train);
  for (const auto kind : {AttackKind::WirRandom, AttackKind::Mhm}) {
    AttackConfig ac;
    ac.kind = kind;
    ac.candidates = 5;
    ac.max_iterations = 20;
    const auto rep = evaluate_asr(model, w.test, vocab, ac, 2);
    std::size_t renamed = 0;
    for (const auto& r : rep.per_sample) {
      const auto& orig = *std::find_if(w.test.begin(), w.test.end(), [&](const auto& s) { return s.id == r.id; });
      const auto originals = extract_identifiers(tokenize(orig.code));
      std::set<std::string> targets;
      for (const auto& [from, to] : r.renames) {
        EXPECT_TRUE(targets.insert(to).second) << r.id << ": two names renamed to " << to;
        EXPECT_EQ(std::find(originals.begin(), originals.end(), to), originals.end()) << r.id << ": " << to;
        ++renamed;
      }
    }
    EXPECT_GT(renamed, 0u);
  }
}
