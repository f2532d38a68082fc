// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "gtest/gtest.h"
#include "ps/search.hpp"
#include "ps/validate.hpp"

namespace ps {
namespace {

struct Task {
  ScorerHandle target;
  ScorerHandle draft;
  AttackInstance inst;
};

Task toy_task(std::uint64_t seed, std::size_t V = 16, std::size_t suffix_len = 4) {
  SeededRng rng(seed);
  auto tp = ToyLmParams::random({V, 6, 8, 4, 0.9}, rng, 1.0);
  SeededRng trng(seed + 1);
  auto dp = tp.truncated(2, 3, 0.05, trng);
  auto v = Vocabulary::make(V);
  auto inst = make_instance(TokenSeq({1, 2}, v), suffix_len, TokenSeq({3, 4}, v), 0, rng);
  return {ToyScorer::make(std::move(tp), "target"), ToyScorer::make(std::move(dp), "draft"), std::move(inst)};
}

SearchConfig small_config() {
  SearchConfig c;
  c.batch_size = 64;
  c.top_k = 8;
  c.probe_size = 8;
  c.reduction = 4.0;
  c.steps = 10;
  c.seed = 3;
  return c;
}

// Forwards to an inner scorer and fails its n-th losses() call.
class FailingScorer final : public Scorer {
 public:
  FailingScorer(ScorerHandle inner, int fail_on) : inner_(std::move(inner)), fail_on_(fail_on) {}
  const ScorerInfo& info() const override { return inner_->info(); }
  std::size_t vocab_size() const override { return inner_->vocab_size(); }
  std::vector<double> losses(const AttackInstance& inst, std::span<const TokenSeq> s) override {
    if (++calls_ == fail_on_) throw BatchError("injected failure", std::nullopt);
    return inner_->losses(inst, s);
  }
  std::vector<std::vector<TokenId>> topk(const AttackInstance& inst, std::size_t k) override {
    return inner_->topk(inst, k);
  }

 private:
  ScorerHandle inner_;
  int fail_on_;
  int calls_ = 0;
};

TEST(FilteredSize, Law) {
  EXPECT_EQ(filtered_set_size(0.0, 512, 8.0), 64u);
  EXPECT_EQ(filtered_set_size(0.5, 512, 8.0), 32u);
  EXPECT_EQ(filtered_set_size(1.0, 512, 8.0), 1u);
  EXPECT_EQ(filtered_set_size(0.99, 512, 8.0), 1u);
  EXPECT_EQ(filtered_set_size(0.0, 512, 1.0), 512u);
  EXPECT_EQ(filtered_set_size(0.3, 10, 3.0), 2u);
  for (double a = 0.0; a <= 1.0; a += 0.01) {
    const auto n = filtered_set_size(a, 100, 2.0);
    EXPECT_GE(n, 1u);
    EXPECT_LE(n, 100u);
  }
}

TEST(Candidates, SingleSubstitutionFromShortlist) {
  auto t = toy_task(1);
  const auto cb = generate_candidates(*t.target, t.inst, 200, 5, SeededRng(9));
  ASSERT_EQ(cb.size(), 200u);
  for (std::size_t i = 0; i < cb.size(); ++i) {
    EXPECT_LE(hamming(cb.suffixes[i], t.inst.suffix()), 1u);
    const auto& e = cb.edits[i];
    const auto& list = cb.shortlist[e.position];
    EXPECT_NE(std::find(list.begin(), list.end(), e.token), list.end());
    EXPECT_EQ(cb.suffixes[i], substitute(t.inst.suffix(), e.position, e.token));
  }
}

TEST(Candidates, TopOneUsesBestTokenOnly) {
  auto t = toy_task(2);
  const auto cb = generate_candidates(*t.target, t.inst, 100, 1, SeededRng(1));
  for (const auto& e : cb.edits) EXPECT_EQ(e.token, cb.shortlist[e.position][0]);
}

TEST(Candidates, UniformOverPositionsAndTokens) {
  // K = V: each (position, token) cell has probability 1/32. Chi-square with
  // 31 degrees of freedom against its 0.999 quantile.
  auto t = toy_task(3, 8, 4);
  const auto cb = generate_candidates(*t.target, t.inst, 10000, 8, SeededRng(2024));
  std::map<std::pair<std::size_t, TokenId>, int> counts;
  for (const auto& e : cb.edits) ++counts[{e.position, e.token}];
  EXPECT_EQ(counts.size(), 32u);
  const double expected = 10000.0 / 32.0;
  double chi2 = 0.0;
  for (const auto& [cell, n] : counts) chi2 += (n - expected) * (n - expected) / expected;
  EXPECT_LT(chi2, 61.098306081058126);
}

TEST(Candidates, DeterministicInStream) {
  auto t = toy_task(4);
  const auto a = generate_candidates(*t.target, t.inst, 50, 4, SeededRng(5));
  const auto b = generate_candidates(*t.target, t.inst, 50, 4, SeededRng(5));
  EXPECT_EQ(a.suffixes, b.suffixes);
  EXPECT_THROW(generate_candidates(*t.target, t.inst, 0, 4, SeededRng(5)), ValidationError);
}

TEST(Gcg, BatchOfOne) {
  auto t = toy_task(5);
  auto cfg = small_config();
  cfg.batch_size = 1;
  cfg.probe_size = 1;
  const auto out = gcg_step(*t.target, t.inst, cfg, SeededRng(1));
  EXPECT_EQ(out.report.best_index, 0u);
  EXPECT_EQ(out.report.target_evals, 1u);
}

TEST(Gcg, TiesGoToLowestIndex) {
  auto scorer = ToyScorer::make(ToyLmParams::zeros({8, 2, 2, 2, 1.0}), "uniform");
  auto v = Vocabulary::make(8);
  AttackInstance inst(TokenSeq({1}, v), TokenSeq({2, 3}, v), TokenSeq({4}, v));
  auto cfg = small_config();
  const auto out = gcg_step(*scorer, inst, cfg, SeededRng(7));
  EXPECT_EQ(out.report.best_index, 0u);
}

TEST(Gcg, FindsBestSingleSubstitution) {
  // K = V = 16, L = 4: 64 substitutions; B = 2048 covers all of them with
  // overwhelming probability, so the step must hit the exhaustive minimum.
  auto t = toy_task(6, 16, 4);
  auto& toy = static_cast<ToyScorer&>(*t.target);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t pos = 0; pos < 4; ++pos)
    for (TokenId tok = 0; tok < 16; ++tok)
      best = std::min(best, nll_loss(toy.params(), t.inst.with_suffix(substitute(t.inst.suffix(), pos, tok))));
  auto cfg = small_config();
  cfg.batch_size = 2048;
  cfg.top_k = 16;
  const auto out = gcg_step(*t.target, t.inst, cfg, SeededRng(8));
  EXPECT_EQ(out.report.best_loss, best);
}

TEST(Gcg, ReplacesSuffixUnconditionally) {
  auto t = toy_task(7);
  auto cfg = small_config();
  const auto out = gcg_step(*t.target, t.inst, cfg, SeededRng(1));
  EXPECT_EQ(out.suffix.vec(), out.report.suffix);
  EXPECT_EQ(out.report.current_loss, out.report.best_loss);
}

TEST(Probe, SelfAgreementGivesAlphaOne) {
  auto t = toy_task(8);
  auto cfg = small_config();
  const auto out = probe_sampling_step(*t.target, *t.target, t.inst, cfg, SeededRng(2));
  ASSERT_TRUE(out.report.alpha.has_value());
  EXPECT_EQ(*out.report.alpha, 1.0);
  EXPECT_EQ(*out.report.filtered_size, 1u);
}

TEST(Probe, SelectionIsArgminOverEvaluatedSet) {
  auto t = toy_task(9);
  auto& toy = static_cast<ToyScorer&>(*t.target);
  auto cfg = small_config();
  for (std::uint64_t s = 0; s < 20; ++s) {
    const SeededRng rng(100 + s);
    const auto out = probe_sampling_step(*t.target, *t.draft, t.inst, cfg, rng);
    const auto cands = generate_candidates(*t.target, t.inst, cfg.batch_size, cfg.top_k, rng.child(stream::kCandidates));
    std::set<std::size_t> evaluated(out.report.probe_indices.begin(), out.report.probe_indices.end());
    evaluated.insert(out.report.filtered_indices.begin(), out.report.filtered_indices.end());
    EXPECT_EQ(out.report.target_evals, evaluated.size());
    std::size_t best = *evaluated.begin();
    double best_loss = std::numeric_limits<double>::infinity();
    for (auto i : evaluated) {
      const double l = nll_loss(toy.params(), t.inst.with_suffix(cands.suffixes[i]));
      if (l < best_loss) {
        best_loss = l;
        best = i;
      }
    }
    EXPECT_EQ(out.report.best_index, best);
    EXPECT_EQ(out.report.best_loss, best_loss);
    EXPECT_EQ(out.suffix, cands.suffixes[best]);
  }
}

TEST(Probe, FilteredSetIsDraftTopRanked) {
  auto t = toy_task(10);
  auto cfg = small_config();
  const SeededRng rng(4);
  const auto out = probe_sampling_step(*t.target, *t.draft, t.inst, cfg, rng);
  const auto cands = generate_candidates(*t.target, t.inst, cfg.batch_size, cfg.top_k, rng.child(stream::kCandidates));
  const auto dl = loss_batch(*t.draft, t.inst, cands.suffixes).losses;
  const auto& f = out.report.filtered_indices;
  ASSERT_EQ(f.size(), filtered_set_size(*out.report.alpha, cfg.batch_size, cfg.reduction));
  double worst_kept = -std::numeric_limits<double>::infinity();
  for (auto i : f) worst_kept = std::max(worst_kept, dl[i]);
  std::set<std::size_t> kept(f.begin(), f.end());
  for (std::size_t i = 0; i < dl.size(); ++i)
    if (!kept.count(i)) {
      EXPECT_GE(dl[i], worst_kept);
    }
}

TEST(Probe, FlopsIdentityAndEvalBound) {
  auto t = toy_task(11);
  auto cfg = small_config();
  const double per_cand = static_cast<double>(t.inst.total_length());
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto out = probe_sampling_step(*t.target, *t.draft, t.inst, cfg, SeededRng(s));
    const auto& r = out.report;
    EXPECT_EQ(r.flops_target, static_cast<double>(r.target_evals) * per_cand * t.target->info().flops_per_token);
    EXPECT_EQ(r.flops_draft, static_cast<double>(r.draft_evals) * per_cand * t.draft->info().flops_per_token);
    EXPECT_EQ(r.draft_evals, cfg.batch_size);
    EXPECT_LE(r.target_evals, *r.probe_size + *r.filtered_size);
    EXPECT_GE(r.target_evals, std::max(*r.probe_size, *r.filtered_size));
    EXPECT_EQ(r.flops_gradient, 3.0 * per_cand * t.target->info().flops_per_token);
  }
}

TEST(Probe, ConstantDraftFallsBack) {
  auto t = toy_task(12);
  auto flat = ToyScorer::make(ToyLmParams::zeros({16, 2, 2, 2, 1.0}), "flat");
  auto cfg = small_config();
  const auto out = probe_sampling_step(*t.target, *flat, t.inst, cfg, SeededRng(1));
  EXPECT_TRUE(out.report.alpha_fallback);
  EXPECT_EQ(*out.report.alpha, 0.5);
  EXPECT_EQ(*out.report.filtered_size, filtered_set_size(0.5, 64, 4.0));
}

TEST(Probe, SingleProbeFallsBack) {
  auto t = toy_task(12);
  auto cfg = small_config();
  cfg.probe_size = 1;
  const auto out = probe_sampling_step(*t.target, *t.draft, t.inst, cfg, SeededRng(1));
  EXPECT_TRUE(out.report.alpha_fallback);
  EXPECT_EQ(*out.report.alpha, 0.5);
}

TEST(Probe, FixedAlphaOverridesAgreement) {
  auto t = toy_task(13);
  auto cfg = small_config();
  cfg.filter = FilterPolicy::kFixed;
  cfg.fixed_alpha = 0.25;
  const auto out = probe_sampling_step(*t.target, *t.draft, t.inst, cfg, SeededRng(1));
  EXPECT_EQ(*out.report.alpha, 0.25);
  EXPECT_EQ(*out.report.filtered_size, filtered_set_size(0.25, 64, 4.0));
}

TEST(Probe, ParallelMatchesSequential) {
  auto t = toy_task(14);
  auto cfg = small_config();
  for (std::uint64_t s = 0; s < 10; ++s) {
    cfg.parallel = true;
    const auto a = probe_sampling_step(*t.target, *t.draft, t.inst, cfg, SeededRng(s));
    cfg.parallel = false;
    const auto b = probe_sampling_step(*t.target, *t.draft, t.inst, cfg, SeededRng(s));
    EXPECT_EQ(a.suffix, b.suffix);
    EXPECT_EQ(a.report.alpha, b.report.alpha);
    EXPECT_EQ(a.report.probe_indices, b.report.probe_indices);
    EXPECT_EQ(a.report.filtered_indices, b.report.filtered_indices);
    EXPECT_EQ(a.report.best_loss, b.report.best_loss);
  }
}

TEST(Probe, DegenerateSettingsReduceToGcg) {
  const auto r = checks::degenerate_equivalence(11, 100);
  EXPECT_TRUE(r.pass) << r.detail;
}

TEST(Anneal, AcceptanceProbability) {
  EXPECT_EQ(acceptance_probability(-1.0, 1.0), 1.0);
  EXPECT_EQ(acceptance_probability(0.0, 0.0), 1.0);
  EXPECT_EQ(acceptance_probability(0.5, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(acceptance_probability(1.0, 1.0), std::exp(-1.0));
  EXPECT_DOUBLE_EQ(acceptance_probability(2.0, 0.5), std::exp(-4.0));
}

TEST(Anneal, MetropolisFrequency) {
  SeededRng rng(99);
  const int n = 100000;
  int accepted = 0;
  for (int i = 0; i < n; ++i) accepted += metropolis_accept(1.0, 1.0, rng) ? 1 : 0;
  const double p = std::exp(-1.0);
  const double sd = std::sqrt(p * (1 - p) / n);
  EXPECT_NEAR(static_cast<double>(accepted) / n, p, 5 * sd);
}

TEST(Anneal, HalfAcceptanceAtLnTwo) {
  SeededRng rng(2026);
  int accepted = 0;
  for (int i = 0; i < 10000; ++i) accepted += metropolis_accept(std::log(2.0), 1.0, rng) ? 1 : 0;
  EXPECT_NEAR(accepted / 10000.0, 0.5, 0.02);
  for (int i = 0; i < 1000; ++i) EXPECT_TRUE(metropolis_accept(-rng.uniform01(), 1e-9, rng));
}

TEST(Anneal, Schedules) {
  SearchConfig cfg;
  cfg.batch_size = 512;
  EXPECT_EQ(annealed_batch_size(cfg, 0), 512u);
  EXPECT_EQ(annealed_batch_size(cfg, 1), 509u);  // round(512 * 0.995) = 509.44
  EXPECT_EQ(annealed_batch_size(cfg, 100000), 64u);
  EXPECT_DOUBLE_EQ(annealed_temperature(cfg, 0), 1.0);
  EXPECT_DOUBLE_EQ(annealed_temperature(cfg, 2), 0.99 * 0.99);
  cfg.anneal.batch_floor = 100;
  EXPECT_EQ(annealed_batch_size(cfg, 100000), 100u);
  for (std::size_t t = 1; t < 600; ++t) EXPECT_LE(annealed_batch_size(cfg, t), annealed_batch_size(cfg, t - 1));
}

TEST(Anneal, ProbeSizeScalesWithBatch) {
  SearchConfig cfg;
  cfg.batch_size = 512;
  cfg.probe_size = 32;
  EXPECT_EQ(probe_size_for_batch(cfg, 512), 32u);
  EXPECT_EQ(probe_size_for_batch(cfg, 256), 16u);
  EXPECT_EQ(probe_size_for_batch(cfg, 8), 1u);
}

TEST(Anneal, ZeroTemperatureRejectsUphill) {
  auto t = toy_task(15);
  auto cfg = small_config();
  cfg.anneal.initial_temperature = 0.0;
  // A current loss below anything reachable forces an uphill proposal.
  const auto out = anneal_step(Mode::kGcg, *t.target, nullptr, t.inst, cfg, SeededRng(1), 0, -1.0);
  EXPECT_FALSE(*out.report.accepted);
  EXPECT_EQ(out.suffix, t.inst.suffix());
  EXPECT_EQ(out.report.current_loss, -1.0);
  EXPECT_EQ(out.report.mode, Mode::kGcgAnneal);
}

TEST(Anneal, DownhillAlwaysAccepted) {
  auto t = toy_task(15);
  auto cfg = small_config();
  const auto out = anneal_step(Mode::kProbe, *t.target, t.draft.get(), t.inst, cfg, SeededRng(1), 3, 1e9);
  EXPECT_TRUE(*out.report.accepted);
  EXPECT_EQ(out.report.mode, Mode::kProbeAnneal);
  EXPECT_EQ(out.report.batch_size, annealed_batch_size(cfg, 3));
}

TEST(Run, SingleStep) {
  auto t = toy_task(16);
  auto cfg = small_config();
  cfg.steps = 1;
  const auto res = run(Mode::kGcg, *t.target, nullptr, t.inst, cfg);
  ASSERT_EQ(res.records.size(), 1u);
  EXPECT_FALSE(res.error.has_value());
  EXPECT_EQ(res.records[0].iteration, 0u);
  EXPECT_EQ(res.final_loss, res.records[0].best_loss);
  EXPECT_EQ(res.setup_flops, static_cast<double>(t.inst.total_length()) * t.target->info().flops_per_token);
}

TEST(Run, DeterministicPerSeed) {
  auto t = toy_task(17);
  auto cfg = small_config();
  for (auto mode : {Mode::kGcg, Mode::kProbe, Mode::kGcgAnneal, Mode::kProbeAnneal}) {
    const auto a = run(mode, *t.target, t.draft.get(), t.inst, cfg);
    const auto b = run(mode, *t.target, t.draft.get(), t.inst, cfg);
    ASSERT_EQ(a.records.size(), b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      EXPECT_EQ(a.records[i].suffix, b.records[i].suffix);
      EXPECT_EQ(a.records[i].best_loss, b.records[i].best_loss);
    }
    cfg.seed = 4;
    const auto c = run(mode, *t.target, t.draft.get(), t.inst, cfg);
    cfg.seed = 3;
    bool differs = false;
    for (std::size_t i = 0; i < a.records.size(); ++i) differs = differs || a.records[i].suffix != c.records[i].suffix;
    EXPECT_TRUE(differs) << to_string(mode);
  }
}

TEST(Run, StopsEarlyOnSuccess) {
  auto t = toy_task(18);
  auto cfg = small_config();
  const auto res = run(Mode::kProbe, *t.target, t.draft.get(), t.inst, cfg, [](const AttackInstance&) { return true; });
  EXPECT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.success_iteration, 0u);
}

TEST(Run, KeepsPartialLogOnFailure) {
  auto t = toy_task(19);
  FailingScorer failing(t.target, 4);  // setup, steps 0 and 1, then failure
  auto cfg = small_config();
  std::vector<std::size_t> seen;
  const auto res = run(Mode::kGcg, failing, nullptr, t.inst, cfg, {},
                       [&](const StepReport& r) { seen.push_back(r.iteration); });
  ASSERT_TRUE(res.error.has_value());
  EXPECT_NE(res.error->find("iteration 2"), std::string::npos);
  EXPECT_EQ(res.records.size(), 2u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1}));
}

TEST(Run, ValidatesConfiguration) {
  auto t = toy_task(20);
  auto cfg = small_config();
  EXPECT_THROW(run(Mode::kProbe, *t.target, nullptr, t.inst, cfg), ValidationError);
  cfg.top_k = 17;
  EXPECT_THROW(run(Mode::kGcg, *t.target, nullptr, t.inst, cfg), ValidationError);
  cfg = small_config();
  cfg.probe_size = 65;
  EXPECT_THROW(run(Mode::kGcg, *t.target, nullptr, t.inst, cfg), ValidationError);
  EXPECT_THROW(parse_mode("beam"), ValidationError);
}

TEST(Run, ProbeLogIsWellFormed) {
  auto t = toy_task(21);
  auto cfg = small_config();
  cfg.steps = 20;
  const auto res = run(Mode::kProbe, *t.target, t.draft.get(), t.inst, cfg);
  ASSERT_EQ(res.records.size(), 20u);
  for (const auto& r : res.records) {
    EXPECT_TRUE(std::isfinite(r.best_loss));
    EXPECT_GE(*r.alpha, 0.0);
    EXPECT_LE(*r.alpha, 1.0);
  }
}

}  // namespace
}  // namespace ps
