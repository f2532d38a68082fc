// SPDX-License-Identifier: Apache-2.0
//
// Self-check suites shared by the `validate` subcommand and the acceptance
// binary. Each check returns a verdict plus a one-line detail string.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "ps/core.hpp"
#include "ps/correlation.hpp"
#include "ps/scoring.hpp"
#include "ps/search.hpp"
#include "ps/testing/oracles.hpp"
#include "ps/toylm.hpp"

namespace ps::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Tie-free list of k values in [0, 1).
inline std::vector<double> distinct_values(SeededRng& rng, std::size_t k) {
  for (;;) {
    std::vector<double> v(k);
    for (auto& x : v) x = rng.uniform01();
    auto s = v;
    std::sort(s.begin(), s.end());
    if (std::adjacent_find(s.begin(), s.end()) == s.end()) return v;
  }
}

/// All four agreement measures against pair-enumeration oracles on
/// `trials` random tie-free inputs with k in [2, 64].
inline CheckResult correlation_oracles(std::uint64_t seed = 2024, std::size_t trials = 1000, double tol = 1e-12) {
  SeededRng rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t k = 2 + static_cast<std::size_t>(rng.uniform_index(63));
    const auto a = distinct_values(rng, k);
    const auto b = distinct_values(rng, k);
    const double diffs[] = {
        std::abs(spearman_alpha(a, b).value - oracle::spearman_alpha(a, b)),
        std::abs(pearson_alpha(a, b).value - oracle::pearson_alpha(a, b)),
        std::abs(kendall_alpha(a, b).value - oracle::kendall_alpha(a, b)),
        std::abs(gamma_alpha(a, b).value - oracle::gamma_alpha(a, b)),
    };
    for (double d : diffs) worst = std::max(worst, d);
  }
  std::ostringstream os;
  os << trials << " inputs, max |impl - oracle| = " << worst << " (tol " << tol << ")";
  return {"correlation-oracles", worst <= tol, os.str()};
}

/// Identical ranks give 1, reversed give 0, and the k = 4 single-swap
/// example gives exactly 0.9.
inline CheckResult spearman_fixed_points() {
  const std::vector<double> up{1, 2, 3, 4, 5}, down{5, 4, 3, 2, 1};
  const std::vector<double> x{1, 2, 3, 4}, y{1, 2, 4, 3};
  const double same = spearman_alpha(up, up).value;
  const double rev = spearman_alpha(up, down).value;
  const double ex = spearman_alpha(x, y).value;
  std::ostringstream os;
  os << "identical " << same << ", reversed " << rev << ", k=4 example " << ex;
  return {"spearman-fixed-points", same == 1.0 && rev == 0.0 && ex == 0.9, os.str()};
}

/// Random small model plus instance, from a documented distribution:
/// V in [2, 12], d, h in [1, 6], c in [1, 4], decay in [0.3, 1], parameters
/// uniform in [-s, s] with s in [0.5, 1.5], |x| in [1, 3], |s| in [1, 4],
/// |y| in [1, 3]. The probed suffix position lies inside the context window
/// of the first target token.
struct GradientCase {
  ToyLmParams params;
  AttackInstance inst;
  std::size_t position;
};

inline GradientCase random_gradient_case(SeededRng& rng) {
  ToyLmShape shape;
  shape.vocab_size = 2 + rng.uniform_index(11);
  shape.embed_dim = 1 + rng.uniform_index(6);
  shape.hidden_dim = 1 + rng.uniform_index(6);
  shape.context = 1 + rng.uniform_index(4);
  shape.decay = rng.uniform(0.3, 1.0);
  const double scale = rng.uniform(0.5, 1.5);
  auto params = ToyLmParams::random(shape, rng, scale);
  auto vocab = Vocabulary::make(shape.vocab_size);
  auto tokens = [&](std::size_t n) {
    std::vector<TokenId> v(n);
    for (auto& t : v) t = static_cast<TokenId>(rng.uniform_index(shape.vocab_size));
    return TokenSeq(v, vocab);
  };
  const std::size_t xl = 1 + rng.uniform_index(3), sl = 1 + rng.uniform_index(4), yl = 1 + rng.uniform_index(3);
  AttackInstance inst(tokens(xl), tokens(sl), tokens(yl));
  const std::size_t lo = sl > shape.context ? sl - shape.context : 0;
  const std::size_t position = lo + rng.uniform_index(sl - lo);
  return {std::move(params), std::move(inst), position};
}

inline CheckResult gradient_check(std::uint64_t seed = 7, std::size_t cases = 100, double tol = 1e-5) {
  SeededRng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const auto c = random_gradient_case(rng);
    const auto analytic = onehot_gradient(c.params, c.inst, c.position);
    const auto numeric = oracle::fd_onehot_gradient(c.params, c.inst, c.position, 1e-5);
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  std::ostringstream os;
  os << cases << " configs, max relative error " << worst << " (tol " << tol << ")";
  return {"gradient", worst < tol, os.str()};
}

/// Fixture for the equivalence check: one target toy model and instance.
struct ToyTask {
  ScorerHandle target;
  ScorerHandle draft;
  AttackInstance inst;
};

inline ToyTask equivalence_task(std::uint64_t seed) {
  SeededRng rng(seed);
  ToyLmShape tshape{32, 12, 16, 4, 0.9};
  auto target_params = ToyLmParams::random(tshape, rng, 1.0);
  ToyLmShape dshape{32, 4, 6, 4, 0.9};
  auto draft_params = ToyLmParams::random(dshape, rng, 1.0);
  auto vocab = Vocabulary::make(32);
  auto tokens = [&](std::size_t n) {
    std::vector<TokenId> v(n);
    for (auto& t : v) t = static_cast<TokenId>(rng.uniform_index(32));
    return TokenSeq(v, vocab);
  };
  auto x = tokens(3);
  auto y = tokens(3);
  auto inst = make_instance(x, 6, y, 0, rng);
  return {ToyScorer::make(std::move(target_params), "target"), ToyScorer::make(std::move(draft_params), "draft"),
          std::move(inst)};
}

/// Probe sampling with k = B and a filtered set of B (fixed alpha = 0,
/// R = 1) must select the same suffix as vanilla GCG at every iteration.
inline CheckResult degenerate_equivalence(std::uint64_t seed = 11, std::size_t iterations = 100) {
  auto task = equivalence_task(seed);
  SearchConfig cfg;
  cfg.batch_size = 64;
  cfg.top_k = 8;
  cfg.probe_size = 64;
  cfg.reduction = 1.0;
  cfg.filter = FilterPolicy::kFixed;
  cfg.fixed_alpha = 0.0;
  cfg.steps = iterations;
  cfg.seed = seed;
  AttackInstance gcg_inst = task.inst, ps_inst = task.inst;
  std::size_t mismatches = 0;
  for (std::size_t t = 0; t < iterations; ++t) {
    const auto rng = iteration_stream(seed, t);
    auto g = gcg_step(*task.target, gcg_inst, cfg, rng);
    auto p = probe_sampling_step(*task.target, *task.draft, ps_inst, cfg, rng);
    if (!(g.suffix == p.suffix) || g.report.best_index != p.report.best_index ||
        g.report.best_loss != p.report.best_loss)
      ++mismatches;
    gcg_inst = gcg_inst.with_suffix(g.suffix);
    ps_inst = ps_inst.with_suffix(p.suffix);
  }
  std::ostringstream os;
  os << iterations << " iterations, " << mismatches << " mismatched selections";
  return {"equivalence", mismatches == 0, os.str()};
}

inline std::vector<CheckResult> run_suite(const std::string& suite) {
  std::vector<CheckResult> out;
  const bool all = suite == "all";
  if (all || suite == "correlation") {
    out.push_back(correlation_oracles());
    out.push_back(spearman_fixed_points());
  }
  if (all || suite == "gradient") out.push_back(gradient_check());
  if (all || suite == "equivalence") out.push_back(degenerate_equivalence());
  if (out.empty()) throw ValidationError("unknown suite '" + suite + "' (correlation|gradient|equivalence|all)");
  return out;
}

}  // namespace ps::checks
