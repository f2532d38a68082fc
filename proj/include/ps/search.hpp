// SPDX-License-Identifier: Apache-2.0
//
// Greedy coordinate gradient search, probe sampling with an adaptive
// agreement-sized filtered set, and simulated-annealing wrappers of both.
//
// Random streams: the run owns a root stream seeded with cfg.seed. Iteration t
// uses root.child(kIterationBase + t), from which candidate generation draws on
// child(kCandidates), probe selection on child(kProbe) and the Metropolis test
// on child(kAnneal). Every mode therefore sees the same candidate batch for a
// given (seed, iteration, batch size).

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ps/core.hpp"
#include "ps/correlation.hpp"
#include "ps/scoring.hpp"

namespace ps {

enum class Mode { kGcg, kProbe, kGcgAnneal, kProbeAnneal };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::kGcg: return "gcg";
    case Mode::kProbe: return "ps";
    case Mode::kGcgAnneal: return "gcg-anneal";
    case Mode::kProbeAnneal: return "ps-anneal";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "gcg") return Mode::kGcg;
  if (s == "ps") return Mode::kProbe;
  if (s == "gcg-anneal") return Mode::kGcgAnneal;
  if (s == "ps-anneal") return Mode::kProbeAnneal;
  throw ValidationError("unknown mode '" + std::string(s) + "' (gcg|ps|gcg-anneal|ps-anneal)");
}

inline bool uses_draft(Mode m) { return m == Mode::kProbe || m == Mode::kProbeAnneal; }
inline bool uses_anneal(Mode m) { return m == Mode::kGcgAnneal || m == Mode::kProbeAnneal; }

enum class FilterPolicy { kAdaptive, kFixed };

/// Geometric batch shrinkage plus Metropolis acceptance. A batch_floor of 0
/// means B / 8.
struct AnnealSchedule {
  double initial_temperature = 1.0;
  double temperature_decay = 0.99;
  double batch_decay = 0.995;
  std::size_t batch_floor = 0;
};

struct SearchConfig {
  std::size_t batch_size = 512;
  std::size_t top_k = 256;
  double reduction = 8.0;
  std::size_t probe_size = 0;  // 0 means batch_size / 16
  std::size_t steps = 500;
  Correlation correlation = Correlation::kSpearman;
  FilterPolicy filter = FilterPolicy::kAdaptive;
  double fixed_alpha = 0.0;
  AnnealSchedule anneal;
  std::uint64_t seed = 0;
  bool parallel = true;

  std::size_t resolved_probe_size() const {
    return probe_size != 0 ? probe_size : std::max<std::size_t>(1, batch_size / 16);
  }
  std::size_t resolved_batch_floor() const {
    return anneal.batch_floor != 0 ? anneal.batch_floor : std::max<std::size_t>(1, batch_size / 8);
  }

  void validate(std::size_t vocab_size) const {
    auto fail = [](const std::string& m) { throw ValidationError("search config: " + m); };
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (top_k < 1 || top_k > vocab_size)
      fail("top_k must lie in [1, " + std::to_string(vocab_size) + "], got " + std::to_string(top_k));
    if (!(reduction >= 1.0) || !std::isfinite(reduction)) fail("reduction must be >= 1");
    const std::size_t k = resolved_probe_size();
    if (k < 1 || k > batch_size) fail("probe_size must lie in [1, batch_size]");
    if (steps < 1) fail("steps must be >= 1");
    if (filter == FilterPolicy::kFixed && !(fixed_alpha >= 0.0 && fixed_alpha <= 1.0))
      fail("fixed alpha must lie in [0, 1]");
    if (!(anneal.initial_temperature >= 0.0)) fail("anneal initial temperature must be >= 0");
    if (!(anneal.temperature_decay > 0.0 && anneal.temperature_decay <= 1.0)) fail("anneal temperature decay must lie in (0, 1]");
    if (!(anneal.batch_decay > 0.0 && anneal.batch_decay <= 1.0)) fail("anneal batch decay must lie in (0, 1]");
    if (resolved_batch_floor() > batch_size) fail("anneal batch floor exceeds batch_size");
  }
};

/// clamp(floor((1 - alpha) * B / R), 1, B).
inline std::size_t filtered_set_size(double alpha, std::size_t batch, double reduction) {
  const double raw = std::floor((1.0 - alpha) * static_cast<double>(batch) / reduction);
  if (!(raw >= 1.0)) return 1;
  if (raw >= static_cast<double>(batch)) return batch;
  return static_cast<std::size_t>(raw);
}

// Candidate generation ------------------------------------------------------

struct Substitution {
  std::size_t position = 0;
  TokenId token = 0;
};

struct CandidateBatch {
  std::vector<TokenSeq> suffixes;
  std::vector<Substitution> edits;
  std::uint64_t stream_seed = 0;
  std::vector<std::vector<TokenId>> shortlist;  // top-K ids per suffix position

  std::size_t size() const noexcept { return suffixes.size(); }
};

/// One gradient call, then `batch` single-token substitutions, each at a
/// uniform position with a uniform token from that position's top-K list.
inline CandidateBatch generate_candidates(Scorer& gradient_source, const AttackInstance& inst, std::size_t batch,
                                          std::size_t top_k, SeededRng rng) {
  if (batch < 1) throw ValidationError("candidate batch must be >= 1");
  CandidateBatch out;
  out.stream_seed = rng.seed();
  out.shortlist = gradient_topk(gradient_source, inst, top_k);
  const std::size_t len = inst.suffix().size();
  out.suffixes.reserve(batch);
  out.edits.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto pos = static_cast<std::size_t>(rng.uniform_index(len));
    const auto& list = out.shortlist[pos];
    const TokenId tok = list[static_cast<std::size_t>(rng.uniform_index(list.size()))];
    out.edits.push_back({pos, tok});
    out.suffixes.push_back(substitute(inst.suffix(), pos, tok));
  }
  return out;
}

// Step records -------------------------------------------------------------

/// Everything one iteration decided and what it cost. Fields that do not
/// apply to a mode stay empty.
struct StepReport {
  std::size_t iteration = 0;
  Mode mode = Mode::kGcg;
  std::size_t batch_size = 0;
  std::optional<double> alpha;
  bool alpha_fallback = false;
  std::optional<std::size_t> probe_size;
  std::optional<std::size_t> filtered_size;
  std::vector<std::size_t> probe_indices;
  std::vector<std::size_t> filtered_indices;
  std::size_t best_index = 0;
  double best_loss = 0.0;  // target loss of the selected candidate
  std::optional<double> draft_loss_min;
  std::optional<double> draft_loss_mean;
  std::size_t target_evals = 0;
  std::size_t draft_evals = 0;
  double flops_target = 0.0;
  double flops_draft = 0.0;
  double flops_gradient = 0.0;
  std::optional<double> temperature;
  std::optional<bool> accepted;
  double current_loss = 0.0;  // loss of the suffix carried into the next iteration
  std::vector<TokenId> suffix;
  double wall_ms = 0.0;
};

using ProbeReport = StepReport;

struct StepOutcome {
  TokenSeq suffix;
  StepReport report;
};

namespace detail {

/// Lowest loss; ties go to the lowest candidate index.
inline std::size_t argmin_index(std::span<const std::size_t> indices, std::span<const double> losses) {
  std::size_t best = indices[0];
  double best_loss = losses[0];
  for (std::size_t i = 1; i < indices.size(); ++i) {
    if (losses[i] < best_loss || (losses[i] == best_loss && indices[i] < best)) {
      best = indices[i];
      best_loss = losses[i];
    }
  }
  return best;
}

// Forward + backward counted as three forwards over the whole sequence.
inline double gradient_flops(const Scorer& s, const AttackInstance& inst) {
  return 3.0 * flops_estimate(s, inst.total_length());
}

inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Probe size used for a (possibly annealed) batch: k scaled by batch / B.
inline std::size_t probe_size_for_batch(const SearchConfig& cfg, std::size_t batch) {
  const std::size_t k = cfg.resolved_probe_size();
  if (batch == cfg.batch_size) return std::min(k, batch);
  const auto scaled = static_cast<std::size_t>(
      std::llround(static_cast<double>(k) * static_cast<double>(batch) / static_cast<double>(cfg.batch_size)));
  return std::clamp<std::size_t>(scaled, 1, batch);
}

/// Evaluates every candidate on the target and keeps the best one.
inline StepOutcome gcg_step(Scorer& target, const AttackInstance& inst, const SearchConfig& cfg, const SeededRng& rng,
                            std::optional<std::size_t> batch_override = std::nullopt) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t batch = batch_override.value_or(cfg.batch_size);
  auto cands = generate_candidates(target, inst, batch, cfg.top_k, rng.child(stream::kCandidates));
  const auto lb = loss_batch(target, inst, cands.suffixes);

  std::vector<std::size_t> all(batch);
  std::iota(all.begin(), all.end(), 0);
  const std::size_t best = detail::argmin_index(all, lb.losses);

  StepReport r;
  r.mode = Mode::kGcg;
  r.batch_size = batch;
  r.best_index = best;
  r.best_loss = lb.losses[best];
  r.current_loss = r.best_loss;
  r.target_evals = batch;
  r.flops_target = lb.flops;
  r.flops_gradient = detail::gradient_flops(target, inst);
  r.suffix = cands.suffixes[best].vec();
  r.wall_ms = detail::ms_since(t0);
  return {cands.suffixes[best], std::move(r)};
}

/// Draft losses on the whole batch and target losses on a uniform probe set
/// (concurrently when allowed), agreement alpha on the probe pairs, then
/// target losses on the filtered set of best draft candidates. Returns the
/// best target loss over probe and filtered sets.
inline StepOutcome probe_sampling_step(Scorer& target, Scorer& draft, const AttackInstance& inst,
                                       const SearchConfig& cfg, const SeededRng& rng,
                                       std::optional<std::size_t> batch_override = std::nullopt) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t batch = batch_override.value_or(cfg.batch_size);
  const std::size_t k = probe_size_for_batch(cfg, batch);
  auto cands = generate_candidates(target, inst, batch, cfg.top_k, rng.child(stream::kCandidates));
  auto probe_rng = rng.child(stream::kProbe);
  const auto probe = probe_rng.sample_without_replacement(batch, k);
  std::vector<TokenSeq> probe_suffixes;
  probe_suffixes.reserve(k);
  for (std::size_t i : probe) probe_suffixes.push_back(cands.suffixes[i]);

  // Parallel region: no shared mutable state between the two evaluations.
  LossBatch draft_lb, probe_lb;
  const bool same_scorer = &target == &draft;
  const bool concurrent =
      cfg.parallel && (!same_scorer || target.info().concurrent_safe);
  if (concurrent) {
    auto fut = std::async(std::launch::async, [&] { return loss_batch(draft, inst, cands.suffixes); });
    try {
      probe_lb = loss_batch(target, inst, probe_suffixes);
    } catch (...) {
      fut.wait();
      throw;
    }
    draft_lb = fut.get();
  } else {
    draft_lb = loss_batch(draft, inst, cands.suffixes);
    probe_lb = loss_batch(target, inst, probe_suffixes);
  }

  StepReport r;
  r.mode = Mode::kProbe;
  r.batch_size = batch;
  r.probe_size = k;
  r.probe_indices = probe;

  double alpha = cfg.fixed_alpha;
  if (cfg.filter == FilterPolicy::kAdaptive) {
    std::vector<double> probe_draft(k);
    for (std::size_t i = 0; i < k; ++i) probe_draft[i] = draft_lb.losses[probe[i]];
    try {
      alpha = agreement(cfg.correlation, probe_lb.losses, probe_draft).value;
    } catch (const DegenerateInputError&) {
      alpha = 0.5;
      r.alpha_fallback = true;
    } catch (const InsufficientSampleError&) {
      alpha = 0.5;
      r.alpha_fallback = true;
    }
  }
  r.alpha = alpha;

  const std::size_t fsize = filtered_set_size(alpha, batch, cfg.reduction);
  std::vector<std::size_t> order(batch);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return draft_lb.losses[a] < draft_lb.losses[b]; });
  order.resize(fsize);
  r.filtered_size = fsize;
  r.filtered_indices = order;

  // Known target losses by candidate index; probe members are not rescored.
  std::vector<double> target_loss(batch, std::numeric_limits<double>::quiet_NaN());
  std::vector<char> known(batch, 0);
  for (std::size_t i = 0; i < k; ++i) {
    target_loss[probe[i]] = probe_lb.losses[i];
    known[probe[i]] = 1;
  }
  std::vector<std::size_t> fresh;
  std::vector<TokenSeq> fresh_suffixes;
  for (std::size_t i : order)
    if (!known[i]) {
      fresh.push_back(i);
      fresh_suffixes.push_back(cands.suffixes[i]);
    }
  double filtered_flops = 0.0;
  if (!fresh.empty()) {
    const auto flb = loss_batch(target, inst, fresh_suffixes);
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      target_loss[fresh[i]] = flb.losses[i];
      known[fresh[i]] = 1;
    }
    filtered_flops = flb.flops;
  }

  std::vector<std::size_t> evaluated;
  std::vector<double> evaluated_loss;
  for (std::size_t i = 0; i < batch; ++i)
    if (known[i]) {
      evaluated.push_back(i);
      evaluated_loss.push_back(target_loss[i]);
    }
  const std::size_t best = detail::argmin_index(evaluated, evaluated_loss);

  r.best_index = best;
  r.best_loss = target_loss[best];
  r.current_loss = r.best_loss;
  r.target_evals = k + fresh.size();
  r.draft_evals = batch;
  r.flops_target = probe_lb.flops + filtered_flops;
  r.flops_draft = draft_lb.flops;
  r.flops_gradient = detail::gradient_flops(target, inst);
  r.draft_loss_min = *std::min_element(draft_lb.losses.begin(), draft_lb.losses.end());
  r.draft_loss_mean =
      std::accumulate(draft_lb.losses.begin(), draft_lb.losses.end(), 0.0) / static_cast<double>(batch);
  r.suffix = cands.suffixes[best].vec();
  r.wall_ms = detail::ms_since(t0);
  return {cands.suffixes[best], std::move(r)};
}

// Annealing -----------------------------------------------------------------

/// Metropolis rule: 1 for downhill or flat moves, exp(-delta / T) otherwise.
inline double acceptance_probability(double delta, double temperature) {
  if (delta <= 0.0) return 1.0;
  if (!(temperature > 0.0)) return 0.0;
  return std::exp(-delta / temperature);
}

inline bool metropolis_accept(double delta, double temperature, SeededRng& rng) {
  const double p = acceptance_probability(delta, temperature);
  if (p >= 1.0) return true;
  return rng.uniform01() < p;
}

/// max(floor, round(B * decay^t)).
inline std::size_t annealed_batch_size(const SearchConfig& cfg, std::size_t iteration) {
  const double raw = static_cast<double>(cfg.batch_size) * std::pow(cfg.anneal.batch_decay, static_cast<double>(iteration));
  const auto b = static_cast<std::size_t>(std::llround(raw));
  return std::clamp<std::size_t>(b, cfg.resolved_batch_floor(), cfg.batch_size);
}

inline double annealed_temperature(const SearchConfig& cfg, std::size_t iteration) {
  return cfg.anneal.initial_temperature * std::pow(cfg.anneal.temperature_decay, static_cast<double>(iteration));
}

/// Runs the wrapped step on the annealed batch, then keeps or rejects its
/// proposal against the current loss.
inline StepOutcome anneal_step(Mode wrapped, Scorer& target, Scorer* draft, const AttackInstance& inst,
                               const SearchConfig& cfg, const SeededRng& rng, std::size_t iteration,
                               double current_loss) {
  const std::size_t batch = annealed_batch_size(cfg, iteration);
  const double temperature = annealed_temperature(cfg, iteration);
  StepOutcome out = wrapped == Mode::kProbe
                        ? probe_sampling_step(target, *draft, inst, cfg, rng, batch)
                        : gcg_step(target, inst, cfg, rng, batch);
  auto accept_rng = rng.child(stream::kAnneal);
  const bool accepted = metropolis_accept(out.report.best_loss - current_loss, temperature, accept_rng);
  out.report.mode = wrapped == Mode::kProbe ? Mode::kProbeAnneal : Mode::kGcgAnneal;
  out.report.temperature = temperature;
  out.report.accepted = accepted;
  if (!accepted) {
    out.suffix = inst.suffix();
    out.report.current_loss = current_loss;
    out.report.suffix = inst.suffix().vec();
  }
  return out;
}

// Outer loop -----------------------------------------------------------------

inline SeededRng iteration_stream(std::uint64_t seed, std::size_t iteration) {
  return SeededRng(seed).child(stream::kIterationBase + iteration);
}

struct RunResult {
  TokenSeq final_suffix;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double setup_flops = 0.0;  // the initial target evaluation
  std::vector<StepReport> records;
  std::optional<std::size_t> success_iteration;
  std::optional<std::string> error;
};

using SuccessFn = std::function<bool(const AttackInstance&)>;
using RecordSink = std::function<void(const StepReport&)>;

/// Iterates the configured step up to cfg.steps times, stopping early once
/// `success` fires. A failing iteration ends the run; records emitted so far
/// are kept and `error` is set.
inline RunResult run(Mode mode, Scorer& target, Scorer* draft, AttackInstance inst, const SearchConfig& cfg,
                     const SuccessFn& success = {}, const RecordSink& sink = {}) {
  cfg.validate(target.vocab_size());
  if (uses_draft(mode) && draft == nullptr) throw ValidationError("mode " + std::string(to_string(mode)) + " needs a draft scorer");
  if (draft != nullptr && draft->vocab_size() != target.vocab_size())
    throw ValidationError("draft and target vocabularies differ");

  const AttackInstance start = inst;
  const auto init = loss_batch(target, inst, std::span<const TokenSeq>(&start.suffix(), 1));
  RunResult res{inst.suffix(), init.losses[0], init.losses[0], init.flops, {}, std::nullopt, std::nullopt};
  double current = init.losses[0];

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const auto rng = iteration_stream(cfg.seed, t);
    try {
      StepOutcome out = [&] {
        switch (mode) {
          case Mode::kGcg: return gcg_step(target, inst, cfg, rng);
          case Mode::kProbe: return probe_sampling_step(target, *draft, inst, cfg, rng);
          case Mode::kGcgAnneal: return anneal_step(Mode::kGcg, target, nullptr, inst, cfg, rng, t, current);
          case Mode::kProbeAnneal: return anneal_step(Mode::kProbe, target, draft, inst, cfg, rng, t, current);
        }
        throw ValidationError("unknown mode");
      }();
      out.report.iteration = t;
      inst = inst.with_suffix(out.suffix);
      current = out.report.current_loss;
      res.records.push_back(out.report);
      if (sink) sink(res.records.back());
    } catch (const Error& e) {
      res.error = "iteration " + std::to_string(t) + ": " + e.what();
      break;
    }
    if (success && success(inst)) {
      res.success_iteration = t;
      break;
    }
  }
  res.final_suffix = inst.suffix();
  res.final_loss = current;
  return res;
}

}  // namespace ps
