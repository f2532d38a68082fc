// SPDX-License-Identifier: Apache-2.0
//
// Scorer abstraction consumed by the search loops: batched suffix losses,
// gradient-guided token shortlists and a forward-FLOPs cost model.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ps/core.hpp"
#include "ps/toylm.hpp"

namespace ps {

class CapabilityError : public Error {
 public:
  using Error::Error;
};

/// Failure while scoring a batch; `candidate()` names the offending entry
/// when the scorer could attribute it.
class BatchError : public Error {
 public:
  BatchError(const std::string& what, std::optional<std::size_t> candidate)
      : Error(candidate ? what + " (candidate " + std::to_string(*candidate) + ")" : what), candidate_(candidate) {}
  std::optional<std::size_t> candidate() const noexcept { return candidate_; }

 private:
  std::optional<std::size_t> candidate_;
};

struct ScorerInfo {
  std::string label;
  bool supports_gradient = false;
  bool concurrent_safe = false;
  bool supports_decode = false;
  double flops_per_token = 0.0;
};

class Scorer {
 public:
  virtual ~Scorer() = default;

  virtual const ScorerInfo& info() const = 0;
  virtual std::size_t vocab_size() const = 0;

  /// Loss of prompt ++ candidate ++ target for every candidate, in order.
  virtual std::vector<double> losses(const AttackInstance& inst, std::span<const TokenSeq> suffixes) = 0;

  /// Per suffix position, the K ids with the largest negative gradient.
  virtual std::vector<std::vector<TokenId>> topk(const AttackInstance&, std::size_t) {
    throw CapabilityError("scorer '" + info().label + "' does not provide gradients");
  }

  /// Greedy continuation of `prefix`, when the scorer can generate.
  virtual std::optional<TokenSeq> decode(const TokenSeq&, std::size_t) { return std::nullopt; }
};

using ScorerHandle = std::shared_ptr<Scorer>;

/// K ids maximising -gradient; ties go to the smaller id.
inline std::vector<TokenId> topk_by_negative_gradient(std::span<const double> grad, std::size_t k) {
  if (k < 1 || k > grad.size())
    throw ValidationError("top-K requires 1 <= K <= V, got K=" + std::to_string(k) + " V=" +
                          std::to_string(grad.size()));
  std::vector<TokenId> ids(grad.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](TokenId a, TokenId b) {
    const double sa = -grad[static_cast<std::size_t>(a)];
    const double sb = -grad[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  ids.resize(k);
  return ids;
}

// Toy scorer --------------------------------------------------------------

class ToyScorer final : public Scorer {
 public:
  ToyScorer(std::shared_ptr<const ToyLmParams> params, std::string label)
      : params_(std::move(params)) {
    info_.label = std::move(label);
    info_.supports_gradient = true;
    info_.concurrent_safe = true;
    info_.supports_decode = true;
    info_.flops_per_token = 2.0 * static_cast<double>(params_->param_count());
  }

  static ScorerHandle make(ToyLmParams params, std::string label) {
    return std::make_shared<ToyScorer>(std::make_shared<const ToyLmParams>(std::move(params)), std::move(label));
  }

  const ScorerInfo& info() const override { return info_; }
  std::size_t vocab_size() const override { return params_->vocab_size(); }
  const ToyLmParams& params() const noexcept { return *params_; }

  std::vector<double> losses(const AttackInstance& inst, std::span<const TokenSeq> suffixes) override {
    std::vector<double> out(suffixes.size());
    for (std::size_t i = 0; i < suffixes.size(); ++i) {
      try {
        const auto tokens = inst.concatenated_with(suffixes[i].tokens());
        check_tokens(*params_, tokens);
        out[i] = sequence_nll(*params_, tokens, inst.suffix_end());
      } catch (const Error& e) {
        throw BatchError(info_.label + ": " + e.what(), i);
      }
    }
    return out;
  }

  std::vector<std::vector<TokenId>> topk(const AttackInstance& inst, std::size_t k) override {
    std::vector<std::vector<TokenId>> out;
    out.reserve(inst.suffix().size());
    for (std::size_t j = 0; j < inst.suffix().size(); ++j)
      out.push_back(topk_by_negative_gradient(onehot_gradient(*params_, inst, j), k));
    return out;
  }

  std::optional<TokenSeq> decode(const TokenSeq& prefix, std::size_t steps) override {
    return greedy_decode(*params_, prefix, steps);
  }

 private:
  std::shared_ptr<const ToyLmParams> params_;
  ScorerInfo info_;
};

// Serialising gate ----------------------------------------------------------

/// Forwards to a scorer that cannot take concurrent calls, one call at a time.
class SerializedScorer final : public Scorer {
 public:
  explicit SerializedScorer(ScorerHandle inner) : inner_(std::move(inner)), info_(inner_->info()) {
    info_.concurrent_safe = true;
  }

  const ScorerInfo& info() const override { return info_; }
  std::size_t vocab_size() const override { return inner_->vocab_size(); }

  std::vector<double> losses(const AttackInstance& inst, std::span<const TokenSeq> suffixes) override {
    std::lock_guard lock(mu_);
    return inner_->losses(inst, suffixes);
  }
  std::vector<std::vector<TokenId>> topk(const AttackInstance& inst, std::size_t k) override {
    std::lock_guard lock(mu_);
    return inner_->topk(inst, k);
  }
  std::optional<TokenSeq> decode(const TokenSeq& prefix, std::size_t steps) override {
    std::lock_guard lock(mu_);
    return inner_->decode(prefix, steps);
  }

 private:
  ScorerHandle inner_;
  ScorerInfo info_;
  std::mutex mu_;
};

inline ScorerHandle ensure_concurrent_safe(ScorerHandle scorer) {
  if (scorer->info().concurrent_safe) return scorer;
  return std::make_shared<SerializedScorer>(std::move(scorer));
}

// Batched operations --------------------------------------------------------

struct LossBatch {
  std::vector<double> losses;
  std::size_t tokens = 0;  // tokens processed across the batch
  double flops = 0.0;
  double wall_ms = 0.0;
};

inline double flops_estimate(const Scorer& scorer, std::size_t token_count) {
  return scorer.info().flops_per_token * static_cast<double>(token_count);
}

inline LossBatch loss_batch(Scorer& scorer, const AttackInstance& inst, std::span<const TokenSeq> candidates) {
  if (candidates.empty()) throw ValidationError("loss_batch needs at least one candidate");
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (candidates[i].size() != inst.suffix().size())
      throw BatchError("candidate length " + std::to_string(candidates[i].size()) + " differs from suffix length " +
                           std::to_string(inst.suffix().size()),
                       i);
  const auto t0 = std::chrono::steady_clock::now();
  LossBatch out;
  out.losses = scorer.losses(inst, candidates);
  out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if (out.losses.size() != candidates.size())
    throw BatchError(scorer.info().label + " returned " + std::to_string(out.losses.size()) + " losses for " +
                         std::to_string(candidates.size()) + " candidates",
                     std::nullopt);
  for (std::size_t i = 0; i < out.losses.size(); ++i)
    if (!std::isfinite(out.losses[i])) throw BatchError(scorer.info().label + " produced a non-finite loss", i);
  out.tokens = candidates.size() * inst.total_length();
  out.flops = flops_estimate(scorer, out.tokens);
  return out;
}

inline std::vector<std::vector<TokenId>> gradient_topk(Scorer& scorer, const AttackInstance& inst, std::size_t k) {
  if (!scorer.info().supports_gradient)
    throw CapabilityError("scorer '" + scorer.info().label + "' cannot serve as a gradient source");
  if (k < 1 || k > scorer.vocab_size())
    throw ValidationError("top-K requires 1 <= K <= V, got K=" + std::to_string(k) + " V=" +
                          std::to_string(scorer.vocab_size()));
  return scorer.topk(inst, k);
}

}  // namespace ps
