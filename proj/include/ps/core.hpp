// SPDX-License-Identifier: Apache-2.0
//
// Token domain types and deterministic randomness shared by every module.

#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ps {

using TokenId = std::int32_t;

// Errors ------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Vocabulary ----------------------------------------------------------------

class Vocabulary {
 public:
  explicit Vocabulary(std::size_t size, std::vector<std::string> display = {})
      : size_(size), display_(std::move(display)) {
    if (size_ < 2) throw ValidationError("vocabulary size must be >= 2, got " + std::to_string(size_));
    if (!display_.empty() && display_.size() != size_)
      throw ValidationError("display table has " + std::to_string(display_.size()) +
                            " entries for a vocabulary of " + std::to_string(size_));
  }

  static std::shared_ptr<const Vocabulary> make(std::size_t size, std::vector<std::string> display = {}) {
    return std::make_shared<const Vocabulary>(size, std::move(display));
  }

  std::size_t size() const noexcept { return size_; }
  bool contains(TokenId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < size_; }
  bool has_display() const noexcept { return !display_.empty(); }

  // Falls back to "<id>" when no display table is attached.
  std::string text(TokenId id) const {
    if (!contains(id)) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    if (display_.empty()) return "<" + std::to_string(id) + ">";
    return display_[static_cast<std::size_t>(id)];
  }

  void check(TokenId id) const {
    if (!contains(id))
      throw ValidationError("invalid token id " + std::to_string(id) + " for vocabulary of size " +
                            std::to_string(size_));
  }

 private:
  std::size_t size_;
  std::vector<std::string> display_;
};

using VocabRef = std::shared_ptr<const Vocabulary>;

// TokenSeq ------------------------------------------------------------------

/// Non-empty sequence of token ids, every id valid under its vocabulary.
class TokenSeq {
 public:
  TokenSeq(std::vector<TokenId> tokens, VocabRef vocab) : tokens_(std::move(tokens)), vocab_(std::move(vocab)) {
    if (!vocab_) throw ValidationError("token sequence requires a vocabulary");
    if (tokens_.empty()) throw ValidationError("token sequence must be non-empty");
    for (TokenId t : tokens_) vocab_->check(t);
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId operator[](std::size_t i) const noexcept { return tokens_[i]; }
  TokenId at(std::size_t i) const {
    if (i >= tokens_.size())
      throw IndexError("position " + std::to_string(i) + " out of range for length " + std::to_string(tokens_.size()));
    return tokens_[i];
  }
  std::span<const TokenId> tokens() const noexcept { return tokens_; }
  const std::vector<TokenId>& vec() const noexcept { return tokens_; }
  const VocabRef& vocab() const noexcept { return vocab_; }

  std::string text() const {
    std::string out;
    for (TokenId t : tokens_) out += vocab_->text(t);
    return out;
  }

  friend bool operator==(const TokenSeq& a, const TokenSeq& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<TokenId> tokens_;
  VocabRef vocab_;
};

inline std::size_t hamming(const TokenSeq& a, const TokenSeq& b) {
  if (a.size() != b.size()) throw ValidationError("hamming distance needs equal lengths");
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

/// Copy of `s` with `position` replaced by `token`.
inline TokenSeq substitute(const TokenSeq& s, std::size_t position, TokenId token) {
  if (position >= s.size())
    throw IndexError("substitute position " + std::to_string(position) + " out of range for length " +
                     std::to_string(s.size()));
  s.vocab()->check(token);
  std::vector<TokenId> out = s.vec();
  out[position] = token;
  return TokenSeq(std::move(out), s.vocab());
}

// SeededRng -----------------------------------------------------------------

/// Reproducible random stream. The engine is std::mt19937_64 (bit-exact by
/// the standard); bounded integers and reals are derived here rather than
/// through std distributions, whose outputs vary between library vendors.
/// Child streams are keyed through std::seed_seq, also fully specified.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return position_; }

  std::uint64_t next_u64() {
    ++position_;
    return engine_();
  }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ValidationError("uniform_index over an empty range");
    const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t limit = max - (max % n + 1) % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x <= limit) return x % n;
    }
  }

  /// Uniform real in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Independent stream keyed by (this stream's seed, key). Does not advance
  /// this stream, so derivation order is irrelevant.
  SeededRng child(std::uint64_t key) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32), 0x9e3779b9u};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return SeededRng((static_cast<std::uint64_t>(out[1]) << 32) | out[0]);
  }

  /// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw ValidationError("cannot sample " + std::to_string(k) + " of " + std::to_string(n));
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform_index(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t position_ = 0;
};

// Named child-stream keys used across the engine.
namespace stream {
inline constexpr std::uint64_t kCandidates = 0x43414e44;   // "CAND"
inline constexpr std::uint64_t kProbe = 0x50524f42;        // "PROB"
inline constexpr std::uint64_t kAnneal = 0x414e4e4c;       // "ANNL"
inline constexpr std::uint64_t kTargetModel = 0x54524754;  // "TRGT"
inline constexpr std::uint64_t kDraftModel = 0x44524654;   // "DRFT"
inline constexpr std::uint64_t kTask = 0x5441534b;         // "TASK"
inline constexpr std::uint64_t kSuffixInit = 0x53554658;   // "SUFX"
inline constexpr std::uint64_t kIterationBase = 0x49540000'00000000ull;
}  // namespace stream

// AttackInstance --------------------------------------------------------------

enum class SuffixInit { kConstant, kRandom };

/// Prompt x, suffix s and target y. The scored input is x ++ s with y as the
/// continuation; the suffix length never changes after construction.
class AttackInstance {
 public:
  AttackInstance(TokenSeq prompt, TokenSeq suffix, TokenSeq target)
      : prompt_(std::move(prompt)), suffix_(std::move(suffix)), target_(std::move(target)) {
    if (prompt_.vocab()->size() != suffix_.vocab()->size() || prompt_.vocab()->size() != target_.vocab()->size())
      throw ValidationError("prompt, suffix and target must share a vocabulary");
  }

  const TokenSeq& prompt() const noexcept { return prompt_; }
  const TokenSeq& suffix() const noexcept { return suffix_; }
  const TokenSeq& target() const noexcept { return target_; }
  const VocabRef& vocab() const noexcept { return prompt_.vocab(); }

  std::size_t suffix_begin() const noexcept { return prompt_.size(); }
  std::size_t suffix_end() const noexcept { return prompt_.size() + suffix_.size(); }
  std::size_t total_length() const noexcept { return suffix_end() + target_.size(); }

  AttackInstance with_suffix(TokenSeq suffix) const {
    if (suffix.size() != suffix_.size())
      throw ValidationError("suffix length is fixed at " + std::to_string(suffix_.size()) + ", got " +
                            std::to_string(suffix.size()));
    return AttackInstance(prompt_, std::move(suffix), target_);
  }

  /// x ++ s ++ y.
  std::vector<TokenId> concatenated() const { return concatenated_with(suffix_.tokens()); }

  std::vector<TokenId> concatenated_with(std::span<const TokenId> suffix) const {
    std::vector<TokenId> out;
    out.reserve(total_length());
    out.insert(out.end(), prompt_.vec().begin(), prompt_.vec().end());
    out.insert(out.end(), suffix.begin(), suffix.end());
    out.insert(out.end(), target_.vec().begin(), target_.vec().end());
    return out;
  }

 private:
  TokenSeq prompt_;
  TokenSeq suffix_;
  TokenSeq target_;
};

inline AttackInstance make_instance(const TokenSeq& prompt, std::size_t suffix_len, const TokenSeq& target,
                                    TokenId init_token, SeededRng& rng, SuffixInit mode = SuffixInit::kConstant) {
  if (suffix_len < 1) throw ValidationError("suffix length must be >= 1");
  const auto& vocab = prompt.vocab();
  vocab->check(init_token);
  std::vector<TokenId> suffix(suffix_len, init_token);
  if (mode == SuffixInit::kRandom) {
    for (auto& t : suffix) t = static_cast<TokenId>(rng.uniform_index(vocab->size()));
  }
  return AttackInstance(prompt, TokenSeq(std::move(suffix), vocab), target);
}

}  // namespace ps
