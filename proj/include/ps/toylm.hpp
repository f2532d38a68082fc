// SPDX-License-Identifier: Apache-2.0
//
// A tiny language model with a closed-form one-hot gradient. Architecture:
//
//   m_t      = sum_{i=1..c} decay^i * E[token_{t-i}]      (missing positions add 0)
//   hidden_t = tanh(m_t * W)                               W: d x h
//   logits_t = hidden_t * U                                U: h x V
//   p_t      = softmax(logits_t)                           predicts token_t
//
// Storage is row-major: E[v*d + a], W[a*h + j], U[j*V + v].

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ps/core.hpp"

namespace ps {

struct ToyLmShape {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t context = 1;
  double decay = 1.0;
};

class ToyLmParams {
 public:
  ToyLmParams(ToyLmShape shape, std::vector<double> embedding, std::vector<double> hidden, std::vector<double> output)
      : shape_(shape), embedding_(std::move(embedding)), hidden_(std::move(hidden)), output_(std::move(output)) {
    const auto& s = shape_;
    if (s.vocab_size < 2) throw ValidationError("toy model vocabulary must be >= 2");
    if (s.embed_dim < 1 || s.hidden_dim < 1 || s.context < 1)
      throw ValidationError("toy model dimensions must be >= 1");
    if (!(s.decay > 0.0 && s.decay <= 1.0)) throw ValidationError("toy model decay must lie in (0, 1]");
    if (embedding_.size() != s.vocab_size * s.embed_dim || hidden_.size() != s.embed_dim * s.hidden_dim ||
        output_.size() != s.hidden_dim * s.vocab_size)
      throw ValidationError("toy model parameter arrays do not match declared dimensions");
    for (const auto* arr : {&embedding_, &hidden_, &output_})
      for (double v : *arr)
        if (!std::isfinite(v)) throw NumericError("toy model has a non-finite parameter");
    decay_pow_.resize(s.context + 1);
    decay_pow_[0] = 1.0;
    for (std::size_t i = 1; i <= s.context; ++i) decay_pow_[i] = decay_pow_[i - 1] * s.decay;
  }

  /// Every entry uniform in [-scale, scale], drawn E, then W, then U.
  static ToyLmParams random(ToyLmShape shape, SeededRng& rng, double scale = 0.5) {
    auto fill = [&](std::size_t n) {
      std::vector<double> v(n);
      for (auto& x : v) x = rng.uniform(-scale, scale);
      return v;
    };
    auto e = fill(shape.vocab_size * shape.embed_dim);
    auto w = fill(shape.embed_dim * shape.hidden_dim);
    auto u = fill(shape.hidden_dim * shape.vocab_size);
    return ToyLmParams(shape, std::move(e), std::move(w), std::move(u));
  }

  static ToyLmParams zeros(ToyLmShape shape) {
    return ToyLmParams(shape, std::vector<double>(shape.vocab_size * shape.embed_dim),
                       std::vector<double>(shape.embed_dim * shape.hidden_dim),
                       std::vector<double>(shape.hidden_dim * shape.vocab_size));
  }

  /// A smaller model sharing the leading embed/hidden coordinates of this one,
  /// with uniform [-noise, noise] jitter added to every kept entry.
  ToyLmParams truncated(std::size_t embed_dim, std::size_t hidden_dim, double noise, SeededRng& rng) const {
    if (embed_dim < 1 || embed_dim > shape_.embed_dim || hidden_dim < 1 || hidden_dim > shape_.hidden_dim)
      throw ValidationError("truncated dimensions must lie within the source model");
    ToyLmShape s = shape_;
    s.embed_dim = embed_dim;
    s.hidden_dim = hidden_dim;
    auto jitter = [&] { return noise > 0.0 ? rng.uniform(-noise, noise) : 0.0; };
    std::vector<double> e(s.vocab_size * embed_dim), w(embed_dim * hidden_dim), u(hidden_dim * s.vocab_size);
    for (std::size_t v = 0; v < s.vocab_size; ++v)
      for (std::size_t a = 0; a < embed_dim; ++a) e[v * embed_dim + a] = E(v, a) + jitter();
    for (std::size_t a = 0; a < embed_dim; ++a)
      for (std::size_t j = 0; j < hidden_dim; ++j) w[a * hidden_dim + j] = W(a, j) + jitter();
    for (std::size_t j = 0; j < hidden_dim; ++j)
      for (std::size_t v = 0; v < s.vocab_size; ++v) u[j * s.vocab_size + v] = U(j, v) + jitter();
    return ToyLmParams(s, std::move(e), std::move(w), std::move(u));
  }

  const ToyLmShape& shape() const noexcept { return shape_; }
  std::size_t vocab_size() const noexcept { return shape_.vocab_size; }

  /// V*d + d*h + h*V.
  std::size_t param_count() const noexcept { return embedding_.size() + hidden_.size() + output_.size(); }

  double E(std::size_t v, std::size_t a) const noexcept { return embedding_[v * shape_.embed_dim + a]; }
  double W(std::size_t a, std::size_t j) const noexcept { return hidden_[a * shape_.hidden_dim + j]; }
  double U(std::size_t j, std::size_t v) const noexcept { return output_[j * shape_.vocab_size + v]; }
  double decay_pow(std::size_t i) const noexcept { return decay_pow_[i]; }

  const std::vector<double>& embedding() const noexcept { return embedding_; }
  const std::vector<double>& hidden() const noexcept { return hidden_; }
  const std::vector<double>& output() const noexcept { return output_; }

  friend bool operator==(const ToyLmParams& a, const ToyLmParams& b) {
    return a.shape_.vocab_size == b.shape_.vocab_size && a.shape_.embed_dim == b.shape_.embed_dim &&
           a.shape_.hidden_dim == b.shape_.hidden_dim && a.shape_.context == b.shape_.context &&
           a.shape_.decay == b.shape_.decay && a.embedding_ == b.embedding_ && a.hidden_ == b.hidden_ &&
           a.output_ == b.output_;
  }

 private:
  ToyLmShape shape_;
  std::vector<double> embedding_;
  std::vector<double> hidden_;
  std::vector<double> output_;
  std::vector<double> decay_pow_;
};

/// Intermediates of one predicted position.
struct PositionState {
  std::vector<double> context;   // m_t, length d
  std::vector<double> hidden;    // tanh(m_t W), length h
  std::vector<double> logprobs;  // length V
};

namespace detail {

inline void log_softmax_inplace(std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double lse = mx + std::log(z);
  for (double& l : logits) l -= lse;
}

}  // namespace detail

/// State for predicting tokens[t] from tokens[0..t). t may equal tokens.size()
/// to obtain the next-token distribution after the whole sequence.
inline PositionState predict_position(const ToyLmParams& p, std::span<const TokenId> tokens, std::size_t t) {
  const auto& s = p.shape();
  PositionState st;
  st.context.assign(s.embed_dim, 0.0);
  for (std::size_t i = 1; i <= s.context && i <= t; ++i) {
    const auto tok = static_cast<std::size_t>(tokens[t - i]);
    const double g = p.decay_pow(i);
    for (std::size_t a = 0; a < s.embed_dim; ++a) st.context[a] += g * p.E(tok, a);
  }
  st.hidden.assign(s.hidden_dim, 0.0);
  for (std::size_t a = 0; a < s.embed_dim; ++a) {
    const double m = st.context[a];
    if (m == 0.0) continue;
    for (std::size_t j = 0; j < s.hidden_dim; ++j) st.hidden[j] += m * p.W(a, j);
  }
  for (double& h : st.hidden) h = std::tanh(h);
  st.logprobs.assign(s.vocab_size, 0.0);
  for (std::size_t j = 0; j < s.hidden_dim; ++j) {
    const double h = st.hidden[j];
    for (std::size_t v = 0; v < s.vocab_size; ++v) st.logprobs[v] += h * p.U(j, v);
  }
  detail::log_softmax_inplace(st.logprobs);
  return st;
}

/// Per-position log-probabilities; positions[i] predicts token i+1.
struct LmOutput {
  std::vector<PositionState> positions;

  double logprob(std::size_t token_index, TokenId token) const {
    return positions.at(token_index - 1).logprobs.at(static_cast<std::size_t>(token));
  }
};

inline void check_tokens(const ToyLmParams& p, std::span<const TokenId> tokens) {
  for (TokenId t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= p.vocab_size())
      throw ValidationError("invalid token id " + std::to_string(t) + " for toy model vocabulary " +
                            std::to_string(p.vocab_size()));
}

inline LmOutput forward(const ToyLmParams& p, const TokenSeq& seq) {
  check_tokens(p, seq.tokens());
  LmOutput out;
  out.positions.reserve(seq.size() > 0 ? seq.size() - 1 : 0);
  for (std::size_t t = 1; t < seq.size(); ++t) out.positions.push_back(predict_position(p, seq.tokens(), t));
  return out;
}

/// -sum_{t >= target_begin} log p(tokens[t] | tokens[0..t)).
inline double sequence_nll(const ToyLmParams& p, std::span<const TokenId> tokens, std::size_t target_begin) {
  double loss = 0.0;
  for (std::size_t t = std::max<std::size_t>(target_begin, 1); t < tokens.size(); ++t) {
    const auto st = predict_position(p, tokens, t);
    loss -= st.logprobs[static_cast<std::size_t>(tokens[t])];
  }
  return loss;
}

inline double nll_loss(const ToyLmParams& p, const AttackInstance& inst) {
  const auto tokens = inst.concatenated();
  check_tokens(p, tokens);
  return sequence_nll(p, tokens, inst.suffix_end());
}

/// d loss / d e at suffix `position`, where e relaxes the one-hot indicator of
/// the token there. Only target positions within the context window of the
/// suffix slot receive a contribution.
inline std::vector<double> onehot_gradient(const ToyLmParams& p, const AttackInstance& inst, std::size_t position) {
  if (position >= inst.suffix().size())
    throw IndexError("gradient position " + std::to_string(position) + " outside suffix of length " +
                     std::to_string(inst.suffix().size()));
  const auto& s = p.shape();
  const auto tokens = inst.concatenated();
  check_tokens(p, tokens);
  const std::size_t slot = inst.suffix_begin() + position;

  // Accumulate g = sum_t decay^{t-slot} * dL_t/dm_t, then grad_v = E[v] . g.
  std::vector<double> g(s.embed_dim, 0.0);
  for (std::size_t t = inst.suffix_end(); t < tokens.size(); ++t) {
    const std::size_t dist = t - slot;
    if (dist > s.context) continue;
    const auto st = predict_position(p, tokens, t);
    std::vector<double> dlogits(s.vocab_size);
    for (std::size_t v = 0; v < s.vocab_size; ++v) dlogits[v] = std::exp(st.logprobs[v]);
    dlogits[static_cast<std::size_t>(tokens[t])] -= 1.0;
    std::vector<double> dpre(s.hidden_dim);
    for (std::size_t j = 0; j < s.hidden_dim; ++j) {
      double acc = 0.0;
      for (std::size_t v = 0; v < s.vocab_size; ++v) acc += p.U(j, v) * dlogits[v];
      dpre[j] = acc * (1.0 - st.hidden[j] * st.hidden[j]);
    }
    const double w = p.decay_pow(dist);
    for (std::size_t a = 0; a < s.embed_dim; ++a) {
      double acc = 0.0;
      for (std::size_t j = 0; j < s.hidden_dim; ++j) acc += p.W(a, j) * dpre[j];
      g[a] += w * acc;
    }
  }
  std::vector<double> grad(s.vocab_size, 0.0);
  for (std::size_t v = 0; v < s.vocab_size; ++v) {
    double acc = 0.0;
    for (std::size_t a = 0; a < s.embed_dim; ++a) acc += p.E(v, a) * g[a];
    grad[v] = acc;
  }
  return grad;
}

/// Appends the argmax next token `steps` times; ties go to the smaller id.
inline TokenSeq greedy_decode(const ToyLmParams& p, const TokenSeq& prefix, std::size_t steps) {
  if (steps < 1) throw ValidationError("greedy_decode needs steps >= 1");
  check_tokens(p, prefix.tokens());
  std::vector<TokenId> tokens = prefix.vec();
  for (std::size_t n = 0; n < steps; ++n) {
    const auto st = predict_position(p, tokens, tokens.size());
    // max_element returns the first maximum, i.e. the smallest id.
    const auto it = std::max_element(st.logprobs.begin(), st.logprobs.end());
    tokens.push_back(static_cast<TokenId>(it - st.logprobs.begin()));
  }
  return TokenSeq(std::move(tokens), prefix.vocab());
}

// Persistence ---------------------------------------------------------------
//
// {"format": "toylm-v1", "vocab_size": V, "embed_dim": d, "hidden_dim": h,
//  "context": c, "decay": g, "embedding": [V*d], "hidden": [d*h], "output": [h*V]}
//
// Numbers are written with shortest round-trip formatting, so a save/load
// cycle reproduces every double bit for bit.

inline nlohmann::json to_json(const ToyLmParams& p) {
  const auto& s = p.shape();
  return nlohmann::json{{"format", "toylm-v1"},   {"vocab_size", s.vocab_size}, {"embed_dim", s.embed_dim},
                        {"hidden_dim", s.hidden_dim}, {"context", s.context},       {"decay", s.decay},
                        {"embedding", p.embedding()}, {"hidden", p.hidden()},       {"output", p.output()}};
}

inline ToyLmParams toylm_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "toylm-v1") throw ValidationError("toy model file: expected format toylm-v1");
  ToyLmShape s;
  s.vocab_size = j.at("vocab_size").get<std::size_t>();
  s.embed_dim = j.at("embed_dim").get<std::size_t>();
  s.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  s.context = j.at("context").get<std::size_t>();
  s.decay = j.at("decay").get<double>();
  return ToyLmParams(s, j.at("embedding").get<std::vector<double>>(), j.at("hidden").get<std::vector<double>>(),
                     j.at("output").get<std::vector<double>>());
}

inline void save_toylm(const ToyLmParams& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write toy model file " + path);
  out << to_json(p).dump() << '\n';
}

inline ToyLmParams load_toylm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read toy model file " + path);
  return toylm_from_json(nlohmann::json::parse(in));
}

}  // namespace ps
