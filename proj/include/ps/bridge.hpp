// SPDX-License-Identifier: Apache-2.0
//
// Client side of the external scorer protocol: newline-delimited JSON over a
// byte stream. One request in flight per session; every request carries a
// strictly increasing id and expects exactly one response with that id.
//
//   -> {"id":1,"kind":"hello","proto_version":1}
//   <- {"id":1,"status":"ok","proto_version":1,"vocab_size":V,
//       "supports_gradient":true,"flops_per_token":F}
//   -> {"id":2,"kind":"loss_batch","prompt":[..],"target":[..],"candidates":[[..],..]}
//   <- {"id":2,"status":"ok","losses":[..]}
//   -> {"id":3,"kind":"gradient_topk","prompt":[..],"suffix":[..],"target":[..],"k":K}
//   <- {"id":3,"status":"ok","topk":[[..],..]}
//   -> {"id":4,"kind":"shutdown"}
//   <- {"id":4,"status":"ok"}
//
// Errors come back as {"id":n,"status":"error","message":"..."} with an
// optional "candidate" index for loss_batch failures.

#pragma once

#include <cerrno>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "ps/core.hpp"
#include "ps/scoring.hpp"

namespace ps {

inline constexpr int kBridgeProtoVersion = 1;

class BridgeError : public Error {
 public:
  using Error::Error;
};

/// A bidirectional line-oriented byte stream.
class LineChannel {
 public:
  virtual ~LineChannel() = default;
  virtual void write_line(const std::string& line) = 0;
  /// Next line without its terminator; nullopt at end of stream.
  virtual std::optional<std::string> read_line() = 0;
};

/// Runs `/bin/sh -c command` with its stdin/stdout attached to the channel.
class ProcessChannel final : public LineChannel {
 public:
  explicit ProcessChannel(const std::string& command) {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) throw BridgeError("pipe failed: " + std::string(std::strerror(errno)));
    pid_ = ::fork();
    if (pid_ < 0) throw BridgeError("fork failed: " + std::string(std::strerror(errno)));
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
    std::signal(SIGPIPE, SIG_IGN);
  }

  ProcessChannel(const ProcessChannel&) = delete;
  ProcessChannel& operator=(const ProcessChannel&) = delete;

  ~ProcessChannel() override {
    if (write_fd_ >= 0) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }

  void write_line(const std::string& line) override {
    std::string data = line + '\n';
    const char* p = data.data();
    std::size_t left = data.size();
    while (left > 0) {
      const ssize_t n = ::write(write_fd_, p, left);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw BridgeError("bridge write failed: " + std::string(std::strerror(errno)));
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
  }

  std::optional<std::string> read_line() override {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      char chunk[4096];
      const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return std::nullopt;
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  std::string buffer_;
};

/// In-memory channel replaying canned responses; records what was written.
class ScriptedChannel final : public LineChannel {
 public:
  explicit ScriptedChannel(std::vector<std::string> responses) : responses_(responses.begin(), responses.end()) {}

  void write_line(const std::string& line) override { written_.push_back(line); }
  std::optional<std::string> read_line() override {
    if (responses_.empty()) return std::nullopt;
    std::string r = std::move(responses_.front());
    responses_.pop_front();
    return r;
  }
  const std::vector<std::string>& written() const noexcept { return written_; }

 private:
  std::deque<std::string> responses_;
  std::vector<std::string> written_;
};

struct BridgeOptions {
  std::string label = "bridge";
  std::optional<double> flops_per_token;  // overrides the figure from hello
};

/// Scorer backed by an external process speaking the protocol above.
class BridgeScorer final : public Scorer {
 public:
  BridgeScorer(std::unique_ptr<LineChannel> channel, BridgeOptions opts = {}) : channel_(std::move(channel)) {
    const auto hello = request({{"kind", "hello"}, {"proto_version", kBridgeProtoVersion}});
    const int version = hello.value("proto_version", 0);
    if (version != kBridgeProtoVersion)
      throw BridgeError("bridge speaks proto_version " + std::to_string(version) + ", expected " +
                        std::to_string(kBridgeProtoVersion));
    vocab_size_ = hello.at("vocab_size").get<std::size_t>();
    info_.label = opts.label;
    info_.supports_gradient = hello.value("supports_gradient", false);
    info_.concurrent_safe = false;
    info_.supports_decode = false;
    info_.flops_per_token = opts.flops_per_token.value_or(hello.value("flops_per_token", 0.0));
  }

  static std::shared_ptr<BridgeScorer> launch(const std::string& command, BridgeOptions opts = {}) {
    return std::make_shared<BridgeScorer>(std::make_unique<ProcessChannel>(command), std::move(opts));
  }

  ~BridgeScorer() override {
    try {
      if (!closed_) shutdown();
    } catch (...) {
    }
  }

  const ScorerInfo& info() const override { return info_; }
  std::size_t vocab_size() const override { return vocab_size_; }

  std::vector<double> losses(const AttackInstance& inst, std::span<const TokenSeq> suffixes) override {
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& s : suffixes) cands.push_back(s.vec());
    nlohmann::json resp;
    try {
      resp = request({{"kind", "loss_batch"},
                      {"prompt", inst.prompt().vec()},
                      {"target", inst.target().vec()},
                      {"candidates", std::move(cands)}});
    } catch (const RemoteError& e) {
      throw BatchError(info_.label + ": " + e.what(), e.candidate);
    } catch (const BridgeError& e) {
      throw BatchError(info_.label + ": " + e.what(), std::nullopt);
    }
    auto out = resp.at("losses").get<std::vector<double>>();
    if (out.size() != suffixes.size())
      throw BatchError(info_.label + ": response has " + std::to_string(out.size()) + " losses for " +
                           std::to_string(suffixes.size()) + " candidates",
                       std::nullopt);
    return out;
  }

  std::vector<std::vector<TokenId>> topk(const AttackInstance& inst, std::size_t k) override {
    if (!info_.supports_gradient) return Scorer::topk(inst, k);
    const auto resp = request({{"kind", "gradient_topk"},
                               {"prompt", inst.prompt().vec()},
                               {"suffix", inst.suffix().vec()},
                               {"target", inst.target().vec()},
                               {"k", k}});
    auto out = resp.at("topk").get<std::vector<std::vector<TokenId>>>();
    if (out.size() != inst.suffix().size()) throw BridgeError("gradient_topk returned the wrong number of positions");
    for (const auto& row : out) {
      if (row.size() != k) throw BridgeError("gradient_topk row has " + std::to_string(row.size()) + " ids, expected " + std::to_string(k));
      for (TokenId t : row)
        if (t < 0 || static_cast<std::size_t>(t) >= vocab_size_) throw BridgeError("gradient_topk returned invalid id " + std::to_string(t));
    }
    return out;
  }

  void shutdown() {
    closed_ = true;
    request({{"kind", "shutdown"}});
  }

 private:
  struct RemoteError : BridgeError {
    RemoteError(const std::string& m, std::optional<std::size_t> c) : BridgeError(m), candidate(c) {}
    std::optional<std::size_t> candidate;
  };

  nlohmann::json request(nlohmann::json body) {
    std::lock_guard lock(mu_);
    const std::uint64_t id = ++next_id_;
    body["id"] = id;
    channel_->write_line(body.dump());
    const auto line = channel_->read_line();
    if (!line) throw BridgeError("bridge closed the stream (request " + std::to_string(id) + ")");
    nlohmann::json resp;
    try {
      resp = nlohmann::json::parse(*line);
    } catch (const nlohmann::json::exception& e) {
      throw BridgeError(std::string("malformed bridge response: ") + e.what());
    }
    if (!resp.contains("id") || resp["id"] != id)
      throw BridgeError("bridge response id mismatch for request " + std::to_string(id));
    if (resp.value("status", std::string{}) != "ok") {
      std::optional<std::size_t> cand;
      if (resp.contains("candidate") && resp["candidate"].is_number_unsigned()) cand = resp["candidate"].get<std::size_t>();
      throw RemoteError("bridge error: " + resp.value("message", std::string("unspecified")), cand);
    }
    return resp;
  }

  std::unique_ptr<LineChannel> channel_;
  ScorerInfo info_;
  std::size_t vocab_size_ = 0;
  std::uint64_t next_id_ = 0;
  bool closed_ = false;
  std::mutex mu_;
};

}  // namespace ps
