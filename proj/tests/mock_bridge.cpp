// SPDX-License-Identifier: Apache-2.0
//
// Stand-in external scorer for protocol tests.
//
//   mock_bridge [vocab_size]
//
// loss(c) = 0.25 * sum_i ((c_i + 1) * (i + 1) mod 7) + 0.5 * |target|
// gradient_topk answers ids 0..K-1 at every position.

#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

using nlohmann::json;

namespace {

json error(const json& id, const std::string& message) {
  return {{"id", id}, {"status", "error"}, {"message", message}};
}

json handle(const json& req, long vocab) {
  const json id = req.contains("id") ? req["id"] : json(nullptr);
  const std::string kind = req.value("kind", "");
  if (kind == "hello") {
    if (req.value("proto_version", 0) != 1) return error(id, "unsupported proto_version");
    return {{"id", id}, {"status", "ok"}, {"proto_version", 1}, {"vocab_size", vocab},
            {"supports_gradient", true}, {"flops_per_token", 1000.0}};
  }
  if (kind == "loss_batch") {
    const auto target_len = static_cast<double>(req.at("target").size());
    json losses = json::array();
    const auto& cands = req.at("candidates");
    for (std::size_t c = 0; c < cands.size(); ++c) {
      long acc = 0;
      for (std::size_t i = 0; i < cands[c].size(); ++i) {
        const long t = cands[c][i].get<long>();
        if (t < 0 || t >= vocab) {
          json e = error(id, "token " + std::to_string(t) + " outside vocabulary");
          e["candidate"] = c;
          return e;
        }
        acc += ((t + 1) * static_cast<long>(i + 1)) % 7;
      }
      losses.push_back(0.25 * static_cast<double>(acc) + 0.5 * target_len);
    }
    return {{"id", id}, {"status", "ok"}, {"losses", losses}};
  }
  if (kind == "gradient_topk") {
    const long k = req.at("k").get<long>();
    if (k < 1 || k > vocab) return error(id, "k out of range");
    json row = json::array();
    for (long v = 0; v < k; ++v) row.push_back(v);
    json rows = json::array();
    for (std::size_t i = 0; i < req.at("suffix").size(); ++i) rows.push_back(row);
    return {{"id", id}, {"status", "ok"}, {"topk", rows}};
  }
  if (kind == "shutdown") return {{"id", id}, {"status", "ok"}};
  return error(id, "unknown kind '" + kind + "'");
}

}  // namespace

int main(int argc, char** argv) {
  const long vocab = argc > 1 ? std::stol(argv[1]) : 16;
  std::string line;
  while (std::getline(std::cin, line)) {
    json req;
    try {
      req = json::parse(line);
    } catch (const json::exception&) {
      std::cout << error(nullptr, "malformed request").dump() << std::endl;
      continue;
    }
    json resp;
    try {
      resp = handle(req, vocab);
    } catch (const json::exception& e) {
      resp = error(req.contains("id") ? req["id"] : json(nullptr), e.what());
    }
    std::cout << resp.dump() << std::endl;
    if (req.value("kind", "") == "shutdown") break;
  }
  return 0;
}
