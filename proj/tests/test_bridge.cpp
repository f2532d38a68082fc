// SPDX-License-Identifier: Apache-2.0

#include <fstream>

#include "gtest/gtest.h"
#include "ps/bridge.hpp"

namespace ps {
namespace {

using nlohmann::json;

struct Transcript {
  std::vector<json> requests;
  std::vector<json> responses;
};

Transcript load_golden() {
  std::ifstream in(std::string(PS_SOURCE_DIR) + "/tests/fixtures/bridge_golden.jsonl");
  Transcript t;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    (j.at("dir") == "->" ? t.requests : t.responses).push_back(j.at("line"));
  }
  return t;
}

std::vector<std::string> dump_all(const std::vector<json>& v) {
  std::vector<std::string> out;
  for (const auto& j : v) out.push_back(j.dump());
  return out;
}

AttackInstance golden_instance(std::size_t V = 16) {
  auto v = Vocabulary::make(V);
  return AttackInstance(TokenSeq({1, 2}, v), TokenSeq({3, 4, 5}, v), TokenSeq({6, 7}, v));
}

TEST(BridgeGolden, ClientWritesGoldenRequests) {
  const auto t = load_golden();
  ASSERT_EQ(t.requests.size(), 4u);
  auto ch = std::make_unique<ScriptedChannel>(dump_all(t.responses));
  auto* script = ch.get();
  {
    BridgeScorer b(std::move(ch));
    EXPECT_EQ(b.vocab_size(), 16u);
    EXPECT_TRUE(b.info().supports_gradient);
    EXPECT_FALSE(b.info().concurrent_safe);
    EXPECT_EQ(b.info().flops_per_token, 1000.0);
    const auto inst = golden_instance();
    std::vector<TokenSeq> cands{inst.suffix(), substitute(inst.suffix(), 0, 0)};
    EXPECT_EQ(b.losses(inst, cands), (std::vector<double>{3.75, 3.0}));
    EXPECT_EQ(b.topk(inst, 2), (std::vector<std::vector<TokenId>>{{0, 1}, {0, 1}, {0, 1}}));
    b.shutdown();
    ASSERT_EQ(script->written().size(), t.requests.size());
    for (std::size_t i = 0; i < t.requests.size(); ++i) EXPECT_EQ(json::parse(script->written()[i]), t.requests[i]);
  }
}

TEST(BridgeGolden, MockServerAnswersGoldenResponses) {
  const auto t = load_golden();
  ProcessChannel ch(std::string(PS_MOCK_BRIDGE) + " 16");
  for (std::size_t i = 0; i < t.requests.size(); ++i) {
    ch.write_line(t.requests[i].dump());
    const auto line = ch.read_line();
    ASSERT_TRUE(line.has_value());
    EXPECT_EQ(json::parse(*line), t.responses[i]) << "request " << i + 1;
  }
  EXPECT_FALSE(ch.read_line().has_value());
}

TEST(BridgeGolden, ClientAgainstMockProcess) {
  auto b = BridgeScorer::launch(std::string(PS_MOCK_BRIDGE) + " 16");
  const auto inst = golden_instance();
  std::vector<TokenSeq> cands{inst.suffix(), substitute(inst.suffix(), 0, 0)};
  const auto lb = loss_batch(*b, inst, cands);
  EXPECT_EQ(lb.losses, (std::vector<double>{3.75, 3.0}));
  EXPECT_EQ(lb.flops, 1000.0 * 7 * 2);
  EXPECT_EQ(gradient_topk(*b, inst, 3)[2], (std::vector<TokenId>{0, 1, 2}));
}

TEST(Bridge, RemoteErrorCarriesCandidateIndex) {
  // Instance vocabulary is wider than the server's, so candidate 1 is rejected remotely.
  auto b = BridgeScorer::launch(std::string(PS_MOCK_BRIDGE) + " 16");
  const auto inst = golden_instance(32);
  std::vector<TokenSeq> cands{inst.suffix(), substitute(inst.suffix(), 1, 20)};
  try {
    b->losses(inst, cands);
    FAIL() << "expected BatchError";
  } catch (const BatchError& e) {
    ASSERT_TRUE(e.candidate().has_value());
    EXPECT_EQ(*e.candidate(), 1u);
    EXPECT_NE(std::string(e.what()).find("outside vocabulary"), std::string::npos);
  }
  // The session stays usable after an error response.
  std::vector<TokenSeq> ok{inst.suffix()};
  EXPECT_EQ(b->losses(inst, ok).size(), 1u);
}

TEST(Bridge, ScriptedErrorWithoutCandidate) {
  std::vector<std::string> resp{
      R"({"id":1,"status":"ok","proto_version":1,"vocab_size":16,"supports_gradient":false})",
      R"({"id":2,"status":"error","message":"out of memory"})",
      R"({"id":3,"status":"ok"})"};
  BridgeScorer b(std::make_unique<ScriptedChannel>(resp));
  const auto inst = golden_instance();
  std::vector<TokenSeq> cands{inst.suffix()};
  try {
    b.losses(inst, cands);
    FAIL();
  } catch (const BatchError& e) {
    EXPECT_FALSE(e.candidate().has_value());
  }
  EXPECT_THROW(gradient_topk(b, inst, 2), CapabilityError);
}

TEST(Bridge, IdMismatchIsRejected) {
  std::vector<std::string> resp{
      R"({"id":1,"status":"ok","proto_version":1,"vocab_size":16,"supports_gradient":true})",
      R"({"id":7,"status":"ok","losses":[1.0]})"};
  BridgeScorer b(std::make_unique<ScriptedChannel>(resp));
  const auto inst = golden_instance();
  std::vector<TokenSeq> cands{inst.suffix()};
  EXPECT_THROW(b.losses(inst, cands), BatchError);
}

TEST(Bridge, VersionMismatchIsRejected) {
  std::vector<std::string> resp{R"({"id":1,"status":"ok","proto_version":2,"vocab_size":16})"};
  EXPECT_THROW(BridgeScorer(std::make_unique<ScriptedChannel>(resp)), BridgeError);
}

TEST(Bridge, ClosedStreamIsAnError) {
  std::vector<std::string> resp{
      R"({"id":1,"status":"ok","proto_version":1,"vocab_size":16,"supports_gradient":true})"};
  BridgeScorer b(std::make_unique<ScriptedChannel>(resp));
  const auto inst = golden_instance();
  EXPECT_THROW(b.topk(inst, 2), BridgeError);
  EXPECT_THROW(BridgeScorer(std::make_unique<ScriptedChannel>(std::vector<std::string>{})), BridgeError);
}

TEST(Bridge, MalformedResponsesAreRejected) {
  std::vector<std::string> resp{
      R"({"id":1,"status":"ok","proto_version":1,"vocab_size":16,"supports_gradient":true})",
      "not json",
      R"({"id":3,"status":"ok","topk":[[0,1],[0,1]]})",
      R"({"id":4,"status":"ok","topk":[[0,1],[0,99],[0,1]]})",
      R"({"id":5,"status":"ok","losses":[1.0,2.0]})"};
  BridgeScorer b(std::make_unique<ScriptedChannel>(resp));
  const auto inst = golden_instance();
  EXPECT_THROW(b.topk(inst, 2), BridgeError);
  EXPECT_THROW(b.topk(inst, 2), BridgeError);
  EXPECT_THROW(b.topk(inst, 2), BridgeError);
  std::vector<TokenSeq> one{inst.suffix()};
  EXPECT_THROW(b.losses(inst, one), BatchError);
}

TEST(Bridge, MockRejectsMalformedRequest) {
  ProcessChannel ch(std::string(PS_MOCK_BRIDGE));
  ch.write_line("{broken");
  const auto line = ch.read_line();
  ASSERT_TRUE(line.has_value());
  const auto j = json::parse(*line);
  EXPECT_EQ(j["status"], "error");
  EXPECT_TRUE(j["id"].is_null());
  ch.write_line(R"({"id":1,"kind":"shutdown"})");
  EXPECT_EQ(json::parse(*ch.read_line())["status"], "ok");
}

}  // namespace
}  // namespace ps
