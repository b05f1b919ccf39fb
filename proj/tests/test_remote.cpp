#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>
#include <vector>

#include "promptedit/remote_scorer.hpp"
#include "stub_server.hpp"
#include "test_support.hpp"

namespace promptedit {
namespace {

using testing::StubServer;

const std::vector<double> kLogProbs{std::log(0.2), std::log(0.3), std::log(0.5)};
const std::vector<double> kFeatures{0.1, -2.5e-7, 3.0e12, 1.0 / 3.0};

void reply_fixed(const httplib::Request&, httplib::Response& res, int) {
  res.set_content(encode_response({kLogProbs, kFeatures}), "application/json");
}

RemoteScorerConfig config_for(const StubServer& s, int timeout_ms = 2000, int retries = 2) {
  RemoteScorerConfig c;
  c.endpoint = s.endpoint();
  c.timeout_ms = timeout_ms;
  c.retries = retries;
  c.feature_dim = 4;
  return c;
}

TEST(WireFormat, RequestRoundTrip) {
  ScoreRequestMessage msg{"Review: tense \"quoted\" \xC3\xA9t\xC3\xA9. Sentiment: <mask>.",
                          {"terrible", "great"}, false};
  EXPECT_EQ(decode_request(encode_request(msg)), msg);
}

TEST(WireFormat, ResponseRoundTripIsBitExact) {
  ScoreResponseMessage msg{{-0.1, std::log(0.9), -1e-300, -745.0}, std::vector<double>{
                               0.1, 1.0 / 7.0, -3.14159265358979, 5e-324, 1.7976931348623157e308}};
  const auto back = decode_response(encode_response(msg));
  ASSERT_EQ(back.log_probs.size(), msg.log_probs.size());
  for (std::size_t i = 0; i < msg.log_probs.size(); ++i)
    EXPECT_EQ(std::memcmp(&back.log_probs[i], &msg.log_probs[i], sizeof(double)), 0);
  EXPECT_EQ(back, msg);
  EXPECT_EQ(decode_response(R"({"log_probs": [-0.5, -1.0]})").features, std::nullopt);
}

TEST(WireFormat, MalformedPayloadsRejected) {
  EXPECT_ERROR_CODE(decode_response("not json"), ErrorCode::ProtocolError);
  EXPECT_ERROR_CODE(decode_response("[1, 2]"), ErrorCode::ProtocolError);
  EXPECT_ERROR_CODE(decode_response(R"({"features": [1]})"), ErrorCode::ProtocolError);
  EXPECT_ERROR_CODE(decode_response(R"({"log_probs": ["x"]})"), ErrorCode::ProtocolError);
  EXPECT_ERROR_CODE(decode_request(R"({"label_words": []})"), ErrorCode::ProtocolError);
  EXPECT_ERROR_CODE(decode_request(R"({"rendered_prompt": "a", "label_words": [1]})"),
                    ErrorCode::ProtocolError);
}

TEST(RemoteScorer, StubRoundTripIsBitExact) {
  StubServer server(reply_fixed);
  RemoteScorer scorer(config_for(server));
  ScoreRequestMessage msg{"Review: fine. Sentiment: <mask>.", {"bad", "ok", "good"}, true};
  const auto reply = scorer.exchange(msg);
  EXPECT_EQ(reply.log_probs, kLogProbs);
  EXPECT_EQ(reply.features, kFeatures);
  ASSERT_EQ(server.bodies().size(), 1u);
  EXPECT_EQ(decode_request(server.bodies()[0]), msg);
  EXPECT_EQ(server.bodies()[0], encode_request(msg));
}

TEST(RemoteScorer, RecoversFromOneTimeout) {
  StubServer server([](const httplib::Request& req, httplib::Response& res, int call) {
    if (call == 0) std::this_thread::sleep_for(std::chrono::milliseconds(1200));
    reply_fixed(req, res, call);
  });
  RemoteScorer scorer(config_for(server, 300, 1));
  const auto reply = scorer.exchange({"x <mask>", {"a", "b", "c"}, true});
  EXPECT_EQ(reply.log_probs, kLogProbs);
  EXPECT_EQ(server.calls(), 2);
}

TEST(RemoteScorer, ServerErrorsAreRetried) {
  StubServer server([](const httplib::Request& req, httplib::Response& res, int call) {
    if (call < 2) {
      res.status = 503;
      return;
    }
    reply_fixed(req, res, call);
  });
  RemoteScorer scorer(config_for(server, 2000, 2));
  EXPECT_EQ(scorer.exchange({"x <mask>", {"a"}, true}).log_probs, kLogProbs);
  EXPECT_EQ(server.calls(), 3);
}

TEST(RemoteScorer, UnavailableAfterRetriesExhausted) {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  RemoteScorerConfig c;
  c.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/score";
  c.timeout_ms = 300;
  c.retries = 1;
  RemoteScorer scorer(c);
  try {
    scorer.exchange({"x <mask>", {"a", "b"}, true});
    ADD_FAILURE() << "expected ScorerUnavailable";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ScorerUnavailable);
    EXPECT_TRUE(e.retryable());
  }
}

TEST(RemoteScorer, BadReplyIsProtocolError) {
  StubServer server([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content("{\"log_probs\": \"oops\"}", "application/json");
  });
  RemoteScorer scorer(config_for(server));
  EXPECT_ERROR_CODE(scorer.exchange({"x <mask>", {"a", "b"}, true}), ErrorCode::ProtocolError);

  StubServer not_found([](const httplib::Request&, httplib::Response& res, int) {
    res.status = 404;
  });
  RemoteScorer scorer2(config_for(not_found));
  EXPECT_ERROR_CODE(scorer2.exchange({"x <mask>", {"a", "b"}, true}), ErrorCode::ProtocolError);
  EXPECT_EQ(not_found.calls(), 1);
}

TEST(RemoteScorer, EndpointValidation) {
  RemoteScorerConfig c;
  c.endpoint = "ftp://host/x";
  EXPECT_ERROR_CODE(RemoteScorer{c}, ErrorCode::InvalidConfig);
  c.endpoint = "http://:80/x";
  EXPECT_ERROR_CODE(RemoteScorer{c}, ErrorCode::InvalidConfig);
  c.endpoint = "http://host:abc/x";
  EXPECT_ERROR_CODE(RemoteScorer{c}, ErrorCode::InvalidConfig);
}

class RemoteScoreTest : public ::testing::Test {
 protected:
  TaskSpec task = testing::sentiment_task();
  std::vector<Exemplar> pool = testing::sentiment_pool();
  PromptState state() const {
    PromptState s;
    s.exemplar_slots = {0, 4};
    s.slot_verbalizers = {0, 0, 1};
    s.query = "slow warm";
    return s;
  }
};

TEST_F(RemoteScoreTest, SendsRenderedPromptAndQueryWords) {
  StubServer server([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(encode_response({{std::log(0.25), std::log(0.75)}, std::vector<double>{1, 2, 3, 4}}),
                    "application/json");
  });
  RemoteScorer scorer(config_for(server));
  const auto s = state();
  const auto obs = scorer.score(make_request(s, task, pool));
  EXPECT_EQ(obs.label_log_probs, (std::vector<double>{std::log(0.25), std::log(0.75)}));
  EXPECT_EQ(obs.features, (std::vector<double>{1, 2, 3, 4}));
  const auto sent = decode_request(server.bodies().at(0));
  EXPECT_EQ(sent.rendered_prompt, render(s, task, pool));
  EXPECT_EQ(sent.label_words, (std::vector<std::string>{"terrible", "great"}));
}

TEST_F(RemoteScoreTest, RenormalisesAndFallsBackToLocalFeatures) {
  StubServer server([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(R"({"log_probs": [-2.0, -3.0]})", "application/json");
  });
  auto cfg = config_for(server);
  cfg.feature_dim = 8;
  RemoteScorer scorer(cfg);
  const auto s = state();
  const auto obs = scorer.score(make_request(s, task, pool));
  EXPECT_NEAR(std::exp(obs.label_log_probs[0]) + std::exp(obs.label_log_probs[1]), 1.0, 1e-12);
  EXPECT_NEAR(obs.label_log_probs[0] - obs.label_log_probs[1], 1.0, 1e-12);
  EXPECT_EQ(obs.features, synthetic_features(s, task, pool, 8));
}

TEST_F(RemoteScoreTest, WrongLabelCountRejected) {
  StubServer server([](const httplib::Request&, httplib::Response& res, int) {
    res.set_content(R"({"log_probs": [-0.1]})", "application/json");
  });
  RemoteScorer scorer(config_for(server));
  EXPECT_ERROR_CODE(scorer.score(make_request(state(), task, pool)), ErrorCode::ProtocolError);
}

}  // namespace
}  // namespace promptedit
