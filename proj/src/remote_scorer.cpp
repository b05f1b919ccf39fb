#include "promptedit/remote_scorer.hpp"

#include <cmath>

#include <httplib.h>
#include <json.hpp>

#include "promptedit/error.hpp"

namespace promptedit {
namespace {

using nlohmann::json;

json parse_object(std::string_view body) {
  json doc = json::parse(body.begin(), body.end(), nullptr, /*allow_exceptions=*/false);
  if (doc.is_discarded() || !doc.is_object())
    fail(ErrorCode::ProtocolError, "payload is not a JSON object");
  return doc;
}

std::vector<double> number_array(const json& doc, const char* key) {
  const auto it = doc.find(key);
  if (it == doc.end() || !it->is_array())
    fail(ErrorCode::ProtocolError, std::string("field '") + key + "' must be an array");
  std::vector<double> out;
  out.reserve(it->size());
  for (const auto& v : *it) {
    if (!v.is_number()) fail(ErrorCode::ProtocolError, std::string("non-numeric entry in '") + key + "'");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace

std::string encode_request(const ScoreRequestMessage& msg) {
  json doc;
  doc["rendered_prompt"] = msg.rendered_prompt;
  doc["label_words"] = msg.label_words;
  doc["want_features"] = msg.want_features;
  return doc.dump();
}

ScoreRequestMessage decode_request(std::string_view body) {
  const json doc = parse_object(body);
  ScoreRequestMessage msg;
  const auto prompt = doc.find("rendered_prompt");
  if (prompt == doc.end() || !prompt->is_string())
    fail(ErrorCode::ProtocolError, "field 'rendered_prompt' must be a string");
  msg.rendered_prompt = prompt->get<std::string>();
  const auto words = doc.find("label_words");
  if (words == doc.end() || !words->is_array())
    fail(ErrorCode::ProtocolError, "field 'label_words' must be an array");
  for (const auto& w : *words) {
    if (!w.is_string()) fail(ErrorCode::ProtocolError, "label words must be strings");
    msg.label_words.push_back(w.get<std::string>());
  }
  const auto want = doc.find("want_features");
  if (want != doc.end()) {
    if (!want->is_boolean()) fail(ErrorCode::ProtocolError, "field 'want_features' must be a bool");
    msg.want_features = want->get<bool>();
  }
  return msg;
}

std::string encode_response(const ScoreResponseMessage& msg) {
  json doc;
  doc["log_probs"] = msg.log_probs;
  if (msg.features) doc["features"] = *msg.features;
  return doc.dump();
}

ScoreResponseMessage decode_response(std::string_view body) {
  const json doc = parse_object(body);
  ScoreResponseMessage msg;
  msg.log_probs = number_array(doc, "log_probs");
  if (const auto it = doc.find("features"); it != doc.end() && !it->is_null())
    msg.features = number_array(doc, "features");
  return msg;
}

RemoteScorer::RemoteScorer(RemoteScorerConfig config) : config_(std::move(config)) {
  std::string_view rest = config_.endpoint;
  constexpr std::string_view kScheme = "http://";
  if (!rest.starts_with(kScheme))
    fail(ErrorCode::InvalidConfig, "remote endpoint must start with http://: " + config_.endpoint);
  rest.remove_prefix(kScheme.size());
  const auto slash = rest.find('/');
  std::string_view authority = rest.substr(0, slash);
  path_ = slash == std::string_view::npos ? "/" : std::string(rest.substr(slash));
  const auto colon = authority.rfind(':');
  if (colon != std::string_view::npos) {
    try {
      port_ = std::stoi(std::string(authority.substr(colon + 1)));
    } catch (const std::exception&) {
      fail(ErrorCode::InvalidConfig, "bad port in endpoint " + config_.endpoint);
    }
    authority = authority.substr(0, colon);
  }
  host_ = std::string(authority);
  if (host_.empty()) fail(ErrorCode::InvalidConfig, "no host in endpoint " + config_.endpoint);
  if (config_.timeout_ms <= 0 || config_.retries < 0)
    fail(ErrorCode::InvalidConfig, "timeout must be positive and retries non-negative");
}

ScoreResponseMessage RemoteScorer::exchange(const ScoreRequestMessage& msg) const {
  const std::string body = encode_request(msg);
  const auto sec = config_.timeout_ms / 1000;
  const auto usec = (config_.timeout_ms % 1000) * 1000;
  std::string last_error;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    httplib::Client client(host_, port_);
    client.set_connection_timeout(sec, usec);
    client.set_read_timeout(sec, usec);
    client.set_write_timeout(sec, usec);
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      fail(ErrorCode::ProtocolError, "scorer answered HTTP " + std::to_string(res->status));
    return decode_response(res->body);
  }
  fail(ErrorCode::ScorerUnavailable, "no reply from " + config_.endpoint + " after " +
                                         std::to_string(config_.retries + 1) +
                                         " attempts: " + last_error);
}

ScorerObservation RemoteScorer::score(const ScoringRequest& request) const {
  ScoreRequestMessage msg{request.rendered, request.label_words, config_.want_features};
  ScoreResponseMessage reply = exchange(msg);
  if (reply.log_probs.size() != request.label_words.size())
    fail(ErrorCode::ProtocolError, "expected " + std::to_string(request.label_words.size()) +
                                       " log-probs, got " + std::to_string(reply.log_probs.size()));
  double mass = 0.0;
  for (double lp : reply.log_probs) {
    if (std::isnan(lp) || lp > 0.0) fail(ErrorCode::ProtocolError, "log-prob outside (-inf, 0]");
    mass += std::exp(lp);
  }
  if (!(mass > 0.0)) fail(ErrorCode::ProtocolError, "log-probs carry no mass");

  ScorerObservation obs;
  obs.label_log_probs =
      std::abs(mass - 1.0) <= 1e-6 ? std::move(reply.log_probs) : log_softmax(reply.log_probs);
  if (reply.features && reply.features->size() == config_.feature_dim)
    obs.features = std::move(*reply.features);
  else
    obs.features = synthetic_features(request.state, request.task, request.pool, config_.feature_dim);
  return obs;
}

}  // namespace promptedit
