#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "promptedit/scoring.hpp"

namespace promptedit {

// Wire messages of the remote scoring protocol (JSON bodies over HTTP POST).
//   request  {"rendered_prompt": str, "label_words": [str], "want_features": bool}
//   response {"log_probs": [float], "features": [float]?}
struct ScoreRequestMessage {
  std::string rendered_prompt;
  std::vector<std::string> label_words;
  bool want_features = true;

  bool operator==(const ScoreRequestMessage&) const = default;
};

struct ScoreResponseMessage {
  std::vector<double> log_probs;
  std::optional<std::vector<double>> features;

  bool operator==(const ScoreResponseMessage&) const = default;
};

// Decoders throw ProtocolError on malformed payloads.
std::string encode_request(const ScoreRequestMessage& msg);
ScoreRequestMessage decode_request(std::string_view body);
std::string encode_response(const ScoreResponseMessage& msg);
ScoreResponseMessage decode_response(std::string_view body);

struct RemoteScorerConfig {
  std::string endpoint = "http://127.0.0.1:8080/score";  // scheme://host:port/path
  int timeout_ms = 5000;
  int retries = 2;  // extra attempts after the first
  bool want_features = true;
  std::size_t feature_dim = 32;
};

// Scores prompts through an HTTP endpoint. Transport failures are retried and
// surface as ScorerUnavailable once attempts are exhausted. Log-probabilities
// that are not normalised over the label words are renormalised; missing or
// wrongly sized features fall back to synthetic_features of the same state.
class RemoteScorer final : public Scorer {
 public:
  explicit RemoteScorer(RemoteScorerConfig config);

  ScorerObservation score(const ScoringRequest& request) const override;
  std::size_t feature_dim() const override { return config_.feature_dim; }

  // Sends one request and returns the decoded reply without post-processing.
  ScoreResponseMessage exchange(const ScoreRequestMessage& msg) const;

  const RemoteScorerConfig& config() const { return config_; }

 private:
  RemoteScorerConfig config_;
  std::string host_;
  int port_ = 80;
  std::string path_;
};

}  // namespace promptedit
