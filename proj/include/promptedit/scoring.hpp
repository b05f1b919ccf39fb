#pragma once

#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "promptedit/prompt.hpp"

namespace promptedit {

struct ScorerObservation {
  std::vector<double> label_log_probs;  // natural log, one per label
  std::vector<double> features;

  bool operator==(const ScorerObservation&) const = default;
};

struct ScoreWeights {
  double lambda1 = 2.0;
  double lambda2 = 1.8;

  void validate() const;
};

// lambda1 * log P(correct) - lambda2 * max_{c != correct} log P(c).
// Throws InvalidTask for fewer than two labels, ShapeError for a bad index.
double compute_score(std::span<const double> label_log_probs, LabelId correct,
                     const ScoreWeights& weights);
inline double compute_score(const ScorerObservation& obs, LabelId correct,
                            const ScoreWeights& weights) {
  return compute_score(obs.label_log_probs, correct, weights);
}

std::vector<double> log_softmax(std::span<const double> logits);

// Index of the largest log-probability; ties go to the lower label.
LabelId predicted_label(std::span<const double> label_log_probs);

// Top-1 minus top-2 log-probability; label-free confidence proxy.
double top1_margin(std::span<const double> label_log_probs);

// Lower-cased alphanumeric word set.
std::set<std::string> content_tokens(std::string_view text);

// Everything a scorer may look at for one prompt. `rendered` is the flat text,
// `label_words` the query verbalizer's words in label order.
struct ScoringRequest {
  const PromptState& state;
  const TaskSpec& task;
  std::span<const Exemplar> pool;
  std::string rendered;
  std::vector<std::string> label_words;
};

ScoringRequest make_request(const PromptState& state, const TaskSpec& task,
                            std::span<const Exemplar> pool);

// Implementations must tolerate concurrent score() calls.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual ScorerObservation score(const ScoringRequest& request) const = 0;
  virtual std::size_t feature_dim() const = 0;
};

struct SyntheticScorerParams {
  double alpha = 1.0;  // per shared query/exemplar token
  double beta = 1.0;   // query verbalizer matches the label's preferred one
  double gamma = 0.0;  // scaled by 1/(1+l), identical for every label
  // preferred_verbalizer[c]; empty or out-of-range entries never match.
  std::vector<std::size_t> preferred_verbalizer;
  std::size_t feature_dim = 32;
};

// Number of query tokens that occur in exemplars currently slotted with label c.
std::vector<double> label_overlaps(const PromptState& state, const TaskSpec& task,
                                   std::span<const Exemplar> pool);

// [overlap per label | one-hot query verbalizer | l | n | zeros] of length dim.
// Throws InvalidConfig when the summary does not fit in dim.
std::vector<double> synthetic_features(const PromptState& state, const TaskSpec& task,
                                       std::span<const Exemplar> pool, std::size_t dim);

// logit(c) = alpha * overlap_c + beta * [query verbalizer == preferred(c)] + gamma / (1 + l)
ScorerObservation synthetic_score(const PromptState& state, const TaskSpec& task,
                                  std::span<const Exemplar> pool,
                                  const SyntheticScorerParams& params);

class SyntheticScorer final : public Scorer {
 public:
  explicit SyntheticScorer(SyntheticScorerParams params) : params_(std::move(params)) {}

  ScorerObservation score(const ScoringRequest& request) const override {
    return synthetic_score(request.state, request.task, request.pool, params_);
  }
  std::size_t feature_dim() const override { return params_.feature_dim; }
  const SyntheticScorerParams& params() const { return params_; }

 private:
  SyntheticScorerParams params_;
};

}  // namespace promptedit
