#include "promptedit/scoring.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "promptedit/error.hpp"

namespace promptedit {

void ScoreWeights::validate() const {
  if (!(lambda1 > 0.0) || !(lambda2 > 0.0) || !std::isfinite(lambda1) || !std::isfinite(lambda2))
    fail(ErrorCode::InvalidConfig, "score weights must be positive and finite");
}

double compute_score(std::span<const double> label_log_probs, LabelId correct,
                     const ScoreWeights& weights) {
  if (label_log_probs.size() < 2)
    fail(ErrorCode::InvalidTask, "score needs at least two labels");
  if (correct >= label_log_probs.size())
    fail(ErrorCode::ShapeError, "correct label index out of range");
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < label_log_probs.size(); ++c)
    if (c != correct) best_other = std::max(best_other, label_log_probs[c]);
  return weights.lambda1 * label_log_probs[correct] - weights.lambda2 * best_other;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

LabelId predicted_label(std::span<const double> label_log_probs) {
  if (label_log_probs.empty()) fail(ErrorCode::ShapeError, "no labels to predict from");
  return static_cast<LabelId>(
      std::max_element(label_log_probs.begin(), label_log_probs.end()) - label_log_probs.begin());
}

double top1_margin(std::span<const double> label_log_probs) {
  if (label_log_probs.size() < 2) return 0.0;
  double first = -std::numeric_limits<double>::infinity();
  double second = first;
  for (double v : label_log_probs) {
    if (v > first) {
      second = first;
      first = v;
    } else if (v > second) {
      second = v;
    }
  }
  return first - second;
}

std::set<std::string> content_tokens(std::string_view text) {
  std::set<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.insert(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.insert(std::move(cur));
  return out;
}

ScoringRequest make_request(const PromptState& state, const TaskSpec& task,
                            std::span<const Exemplar> pool) {
  return ScoringRequest{state, task, pool, render(state, task, pool),
                        task.verbalizer_pool.at(state.query_verbalizer()).label_words()};
}

std::vector<double> label_overlaps(const PromptState& state, const TaskSpec& task,
                                   std::span<const Exemplar> pool) {
  const auto query = content_tokens(state.query);
  std::vector<std::set<std::string>> per_label(task.num_labels());
  for (auto id : state.exemplar_slots) {
    const Exemplar& ex = pool[id];
    auto toks = content_tokens(ex.text);
    per_label.at(ex.label).insert(toks.begin(), toks.end());
  }
  std::vector<double> out(task.num_labels(), 0.0);
  for (std::size_t c = 0; c < per_label.size(); ++c)
    for (const auto& t : query)
      if (per_label[c].contains(t)) out[c] += 1.0;
  return out;
}

std::vector<double> synthetic_features(const PromptState& state, const TaskSpec& task,
                                       std::span<const Exemplar> pool, std::size_t dim) {
  const std::size_t used = task.num_labels() + task.num_verbalizers() + 2;
  if (used > dim)
    fail(ErrorCode::InvalidConfig, "feature dimension " + std::to_string(dim) +
                                       " too small, need " + std::to_string(used));
  std::vector<double> f(dim, 0.0);
  const auto ov = label_overlaps(state, task, pool);
  std::copy(ov.begin(), ov.end(), f.begin());
  f[task.num_labels() + state.query_verbalizer()] = 1.0;
  f[task.num_labels() + task.num_verbalizers()] = static_cast<double>(state.num_phrases());
  f[task.num_labels() + task.num_verbalizers() + 1] = static_cast<double>(state.num_slots());
  return f;
}

ScorerObservation synthetic_score(const PromptState& state, const TaskSpec& task,
                                  std::span<const Exemplar> pool,
                                  const SyntheticScorerParams& params) {
  const auto ov = label_overlaps(state, task, pool);
  const double length_term = params.gamma / (1.0 + static_cast<double>(state.num_phrases()));
  std::vector<double> logits(task.num_labels());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    const bool match = c < params.preferred_verbalizer.size() &&
                       params.preferred_verbalizer[c] == state.query_verbalizer();
    logits[c] = params.alpha * ov[c] + (match ? params.beta : 0.0) + length_term;
  }
  return {log_softmax(logits), synthetic_features(state, task, pool, params.feature_dim)};
}

}  // namespace promptedit
