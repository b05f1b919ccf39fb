#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "promptedit/edit_space.hpp"
#include "promptedit/features.hpp"
#include "promptedit/prompt.hpp"
#include "promptedit/rng.hpp"
#include "promptedit/scoring.hpp"

namespace promptedit {

struct EnvConfig {
  std::size_t horizon = 8;
  std::size_t num_slots = 4;   // n
  std::size_t pool_size = 16;  // N
  ScoreWeights weights;
  bool reward_normalization = true;
  double reward_norm_eps = 1e-4;
  FamilyToggles families;

  void validate() const;
};

// Shared, read-only episode context: task, exemplar pool and scorer.
class Environment {
 public:
  // Throws InvalidConfig if the pool is smaller than the slot count or its ids
  // are not 0..size-1.
  Environment(TaskSpec task, std::vector<Exemplar> pool, std::shared_ptr<const Scorer> scorer,
              EnvConfig config);

  const TaskSpec& task() const { return task_; }
  std::span<const Exemplar> pool() const { return pool_; }
  const Scorer& scorer() const { return *scorer_; }
  const EnvConfig& config() const { return config_; }
  const CandidateFeaturizer& featurizer() const { return featurizer_; }

  // Instruction from the task's first instruction (empty if none), slots drawn
  // without replacement from the pool, every verbalizer set to 0.
  PromptState initial_state(std::string query, std::uint64_t rng_seed) const;

  ActionCatalog catalog(const PromptState& state) const;
  ScorerObservation observe(const PromptState& state) const;

 private:
  TaskSpec task_;
  std::vector<Exemplar> pool_;
  std::vector<std::string> base_instruction_;
  std::shared_ptr<const Scorer> scorer_;
  EnvConfig config_;
  CandidateFeaturizer featurizer_;
};

struct StepOutcome {
  ScorerObservation observation;
  double reward = 0.0;  // 0 when the episode has no label
  bool done = false;
};

// One query's editing episode. Without a label the episode still advances but
// no scores or rewards are computed.
class Episode {
 public:
  explicit Episode(const Environment& env);

  const ScorerObservation& reset(std::string query, std::optional<LabelId> correct,
                                 std::optional<PromptState> init, std::uint64_t rng_seed);

  // Throws EpisodeFinished after the horizon and InvalidAction for actions
  // outside the current catalog.
  StepOutcome step(const EditAction& action);
  StepOutcome step_index(std::size_t catalog_index);

  const PromptState& state() const { return state_; }
  const ActionCatalog& catalog() const { return catalog_; }
  const ScorerObservation& observation() const { return observation_; }
  ActionHistory& history() { return history_; }
  const ActionHistory& history() const { return history_; }
  std::optional<LabelId> label() const { return correct_; }
  std::optional<double> score() const { return score_; }
  std::optional<double> initial_score() const { return initial_score_; }
  std::size_t steps() const { return steps_; }
  bool done() const { return steps_ >= env_->config().horizon; }
  const Environment& environment() const { return *env_; }

 private:
  const Environment* env_;
  PromptState state_;
  ActionCatalog catalog_;
  ScorerObservation observation_;
  ActionHistory history_;
  std::optional<LabelId> correct_;
  std::optional<double> score_;
  std::optional<double> initial_score_;
  std::size_t steps_ = 0;
};

struct Transition {
  PolicyInput input;            // policy view before the action
  std::vector<double> features_after;
  std::size_t action_index = 0;
  double log_prob = 0.0;
  double value = 0.0;
  double raw_reward = 0.0;
  double reward = 0.0;          // after per-episode normalisation, if enabled
  bool done = false;
};

struct PolicyDecision {
  std::size_t action_index = 0;
  double log_prob = 0.0;
  double value = 0.0;
  PolicyInput input;
};

// Chooses one action for every live episode of a synchronised batch.
class ActionPolicy {
 public:
  virtual ~ActionPolicy() = default;
  virtual std::vector<PolicyDecision> decide(std::span<Episode* const> episodes,
                                             std::span<Rng* const> rngs) = 0;
};

struct EpisodeSpec {
  std::string query;
  std::optional<LabelId> label;
  std::uint64_t seed = 0;
  std::optional<PromptState> init;
};

struct EpisodeTrace {
  std::vector<Transition> transitions;
  std::vector<PromptState> states;  // states[t] is the prompt after t edits
  ScorerObservation initial_observation;
  ScorerObservation final_observation;
  std::optional<double> initial_score;
  std::optional<double> final_score;
  bool discarded = false;
  std::string error;

  const PromptState& initial_state() const { return states.front(); }
  const PromptState& final_state() const { return states.back(); }
};

using RolloutLog = std::function<void(const std::string&)>;

// Advances all episodes in lockstep for the horizon. An episode whose scorer
// fails is marked discarded and the rest continue.
std::vector<EpisodeTrace> rollout(const Environment& env, ActionPolicy& policy,
                                  std::span<const EpisodeSpec> batch,
                                  const RolloutLog& log = {});

// Divides rewards by max(population std, eps); all-zero rewards stay zero.
void normalize_episode_rewards(std::span<Transition> transitions, double eps);

// One JSON object per step: episode, step, state, action code, reward.
void write_trace_jsonl(std::ostream& out, std::span<const EpisodeTrace> traces);

}  // namespace promptedit
