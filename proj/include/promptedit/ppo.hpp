#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptedit/episode.hpp"
#include "promptedit/policy.hpp"

namespace promptedit {

struct PPOConfig {
  double learning_rate = 5e-5;
  double entropy_coef = 0.005;
  double value_coef = 0.5;
  std::size_t minibatch_size = 32;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  std::size_t epochs_per_update = 4;
  double max_grad_norm = 0.5;  // <= 0 disables clipping
  std::size_t iterations = 200;
  std::size_t parallel_envs = 32;  // episodes collected per iteration
  std::size_t eval_interval = 10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// `values` carries one bootstrap entry past the last step. A done flag cuts
// both the bootstrap and the advantage recursion, so several episodes may be
// concatenated. Throws ShapeError on length mismatch.
GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      const std::vector<bool>& dones, double gamma, double lambda);

struct RolloutSample {
  PolicyInput input;
  std::size_t action = 0;
  double old_log_prob = 0.0;
  double old_value = 0.0;
  double advantage = 0.0;
  double ret = 0.0;
};

// On-policy store: filled from one iteration's episodes, consumed by a single
// update and then cleared.
class RolloutBuffer {
 public:
  // Computes GAE for one finished episode (zero bootstrap after the last step)
  // and appends its transitions.
  void add_episode(std::span<const Transition> transitions, double gamma, double lambda);
  void add(RolloutSample sample) { samples_.push_back(std::move(sample)); }

  // Shifts and scales advantages to mean 0 and population std 1.
  void normalize_advantages();

  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const std::vector<RolloutSample>& samples() const { return samples_; }
  std::vector<RolloutSample>& samples() { return samples_; }
  void clear() { samples_.clear(); }

 private:
  std::vector<RolloutSample> samples_;
};

class Adam {
 public:
  Adam(const PolicyParams& like, double lr, double beta1, double beta2, double eps);

  void step(PolicyParams& params, const PolicyGradients& grads);
  std::size_t steps() const { return t_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  PolicyParams m_;
  PolicyParams v_;
};

// Per-sample pieces of the clipped objective; exposed for tests.
struct SurrogateTerms {
  double ratio = 1.0;
  double objective = 0.0;      // min(ratio*A, clip(ratio)*A)
  double dobj_dlogp = 0.0;     // zero when the clipped branch is active
  bool clipped = false;        // |ratio - 1| > epsilon
};
SurrogateTerms clipped_surrogate(double log_prob, double old_log_prob, double advantage,
                                 double epsilon);

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  double grad_norm = 0.0;  // before clipping, averaged over minibatches
  std::size_t minibatches = 0;
};

// Runs `epochs_per_update` passes of shuffled minibatches over the buffer.
// Advantages are normalised first. On a non-finite loss or parameter the
// parameters are restored to their state before the call and NonFiniteLoss
// is thrown. The buffer is cleared on success.
UpdateStats ppo_update(RolloutBuffer& buffer, PolicyParams& params, Adam& optimizer,
                       const PPOConfig& config, Rng& rng);

struct QueryOutcome {
  std::string query;
  LabelId predicted = 0;
  std::optional<LabelId> label;
  std::optional<double> initial_score;
  std::optional<double> final_score;
  EpisodeTrace trace;
};

struct EvalResult {
  std::vector<QueryOutcome> outcomes;
  std::size_t scored = 0;  // queries with a label and a usable trace
  std::size_t discarded = 0;
  double accuracy = 0.0;
  double mean_initial_score = 0.0;
  double mean_final_score = 0.0;
};

// Runs each query's episode with the given policy from `init`. Episodes are
// label-free unless `labels_visible` is set; labels are otherwise consulted
// only afterwards to grade the final prompts.
EvalResult evaluate_queries(const Environment& env, ActionPolicy& policy,
                            std::span<const Exemplar> queries, const PromptState& init,
                            std::uint64_t seed, bool labels_visible = false);

// Greedy (or sampled, with `greedy` false) evaluation of a network policy.
EvalResult evaluate_policy(const Environment& env, const PolicyParams& params,
                           const RunningMoments& moments, std::span<const Exemplar> queries,
                           const PromptState& init, std::uint64_t seed, bool greedy = true);

struct CurvePoint {
  std::size_t iteration = 0;
  double mean_score_gain = 0.0;  // mean s_T - s_0 over the iteration's episodes
  std::optional<double> val_accuracy;
  std::optional<double> val_score;
  UpdateStats stats;
  std::size_t discarded = 0;
};

struct TrainResult {
  Checkpoint best;
  std::size_t best_iteration = 0;
  double best_val_accuracy = 0.0;
  double best_val_score = 0.0;
  std::vector<CurvePoint> curve;
  bool aborted = false;
  std::string abort_reason;
};

struct TrainHooks {
  std::function<void(const CurvePoint&)> on_curve;
  RolloutLog log;
};

// Seed of the initial policy parameters for a training run.
std::uint64_t policy_init_seed(std::uint64_t run_seed);

// Outer loop: sample a batch of training queries with replacement, roll out
// the horizon from `init`, update, and periodically evaluate on `dev`. The
// returned checkpoint is the best one on dev (accuracy, then mean score); the
// initialisation is evaluated first, so zero iterations return it unchanged.
// If every episode of an iteration loses its scorer the run stops and the
// best checkpoint so far is returned with `aborted` set.
TrainResult train(const Environment& env, std::span<const Exemplar> train_set,
                  std::span<const Exemplar> dev_set, const PromptState& init,
                  const PPOConfig& config, const PolicyConfig& policy_config,
                  const CheckpointMeta& meta, std::uint64_t seed, const TrainHooks& hooks = {});

}  // namespace promptedit
