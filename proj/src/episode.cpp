#include "promptedit/episode.hpp"

#include <cmath>

#include <json.hpp>

#include "promptedit/error.hpp"

namespace promptedit {

void EnvConfig::validate() const {
  if (horizon < 1) fail(ErrorCode::InvalidConfig, "horizon must be at least 1");
  if (num_slots > pool_size)
    fail(ErrorCode::InvalidConfig, "n=" + std::to_string(num_slots) + " exceeds pool size N=" +
                                       std::to_string(pool_size));
  if (!(reward_norm_eps > 0.0)) fail(ErrorCode::InvalidConfig, "reward_norm_eps must be positive");
  if (!families.any()) fail(ErrorCode::InvalidConfig, "at least one edit family must be enabled");
  weights.validate();
}

Environment::Environment(TaskSpec task, std::vector<Exemplar> pool,
                         std::shared_ptr<const Scorer> scorer, EnvConfig config)
    : task_(std::move(task)),
      pool_(std::move(pool)),
      scorer_(std::move(scorer)),
      config_(config),
      featurizer_(task_.num_labels(), task_.num_verbalizers()) {
  config_.validate();
  task_.validate();
  if (!scorer_) fail(ErrorCode::InvalidConfig, "environment needs a scorer");
  if (pool_.size() < config_.num_slots)
    fail(ErrorCode::InvalidConfig, "pool of " + std::to_string(pool_.size()) +
                                       " cannot fill " + std::to_string(config_.num_slots) + " slots");
  if (pool_.size() != config_.pool_size)
    fail(ErrorCode::InvalidConfig, "pool has " + std::to_string(pool_.size()) +
                                       " exemplars, config says " + std::to_string(config_.pool_size));
  for (std::size_t i = 0; i < pool_.size(); ++i) {
    if (pool_[i].id != i) fail(ErrorCode::InvalidConfig, "pool ids must be 0..N-1 in order");
    if (pool_[i].label >= task_.num_labels())
      fail(ErrorCode::InvalidConfig, "pool exemplar with unknown label");
  }
  if (!task_.instruction_pool.empty())
    base_instruction_ = tokenize_instruction(task_.instruction_pool.front());
}

PromptState Environment::initial_state(std::string query, std::uint64_t rng_seed) const {
  Rng rng(rng_seed);
  PromptState s;
  s.instruction = base_instruction_;
  s.exemplar_slots = rng.sample_without_replacement(pool_.size(), config_.num_slots);
  s.slot_verbalizers.assign(config_.num_slots + 1, 0);
  s.query = std::move(query);
  return s;
}

ActionCatalog Environment::catalog(const PromptState& state) const {
  return enumerate_actions(state, pool_.size(), task_.num_verbalizers(), config_.families);
}

ScorerObservation Environment::observe(const PromptState& state) const {
  ScorerObservation obs = scorer_->score(make_request(state, task_, pool_));
  if (obs.label_log_probs.size() != task_.num_labels())
    fail(ErrorCode::ShapeError, "scorer returned the wrong number of label log-probs");
  if (obs.features.size() != scorer_->feature_dim())
    fail(ErrorCode::ShapeError, "scorer feature dimension changed");
  return obs;
}

Episode::Episode(const Environment& env)
    : env_(&env), history_(env.config().horizon, env.featurizer().dim()) {}

const ScorerObservation& Episode::reset(std::string query, std::optional<LabelId> correct,
                                        std::optional<PromptState> init, std::uint64_t rng_seed) {
  const auto& cfg = env_->config();
  if (init) {
    init->history.clear();
    validate_state(*init, env_->task(), env_->pool().size(), cfg.horizon);
    if (init->num_slots() != cfg.num_slots)
      fail(ErrorCode::InvalidConfig, "initial prompt has the wrong number of slots");
    state_ = std::move(*init);
    state_.query = std::move(query);
  } else {
    state_ = env_->initial_state(std::move(query), rng_seed);
  }
  if (correct && *correct >= env_->task().num_labels())
    fail(ErrorCode::InvalidTask, "label index out of range");
  correct_ = correct;
  steps_ = 0;
  history_.clear();
  observation_ = env_->observe(state_);
  catalog_ = env_->catalog(state_);
  score_.reset();
  if (correct_) score_ = compute_score(observation_, *correct_, cfg.weights);
  initial_score_ = score_;
  return observation_;
}

StepOutcome Episode::step(const EditAction& action) {
  if (done()) fail(ErrorCode::EpisodeFinished, "episode already ran its horizon");
  if (!catalog_.index_of(action))
    fail(ErrorCode::InvalidAction, describe(action) + " is not in the current catalog");
  PromptState next = apply(state_, action, env_->pool().size(), env_->task().num_verbalizers());
  ScorerObservation obs = env_->observe(next);
  StepOutcome out;
  if (correct_) {
    const double s = compute_score(obs, *correct_, env_->config().weights);
    out.reward = s - *score_;
    score_ = s;
  }
  state_ = std::move(next);
  observation_ = obs;
  catalog_ = env_->catalog(state_);
  ++steps_;
  out.observation = std::move(obs);
  out.done = done();
  return out;
}

StepOutcome Episode::step_index(std::size_t catalog_index) {
  if (done()) fail(ErrorCode::EpisodeFinished, "episode already ran its horizon");
  if (catalog_index >= catalog_.size())
    fail(ErrorCode::InvalidAction, "catalog index " + std::to_string(catalog_index) + " out of range");
  return step(catalog_[catalog_index]);
}

void normalize_episode_rewards(std::span<Transition> transitions, double eps) {
  if (transitions.empty()) return;
  double mean = 0.0;
  for (const auto& t : transitions) mean += t.raw_reward;
  mean /= static_cast<double>(transitions.size());
  double var = 0.0;
  for (const auto& t : transitions) var += (t.raw_reward - mean) * (t.raw_reward - mean);
  var /= static_cast<double>(transitions.size());
  const double scale = std::max(std::sqrt(var), eps);
  for (auto& t : transitions) t.reward = t.raw_reward / scale;
}

namespace {

bool is_scorer_failure(const Error& e) {
  return e.code() == ErrorCode::ScorerUnavailable || e.code() == ErrorCode::ProtocolError ||
         e.code() == ErrorCode::RenderOverflow;
}

}  // namespace

std::vector<EpisodeTrace> rollout(const Environment& env, ActionPolicy& policy,
                                  std::span<const EpisodeSpec> batch, const RolloutLog& log) {
  const std::size_t count = batch.size();
  std::vector<Episode> episodes;
  std::vector<Rng> rngs;
  std::vector<EpisodeTrace> traces(count);
  episodes.reserve(count);
  rngs.reserve(count);

  auto discard = [&](std::size_t i, const Error& e) {
    traces[i].discarded = true;
    traces[i].error = e.what();
    if (log) log("episode " + std::to_string(i) + " discarded: " + e.what());
  };

  for (std::size_t i = 0; i < count; ++i) {
    episodes.emplace_back(env);
    rngs.emplace_back(derive_seed(batch[i].seed, 0x706f6c696379ULL));
    try {
      episodes[i].reset(batch[i].query, batch[i].label, batch[i].init, batch[i].seed);
      traces[i].states.push_back(episodes[i].state());
      traces[i].initial_observation = episodes[i].observation();
      traces[i].initial_score = episodes[i].score();
    } catch (const Error& e) {
      if (!is_scorer_failure(e)) throw;
      discard(i, e);
    }
  }

  const std::size_t horizon = env.config().horizon;
  for (std::size_t t = 0; t < horizon; ++t) {
    std::vector<std::size_t> live;
    std::vector<Episode*> live_eps;
    std::vector<Rng*> live_rngs;
    for (std::size_t i = 0; i < count; ++i) {
      if (traces[i].discarded) continue;
      live.push_back(i);
      live_eps.push_back(&episodes[i]);
      live_rngs.push_back(&rngs[i]);
    }
    if (live.empty()) break;
    auto decisions = policy.decide(live_eps, live_rngs);
    if (decisions.size() != live.size())
      fail(ErrorCode::ShapeError, "policy returned the wrong number of decisions");
    for (std::size_t k = 0; k < live.size(); ++k) {
      const std::size_t i = live[k];
      Episode& ep = episodes[i];
      PolicyDecision& d = decisions[k];
      if (d.action_index >= ep.catalog().size())
        fail(ErrorCode::InvalidAction, "policy chose an index outside the catalog");
      const auto family = family_of(ep.catalog()[d.action_index]);
      // Baseline policies do not featurize candidates; the history still needs the row.
      if (d.input.candidates.rows() == 0)
        d.input.candidates = env.featurizer().build(ep.state(), ep.catalog(), env.pool());
      try {
        StepOutcome out = ep.step_index(d.action_index);
        const auto row = d.input.candidates.row(static_cast<Eigen::Index>(d.action_index));
        ep.history().push(family, std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
        Transition tr;
        tr.input = std::move(d.input);
        tr.features_after = out.observation.features;
        tr.action_index = d.action_index;
        tr.log_prob = d.log_prob;
        tr.value = d.value;
        tr.raw_reward = out.reward;
        tr.reward = out.reward;
        tr.done = out.done;
        traces[i].transitions.push_back(std::move(tr));
        traces[i].states.push_back(ep.state());
      } catch (const Error& e) {
        if (!is_scorer_failure(e)) throw;
        discard(i, e);
      }
    }
  }

  for (std::size_t i = 0; i < count; ++i) {
    auto& tr = traces[i];
    if (tr.discarded) continue;
    tr.final_observation = episodes[i].observation();
    tr.final_score = episodes[i].score();
    if (env.config().reward_normalization)
      normalize_episode_rewards(tr.transitions, env.config().reward_norm_eps);
  }
  return traces;
}

void write_trace_jsonl(std::ostream& out, std::span<const EpisodeTrace> traces) {
  for (std::size_t e = 0; e < traces.size(); ++e) {
    const auto& tr = traces[e];
    if (tr.discarded) {
      out << nlohmann::json{{"episode", e}, {"discarded", true}, {"error", tr.error}}.dump() << '\n';
      continue;
    }
    for (std::size_t t = 0; t < tr.transitions.size(); ++t) {
      const auto& before = tr.states[t];
      const auto& after = tr.states[t + 1];
      nlohmann::json rec;
      rec["episode"] = e;
      rec["step"] = t;
      rec["state"] = {{"instruction", before.instruction},
                      {"exemplar_slots", before.exemplar_slots},
                      {"slot_verbalizers", before.slot_verbalizers}};
      rec["action"] = encode_action(after.history.back());
      rec["action_desc"] = describe(after.history.back());
      rec["raw_reward"] = tr.transitions[t].raw_reward;
      rec["reward"] = tr.transitions[t].reward;
      rec["done"] = tr.transitions[t].done;
      out << rec.dump() << '\n';
    }
  }
}

}  // namespace promptedit
