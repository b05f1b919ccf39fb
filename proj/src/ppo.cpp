#include "promptedit/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "promptedit/error.hpp"

namespace promptedit {
namespace {

constexpr std::uint64_t kInitTag = 0x696e6974;
constexpr std::uint64_t kBatchTag = 0x6261746368;
constexpr std::uint64_t kUpdateTag = 0x757064617465;
constexpr std::uint64_t kEvalTag = 0x6576616c;
constexpr std::uint64_t kEpisodeTag = 0x65706973;

// log pi over the unmasked entries; masked entries stay -inf.
Vector masked_log_softmax(const Vector& logits) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  double mx = neg_inf;
  for (Eigen::Index i = 0; i < logits.size(); ++i) mx = std::max(mx, logits(i));
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (logits(i) != neg_inf) sum += std::exp(logits(i) - mx);
  const double lse = mx + std::log(sum);
  Vector out(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    out(i) = logits(i) == neg_inf ? neg_inf : logits(i) - lse;
  return out;
}

bool better(double acc, double score, double best_acc, double best_score) {
  if (acc != best_acc) return acc > best_acc;
  return score > best_score;
}

}  // namespace

void PPOConfig::validate() const {
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0))
    fail(ErrorCode::InvalidConfig, "clip_epsilon must lie in (0, 1)");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail(ErrorCode::InvalidConfig, "gamma must lie in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0))
    fail(ErrorCode::InvalidConfig, "gae_lambda must lie in [0, 1]");
  if (!(learning_rate > 0.0)) fail(ErrorCode::InvalidConfig, "learning_rate must be positive");
  if (entropy_coef < 0.0 || value_coef < 0.0)
    fail(ErrorCode::InvalidConfig, "loss coefficients must be non-negative");
  if (minibatch_size == 0 || epochs_per_update == 0 || parallel_envs == 0)
    fail(ErrorCode::InvalidConfig, "minibatch size, epochs and parallel episodes must be positive");
  if (eval_interval == 0) fail(ErrorCode::InvalidConfig, "eval_interval must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 &&
        adam_eps > 0.0))
    fail(ErrorCode::InvalidConfig, "bad Adam settings");
}

GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      const std::vector<bool>& dones, double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n + 1 || dones.size() != n)
    fail(ErrorCode::ShapeError, "GAE needs n rewards, n done flags and n+1 values; got " +
                                    std::to_string(n) + ", " + std::to_string(dones.size()) +
                                    ", " + std::to_string(values.size()));
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double live = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * values[t + 1] * live - values[t];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[t] = next_adv;
    out.returns[t] = next_adv + values[t];
  }
  return out;
}

void RolloutBuffer::add_episode(std::span<const Transition> transitions, double gamma,
                                double lambda) {
  if (transitions.empty()) return;
  std::vector<double> rewards, values;
  std::vector<bool> dones;
  for (const auto& t : transitions) {
    rewards.push_back(t.reward);
    values.push_back(t.value);
    dones.push_back(t.done);
  }
  dones.back() = true;
  values.push_back(0.0);
  const GaeResult gae = compute_gae(rewards, values, dones, gamma, lambda);
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    RolloutSample s;
    s.input = transitions[i].input;
    s.action = transitions[i].action_index;
    s.old_log_prob = transitions[i].log_prob;
    s.old_value = transitions[i].value;
    s.advantage = gae.advantages[i];
    s.ret = gae.returns[i];
    samples_.push_back(std::move(s));
  }
}

void RolloutBuffer::normalize_advantages() {
  if (samples_.empty()) return;
  double mean = 0.0;
  for (const auto& s : samples_) mean += s.advantage;
  mean /= static_cast<double>(samples_.size());
  double var = 0.0;
  for (const auto& s : samples_) var += (s.advantage - mean) * (s.advantage - mean);
  var /= static_cast<double>(samples_.size());
  const double sd = std::sqrt(var);
  // A constant batch carries no preference; centre it and leave the scale.
  const double scale = sd > 1e-12 ? 1.0 / sd : 1.0;
  for (auto& s : samples_) s.advantage = (s.advantage - mean) * scale;
}

Adam::Adam(const PolicyParams& like, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(like.zeros_like()), v_(like.zeros_like()) {}

void Adam::step(PolicyParams& params, const PolicyGradients& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
    params[i].array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

SurrogateTerms clipped_surrogate(double log_prob, double old_log_prob, double advantage,
                                 double epsilon) {
  SurrogateTerms t;
  t.ratio = std::exp(log_prob - old_log_prob);
  const double clipped_ratio = std::clamp(t.ratio, 1.0 - epsilon, 1.0 + epsilon);
  const double unclipped = t.ratio * advantage;
  const double clipped = clipped_ratio * advantage;
  t.objective = std::min(unclipped, clipped);
  t.dobj_dlogp = unclipped <= clipped ? unclipped : 0.0;
  t.clipped = std::abs(t.ratio - 1.0) > epsilon;
  return t;
}

UpdateStats ppo_update(RolloutBuffer& buffer, PolicyParams& params, Adam& optimizer,
                       const PPOConfig& config, Rng& rng) {
  config.validate();
  UpdateStats stats;
  if (buffer.empty()) return stats;
  buffer.normalize_advantages();
  const auto& samples = buffer.samples();
  const std::size_t n = samples.size();
  const PolicyParams snapshot = params;
  PolicyGradients grads = params.zeros_like();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  auto abort_update = [&](const std::string& why) {
    params = snapshot;
    fail(ErrorCode::NonFiniteLoss, why);
  };

  std::size_t seen = 0;
  std::size_t clipped = 0;
  for (std::size_t epoch = 0; epoch < config.epochs_per_update; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += config.minibatch_size) {
      const std::size_t end = std::min(n, start + config.minibatch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      grads.set_zero();
      for (std::size_t j = start; j < end; ++j) {
        const RolloutSample& s = samples[order[j]];
        const ForwardPass pass = forward(s.input, params);
        const Vector logp = masked_log_softmax(pass.logits);
        const Vector probs = masked_softmax(pass.logits);
        double entropy = 0.0;
        for (Eigen::Index k = 0; k < probs.size(); ++k)
          if (probs(k) > 0.0) entropy -= probs(k) * logp(k);
        const auto terms = clipped_surrogate(logp(static_cast<Eigen::Index>(s.action)),
                                             s.old_log_prob, s.advantage, config.clip_epsilon);
        const double verr = pass.value - s.ret;
        const double loss = -terms.objective + config.value_coef * verr * verr -
                            config.entropy_coef * entropy;
        if (!std::isfinite(loss)) {
          std::ostringstream why;
          why << "non-finite PPO loss (epoch " << epoch << ", sample " << order[j]
              << ", ratio " << terms.ratio << ", value " << pass.value << ", return " << s.ret
              << ", entropy " << entropy << ")";
          abort_update(why.str());
        }
        std::vector<double> dlogits(static_cast<std::size_t>(probs.size()), 0.0);
        for (Eigen::Index k = 0; k < probs.size(); ++k) {
          if (probs(k) <= 0.0) continue;
          const double onehot = k == static_cast<Eigen::Index>(s.action) ? 1.0 : 0.0;
          const double g = -terms.dobj_dlogp * (onehot - probs(k)) +
                           config.entropy_coef * probs(k) * (logp(k) + entropy);
          dlogits[static_cast<std::size_t>(k)] = g * inv_b;
        }
        backward(pass, dlogits, 2.0 * config.value_coef * verr * inv_b, params, grads);

        stats.policy_loss += -terms.objective;
        stats.value_loss += verr * verr;
        stats.entropy += entropy;
        stats.approx_kl += s.old_log_prob - logp(static_cast<Eigen::Index>(s.action));
        clipped += terms.clipped ? 1 : 0;
        ++seen;
      }
      const double gnorm = std::sqrt(grads.squared_norm());
      if (!std::isfinite(gnorm)) abort_update("non-finite gradient norm");
      stats.grad_norm += gnorm;
      if (config.max_grad_norm > 0.0 && gnorm > config.max_grad_norm)
        grads.scale(config.max_grad_norm / gnorm);
      optimizer.step(params, grads);
      if (!params.all_finite()) abort_update("parameters became non-finite after an update");
      ++stats.minibatches;
    }
  }
  const double inv = 1.0 / static_cast<double>(seen);
  stats.policy_loss *= inv;
  stats.value_loss *= inv;
  stats.entropy *= inv;
  stats.approx_kl *= inv;
  stats.clip_fraction = static_cast<double>(clipped) * inv;
  stats.grad_norm /= static_cast<double>(stats.minibatches);
  buffer.clear();
  return stats;
}

EvalResult evaluate_queries(const Environment& env, ActionPolicy& policy,
                            std::span<const Exemplar> queries, const PromptState& init,
                            std::uint64_t seed, bool labels_visible) {
  if (queries.empty()) fail(ErrorCode::EmptySplit, "evaluation split is empty");
  std::vector<EpisodeSpec> specs;
  specs.reserve(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::optional<LabelId> label;
    if (labels_visible) label = queries[i].label;
    specs.push_back({queries[i].text, label, derive_seed(seed, kEpisodeTag, i), init});
  }
  auto traces = rollout(env, policy, specs);

  EvalResult res;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    QueryOutcome q;
    q.query = queries[i].text;
    q.label = queries[i].label;
    q.trace = std::move(traces[i]);
    if (q.trace.discarded) {
      ++res.discarded;
      res.outcomes.push_back(std::move(q));
      continue;
    }
    q.predicted = predicted_label(q.trace.final_observation.label_log_probs);
    const auto& w = env.config().weights;
    q.initial_score = compute_score(q.trace.initial_observation.label_log_probs, *q.label, w);
    q.final_score = compute_score(q.trace.final_observation.label_log_probs, *q.label, w);
    ++res.scored;
    correct += q.predicted == *q.label ? 1 : 0;
    res.mean_initial_score += *q.initial_score;
    res.mean_final_score += *q.final_score;
    res.outcomes.push_back(std::move(q));
  }
  if (res.scored > 0) {
    const double inv = 1.0 / static_cast<double>(res.scored);
    res.accuracy = static_cast<double>(correct) * inv;
    res.mean_initial_score *= inv;
    res.mean_final_score *= inv;
  }
  return res;
}

EvalResult evaluate_policy(const Environment& env, const PolicyParams& params,
                           const RunningMoments& moments, std::span<const Exemplar> queries,
                           const PromptState& init, std::uint64_t seed, bool greedy) {
  RunningMoments frozen = moments;
  NetworkPolicy policy(params, frozen, greedy, /*update_moments=*/false);
  return evaluate_queries(env, policy, queries, init, seed);
}

std::uint64_t policy_init_seed(std::uint64_t run_seed) { return derive_seed(run_seed, kInitTag); }

TrainResult train(const Environment& env, std::span<const Exemplar> train_set,
                  std::span<const Exemplar> dev_set, const PromptState& init,
                  const PPOConfig& config, const PolicyConfig& policy_config,
                  const CheckpointMeta& meta, std::uint64_t seed, const TrainHooks& hooks) {
  config.validate();
  if (train_set.empty()) fail(ErrorCode::EmptySplit, "training split is empty");
  PolicyConfig pc = policy_config;
  pc.obs_dim = env.scorer().feature_dim();
  pc.candidate_dim = env.featurizer().dim();
  pc.history_capacity = env.config().horizon;

  PolicyParams params = PolicyParams::initialize(pc, policy_init_seed(seed));
  RunningMoments moments(pc.obs_dim);
  Adam optimizer(params, config.learning_rate, config.adam_beta1, config.adam_beta2,
                 config.adam_eps);
  Rng batch_rng(derive_seed(seed, kBatchTag));
  Rng update_rng(derive_seed(seed, kUpdateTag));
  const std::uint64_t eval_seed = derive_seed(seed, kEvalTag);

  TrainResult res{Checkpoint{meta, params, moments}, 0, 0.0, 0.0, {}, false, {}};
  const bool have_dev = !dev_set.empty();
  if (have_dev) {
    const auto ev = evaluate_policy(env, params, moments, dev_set, init, eval_seed);
    res.best_val_accuracy = ev.accuracy;
    res.best_val_score = ev.mean_final_score;
  }

  RolloutBuffer buffer;
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    std::vector<EpisodeSpec> specs;
    specs.reserve(config.parallel_envs);
    for (std::size_t e = 0; e < config.parallel_envs; ++e) {
      const Exemplar& q = train_set[batch_rng.below(train_set.size())];
      specs.push_back({q.text, q.label, derive_seed(seed, it, e), init});
    }
    NetworkPolicy policy(params, moments, /*greedy=*/false, /*update_moments=*/true);
    const auto traces = rollout(env, policy, specs, hooks.log);

    CurvePoint point;
    point.iteration = it;
    std::size_t used = 0;
    for (const auto& tr : traces) {
      if (tr.discarded) {
        ++point.discarded;
        continue;
      }
      point.mean_score_gain += *tr.final_score - *tr.initial_score;
      buffer.add_episode(tr.transitions, config.gamma, config.gae_lambda);
      ++used;
    }
    if (used == 0) {
      res.aborted = true;
      res.abort_reason = "scorer unavailable for every episode of iteration " + std::to_string(it) +
                         (traces.empty() ? std::string() : ": " + traces.front().error);
      if (!have_dev) res.best = Checkpoint{meta, params, moments};
      break;
    }
    point.mean_score_gain /= static_cast<double>(used);
    point.stats = ppo_update(buffer, params, optimizer, config, update_rng);

    if (!have_dev) {
      res.best = Checkpoint{meta, params, moments};
      res.best_iteration = it;
    } else if (it % config.eval_interval == 0 || it == config.iterations) {
      const auto ev = evaluate_policy(env, params, moments, dev_set, init, eval_seed);
      point.val_accuracy = ev.accuracy;
      point.val_score = ev.mean_final_score;
      if (better(ev.accuracy, ev.mean_final_score, res.best_val_accuracy, res.best_val_score)) {
        res.best = Checkpoint{meta, params, moments};
        res.best_iteration = it;
        res.best_val_accuracy = ev.accuracy;
        res.best_val_score = ev.mean_final_score;
      }
    }
    if (hooks.on_curve) hooks.on_curve(point);
    res.curve.push_back(std::move(point));
  }
  return res;
}

}  // namespace promptedit
