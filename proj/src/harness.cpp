#include "promptedit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "promptedit/error.hpp"

namespace promptedit {
namespace {

using nlohmann::json;

constexpr std::uint64_t kDataTag = 0x64617461;
constexpr std::uint64_t kSplitTag = 0x73706c6974;
constexpr std::uint64_t kPromptTag = 0x70726f6d7074;
constexpr std::uint64_t kTrainTag = 0x747261696e;
constexpr std::uint64_t kEvalTag = 0x6576616c;
constexpr std::uint64_t kBaselineTag = 0x62617365;

bool is_scorer_failure(const Error& e) {
  return e.code() == ErrorCode::ScorerUnavailable || e.code() == ErrorCode::ProtocolError ||
         e.code() == ErrorCode::RenderOverflow;
}

}  // namespace

// --- data ----------------------------------------------------------------------

std::vector<Exemplar> parse_dataset_jsonl(std::istream& in, const TaskSpec& task) {
  std::vector<Exemplar> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec = json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (rec.is_discarded() || !rec.is_object())
      fail(ErrorCode::InvalidTask, "dataset line " + std::to_string(lineno) + " is not a JSON object");
    const auto text = rec.find("text");
    const auto label = rec.find("label");
    if (text == rec.end() || !text->is_string() || label == rec.end())
      fail(ErrorCode::InvalidTask, "dataset line " + std::to_string(lineno) + " needs text and label");
    Exemplar ex;
    ex.id = out.size();
    ex.text = text->get<std::string>();
    if (label->is_string()) {
      ex.label = task.label_index(label->get<std::string>());
    } else if (label->is_number_unsigned()) {
      ex.label = label->get<std::size_t>();
      if (ex.label >= task.num_labels())
        fail(ErrorCode::InvalidTask, "dataset line " + std::to_string(lineno) + ": label index out of range");
    } else {
      fail(ErrorCode::InvalidTask, "dataset line " + std::to_string(lineno) + ": bad label");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Exemplar> load_dataset(const std::filesystem::path& path, const TaskSpec& task) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open dataset " + path.string());
  return parse_dataset_jsonl(in, task);
}

FewShotSplits sample_few_shot(std::span<const Exemplar> dataset, std::size_t num_labels,
                              std::size_t k, std::size_t pool_size, std::uint64_t seed) {
  if (num_labels == 0) fail(ErrorCode::InvalidTask, "task has no labels");
  std::vector<std::vector<std::size_t>> by_class(num_labels);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].label >= num_labels) fail(ErrorCode::InvalidTask, "record with unknown label");
    by_class[dataset[i].label].push_back(i);
  }
  std::vector<std::size_t> pool_share(num_labels, pool_size / num_labels);
  for (std::size_t c = 0; c < pool_size % num_labels; ++c) ++pool_share[c];

  bool enough = true;
  std::ostringstream counts;
  for (std::size_t c = 0; c < num_labels; ++c) {
    const std::size_t need = 2 * k + pool_share[c];
    if (by_class[c].size() < need) enough = false;
    counts << (c ? ", " : "") << "class " << c << ": " << by_class[c].size() << "/" << need;
  }
  if (!enough) fail(ErrorCode::InsufficientData, "not enough records per class (have/need) " + counts.str());

  Rng rng(seed);
  FewShotSplits out;
  for (std::size_t c = 0; c < num_labels; ++c) {
    const auto picks = rng.sample_without_replacement(by_class[c].size(), 2 * k + pool_share[c]);
    for (std::size_t j = 0; j < picks.size(); ++j) {
      const Exemplar& ex = dataset[by_class[c][picks[j]]];
      if (j < k) out.train.push_back(ex);
      else if (j < 2 * k) out.dev.push_back(ex);
      else out.pool.push_back(ex);
    }
  }
  rng.shuffle(out.train);
  rng.shuffle(out.dev);
  rng.shuffle(out.pool);
  return out;
}

std::vector<Exemplar> as_pool(std::span<const Exemplar> exemplars) {
  std::vector<Exemplar> out(exemplars.begin(), exemplars.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i].id = i;
  return out;
}

std::vector<Exemplar> held_out(std::span<const Exemplar> dataset, const FewShotSplits& splits) {
  std::set<std::size_t> used;
  for (const auto* part : {&splits.train, &splits.dev, &splits.pool})
    for (const auto& ex : *part) used.insert(ex.id);
  std::vector<Exemplar> out;
  for (const auto& ex : dataset)
    if (!used.contains(ex.id)) out.push_back(ex);
  return out;
}

// --- synthetic task ------------------------------------------------------------

SyntheticTask make_synthetic_task(const SyntheticTaskOptions& o, std::uint64_t seed) {
  if (o.num_labels < 2) fail(ErrorCode::InvalidConfig, "synthetic task needs two or more classes");
  if (o.num_verbalizers < 2) fail(ErrorCode::InvalidConfig, "synthetic task needs two or more verbalizers");
  if (o.instruction_phrases == 0) fail(ErrorCode::InvalidConfig, "synthetic instruction needs a phrase");
  if (o.class_words_per_text > o.class_vocab || o.neutral_words_per_text > o.neutral_vocab)
    fail(ErrorCode::InvalidConfig, "synthetic texts draw more words than the vocabulary holds");

  SyntheticTask st;
  TaskSpec& task = st.task;
  task.task_name = "synthetic";
  for (std::size_t c = 0; c < o.num_labels; ++c) task.label_space.push_back("class" + std::to_string(c));

  static const char* const kPhrases[] = {"Read the input carefully,", "pick the matching category,",
                                         "then answer with one word."};
  std::string instruction;
  for (std::size_t p = 0; p < o.instruction_phrases; ++p) {
    if (p) instruction += ' ';
    instruction += p < 3 ? kPhrases[p] : "consider clue " + std::to_string(p) + ",";
  }
  task.instruction_pool.push_back(instruction);

  static const char* const kPatterns[] = {"Input: {{text}} Label: {{answer_choices[label]}}.",
                                          "{{text}} Category: {{answer_choices[label]}}.",
                                          "Text: {{text}} Answer: {{answer_choices[label]}}."};
  for (std::size_t v = 0; v < o.num_verbalizers; ++v) {
    std::vector<std::string> words;
    for (std::size_t c = 0; c < o.num_labels; ++c)
      words.push_back("tag" + std::to_string(c) + "v" + std::to_string(v));
    task.verbalizer_pool.emplace_back(v, kPatterns[v % 3], std::move(words));
  }
  task.validate();
  for (std::size_t c = 0; c < o.num_labels; ++c)
    st.preferred_verbalizer.push_back(1 + c % (o.num_verbalizers - 1));

  Rng rng(seed);
  auto make_text = [&](std::size_t c) {
    std::vector<std::string> words;
    for (auto j : rng.sample_without_replacement(o.class_vocab, o.class_words_per_text))
      words.push_back("k" + std::to_string(c) + "w" + std::to_string(j));
    for (auto j : rng.sample_without_replacement(o.neutral_vocab, o.neutral_words_per_text))
      words.push_back("n" + std::to_string(j));
    rng.shuffle(words);
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    return text;
  };
  auto generate = [&](std::size_t per_class, std::vector<Exemplar>& out) {
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < o.num_labels; ++c) out.push_back({out.size(), make_text(c), c});
  };
  generate(o.records_per_class, st.dataset);
  generate(o.test_per_class, st.test);
  return st;
}

// --- baselines -----------------------------------------------------------------

std::vector<PolicyDecision> RandomEditPolicy::decide(std::span<Episode* const> episodes,
                                                     std::span<Rng* const> rngs) {
  std::vector<PolicyDecision> out(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const std::size_t k = episodes[i]->catalog().size();
    if (k == 0) fail(ErrorCode::NoActions, "empty catalog");
    out[i].action_index = static_cast<std::size_t>(rngs[i]->below(k));
    out[i].log_prob = -std::log(static_cast<double>(k));
  }
  return out;
}

std::vector<PolicyDecision> GreedyEditPolicy::decide(std::span<Episode* const> episodes,
                                                     std::span<Rng* const> /*rngs*/) {
  std::vector<PolicyDecision> out(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Episode& ep = *episodes[i];
    const Environment& env = ep.environment();
    const auto& catalog = ep.catalog();
    if (catalog.size() == 0) fail(ErrorCode::NoActions, "empty catalog");
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < catalog.size(); ++a) {
      const PromptState next =
          apply(ep.state(), catalog[a], env.pool().size(), env.task().num_verbalizers());
      const ScorerObservation obs = env.observe(next);
      const double value = ep.label() ? compute_score(obs, *ep.label(), env.config().weights)
                                      : top1_margin(obs.label_log_probs);
      if (value > best) {
        best = value;
        out[i].action_index = a;
      }
    }
  }
  return out;
}

BaselineKind parse_baseline_kind(std::string_view name) {
  if (name == "no-edit") return BaselineKind::NoEdit;
  if (name == "random-edit") return BaselineKind::RandomEdit;
  if (name == "greedy-edit") return BaselineKind::GreedyEdit;
  fail(ErrorCode::InvalidConfig, "unknown baseline '" + std::string(name) +
                                     "' (expected no-edit, random-edit or greedy-edit)");
}

const char* to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::NoEdit: return "no-edit";
    case BaselineKind::RandomEdit: return "random-edit";
    case BaselineKind::GreedyEdit: return "greedy-edit";
  }
  return "?";
}

EvalResult evaluate_no_edit(const Environment& env, std::span<const Exemplar> queries,
                            const PromptState& init) {
  if (queries.empty()) fail(ErrorCode::EmptySplit, "evaluation split is empty");
  EvalResult res;
  std::size_t correct = 0;
  for (const auto& q : queries) {
    QueryOutcome out;
    out.query = q.text;
    out.label = q.label;
    PromptState state = init;
    state.query = q.text;
    state.history.clear();
    out.trace.states.push_back(state);
    try {
      out.trace.initial_observation = env.observe(state);
    } catch (const Error& e) {
      if (!is_scorer_failure(e)) throw;
      out.trace.discarded = true;
      out.trace.error = e.what();
      ++res.discarded;
      res.outcomes.push_back(std::move(out));
      continue;
    }
    out.trace.final_observation = out.trace.initial_observation;
    out.predicted = predicted_label(out.trace.final_observation.label_log_probs);
    out.initial_score = compute_score(out.trace.initial_observation, q.label, env.config().weights);
    out.final_score = out.initial_score;
    ++res.scored;
    correct += out.predicted == q.label ? 1 : 0;
    res.mean_initial_score += *out.initial_score;
    res.mean_final_score += *out.final_score;
    res.outcomes.push_back(std::move(out));
  }
  if (res.scored > 0) {
    const double inv = 1.0 / static_cast<double>(res.scored);
    res.accuracy = static_cast<double>(correct) * inv;
    res.mean_initial_score *= inv;
    res.mean_final_score *= inv;
  }
  return res;
}

// --- run configuration ---------------------------------------------------------

namespace {

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) fail(ErrorCode::InvalidConfig, where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) fail(ErrorCode::InvalidConfig, "unknown config key '" + where + key + "'");
  }
}

template <typename T>
void take(const json& obj, const char* key, T& field) {
  if (const auto it = obj.find(key); it != obj.end()) field = it->get<T>();
}

void take_path(const json& obj, const char* key, std::filesystem::path& field) {
  if (const auto it = obj.find(key); it != obj.end()) field = it->get<std::string>();
}

}  // namespace

void RunConfig::validate() const {
  if (!families.any()) fail(ErrorCode::InvalidConfig, "at least one edit family must be enabled");
  if (scorer != "synthetic" && scorer != "remote")
    fail(ErrorCode::InvalidConfig, "scorer must be 'synthetic' or 'remote', got '" + scorer + "'");
  if (k_shots == 0) fail(ErrorCode::InvalidConfig, "k_shots must be positive");
  if (horizon == 0) fail(ErrorCode::InvalidConfig, "horizon must be at least 1");
  if (n_exemplars > pool_size)
    fail(ErrorCode::InvalidConfig, "n_exemplars exceeds pool_size");
  if (split != "train" && split != "dev" && split != "test")
    fail(ErrorCode::InvalidConfig, "split must be train, dev or test");
  if (policy.heads == 0 || policy.latent == 0 || policy.latent % policy.heads != 0)
    fail(ErrorCode::InvalidConfig, "policy latent must be a positive multiple of heads");
  if (random_baseline_seeds == 0) fail(ErrorCode::InvalidConfig, "random_baseline_seeds must be positive");
  ppo.validate();
  weights.validate();
}

RunConfig parse_run_config(std::string_view json_text) {
  json doc = json::parse(json_text.begin(), json_text.end(), nullptr, false);
  if (doc.is_discarded()) fail(ErrorCode::InvalidConfig, "config is not valid JSON");
  RunConfig c;
  try {
    check_keys(doc,
               {"task", "seed", "k_shots", "n_exemplars", "pool_size", "horizon", "families",
                "scorer", "remote", "synthetic", "synthetic_task", "weights",
                "reward_normalization", "reward_norm_eps", "ppo", "policy", "sample_at_eval",
                "random_baseline_seeds", "split", "data", "test_data", "seed_file"},
               "");
    take(doc, "task", c.task);
    take(doc, "seed", c.seed);
    take(doc, "k_shots", c.k_shots);
    take(doc, "n_exemplars", c.n_exemplars);
    take(doc, "pool_size", c.pool_size);
    take(doc, "horizon", c.horizon);
    take(doc, "scorer", c.scorer);
    take(doc, "reward_normalization", c.reward_normalization);
    take(doc, "reward_norm_eps", c.reward_norm_eps);
    take(doc, "sample_at_eval", c.sample_at_eval);
    take(doc, "random_baseline_seeds", c.random_baseline_seeds);
    take(doc, "split", c.split);
    take_path(doc, "data", c.data);
    take_path(doc, "test_data", c.test_data);
    take_path(doc, "seed_file", c.seed_file);
    if (const auto it = doc.find("families"); it != doc.end()) {
      check_keys(*it, {"instruction", "exemplar", "verbalizer"}, "families.");
      take(*it, "instruction", c.families.instruction);
      take(*it, "exemplar", c.families.exemplar);
      take(*it, "verbalizer", c.families.verbalizer);
    }
    if (const auto it = doc.find("remote"); it != doc.end()) {
      check_keys(*it, {"endpoint", "timeout_ms", "retries", "want_features", "feature_dim"}, "remote.");
      take(*it, "endpoint", c.remote.endpoint);
      take(*it, "timeout_ms", c.remote.timeout_ms);
      take(*it, "retries", c.remote.retries);
      take(*it, "want_features", c.remote.want_features);
      take(*it, "feature_dim", c.remote.feature_dim);
    }
    if (const auto it = doc.find("synthetic"); it != doc.end()) {
      check_keys(*it, {"alpha", "beta", "gamma", "preferred_verbalizer", "feature_dim"}, "synthetic.");
      take(*it, "alpha", c.synthetic.alpha);
      take(*it, "beta", c.synthetic.beta);
      take(*it, "gamma", c.synthetic.gamma);
      take(*it, "preferred_verbalizer", c.synthetic.preferred_verbalizer);
      take(*it, "feature_dim", c.synthetic.feature_dim);
    }
    if (const auto it = doc.find("synthetic_task"); it != doc.end()) {
      auto& o = c.synthetic_task;
      check_keys(*it, {"num_labels", "num_verbalizers", "instruction_phrases", "class_vocab",
                       "neutral_vocab", "class_words_per_text", "neutral_words_per_text",
                       "records_per_class", "test_per_class"},
                 "synthetic_task.");
      take(*it, "num_labels", o.num_labels);
      take(*it, "num_verbalizers", o.num_verbalizers);
      take(*it, "instruction_phrases", o.instruction_phrases);
      take(*it, "class_vocab", o.class_vocab);
      take(*it, "neutral_vocab", o.neutral_vocab);
      take(*it, "class_words_per_text", o.class_words_per_text);
      take(*it, "neutral_words_per_text", o.neutral_words_per_text);
      take(*it, "records_per_class", o.records_per_class);
      take(*it, "test_per_class", o.test_per_class);
    }
    if (const auto it = doc.find("weights"); it != doc.end()) {
      check_keys(*it, {"lambda1", "lambda2"}, "weights.");
      take(*it, "lambda1", c.weights.lambda1);
      take(*it, "lambda2", c.weights.lambda2);
    }
    if (const auto it = doc.find("ppo"); it != doc.end()) {
      auto& p = c.ppo;
      check_keys(*it, {"learning_rate", "entropy_coef", "value_coef", "minibatch_size", "gamma",
                       "gae_lambda", "clip_epsilon", "epochs_per_update", "max_grad_norm",
                       "iterations", "parallel_envs", "eval_interval", "adam_beta1", "adam_beta2",
                       "adam_eps"},
                 "ppo.");
      take(*it, "learning_rate", p.learning_rate);
      take(*it, "entropy_coef", p.entropy_coef);
      take(*it, "value_coef", p.value_coef);
      take(*it, "minibatch_size", p.minibatch_size);
      take(*it, "gamma", p.gamma);
      take(*it, "gae_lambda", p.gae_lambda);
      take(*it, "clip_epsilon", p.clip_epsilon);
      take(*it, "epochs_per_update", p.epochs_per_update);
      take(*it, "max_grad_norm", p.max_grad_norm);
      take(*it, "iterations", p.iterations);
      take(*it, "parallel_envs", p.parallel_envs);
      take(*it, "eval_interval", p.eval_interval);
      take(*it, "adam_beta1", p.adam_beta1);
      take(*it, "adam_beta2", p.adam_beta2);
      take(*it, "adam_eps", p.adam_eps);
    }
    if (const auto it = doc.find("policy"); it != doc.end()) {
      check_keys(*it, {"latent", "heads", "layers", "mlp_ratio", "head_init_scale"}, "policy.");
      take(*it, "latent", c.policy.latent);
      take(*it, "heads", c.policy.heads);
      take(*it, "layers", c.policy.layers);
      take(*it, "mlp_ratio", c.policy.mlp_ratio);
      take(*it, "head_init_scale", c.policy.head_init_scale);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

std::string run_config_to_json(const RunConfig& c) {
  const auto& o = c.synthetic_task;
  const auto& p = c.ppo;
  json doc = {
      {"task", c.task},
      {"seed", c.seed},
      {"k_shots", c.k_shots},
      {"n_exemplars", c.n_exemplars},
      {"pool_size", c.pool_size},
      {"horizon", c.horizon},
      {"families", {{"instruction", c.families.instruction}, {"exemplar", c.families.exemplar},
                    {"verbalizer", c.families.verbalizer}}},
      {"scorer", c.scorer},
      {"remote", {{"endpoint", c.remote.endpoint}, {"timeout_ms", c.remote.timeout_ms},
                  {"retries", c.remote.retries}, {"want_features", c.remote.want_features},
                  {"feature_dim", c.remote.feature_dim}}},
      {"synthetic", {{"alpha", c.synthetic.alpha}, {"beta", c.synthetic.beta},
                     {"gamma", c.synthetic.gamma},
                     {"preferred_verbalizer", c.synthetic.preferred_verbalizer},
                     {"feature_dim", c.synthetic.feature_dim}}},
      {"synthetic_task", {{"num_labels", o.num_labels}, {"num_verbalizers", o.num_verbalizers},
                          {"instruction_phrases", o.instruction_phrases},
                          {"class_vocab", o.class_vocab}, {"neutral_vocab", o.neutral_vocab},
                          {"class_words_per_text", o.class_words_per_text},
                          {"neutral_words_per_text", o.neutral_words_per_text},
                          {"records_per_class", o.records_per_class},
                          {"test_per_class", o.test_per_class}}},
      {"weights", {{"lambda1", c.weights.lambda1}, {"lambda2", c.weights.lambda2}}},
      {"reward_normalization", c.reward_normalization},
      {"reward_norm_eps", c.reward_norm_eps},
      {"ppo", {{"learning_rate", p.learning_rate}, {"entropy_coef", p.entropy_coef},
               {"value_coef", p.value_coef}, {"minibatch_size", p.minibatch_size},
               {"gamma", p.gamma}, {"gae_lambda", p.gae_lambda},
               {"clip_epsilon", p.clip_epsilon}, {"epochs_per_update", p.epochs_per_update},
               {"max_grad_norm", p.max_grad_norm}, {"iterations", p.iterations},
               {"parallel_envs", p.parallel_envs}, {"eval_interval", p.eval_interval},
               {"adam_beta1", p.adam_beta1}, {"adam_beta2", p.adam_beta2},
               {"adam_eps", p.adam_eps}}},
      {"policy", {{"latent", c.policy.latent}, {"heads", c.policy.heads},
                  {"layers", c.policy.layers}, {"mlp_ratio", c.policy.mlp_ratio},
                  {"head_init_scale", c.policy.head_init_scale}}},
      {"sample_at_eval", c.sample_at_eval},
      {"random_baseline_seeds", c.random_baseline_seeds},
      {"split", c.split},
      {"data", c.data.string()},
      {"test_data", c.test_data.string()},
      {"seed_file", c.seed_file.string()},
  };
  return doc.dump(2);
}

// --- session -------------------------------------------------------------------

Session::Session(RunConfig config) : config_(std::move(config)) {
  config_.validate();
  TaskSpec task;
  std::vector<Exemplar> dataset;
  if (config_.task == "synthetic") {
    SyntheticTask st = make_synthetic_task(config_.synthetic_task, derive_seed(config_.seed, kDataTag));
    task = std::move(st.task);
    dataset = std::move(st.dataset);
    test_ = std::move(st.test);
    if (config_.synthetic.preferred_verbalizer.empty())
      config_.synthetic.preferred_verbalizer = st.preferred_verbalizer;
  } else {
    task = find_task(load_task_seeds(config_.seed_file), config_.task);
    if (config_.data.empty())
      fail(ErrorCode::InvalidConfig, "task '" + config_.task + "' needs a dataset file (data)");
    dataset = load_dataset(config_.data, task);
  }
  splits_ = sample_few_shot(dataset, task.num_labels(), config_.k_shots, config_.pool_size,
                            derive_seed(config_.seed, kSplitTag));
  if (!config_.test_data.empty()) test_ = load_dataset(config_.test_data, task);
  else if (config_.task != "synthetic") test_ = held_out(dataset, splits_);

  std::shared_ptr<const Scorer> scorer;
  if (config_.scorer == "remote") scorer = std::make_shared<RemoteScorer>(config_.remote);
  else scorer = std::make_shared<SyntheticScorer>(config_.synthetic);

  EnvConfig env_cfg;
  env_cfg.horizon = config_.horizon;
  env_cfg.num_slots = config_.n_exemplars;
  env_cfg.pool_size = config_.pool_size;
  env_cfg.weights = config_.weights;
  env_cfg.reward_normalization = config_.reward_normalization;
  env_cfg.reward_norm_eps = config_.reward_norm_eps;
  env_cfg.families = config_.families;
  env_ = std::make_unique<Environment>(std::move(task), as_pool(splits_.pool), std::move(scorer), env_cfg);
  init_ = env_->initial_state("", derive_seed(config_.seed, kPromptTag));
}

std::span<const Exemplar> Session::split(std::string_view name) const {
  if (name == "train") return splits_.train;
  if (name == "dev") return splits_.dev;
  if (name == "test") return test_;
  fail(ErrorCode::InvalidConfig, "unknown split '" + std::string(name) + "'");
}

CheckpointMeta Session::meta() const {
  return CheckpointMeta{task().task_name, task().num_labels(), config_.n_exemplars,
                        config_.pool_size, task().num_verbalizers(), config_.horizon};
}

void Session::check_compatible(const Checkpoint& ckpt) const {
  const CheckpointMeta want = meta();
  const CheckpointMeta& got = ckpt.meta;
  std::ostringstream diff;
  auto cmp = [&](const char* what, auto a, auto b) {
    if (a != b) diff << " " << what << " " << b << " vs " << a << ";";
  };
  cmp("task", want.task_name, got.task_name);
  cmp("labels", want.num_labels, got.num_labels);
  cmp("n", want.num_slots, got.num_slots);
  cmp("N", want.pool_size, got.pool_size);
  cmp("V", want.num_verbalizers, got.num_verbalizers);
  cmp("T", want.horizon, got.horizon);
  const auto& pc = ckpt.params.config();
  cmp("observation width", env_->scorer().feature_dim(), pc.obs_dim);
  cmp("candidate width", env_->featurizer().dim(), pc.candidate_dim);
  if (!diff.str().empty())
    fail(ErrorCode::ConfigMismatch, "checkpoint does not match the run (checkpoint vs run):" + diff.str());
}

TrainResult Session::train(const TrainHooks& hooks) const {
  return promptedit::train(*env_, splits_.train, splits_.dev, init_, config_.ppo, config_.policy,
                           meta(), derive_seed(config_.seed, kTrainTag), hooks);
}

EvalResult Session::evaluate(const Checkpoint& ckpt, std::span<const Exemplar> queries) const {
  check_compatible(ckpt);
  return evaluate_policy(*env_, ckpt.params, ckpt.moments, queries, init_,
                         derive_seed(config_.seed, kEvalTag), !config_.sample_at_eval);
}

EvalResult Session::baseline(BaselineKind kind, std::span<const Exemplar> queries,
                             std::uint64_t seed) const {
  const bool labels_visible = config_.split == "train";
  switch (kind) {
    case BaselineKind::NoEdit:
      return evaluate_no_edit(*env_, queries, init_);
    case BaselineKind::RandomEdit: {
      RandomEditPolicy policy;
      return evaluate_queries(*env_, policy, queries, init_, seed);
    }
    case BaselineKind::GreedyEdit: {
      GreedyEditPolicy policy;
      return evaluate_queries(*env_, policy, queries, init_, seed, labels_visible);
    }
  }
  fail(ErrorCode::InvalidConfig, "unknown baseline");
}

namespace {

std::ofstream open_out(const std::filesystem::path& path, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  return out;
}

json eval_record(const EvalResult& r) {
  return {{"accuracy", r.accuracy},       {"mean_initial_score", r.mean_initial_score},
          {"mean_final_score", r.mean_final_score}, {"scored", r.scored},
          {"discarded", r.discarded}};
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void write_prompts_jsonl(std::ostream& out, const Environment& env, const EvalResult& result) {
  const auto& task = env.task();
  for (const auto& q : result.outcomes) {
    json rec;
    rec["query"] = q.query;
    rec["label"] = q.label ? json(task.label_space[*q.label]) : json(nullptr);
    if (q.trace.discarded) {
      rec["discarded"] = true;
      rec["error"] = q.trace.error;
      out << rec.dump() << '\n';
      continue;
    }
    rec["predicted"] = task.label_space[q.predicted];
    rec["before"] = render(q.trace.initial_state(), task, env.pool());
    rec["after"] = render(q.trace.final_state(), task, env.pool());
    json edits = json::array();
    for (const auto& a : q.trace.final_state().history) edits.push_back(describe(a));
    rec["edits"] = edits;
    rec["initial_score"] = optional_number(q.initial_score);
    rec["final_score"] = optional_number(q.final_score);
    out << rec.dump() << '\n';
  }
}

std::string Session::run_train(const std::filesystem::path& out_dir) const {
  std::filesystem::create_directories(out_dir);
  auto metrics = open_out(out_dir / "metrics.jsonl", true);
  TrainHooks hooks;
  hooks.on_curve = [&](const CurvePoint& p) {
    json rec = {{"command", "train"},
                {"iteration", p.iteration},
                {"mean_score_gain", p.mean_score_gain},
                {"val_accuracy", optional_number(p.val_accuracy)},
                {"val_score", optional_number(p.val_score)},
                {"policy_loss", p.stats.policy_loss},
                {"value_loss", p.stats.value_loss},
                {"entropy", p.stats.entropy},
                {"clip_fraction", p.stats.clip_fraction},
                {"approx_kl", p.stats.approx_kl},
                {"grad_norm", p.stats.grad_norm},
                {"discarded", p.discarded}};
    metrics << rec.dump() << '\n';
    metrics.flush();
  };
  const TrainResult result = train(hooks);
  const auto ckpt_path = out_dir / "checkpoint.bin";
  save_checkpoint(ckpt_path, result.best);
  if (result.aborted) {
    metrics << json{{"command", "train"}, {"event", "aborted"}, {"reason", result.abort_reason}}.dump()
            << '\n';
    fail(ErrorCode::ScorerUnavailable,
         result.abort_reason + "; partial checkpoint saved to " + ckpt_path.string());
  }

  // Final numbers come from the checkpoint on disk, not the live parameters.
  const Checkpoint saved = load_checkpoint(ckpt_path);
  json final_rec = {{"command", "train"},
                    {"event", "final"},
                    {"best_iteration", result.best_iteration},
                    {"best_val_accuracy", result.best_val_accuracy},
                    {"best_val_score", result.best_val_score}};
  const EvalResult dev = evaluate(saved, splits_.dev);
  final_rec["dev"] = eval_record(dev);
  const EvalResult* shown = &dev;
  std::optional<EvalResult> test;
  if (!test_.empty()) {
    test = evaluate(saved, test_);
    final_rec["test"] = eval_record(*test);
    shown = &*test;
  }
  metrics << final_rec.dump() << '\n';
  auto prompts = open_out(out_dir / "prompts.jsonl", false);
  write_prompts_jsonl(prompts, *env_, *shown);

  json summary = final_rec;
  summary["checkpoint"] = ckpt_path.string();
  summary["iterations"] = result.curve.size();
  return summary.dump(2);
}

std::string Session::run_evaluate(const std::filesystem::path& checkpoint,
                                  const std::filesystem::path& out_dir) const {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const EvalResult r = evaluate(ckpt, split(config_.split));
  std::filesystem::create_directories(out_dir);
  json rec = eval_record(r);
  rec["command"] = "evaluate";
  rec["split"] = config_.split;
  open_out(out_dir / "metrics.jsonl", true) << rec.dump() << '\n';
  auto prompts = open_out(out_dir / "prompts.jsonl", false);
  write_prompts_jsonl(prompts, *env_, r);
  return rec.dump(2);
}

std::string Session::run_baseline(BaselineKind kind, const std::filesystem::path& out_dir) const {
  std::filesystem::create_directories(out_dir);
  auto metrics = open_out(out_dir / "metrics.jsonl", true);
  const auto queries = split(config_.split);
  json summary = {{"command", "baseline"}, {"kind", to_string(kind)}, {"split", config_.split}};
  if (kind != BaselineKind::RandomEdit) {
    const EvalResult r = baseline(kind, queries, derive_seed(config_.seed, kBaselineTag));
    summary.update(eval_record(r));
    metrics << summary.dump() << '\n';
    auto prompts = open_out(out_dir / "prompts.jsonl", false);
    write_prompts_jsonl(prompts, *env_, r);
    return summary.dump(2);
  }
  std::vector<double> acc, score;
  for (std::size_t s = 0; s < config_.random_baseline_seeds; ++s) {
    const EvalResult r = baseline(kind, queries, derive_seed(config_.seed, kBaselineTag, s + 1));
    json rec = eval_record(r);
    rec["command"] = "baseline";
    rec["kind"] = to_string(kind);
    rec["split"] = config_.split;
    rec["seed_index"] = s;
    metrics << rec.dump() << '\n';
    acc.push_back(r.accuracy);
    score.push_back(r.mean_final_score);
  }
  auto mean_std = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    return std::pair{m, std::sqrt(var / static_cast<double>(v.size()))};
  };
  const auto [am, as] = mean_std(acc);
  const auto [sm, ss] = mean_std(score);
  summary["seeds"] = acc.size();
  summary["accuracy_mean"] = am;
  summary["accuracy_std"] = as;
  summary["final_score_mean"] = sm;
  summary["final_score_std"] = ss;
  metrics << summary.dump() << '\n';
  return summary.dump(2);
}

std::string Session::inspect_prompt(const std::string& query,
                                    const std::optional<std::filesystem::path>& checkpoint) const {
  PromptState state = init_;
  state.query = query;
  json out;
  out["query"] = query;
  out["initial_prompt"] = render(state, task(), env_->pool());
  const ScorerObservation obs = env_->observe(state);
  out["initial_prediction"] = task().label_space[predicted_label(obs.label_log_probs)];
  if (checkpoint) {
    const Checkpoint ckpt = load_checkpoint(*checkpoint);
    const Exemplar q{0, query, 0};
    EvalResult r = evaluate(ckpt, std::span<const Exemplar>(&q, 1));
    const auto& trace = r.outcomes.front().trace;
    if (trace.discarded) fail(ErrorCode::ScorerUnavailable, trace.error);
    out["edited_prompt"] = render(trace.final_state(), task(), env_->pool());
    json edits = json::array();
    for (const auto& a : trace.final_state().history) edits.push_back(describe(a));
    out["edits"] = edits;
    out["edited_prediction"] = task().label_space[r.outcomes.front().predicted];
  }
  return out.dump(2);
}

}  // namespace promptedit
