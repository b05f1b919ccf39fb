#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "promptedit/episode.hpp"
#include "promptedit/policy.hpp"
#include "promptedit/ppo.hpp"
#include "promptedit/remote_scorer.hpp"

namespace promptedit {

// --- data ----------------------------------------------------------------------

// One JSON object per line with "text" and "label" (a label name or index).
// Record ids are the 0-based line numbers of non-blank lines.
std::vector<Exemplar> parse_dataset_jsonl(std::istream& in, const TaskSpec& task);
std::vector<Exemplar> load_dataset(const std::filesystem::path& path, const TaskSpec& task);

struct FewShotSplits {
  std::vector<Exemplar> train;  // K per class
  std::vector<Exemplar> dev;    // K per class
  std::vector<Exemplar> pool;   // N exemplars, dataset ids kept
};

// Draws, per class, K train, K dev and a share of the pool (N split as evenly
// as possible, earlier classes take the remainder); all three are disjoint.
// Throws InsufficientData listing per-class counts when a class is too small.
FewShotSplits sample_few_shot(std::span<const Exemplar> dataset, std::size_t num_labels,
                              std::size_t k, std::size_t pool_size, std::uint64_t seed);

// Copies with ids renumbered 0..size-1, as the environment expects.
std::vector<Exemplar> as_pool(std::span<const Exemplar> exemplars);

// Records of `dataset` not used by any split.
std::vector<Exemplar> held_out(std::span<const Exemplar> dataset, const FewShotSplits& splits);

// --- synthetic task ------------------------------------------------------------

struct SyntheticTaskOptions {
  std::size_t num_labels = 2;
  std::size_t num_verbalizers = 3;
  std::size_t instruction_phrases = 3;
  std::size_t class_vocab = 6;    // words private to each class
  std::size_t neutral_vocab = 10; // words shared by all classes
  std::size_t class_words_per_text = 3;
  std::size_t neutral_words_per_text = 2;
  std::size_t records_per_class = 64;
  std::size_t test_per_class = 32;
};

struct SyntheticTask {
  TaskSpec task;
  std::vector<Exemplar> dataset;
  std::vector<Exemplar> test;
  std::vector<std::size_t> preferred_verbalizer;  // per class
};

// Texts mix words private to their class with shared neutral words, so which
// exemplars help a query depends on the query. Class c prefers verbalizer
// 1 + c mod (V-1); verbalizer 0, the initial one, is preferred by nobody.
SyntheticTask make_synthetic_task(const SyntheticTaskOptions& options, std::uint64_t seed);

// --- baselines -----------------------------------------------------------------

// Uniform over the current catalog.
class RandomEditPolicy final : public ActionPolicy {
 public:
  std::vector<PolicyDecision> decide(std::span<Episode* const> episodes,
                                     std::span<Rng* const> rngs) override;
};

// One-step lookahead over the whole catalog. With a label it maximises the
// score of the edited prompt; without one it maximises the top-1 margin.
// Ties go to the earliest catalog entry.
class GreedyEditPolicy final : public ActionPolicy {
 public:
  std::vector<PolicyDecision> decide(std::span<Episode* const> episodes,
                                     std::span<Rng* const> rngs) override;
};

enum class BaselineKind { NoEdit, RandomEdit, GreedyEdit };
BaselineKind parse_baseline_kind(std::string_view name);
const char* to_string(BaselineKind kind);

// Scores the initial prompt for every query.
EvalResult evaluate_no_edit(const Environment& env, std::span<const Exemplar> queries,
                            const PromptState& init);

// --- run configuration ---------------------------------------------------------

struct RunConfig {
  std::string task = "synthetic";
  std::uint64_t seed = 0;
  std::size_t k_shots = 16;
  std::size_t n_exemplars = 4;
  std::size_t pool_size = 16;
  std::size_t horizon = 8;
  FamilyToggles families;
  std::string scorer = "synthetic";  // synthetic | remote
  RemoteScorerConfig remote;
  SyntheticScorerParams synthetic;
  SyntheticTaskOptions synthetic_task;
  ScoreWeights weights;
  bool reward_normalization = true;
  double reward_norm_eps = 1e-4;
  PPOConfig ppo;
  PolicyConfig policy;
  bool sample_at_eval = false;  // greedy argmax by default
  std::size_t random_baseline_seeds = 10;
  std::string split = "test";   // evaluation / baseline split: train | dev | test
  std::filesystem::path data;
  std::filesystem::path test_data;
  std::filesystem::path seed_file = "data/tasks.json";

  void validate() const;
};

// JSON document; keys absent from the document keep their defaults and unknown
// keys are rejected with InvalidConfig.
RunConfig parse_run_config(std::string_view json_text);
std::string run_config_to_json(const RunConfig& config);

// --- session -------------------------------------------------------------------

// Everything a command needs: task, splits, pool, scorer, environment and the
// initial prompt p0, all derived deterministically from the run config.
class Session {
 public:
  explicit Session(RunConfig config);

  const RunConfig& config() const { return config_; }
  const TaskSpec& task() const { return env_->task(); }
  const FewShotSplits& splits() const { return splits_; }
  std::span<const Exemplar> test_split() const { return test_; }
  std::span<const Exemplar> split(std::string_view name) const;
  const Environment& environment() const { return *env_; }
  const PromptState& initial_prompt() const { return init_; }
  CheckpointMeta meta() const;

  // Throws ConfigMismatch when the checkpoint was trained for another setup.
  void check_compatible(const Checkpoint& ckpt) const;

  TrainResult train(const TrainHooks& hooks = {}) const;
  EvalResult evaluate(const Checkpoint& ckpt, std::span<const Exemplar> queries) const;
  EvalResult baseline(BaselineKind kind, std::span<const Exemplar> queries,
                      std::uint64_t seed) const;

  // Command entry points. Each appends records to <out_dir>/metrics.jsonl,
  // writes <out_dir>/prompts.jsonl where prompts are produced, and returns a
  // JSON summary.
  std::string run_train(const std::filesystem::path& out_dir) const;
  std::string run_evaluate(const std::filesystem::path& checkpoint,
                           const std::filesystem::path& out_dir) const;
  std::string run_baseline(BaselineKind kind, const std::filesystem::path& out_dir) const;
  // Initial prompt for `query` and, given a checkpoint, the greedily edited one.
  std::string inspect_prompt(const std::string& query,
                             const std::optional<std::filesystem::path>& checkpoint) const;

 private:
  RunConfig config_;
  FewShotSplits splits_;
  std::vector<Exemplar> test_;
  std::unique_ptr<Environment> env_;
  PromptState init_;
};

// One record per query: text, label, prediction, rendered prompt before and
// after editing, the edits taken, and scores.
void write_prompts_jsonl(std::ostream& out, const Environment& env, const EvalResult& result);

}  // namespace promptedit
