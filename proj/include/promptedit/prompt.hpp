#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "promptedit/edit_action.hpp"

namespace promptedit {

using LabelId = std::size_t;

// A verbalizer pattern uses double-brace placeholders:
//   {{ answer_choices[label] }}  the answer slot (exactly one)
//   {{ "literal" }}              quoted literal, emitted without the quotes
//   {{ name }}                   any other identifier is filled with the input text
class VerbalizerTemplate {
 public:
  enum class SegmentKind { Literal, Input, Answer };
  struct Segment {
    SegmentKind kind;
    std::string text;
  };

  // label_words is indexed by label id. Throws InvalidTask on a malformed pattern.
  VerbalizerTemplate(std::size_t id, std::string pattern, std::vector<std::string> label_words);

  std::size_t id() const { return id_; }
  const std::string& pattern() const { return pattern_; }
  const std::vector<std::string>& label_words() const { return label_words_; }
  const std::vector<Segment>& segments() const { return segments_; }

  // Fills every input placeholder with `input` and the answer slot with `answer`.
  std::string format(std::string_view input, std::string_view answer) const;

 private:
  std::size_t id_;
  std::string pattern_;
  std::vector<std::string> label_words_;
  std::vector<Segment> segments_;
};

struct TaskSpec {
  std::string task_name;
  std::vector<std::string> label_space;
  std::vector<VerbalizerTemplate> verbalizer_pool;
  std::vector<std::string> instruction_pool;
  std::size_t max_render_length = 512;
  std::string mask_token = "<mask>";

  std::size_t num_labels() const { return label_space.size(); }
  std::size_t num_verbalizers() const { return verbalizer_pool.size(); }
  // Throws InvalidTask when a label is unknown.
  LabelId label_index(std::string_view label) const;
  void validate() const;
};

struct Exemplar {
  std::size_t id = 0;
  std::string text;
  LabelId label = 0;
};

struct PromptState {
  std::vector<std::string> instruction;
  std::vector<std::size_t> exemplar_slots;
  // One entry per exemplar slot followed by the query's verbalizer.
  std::vector<std::size_t> slot_verbalizers;
  std::string query;
  std::vector<EditAction> history;

  std::size_t num_phrases() const { return instruction.size(); }
  std::size_t num_slots() const { return exemplar_slots.size(); }
  std::size_t query_verbalizer() const { return slot_verbalizers.back(); }

  bool operator==(const PromptState&) const = default;
};

// Throws InvalidConfig when any PromptState invariant is broken.
void validate_state(const PromptState& state, const TaskSpec& task, std::size_t pool_size,
                    std::size_t horizon);

// Splits an instruction after commas, semicolons and sentence ends that are
// followed by whitespace. Throws InvalidInstruction on blank input.
std::vector<std::string> tokenize_instruction(std::string_view raw);

// Whitespace tokens, the unit used for the render budget.
std::vector<std::string_view> whitespace_tokens(std::string_view text);

// Instruction, then exemplars, then the query block with the answer slot set to
// the task's mask token. When the budget is exceeded whole exemplars are dropped
// from slot 0 onward, then instruction phrases from the end; the query block is
// never cut. Throws RenderOverflow if the query block alone is over budget.
std::string render(const PromptState& state, const TaskSpec& task,
                   std::span<const Exemplar> pool);

// Query block alone, e.g. for scorers that need the answer position.
std::string render_query_block(const PromptState& state, const TaskSpec& task);

// Seed file: {"tasks": [{"name", "labels", "instructions", "verbalizers":
// [{"pattern", "label_words": {label: word}}], "max_render_length"?, "mask_token"?}]}
std::vector<TaskSpec> parse_task_seeds(std::string_view json_text);
std::vector<TaskSpec> load_task_seeds(const std::filesystem::path& path);
const TaskSpec& find_task(const std::vector<TaskSpec>& tasks, std::string_view name);

}  // namespace promptedit
