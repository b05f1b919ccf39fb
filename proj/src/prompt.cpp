#include "promptedit/prompt.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "promptedit/error.hpp"

namespace promptedit {
namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Strips closing quotes and brackets so `bad."` still counts as a sentence end.
std::string_view strip_closers(std::string_view word) {
  static constexpr std::string_view kClosers[] = {"\"", "'", ")", "]", "\xE2\x80\x9D",
                                                  "\xE2\x80\x99"};
  bool stripped = true;
  while (stripped && !word.empty()) {
    stripped = false;
    for (auto c : kClosers) {
      if (word.size() > c.size() && word.ends_with(c)) {
        word.remove_suffix(c.size());
        stripped = true;
      }
    }
  }
  return word;
}

bool ends_phrase(std::string_view word) {
  word = strip_closers(word);
  if (word.empty()) return false;
  const char last = word.back();
  return last == ',' || last == ';' || last == '.' || last == '!' || last == '?';
}

bool is_identifier(std::string_view s) {
  if (s.empty()) return false;
  auto head = static_cast<unsigned char>(s.front());
  if (!(std::isalpha(head) || s.front() == '_')) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  });
}

std::string without_spaces(std::string_view s) {
  std::string out;
  for (char c : s)
    if (!is_space(c)) out += c;
  return out;
}

std::size_t count_tokens(std::string_view s) { return whitespace_tokens(s).size(); }

}  // namespace

VerbalizerTemplate::VerbalizerTemplate(std::size_t id, std::string pattern,
                                       std::vector<std::string> label_words)
    : id_(id), pattern_(std::move(pattern)), label_words_(std::move(label_words)) {
  std::size_t answers = 0;
  std::size_t inputs = 0;
  std::size_t pos = 0;
  std::string literal;
  auto flush = [&] {
    if (!literal.empty()) segments_.push_back({SegmentKind::Literal, std::move(literal)});
    literal.clear();
  };
  while (pos < pattern_.size()) {
    const auto open = pattern_.find("{{", pos);
    if (open == std::string::npos) {
      literal += pattern_.substr(pos);
      break;
    }
    literal += pattern_.substr(pos, open - pos);
    const auto close = pattern_.find("}}", open + 2);
    if (close == std::string::npos)
      fail(ErrorCode::InvalidTask, "unterminated placeholder in verbalizer '" + pattern_ + "'");
    const auto body = trim(std::string_view(pattern_).substr(open + 2, close - open - 2));
    if (without_spaces(body) == "answer_choices[label]") {
      flush();
      segments_.push_back({SegmentKind::Answer, {}});
      ++answers;
    } else if (body.size() >= 2 && (body.front() == '"' || body.front() == '\'') &&
               body.back() == body.front()) {
      literal += body.substr(1, body.size() - 2);
    } else if (is_identifier(body)) {
      flush();
      segments_.push_back({SegmentKind::Input, std::string(body)});
      ++inputs;
    } else {
      fail(ErrorCode::InvalidTask, "unsupported placeholder '{{" + std::string(body) + "}}'");
    }
    pos = close + 2;
  }
  flush();
  if (answers != 1)
    fail(ErrorCode::InvalidTask, "verbalizer '" + pattern_ + "' needs exactly one answer slot");
  if (inputs == 0)
    fail(ErrorCode::InvalidTask, "verbalizer '" + pattern_ + "' has no input placeholder");
}

std::string VerbalizerTemplate::format(std::string_view input, std::string_view answer) const {
  std::string out;
  for (const auto& seg : segments_) {
    switch (seg.kind) {
      case SegmentKind::Literal: out += seg.text; break;
      case SegmentKind::Input: out += input; break;
      case SegmentKind::Answer: out += answer; break;
    }
  }
  return std::string(trim(out));
}

LabelId TaskSpec::label_index(std::string_view label) const {
  for (std::size_t i = 0; i < label_space.size(); ++i)
    if (label_space[i] == label) return i;
  fail(ErrorCode::InvalidTask, "label '" + std::string(label) + "' not in task '" + task_name + "'");
}

void TaskSpec::validate() const {
  if (label_space.empty()) fail(ErrorCode::InvalidTask, "task '" + task_name + "' has no labels");
  std::set<std::string> seen(label_space.begin(), label_space.end());
  if (seen.size() != label_space.size())
    fail(ErrorCode::InvalidTask, "task '" + task_name + "' has duplicate labels");
  if (verbalizer_pool.empty())
    fail(ErrorCode::InvalidTask, "task '" + task_name + "' has no verbalizers");
  for (const auto& v : verbalizer_pool) {
    if (v.label_words().size() != label_space.size())
      fail(ErrorCode::InvalidTask, "verbalizer " + std::to_string(v.id()) +
                                       " does not map every label of '" + task_name + "'");
    for (const auto& w : v.label_words())
      if (trim(w).empty()) fail(ErrorCode::InvalidTask, "empty label word");
  }
  if (max_render_length == 0) fail(ErrorCode::InvalidTask, "max_render_length must be positive");
}

void validate_state(const PromptState& state, const TaskSpec& task, std::size_t pool_size,
                    std::size_t horizon) {
  std::set<std::size_t> ids;
  for (auto id : state.exemplar_slots) {
    if (id >= pool_size)
      fail(ErrorCode::InvalidConfig, "exemplar id " + std::to_string(id) + " outside pool");
    if (!ids.insert(id).second)
      fail(ErrorCode::InvalidConfig, "duplicate exemplar id " + std::to_string(id));
  }
  if (state.slot_verbalizers.size() != state.exemplar_slots.size() + 1)
    fail(ErrorCode::InvalidConfig, "need one verbalizer per slot plus one for the query");
  for (auto v : state.slot_verbalizers)
    if (v >= task.num_verbalizers())
      fail(ErrorCode::InvalidConfig, "verbalizer id " + std::to_string(v) + " outside pool");
  if (state.history.size() > horizon)
    fail(ErrorCode::InvalidConfig, "history longer than the horizon");
}

std::vector<std::string_view> whitespace_tokens(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

std::vector<std::string> tokenize_instruction(std::string_view raw) {
  const auto words = whitespace_tokens(raw);
  if (words.empty()) fail(ErrorCode::InvalidInstruction, "instruction is empty");
  std::vector<std::string> phrases;
  std::string current;
  for (auto w : words) {
    if (!current.empty()) current += ' ';
    current += w;
    if (ends_phrase(w)) {
      phrases.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) phrases.push_back(std::move(current));
  return phrases;
}

std::string render_query_block(const PromptState& state, const TaskSpec& task) {
  return task.verbalizer_pool.at(state.query_verbalizer()).format(state.query, task.mask_token);
}

std::string render(const PromptState& state, const TaskSpec& task,
                   std::span<const Exemplar> pool) {
  const std::string query_block = render_query_block(state, task);
  const std::size_t budget = task.max_render_length;
  const std::size_t query_tokens = count_tokens(query_block);
  if (query_tokens > budget)
    fail(ErrorCode::RenderOverflow, "query block needs " + std::to_string(query_tokens) +
                                        " tokens, budget is " + std::to_string(budget));

  std::vector<std::string> exemplar_blocks;
  std::vector<std::size_t> exemplar_tokens;
  for (std::size_t s = 0; s < state.exemplar_slots.size(); ++s) {
    const Exemplar& ex = pool[state.exemplar_slots[s]];
    const auto& verb = task.verbalizer_pool.at(state.slot_verbalizers[s]);
    exemplar_blocks.push_back(verb.format(ex.text, verb.label_words().at(ex.label)));
    exemplar_tokens.push_back(count_tokens(exemplar_blocks.back()));
  }
  std::vector<std::size_t> phrase_tokens;
  for (const auto& p : state.instruction) phrase_tokens.push_back(count_tokens(p));

  std::size_t total = query_tokens;
  for (auto t : exemplar_tokens) total += t;
  for (auto t : phrase_tokens) total += t;

  std::size_t first_exemplar = 0;
  while (total > budget && first_exemplar < exemplar_blocks.size())
    total -= exemplar_tokens[first_exemplar++];
  std::size_t kept_phrases = state.instruction.size();
  while (total > budget && kept_phrases > 0) total -= phrase_tokens[--kept_phrases];

  std::vector<std::string> blocks;
  const std::vector<std::string> phrases(state.instruction.begin(),
                                         state.instruction.begin() + kept_phrases);
  if (auto instr = join(phrases, " "); !trim(instr).empty()) blocks.push_back(std::move(instr));
  for (std::size_t s = first_exemplar; s < exemplar_blocks.size(); ++s)
    if (!exemplar_blocks[s].empty()) blocks.push_back(exemplar_blocks[s]);
  blocks.push_back(query_block);
  return join(blocks, " ");
}

std::vector<TaskSpec> parse_task_seeds(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidTask, std::string("seed file is not valid JSON: ") + e.what());
  }
  std::vector<TaskSpec> tasks;
  try {
    for (const auto& rec : doc.at("tasks")) {
      TaskSpec task;
      task.task_name = rec.at("name").get<std::string>();
      task.label_space = rec.at("labels").get<std::vector<std::string>>();
      task.instruction_pool = rec.value("instructions", std::vector<std::string>{});
      task.max_render_length = rec.value("max_render_length", std::size_t{512});
      task.mask_token = rec.value("mask_token", std::string("<mask>"));
      std::size_t id = 0;
      for (const auto& v : rec.at("verbalizers")) {
        const auto& words = v.at("label_words");
        std::vector<std::string> by_label;
        for (const auto& label : task.label_space) {
          if (!words.contains(label))
            fail(ErrorCode::InvalidTask, "verbalizer " + std::to_string(id) + " of '" +
                                             task.task_name + "' lacks label '" + label + "'");
          by_label.push_back(words.at(label).get<std::string>());
        }
        if (words.size() != task.label_space.size())
          fail(ErrorCode::InvalidTask, "verbalizer maps labels outside the label space");
        task.verbalizer_pool.emplace_back(id++, v.at("pattern").get<std::string>(),
                                          std::move(by_label));
      }
      task.validate();
      tasks.push_back(std::move(task));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidTask, std::string("malformed seed record: ") + e.what());
  }
  return tasks;
}

std::vector<TaskSpec> load_task_seeds(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open seed file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_task_seeds(ss.str());
}

const TaskSpec& find_task(const std::vector<TaskSpec>& tasks, std::string_view name) {
  for (const auto& t : tasks)
    if (t.task_name == name) return t;
  fail(ErrorCode::InvalidTask, "no task named '" + std::string(name) + "' in seed file");
}

}  // namespace promptedit
