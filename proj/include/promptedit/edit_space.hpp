#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "promptedit/edit_action.hpp"
#include "promptedit/prompt.hpp"

namespace promptedit {

struct FamilyToggles {
  bool instruction = true;
  bool exemplar = true;
  bool verbalizer = true;

  bool any() const { return instruction || exemplar || verbalizer; }
};

struct ActionCounts {
  std::size_t instruction = 0;
  std::size_t exemplar = 0;
  std::size_t verbalizer = 0;

  std::size_t total() const { return instruction + exemplar + verbalizer; }
  bool operator==(const ActionCounts&) const = default;
};

// Closed-form family sizes for l phrases, n slots, a pool of N exemplars and V
// verbalizers:
//   instruction  l(l-1)/2 + 2l
//   exemplar     nN - n(n-1)/2   (includes one identity swap per slot)
//   verbalizer   (n+1)V
// Throws InvalidConfig when n > N.
ActionCounts count_actions(std::size_t l, std::size_t n, std::size_t N, std::size_t V);

// Valid edits for one state in a fixed order: instruction swaps (i<j, row-major),
// adds, deletes; then exemplar swaps by slot and pool id; then verbalizer changes
// by slot and verbalizer id.
class ActionCatalog {
 public:
  ActionCatalog() = default;

  std::size_t size() const { return actions_.size(); }
  bool empty() const { return actions_.empty(); }
  const EditAction& operator[](std::size_t i) const { return actions_[i]; }
  const std::vector<EditAction>& actions() const { return actions_; }

  std::size_t instruction_begin() const { return 0; }
  std::size_t exemplar_begin() const { return exemplar_begin_; }
  std::size_t verbalizer_begin() const { return verbalizer_begin_; }

  ActionCounts counts() const {
    return {exemplar_begin_, verbalizer_begin_ - exemplar_begin_,
            actions_.size() - verbalizer_begin_};
  }

  std::optional<std::size_t> index_of(const EditAction& action) const;

 private:
  friend ActionCatalog enumerate_actions(const PromptState&, std::size_t, std::size_t,
                                         const FamilyToggles&);
  std::vector<EditAction> actions_;
  std::size_t exemplar_begin_ = 0;
  std::size_t verbalizer_begin_ = 0;
};

ActionCatalog enumerate_actions(const PromptState& state, std::size_t pool_size,
                                std::size_t num_verbalizers, const FamilyToggles& toggles = {});

// True when `action` is listed by enumerate_actions with every family enabled.
bool is_valid_action(const PromptState& state, const EditAction& action, std::size_t pool_size,
                     std::size_t num_verbalizers);

// Returns the edited state with `action` appended to its history. A swap that
// brings in an exemplar already held by another slot exchanges the two slots.
// Throws InvalidAction when the action is not valid for the state.
PromptState apply(const PromptState& state, const EditAction& action, std::size_t pool_size,
                  std::size_t num_verbalizers);

}  // namespace promptedit
