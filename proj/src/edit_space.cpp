#include "promptedit/edit_space.hpp"

#include <algorithm>

#include "promptedit/error.hpp"

namespace promptedit {
namespace {

constexpr std::uint64_t kIndexBits = 28;
constexpr std::uint64_t kIndexMask = (std::uint64_t{1} << kIndexBits) - 1;

std::uint64_t pack(ActionFamily f, std::size_t a, std::size_t b) {
  if (a > kIndexMask || b > kIndexMask)
    fail(ErrorCode::InvalidAction, "action index too large to encode");
  return (static_cast<std::uint64_t>(f) << 56) | (static_cast<std::uint64_t>(a) << kIndexBits) |
         static_cast<std::uint64_t>(b);
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

// Slot currently holding pool_id, or n when it is unused.
std::size_t slot_of(const PromptState& state, std::size_t pool_id) {
  const auto it = std::find(state.exemplar_slots.begin(), state.exemplar_slots.end(), pool_id);
  return static_cast<std::size_t>(it - state.exemplar_slots.begin());
}

}  // namespace

std::uint64_t encode_action(const EditAction& a) {
  return std::visit(overloaded{
                        [](const InstrSwap& x) { return pack(ActionFamily::InstrSwap, x.i, x.j); },
                        [](const InstrAdd& x) { return pack(ActionFamily::InstrAdd, x.i, 0); },
                        [](const InstrDelete& x) { return pack(ActionFamily::InstrDelete, x.i, 0); },
                        [](const ExemplarSwap& x) {
                          return pack(ActionFamily::ExemplarSwap, x.slot, x.pool_id);
                        },
                        [](const VerbalizerChange& x) {
                          return pack(ActionFamily::VerbalizerChange, x.slot, x.verbalizer_id);
                        },
                    },
                    a);
}

EditAction decode_action(std::uint64_t code) {
  const auto tag = code >> 56;
  const auto a = static_cast<std::size_t>((code >> kIndexBits) & kIndexMask);
  const auto b = static_cast<std::size_t>(code & kIndexMask);
  switch (tag) {
    case 0: return InstrSwap{a, b};
    case 1: return InstrAdd{a};
    case 2: return InstrDelete{a};
    case 3: return ExemplarSwap{a, b};
    case 4: return VerbalizerChange{a, b};
    default: fail(ErrorCode::InvalidAction, "unknown action family tag " + std::to_string(tag));
  }
}

std::string describe(const EditAction& a) {
  return std::visit(
      overloaded{
          [](const InstrSwap& x) {
            return "instr_swap(" + std::to_string(x.i) + "," + std::to_string(x.j) + ")";
          },
          [](const InstrAdd& x) { return "instr_add(" + std::to_string(x.i) + ")"; },
          [](const InstrDelete& x) { return "instr_delete(" + std::to_string(x.i) + ")"; },
          [](const ExemplarSwap& x) {
            return "exemplar_swap(" + std::to_string(x.slot) + "," + std::to_string(x.pool_id) + ")";
          },
          [](const VerbalizerChange& x) {
            return "verbalizer_change(" + std::to_string(x.slot) + "," +
                   std::to_string(x.verbalizer_id) + ")";
          },
      },
      a);
}

ActionCounts count_actions(std::size_t l, std::size_t n, std::size_t N, std::size_t V) {
  if (n > N)
    fail(ErrorCode::InvalidConfig,
         "more exemplar slots (" + std::to_string(n) + ") than pool entries (" + std::to_string(N) + ")");
  return {l * (l - (l > 0 ? 1 : 0)) / 2 + 2 * l, n * N - n * (n - (n > 0 ? 1 : 0)) / 2,
          (n + 1) * V};
}

std::optional<std::size_t> ActionCatalog::index_of(const EditAction& action) const {
  const auto it = std::find(actions_.begin(), actions_.end(), action);
  if (it == actions_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - actions_.begin());
}

ActionCatalog enumerate_actions(const PromptState& state, std::size_t pool_size,
                                std::size_t num_verbalizers, const FamilyToggles& toggles) {
  const std::size_t l = state.num_phrases();
  const std::size_t n = state.num_slots();
  const auto expected = count_actions(l, n, pool_size, num_verbalizers);

  ActionCatalog cat;
  cat.actions_.reserve(expected.total());
  if (toggles.instruction) {
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = i + 1; j < l; ++j) cat.actions_.push_back(InstrSwap{i, j});
    for (std::size_t i = 0; i < l; ++i) cat.actions_.push_back(InstrAdd{i});
    for (std::size_t i = 0; i < l; ++i) cat.actions_.push_back(InstrDelete{i});
  }
  cat.exemplar_begin_ = cat.actions_.size();
  if (toggles.exemplar) {
    // A pair of occupied slots is listed once, under the lower slot.
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < pool_size; ++p)
        if (slot_of(state, p) >= s) cat.actions_.push_back(ExemplarSwap{s, p});
  }
  cat.verbalizer_begin_ = cat.actions_.size();
  if (toggles.verbalizer) {
    for (std::size_t s = 0; s <= n; ++s)
      for (std::size_t v = 0; v < num_verbalizers; ++v)
        cat.actions_.push_back(VerbalizerChange{s, v});
  }
  return cat;
}

bool is_valid_action(const PromptState& state, const EditAction& action, std::size_t pool_size,
                     std::size_t num_verbalizers) {
  const std::size_t l = state.num_phrases();
  const std::size_t n = state.num_slots();
  return std::visit(overloaded{
                        [&](const InstrSwap& x) { return x.i < x.j && x.j < l; },
                        [&](const InstrAdd& x) { return x.i < l; },
                        [&](const InstrDelete& x) { return x.i < l; },
                        [&](const ExemplarSwap& x) {
                          return x.slot < n && x.pool_id < pool_size &&
                                 slot_of(state, x.pool_id) >= x.slot;
                        },
                        [&](const VerbalizerChange& x) {
                          return x.slot <= n && x.verbalizer_id < num_verbalizers;
                        },
                    },
                    action);
}

PromptState apply(const PromptState& state, const EditAction& action, std::size_t pool_size,
                  std::size_t num_verbalizers) {
  if (!is_valid_action(state, action, pool_size, num_verbalizers))
    fail(ErrorCode::InvalidAction, describe(action) + " is not in the catalog");
  PromptState next = state;
  std::visit(overloaded{
                 [&](const InstrSwap& x) { std::swap(next.instruction[x.i], next.instruction[x.j]); },
                 [&](const InstrAdd& x) {
                   next.instruction.insert(next.instruction.begin() + static_cast<long>(x.i) + 1,
                                           state.instruction[x.i]);
                 },
                 [&](const InstrDelete& x) {
                   next.instruction.erase(next.instruction.begin() + static_cast<long>(x.i));
                 },
                 [&](const ExemplarSwap& x) {
                   const std::size_t other = slot_of(state, x.pool_id);
                   if (other < state.num_slots())
                     std::swap(next.exemplar_slots[x.slot], next.exemplar_slots[other]);
                   else
                     next.exemplar_slots[x.slot] = x.pool_id;
                 },
                 [&](const VerbalizerChange& x) { next.slot_verbalizers[x.slot] = x.verbalizer_id; },
             },
             action);
  next.history.push_back(action);
  return next;
}

}  // namespace promptedit
