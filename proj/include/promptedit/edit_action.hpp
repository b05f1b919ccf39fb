#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>

namespace promptedit {

struct InstrSwap {
  std::size_t i = 0;
  std::size_t j = 0;
  bool operator==(const InstrSwap&) const = default;
};

// Duplicates phrase i directly after itself.
struct InstrAdd {
  std::size_t i = 0;
  bool operator==(const InstrAdd&) const = default;
};

struct InstrDelete {
  std::size_t i = 0;
  bool operator==(const InstrDelete&) const = default;
};

struct ExemplarSwap {
  std::size_t slot = 0;
  std::size_t pool_id = 0;
  bool operator==(const ExemplarSwap&) const = default;
};

// slot == number of exemplar slots addresses the query.
struct VerbalizerChange {
  std::size_t slot = 0;
  std::size_t verbalizer_id = 0;
  bool operator==(const VerbalizerChange&) const = default;
};

using EditAction =
    std::variant<InstrSwap, InstrAdd, InstrDelete, ExemplarSwap, VerbalizerChange>;

enum class ActionFamily : std::uint8_t {
  InstrSwap = 0,
  InstrAdd = 1,
  InstrDelete = 2,
  ExemplarSwap = 3,
  VerbalizerChange = 4,
};

inline constexpr std::size_t kNumActionFamilies = 5;

inline ActionFamily family_of(const EditAction& a) {
  return static_cast<ActionFamily>(a.index());
}

// Flat integer form used in logs and replay files:
//   bits 56..63 family tag, bits 28..55 first index, bits 0..27 second index.
std::uint64_t encode_action(const EditAction& a);
EditAction decode_action(std::uint64_t code);

std::string describe(const EditAction& a);

}  // namespace promptedit
