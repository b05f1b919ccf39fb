#include "promptedit/features.hpp"

#include <algorithm>

#include "promptedit/error.hpp"
#include "promptedit/scoring.hpp"

namespace promptedit {
namespace {

// Column layout of a candidate row.
constexpr std::size_t kPosI = 0;
constexpr std::size_t kPosJ = 1;
constexpr std::size_t kPhraseCount = 2;
constexpr std::size_t kSlotPos = 3;
constexpr std::size_t kQuerySlot = 4;
constexpr std::size_t kNoop = 5;
constexpr std::size_t kOutgoing = 6;

}  // namespace

void ActionHistory::push(ActionFamily family, std::span<const double> features) {
  if (size_ >= capacity_) fail(ErrorCode::ShapeError, "action history is full");
  if (features.size() != static_cast<std::size_t>(features_.cols()))
    fail(ErrorCode::ShapeError, "action encoding has the wrong width");
  for (std::size_t c = 0; c < features.size(); ++c)
    features_(static_cast<Eigen::Index>(size_), static_cast<Eigen::Index>(c)) = features[c];
  family_[size_] = static_cast<std::uint8_t>(family);
  ++size_;
}

void CandidateFeaturizer::exemplar_summary(std::span<double> out, const Exemplar& ex,
                                           const std::vector<std::string>& query_tokens) const {
  const auto toks = content_tokens(ex.text);
  double shared = 0.0;
  for (const auto& t : query_tokens)
    if (toks.contains(t)) shared += 1.0;
  out[0] = query_tokens.empty() ? 0.0 : shared / static_cast<double>(query_tokens.size());
  if (ex.label < num_labels_) out[1 + ex.label] = 1.0;
}

Matrix CandidateFeaturizer::build(const PromptState& state, const ActionCatalog& catalog,
                                  std::span<const Exemplar> pool) const {
  const auto qset = content_tokens(state.query);
  const std::vector<std::string> query_tokens(qset.begin(), qset.end());
  const std::size_t l = state.num_phrases();
  const std::size_t n = state.num_slots();
  const double inv_l = l > 0 ? 1.0 / static_cast<double>(l) : 0.0;
  const double inv_n = 1.0 / static_cast<double>(n + 1);
  const std::size_t incoming = kOutgoing + 1 + num_labels_;
  const std::size_t verb = incoming + 1 + num_labels_;

  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(catalog.size()),
                            static_cast<Eigen::Index>(dim()));
  for (std::size_t k = 0; k < catalog.size(); ++k) {
    std::span<double> row(out.row(static_cast<Eigen::Index>(k)).data(), dim());
    row[kPhraseCount] = 1.0 / (1.0 + static_cast<double>(l));
    const EditAction& a = catalog[k];
    if (const auto* x = std::get_if<InstrSwap>(&a)) {
      row[kPosI] = static_cast<double>(x->i + 1) * inv_l;
      row[kPosJ] = static_cast<double>(x->j + 1) * inv_l;
    } else if (const auto* x = std::get_if<InstrAdd>(&a)) {
      row[kPosI] = static_cast<double>(x->i + 1) * inv_l;
    } else if (const auto* x = std::get_if<InstrDelete>(&a)) {
      row[kPosI] = static_cast<double>(x->i + 1) * inv_l;
    } else if (const auto* x = std::get_if<ExemplarSwap>(&a)) {
      row[kSlotPos] = static_cast<double>(x->slot + 1) * inv_n;
      const std::size_t current = state.exemplar_slots[x->slot];
      row[kNoop] = current == x->pool_id ? 1.0 : 0.0;
      exemplar_summary(row.subspan(kOutgoing, 1 + num_labels_), pool[current], query_tokens);
      exemplar_summary(row.subspan(incoming, 1 + num_labels_), pool[x->pool_id], query_tokens);
    } else if (const auto* x = std::get_if<VerbalizerChange>(&a)) {
      row[kSlotPos] = static_cast<double>(x->slot + 1) * inv_n;
      row[kQuerySlot] = x->slot == n ? 1.0 : 0.0;
      row[kNoop] = state.slot_verbalizers[x->slot] == x->verbalizer_id ? 1.0 : 0.0;
      if (x->slot < n)
        exemplar_summary(row.subspan(kOutgoing, 1 + num_labels_), pool[state.exemplar_slots[x->slot]],
                         query_tokens);
      if (x->verbalizer_id < num_verbalizers_) row[verb + x->verbalizer_id] = 1.0;
    }
  }
  return out;
}

}  // namespace promptedit
