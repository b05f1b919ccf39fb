#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "promptedit/edit_space.hpp"
#include "promptedit/prompt.hpp"

namespace promptedit {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Fixed-capacity record of the actions taken so far in an episode.
class ActionHistory {
 public:
  ActionHistory(std::size_t capacity, std::size_t feature_dim)
      : capacity_(capacity), features_(capacity, feature_dim), family_(capacity, 0) {
    features_.setZero();
  }

  void push(ActionFamily family, std::span<const double> features);
  void clear() { size_ = 0; }

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  // Rows [0, size()) are live; later rows are zero padding.
  const Matrix& features() const { return features_; }
  const std::vector<std::uint8_t>& families() const { return family_; }

 private:
  std::size_t capacity_;
  std::size_t size_ = 0;
  Matrix features_;
  std::vector<std::uint8_t> family_;
};

// Everything the policy network consumes for one decision.
struct PolicyInput {
  Vector observation;                     // normalised scorer features
  Matrix candidates;                      // one row per catalog entry
  std::vector<std::uint8_t> candidate_family;
  std::vector<std::uint8_t> valid;        // 0 = masked out
  Matrix history;                         // one row per past action
  std::vector<std::uint8_t> history_family;

  std::size_t num_candidates() const { return static_cast<std::size_t>(candidates.rows()); }
};

// Builds one feature row per candidate edit from the objects the edit touches:
// phrase positions for instruction edits, a summary of the outgoing and incoming
// exemplar (query-token overlap and label one-hot) for exemplar swaps, and the
// target verbalizer one-hot plus slot position for verbalizer changes.
class CandidateFeaturizer {
 public:
  CandidateFeaturizer(std::size_t num_labels, std::size_t num_verbalizers)
      : num_labels_(num_labels), num_verbalizers_(num_verbalizers) {}

  std::size_t dim() const { return 8 + 2 * num_labels_ + num_verbalizers_; }

  Matrix build(const PromptState& state, const ActionCatalog& catalog,
               std::span<const Exemplar> pool) const;

 private:
  void exemplar_summary(std::span<double> out, const Exemplar& ex,
                        const std::vector<std::string>& query_tokens) const;

  std::size_t num_labels_;
  std::size_t num_verbalizers_;
};

}  // namespace promptedit
