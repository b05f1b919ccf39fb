#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "promptedit/episode.hpp"
#include "promptedit/features.hpp"

namespace promptedit {

struct PolicyConfig {
  std::size_t obs_dim = 32;
  std::size_t candidate_dim = 0;
  std::size_t history_capacity = 8;  // horizon T
  std::size_t latent = 48;
  std::size_t heads = 3;
  std::size_t layers = 3;
  std::size_t mlp_ratio = 4;
  double head_init_scale = 1e-3;  // keeps the initial policy close to uniform

  void validate() const;
  bool operator==(const PolicyConfig&) const = default;
};

// Population mean and variance of a vector stream (Welford / Chan merge).
class RunningMoments {
 public:
  RunningMoments() = default;
  explicit RunningMoments(std::size_t dim) : mean_(Vector::Zero(static_cast<Eigen::Index>(dim))),
                                             m2_(Vector::Zero(static_cast<Eigen::Index>(dim))) {}

  void update(std::span<const double> x);
  void merge(const RunningMoments& other);

  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  double count() const { return count_; }
  const Vector& mean() const { return mean_; }
  const Vector& m2() const { return m2_; }
  Vector variance() const;

  // Restores state read from a checkpoint.
  void assign(double count, Vector mean, Vector m2);

  bool operator==(const RunningMoments& o) const {
    return count_ == o.count_ && mean_ == o.mean_ && m2_ == o.m2_;
  }

 private:
  double count_ = 0.0;
  Vector mean_;
  Vector m2_;
};

// (x - mean) / max(std, 1e-8), incorporating x into the moments first when
// `update` is set. Throws ShapeError on a dimension mismatch.
Vector normalize(std::span<const double> x, RunningMoments& moments, bool update);
Vector normalize(std::span<const double> x, const RunningMoments& moments);

// All trainable tensors of the shared attention encoder and the two heads.
// Tensors are addressed by index; names are used for checkpoints and reports.
class PolicyParams {
 public:
  struct LayerIds {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct Ids {
    std::size_t w_obs, b_obs, w_cand, b_cand, family_embed, hist_family_embed, hist_pos_embed;
    std::vector<LayerIds> layers;
    std::size_t lnf_g, lnf_b;
    std::size_t wp1, bp1, wp2, bp2;
    std::size_t wv1, bv1, wv2, bv2;
  };

  // All tensors shaped for `config` and set to zero.
  explicit PolicyParams(PolicyConfig config);
  static PolicyParams initialize(const PolicyConfig& config, std::uint64_t seed);

  const PolicyConfig& config() const { return config_; }
  const Ids& ids() const { return ids_; }

  std::size_t size() const { return tensors_.size(); }
  Matrix& operator[](std::size_t i) { return tensors_[i]; }
  const Matrix& operator[](std::size_t i) const { return tensors_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }

  PolicyParams zeros_like() const { return PolicyParams(config_); }
  void set_zero();
  std::size_t num_scalars() const;
  bool all_finite() const;
  double squared_norm() const;
  void scale(double factor);

  bool operator==(const PolicyParams& o) const {
    return config_ == o.config_ && tensors_ == o.tensors_;
  }

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);

  PolicyConfig config_;
  Ids ids_{};
  std::vector<Matrix> tensors_;
  std::vector<std::string> names_;
};

using PolicyGradients = PolicyParams;

struct ForwardTape;

// Result of one forward pass. Masked candidates get a logit of -infinity.
struct ForwardPass {
  Vector logits;
  double value = 0.0;
  std::shared_ptr<const ForwardTape> tape;
};

// One flat attention over [observation token | history tokens | candidate
// tokens]; candidates carry no positional term, so permuting them permutes
// their logits. Throws NoActions for an empty candidate set and ShapeError
// when the input does not match the configuration.
ForwardPass forward(const PolicyInput& input, const PolicyParams& params);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits) and
// d(loss)/d(value). Throws NoTape when `pass` carries no recorded tape.
void backward(const ForwardPass& pass, std::span<const double> dlogits, double dvalue,
              const PolicyParams& params, PolicyGradients& grads);

// Probabilities over candidates; exactly zero for masked ones.
Vector masked_softmax(const Vector& logits);

// Assembles the network input for the episode's current state.
PolicyInput make_policy_input(const Episode& episode, const RunningMoments& moments);

// Samples (or takes the argmax of) the network's distribution for every live
// episode. With `update_moments` the running observation statistics absorb each
// step's observations, in episode order, before any of them is normalised.
class NetworkPolicy final : public ActionPolicy {
 public:
  NetworkPolicy(const PolicyParams& params, RunningMoments& moments, bool greedy,
                bool update_moments)
      : params_(&params), moments_(&moments), greedy_(greedy), update_moments_(update_moments) {}

  std::vector<PolicyDecision> decide(std::span<Episode* const> episodes,
                                     std::span<Rng* const> rngs) override;

 private:
  const PolicyParams* params_;
  RunningMoments* moments_;
  bool greedy_;
  bool update_moments_;
};

// Identifies what a checkpoint was trained for; loading into a different
// setup is refused.
struct CheckpointMeta {
  std::string task_name;
  std::size_t num_labels = 0;
  std::size_t num_slots = 0;
  std::size_t pool_size = 0;
  std::size_t num_verbalizers = 0;
  std::size_t horizon = 0;

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  CheckpointMeta meta;
  PolicyParams params;
  RunningMoments moments;
};

// Versioned binary: magic, version, JSON header (meta + policy config), then
// shape-tagged float64 tensors and the moment state, all little-endian.
void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace promptedit
