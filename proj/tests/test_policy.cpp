#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "promptedit/policy.hpp"
#include "promptedit/rng.hpp"
#include "test_support.hpp"

namespace promptedit {
namespace {

PolicyConfig tiny_config() {
  PolicyConfig c;
  c.obs_dim = 6;
  c.candidate_dim = 5;
  c.history_capacity = 4;
  c.latent = 8;
  c.heads = 2;
  c.layers = 2;
  c.head_init_scale = 0.5;  // large enough that the heads carry signal
  return c;
}

PolicyInput random_input(const PolicyConfig& c, std::size_t K, std::size_t H, Rng& rng) {
  PolicyInput in;
  auto u = [&] { return 2.0 * rng.uniform() - 1.0; };
  in.observation = Vector::NullaryExpr(static_cast<Eigen::Index>(c.obs_dim), u);
  in.candidates = Matrix::NullaryExpr(static_cast<Eigen::Index>(K),
                                      static_cast<Eigen::Index>(c.candidate_dim), u);
  in.history = Matrix::NullaryExpr(static_cast<Eigen::Index>(H),
                                   static_cast<Eigen::Index>(c.candidate_dim), u);
  for (std::size_t k = 0; k < K; ++k) in.candidate_family.push_back(static_cast<std::uint8_t>(rng.below(5)));
  for (std::size_t t = 0; t < H; ++t) in.history_family.push_back(static_cast<std::uint8_t>(rng.below(5)));
  in.valid.assign(K, 1);
  return in;
}

// Loss = sum_k w_k log pi_k over valid k + c * value^2, a smooth scalar that
// touches every path through the network.
struct Probe {
  std::vector<double> w;
  double c;
  double loss(const ForwardPass& p) const {
    const Vector probs = masked_softmax(p.logits);
    double l = c * p.value * p.value;
    for (Eigen::Index k = 0; k < probs.size(); ++k)
      if (probs(k) > 0) l += w[static_cast<std::size_t>(k)] * std::log(probs(k));
    return l;
  }
  void grads(const ForwardPass& p, std::vector<double>& dlogits, double& dvalue) const {
    const Vector probs = masked_softmax(p.logits);
    double wsum = 0;
    for (Eigen::Index k = 0; k < probs.size(); ++k)
      if (probs(k) > 0) wsum += w[static_cast<std::size_t>(k)];
    dlogits.assign(static_cast<std::size_t>(probs.size()), 0.0);
    for (Eigen::Index k = 0; k < probs.size(); ++k)
      if (probs(k) > 0) dlogits[static_cast<std::size_t>(k)] = w[static_cast<std::size_t>(k)] - wsum * probs(k);
    dvalue = 2.0 * c * p.value;
  }
};

double max_relative_error(std::uint64_t seed) {
  const auto cfg = tiny_config();
  Rng rng(seed);
  auto params = PolicyParams::initialize(cfg, seed);
  auto in = random_input(cfg, 5, 3, rng);
  in.valid[2] = 0;
  Probe probe{{}, 0.7};
  for (int k = 0; k < 5; ++k) probe.w.push_back(2.0 * rng.uniform() - 1.0);

  const auto pass = forward(in, params);
  std::vector<double> dl;
  double dv;
  probe.grads(pass, dl, dv);
  auto grads = params.zeros_like();
  backward(pass, dl, dv, params, grads);

  const double h = 1e-4;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Matrix& m = params[t];
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      m.data()[i] = orig + h;
      const double up = probe.loss(forward(in, params));
      m.data()[i] = orig - h;
      const double down = probe.loss(forward(in, params));
      m.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[t].data()[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      const double rel = std::abs(numeric - analytic) / denom;
      EXPECT_LE(rel, 1e-4) << params.name(t) << "[" << i << "] analytic " << analytic
                           << " numeric " << numeric;
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

TEST(Gradients, MatchFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) EXPECT_LE(max_relative_error(seed), 1e-4);
}

TEST(Gradients, ZeroLossGivesZeroGradients) {
  const auto cfg = tiny_config();
  Rng rng(4);
  const auto params = PolicyParams::initialize(cfg, 4);
  const auto in = random_input(cfg, 4, 2, rng);
  const auto pass = forward(in, params);
  auto grads = params.zeros_like();
  backward(pass, std::vector<double>(4, 0.0), 0.0, params, grads);
  EXPECT_EQ(grads.squared_norm(), 0.0);
}

TEST(Gradients, LinearInTheLoss) {
  const auto cfg = tiny_config();
  Rng rng(5);
  const auto params = PolicyParams::initialize(cfg, 5);
  const auto in = random_input(cfg, 4, 2, rng);
  const auto pass = forward(in, params);
  const std::vector<double> d1{0.3, -0.2, 0.5, 0.1}, d2{0.6, -0.4, 1.0, 0.2};
  auto g1 = params.zeros_like(), g2 = params.zeros_like();
  backward(pass, d1, 0.25, params, g1);
  backward(pass, d2, 0.5, params, g2);
  for (std::size_t t = 0; t < params.size(); ++t)
    for (Eigen::Index i = 0; i < g1[t].size(); ++i)
      EXPECT_DOUBLE_EQ(g2[t].data()[i], 2.0 * g1[t].data()[i]) << params.name(t);
}

TEST(Gradients, UnusedParametersGetZero) {
  const auto cfg = tiny_config();
  Rng rng(6);
  const auto params = PolicyParams::initialize(cfg, 6);
  auto in = random_input(cfg, 3, 1, rng);
  in.candidate_family = {3, 3, 3};
  in.history_family = {1};
  const auto pass = forward(in, params);
  auto grads = params.zeros_like();
  backward(pass, std::vector<double>{0.2, -0.1, 0.4}, 1.0, params, grads);
  const auto& ids = params.ids();
  for (Eigen::Index f = 0; f < grads[ids.family_embed].rows(); ++f)
    EXPECT_EQ(grads[ids.family_embed].row(f).squaredNorm() == 0.0, f != 3);
  for (Eigen::Index t = 1; t < grads[ids.hist_pos_embed].rows(); ++t)
    EXPECT_EQ(grads[ids.hist_pos_embed].row(t).squaredNorm(), 0.0);
  EXPECT_GT(grads[ids.hist_pos_embed].row(0).squaredNorm(), 0.0);
}

TEST(Gradients, BackwardNeedsTape) {
  const auto cfg = tiny_config();
  const auto params = PolicyParams::initialize(cfg, 1);
  auto grads = params.zeros_like();
  ForwardPass empty;
  EXPECT_ERROR_CODE(backward(empty, std::vector<double>{}, 0.0, params, grads), ErrorCode::NoTape);
}

TEST(Forward, ShapeChecks) {
  const auto cfg = tiny_config();
  Rng rng(2);
  const auto params = PolicyParams::initialize(cfg, 2);
  auto in = random_input(cfg, 0, 0, rng);
  EXPECT_ERROR_CODE(forward(in, params), ErrorCode::NoActions);
  in = random_input(cfg, 3, 5, rng);
  EXPECT_ERROR_CODE(forward(in, params), ErrorCode::ShapeError);
  in = random_input(cfg, 3, 1, rng);
  in.observation = Vector::Zero(3);
  EXPECT_ERROR_CODE(forward(in, params), ErrorCode::ShapeError);
  in = random_input(cfg, 3, 1, rng);
  in.valid.pop_back();
  EXPECT_ERROR_CODE(forward(in, params), ErrorCode::ShapeError);
}

TEST(Forward, MaskedActionsHaveZeroMassAndAreNeverSampled) {
  const auto cfg = tiny_config();
  Rng rng(9);
  const auto params = PolicyParams::initialize(cfg, 9);
  auto in = random_input(cfg, 6, 2, rng);
  in.valid[1] = 0;
  in.valid[4] = 0;
  const auto pass = forward(in, params);
  EXPECT_EQ(pass.logits(1), -std::numeric_limits<double>::infinity());
  const Vector probs = masked_softmax(pass.logits);
  EXPECT_EQ(probs(1), 0.0);
  EXPECT_EQ(probs(4), 0.0);
  EXPECT_NEAR(probs.sum(), 1.0, 1e-12);
  std::vector<std::size_t> counts(6, 0);
  Rng draw(10);
  for (int i = 0; i < 100000; ++i)
    ++counts[draw.categorical(std::span<const double>(probs.data(), 6))];
  EXPECT_EQ(counts[1], 0u);
  EXPECT_EQ(counts[4], 0u);
  for (std::size_t k : {0u, 2u, 3u, 5u}) EXPECT_GT(counts[k], 0u);
}

TEST(Forward, CandidatePermutationPermutesLogits) {
  const auto cfg = tiny_config();
  Rng rng(12);
  const auto params = PolicyParams::initialize(cfg, 12);
  const auto in = random_input(cfg, 5, 2, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  PolicyInput shuffled = in;
  for (std::size_t k = 0; k < 5; ++k) {
    shuffled.candidates.row(static_cast<Eigen::Index>(k)) = in.candidates.row(static_cast<Eigen::Index>(perm[k]));
    shuffled.candidate_family[k] = in.candidate_family[perm[k]];
  }
  const auto a = forward(in, params);
  const auto b = forward(shuffled, params);
  for (std::size_t k = 0; k < 5; ++k)
    EXPECT_NEAR(b.logits(static_cast<Eigen::Index>(k)), a.logits(static_cast<Eigen::Index>(perm[k])), 1e-12);
  EXPECT_NEAR(a.value, b.value, 1e-12);
}

TEST(Forward, ValueIgnoresMaskedCandidates) {
  const auto cfg = tiny_config();
  Rng rng(13);
  const auto params = PolicyParams::initialize(cfg, 13);
  auto in = random_input(cfg, 6, 1, rng);
  in.valid = {1, 0, 1, 0, 0, 1};
  const double v = forward(in, params).value;
  // Reverse the masked rows among themselves and change their contents.
  PolicyInput other = in;
  other.candidates.row(1) = in.candidates.row(4) * 3.0;
  other.candidates.row(4) = in.candidates.row(1).array() - 1.0;
  other.candidate_family[3] = static_cast<std::uint8_t>((in.candidate_family[3] + 1) % 5);
  EXPECT_NEAR(forward(other, params).value, v, 1e-12);
  // Extra masked candidates change nothing either.
  PolicyInput longer = in;
  longer.candidates.conservativeResize(8, Eigen::NoChange);
  longer.candidates.bottomRows(2).setConstant(5.0);
  longer.candidate_family.insert(longer.candidate_family.end(), {0, 4});
  longer.valid.insert(longer.valid.end(), {0, 0});
  EXPECT_NEAR(forward(longer, params).value, v, 1e-12);
}

TEST(Forward, NearUniformAtInitialisation) {
  PolicyConfig cfg = tiny_config();
  cfg.latent = 48;
  cfg.heads = 3;
  cfg.layers = 3;
  cfg.head_init_scale = PolicyConfig{}.head_init_scale;
  const auto params = PolicyParams::initialize(cfg, 21);
  Rng rng(22);
  auto in = random_input(cfg, 12, 2, rng);
  const Vector probs = masked_softmax(forward(in, params).logits);
  for (Eigen::Index k = 0; k < 12; ++k) EXPECT_NEAR(probs(k), 1.0 / 12, 0.01 / 12);
  // Identical candidates get identical probabilities.
  for (Eigen::Index k = 1; k < 12; ++k) in.candidates.row(k) = in.candidates.row(0);
  in.candidate_family.assign(12, 3);
  const Vector same = masked_softmax(forward(in, params).logits);
  for (Eigen::Index k = 0; k < 12; ++k) EXPECT_NEAR(same(k), 1.0 / 12, 1e-12);
}

TEST(Moments, NormalizeExamples) {
  RunningMoments m(1);
  m.update(std::vector<double>{1.0});
  m.update(std::vector<double>{3.0});
  EXPECT_DOUBLE_EQ(normalize(std::vector<double>{3.0}, m)(0), 1.0);

  RunningMoments cold(3);
  const Vector first = normalize(std::vector<double>{4.0, -2.0, 7.5}, cold, true);
  EXPECT_EQ(first, Vector::Zero(3));

  RunningMoments flat(2);
  for (int i = 0; i < 50; ++i) {
    const Vector z = normalize(std::vector<double>{2.5, -1.0}, flat, true);
    EXPECT_EQ(z, Vector::Zero(2));
  }
  EXPECT_ERROR_CODE(normalize(std::vector<double>{1.0}, flat), ErrorCode::ShapeError);
  EXPECT_ERROR_CODE(flat.update(std::vector<double>{1.0, 2.0, 3.0}), ErrorCode::ShapeError);
}

TEST(Moments, StreamMatchesBatchStatistics) {
  Rng rng(31);
  const std::size_t dim = 7, k = 10000;
  std::vector<std::vector<double>> xs(k, std::vector<double>(dim));
  for (auto& x : xs)
    for (std::size_t j = 0; j < dim; ++j) x[j] = 100.0 * j + (rng.uniform() - 0.5) * (j + 1);
  RunningMoments m(dim);
  for (const auto& x : xs) m.update(x);
  for (std::size_t j = 0; j < dim; ++j) {
    long double mean = 0, var = 0;
    for (const auto& x : xs) mean += x[j];
    mean /= k;
    for (const auto& x : xs) var += (x[j] - mean) * (x[j] - mean);
    var /= k;
    EXPECT_NEAR(m.mean()(static_cast<Eigen::Index>(j)), static_cast<double>(mean), 1e-6);
    EXPECT_NEAR(m.variance()(static_cast<Eigen::Index>(j)), static_cast<double>(var), 1e-6);
  }
  // Merging two halves agrees with streaming.
  RunningMoments a(dim), b(dim);
  for (std::size_t i = 0; i < k; ++i) (i < 3000 ? a : b).update(xs[i]);
  a.merge(b);
  EXPECT_DOUBLE_EQ(a.count(), m.count());
  EXPECT_LT((a.mean() - m.mean()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((a.variance() - m.variance()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  PolicyConfig cfg = tiny_config();
  Checkpoint ck{{"toy", 2, 2, 6, 3, 3}, PolicyParams::initialize(cfg, 41), RunningMoments(cfg.obs_dim)};
  Rng rng(42);
  for (int i = 0; i < 17; ++i) {
    std::vector<double> x(cfg.obs_dim);
    for (auto& v : x) v = rng.uniform() * 1e3 - 0.1;
    ck.moments.update(x);
  }
  std::stringstream buf;
  write_checkpoint(buf, ck);
  const std::string bytes = buf.str();
  std::istringstream in(bytes);
  const Checkpoint back = read_checkpoint(in);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_TRUE(back.params == ck.params);
  EXPECT_TRUE(back.moments == ck.moments);
  std::stringstream again;
  write_checkpoint(again, back);
  EXPECT_EQ(again.str(), bytes);

  Rng r1(3), r2(3);
  const auto in1 = random_input(cfg, 4, 1, r1);
  const auto in2 = random_input(cfg, 4, 1, r2);
  const auto a = forward(in1, ck.params), b = forward(in2, back.params);
  for (Eigen::Index k = 0; k < 4; ++k) EXPECT_EQ(a.logits(k), b.logits(k));
  EXPECT_EQ(a.value, b.value);
}

TEST(Checkpoint, CorruptInputRejected) {
  std::istringstream junk("not a checkpoint at all");
  EXPECT_ERROR_CODE(read_checkpoint(junk), ErrorCode::IoError);
  PolicyConfig cfg = tiny_config();
  Checkpoint ck{{"toy", 2, 2, 6, 3, 3}, PolicyParams::initialize(cfg, 1), RunningMoments(cfg.obs_dim)};
  std::stringstream buf;
  write_checkpoint(buf, ck);
  std::string bytes = buf.str();
  bytes.resize(bytes.size() - 9);
  std::istringstream cut(bytes);
  EXPECT_ERROR_CODE(read_checkpoint(cut), ErrorCode::IoError);
  EXPECT_ERROR_CODE(load_checkpoint("/nonexistent/dir/ckpt.bin"), ErrorCode::IoError);
}

TEST(NetworkPolicy, ActsOnEpisodes) {
  const auto env = testing::toy_env(3);
  PolicyConfig cfg;
  cfg.obs_dim = 32;
  cfg.candidate_dim = env.featurizer().dim();
  cfg.history_capacity = 3;
  const auto params = PolicyParams::initialize(cfg, 5);
  RunningMoments moments(32);
  NetworkPolicy greedy(params, moments, true, true);
  Episode ep(env);
  ep.reset("slow dull", 0, std::nullopt, 1);
  Episode* eps[] = {&ep};
  Rng rng(1);
  Rng* rngs[] = {&rng};
  const auto d = greedy.decide(eps, rngs);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(moments.count(), 1.0);
  EXPECT_EQ(d[0].input.num_candidates(), ep.catalog().size());
  const Vector probs = masked_softmax(forward(d[0].input, params).logits);
  Eigen::Index best;
  probs.maxCoeff(&best);
  EXPECT_EQ(d[0].action_index, static_cast<std::size_t>(best));
  EXPECT_DOUBLE_EQ(d[0].log_prob, std::log(probs(best)));
}

TEST(Config, Validation) {
  PolicyConfig c = tiny_config();
  c.heads = 3;
  EXPECT_ERROR_CODE(c.validate(), ErrorCode::InvalidConfig);
  c = tiny_config();
  c.candidate_dim = 0;
  EXPECT_ERROR_CODE(c.validate(), ErrorCode::InvalidConfig);
}

}  // namespace
}  // namespace promptedit
