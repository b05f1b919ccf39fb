// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "promptedit/edit_space.hpp"
#include "promptedit/harness.hpp"
#include "promptedit/policy.hpp"
#include "promptedit/ppo.hpp"
#include "promptedit/remote_scorer.hpp"
#include "promptedit/rng.hpp"
#include "promptedit/scoring.hpp"

#include "../bandit.hpp"
#include "../stub_server.hpp"

namespace {

using namespace promptedit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// --- 1 ---------------------------------------------------------------------------

Verdict action_counts() {
  const auto t0 = Clock::now();
  Verdict v;
  std::size_t checked = 0;
  for (std::size_t l = 0; l <= 6; ++l)
    for (std::size_t N = 0; N <= 8; ++N)
      for (std::size_t n = 0; n <= N; ++n) {
        PromptState s;
        for (std::size_t i = 0; i < l; ++i) s.instruction.push_back("p" + std::to_string(i));
        for (std::size_t i = 0; i < n; ++i) s.exemplar_slots.push_back(i);
        s.slot_verbalizers.assign(n + 1, 0);
        const auto counts = enumerate_actions(s, N, 2).counts();
        const std::size_t want_i = l * (l - (l ? 1 : 0)) / 2 + 2 * l;
        const std::size_t want_e = n * N - n * (n - (n ? 1 : 0)) / 2;
        if (counts.instruction != want_i || counts.exemplar != want_e) {
          v.pass = false;
          v.detail = "mismatch at l=" + std::to_string(l) + " n=" + std::to_string(n) +
                     " N=" + std::to_string(N);
          return v;
        }
        ++checked;
      }
  const auto spot = count_actions(5, 4, 16, 2);
  if (spot.instruction != 20 || spot.exemplar != 58) v.pass = false;
  const double secs = seconds_since(t0);
  if (secs >= 1.0) v.pass = false;
  v.detail = std::to_string(checked) + " (l,n,N) grids, spot l=5 -> " +
             std::to_string(spot.instruction) + ", n=4 N=16 -> " + std::to_string(spot.exemplar) +
             fmt(", %.3f s", secs);
  return v;
}

// --- 2 ---------------------------------------------------------------------------

Verdict telescoping() {
  const auto t0 = Clock::now();
  RunConfig c;
  c.seed = 2;
  c.reward_normalization = false;
  const Session session(c);
  const Environment& env = session.environment();
  std::vector<EpisodeSpec> specs;
  const auto pools = {session.split("train"), session.split("dev"), session.split("test")};
  std::vector<Exemplar> queries;
  for (auto p : pools) queries.insert(queries.end(), p.begin(), p.end());
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto& q = queries[i % queries.size()];
    specs.push_back({q.text, q.label, 0x7e1e00 + i, std::nullopt});
  }
  RandomEditPolicy policy;
  const auto traces = rollout(env, policy, specs);
  Verdict v;
  double worst = 0.0;
  std::size_t episodes = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& tr = traces[i];
    if (tr.discarded || tr.transitions.size() != 8) {
      v.pass = false;
      continue;
    }
    double sum = 0.0;
    for (const auto& t : tr.transitions) sum += t.raw_reward;
    const double s0 = compute_score(env.observe(tr.initial_state()), *specs[i].label, c.weights);
    const double sT = compute_score(env.observe(tr.final_state()), *specs[i].label, c.weights);
    worst = std::max(worst, std::abs(sum - (sT - s0)));
    ++episodes;
  }
  const double secs = seconds_since(t0);
  v.pass = v.pass && episodes == 1000 && worst <= 1e-9 && secs < 30.0;
  v.detail = std::to_string(episodes) + " episodes, T=8, max |sum r - (sT - s0)| = " +
             fmt("%.2e", worst) + fmt(", %.2f s", secs);
  return v;
}

// --- 3 ---------------------------------------------------------------------------

Verdict score_arithmetic() {
  const ScoreWeights w{2.0, 1.8};
  const std::vector<double> skewed{std::log(0.9), std::log(0.1)};
  const std::vector<double> uniform{std::log(0.5), std::log(0.5)};
  const double a = compute_score(skewed, 0, w);
  const double b = compute_score(uniform, 0, w);
  Verdict v;
  v.pass = std::abs(a - 3.9339) <= 1e-4 && std::abs(b + 0.1386) <= 1e-4;
  v.detail = fmt("(0.9, 0.1) -> %.6f", a) + fmt(", uniform -> %.6f", b);
  return v;
}

// --- 4 ---------------------------------------------------------------------------

Verdict gradient_check() {
  const auto t0 = Clock::now();
  PolicyConfig cfg;
  cfg.obs_dim = 6;
  cfg.candidate_dim = 5;
  cfg.history_capacity = 4;
  cfg.latent = 8;
  cfg.heads = 2;
  cfg.layers = 2;
  cfg.head_init_scale = 0.5;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t point = 1; point <= 5; ++point) {
    Rng rng(1000 + point);
    auto params = PolicyParams::initialize(cfg, point);
    auto u = [&] { return 2.0 * rng.uniform() - 1.0; };
    PolicyInput in;
    in.observation = Vector::NullaryExpr(6, u);
    in.candidates = Matrix::NullaryExpr(5, 5, u);
    in.history = Matrix::NullaryExpr(3, 5, u);
    for (int k = 0; k < 5; ++k) in.candidate_family.push_back(static_cast<std::uint8_t>(rng.below(5)));
    for (int k = 0; k < 3; ++k) in.history_family.push_back(static_cast<std::uint8_t>(rng.below(5)));
    in.valid = {1, 1, 0, 1, 1};
    std::vector<double> w(5);
    for (auto& x : w) x = u();
    const double vc = 0.7;
    // Loss: sum of w_k log pi_k over valid k plus vc * value^2.
    auto loss = [&](const ForwardPass& p) {
      const Vector pr = masked_softmax(p.logits);
      double l = vc * p.value * p.value;
      for (int k = 0; k < 5; ++k)
        if (pr(k) > 0) l += w[k] * std::log(pr(k));
      return l;
    };
    const auto pass = forward(in, params);
    const Vector pr = masked_softmax(pass.logits);
    double wsum = 0.0;
    for (int k = 0; k < 5; ++k)
      if (pr(k) > 0) wsum += w[k];
    std::vector<double> dl(5, 0.0);
    for (int k = 0; k < 5; ++k)
      if (pr(k) > 0) dl[k] = w[k] - wsum * pr(k);
    auto grads = params.zeros_like();
    backward(pass, dl, 2.0 * vc * pass.value, params, grads);

    const double h = 1e-4;
    for (std::size_t t = 0; t < params.size(); ++t) {
      Matrix& m = params[t];
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        const double orig = m.data()[i];
        m.data()[i] = orig + h;
        const double up = loss(forward(in, params));
        m.data()[i] = orig - h;
        const double down = loss(forward(in, params));
        m.data()[i] = orig;
        const double numeric = (up - down) / (2 * h);
        const double analytic = grads[t].data()[i];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
        ++checked;
      }
    }
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = worst <= 1e-4 && secs < 120.0;
  v.detail = "latent 8, 5 points, " + std::to_string(checked) + " parameter entries, max rel err " +
             fmt("%.2e", worst) + fmt(", %.2f s", secs);
  return v;
}

// --- 5 ---------------------------------------------------------------------------

Verdict gae() {
  const auto two = compute_gae(std::vector<double>{0.0, 1.0}, std::vector<double>{0.5, 0.5, 0.0},
                               {false, true}, 0.99, 0.95);
  bool ok = std::abs(two.advantages[0] - 0.46525) <= 1e-9 && std::abs(two.advantages[1] - 0.5) <= 1e-9;

  // Dyadic rewards and values keep Monte-Carlo sums exact.
  Rng rng(55);
  std::vector<double> r(32), v(33, 0.0);
  for (auto& x : r) x = static_cast<double>(static_cast<int>(rng.below(64)) - 32) / 8.0;
  for (std::size_t i = 0; i < 32; ++i) v[i] = static_cast<double>(static_cast<int>(rng.below(64)) - 32) / 16.0;
  std::vector<bool> done(32, false);
  done.back() = true;
  const auto mc = compute_gae(r, v, done, 1.0, 1.0);
  double ret = 0.0;
  bool exact = true;
  for (std::size_t t = 32; t-- > 0;) {
    ret += r[t];
    exact = exact && mc.advantages[t] == ret - v[t] && mc.returns[t] == ret;
  }
  Verdict out;
  out.pass = ok && exact;
  out.detail = fmt("A0 = %.8f", two.advantages[0]) + fmt(", A1 = %.8f", two.advantages[1]) +
               (exact ? ", gamma=lambda=1 equals Monte-Carlo exactly" : ", Monte-Carlo mismatch");
  return out;
}

// --- 6 ---------------------------------------------------------------------------

Verdict bandit() {
  const auto t0 = Clock::now();
  using testing::Bandit;
  auto params = PolicyParams::initialize(Bandit::policy_config(), 606);
  const auto res = Bandit::train(params, 0.95, 2000, 607);
  // Empirical frequency of the paying arm under the trained policy.
  Rng rng(608);
  std::size_t hits = 0;
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws; ++i) {
    const std::size_t c = static_cast<std::size_t>(rng.below(Bandit::kArms));
    const Vector p = masked_softmax(forward(Bandit::input(c), params).logits);
    hits += rng.categorical(std::span<const double>(p.data(), Bandit::kArms)) == Bandit::best_arm(c);
  }
  const double freq = static_cast<double>(hits) / draws;
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = res.rate >= 0.95 && freq >= 0.95 && res.updates <= 2000 && secs < 300.0;
  v.detail = std::to_string(res.updates) + " updates, optimal-arm probability " +
             fmt("%.3f", res.rate) + fmt(", sampled frequency %.3f", freq) + fmt(", %.2f s", secs);
  return v;
}

// --- 7 ---------------------------------------------------------------------------

RunConfig small_task_config() {
  RunConfig c;
  c.seed = 7;
  c.synthetic_task.num_labels = 2;
  c.synthetic_task.num_verbalizers = 3;
  c.synthetic_task.instruction_phrases = 3;
  c.pool_size = 6;
  c.n_exemplars = 2;
  c.horizon = 3;
  c.ppo.iterations = 300;
  c.ppo.learning_rate = 1e-3;
  c.ppo.eval_interval = 20;
  return c;
}

// Best s_T over every T-step action sequence from `state`.
double exhaustive_best(const Environment& env, const PromptState& state, LabelId label,
                       std::size_t steps_left) {
  if (steps_left == 0) return compute_score(env.observe(state), label, env.config().weights);
  double best = -std::numeric_limits<double>::infinity();
  const auto catalog = env.catalog(state);
  for (const auto& a : catalog.actions()) {
    const PromptState next = apply(state, a, env.pool().size(), env.task().num_verbalizers());
    best = std::max(best, exhaustive_best(env, next, label, steps_left - 1));
  }
  return best;
}

Verdict end_to_end() {
  const auto t0 = Clock::now();
  const RunConfig cfg = small_task_config();
  const Session session(cfg);
  const Environment& env = session.environment();
  const auto test = session.test_split();

  double oracle = 0.0;
  for (const auto& q : test) {
    PromptState s = session.initial_prompt();
    s.query = q.text;
    oracle += exhaustive_best(env, s, q.label, cfg.horizon);
  }
  oracle /= static_cast<double>(test.size());
  const double oracle_secs = seconds_since(t0);

  const EvalResult none = session.baseline(BaselineKind::NoEdit, test, 0);
  double random_mean = 0.0;
  for (std::uint64_t s = 1; s <= 10; ++s)
    random_mean += session.baseline(BaselineKind::RandomEdit, test, s).mean_final_score / 10.0;

  const TrainResult trained = session.train();
  const EvalResult policy = session.evaluate(trained.best, test);
  const double secs = seconds_since(t0);

  Verdict v;
  v.pass = oracle > 0.0 && policy.mean_final_score >= 0.9 * oracle &&
           policy.mean_final_score > none.mean_final_score &&
           policy.mean_final_score > random_mean && policy.discarded == 0 && secs < 900.0;
  v.detail = std::to_string(test.size()) + " test queries: policy " +
             fmt("%.4f", policy.mean_final_score) + fmt(" (%.1f%% of oracle", 100.0 * policy.mean_final_score / oracle) +
             fmt(" %.4f)", oracle) + fmt(", no-edit %.4f", none.mean_final_score) +
             fmt(", random-edit %.4f", random_mean) + fmt("; accuracy policy %.3f", policy.accuracy) +
             fmt(" vs no-edit %.3f", none.accuracy) + "; best iteration " +
             std::to_string(trained.best_iteration) + fmt("; oracle %.1f s", oracle_secs) +
             fmt(", total %.1f s", secs);
  return v;
}

// --- 8 ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict determinism() {
  RunConfig c;
  c.seed = 88;
  c.ppo.iterations = 4;
  c.ppo.parallel_envs = 8;
  c.ppo.eval_interval = 2;
  const fs::path root = fs::temp_directory_path() / "promptedit_acceptance_determinism";
  fs::remove_all(root);
  for (const char* run : {"a", "b"}) Session(c).run_train(root / run);
  Verdict v;
  std::string detail;
  for (const char* file : {"metrics.jsonl", "checkpoint.bin", "prompts.jsonl"}) {
    const std::string a = slurp(root / "a" / file), b = slurp(root / "b" / file);
    const bool same = !a.empty() && a == b;
    v.pass = v.pass && same;
    detail += std::string(detail.empty() ? "" : ", ") + file + (same ? " identical" : " DIFFER") +
              " (" + std::to_string(a.size()) + " bytes)";
  }
  fs::remove_all(root);
  v.detail = detail;
  return v;
}

// --- 9 ---------------------------------------------------------------------------

Verdict normalization() {
  Rng rng(99);
  const std::size_t dim = 6, k = 10000;
  std::vector<std::vector<double>> xs(k, std::vector<double>(dim));
  for (auto& x : xs)
    for (std::size_t j = 0; j < dim; ++j) x[j] = 50.0 * static_cast<double>(j) + (2.0 * rng.uniform() - 1.0) * (1.0 + j);
  RunningMoments m(dim);
  for (const auto& x : xs) m.update(x);
  double worst = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    long double mean = 0, var = 0;
    for (const auto& x : xs) mean += x[j];
    mean /= k;
    for (const auto& x : xs) var += (x[j] - mean) * (x[j] - mean);
    var /= k;
    const auto jj = static_cast<Eigen::Index>(j);
    worst = std::max(worst, std::abs(m.mean()(jj) - static_cast<double>(mean)));
    worst = std::max(worst, std::abs(m.variance()(jj) - static_cast<double>(var)));
  }

  // Reward scaling: every divisor implied by raw / normalized is at least eps.
  const double eps = 1e-4;
  double smallest_divisor = std::numeric_limits<double>::infinity();
  std::size_t episodes = 0;
  auto check = [&](std::vector<double> raw) {
    std::vector<Transition> ts(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) ts[i].raw_reward = raw[i];
    normalize_episode_rewards(ts, eps);
    for (const auto& t : ts)
      if (t.raw_reward != 0.0) smallest_divisor = std::min(smallest_divisor, t.raw_reward / t.reward);
    ++episodes;
  };
  check({0.0, 0.0, 0.0});
  check({0.3, 0.3, 0.3, 0.3});
  check({1e-7, -1e-7, 2e-7});
  for (int e = 0; e < 500; ++e) {
    std::vector<double> raw(8);
    const double scale = std::pow(10.0, -8.0 + 8.0 * rng.uniform());
    for (auto& x : raw) x = (2.0 * rng.uniform() - 1.0) * scale;
    check(raw);
  }
  Verdict v;
  v.pass = worst <= 1e-6 && smallest_divisor >= eps * (1.0 - 1e-12);
  v.detail = std::to_string(k) + " vectors, max |stream - batch| " + fmt("%.2e", worst) + "; " +
             std::to_string(episodes) + " reward episodes, smallest divisor " +
             fmt("%.3e", smallest_divisor) + fmt(" (eps %.0e)", eps);
  return v;
}

// --- 10 --------------------------------------------------------------------------

Verdict remote_protocol() {
  const ScoreResponseMessage reply{{std::log(0.2), std::log(0.3), std::log(0.5)},
                                   std::vector<double>{0.1, -2.5e-7, 3.0e12, 1.0 / 3.0}};
  testing::StubServer server([&](const httplib::Request&, httplib::Response& res, int call) {
    if (call == 1) std::this_thread::sleep_for(std::chrono::milliseconds(1200));
    res.set_content(encode_response(reply), "application/json");
  });
  RemoteScorerConfig cfg;
  cfg.endpoint = server.endpoint();
  cfg.timeout_ms = 400;
  cfg.retries = 1;
  cfg.feature_dim = 4;
  RemoteScorer scorer(cfg);
  const ScoreRequestMessage msg{"Review: \"tense\" caf\xC3\xA9. Sentiment: <mask>.",
                                {"terrible", "fine", "great"}, true};

  auto bit_equal = [](const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
  };
  const auto first = scorer.exchange(msg);
  const bool round_trip = bit_equal(first.log_probs, reply.log_probs) && first.features &&
                          bit_equal(*first.features, *reply.features);
  const auto bodies = server.bodies();
  const bool request_exact = bodies.size() == 1 && bodies[0] == encode_request(msg) &&
                             decode_request(bodies[0]) == msg;

  const auto second = scorer.exchange(msg);  // first attempt times out, the retry succeeds
  const bool recovered = bit_equal(second.log_probs, reply.log_probs) && server.calls() == 3;

  Verdict v;
  v.pass = round_trip && request_exact && recovered;
  v.detail = std::string("response bit-exact: ") + (round_trip ? "yes" : "no") +
             ", request bit-exact: " + (request_exact ? "yes" : "no") +
             ", timeout recovered by retry: " + (recovered ? "yes" : "no") + " (" +
             std::to_string(server.calls()) + " server calls)";
  return v;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria = {
      {"action-count fidelity", action_counts},
      {"telescoping rewards", telescoping},
      {"score arithmetic", score_arithmetic},
      {"gradient correctness", gradient_check},
      {"GAE correctness", gae},
      {"PPO bandit sanity", bandit},
      {"end-to-end learning vs oracle", end_to_end},
      {"determinism", determinism},
      {"normalization", normalization},
      {"remote scorer protocol", remote_protocol},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].run();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    failures += v.pass ? 0 : 1;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << " (" << criteria[i].name
              << "): " << v.detail << std::endl;
  }
  std::cout << (failures ? "FAILED " : "ALL PASSED ") << criteria.size() - failures << "/"
            << criteria.size() << std::endl;
  return failures ? 1 : 0;
}
