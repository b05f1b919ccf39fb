#include "promptedit/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "promptedit/error.hpp"

namespace promptedit {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kStdFloor = 1e-8;
constexpr double kObsClip = 10.0;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using Index = Eigen::Index;

Index idx(std::size_t v) { return static_cast<Index>(v); }

struct NormCache {
  Matrix xhat;
  Vector inv;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache& cache) {
  const Index rows = x.rows();
  cache.xhat.resize(rows, x.cols());
  cache.inv.resize(rows);
  for (Index r = 0; r < rows; ++r) {
    const double mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).matrix();
    const double var = centered.squaredNorm() / static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv(r) = inv;
    cache.xhat.row(r) = centered * inv;
  }
  Matrix y = cache.xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const NormCache& cache, const Matrix& gain,
                           Matrix& dgain, Matrix& dbias) {
  dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  const double inv_d = 1.0 / static_cast<double>(dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() * inv_d;
    const double mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) * inv_d;
    dx.row(r) = cache.inv(r) *
                (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void add_bias(Matrix& y, const Matrix& b) { y.rowwise() += b.row(0); }

void accumulate_linear(const Matrix& x, const Matrix& dy, Matrix& dw, Matrix& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoints assume little-endian");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorCode::IoError, "truncated checkpoint");
  return v;
}

void write_doubles(std::ostream& out, const double* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::istream& in, double* data, std::size_t n) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) fail(ErrorCode::IoError, "truncated checkpoint");
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint32_t>(in);
  if (n > (1u << 24)) fail(ErrorCode::IoError, "implausible string length in checkpoint");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) fail(ErrorCode::IoError, "truncated checkpoint");
  return s;
}

constexpr char kMagic[8] = {'P', 'E', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

struct LayerTape {
  Matrix x_in;
  NormCache ln1;
  Matrix a, q, k, v;
  std::vector<Matrix> probs;
  Matrix o;
  Matrix x1;
  NormCache ln2;
  Matrix b, h, g;
};

struct ForwardTape {
  Vector obs;
  Matrix hist;
  std::vector<std::uint8_t> hist_family;
  Matrix cand;
  std::vector<std::uint8_t> cand_family;
  std::vector<std::uint8_t> valid;
  std::vector<std::uint8_t> key_valid;
  std::vector<LayerTape> layers;
  NormCache lnf;
  Matrix f;
  Matrix p1;
  Vector v1;
};

// --- configuration -----------------------------------------------------------

void PolicyConfig::validate() const {
  if (latent == 0 || heads == 0 || latent % heads != 0)
    fail(ErrorCode::InvalidConfig, "latent dimension must be a positive multiple of the head count");
  if (layers == 0 || mlp_ratio == 0) fail(ErrorCode::InvalidConfig, "need at least one layer");
  if (obs_dim == 0 || candidate_dim == 0)
    fail(ErrorCode::InvalidConfig, "observation and candidate widths must be positive");
  if (history_capacity == 0) fail(ErrorCode::InvalidConfig, "history capacity must be positive");
}

// --- running moments ---------------------------------------------------------

void RunningMoments::update(std::span<const double> x) {
  if (x.size() != dim()) fail(ErrorCode::ShapeError, "observation width does not match moments");
  const Eigen::Map<const Vector> v(x.data(), idx(x.size()));
  count_ += 1.0;
  const Vector delta = v - mean_;
  mean_ += delta / count_;
  m2_ += delta.cwiseProduct(v - mean_);
}

void RunningMoments::merge(const RunningMoments& other) {
  if (other.count_ == 0.0) return;
  if (other.dim() != dim()) fail(ErrorCode::ShapeError, "cannot merge moments of different width");
  if (count_ == 0.0) {
    *this = other;
    return;
  }
  const double n = count_ + other.count_;
  const Vector delta = other.mean_ - mean_;
  mean_ += delta * (other.count_ / n);
  m2_ += other.m2_ + delta.cwiseProduct(delta) * (count_ * other.count_ / n);
  count_ = n;
}

Vector RunningMoments::variance() const {
  if (count_ == 0.0) return Vector::Zero(mean_.size());
  return (m2_ / count_).cwiseMax(0.0);
}

void RunningMoments::assign(double count, Vector mean, Vector m2) {
  if (mean.size() != m2.size()) fail(ErrorCode::ShapeError, "moment vectors differ in width");
  count_ = count;
  mean_ = std::move(mean);
  m2_ = std::move(m2);
}

Vector normalize(std::span<const double> x, RunningMoments& moments, bool update) {
  if (update) moments.update(x);
  return normalize(x, std::as_const(moments));
}

Vector normalize(std::span<const double> x, const RunningMoments& moments) {
  if (x.size() != moments.dim())
    fail(ErrorCode::ShapeError, "observation width " + std::to_string(x.size()) +
                                    " does not match moments width " + std::to_string(moments.dim()));
  const Eigen::Map<const Vector> v(x.data(), idx(x.size()));
  const Vector std_dev = moments.variance().cwiseSqrt().cwiseMax(kStdFloor);
  return (v - moments.mean()).cwiseQuotient(std_dev);
}

// --- parameters --------------------------------------------------------------

std::size_t PolicyParams::add(std::string name, std::size_t rows, std::size_t cols) {
  tensors_.push_back(Matrix::Zero(idx(rows), idx(cols)));
  names_.push_back(std::move(name));
  return tensors_.size() - 1;
}

PolicyParams::PolicyParams(PolicyConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.latent;
  const std::size_t hidden = d * config_.mlp_ratio;
  ids_.w_obs = add("embed.obs.weight", config_.obs_dim, d);
  ids_.b_obs = add("embed.obs.bias", 1, d);
  ids_.w_cand = add("embed.candidate.weight", config_.candidate_dim, d);
  ids_.b_cand = add("embed.candidate.bias", 1, d);
  ids_.family_embed = add("embed.candidate_family", kNumActionFamilies, d);
  ids_.hist_family_embed = add("embed.history_family", kNumActionFamilies, d);
  ids_.hist_pos_embed = add("embed.history_position", config_.history_capacity, d);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    LayerIds li{};
    li.ln1_g = add(p + "ln1.gain", 1, d);
    li.ln1_b = add(p + "ln1.bias", 1, d);
    li.wq = add(p + "attn.q.weight", d, d);
    li.bq = add(p + "attn.q.bias", 1, d);
    li.wk = add(p + "attn.k.weight", d, d);
    li.bk = add(p + "attn.k.bias", 1, d);
    li.wv = add(p + "attn.v.weight", d, d);
    li.bv = add(p + "attn.v.bias", 1, d);
    li.wo = add(p + "attn.out.weight", d, d);
    li.bo = add(p + "attn.out.bias", 1, d);
    li.ln2_g = add(p + "ln2.gain", 1, d);
    li.ln2_b = add(p + "ln2.bias", 1, d);
    li.w1 = add(p + "mlp.fc.weight", d, hidden);
    li.b1 = add(p + "mlp.fc.bias", 1, hidden);
    li.w2 = add(p + "mlp.proj.weight", hidden, d);
    li.b2 = add(p + "mlp.proj.bias", 1, d);
    ids_.layers.push_back(li);
  }
  ids_.lnf_g = add("encoder.final_ln.gain", 1, d);
  ids_.lnf_b = add("encoder.final_ln.bias", 1, d);
  ids_.wp1 = add("policy.fc.weight", d, d);
  ids_.bp1 = add("policy.fc.bias", 1, d);
  ids_.wp2 = add("policy.out.weight", d, 1);
  ids_.bp2 = add("policy.out.bias", 1, 1);
  ids_.wv1 = add("value.fc.weight", d, d);
  ids_.bv1 = add("value.fc.bias", 1, d);
  ids_.wv2 = add("value.out.weight", d, 1);
  ids_.bv2 = add("value.out.bias", 1, 1);
}

PolicyParams PolicyParams::initialize(const PolicyConfig& config, std::uint64_t seed) {
  PolicyParams p(config);
  Rng rng(seed);
  auto fill = [&](std::size_t i, double bound) {
    for (Index r = 0; r < p[i].rows(); ++r)
      for (Index c = 0; c < p[i].cols(); ++c) p[i](r, c) = (2.0 * rng.uniform() - 1.0) * bound;
  };
  auto fan_in = [&](std::size_t i) { return 1.0 / std::sqrt(static_cast<double>(p[i].rows())); };
  const auto& ids = p.ids_;
  for (auto i : {ids.w_obs, ids.w_cand, ids.wp1, ids.wv1}) fill(i, fan_in(i));
  for (auto i : {ids.family_embed, ids.hist_family_embed, ids.hist_pos_embed}) fill(i, 0.1);
  for (const auto& li : ids.layers) {
    for (auto i : {li.wq, li.wk, li.wv, li.wo, li.w1, li.w2}) fill(i, fan_in(i));
    p[li.ln1_g].setOnes();
    p[li.ln2_g].setOnes();
  }
  p[ids.lnf_g].setOnes();
  fill(ids.wp2, config.head_init_scale);
  fill(ids.wv2, fan_in(ids.wv2));
  return p;
}

void PolicyParams::set_zero() {
  for (auto& t : tensors_) t.setZero();
}

std::size_t PolicyParams::num_scalars() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
  return n;
}

bool PolicyParams::all_finite() const {
  return std::all_of(tensors_.begin(), tensors_.end(),
                     [](const Matrix& t) { return t.allFinite(); });
}

double PolicyParams::squared_norm() const {
  double s = 0.0;
  for (const auto& t : tensors_) s += t.squaredNorm();
  return s;
}

void PolicyParams::scale(double factor) {
  for (auto& t : tensors_) t *= factor;
}

// --- forward / backward ------------------------------------------------------

Vector masked_softmax(const Vector& logits) {
  double mx = kNegInf;
  for (Index i = 0; i < logits.size(); ++i) mx = std::max(mx, logits(i));
  Vector p = Vector::Zero(logits.size());
  if (mx == kNegInf) return p;
  double sum = 0.0;
  for (Index i = 0; i < logits.size(); ++i) {
    if (logits(i) == kNegInf) continue;
    p(i) = std::exp(logits(i) - mx);
    sum += p(i);
  }
  return p / sum;
}

ForwardPass forward(const PolicyInput& input, const PolicyParams& params) {
  const auto& cfg = params.config();
  const auto& ids = params.ids();
  const std::size_t K = input.num_candidates();
  const std::size_t H = static_cast<std::size_t>(input.history.rows());
  if (K == 0) fail(ErrorCode::NoActions, "empty candidate set");
  if (static_cast<std::size_t>(input.observation.size()) != cfg.obs_dim)
    fail(ErrorCode::ShapeError, "observation width does not match the policy");
  if (static_cast<std::size_t>(input.candidates.cols()) != cfg.candidate_dim ||
      (H > 0 && static_cast<std::size_t>(input.history.cols()) != cfg.candidate_dim))
    fail(ErrorCode::ShapeError, "candidate width does not match the policy");
  if (input.candidate_family.size() != K || input.valid.size() != K ||
      input.history_family.size() != H)
    fail(ErrorCode::ShapeError, "candidate or history annotations have the wrong length");
  if (H > cfg.history_capacity) fail(ErrorCode::ShapeError, "history longer than its capacity");

  const std::size_t d = cfg.latent;
  const std::size_t S = 1 + H + K;
  auto tape = std::make_shared<ForwardTape>();
  tape->obs = input.observation;
  tape->hist = input.history;
  tape->hist_family = input.history_family;
  tape->cand = input.candidates;
  tape->cand_family = input.candidate_family;
  tape->valid = input.valid;
  tape->key_valid.assign(S, 1);
  for (std::size_t k = 0; k < K; ++k) tape->key_valid[1 + H + k] = input.valid[k];

  Matrix x(idx(S), idx(d));
  x.row(0) = input.observation.transpose() * params[ids.w_obs] + params[ids.b_obs];
  if (H > 0) {
    x.middleRows(1, idx(H)) = input.history * params[ids.w_cand];
    for (std::size_t t = 0; t < H; ++t)
      x.row(idx(1 + t)) += params[ids.b_cand].row(0) +
                           params[ids.hist_family_embed].row(input.history_family[t]) +
                           params[ids.hist_pos_embed].row(idx(t));
  }
  x.bottomRows(idx(K)) = input.candidates * params[ids.w_cand];
  for (std::size_t k = 0; k < K; ++k)
    x.row(idx(1 + H + k)) +=
        params[ids.b_cand].row(0) + params[ids.family_embed].row(input.candidate_family[k]);

  const std::size_t dh = d / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  tape->layers.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& li = ids.layers[l];
    LayerTape& lt = tape->layers[l];
    lt.x_in = x;
    lt.a = layer_norm(x, params[li.ln1_g], params[li.ln1_b], lt.ln1);
    lt.q = lt.a * params[li.wq];
    add_bias(lt.q, params[li.bq]);
    lt.k = lt.a * params[li.wk];
    add_bias(lt.k, params[li.bk]);
    lt.v = lt.a * params[li.wv];
    add_bias(lt.v, params[li.bv]);
    lt.o.resize(idx(S), idx(d));
    lt.probs.resize(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Index c0 = idx(h * dh);
      Matrix scores = (lt.q.middleCols(c0, idx(dh)) * lt.k.middleCols(c0, idx(dh)).transpose()) * scale;
      for (Index r = 0; r < scores.rows(); ++r) {
        double mx = kNegInf;
        for (Index c = 0; c < scores.cols(); ++c)
          if (tape->key_valid[static_cast<std::size_t>(c)]) mx = std::max(mx, scores(r, c));
        double sum = 0.0;
        for (Index c = 0; c < scores.cols(); ++c) {
          const double e =
              tape->key_valid[static_cast<std::size_t>(c)] ? std::exp(scores(r, c) - mx) : 0.0;
          scores(r, c) = e;
          sum += e;
        }
        scores.row(r) /= sum;
      }
      lt.o.middleCols(c0, idx(dh)) = scores * lt.v.middleCols(c0, idx(dh));
      lt.probs[h] = std::move(scores);
    }
    Matrix attn = lt.o * params[li.wo];
    add_bias(attn, params[li.bo]);
    lt.x1 = x + attn;
    lt.b = layer_norm(lt.x1, params[li.ln2_g], params[li.ln2_b], lt.ln2);
    lt.h = lt.b * params[li.w1];
    add_bias(lt.h, params[li.b1]);
    lt.g = lt.h.unaryExpr([](double v) { return gelu(v); });
    Matrix mlp = lt.g * params[li.w2];
    add_bias(mlp, params[li.b2]);
    x = lt.x1 + mlp;
  }
  tape->f = layer_norm(x, params[ids.lnf_g], params[ids.lnf_b], tape->lnf);

  Matrix pre = tape->f.bottomRows(idx(K)) * params[ids.wp1];
  add_bias(pre, params[ids.bp1]);
  tape->p1 = pre.array().tanh().matrix();
  ForwardPass pass;
  pass.logits = (tape->p1 * params[ids.wp2]).col(0).array() + params[ids.bp2](0, 0);
  for (std::size_t k = 0; k < K; ++k)
    if (!input.valid[k]) pass.logits(idx(k)) = kNegInf;

  const Eigen::RowVectorXd vpre = tape->f.row(0) * params[ids.wv1] + params[ids.bv1].row(0);
  tape->v1 = vpre.array().tanh().matrix().transpose();
  pass.value = tape->v1.dot(params[ids.wv2].col(0)) + params[ids.bv2](0, 0);
  pass.tape = std::move(tape);
  return pass;
}

void backward(const ForwardPass& pass, std::span<const double> dlogits, double dvalue,
              const PolicyParams& params, PolicyGradients& grads) {
  if (!pass.tape) fail(ErrorCode::NoTape, "backward called without a recorded forward pass");
  const ForwardTape& tp = *pass.tape;
  const auto& cfg = params.config();
  const auto& ids = params.ids();
  if (!(grads.config() == cfg)) fail(ErrorCode::ShapeError, "gradient buffer shaped for another policy");
  const std::size_t K = static_cast<std::size_t>(tp.cand.rows());
  const std::size_t H = static_cast<std::size_t>(tp.hist.rows());
  const std::size_t S = 1 + H + K;
  const std::size_t d = cfg.latent;
  if (dlogits.size() != K) fail(ErrorCode::ShapeError, "dlogits has the wrong length");

  Matrix df = Matrix::Zero(idx(S), idx(d));

  // Policy head.
  Vector dl(idx(K));
  for (std::size_t k = 0; k < K; ++k) dl(idx(k)) = tp.valid[k] ? dlogits[k] : 0.0;
  grads[ids.wp2].col(0) += tp.p1.transpose() * dl;
  grads[ids.bp2](0, 0) += dl.sum();
  Matrix dp1 = dl * params[ids.wp2].col(0).transpose();
  dp1.array() *= (1.0 - tp.p1.array().square());
  accumulate_linear(tp.f.bottomRows(idx(K)), dp1, grads[ids.wp1], grads[ids.bp1]);
  df.bottomRows(idx(K)) += dp1 * params[ids.wp1].transpose();

  // Value head.
  grads[ids.wv2].col(0) += tp.v1 * dvalue;
  grads[ids.bv2](0, 0) += dvalue;
  Eigen::RowVectorXd dv1 = params[ids.wv2].col(0).transpose() * dvalue;
  dv1.array() *= (1.0 - tp.v1.transpose().array().square());
  grads[ids.wv1].noalias() += tp.f.row(0).transpose() * dv1;
  grads[ids.bv1].row(0) += dv1;
  df.row(0) += dv1 * params[ids.wv1].transpose();

  Matrix dx = layer_norm_backward(df, tp.lnf, params[ids.lnf_g], grads[ids.lnf_g], grads[ids.lnf_b]);

  const std::size_t dh = d / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = cfg.layers; l-- > 0;) {
    const auto& li = ids.layers[l];
    const LayerTape& lt = tp.layers[l];

    // x_out = x1 + gelu(ln2(x1) W1 + b1) W2 + b2
    accumulate_linear(lt.g, dx, grads[li.w2], grads[li.b2]);
    Matrix dh_pre = dx * params[li.w2].transpose();
    dh_pre.array() *= lt.h.unaryExpr([](double v) { return gelu_grad(v); }).array();
    accumulate_linear(lt.b, dh_pre, grads[li.w1], grads[li.b1]);
    const Matrix db = dh_pre * params[li.w1].transpose();
    Matrix dx1 = dx + layer_norm_backward(db, lt.ln2, params[li.ln2_g], grads[li.ln2_g], grads[li.ln2_b]);

    // x1 = x_in + attention(ln1(x_in)) Wo + bo
    accumulate_linear(lt.o, dx1, grads[li.wo], grads[li.bo]);
    const Matrix d_o = dx1 * params[li.wo].transpose();
    Matrix dq(idx(S), idx(d)), dk(idx(S), idx(d)), dv(idx(S), idx(d));
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Index c0 = idx(h * dh);
      const Matrix& p = lt.probs[h];
      const auto doh = d_o.middleCols(c0, idx(dh));
      dv.middleCols(c0, idx(dh)) = p.transpose() * doh;
      const Matrix dp = doh * lt.v.middleCols(c0, idx(dh)).transpose();
      const Vector row_dot = (dp.array() * p.array()).rowwise().sum();
      const Matrix ds = p.array() * (dp.array().colwise() - row_dot.array());
      dq.middleCols(c0, idx(dh)) = (ds * lt.k.middleCols(c0, idx(dh))) * scale;
      dk.middleCols(c0, idx(dh)) = (ds.transpose() * lt.q.middleCols(c0, idx(dh))) * scale;
    }
    accumulate_linear(lt.a, dq, grads[li.wq], grads[li.bq]);
    accumulate_linear(lt.a, dk, grads[li.wk], grads[li.bk]);
    accumulate_linear(lt.a, dv, grads[li.wv], grads[li.bv]);
    const Matrix da = dq * params[li.wq].transpose() + dk * params[li.wk].transpose() +
                      dv * params[li.wv].transpose();
    dx = dx1 + layer_norm_backward(da, lt.ln1, params[li.ln1_g], grads[li.ln1_g], grads[li.ln1_b]);
  }

  // Token embeddings.
  grads[ids.w_obs].noalias() += tp.obs * dx.row(0);
  grads[ids.b_obs].row(0) += dx.row(0);
  if (H > 0) {
    const auto dhist = dx.middleRows(1, idx(H));
    grads[ids.w_cand].noalias() += tp.hist.transpose() * dhist;
    grads[ids.b_cand].row(0) += dhist.colwise().sum();
    for (std::size_t t = 0; t < H; ++t) {
      grads[ids.hist_family_embed].row(tp.hist_family[t]) += dhist.row(idx(t));
      grads[ids.hist_pos_embed].row(idx(t)) += dhist.row(idx(t));
    }
  }
  const auto dcand = dx.bottomRows(idx(K));
  grads[ids.w_cand].noalias() += tp.cand.transpose() * dcand;
  grads[ids.b_cand].row(0) += dcand.colwise().sum();
  for (std::size_t k = 0; k < K; ++k)
    grads[ids.family_embed].row(tp.cand_family[k]) += dcand.row(idx(k));
}

// --- acting ------------------------------------------------------------------

PolicyInput make_policy_input(const Episode& episode, const RunningMoments& moments) {
  const auto& env = episode.environment();
  PolicyInput in;
  in.observation = normalize(episode.observation().features, moments).cwiseMax(-kObsClip).cwiseMin(kObsClip);
  in.candidates = env.featurizer().build(episode.state(), episode.catalog(), env.pool());
  in.candidate_family.reserve(episode.catalog().size());
  for (const auto& a : episode.catalog().actions())
    in.candidate_family.push_back(static_cast<std::uint8_t>(family_of(a)));
  in.valid.assign(episode.catalog().size(), 1);
  const auto& hist = episode.history();
  in.history = hist.features().topRows(idx(hist.size()));
  in.history_family.assign(hist.families().begin(),
                           hist.families().begin() + static_cast<long>(hist.size()));
  return in;
}

std::vector<PolicyDecision> NetworkPolicy::decide(std::span<Episode* const> episodes,
                                                  std::span<Rng* const> rngs) {
  if (update_moments_)
    for (const Episode* ep : episodes) moments_->update(ep->observation().features);
  std::vector<PolicyDecision> out;
  out.reserve(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    PolicyDecision dec;
    dec.input = make_policy_input(*episodes[i], *moments_);
    const ForwardPass pass = forward(dec.input, *params_);
    const Vector probs = masked_softmax(pass.logits);
    if (greedy_) {
      Index best = 0;
      probs.maxCoeff(&best);
      dec.action_index = static_cast<std::size_t>(best);
    } else {
      dec.action_index =
          rngs[i]->categorical(std::span<const double>(probs.data(), static_cast<std::size_t>(probs.size())));
    }
    dec.log_prob = std::log(probs(idx(dec.action_index)));
    dec.value = pass.value;
    out.push_back(std::move(dec));
  }
  return out;
}

// --- checkpoints -------------------------------------------------------------

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  const auto& cfg = ckpt.params.config();
  nlohmann::json header;
  header["meta"] = {{"task_name", ckpt.meta.task_name},
                    {"num_labels", ckpt.meta.num_labels},
                    {"num_slots", ckpt.meta.num_slots},
                    {"pool_size", ckpt.meta.pool_size},
                    {"num_verbalizers", ckpt.meta.num_verbalizers},
                    {"horizon", ckpt.meta.horizon}};
  header["policy"] = {{"obs_dim", cfg.obs_dim},
                      {"candidate_dim", cfg.candidate_dim},
                      {"history_capacity", cfg.history_capacity},
                      {"latent", cfg.latent},
                      {"heads", cfg.heads},
                      {"layers", cfg.layers},
                      {"mlp_ratio", cfg.mlp_ratio},
                      {"head_init_scale", cfg.head_init_scale}};
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_string(out, header.dump());
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const Matrix& t = ckpt.params[i];
    write_string(out, ckpt.params.name(i));
    write_pod<std::uint32_t>(out, 2);
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
    write_doubles(out, t.data(), static_cast<std::size_t>(t.size()));
  }
  write_pod<double>(out, ckpt.moments.count());
  write_pod<std::uint64_t>(out, ckpt.moments.dim());
  write_doubles(out, ckpt.moments.mean().data(), ckpt.moments.dim());
  write_doubles(out, ckpt.moments.m2().data(), ckpt.moments.dim());
  if (!out) fail(ErrorCode::IoError, "failed to write checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[sizeof(kMagic)] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail(ErrorCode::IoError, "not a policy checkpoint");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    fail(ErrorCode::IoError, "unsupported checkpoint version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(read_string(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoError, std::string("corrupt checkpoint header: ") + e.what());
  }
  CheckpointMeta meta;
  PolicyConfig cfg;
  try {
    const auto& m = header.at("meta");
    meta.task_name = m.at("task_name").get<std::string>();
    meta.num_labels = m.at("num_labels").get<std::size_t>();
    meta.num_slots = m.at("num_slots").get<std::size_t>();
    meta.pool_size = m.at("pool_size").get<std::size_t>();
    meta.num_verbalizers = m.at("num_verbalizers").get<std::size_t>();
    meta.horizon = m.at("horizon").get<std::size_t>();
    const auto& p = header.at("policy");
    cfg.obs_dim = p.at("obs_dim").get<std::size_t>();
    cfg.candidate_dim = p.at("candidate_dim").get<std::size_t>();
    cfg.history_capacity = p.at("history_capacity").get<std::size_t>();
    cfg.latent = p.at("latent").get<std::size_t>();
    cfg.heads = p.at("heads").get<std::size_t>();
    cfg.layers = p.at("layers").get<std::size_t>();
    cfg.mlp_ratio = p.at("mlp_ratio").get<std::size_t>();
    cfg.head_init_scale = p.at("head_init_scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoError, std::string("incomplete checkpoint header: ") + e.what());
  }
  PolicyParams params(cfg);
  const auto count = read_pod<std::uint32_t>(in);
  if (count != params.size()) fail(ErrorCode::IoError, "checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = read_string(in);
    const auto rank = read_pod<std::uint32_t>(in);
    const auto rows = read_pod<std::uint64_t>(in);
    const auto cols = read_pod<std::uint64_t>(in);
    if (name != params.name(i) || rank != 2 || rows != static_cast<std::uint64_t>(params[i].rows()) ||
        cols != static_cast<std::uint64_t>(params[i].cols()))
      fail(ErrorCode::IoError, "checkpoint tensor '" + name + "' does not match '" + params.name(i) + "'");
    read_doubles(in, params[i].data(), static_cast<std::size_t>(params[i].size()));
  }
  const auto mcount = read_pod<double>(in);
  const auto mdim = read_pod<std::uint64_t>(in);
  if (mdim != cfg.obs_dim) fail(ErrorCode::IoError, "checkpoint moment width mismatch");
  Vector mean(idx(mdim)), m2(idx(mdim));
  read_doubles(in, mean.data(), mdim);
  read_doubles(in, m2.data(), mdim);
  RunningMoments moments(mdim);
  moments.assign(mcount, std::move(mean), std::move(m2));
  return Checkpoint{std::move(meta), std::move(params), std::move(moments)};
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write checkpoint " + path.string());
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace promptedit
