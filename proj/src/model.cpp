#include "groklab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "groklab/rng.hpp"

namespace groklab {

void ModelConfig::validate() const {
  if (n_layers <= 0 || hidden_dim <= 0 || n_heads <= 0 || context_len <= 0 || vocab_size <= 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (hidden_dim % n_heads != 0) {
    throw std::invalid_argument("hidden_dim must be divisible by n_heads");
  }
  if (!(layernorm_eps > 0.0)) throw std::invalid_argument("layernorm_eps must be positive");
  if (!(init_scale >= 0.0)) throw std::invalid_argument("init_scale must be non-negative");
}

ModelConfig ModelConfig::preset(std::string_view name, int vocab_size, int context_len) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.context_len = context_len;
  if (name == "tiny") {
    c.n_layers = 2, c.hidden_dim = 16, c.n_heads = 2;
  } else if (name == "desk") {
    c.n_layers = 2, c.hidden_dim = 64, c.n_heads = 4;
  } else if (name == "small") {
    c.n_layers = 4, c.hidden_dim = 128, c.n_heads = 4;
  } else if (name == "full") {
    c.n_layers = 12, c.hidden_dim = 768, c.n_heads = 12;
  } else {
    throw std::invalid_argument("unknown model preset: " + std::string(name));
  }
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim;
  const std::size_t v = c.vocab_size;
  const std::size_t per_block = 12 * d * d + 13 * d;
  return v * d + static_cast<std::size_t>(c.context_len) * d + c.n_layers * per_block + 2 * d +
         (c.tied_head ? 0 : d * v) + v;
}

// ---------------------------------------------------------------------------
// Parameter containers

template <typename T>
BasicParameters<T> BasicParameters<T>::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.hidden_dim;
  const int v = config.vocab_size;
  BasicParameters p;
  p.config = config;
  p.token_embedding = Matrix<T>::Zero(v, d);
  p.position_embedding = Matrix<T>::Zero(config.context_len, d);
  p.blocks.resize(config.n_layers);
  for (auto& b : p.blocks) {
    b.ln1_gain = Matrix<T>::Zero(1, d);
    b.ln1_bias = Matrix<T>::Zero(1, d);
    b.qkv = Matrix<T>::Zero(d, 3 * d);
    b.qkv_bias = Matrix<T>::Zero(1, 3 * d);
    b.attn_out = Matrix<T>::Zero(d, d);
    b.attn_out_bias = Matrix<T>::Zero(1, d);
    b.ln2_gain = Matrix<T>::Zero(1, d);
    b.ln2_bias = Matrix<T>::Zero(1, d);
    b.mlp_in = Matrix<T>::Zero(d, 4 * d);
    b.mlp_in_bias = Matrix<T>::Zero(1, 4 * d);
    b.mlp_out = Matrix<T>::Zero(4 * d, d);
    b.mlp_out_bias = Matrix<T>::Zero(1, d);
  }
  p.final_gain = Matrix<T>::Zero(1, d);
  p.final_bias = Matrix<T>::Zero(1, d);
  p.head = config.tied_head ? Matrix<T>(0, 0) : Matrix<T>::Zero(d, v);
  p.head_bias = Matrix<T>::Zero(1, v);
  return p;
}

namespace {

template <typename P, typename M>
std::vector<std::pair<std::string, M*>> collect(P& p) {
  std::vector<std::pair<std::string, M*>> out;
  out.emplace_back("token_embedding", &p.token_embedding);
  out.emplace_back("position_embedding", &p.position_embedding);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "block" + std::to_string(l) + ".";
    out.emplace_back(pre + "ln1_gain", &b.ln1_gain);
    out.emplace_back(pre + "ln1_bias", &b.ln1_bias);
    out.emplace_back(pre + "qkv", &b.qkv);
    out.emplace_back(pre + "qkv_bias", &b.qkv_bias);
    out.emplace_back(pre + "attn_out", &b.attn_out);
    out.emplace_back(pre + "attn_out_bias", &b.attn_out_bias);
    out.emplace_back(pre + "ln2_gain", &b.ln2_gain);
    out.emplace_back(pre + "ln2_bias", &b.ln2_bias);
    out.emplace_back(pre + "mlp_in", &b.mlp_in);
    out.emplace_back(pre + "mlp_in_bias", &b.mlp_in_bias);
    out.emplace_back(pre + "mlp_out", &b.mlp_out);
    out.emplace_back(pre + "mlp_out_bias", &b.mlp_out_bias);
  }
  out.emplace_back("final_gain", &p.final_gain);
  out.emplace_back("final_bias", &p.final_bias);
  if (!p.config.tied_head) out.emplace_back("head", &p.head);
  out.emplace_back("head_bias", &p.head_bias);
  return out;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> BasicParameters<T>::tensors() {
  return collect<BasicParameters<T>, Matrix<T>>(*this);
}

template <typename T>
std::vector<std::pair<std::string, const Matrix<T>*>> BasicParameters<T>::tensors() const {
  return collect<const BasicParameters<T>, const Matrix<T>>(*this);
}

template <typename T>
std::size_t BasicParameters<T>::count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

template <typename T>
bool BasicParameters<T>::all_finite() const {
  for (const auto& [name, m] : tensors()) {
    if (!m->allFinite()) return false;
  }
  return true;
}

template <typename T>
template <typename U>
BasicParameters<U> BasicParameters<T>::cast() const {
  auto out = BasicParameters<U>::zeros(config);
  auto src = tensors();
  auto dst = out.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
  return out;
}

template <typename T>
BasicParameters<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  auto p = BasicParameters<T>::zeros(config);
  auto rng = make_rng(seed, "init");
  auto gaussian = [&](Matrix<T>& m, double fan_in) {
    const double std = config.init_scale / std::sqrt(fan_in);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * rng.normal());
  };
  const double d = config.hidden_dim;
  // Embeddings are lookups (fan-in 1).
  gaussian(p.token_embedding, 1.0);
  gaussian(p.position_embedding, 1.0);
  for (auto& b : p.blocks) {
    b.ln1_gain.setOnes();
    b.ln2_gain.setOnes();
    gaussian(b.qkv, d);
    gaussian(b.attn_out, d);
    gaussian(b.mlp_in, d);
    gaussian(b.mlp_out, 4.0 * d);
  }
  p.final_gain.setOnes();
  if (!config.tied_head) gaussian(p.head, d);
  return p;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
using Column = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct NormCache {
  Matrix<T> xhat;
  Column<T> rstd;
};

template <typename T>
void layernorm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, T eps,
               Matrix<T>& out, NormCache<T>& cache) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = x.cols();
  out.resize(rows, d);
  cache.xhat.resize(rows, d);
  cache.rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const T var = centered.square().mean();
    const T rstd = T(1) / std::sqrt(var + eps);
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = centered * rstd;
    out.row(r) = cache.xhat.row(r).array() * gain.row(0).array() + bias.row(0).array();
  }
}

template <typename T>
void layernorm_backward(const Matrix<T>& dout, const Matrix<T>& gain, const NormCache<T>& cache,
                        Matrix<T>& dx, Matrix<T>& dgain, Matrix<T>& dbias) {
  const Eigen::Index rows = dout.rows();
  dx.resize(rows, dout.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto xhat = cache.xhat.row(r).array();
    const auto dxhat = (dout.row(r).array() * gain.row(0).array()).eval();
    dgain.row(0).array() += dout.row(r).array() * xhat;
    dbias.row(0) += dout.row(r);
    const T m1 = dxhat.mean();
    const T m2 = (dxhat * xhat).mean();
    dx.row(r) = cache.rstd(r) * (dxhat - m1 - xhat * m2);
  }
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
struct BlockCache {
  Matrix<T> input;
  NormCache<T> ln1;
  Matrix<T> ln1_out;
  Matrix<T> qkv;
  std::vector<Matrix<T>> probs;  // per (sequence, head), seq_len x seq_len
  Matrix<T> attn;
  Matrix<T> mid;
  NormCache<T> ln2;
  Matrix<T> ln2_out;
  Matrix<T> fc_pre;
  Matrix<T> fc_tanh;
  Matrix<T> fc_act;
};

/// Applies one block to `x` (n_seq * seq_len rows) in place.
template <typename T>
void run_block(const BlockWeights<T>& w, const ModelConfig& cfg, int n_seq, int seq_len,
               Matrix<T>& x, BlockCache<T>& c) {
  const int d = cfg.hidden_dim;
  const int heads = cfg.n_heads;
  const int hd = cfg.head_dim();
  const T eps = static_cast<T>(cfg.layernorm_eps);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  c.input = x;
  layernorm(x, w.ln1_gain, w.ln1_bias, eps, c.ln1_out, c.ln1);
  c.qkv.noalias() = c.ln1_out * w.qkv;
  c.qkv.rowwise() += w.qkv_bias.row(0);

  c.attn.setZero(x.rows(), d);
  c.probs.resize(static_cast<std::size_t>(n_seq) * heads);
  for (int s = 0; s < n_seq; ++s) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(s) * seq_len;
    for (int h = 0; h < heads; ++h) {
      const auto q = c.qkv.block(r0, h * hd, seq_len, hd);
      const auto k = c.qkv.block(r0, d + h * hd, seq_len, hd);
      const auto v = c.qkv.block(r0, 2 * d + h * hd, seq_len, hd);
      Matrix<T>& p = c.probs[static_cast<std::size_t>(s) * heads + h];
      p.noalias() = q * k.transpose();
      for (int i = 0; i < seq_len; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) mx = std::max(mx, p(i, j) * scale);
        T sum = 0;
        for (int j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) * scale - mx);
          sum += p(i, j);
        }
        for (int j = 0; j <= i; ++j) p(i, j) /= sum;
        for (int j = i + 1; j < seq_len; ++j) p(i, j) = 0;
      }
      c.attn.block(r0, h * hd, seq_len, hd).noalias() = p * v;
    }
  }
  c.mid = c.input;
  c.mid.noalias() += c.attn * w.attn_out;
  c.mid.rowwise() += w.attn_out_bias.row(0);

  layernorm(c.mid, w.ln2_gain, w.ln2_bias, eps, c.ln2_out, c.ln2);
  c.fc_pre.noalias() = c.ln2_out * w.mlp_in;
  c.fc_pre.rowwise() += w.mlp_in_bias.row(0);
  {
    const auto z = c.fc_pre.array();
    c.fc_tanh = (kGeluC<T> * (z + T(0.044715) * z.cube())).tanh().matrix();
    c.fc_act = (T(0.5) * z * (T(1) + c.fc_tanh.array())).matrix();
  }
  x = c.mid;
  x.noalias() += c.fc_act * w.mlp_out;
  x.rowwise() += w.mlp_out_bias.row(0);
}

/// Backpropagates through one block; `dx` holds d(out) on entry and d(input) on exit.
template <typename T>
void block_backward(const BlockWeights<T>& w, const ModelConfig& cfg, int n_seq, int seq_len,
                    const BlockCache<T>& c, Matrix<T>& dx, BlockWeights<T>& g) {
  const int d = cfg.hidden_dim;
  const int heads = cfg.n_heads;
  const int hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  // MLP branch
  g.mlp_out.noalias() += c.fc_act.transpose() * dx;
  g.mlp_out_bias.row(0) += dx.colwise().sum();
  Matrix<T> dpre = dx * w.mlp_out.transpose();
  {
    const auto z = c.fc_pre.array();
    const auto t = c.fc_tanh.array();
    dpre.array() *= T(0.5) * (T(1) + t) +
                    T(0.5) * z * (T(1) - t.square()) * kGeluC<T> * (T(1) + T(3 * 0.044715) * z.square());
  }
  g.mlp_in.noalias() += c.ln2_out.transpose() * dpre;
  g.mlp_in_bias.row(0) += dpre.colwise().sum();
  const Matrix<T> dln2 = dpre * w.mlp_in.transpose();
  Matrix<T> dmid_norm;
  layernorm_backward(dln2, w.ln2_gain, c.ln2, dmid_norm, g.ln2_gain, g.ln2_bias);
  Matrix<T> dmid = dx + dmid_norm;

  // Attention branch
  g.attn_out.noalias() += c.attn.transpose() * dmid;
  g.attn_out_bias.row(0) += dmid.colwise().sum();
  const Matrix<T> dattn = dmid * w.attn_out.transpose();
  Matrix<T> dqkv = Matrix<T>::Zero(c.qkv.rows(), 3 * d);
  for (int s = 0; s < n_seq; ++s) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(s) * seq_len;
    for (int h = 0; h < heads; ++h) {
      const auto q = c.qkv.block(r0, h * hd, seq_len, hd);
      const auto k = c.qkv.block(r0, d + h * hd, seq_len, hd);
      const auto v = c.qkv.block(r0, 2 * d + h * hd, seq_len, hd);
      const Matrix<T>& p = c.probs[static_cast<std::size_t>(s) * heads + h];
      const auto dout = dattn.block(r0, h * hd, seq_len, hd);
      Matrix<T> dp = dout * v.transpose();
      dqkv.block(r0, 2 * d + h * hd, seq_len, hd).noalias() = p.transpose() * dout;
      const Column<T> row_dot = (dp.array() * p.array()).rowwise().sum();
      Matrix<T> ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix() * scale;
      dqkv.block(r0, h * hd, seq_len, hd).noalias() = ds * k;
      dqkv.block(r0, d + h * hd, seq_len, hd).noalias() = ds.transpose() * q;
    }
  }
  g.qkv.noalias() += c.ln1_out.transpose() * dqkv;
  g.qkv_bias.row(0) += dqkv.colwise().sum();
  const Matrix<T> dln1 = dqkv * w.qkv.transpose();
  Matrix<T> din_norm;
  layernorm_backward(dln1, w.ln1_gain, c.ln1, din_norm, g.ln1_gain, g.ln1_bias);
  dx = dmid + din_norm;
}

template <typename T>
struct ForwardTrace {
  int n_seq = 0;
  int seq_len = 0;
  std::vector<BlockCache<T>> blocks;
  NormCache<T> final_norm;
  Matrix<T> final_out;
  Matrix<T> logits;
};

template <typename T>
void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.context_len) {
    throw std::invalid_argument("sequence of length " + std::to_string(tokens.size()) +
                                " exceeds context length " + std::to_string(cfg.context_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw std::invalid_argument("token id out of range: " + std::to_string(t));
    }
  }
}

template <typename T>
Matrix<T> embed(const BasicParameters<T>& p, const std::vector<std::span<const int>>& seqs,
                int seq_len) {
  const int d = p.config.hidden_dim;
  Matrix<T> x = Matrix<T>::Zero(static_cast<Eigen::Index>(seqs.size()) * seq_len, d);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    for (int t = 0; t < seq_len; ++t) {
      const int tok = t < static_cast<int>(seqs[s].size()) ? seqs[s][t] : 0;
      x.row(static_cast<Eigen::Index>(s) * seq_len + t) =
          p.token_embedding.row(tok) + p.position_embedding.row(t);
    }
  }
  return x;
}

template <typename T>
Matrix<T> output_logits(const BasicParameters<T>& p, const Matrix<T>& x, ForwardTrace<T>& tr) {
  layernorm(x, p.final_gain, p.final_bias, static_cast<T>(p.config.layernorm_eps), tr.final_out,
            tr.final_norm);
  Matrix<T> logits = p.config.tied_head ? Matrix<T>(tr.final_out * p.token_embedding.transpose())
                                        : Matrix<T>(tr.final_out * p.head);
  logits.rowwise() += p.head_bias.row(0);
  return logits;
}

/// Runs the batch forward pass from layer `start` (0 = embeddings already in x).
template <typename T>
void run_layers(const BasicParameters<T>& p, int start, Matrix<T>& x, ForwardTrace<T>& tr,
                HiddenCache<T>* capture) {
  tr.blocks.resize(p.config.n_layers);
  for (int l = start; l < p.config.n_layers; ++l) {
    run_block(p.blocks[l], p.config, tr.n_seq, tr.seq_len, x, tr.blocks[l]);
    if (capture) capture->states.push_back(x);
  }
  tr.logits = output_logits(p, x, tr);
}

template <typename T>
ForwardTrace<T> forward_batch(const BasicParameters<T>& p,
                              const std::vector<std::span<const int>>& seqs) {
  ForwardTrace<T> tr;
  tr.n_seq = static_cast<int>(seqs.size());
  for (const auto& s : seqs) {
    check_tokens<T>(p.config, s);
    tr.seq_len = std::max(tr.seq_len, static_cast<int>(s.size()));
  }
  Matrix<T> x = embed(p, seqs, tr.seq_len);
  run_layers<T>(p, 0, x, tr, nullptr);
  return tr;
}

template <typename T>
T log_sum_exp_row(const Matrix<T>& m, Eigen::Index r) {
  const T mx = m.row(r).maxCoeff();
  return mx + std::log((m.row(r).array() - mx).exp().sum());
}

}  // namespace

// ---------------------------------------------------------------------------
// Public forward / loss / decoding

template <typename T>
Matrix<T> forward(const BasicParameters<T>& params, std::span<const int> tokens,
                  HiddenCache<T>* capture) {
  check_tokens<T>(params.config, tokens);
  ForwardTrace<T> tr;
  tr.n_seq = 1;
  tr.seq_len = static_cast<int>(tokens.size());
  Matrix<T> x = embed(params, {tokens}, tr.seq_len);
  if (capture) {
    capture->states.clear();
    capture->states.push_back(x);
  }
  run_layers(params, 0, x, tr, capture);
  return std::move(tr.logits);
}

template <typename T>
Matrix<T> forward_from(const BasicParameters<T>& params, int layer, const Matrix<T>& state) {
  if (layer < 0 || layer > params.config.n_layers) {
    throw std::invalid_argument("layer index out of range: " + std::to_string(layer));
  }
  if (state.cols() != params.config.hidden_dim || state.rows() < 1 ||
      state.rows() > params.config.context_len) {
    throw std::invalid_argument("hidden state has the wrong shape");
  }
  ForwardTrace<T> tr;
  tr.n_seq = 1;
  tr.seq_len = static_cast<int>(state.rows());
  Matrix<T> x = state;
  run_layers<T>(params, layer, x, tr, nullptr);
  return std::move(tr.logits);
}

template <typename T>
T log_prob(const Matrix<T>& logits, int row, int token) {
  return logits(row, token) - log_sum_exp_row(logits, row);
}

namespace {

template <typename T>
std::vector<std::span<const int>> spans_of(std::span<const TrainSequence> batch) {
  std::vector<std::span<const int>> seqs;
  seqs.reserve(batch.size());
  for (const auto& s : batch) {
    if (s.loss_mask.size() != s.tokens.size()) {
      throw std::invalid_argument("loss mask length differs from token length");
    }
    seqs.emplace_back(s.tokens);
  }
  return seqs;
}

/// Mean NLL and (optionally) d loss / d logits.
template <typename T>
T masked_nll(const Matrix<T>& logits, std::span<const TrainSequence> batch, int seq_len,
             std::size_t& n_targets, Matrix<T>* dlogits) {
  n_targets = 0;
  for (const auto& s : batch) {
    for (std::size_t t = 1; t < s.tokens.size(); ++t) n_targets += s.loss_mask[t] ? 1 : 0;
  }
  if (n_targets == 0) throw std::invalid_argument("loss mask selects no target tokens");
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  const T inv = T(1) / static_cast<T>(n_targets);
  T total = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    for (std::size_t t = 1; t < seq.tokens.size(); ++t) {
      if (!seq.loss_mask[t]) continue;
      const Eigen::Index r = static_cast<Eigen::Index>(s) * seq_len + static_cast<Eigen::Index>(t) - 1;
      const T lse = log_sum_exp_row(logits, r);
      total += lse - logits(r, seq.tokens[t]);
      if (dlogits) {
        dlogits->row(r) = ((logits.row(r).array() - lse).exp() * inv).matrix();
        (*dlogits)(r, seq.tokens[t]) -= inv;
      }
    }
  }
  return total * inv;
}

}  // namespace

template <typename T>
T batch_loss(const BasicParameters<T>& params, std::span<const TrainSequence> batch) {
  const auto tr = forward_batch(params, spans_of<T>(batch));
  std::size_t n = 0;
  return masked_nll<T>(tr.logits, batch, tr.seq_len, n, nullptr);
}

template <typename T>
LossAndGrads<T> loss_and_grads(const BasicParameters<T>& params,
                               std::span<const TrainSequence> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const auto seqs = spans_of<T>(batch);
  auto tr = forward_batch(params, seqs);

  LossAndGrads<T> out;
  out.grads = BasicParameters<T>::zeros(params.config);
  auto& g = out.grads;
  Matrix<T> dlogits;
  out.loss = masked_nll<T>(tr.logits, batch, tr.seq_len, out.n_targets, &dlogits);

  // Output head
  g.head_bias.row(0) = dlogits.colwise().sum();
  Matrix<T> dfinal;
  if (params.config.tied_head) {
    g.token_embedding.noalias() += dlogits.transpose() * tr.final_out;
    dfinal = dlogits * params.token_embedding;
  } else {
    g.head.noalias() = tr.final_out.transpose() * dlogits;
    dfinal = dlogits * params.head.transpose();
  }
  Matrix<T> dx;
  layernorm_backward(dfinal, params.final_gain, tr.final_norm, dx, g.final_gain, g.final_bias);

  for (int l = params.config.n_layers - 1; l >= 0; --l) {
    block_backward(params.blocks[l], params.config, tr.n_seq, tr.seq_len, tr.blocks[l], dx,
                   g.blocks[l]);
  }

  for (int s = 0; s < tr.n_seq; ++s) {
    const auto& toks = batch[s].tokens;
    for (int t = 0; t < static_cast<int>(toks.size()); ++t) {
      const auto r = static_cast<Eigen::Index>(s) * tr.seq_len + t;
      g.token_embedding.row(toks[t]) += dx.row(r);
      g.position_embedding.row(t) += dx.row(r);
    }
  }
  return out;
}

template <typename T>
std::vector<int> generate_greedy(const BasicParameters<T>& params, std::span<const int> prompt,
                                 int max_new, int stop_token) {
  if (max_new < 0) throw std::invalid_argument("max_new must be non-negative");
  if (static_cast<int>(prompt.size()) + max_new > params.config.context_len) {
    throw std::invalid_argument("prompt plus generation budget exceeds the context length");
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (int i = 0; i < max_new; ++i) {
    const Matrix<T> logits = forward(params, std::span<const int>(seq));
    Eigen::Index best = 0;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    const int tok = static_cast<int>(best);
    out.push_back(tok);
    if (tok == stop_token) break;
    seq.push_back(tok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'G', 'R', 'O', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFU);
  os.write(b, 4);
}
void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFU);
  os.write(b, 8);
}
void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_uint(std::istream& is, int bytes) {
  unsigned char b[8] = {};
  is.read(reinterpret_cast<char*>(b), bytes);
  if (!is) throw std::runtime_error("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
std::uint32_t get_u32(std::istream& is) { return static_cast<std::uint32_t>(get_uint(is, 4)); }
std::uint64_t get_u64(std::istream& is) { return get_uint(is, 8); }
double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace

Checkpoint Checkpoint::from_params(const Parameters& params, std::uint64_t step) {
  Checkpoint ck;
  ck.config = params.config;
  ck.step = step;
  for (const auto& [name, m] : params.tensors()) {
    NamedTensor t{name, static_cast<std::uint32_t>(m->rows()), static_cast<std::uint32_t>(m->cols()),
                  std::vector<float>(m->data(), m->data() + m->size())};
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

Parameters Checkpoint::to_params() const {
  auto p = Parameters::zeros(config);
  for (auto& [name, m] : p.tensors()) {
    const NamedTensor* t = find(name);
    if (!t) throw std::runtime_error("checkpoint is missing tensor " + name);
    if (t->rows != m->rows() || t->cols != m->cols()) {
      throw std::runtime_error("checkpoint tensor " + name + " has the wrong shape");
    }
    std::copy(t->data.begin(), t->data.end(), m->data());
  }
  return p;
}

void Checkpoint::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
    os.write(kMagic, sizeof kMagic);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(config.n_layers));
    put_u32(os, static_cast<std::uint32_t>(config.hidden_dim));
    put_u32(os, static_cast<std::uint32_t>(config.n_heads));
    put_u32(os, static_cast<std::uint32_t>(config.context_len));
    put_u32(os, static_cast<std::uint32_t>(config.vocab_size));
    put_f64(os, config.layernorm_eps);
    put_f64(os, config.init_scale);
    put_u32(os, config.tied_head ? 1U : 0U);
    put_u64(os, step);
    put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      put_u32(os, static_cast<std::uint32_t>(t.name.size()));
      os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      put_u32(os, t.rows);
      put_u32(os, t.cols);
      for (float f : t.data) put_u32(os, std::bit_cast<std::uint32_t>(f));
    }
    if (!os) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  std::rename(tmp.c_str(), path.c_str());
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + 8, kMagic)) {
    throw std::runtime_error("not a groklab checkpoint: " + path);
  }
  if (get_u32(is) != kVersion) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ck;
  ck.config.n_layers = static_cast<int>(get_u32(is));
  ck.config.hidden_dim = static_cast<int>(get_u32(is));
  ck.config.n_heads = static_cast<int>(get_u32(is));
  ck.config.context_len = static_cast<int>(get_u32(is));
  ck.config.vocab_size = static_cast<int>(get_u32(is));
  ck.config.layernorm_eps = get_f64(is);
  ck.config.init_scale = get_f64(is);
  ck.config.tied_head = get_u32(is) != 0;
  ck.step = get_u64(is);
  const std::uint32_t n = get_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name.resize(get_u32(is));
    is.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    t.rows = get_u32(is);
    t.cols = get_u32(is);
    t.data.resize(static_cast<std::size_t>(t.rows) * t.cols);
    for (float& f : t.data) f = std::bit_cast<float>(get_u32(is));
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define GROKLAB_INSTANTIATE(T)                                                                 \
  template struct BasicParameters<T>;                                                          \
  template BasicParameters<T> init_params<T>(const ModelConfig&, std::uint64_t);               \
  template Matrix<T> forward<T>(const BasicParameters<T>&, std::span<const int>,               \
                                HiddenCache<T>*);                                              \
  template Matrix<T> forward_from<T>(const BasicParameters<T>&, int, const Matrix<T>&);        \
  template LossAndGrads<T> loss_and_grads<T>(const BasicParameters<T>&,                        \
                                             std::span<const TrainSequence>);                  \
  template T batch_loss<T>(const BasicParameters<T>&, std::span<const TrainSequence>);         \
  template std::vector<int> generate_greedy<T>(const BasicParameters<T>&, std::span<const int>, \
                                               int, int);                                      \
  template T log_prob<T>(const Matrix<T>&, int, int);

GROKLAB_INSTANTIATE(float)
GROKLAB_INSTANTIATE(double)

template BasicParameters<double> BasicParameters<float>::cast<double>() const;
template BasicParameters<float> BasicParameters<double>::cast<float>() const;
template BasicParameters<float> BasicParameters<float>::cast<float>() const;
template BasicParameters<double> BasicParameters<double>::cast<double>() const;

#undef GROKLAB_INSTANTIATE

}  // namespace groklab
