#pragma once

// Decoder-only pre-norm transformer with learned absolute positions, GELU
// MLP (4x), exact softmax attention and a hand-written backward pass.
//
// Activations are row-major (positions x hidden). Every routine is a template
// over the scalar type; float is the training default and double is used by
// gradient checks.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace groklab {

struct ModelConfig {
  int n_layers = 2;
  int hidden_dim = 64;
  int n_heads = 4;
  int context_len = 64;
  int vocab_size = 0;
  double layernorm_eps = 1e-5;
  double init_scale = 1.0;
  bool tied_head = false;

  [[nodiscard]] int head_dim() const { return hidden_dim / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  /// "tiny" (2x16x2), "desk" (2x64x4), "small" (4x128x4), "full" (12x768x12).
  static ModelConfig preset(std::string_view name, int vocab_size, int context_len);
};

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Vectors (gains, biases) are stored as 1 x n matrices so every parameter
/// can be visited uniformly.
template <typename T>
struct BlockWeights {
  Matrix<T> ln1_gain, ln1_bias;
  Matrix<T> qkv, qkv_bias;          // d x 3d
  Matrix<T> attn_out, attn_out_bias;  // d x d
  Matrix<T> ln2_gain, ln2_bias;
  Matrix<T> mlp_in, mlp_in_bias;    // d x 4d
  Matrix<T> mlp_out, mlp_out_bias;  // 4d x d
};

template <typename T>
struct BasicParameters {
  ModelConfig config;
  Matrix<T> token_embedding;     // V x d
  Matrix<T> position_embedding;  // C x d
  std::vector<BlockWeights<T>> blocks;
  Matrix<T> final_gain, final_bias;
  Matrix<T> head;       // d x V, empty when tied
  Matrix<T> head_bias;  // 1 x V

  /// Allocates zero tensors with the shapes implied by `config`.
  static BasicParameters zeros(const ModelConfig& config);

  /// (name, tensor) pairs in a fixed order; names are stable checkpoint keys.
  std::vector<std::pair<std::string, Matrix<T>*>> tensors();
  std::vector<std::pair<std::string, const Matrix<T>*>> tensors() const;

  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] bool all_finite() const;

  template <typename U>
  BasicParameters<U> cast() const;
};

using Parameters = BasicParameters<float>;

/// Closed-form parameter count for a configuration.
std::size_t parameter_count(const ModelConfig& config);

/// Hidden states h^(l): states[0] is token + position embedding, states[l]
/// is the residual stream after block l.
template <typename T>
struct HiddenCache {
  std::vector<Matrix<T>> states;  // n_layers + 1 entries, each length x d
};

template <typename T>
BasicParameters<T> init_params(const ModelConfig& config, std::uint64_t seed);

/// Logits for every position (length x vocab). Optionally records h^(l).
template <typename T>
Matrix<T> forward(const BasicParameters<T>& params, std::span<const int> tokens,
                  HiddenCache<T>* capture = nullptr);

/// Resumes the forward pass from a full layer-`layer` hidden state.
template <typename T>
Matrix<T> forward_from(const BasicParameters<T>& params, int layer, const Matrix<T>& state);

/// A supervised sequence: loss_mask[t] marks tokens that are prediction targets.
struct TrainSequence {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;
};

template <typename T>
struct LossAndGrads {
  T loss{};
  std::size_t n_targets = 0;
  BasicParameters<T> grads;
};

/// Mean next-token negative log-likelihood over masked positions of the batch.
template <typename T>
LossAndGrads<T> loss_and_grads(const BasicParameters<T>& params,
                               std::span<const TrainSequence> batch);

template <typename T>
T batch_loss(const BasicParameters<T>& params, std::span<const TrainSequence> batch);

/// Greedy argmax decoding; returns only the generated tokens (stop token included
/// when produced).
template <typename T>
std::vector<int> generate_greedy(const BasicParameters<T>& params, std::span<const int> prompt,
                                 int max_new, int stop_token);

/// log softmax(logits_row)[token]
template <typename T>
T log_prob(const Matrix<T>& logits, int row, int token);

// Checkpoints -----------------------------------------------------------------

struct NamedTensor {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> data;
};

/// Binary layout (little-endian): magic "GROKCKPT", u32 version, config
/// (u32 n_layers, hidden_dim, n_heads, context_len, vocab_size; f64 eps,
/// f64 init_scale; u32 tied), u64 step, u32 tensor count, then per tensor:
/// u32 name length, name bytes, u32 rows, u32 cols, rows*cols f32 row-major.
struct Checkpoint {
  ModelConfig config;
  std::uint64_t step = 0;
  std::vector<NamedTensor> tensors;

  static Checkpoint from_params(const Parameters& params, std::uint64_t step);
  [[nodiscard]] Parameters to_params() const;
  [[nodiscard]] const NamedTensor* find(std::string_view name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace groklab
