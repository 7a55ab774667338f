#pragma once

// AdamW training loop with periodic greedy evaluation, checkpointing and
// token-based FLOP accounting.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "groklab/datagen.hpp"
#include "groklab/metrics.hpp"
#include "groklab/model.hpp"

namespace groklab {

struct TrainConfig {
  std::int64_t max_steps = 5000;
  int batch_size = 64;
  std::int64_t eval_every = 250;
  std::int64_t checkpoint_every = 1000;
  double learning_rate = 1e-3;
  std::int64_t warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  int eval_samples = 2000;          // seeded subsample size per evaluation split
  bool full_sequence_loss = false;  // also supervise query tokens

  void validate() const;
  bool operator==(const TrainConfig&) const = default;

  /// "desk" (5k steps, batch 64), "small" (20k, 128), "full" (200k, 256).
  static TrainConfig preset(std::string_view name);
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// query ++ trace ++ answer ++ eos, with the loss on the continuation only.
TrainSequence encode(const Example& ex, int eos, bool full_sequence_loss = false);

/// Linear warmup to the base rate over warmup_steps updates, then constant.
double learning_rate_at(const TrainConfig& config, std::int64_t update);

/// 6 * parameter_count * tokens.
double estimate_flops(const ModelConfig& config, double tokens);

struct AdamState {
  Parameters m;
  Parameters v;
  std::int64_t t = 0;

  static AdamState zeros(const ModelConfig& config);
};

/// Decoupled weight decay, applied to matrices with more than one row.
void adamw_step(Parameters& params, const Parameters& grads, AdamState& state,
                const TrainConfig& config, double lr);

struct EvalOutput {
  AccuracyRecord record;
  std::vector<ScoreFlags> flags;
  double loss = 0.0;  // teacher-forced mean loss over the set
};

/// Greedy-decodes every example and scores it. Examples must share task and mode.
EvalOutput evaluate(const Parameters& params, std::span<const Example> examples, Mode mode, int eos,
                    std::string split, int batch_size = 64);

struct EvalSet {
  std::string name;
  std::vector<Example> examples;
};

/// "train" (composed train), "train_atomic", "id_val" and "ood_test", each a
/// seeded subsample of at most `samples` examples. Empty sets are omitted.
std::vector<EvalSet> make_eval_sets(const Dataset& data, int samples, std::uint64_t seed);

struct EvalPoint {
  std::int64_t step = 0;
  std::string split;
  AccuracyRecord acc;
  double loss = 0.0;
  double rel_flops = 0.0;
};

struct LossPoint {
  std::int64_t step = 0;
  double loss = 0.0;
  double rel_flops = 0.0;
};

struct RunLog {
  std::vector<EvalPoint> evals;
  std::vector<LossPoint> train_loss;
  nlohmann::json manifest = nlohmann::json::object();

  [[nodiscard]] LearningCurve curve(std::string_view split) const;
  [[nodiscard]] std::vector<std::string> splits() const;

  /// runlog.csv: step,split,answer_acc,trace_acc,full_acc,loss,rel_flops
  /// (plus strict_answer_acc,n,task,mode); trainloss.csv: step,loss,rel_flops.
  void write(const std::string& dir) const;
  static RunLog read(const std::string& dir);
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::int64_t step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  [[nodiscard]] std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TrainOptions {
  std::string run_dir;  // empty: keep everything in memory
  bool resume = true;
  nlohmann::json manifest_extra = nlohmann::json::object();
  std::function<void(const EvalPoint&, std::span<const ScoreFlags>)> on_eval;
  std::function<void(std::int64_t step, double loss)> on_step;
};

struct TrainResult {
  Parameters params;
  RunLog log;
  std::int64_t resumed_from = 0;
};

/// Trains on data.train, sampling batches uniformly with replacement from a
/// generator keyed by (seed, step), so a resumed run repeats the same batches.
/// With a run_dir, writes ckpt/step_<n>.ckpt, ckpt/last.ckpt (with optimizer
/// state), runlog.csv, trainloss.csv and train_manifest.json.
TrainResult train(const Dataset& data, int eos, const ModelConfig& model_config,
                  const TrainConfig& config, const TrainOptions& options = {});

void save_training_checkpoint(const std::string& path, const Parameters& params,
                              const AdamState& state);
std::pair<Parameters, AdamState> load_training_checkpoint(const std::string& path);

}  // namespace groklab
