#pragma once

// Linear probes on hidden states and single-state activation patching.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "groklab/datagen.hpp"
#include "groklab/model.hpp"
#include "groklab/rng.hpp"

namespace groklab {

/// Forward pass over the query (or the full teacher-forced sequence) with capture.
HiddenCache<float> extract_hidden(const Parameters& params, const Example& ex, int eos,
                                  bool with_target = false);

enum class PositionRole : std::uint8_t { final_query_token, entity_token };
enum class ProbeTarget : std::uint8_t { answer_entity, fact_value, token_identity };

std::string_view to_string(PositionRole r);
std::string_view to_string(ProbeTarget t);
PositionRole parse_position_role(std::string_view s);
ProbeTarget parse_probe_target(std::string_view s);

struct ProbeSpec {
  int layer = 0;
  PositionRole role = PositionRole::final_query_token;
  int entity_slot = 0;  // i for entity_token(i)
  ProbeTarget target = ProbeTarget::answer_entity;
};

struct ProbeData {
  Eigen::MatrixXd features;  // n x d
  std::vector<int> labels;   // class index within the target section
  int n_classes = 0;
};

/// Query position read by a probe, or nullopt when the example has no such slot.
std::optional<int> probe_position(const Example& ex, const ProbeSpec& spec);

/// Class index for the probe target: entity index, value offset or token id.
std::optional<int> probe_label(const Example& ex, const ProbeSpec& spec, const Vocabulary& vocab);

ProbeData build_probe_data(const Parameters& params, std::span<const Example> examples,
                           const ProbeSpec& spec, const Vocabulary& vocab);

struct ProbeConfig {
  double l2 = 1e-4;
  int iterations = 500;
  double step_size = 0.5;
  double train_fraction = 0.8;
  std::uint64_t seed = 7;
  bool shuffle_labels = false;  // permutation null
};

struct ProbeResult {
  ProbeSpec spec;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  int n_classes = 0;
  double chance = 0.0;        // sum_c P(pred = c) P(test label = c)
  double chance_sigma = 0.0;  // binomial standard deviation of the chance rate
  Eigen::MatrixXd weights;    // d x classes, applied to standardized features
  Eigen::RowVectorXd bias;
  Eigen::RowVectorXd mean, scale;
};

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features with an L2 penalty and a seeded train/test split.
ProbeResult train_probe(const ProbeData& data, const ProbeConfig& config, ProbeSpec spec = {});

std::vector<int> probe_predict(const ProbeResult& probe, const Eigen::MatrixXd& features);

// Causal tracing -------------------------------------------------------------

struct PatchPair {
  Example clean;
  Example corrupt;  // query and answer only
  int corrupted_position = -1;
  int pair_id = 0;
};

/// Replaces one query token so that the gold answer changes: an entity
/// swapped for another entity of the same split (comparison, sorting,
/// composition) or a condition value (intersection). Returns nullopt when no
/// such replacement exists.
std::optional<PatchPair> make_patch_pair(const Example& clean, const Bundle& bundle, Pcg32& rng,
                                         int pair_id = 0);

/// Up to `max_pairs` corruption pairs from `examples`, all with the sequence
/// length of the first accepted pair.
std::vector<PatchPair> collect_patch_pairs(std::span<const Example> examples, const Bundle& bundle,
                                           int max_pairs, Pcg32& rng);

struct PatchScoring {
  std::vector<int> clean_sequence;
  std::vector<int> corrupt_sequence;
  std::vector<int> answer_positions;  // positions of the gold answer tokens
};

/// Both queries followed by the clean gold continuation.
PatchScoring patch_scoring(const PatchPair& pair, int eos);

/// Sum of log p(answer token) at the answer positions.
double answer_logprob(const Matrix<float>& logits, const PatchScoring& s,
                      const std::vector<int>& tokens);

/// clean log-prob minus the log-prob after copying the corrupt run's state at
/// (layer, position) into the clean run.
double causal_patch(const Parameters& params, const PatchScoring& s, int layer, int position);

struct EffectGrid {
  Eigen::MatrixXd effects;  // layers x positions
  std::vector<int> layers;
  std::vector<int> positions;
  std::vector<std::string> position_labels;
  double clean_logprob = 0.0;
  double corrupt_logprob = 0.0;
  std::vector<int> pair_ids;
};

/// Token-role labels over query ++ trace ++ answer ++ eos (e.g. a, q, e1, v1, ans).
std::vector<std::string> role_labels(const Example& ex, Mode mode);

/// Mean effect per cell over the pairs, which must share one sequence length.
/// Empty layer / position lists mean all of them.
EffectGrid patch_grid(const Parameters& params, std::span<const PatchPair> pairs, Mode mode, int eos,
                      std::vector<int> layers = {}, std::vector<int> positions = {});

std::string grid_csv(const EffectGrid& grid);

}  // namespace groklab
