#pragma once

// Final-answer / trace / full-sequence scoring of generated continuations.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "groklab/example.hpp"

namespace groklab {

struct ScoreFlags {
  bool answer_ok = false;
  std::optional<bool> trace_ok;  // not applicable in direct mode and for atomic facts
  std::optional<bool> full_ok;
  double answer_partial = 0.0;
  bool terminated = false;  // an eos was generated
};

/// Scores the post-prompt generation against the gold example. The trace is the
/// first |gold.trace| generated tokens, the answer is everything between the
/// trace and the first eos.
ScoreFlags score_example(std::span<const int> generated, const Example& gold, Mode mode, int eos);

struct AccuracyRecord {
  double answer_acc = 0.0;         // mean partial score for sorting
  double strict_answer_acc = 0.0;  // exact answer match for every task
  std::optional<double> trace_acc;
  std::optional<double> full_acc;
  std::size_t n = 0;
  std::size_t unterminated = 0;
  Task task = Task::comparison;
  std::string split;
  Mode mode = Mode::direct;

  bool operator==(const AccuracyRecord&) const = default;
};

/// Mean of the flags. Every flag must agree on whether the trace applies.
AccuracyRecord aggregate(std::span<const ScoreFlags> flags, Task task, std::string split,
                         Mode mode);

void to_json(nlohmann::json& j, const AccuracyRecord& r);
void from_json(const nlohmann::json& j, AccuracyRecord& r);

struct LearningCurve {
  std::vector<std::pair<std::int64_t, AccuracyRecord>> points;

  /// Appends a point; steps must be strictly increasing.
  void add(std::int64_t step, AccuracyRecord record);
  [[nodiscard]] bool empty() const { return points.empty(); }
};

/// answer_acc - full_acc per step; rejects curves without full-sequence accuracy.
std::vector<std::pair<std::int64_t, double>> unfaithfulness_gap(const LearningCurve& curve);

}  // namespace groklab
