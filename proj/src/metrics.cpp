#include "groklab/metrics.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace groklab {

ScoreFlags score_example(std::span<const int> generated, const Example& gold, Mode mode, int eos) {
  ScoreFlags f;
  const bool trace_applies = mode == Mode::cot && !is_atomic(gold.task);
  if (trace_applies) {
    f.trace_ok = false;
    f.full_ok = false;
  }
  const auto stop = std::find(generated.begin(), generated.end(), eos);
  if (stop == generated.end()) return f;
  f.terminated = true;
  const auto body = generated.subspan(0, static_cast<std::size_t>(stop - generated.begin()));

  const std::size_t trace_len = trace_applies ? gold.trace.size() : 0;
  if (trace_applies) {
    f.trace_ok = body.size() >= trace_len &&
                 std::equal(gold.trace.begin(), gold.trace.end(), body.begin());
  }
  const auto ans = body.size() >= trace_len ? body.subspan(trace_len) : std::span<const int>{};
  f.answer_ok = std::equal(ans.begin(), ans.end(), gold.answer.begin(), gold.answer.end());

  if (gold.task == Task::sorting) {
    const std::size_t width = std::max(ans.size(), gold.answer.size());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(ans.size(), gold.answer.size()); ++i) {
      hits += ans[i] == gold.answer[i] ? 1 : 0;
    }
    f.answer_partial = width ? static_cast<double>(hits) / static_cast<double>(width) : 1.0;
  } else {
    f.answer_partial = f.answer_ok ? 1.0 : 0.0;
  }
  if (trace_applies) f.full_ok = f.answer_ok && *f.trace_ok;
  return f;
}

AccuracyRecord aggregate(std::span<const ScoreFlags> flags, Task task, std::string split,
                         Mode mode) {
  AccuracyRecord r;
  r.task = task;
  r.split = std::move(split);
  r.mode = mode;
  r.n = flags.size();
  if (flags.empty()) return r;
  const bool trace_applies = flags.front().trace_ok.has_value();
  std::size_t answer = 0, trace = 0, full = 0;
  double partial = 0.0;
  for (const auto& f : flags) {
    if (f.trace_ok.has_value() != trace_applies) {
      throw std::invalid_argument("cannot aggregate scores with and without a trace");
    }
    answer += f.answer_ok ? 1 : 0;
    partial += f.answer_partial;
    r.unterminated += f.terminated ? 0 : 1;
    if (trace_applies) {
      trace += *f.trace_ok ? 1 : 0;
      full += *f.full_ok ? 1 : 0;
    }
  }
  const double n = static_cast<double>(r.n);
  r.strict_answer_acc = static_cast<double>(answer) / n;
  r.answer_acc = task == Task::sorting ? partial / n : r.strict_answer_acc;
  if (trace_applies) {
    r.trace_acc = static_cast<double>(trace) / n;
    r.full_acc = static_cast<double>(full) / n;
  }
  return r;
}

void to_json(nlohmann::json& j, const AccuracyRecord& r) {
  j = nlohmann::json{{"answer_acc", r.answer_acc},
                     {"strict_answer_acc", r.strict_answer_acc},
                     {"trace_acc", r.trace_acc ? nlohmann::json(*r.trace_acc) : nlohmann::json()},
                     {"full_acc", r.full_acc ? nlohmann::json(*r.full_acc) : nlohmann::json()},
                     {"n", r.n},
                     {"unterminated", r.unterminated},
                     {"task", to_string(r.task)},
                     {"split", r.split},
                     {"mode", to_string(r.mode)}};
}

void from_json(const nlohmann::json& j, AccuracyRecord& r) {
  r.answer_acc = j.at("answer_acc").get<double>();
  r.strict_answer_acc = j.value("strict_answer_acc", r.answer_acc);
  r.trace_acc.reset();
  r.full_acc.reset();
  if (j.contains("trace_acc") && !j["trace_acc"].is_null()) r.trace_acc = j["trace_acc"].get<double>();
  if (j.contains("full_acc") && !j["full_acc"].is_null()) r.full_acc = j["full_acc"].get<double>();
  r.n = j.at("n").get<std::size_t>();
  r.unterminated = j.value("unterminated", std::size_t{0});
  r.task = parse_task(j.at("task").get<std::string>());
  r.split = j.at("split").get<std::string>();
  r.mode = parse_mode(j.at("mode").get<std::string>());
}

void LearningCurve::add(std::int64_t step, AccuracyRecord record) {
  if (!points.empty() && step <= points.back().first) {
    throw std::invalid_argument("learning curve steps must be strictly increasing");
  }
  points.emplace_back(step, std::move(record));
}

std::vector<std::pair<std::int64_t, double>> unfaithfulness_gap(const LearningCurve& curve) {
  std::vector<std::pair<std::int64_t, double>> out;
  out.reserve(curve.points.size());
  for (const auto& [step, rec] : curve.points) {
    if (rec.mode != Mode::cot || !rec.full_acc) {
      throw std::invalid_argument("unfaithfulness gap needs a CoT curve with full-sequence accuracy");
    }
    out.emplace_back(step, rec.answer_acc - *rec.full_acc);
  }
  return out;
}

}  // namespace groklab
