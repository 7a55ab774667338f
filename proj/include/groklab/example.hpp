#pragma once

// Serialized training / evaluation items shared by the generators, the
// trainer and the analysis tools.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace groklab {

enum class Task : std::uint8_t {
  comparison,
  sorting,
  intersection,
  composition,
  attribute_fact,  // atomic (e, a) -> v
  relation_fact,   // atomic (e, r) -> e'
};

enum class SplitTag : std::uint8_t { id, mix, ood };

enum class Mode : std::uint8_t { direct, cot };

/// CoT layouts. Comparison, sorting and composition always use `standard`;
/// intersection uses one of the four list/count orderings.
enum class CotTemplate : std::uint8_t {
  standard,
  retrieve_answer,              // RA
  count_retrieve_answer,        // CRA
  retrieve_count_answer,        // RCA
  retrieve_count_repeat_answer  // RCA with the count block spelled by repetition
};

std::string_view to_string(Task t);
std::string_view to_string(SplitTag s);
std::string_view to_string(Mode m);
std::string_view to_string(CotTemplate t);

Task parse_task(std::string_view s);
SplitTag parse_split_tag(std::string_view s);
Mode parse_mode(std::string_view s);
CotTemplate parse_template(std::string_view s);

bool is_atomic(Task t);

/// Task-specific record needed to re-derive the trace and answer from the KB.
/// Entity / attribute / relation fields hold KB indices, not token ids.
struct ExampleMeta {
  int attribute = -1;                           // comparison, sorting, attribute_fact
  int relation = -1;                            // relation_fact
  bool take_max = true;                         // comparison head type
  std::vector<int> entities;                    // query entities in query order
  std::vector<int> values;                      // KB values aligned with `entities`
  std::vector<int> permutation;                 // sorting: query positions in ascending order
  std::vector<std::pair<int, int>> conditions;  // intersection: (attribute, value) in query order
  std::vector<int> relations;                   // composition: r_1..r_k
  std::vector<int> path;                        // composition: e_h, b_1, ..., b_{k-1}, e_t
  int answer_entity = -1;
  CotTemplate cot_template = CotTemplate::standard;

  bool operator==(const ExampleMeta&) const = default;
};

struct Example {
  Task task = Task::comparison;
  int k = 0;
  SplitTag split = SplitTag::id;
  std::vector<int> query;   // token ids
  std::vector<int> trace;   // token ids, empty in direct mode
  std::vector<int> answer;  // token ids, without the trailing eos
  ExampleMeta meta;

  bool operator==(const Example&) const = default;

  /// Supervised continuation: trace ++ answer ++ eos.
  [[nodiscard]] std::vector<int> target(int eos) const;
  /// Full teacher-forced sequence: query ++ target.
  [[nodiscard]] std::vector<int> sequence(int eos) const;
};

/// Key identifying a composed example up to query-order permutation; used to
/// prevent the same query from landing in two splits.
std::string canonical_key(const Example& ex);

void to_json(nlohmann::json& j, const Example& ex);
void from_json(const nlohmann::json& j, Example& ex);

void write_jsonl(std::ostream& os, const std::vector<Example>& examples);
std::vector<Example> read_jsonl(std::istream& is);
void write_jsonl_file(const std::string& path, const std::vector<Example>& examples);
std::vector<Example> read_jsonl_file(const std::string& path);

}  // namespace groklab
