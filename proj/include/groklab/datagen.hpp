#pragma once

// Composed-example generators for the four reasoning tasks and phi-controlled
// dataset assembly.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "groklab/example.hpp"
#include "groklab/vocab_kb.hpp"

namespace groklab {

/// Number of queries to draw per entity pool. For comparison and sorting the
/// budget applies per (k, attribute); for intersection and composition per k.
struct PoolBudget {
  int id = 0;
  int mix = 0;
  int ood = 0;
};

struct GenResult {
  std::vector<Example> examples;
  bool exhausted = false;  // some pool ran out of candidates before reaching its budget
  std::vector<std::string> warnings;
};

GenResult gen_comparison(const AttrKB& kb, const EntitySplit& split, const Vocabulary& vocab,
                         int k, PoolBudget budget, std::uint64_t seed, Mode mode);

GenResult gen_sorting(const AttrKB& kb, const EntitySplit& split, const Vocabulary& vocab, int k,
                      PoolBudget budget, std::uint64_t seed, Mode mode);

struct IntersectionResult {
  AttrKB kb;
  GenResult gen;
};

/// Co-constructs the attribute KB: answers are stamped into an empty matrix,
/// the remainder is filled uniformly, and only queries with exactly one
/// satisfying entity (over the whole entity set) are kept. Candidate lists
/// in the trace are restricted to the query's own split pool.
IntersectionResult gen_intersection(std::uint64_t seed, int n_entities, int n_attributes,
                                    ValueRange values, const EntitySplit& split,
                                    const Vocabulary& vocab, int k, PoolBudget budget, Mode mode,
                                    CotTemplate cot_template);

GenResult gen_composition(const RelKB& kb, const EntitySplit& split, const Vocabulary& vocab,
                          int k, PoolBudget budget, std::uint64_t seed, Mode mode);

// Re-derivation from meta + KB. These are the single source of truth for the
// serialized layouts and are reused by the checks.
std::vector<int> render_trace(const Example& ex, const Vocabulary& vocab, const AttrKB* attr_kb,
                              const EntitySplit* split);
std::vector<int> render_answer(const Example& ex, const Vocabulary& vocab);

enum class PhiBase : std::uint8_t { all_atomics, id_atomics };

struct AssembleOptions {
  PhiBase phi_base = PhiBase::all_atomics;
  int validation_cap = 2000;
  std::optional<int> test_cap;
};

struct Dataset {
  Task task = Task::comparison;
  int k = 0;
  double phi = 0.0;
  Mode mode = Mode::direct;
  CotTemplate cot_template = CotTemplate::standard;
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
  std::vector<Example> mix;  // generated and tagged, not part of train/test
  std::size_t n_atomics = 0;
  std::size_t phi_base_size = 0;
  std::size_t n_composed_train = 0;
  std::size_t requested_composed_train = 0;
  bool capped = false;
};

/// "train", "validation" (or "id_val"), "test" (or "ood_test"), "mix".
const std::vector<Example>& dataset_split(const Dataset& data, std::string_view name);

Dataset assemble_dataset(const std::vector<Example>& atomics,
                         const std::vector<Example>& composed, double phi, Mode mode,
                         std::uint64_t seed, const AssembleOptions& options = {});

/// Everything needed to regenerate and audit one dataset directory.
struct DatasetSpec {
  Task task = Task::comparison;
  int k = 2;
  double phi = 3.6;
  Mode mode = Mode::direct;
  CotTemplate cot_template = CotTemplate::standard;
  std::uint64_t seed = 7;
  int n_entities = 1000;
  int n_attributes = 20;
  int n_relations = 20;
  ValueRange values{0, 20};
  SignMode sign_mode = SignMode::nonnegative;
  double id_ratio = 0.9;
  bool include_mix = false;
  PhiBase phi_base = PhiBase::all_atomics;
  int validation_cap = 2000;
  std::optional<int> test_cap = 2000;
  std::optional<int> edge_budget;

  /// Per-task defaults: comparison |A|=20 v in [0,20]; sorting v in [0,100];
  /// intersection |A|=100 v in [0,50]; composition |R|=20.
  static DatasetSpec defaults(Task task, int n_entities = 1000);
};

struct Bundle {
  DatasetSpec spec;
  Vocabulary vocab;
  EntitySplit split;
  std::optional<AttrKB> attr_kb;
  std::optional<RelKB> rel_kb;
  Dataset data;
  std::vector<std::string> warnings;
};

/// KB, split, atomics, composed pools and assembly in one deterministic pass.
/// Budgets are derived from phi so the ID pool can cover the request plus the
/// validation set.
Bundle generate_bundle(const DatasetSpec& spec);

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Directory layout: vocab.txt, kb.json, split.json, {train,validation,test,mix}.jsonl,
/// manifest.json.
void write_bundle(const Bundle& bundle, const std::string& dir);
Bundle read_bundle(const std::string& dir);

}  // namespace groklab
