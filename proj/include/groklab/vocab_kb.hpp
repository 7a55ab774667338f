#pragma once

// Token vocabulary, attributive / relational knowledge bases, the ID/OOD
// entity split and atomic-fact enumeration.

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "groklab/example.hpp"

namespace groklab {

struct ValueRange {
  int lo = 0;
  int hi = 0;

  [[nodiscard]] int size() const { return hi - lo + 1; }
  [[nodiscard]] bool contains(int v) const { return v >= lo && v <= hi; }
  bool operator==(const ValueRange&) const = default;
};

/// Half-open range of token ids.
struct IdRange {
  int begin = 0;
  int end = 0;

  [[nodiscard]] int size() const { return end - begin; }
  [[nodiscard]] bool contains(int id) const { return id >= begin && id < end; }
  bool operator==(const IdRange&) const = default;
};

struct TaskSet {
  bool comparison = false;
  bool sorting = false;
  bool intersection = false;
  bool composition = false;

  static TaskSet only(Task t);
  bool operator==(const TaskSet&) const = default;
};

/// Optional display names (e.g. "Alice", "height"); defaults are e0.., a0.., r0...
struct TokenNames {
  std::vector<std::string> entities;
  std::vector<std::string> attributes;
  std::vector<std::string> relations;
};

struct VocabConfig {
  int n_entities = 1;
  int n_attributes = 1;
  int n_relations = 0;
  ValueRange values{0, 0};
  TaskSet tasks;
  TokenNames names;
};

/// Dense token ids in the order: structural, entities, attributes, relations,
/// values, aggregator heads (max(a_j), min(a_j) interleaved per attribute).
/// Structural tokens are <q> <mask> <sep> <eos>, followed by <sort> when
/// sorting is configured and <intersect> <count> when intersection is.
class Vocabulary {
 public:
  static Vocabulary build(const VocabConfig& config);

  [[nodiscard]] int size() const { return static_cast<int>(tokens_.size()); }
  [[nodiscard]] const std::string& token(int id) const { return tokens_.at(id); }
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }
  [[nodiscard]] int id_of(std::string_view token) const;
  [[nodiscard]] std::optional<int> find(std::string_view token) const;

  [[nodiscard]] IdRange structural() const { return structural_; }
  [[nodiscard]] IdRange entities() const { return entities_; }
  [[nodiscard]] IdRange attributes() const { return attributes_; }
  [[nodiscard]] IdRange relations() const { return relations_; }
  [[nodiscard]] IdRange values() const { return values_; }
  [[nodiscard]] IdRange heads() const { return heads_; }
  [[nodiscard]] ValueRange value_range() const { return value_range_; }

  [[nodiscard]] int q() const { return q_; }
  [[nodiscard]] int mask() const { return mask_; }
  [[nodiscard]] int sep() const { return sep_; }
  [[nodiscard]] int eos() const { return eos_; }
  [[nodiscard]] int sort_head() const;
  [[nodiscard]] int intersect_head() const;
  [[nodiscard]] int count_marker() const;

  [[nodiscard]] int entity(int e) const;
  [[nodiscard]] int attribute(int a) const;
  [[nodiscard]] int relation(int r) const;
  [[nodiscard]] int value(int v) const;
  [[nodiscard]] int max_head(int a) const;
  [[nodiscard]] int min_head(int a) const;

  [[nodiscard]] int entity_index(int id) const { return id - entities_.begin; }
  [[nodiscard]] int value_of(int id) const { return id - values_.begin + value_range_.lo; }

  /// Plain-text format: one header line with section offsets, then one token
  /// per line (line i after the header holds id i).
  void write(const std::string& path) const;
  static Vocabulary read(const std::string& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string token);
  void index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> id_of_;
  IdRange structural_, entities_, attributes_, relations_, values_, heads_;
  ValueRange value_range_;
  int q_ = -1, mask_ = -1, sep_ = -1, eos_ = -1, sort_ = -1, intersect_ = -1, count_ = -1;
};

enum class SignMode : std::uint8_t { nonnegative, symmetric };

struct AttrKB {
  int n_entities = 0;
  int n_attributes = 0;
  ValueRange value_range;
  SignMode sign_mode = SignMode::nonnegative;
  std::vector<int> values;  // row-major (entity, attribute)

  [[nodiscard]] int at(int e, int a) const {
    return values[static_cast<std::size_t>(e) * n_attributes + a];
  }
  /// Mutation hook; only the intersection generator stamps values.
  void set(int e, int a, int v) { values[static_cast<std::size_t>(e) * n_attributes + a] = v; }
};

/// Builds an n_entities x n_attributes matrix with entries uniform in
/// `range`. In symmetric mode magnitudes are drawn from [0, max(|lo|,|hi|)]
/// and given a fair random sign; the stored range becomes [-M, M].
AttrKB build_attr_kb(std::uint64_t seed, int n_entities, int n_attributes, ValueRange range,
                     SignMode sign_mode);

inline constexpr int kUnreachable = -1;
inline constexpr int kNoEdge = -1;

struct Edge {
  int head;
  int relation;
  int tail;
  bool operator==(const Edge&) const = default;
};

struct RelKB {
  int n_entities = 0;
  int n_relations = 0;
  std::vector<std::vector<int>> maps;  // maps[r][e] = tail or kNoEdge
  std::vector<Edge> edges;             // sorted by (relation, head)
  std::vector<int> dist;               // n x n shortest-path lengths, kUnreachable if none

  [[nodiscard]] int tail(int r, int e) const { return maps[r][e]; }
  [[nodiscard]] int distance(int from, int to) const {
    return dist[static_cast<std::size_t>(from) * n_entities + to];
  }
  void recompute_distances();
};

/// Samples one permutation per relation. When edge_budget is set, keeps a
/// uniform subset of that many edges across all relations.
RelKB build_rel_kb(std::uint64_t seed, int n_entities, int n_relations,
                   std::optional<int> edge_budget = std::nullopt);

struct EntitySplit {
  std::vector<int> id_entities;   // sorted
  std::vector<int> ood_entities;  // sorted
  double ratio = 0.9;
  std::vector<SplitTag> tag_of;   // per entity

  [[nodiscard]] bool is_id(int e) const { return tag_of[e] == SplitTag::id; }
  [[nodiscard]] const std::vector<int>& pool(SplitTag tag) const;
};

EntitySplit split_entities(std::uint64_t seed, int n_entities, double ratio);

/// One example per (e, a) cell; query <e, a>, answer <v>; split tag from e.
std::vector<Example> enumerate_atomic_facts(const AttrKB& kb, const EntitySplit& split,
                                            const Vocabulary& vocab);
/// One example per realized edge; query <e_h, r>, answer <e_t>; split tag from e_h.
std::vector<Example> enumerate_atomic_facts(const RelKB& kb, const EntitySplit& split,
                                            const Vocabulary& vocab);

void to_json(nlohmann::json& j, const AttrKB& kb);
void from_json(const nlohmann::json& j, AttrKB& kb);
void to_json(nlohmann::json& j, const RelKB& kb);
void from_json(const nlohmann::json& j, RelKB& kb);
void to_json(nlohmann::json& j, const EntitySplit& split);
void from_json(const nlohmann::json& j, EntitySplit& split);

/// FNV-1a over the canonical JSON dump; recorded in dataset manifests.
std::string kb_hash(const AttrKB& kb);
std::string kb_hash(const RelKB& kb);

}  // namespace groklab
