#include "groklab/vocab_kb.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "groklab/rng.hpp"

namespace groklab {

TaskSet TaskSet::only(Task t) {
  TaskSet s;
  switch (t) {
    case Task::comparison: s.comparison = true; break;
    case Task::sorting: s.sorting = true; break;
    case Task::intersection: s.intersection = true; break;
    case Task::composition: s.composition = true; break;
    default: break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Vocabulary

void Vocabulary::add(std::string token) {
  if (id_of_.contains(token)) {
    throw std::invalid_argument("duplicate token name in vocabulary: '" + token + "'");
  }
  id_of_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(const VocabConfig& cfg) {
  if (cfg.n_entities <= 0 || cfg.n_attributes <= 0 || cfg.n_relations < 0) {
    throw std::invalid_argument("vocabulary needs positive entity and attribute counts");
  }
  if (cfg.values.hi < cfg.values.lo) throw std::invalid_argument("empty value range");
  if (cfg.tasks.composition && cfg.n_relations <= 0) {
    throw std::invalid_argument("composition requires at least one relation");
  }
  auto check_names = [](const std::vector<std::string>& names, int n, const char* what) {
    if (!names.empty() && static_cast<int>(names.size()) != n) {
      throw std::invalid_argument(std::string("wrong number of ") + what + " names");
    }
  };
  check_names(cfg.names.entities, cfg.n_entities, "entity");
  check_names(cfg.names.attributes, cfg.n_attributes, "attribute");
  check_names(cfg.names.relations, cfg.n_relations, "relation");

  Vocabulary v;
  v.value_range_ = cfg.values;

  const int s0 = v.size();
  v.q_ = v.size(), v.add("<q>");
  v.mask_ = v.size(), v.add("<mask>");
  v.sep_ = v.size(), v.add("<sep>");
  v.eos_ = v.size(), v.add("<eos>");
  if (cfg.tasks.sorting) v.sort_ = v.size(), v.add("<sort>");
  if (cfg.tasks.intersection) {
    v.intersect_ = v.size(), v.add("<intersect>");
    v.count_ = v.size(), v.add("<count>");
  }
  v.structural_ = {s0, v.size()};

  auto section = [&v](int n, const std::vector<std::string>& names, const char* prefix) {
    const int begin = v.size();
    for (int i = 0; i < n; ++i) {
      v.add(names.empty() ? prefix + std::to_string(i) : names[i]);
    }
    return IdRange{begin, v.size()};
  };
  v.entities_ = section(cfg.n_entities, cfg.names.entities, "e");
  v.attributes_ = section(cfg.n_attributes, cfg.names.attributes, "a");
  v.relations_ = section(cfg.n_relations, cfg.names.relations, "r");

  const int vb = v.size();
  for (int x = cfg.values.lo; x <= cfg.values.hi; ++x) v.add(std::to_string(x));
  v.values_ = {vb, v.size()};

  const int hb = v.size();
  if (cfg.tasks.comparison) {
    for (int a = 0; a < cfg.n_attributes; ++a) {
      const std::string& name = v.tokens_[v.attributes_.begin + a];
      v.add("max(" + name + ")");
      v.add("min(" + name + ")");
    }
  }
  v.heads_ = {hb, v.size()};
  return v;
}

int Vocabulary::id_of(std::string_view token) const {
  auto found = find(token);
  if (!found) throw std::out_of_range("token not in vocabulary: '" + std::string(token) + "'");
  return *found;
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = id_of_.find(std::string(token));
  if (it == id_of_.end()) return std::nullopt;
  return it->second;
}

namespace {
int checked(int id, const char* what) {
  if (id < 0) throw std::logic_error(std::string(what) + " token not configured");
  return id;
}
int in_range(IdRange r, int offset, const char* what) {
  if (offset < 0 || offset >= r.size()) {
    throw std::out_of_range(std::string(what) + " index out of range: " + std::to_string(offset));
  }
  return r.begin + offset;
}
}  // namespace

int Vocabulary::sort_head() const { return checked(sort_, "<sort>"); }
int Vocabulary::intersect_head() const { return checked(intersect_, "<intersect>"); }
int Vocabulary::count_marker() const { return checked(count_, "<count>"); }
int Vocabulary::entity(int e) const { return in_range(entities_, e, "entity"); }
int Vocabulary::attribute(int a) const { return in_range(attributes_, a, "attribute"); }
int Vocabulary::relation(int r) const { return in_range(relations_, r, "relation"); }
int Vocabulary::value(int x) const { return in_range(values_, x - value_range_.lo, "value"); }
int Vocabulary::max_head(int a) const { return in_range(heads_, 2 * a, "aggregator head"); }
int Vocabulary::min_head(int a) const { return in_range(heads_, 2 * a + 1, "aggregator head"); }

void Vocabulary::write(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  auto r = [](IdRange x) { return std::to_string(x.begin) + ":" + std::to_string(x.end); };
  os << "#groklab-vocab v1 structural=" << r(structural_) << " entities=" << r(entities_)
     << " attributes=" << r(attributes_) << " relations=" << r(relations_)
     << " values=" << r(values_) << " heads=" << r(heads_) << " value_lo=" << value_range_.lo
     << " value_hi=" << value_range_.hi << '\n';
  for (const auto& t : tokens_) os << t << '\n';
}

void Vocabulary::index() {
  id_of_.clear();
  for (int i = 0; i < size(); ++i) {
    if (!id_of_.emplace(tokens_[i], i).second) {
      throw std::runtime_error("duplicate token in vocabulary file: " + tokens_[i]);
    }
  }
  auto opt = [this](const char* t) { return find(t).value_or(-1); };
  q_ = opt("<q>");
  mask_ = opt("<mask>");
  sep_ = opt("<sep>");
  eos_ = opt("<eos>");
  sort_ = opt("<sort>");
  intersect_ = opt("<intersect>");
  count_ = opt("<count>");
}

Vocabulary Vocabulary::read(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string magic, version, field;
  hs >> magic >> version;
  if (magic != "#groklab-vocab" || version != "v1") {
    throw std::runtime_error("not a groklab vocabulary file: " + path);
  }
  Vocabulary v;
  while (hs >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::runtime_error("bad vocabulary header: " + header);
    const std::string key = field.substr(0, eq);
    const std::string val = field.substr(eq + 1);
    const auto colon = val.find(':');
    auto range = [&] {
      return IdRange{std::stoi(val.substr(0, colon)), std::stoi(val.substr(colon + 1))};
    };
    if (key == "structural") v.structural_ = range();
    else if (key == "entities") v.entities_ = range();
    else if (key == "attributes") v.attributes_ = range();
    else if (key == "relations") v.relations_ = range();
    else if (key == "values") v.values_ = range();
    else if (key == "heads") v.heads_ = range();
    else if (key == "value_lo") v.value_range_.lo = std::stoi(val);
    else if (key == "value_hi") v.value_range_.hi = std::stoi(val);
  }
  std::string line;
  while (std::getline(is, line)) v.tokens_.push_back(line);
  if (v.heads_.end != v.size()) throw std::runtime_error("vocabulary size mismatch in " + path);
  v.index();
  return v;
}

// ---------------------------------------------------------------------------
// Knowledge bases

AttrKB build_attr_kb(std::uint64_t seed, int n_entities, int n_attributes, ValueRange range,
                     SignMode sign_mode) {
  if (n_entities <= 0 || n_attributes <= 0) {
    throw std::invalid_argument("attribute KB needs positive dimensions");
  }
  if (range.hi < range.lo) throw std::invalid_argument("empty value range");
  AttrKB kb;
  kb.n_entities = n_entities;
  kb.n_attributes = n_attributes;
  kb.sign_mode = sign_mode;
  kb.values.resize(static_cast<std::size_t>(n_entities) * n_attributes);
  auto rng = make_rng(seed, "attr_kb");
  if (sign_mode == SignMode::nonnegative) {
    kb.value_range = range;
    for (auto& x : kb.values) x = static_cast<int>(rng.uniform_int(range.lo, range.hi));
  } else {
    const int m = std::max(std::abs(range.lo), std::abs(range.hi));
    kb.value_range = {-m, m};
    for (auto& x : kb.values) {
      const int mag = static_cast<int>(rng.uniform_int(0, m));
      x = rng.coin() ? -mag : mag;
    }
  }
  return kb;
}

void RelKB::recompute_distances() {
  const std::size_t n = static_cast<std::size_t>(n_entities);
  std::vector<std::vector<int>> adj(n);
  for (const auto& e : edges) adj[e.head].push_back(e.tail);
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  dist.assign(n * n, kUnreachable);
  std::vector<int> frontier;
  std::vector<int> next;
  for (std::size_t s = 0; s < n; ++s) {
    int* row = dist.data() + s * n;
    row[s] = 0;
    frontier.assign(1, static_cast<int>(s));
    int d = 0;
    while (!frontier.empty()) {
      ++d;
      next.clear();
      for (int u : frontier) {
        for (int w : adj[u]) {
          if (row[w] == kUnreachable) {
            row[w] = d;
            next.push_back(w);
          }
        }
      }
      frontier.swap(next);
    }
  }
}

RelKB build_rel_kb(std::uint64_t seed, int n_entities, int n_relations,
                   std::optional<int> edge_budget) {
  if (n_entities <= 0) throw std::invalid_argument("relational KB needs entities");
  if (n_relations < 1) throw std::invalid_argument("relational KB needs at least one relation");
  const long long full = static_cast<long long>(n_entities) * n_relations;
  if (edge_budget && (*edge_budget < 0 || *edge_budget > full)) {
    throw std::invalid_argument("edge budget " + std::to_string(*edge_budget) +
                                " exceeds n_entities * n_relations = " + std::to_string(full));
  }
  RelKB kb;
  kb.n_entities = n_entities;
  kb.n_relations = n_relations;
  kb.maps.assign(n_relations, std::vector<int>(n_entities));
  for (int r = 0; r < n_relations; ++r) {
    auto rng = make_rng(seed, "rel_kb", static_cast<std::uint64_t>(r));
    std::iota(kb.maps[r].begin(), kb.maps[r].end(), 0);
    rng.shuffle(std::span<int>(kb.maps[r]));
  }
  if (edge_budget && *edge_budget < full) {
    std::vector<long long> cells(static_cast<std::size_t>(full));
    std::iota(cells.begin(), cells.end(), 0LL);
    auto rng = make_rng(seed, "rel_kb_subsample");
    rng.shuffle(std::span<long long>(cells));
    for (std::size_t i = static_cast<std::size_t>(*edge_budget); i < cells.size(); ++i) {
      kb.maps[cells[i] / n_entities][cells[i] % n_entities] = kNoEdge;
    }
  }
  for (int r = 0; r < n_relations; ++r) {
    for (int e = 0; e < n_entities; ++e) {
      if (kb.maps[r][e] != kNoEdge) kb.edges.push_back({e, r, kb.maps[r][e]});
    }
  }
  kb.recompute_distances();
  return kb;
}

const std::vector<int>& EntitySplit::pool(SplitTag tag) const {
  if (tag == SplitTag::id) return id_entities;
  if (tag == SplitTag::ood) return ood_entities;
  throw std::invalid_argument("MIX has no single entity pool");
}

EntitySplit split_entities(std::uint64_t seed, int n_entities, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split ratio must be in (0, 1)");
  const auto n_id = static_cast<int>(std::lround(ratio * n_entities));
  if (n_id >= n_entities) {
    throw std::invalid_argument("split ratio leaves no OOD entities");
  }
  if (n_id <= 0) throw std::invalid_argument("split ratio leaves no ID entities");
  std::vector<int> order(n_entities);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, "entity_split");
  rng.shuffle(std::span<int>(order));

  EntitySplit s;
  s.ratio = ratio;
  s.id_entities.assign(order.begin(), order.begin() + n_id);
  s.ood_entities.assign(order.begin() + n_id, order.end());
  std::sort(s.id_entities.begin(), s.id_entities.end());
  std::sort(s.ood_entities.begin(), s.ood_entities.end());
  s.tag_of.assign(n_entities, SplitTag::ood);
  for (int e : s.id_entities) s.tag_of[e] = SplitTag::id;
  return s;
}

std::vector<Example> enumerate_atomic_facts(const AttrKB& kb, const EntitySplit& split,
                                            const Vocabulary& vocab) {
  std::vector<Example> out;
  out.reserve(kb.values.size());
  for (int e = 0; e < kb.n_entities; ++e) {
    for (int a = 0; a < kb.n_attributes; ++a) {
      Example ex;
      ex.task = Task::attribute_fact;
      ex.k = 1;
      ex.split = split.tag_of.at(e);
      ex.query = {vocab.entity(e), vocab.attribute(a)};
      ex.answer = {vocab.value(kb.at(e, a))};
      ex.meta.attribute = a;
      ex.meta.entities = {e};
      ex.meta.values = {kb.at(e, a)};
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<Example> enumerate_atomic_facts(const RelKB& kb, const EntitySplit& split,
                                            const Vocabulary& vocab) {
  std::vector<Example> out;
  out.reserve(kb.edges.size());
  for (const auto& edge : kb.edges) {
    Example ex;
    ex.task = Task::relation_fact;
    ex.k = 1;
    ex.split = split.tag_of.at(edge.head);
    ex.query = {vocab.entity(edge.head), vocab.relation(edge.relation)};
    ex.answer = {vocab.entity(edge.tail)};
    ex.meta.relation = edge.relation;
    ex.meta.entities = {edge.head};
    ex.meta.answer_entity = edge.tail;
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const AttrKB& kb) {
  j = nlohmann::json{{"kind", "attributive"},
                     {"n_entities", kb.n_entities},
                     {"n_attributes", kb.n_attributes},
                     {"value_lo", kb.value_range.lo},
                     {"value_hi", kb.value_range.hi},
                     {"sign_mode", kb.sign_mode == SignMode::symmetric ? "symmetric" : "nonnegative"},
                     {"values", kb.values}};
}

void from_json(const nlohmann::json& j, AttrKB& kb) {
  kb.n_entities = j.at("n_entities");
  kb.n_attributes = j.at("n_attributes");
  kb.value_range = {j.at("value_lo"), j.at("value_hi")};
  kb.sign_mode = j.at("sign_mode") == "symmetric" ? SignMode::symmetric : SignMode::nonnegative;
  kb.values = j.at("values").get<std::vector<int>>();
  if (kb.values.size() != static_cast<std::size_t>(kb.n_entities) * kb.n_attributes) {
    throw std::runtime_error("attribute KB matrix has wrong size");
  }
}

void to_json(nlohmann::json& j, const RelKB& kb) {
  j = nlohmann::json{{"kind", "relational"},
                     {"n_entities", kb.n_entities},
                     {"n_relations", kb.n_relations},
                     {"relations", kb.maps}};
}

void from_json(const nlohmann::json& j, RelKB& kb) {
  kb = RelKB{};
  kb.n_entities = j.at("n_entities");
  kb.n_relations = j.at("n_relations");
  kb.maps = j.at("relations").get<std::vector<std::vector<int>>>();
  for (int r = 0; r < kb.n_relations; ++r) {
    for (int e = 0; e < kb.n_entities; ++e) {
      if (kb.maps[r][e] != kNoEdge) kb.edges.push_back({e, r, kb.maps[r][e]});
    }
  }
  kb.recompute_distances();
}

void to_json(nlohmann::json& j, const EntitySplit& s) {
  j = nlohmann::json{{"ratio", s.ratio}, {"id", s.id_entities}, {"ood", s.ood_entities}};
}

void from_json(const nlohmann::json& j, EntitySplit& s) {
  s.ratio = j.at("ratio");
  s.id_entities = j.at("id").get<std::vector<int>>();
  s.ood_entities = j.at("ood").get<std::vector<int>>();
  s.tag_of.assign(s.id_entities.size() + s.ood_entities.size(), SplitTag::ood);
  for (int e : s.id_entities) s.tag_of.at(e) = SplitTag::id;
}

namespace {
std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}
}  // namespace

std::string kb_hash(const AttrKB& kb) { return hex64(fnv1a64(nlohmann::json(kb).dump())); }
std::string kb_hash(const RelKB& kb) { return hex64(fnv1a64(nlohmann::json(kb).dump())); }

}  // namespace groklab
