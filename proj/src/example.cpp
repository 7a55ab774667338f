#include "groklab/example.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace groklab {

namespace {

constexpr std::array<std::string_view, 6> kTaskNames = {
    "comparison", "sorting", "intersection", "composition", "attribute_fact", "relation_fact"};
constexpr std::array<std::string_view, 3> kSplitNames = {"ID", "MIX", "OOD"};
constexpr std::array<std::string_view, 2> kModeNames = {"direct", "cot"};
constexpr std::array<std::string_view, 5> kTemplateNames = {"standard", "RA", "CRA", "RCA",
                                                            "RCA*"};

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::array<std::string_view, N>& names,
                std::string_view what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<Enum>(i);
  }
  throw std::invalid_argument("unknown " + std::string(what) + ": '" + std::string(s) + "'");
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace

std::string_view to_string(Task t) { return kTaskNames.at(static_cast<std::size_t>(t)); }
std::string_view to_string(SplitTag s) { return kSplitNames.at(static_cast<std::size_t>(s)); }
std::string_view to_string(Mode m) { return kModeNames.at(static_cast<std::size_t>(m)); }
std::string_view to_string(CotTemplate t) {
  return kTemplateNames.at(static_cast<std::size_t>(t));
}

Task parse_task(std::string_view s) { return parse_enum<Task>(s, kTaskNames, "task"); }
SplitTag parse_split_tag(std::string_view s) {
  return parse_enum<SplitTag>(s, kSplitNames, "split tag");
}
Mode parse_mode(std::string_view s) { return parse_enum<Mode>(s, kModeNames, "mode"); }
CotTemplate parse_template(std::string_view s) {
  return parse_enum<CotTemplate>(s, kTemplateNames, "CoT template");
}

bool is_atomic(Task t) { return t == Task::attribute_fact || t == Task::relation_fact; }

std::vector<int> Example::target(int eos) const {
  std::vector<int> out;
  out.reserve(trace.size() + answer.size() + 1);
  out.insert(out.end(), trace.begin(), trace.end());
  out.insert(out.end(), answer.begin(), answer.end());
  out.push_back(eos);
  return out;
}

std::vector<int> Example::sequence(int eos) const {
  std::vector<int> out = query;
  const auto tgt = target(eos);
  out.insert(out.end(), tgt.begin(), tgt.end());
  return out;
}

std::string canonical_key(const Example& ex) {
  const auto& m = ex.meta;
  std::string key(to_string(ex.task));
  key += '|';
  switch (ex.task) {
    case Task::comparison: {
      auto ents = m.entities;
      std::sort(ents.begin(), ents.end());
      key += std::to_string(m.attribute) + (m.take_max ? "|max|" : "|min|") + join_ints(ents);
      break;
    }
    case Task::sorting: {
      auto ents = m.entities;
      std::sort(ents.begin(), ents.end());
      key += std::to_string(m.attribute) + '|' + join_ints(ents);
      break;
    }
    case Task::intersection: {
      auto conds = m.conditions;
      std::sort(conds.begin(), conds.end());
      for (const auto& [a, v] : conds) key += std::to_string(a) + ':' + std::to_string(v) + ';';
      break;
    }
    case Task::composition:
      key += std::to_string(m.path.front()) + '|' + std::to_string(m.path.at(1)) + '|' +
             std::to_string(m.path.back());
      break;
    case Task::attribute_fact:
      key += std::to_string(m.entities.at(0)) + '|' + std::to_string(m.attribute);
      break;
    case Task::relation_fact:
      key += std::to_string(m.entities.at(0)) + '|' + std::to_string(m.relation);
      break;
  }
  return key;
}

void to_json(nlohmann::json& j, const Example& ex) {
  nlohmann::json meta = nlohmann::json::object();
  const auto& m = ex.meta;
  if (m.attribute >= 0) meta["attribute"] = m.attribute;
  if (m.relation >= 0) meta["relation"] = m.relation;
  if (ex.task == Task::comparison) meta["head"] = m.take_max ? "max" : "min";
  if (!m.entities.empty()) meta["entities"] = m.entities;
  if (!m.values.empty()) meta["values"] = m.values;
  if (!m.permutation.empty()) meta["permutation"] = m.permutation;
  if (!m.conditions.empty()) {
    auto conds = nlohmann::json::array();
    for (const auto& [a, v] : m.conditions) conds.push_back({a, v});
    meta["conditions"] = std::move(conds);
  }
  if (!m.relations.empty()) meta["relations"] = m.relations;
  if (!m.path.empty()) meta["path"] = m.path;
  if (m.answer_entity >= 0) meta["answer_entity"] = m.answer_entity;
  if (m.cot_template != CotTemplate::standard) meta["template"] = to_string(m.cot_template);

  j = nlohmann::json{{"task", to_string(ex.task)}, {"k", ex.k},
                     {"split", to_string(ex.split)}, {"query", ex.query},
                     {"trace", ex.trace},           {"answer", ex.answer},
                     {"meta", std::move(meta)}};
}

void from_json(const nlohmann::json& j, Example& ex) {
  ex = Example{};
  ex.task = parse_task(j.at("task").get<std::string>());
  ex.k = j.at("k").get<int>();
  ex.split = parse_split_tag(j.at("split").get<std::string>());
  ex.query = j.at("query").get<std::vector<int>>();
  ex.trace = j.at("trace").get<std::vector<int>>();
  ex.answer = j.at("answer").get<std::vector<int>>();
  const auto& meta = j.at("meta");
  auto& m = ex.meta;
  m.attribute = meta.value("attribute", -1);
  m.relation = meta.value("relation", -1);
  m.take_max = meta.value("head", std::string("max")) == "max";
  m.entities = meta.value("entities", std::vector<int>{});
  m.values = meta.value("values", std::vector<int>{});
  m.permutation = meta.value("permutation", std::vector<int>{});
  if (meta.contains("conditions")) {
    for (const auto& c : meta["conditions"]) m.conditions.emplace_back(c.at(0), c.at(1));
  }
  m.relations = meta.value("relations", std::vector<int>{});
  m.path = meta.value("path", std::vector<int>{});
  m.answer_entity = meta.value("answer_entity", -1);
  m.cot_template = parse_template(meta.value("template", std::string("standard")));
}

void write_jsonl(std::ostream& os, const std::vector<Example>& examples) {
  for (const auto& ex : examples) os << nlohmann::json(ex).dump() << '\n';
}

std::vector<Example> read_jsonl(std::istream& is) {
  std::vector<Example> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line).get<Example>());
  }
  return out;
}

void write_jsonl_file(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_jsonl(os, examples);
}

std::vector<Example> read_jsonl_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_jsonl(is);
}

}  // namespace groklab
