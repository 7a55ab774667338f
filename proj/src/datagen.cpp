#include "groklab/datagen.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "groklab/rng.hpp"

namespace groklab {

namespace {

constexpr double kEnumerateLimit = 200000.0;
constexpr double kWalkEnumerateLimit = 4.0e6;
constexpr int kRetryFactor = 100;

double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

/// Calls `visit` for every k-combination of `pool` (lexicographic by position).
void for_each_combination(const std::vector<int>& pool, int k,
                          const std::function<void(const std::vector<int>&)>& visit) {
  const int n = static_cast<int>(pool.size());
  if (k > n) return;
  std::vector<int> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> combo(k);
  for (;;) {
    for (int i = 0; i < k; ++i) combo[i] = pool[idx[i]];
    visit(combo);
    int i = k - 1;
    while (i >= 0 && idx[i] == n - k + i) --i;
    if (i < 0) return;
    ++idx[i];
    for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

/// Floyd's algorithm: uniform k-subset of {0..n-1}, returned sorted.
std::vector<int> random_subset(Pcg32& rng, int n, int k) {
  std::set<int> chosen;
  for (int j = n - k; j < n; ++j) {
    const int t = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(j) + 1));
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  return {chosen.begin(), chosen.end()};
}

std::string subset_key(const std::vector<int>& sorted) {
  std::string key;
  for (int x : sorted) key += std::to_string(x) + ',';
  return key;
}

bool is_mixed(const EntitySplit& split, const std::vector<int>& ents) {
  bool has_id = false;
  bool has_ood = false;
  for (int e : ents) (split.is_id(e) ? has_id : has_ood) = true;
  return has_id && has_ood;
}

std::vector<int> all_entities(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

/// Draws up to `budget` distinct unordered k-tuples from a pool, in random
/// query order, accepting those for which `accept` returns true. Exhaustive
/// enumeration is used when the pool is small enough.
struct TupleDraw {
  std::vector<std::vector<int>> tuples;
  bool exhausted = false;
};

TupleDraw draw_tuples(const EntitySplit& split, SplitTag tag, int n_entities, int k, int budget,
                      Pcg32& rng, const std::function<bool(const std::vector<int>&)>& accept) {
  TupleDraw out;
  if (budget <= 0) return out;
  const std::vector<int> universe =
      tag == SplitTag::mix ? all_entities(n_entities) : split.pool(tag);
  const int n = static_cast<int>(universe.size());
  if (n < k) {
    out.exhausted = true;
    return out;
  }
  auto admissible = [&](const std::vector<int>& ents) {
    return tag != SplitTag::mix || is_mixed(split, ents);
  };

  if (binomial(n, k) <= kEnumerateLimit) {
    std::vector<std::vector<int>> all;
    for_each_combination(universe, k, [&](const std::vector<int>& c) {
      if (admissible(c)) all.push_back(c);
    });
    rng.shuffle(std::span<std::vector<int>>(all));
    for (auto& c : all) {
      if (static_cast<int>(out.tuples.size()) >= budget) break;
      rng.shuffle(std::span<int>(c));
      if (accept(c)) out.tuples.push_back(c);
    }
    out.exhausted = static_cast<int>(out.tuples.size()) < budget;
    return out;
  }

  std::unordered_set<std::string> seen;
  const long long max_attempts = static_cast<long long>(kRetryFactor) * budget;
  for (long long attempt = 0;
       attempt < max_attempts && static_cast<int>(out.tuples.size()) < budget; ++attempt) {
    std::vector<int> c = random_subset(rng, n, k);
    for (int& x : c) x = universe[x];
    std::sort(c.begin(), c.end());
    if (!admissible(c)) continue;
    if (!seen.insert(subset_key(c)).second) continue;
    rng.shuffle(std::span<int>(c));
    if (accept(c)) out.tuples.push_back(c);
  }
  out.exhausted = static_cast<int>(out.tuples.size()) < budget;
  return out;
}

int argext(const std::vector<int>& values, bool take_max) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i) {
    if (take_max ? values[i] > values[best] : values[i] < values[best]) best = i;
  }
  return best;
}

bool unique_extreme(const std::vector<int>& values, bool take_max) {
  const int best = values[argext(values, take_max)];
  return std::count(values.begin(), values.end(), best) == 1;
}

std::vector<int> kb_values(const AttrKB& kb, const std::vector<int>& ents, int a) {
  std::vector<int> v;
  v.reserve(ents.size());
  for (int e : ents) v.push_back(kb.at(e, a));
  return v;
}

std::vector<int> ascending_order(const std::vector<int>& values) {
  std::vector<int> perm(values.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](int x, int y) { return values[x] < values[y]; });
  return perm;
}

void note_exhaustion(GenResult& res, std::string_view task, SplitTag tag, int k, int shard,
                     std::size_t got, int budget) {
  res.exhausted = true;
  res.warnings.push_back(std::string(task) + ": pool " + std::string(to_string(tag)) +
                         " exhausted (k=" + std::to_string(k) + ", shard " +
                         std::to_string(shard) + "): " + std::to_string(got) + " of " +
                         std::to_string(budget));
}

int pool_budget(const PoolBudget& b, SplitTag tag) {
  switch (tag) {
    case SplitTag::id: return b.id;
    case SplitTag::mix: return b.mix;
    case SplitTag::ood: return b.ood;
  }
  return 0;
}

constexpr SplitTag kAllTags[] = {SplitTag::id, SplitTag::mix, SplitTag::ood};

// Intersection helpers ------------------------------------------------------

std::vector<std::vector<int>> candidate_lists(const Example& ex, const AttrKB& kb,
                                              const EntitySplit& split) {
  const auto& pool = split.pool(ex.split);
  std::vector<std::vector<int>> lists;
  for (const auto& [a, v] : ex.meta.conditions) {
    std::vector<int> list;
    for (int e : pool) {
      if (kb.at(e, a) == v) list.push_back(e);
    }
    lists.push_back(std::move(list));
  }
  return lists;
}

CotTemplate resolve_intersection_template(CotTemplate t) {
  return t == CotTemplate::standard ? CotTemplate::retrieve_answer : t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Rendering

std::vector<int> render_answer(const Example& ex, const Vocabulary& vocab) {
  const auto& m = ex.meta;
  switch (ex.task) {
    case Task::sorting: {
      std::vector<int> out;
      for (int pos : m.permutation) out.push_back(vocab.entity(m.entities[pos]));
      return out;
    }
    case Task::attribute_fact:
      return {vocab.value(m.values.at(0))};
    default:
      return {vocab.entity(m.answer_entity)};
  }
}

std::vector<int> render_trace(const Example& ex, const Vocabulary& vocab, const AttrKB* kb,
                              const EntitySplit* split) {
  const auto& m = ex.meta;
  std::vector<int> out;
  switch (ex.task) {
    case Task::comparison: {
      const auto values = kb ? kb_values(*kb, m.entities, m.attribute) : m.values;
      for (int v : values) out.push_back(vocab.value(v));
      break;
    }
    case Task::sorting: {
      const auto values = kb ? kb_values(*kb, m.entities, m.attribute) : m.values;
      for (std::size_t i = 0; i < m.entities.size(); ++i) {
        out.push_back(vocab.entity(m.entities[i]));
        out.push_back(vocab.value(values[i]));
        out.push_back(vocab.sep());
      }
      break;
    }
    case Task::intersection: {
      if (!kb || !split) throw std::invalid_argument("intersection trace needs the KB and split");
      const auto lists = candidate_lists(ex, *kb, *split);
      auto emit_lists = [&] {
        for (std::size_t i = 0; i < lists.size(); ++i) {
          out.push_back(vocab.attribute(m.conditions[i].first));
          out.push_back(vocab.value(m.conditions[i].second));
          for (int e : lists[i]) out.push_back(vocab.entity(e));
          out.push_back(vocab.sep());
        }
      };
      auto emit_count = [&](bool repeat) {
        std::map<int, int> multiplicity;
        for (const auto& l : lists) {
          for (int e : l) ++multiplicity[e];
        }
        out.push_back(vocab.count_marker());
        for (const auto& [e, c] : multiplicity) {
          if (repeat) {
            for (int i = 0; i < c; ++i) out.push_back(vocab.entity(e));
          } else if (c == static_cast<int>(lists.size())) {
            out.push_back(vocab.entity(e));
          }
        }
        out.push_back(vocab.sep());
      };
      switch (resolve_intersection_template(m.cot_template)) {
        case CotTemplate::count_retrieve_answer:
          emit_count(false);
          emit_lists();
          break;
        case CotTemplate::retrieve_count_answer:
          emit_lists();
          emit_count(false);
          break;
        case CotTemplate::retrieve_count_repeat_answer:
          emit_lists();
          emit_count(true);
          break;
        default:
          emit_lists();
          break;
      }
      break;
    }
    case Task::composition:
      for (std::size_t i = 1; i + 1 < m.path.size(); ++i) out.push_back(vocab.entity(m.path[i]));
      break;
    default:
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison / sorting

GenResult gen_comparison(const AttrKB& kb, const EntitySplit& split, const Vocabulary& vocab,
                         int k, PoolBudget budget, std::uint64_t seed, Mode mode) {
  if (k < 2) throw std::invalid_argument("comparison needs k >= 2");
  GenResult res;
  for (int a = 0; a < kb.n_attributes; ++a) {
    for (SplitTag tag : kAllTags) {
      const int b = pool_budget(budget, tag);
      if (b <= 0) continue;
      auto rng = make_rng(seed, "comparison",
                          static_cast<std::uint64_t>(a) * 3 + static_cast<std::uint64_t>(tag));
      auto draw = draw_tuples(split, tag, kb.n_entities, k, b, rng, [&](const std::vector<int>& c) {
        const auto v = kb_values(kb, c, a);
        return unique_extreme(v, true) && unique_extreme(v, false);
      });
      if (draw.exhausted) note_exhaustion(res, "comparison", tag, k, a, draw.tuples.size(), b);
      for (const auto& ents : draw.tuples) {
        const auto values = kb_values(kb, ents, a);
        for (bool take_max : {true, false}) {
          Example ex;
          ex.task = Task::comparison;
          ex.k = k;
          ex.split = tag;
          ex.meta.attribute = a;
          ex.meta.take_max = take_max;
          ex.meta.entities = ents;
          ex.meta.values = values;
          ex.meta.answer_entity = ents[argext(values, take_max)];
          ex.query.push_back(take_max ? vocab.max_head(a) : vocab.min_head(a));
          ex.query.push_back(vocab.q());
          for (int e : ents) ex.query.push_back(vocab.entity(e));
          ex.query.push_back(vocab.mask());
          if (mode == Mode::cot) ex.trace = render_trace(ex, vocab, nullptr, nullptr);
          ex.answer = render_answer(ex, vocab);
          res.examples.push_back(std::move(ex));
        }
      }
    }
  }
  return res;
}

GenResult gen_sorting(const AttrKB& kb, const EntitySplit& split, const Vocabulary& vocab, int k,
                      PoolBudget budget, std::uint64_t seed, Mode mode) {
  if (k < 2) throw std::invalid_argument("sorting needs k >= 2");
  GenResult res;
  for (int a = 0; a < kb.n_attributes; ++a) {
    for (SplitTag tag : kAllTags) {
      const int b = pool_budget(budget, tag);
      if (b <= 0) continue;
      auto rng = make_rng(seed, "sorting",
                          static_cast<std::uint64_t>(a) * 3 + static_cast<std::uint64_t>(tag));
      auto draw = draw_tuples(split, tag, kb.n_entities, k, b, rng, [&](const std::vector<int>& c) {
        auto v = kb_values(kb, c, a);
        std::sort(v.begin(), v.end());
        return std::adjacent_find(v.begin(), v.end()) == v.end();
      });
      if (draw.exhausted) note_exhaustion(res, "sorting", tag, k, a, draw.tuples.size(), b);
      for (const auto& ents : draw.tuples) {
        Example ex;
        ex.task = Task::sorting;
        ex.k = k;
        ex.split = tag;
        ex.meta.attribute = a;
        ex.meta.entities = ents;
        ex.meta.values = kb_values(kb, ents, a);
        ex.meta.permutation = ascending_order(ex.meta.values);
        ex.query = {vocab.sort_head(), vocab.attribute(a), vocab.q()};
        for (int e : ents) ex.query.push_back(vocab.entity(e));
        ex.query.push_back(vocab.mask());
        if (mode == Mode::cot) ex.trace = render_trace(ex, vocab, nullptr, nullptr);
        ex.answer = render_answer(ex, vocab);
        res.examples.push_back(std::move(ex));
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Intersection

IntersectionResult gen_intersection(std::uint64_t seed, int n_entities, int n_attributes,
                                    ValueRange values, const EntitySplit& split,
                                    const Vocabulary& vocab, int k, PoolBudget budget, Mode mode,
                                    CotTemplate cot_template) {
  if (k < 2) throw std::invalid_argument("intersection needs k >= 2");
  if (k > n_attributes) {
    throw std::invalid_argument("intersection needs at least k distinct attributes");
  }
  if (values.hi < values.lo) throw std::invalid_argument("empty value range");
  cot_template = resolve_intersection_template(cot_template);

  constexpr int kUnset = INT_MIN;
  AttrKB kb;
  kb.n_entities = n_entities;
  kb.n_attributes = n_attributes;
  kb.value_range = values;
  kb.sign_mode = SignMode::nonnegative;
  kb.values.assign(static_cast<std::size_t>(n_entities) * n_attributes, kUnset);

  struct Candidate {
    int answer;
    std::vector<std::pair<int, int>> conditions;
    SplitTag tag;
  };
  auto sample_conditions = [&](Pcg32& rng, int answer, bool read_kb) {
    auto attrs = random_subset(rng, n_attributes, k);
    rng.shuffle(std::span<int>(attrs));
    std::vector<std::pair<int, int>> conds;
    for (int a : attrs) {
      const int v = read_kb ? kb.at(answer, a) : static_cast<int>(rng.uniform_int(values.lo, values.hi));
      conds.emplace_back(a, v);
    }
    return conds;
  };

  const SplitTag tags[] = {SplitTag::id, SplitTag::ood};
  std::vector<Candidate> stamped;
  std::map<SplitTag, long long> attempts;

  // Stamp provisional answers into the empty matrix.
  for (SplitTag tag : tags) {
    const int b = pool_budget(budget, tag);
    const auto& pool = split.pool(tag);
    if (b <= 0 || pool.empty()) continue;
    auto rng = make_rng(seed, "intersection_stamp", static_cast<std::uint64_t>(tag));
    for (int i = 0; i < b; ++i) {
      ++attempts[tag];
      const int answer = pool[rng.uniform(pool.size())];
      auto conds = sample_conditions(rng, answer, false);
      bool conflict = false;
      for (const auto& [a, v] : conds) {
        const int cur = kb.at(answer, a);
        if (cur != kUnset && cur != v) conflict = true;
      }
      if (conflict) continue;
      for (const auto& [a, v] : conds) kb.set(answer, a, v);
      stamped.push_back({answer, std::move(conds), tag});
    }
  }
  {
    auto rng = make_rng(seed, "intersection_fill");
    for (auto& x : kb.values) {
      if (x == kUnset) x = static_cast<int>(rng.uniform_int(values.lo, values.hi));
    }
  }

  // (attribute, value) -> sorted entity list over the whole entity set
  std::vector<std::vector<std::vector<int>>> index(
      n_attributes, std::vector<std::vector<int>>(values.size()));
  for (int e = 0; e < n_entities; ++e) {
    for (int a = 0; a < n_attributes; ++a) index[a][kb.at(e, a) - values.lo].push_back(e);
  }
  auto satisfiers = [&](const std::vector<std::pair<int, int>>& conds) {
    std::vector<int> cur = index[conds[0].first][conds[0].second - values.lo];
    for (std::size_t i = 1; i < conds.size() && !cur.empty(); ++i) {
      const auto& other = index[conds[i].first][conds[i].second - values.lo];
      std::vector<int> next;
      std::set_intersection(cur.begin(), cur.end(), other.begin(), other.end(),
                            std::back_inserter(next));
      cur.swap(next);
    }
    return cur;
  };

  IntersectionResult out;
  std::unordered_set<std::string> keys;
  std::map<SplitTag, int> retained;
  auto try_emit = [&](int answer, std::vector<std::pair<int, int>> conds, SplitTag tag) {
    const auto sat = satisfiers(conds);
    if (sat.size() != 1 || sat[0] != answer) return;
    Example ex;
    ex.task = Task::intersection;
    ex.k = k;
    ex.split = tag;
    ex.meta.conditions = std::move(conds);
    ex.meta.answer_entity = answer;
    ex.meta.cot_template = cot_template;
    if (!keys.insert(canonical_key(ex)).second) return;
    ex.query = {vocab.intersect_head(), vocab.q()};
    for (const auto& [a, v] : ex.meta.conditions) {
      ex.query.push_back(vocab.attribute(a));
      ex.query.push_back(vocab.value(v));
    }
    ex.query.push_back(vocab.mask());
    out.gen.examples.push_back(std::move(ex));
    ++retained[tag];
  };
  for (auto& c : stamped) try_emit(c.answer, std::move(c.conditions), c.tag);

  // Top up from the filled KB until the budget or the retry cap is reached.
  for (SplitTag tag : tags) {
    const int b = pool_budget(budget, tag);
    const auto& pool = split.pool(tag);
    if (b <= 0) continue;
    auto rng = make_rng(seed, "intersection_topup", static_cast<std::uint64_t>(tag));
    const long long cap = static_cast<long long>(kRetryFactor) * b;
    while (retained[tag] < b && attempts[tag] < cap && !pool.empty()) {
      ++attempts[tag];
      const int answer = pool[rng.uniform(pool.size())];
      try_emit(answer, sample_conditions(rng, answer, true), tag);
    }
    if (retained[tag] == 0) {
      throw std::runtime_error("intersection: no query with a unique answer after " +
                               std::to_string(attempts[tag]) + " attempts (k=" +
                               std::to_string(k) + ", values [" + std::to_string(values.lo) +
                               "," + std::to_string(values.hi) + "], pool " +
                               std::string(to_string(tag)) + ")");
    }
    if (retained[tag] < b) {
      note_exhaustion(out.gen, "intersection", tag, k, 0, static_cast<std::size_t>(retained[tag]), b);
    }
  }

  for (auto& ex : out.gen.examples) {
    if (mode == Mode::cot) ex.trace = render_trace(ex, vocab, &kb, &split);
    ex.answer = render_answer(ex, vocab);
  }
  out.kb = std::move(kb);
  return out;
}

// ---------------------------------------------------------------------------
// Composition

GenResult gen_composition(const RelKB& kb, const EntitySplit& split, const Vocabulary& vocab,
                          int k, PoolBudget budget, std::uint64_t seed, Mode mode) {
  if (k < 2) throw std::invalid_argument("composition needs k >= 2");
  if (kb.dist.empty()) throw std::invalid_argument("relational KB has no distance table");
  GenResult res;
  std::unordered_set<std::string> keys;

  struct Walk {
    std::vector<int> relations;
    std::vector<int> path;
  };
  auto make_example = [&](const Walk& w, SplitTag tag) {
    Example ex;
    ex.task = Task::composition;
    ex.k = k;
    ex.split = tag;
    ex.meta.relations = w.relations;
    ex.meta.path = w.path;
    ex.meta.answer_entity = w.path.back();
    ex.query.push_back(vocab.entity(w.path.front()));
    for (int r : w.relations) ex.query.push_back(vocab.relation(r));
    if (mode == Mode::cot) ex.trace = render_trace(ex, vocab, nullptr, nullptr);
    ex.answer = render_answer(ex, vocab);
    return ex;
  };

  for (SplitTag tag : {SplitTag::id, SplitTag::ood}) {
    const int b = pool_budget(budget, tag);
    if (b <= 0) continue;
    const auto& heads = split.pool(tag);
    std::vector<char> in_pool(kb.n_entities, 0);
    for (int e : heads) in_pool[e] = 1;
    // A node at depth j must sit at graph distance exactly j from the head;
    // anything closer admits a shortcut to the tail.
    auto step_ok = [&](int head, int next, int depth) {
      return next != kNoEdge && in_pool[next] && kb.distance(head, next) == depth;
    };
    auto rng = make_rng(seed, "composition", static_cast<std::uint64_t>(tag));
    int got = 0;
    auto accept = [&](const Walk& w) {
      if (got >= b) return;
      Example ex = make_example(w, tag);
      if (!keys.insert(canonical_key(ex)).second) return;
      res.examples.push_back(std::move(ex));
      ++got;
    };

    const double total = static_cast<double>(heads.size()) * std::pow(kb.n_relations, k);
    if (total <= kWalkEnumerateLimit) {
      std::vector<Walk> walks;
      Walk cur;
      std::function<void(int, int)> dfs = [&](int head, int depth) {
        if (depth == k) {
          walks.push_back(cur);
          return;
        }
        const int node = cur.path.back();
        for (int r = 0; r < kb.n_relations; ++r) {
          const int next = kb.tail(r, node);
          if (!step_ok(head, next, depth + 1)) continue;
          cur.relations.push_back(r);
          cur.path.push_back(next);
          dfs(head, depth + 1);
          cur.relations.pop_back();
          cur.path.pop_back();
        }
      };
      for (int h : heads) {
        cur = Walk{{}, {h}};
        dfs(h, 0);
      }
      rng.shuffle(std::span<Walk>(walks));
      for (const auto& w : walks) accept(w);
    } else {
      const long long cap = static_cast<long long>(kRetryFactor) * b;
      for (long long attempt = 0; attempt < cap && got < b; ++attempt) {
        Walk w{{}, {heads[rng.uniform(heads.size())]}};
        bool ok = true;
        for (int depth = 1; depth <= k && ok; ++depth) {
          const int r = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(kb.n_relations)));
          const int next = kb.tail(r, w.path.back());
          ok = step_ok(w.path.front(), next, depth);
          w.relations.push_back(r);
          w.path.push_back(next);
        }
        if (ok) accept(w);
      }
    }
    if (got < b) note_exhaustion(res, "composition", tag, k, 0, static_cast<std::size_t>(got), b);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Assembly

Dataset assemble_dataset(const std::vector<Example>& atomics,
                         const std::vector<Example>& composed, double phi, Mode mode,
                         std::uint64_t seed, const AssembleOptions& options) {
  if (!(phi > 0.0)) throw std::invalid_argument("phi must be positive");
  Dataset ds;
  ds.phi = phi;
  ds.mode = mode;
  ds.n_atomics = atomics.size();
  ds.phi_base_size = options.phi_base == PhiBase::all_atomics
                         ? atomics.size()
                         : static_cast<std::size_t>(std::count_if(
                               atomics.begin(), atomics.end(),
                               [](const Example& e) { return e.split == SplitTag::id; }));
  ds.requested_composed_train =
      static_cast<std::size_t>(std::llround(phi * static_cast<double>(ds.phi_base_size)));

  std::vector<Example> id_pool;
  std::vector<Example> ood_pool;
  std::unordered_set<std::string> keys;
  for (const auto& ex : composed) {
    if (is_atomic(ex.task)) throw std::invalid_argument("atomic fact passed as composed example");
    const bool has_trace = !ex.trace.empty();
    if (has_trace != (mode == Mode::cot)) {
      throw std::invalid_argument("composed example trace does not match dataset mode");
    }
    if (!keys.insert(canonical_key(ex)).second) {
      throw std::invalid_argument("duplicate composed example: " + canonical_key(ex));
    }
    switch (ex.split) {
      case SplitTag::id: id_pool.push_back(ex); break;
      case SplitTag::ood: ood_pool.push_back(ex); break;
      case SplitTag::mix: ds.mix.push_back(ex); break;
    }
  }
  if (!composed.empty()) {
    ds.task = composed.front().task;
    ds.k = composed.front().k;
    ds.cot_template = composed.front().meta.cot_template;
  }

  auto rng = make_rng(seed, "assemble");
  rng.shuffle(std::span<Example>(id_pool));
  rng.shuffle(std::span<Example>(ood_pool));

  const std::size_t n_train = std::min(ds.requested_composed_train, id_pool.size());
  ds.capped = n_train < ds.requested_composed_train;
  ds.n_composed_train = n_train;
  ds.train = atomics;
  ds.train.insert(ds.train.end(), id_pool.begin(), id_pool.begin() + static_cast<long>(n_train));
  const std::size_t n_val =
      std::min(id_pool.size() - n_train, static_cast<std::size_t>(std::max(0, options.validation_cap)));
  ds.validation.assign(id_pool.begin() + static_cast<long>(n_train),
                       id_pool.begin() + static_cast<long>(n_train + n_val));
  std::size_t n_test = ood_pool.size();
  if (options.test_cap) n_test = std::min(n_test, static_cast<std::size_t>(*options.test_cap));
  ds.test.assign(ood_pool.begin(), ood_pool.begin() + static_cast<long>(n_test));
  return ds;
}

// ---------------------------------------------------------------------------
// Bundles

DatasetSpec DatasetSpec::defaults(Task task, int n_entities) {
  DatasetSpec s;
  s.task = task;
  s.n_entities = n_entities;
  switch (task) {
    case Task::comparison:
      s.n_attributes = 20;
      s.values = {0, 20};
      break;
    case Task::sorting:
      s.n_attributes = 20;
      s.values = {0, 100};
      break;
    case Task::intersection:
      s.n_attributes = 100;
      s.values = {0, 50};
      s.cot_template = CotTemplate::retrieve_answer;
      break;
    case Task::composition:
      s.n_attributes = 1;
      s.n_relations = 20;
      break;
    default:
      throw std::invalid_argument("no defaults for atomic tasks");
  }
  return s;
}

namespace {

int ceil_div(std::size_t a, std::size_t b) {
  return static_cast<int>((a + b - 1) / std::max<std::size_t>(b, 1));
}

}  // namespace

Bundle generate_bundle(const DatasetSpec& spec) {
  Bundle b;
  b.spec = spec;
  const bool relational = spec.task == Task::composition;

  VocabConfig vc;
  vc.n_entities = spec.n_entities;
  vc.n_attributes = spec.n_attributes;
  vc.n_relations = relational ? spec.n_relations : 0;
  vc.tasks = TaskSet::only(spec.task);
  if (spec.sign_mode == SignMode::symmetric) {
    const int m = std::max(std::abs(spec.values.lo), std::abs(spec.values.hi));
    vc.values = {-m, m};
  } else {
    vc.values = spec.values;
  }
  b.vocab = Vocabulary::build(vc);
  b.split = split_entities(derive_seed(spec.seed, "split"), spec.n_entities, spec.id_ratio);

  // Atomic-fact count is known before the KB exists.
  const std::size_t n_atomics_all =
      relational ? static_cast<std::size_t>(spec.edge_budget.value_or(spec.n_entities * spec.n_relations))
                 : static_cast<std::size_t>(spec.n_entities) * spec.n_attributes;
  const double id_frac = static_cast<double>(b.split.id_entities.size()) / spec.n_entities;
  const std::size_t base = spec.phi_base == PhiBase::all_atomics
                               ? n_atomics_all
                               : static_cast<std::size_t>(std::ceil(n_atomics_all * id_frac));
  const auto requested = static_cast<std::size_t>(std::llround(spec.phi * static_cast<double>(base)));
  const std::size_t id_needed = requested + static_cast<std::size_t>(spec.validation_cap);
  const std::size_t ood_needed =
      spec.test_cap ? static_cast<std::size_t>(*spec.test_cap) : id_needed;

  PoolBudget budget;
  const std::uint64_t gen_seed = derive_seed(spec.seed, "generate");
  std::vector<Example> atomics;
  GenResult gen;
  switch (spec.task) {
    case Task::comparison:
    case Task::sorting: {
      const std::size_t per_tuple = spec.task == Task::comparison ? 2 : 1;
      const std::size_t shards = per_tuple * static_cast<std::size_t>(spec.n_attributes);
      budget.id = ceil_div(id_needed, shards) + 1;
      budget.ood = ceil_div(ood_needed, shards) + 1;
      budget.mix = spec.include_mix ? budget.ood : 0;
      b.attr_kb = build_attr_kb(derive_seed(spec.seed, "kb"), spec.n_entities, spec.n_attributes,
                                spec.values, spec.sign_mode);
      atomics = enumerate_atomic_facts(*b.attr_kb, b.split, b.vocab);
      gen = spec.task == Task::comparison
                ? gen_comparison(*b.attr_kb, b.split, b.vocab, spec.k, budget, gen_seed, spec.mode)
                : gen_sorting(*b.attr_kb, b.split, b.vocab, spec.k, budget, gen_seed, spec.mode);
      break;
    }
    case Task::intersection: {
      budget.id = static_cast<int>(id_needed);
      budget.ood = static_cast<int>(ood_needed);
      auto res = gen_intersection(gen_seed, spec.n_entities, spec.n_attributes, spec.values,
                                  b.split, b.vocab, spec.k, budget, spec.mode, spec.cot_template);
      b.attr_kb = std::move(res.kb);
      atomics = enumerate_atomic_facts(*b.attr_kb, b.split, b.vocab);
      gen = std::move(res.gen);
      break;
    }
    case Task::composition: {
      budget.id = static_cast<int>(id_needed);
      budget.ood = static_cast<int>(ood_needed);
      b.rel_kb = build_rel_kb(derive_seed(spec.seed, "kb"), spec.n_entities, spec.n_relations,
                              spec.edge_budget);
      atomics = enumerate_atomic_facts(*b.rel_kb, b.split, b.vocab);
      gen = gen_composition(*b.rel_kb, b.split, b.vocab, spec.k, budget, gen_seed, spec.mode);
      break;
    }
    default:
      throw std::invalid_argument("cannot generate a dataset for atomic tasks");
  }
  b.warnings = gen.warnings;

  AssembleOptions opts;
  opts.phi_base = spec.phi_base;
  opts.validation_cap = spec.validation_cap;
  opts.test_cap = spec.test_cap;
  b.data = assemble_dataset(atomics, gen.examples, spec.phi, spec.mode,
                            derive_seed(spec.seed, "assemble"), opts);
  b.data.task = spec.task;
  b.data.k = spec.k;
  if (spec.task == Task::intersection) b.data.cot_template = resolve_intersection_template(spec.cot_template);
  if (b.data.capped) {
    b.warnings.push_back("composed ID pool smaller than requested: " +
                         std::to_string(b.data.n_composed_train) + " of " +
                         std::to_string(b.data.requested_composed_train));
  }
  return b;
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"task", to_string(s.task)},
                     {"k", s.k},
                     {"phi", s.phi},
                     {"mode", to_string(s.mode)},
                     {"template", to_string(s.cot_template)},
                     {"seed", s.seed},
                     {"n_entities", s.n_entities},
                     {"n_attributes", s.n_attributes},
                     {"n_relations", s.n_relations},
                     {"value_lo", s.values.lo},
                     {"value_hi", s.values.hi},
                     {"sign_mode", s.sign_mode == SignMode::symmetric ? "symmetric" : "nonnegative"},
                     {"id_ratio", s.id_ratio},
                     {"include_mix", s.include_mix},
                     {"phi_base", s.phi_base == PhiBase::all_atomics ? "all" : "id"},
                     {"validation_cap", s.validation_cap},
                     {"test_cap", s.test_cap ? nlohmann::json(*s.test_cap) : nlohmann::json()},
                     {"edge_budget", s.edge_budget ? nlohmann::json(*s.edge_budget) : nlohmann::json()}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s.task = parse_task(j.at("task").get<std::string>());
  s.k = j.at("k");
  s.phi = j.at("phi");
  s.mode = parse_mode(j.at("mode").get<std::string>());
  s.cot_template = parse_template(j.at("template").get<std::string>());
  s.seed = j.at("seed");
  s.n_entities = j.at("n_entities");
  s.n_attributes = j.at("n_attributes");
  s.n_relations = j.at("n_relations");
  s.values = {j.at("value_lo"), j.at("value_hi")};
  s.sign_mode = j.at("sign_mode") == "symmetric" ? SignMode::symmetric : SignMode::nonnegative;
  s.id_ratio = j.at("id_ratio");
  s.include_mix = j.at("include_mix");
  s.phi_base = j.at("phi_base") == "id" ? PhiBase::id_atomics : PhiBase::all_atomics;
  s.validation_cap = j.at("validation_cap");
  s.test_cap = j.at("test_cap").is_null() ? std::nullopt : std::optional<int>(j.at("test_cap").get<int>());
  s.edge_budget = j.at("edge_budget").is_null() ? std::nullopt
                                                : std::optional<int>(j.at("edge_budget").get<int>());
}

void write_bundle(const Bundle& b, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  b.vocab.write((root / "vocab.txt").string());
  nlohmann::json kb = b.attr_kb ? nlohmann::json(*b.attr_kb) : nlohmann::json(*b.rel_kb);
  std::ofstream((root / "kb.json").string()) << kb.dump() << '\n';
  std::ofstream((root / "split.json").string()) << nlohmann::json(b.split).dump() << '\n';
  write_jsonl_file((root / "train.jsonl").string(), b.data.train);
  write_jsonl_file((root / "validation.jsonl").string(), b.data.validation);
  write_jsonl_file((root / "test.jsonl").string(), b.data.test);
  write_jsonl_file((root / "mix.jsonl").string(), b.data.mix);

  nlohmann::json manifest{
      {"format", "groklab-dataset/1"},
      {"spec", b.spec},
      {"seed", b.spec.seed},
      {"phi", b.spec.phi},
      {"mode", to_string(b.spec.mode)},
      {"template", to_string(b.data.cot_template)},
      {"kb_hash", b.attr_kb ? kb_hash(*b.attr_kb) : kb_hash(*b.rel_kb)},
      {"counts",
       {{"atomics", b.data.n_atomics},
        {"phi_base", b.data.phi_base_size},
        {"composed_train", b.data.n_composed_train},
        {"requested_composed_train", b.data.requested_composed_train},
        {"train", b.data.train.size()},
        {"validation", b.data.validation.size()},
        {"test", b.data.test.size()},
        {"mix", b.data.mix.size()}}},
      {"capped", b.data.capped},
      {"warnings", b.warnings}};
  std::ofstream((root / "manifest.json").string()) << manifest.dump(2) << '\n';
}

Bundle read_bundle(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  auto load = [&](const char* name) {
    std::ifstream is((root / name).string());
    if (!is) throw std::runtime_error("missing " + (root / name).string());
    return nlohmann::json::parse(is);
  };
  Bundle b;
  const auto manifest = load("manifest.json");
  b.spec = manifest.at("spec").get<DatasetSpec>();
  b.vocab = Vocabulary::read((root / "vocab.txt").string());
  b.split = load("split.json").get<EntitySplit>();
  const auto kb = load("kb.json");
  if (kb.at("kind") == "relational") {
    b.rel_kb = kb.get<RelKB>();
  } else {
    b.attr_kb = kb.get<AttrKB>();
  }
  b.data.task = b.spec.task;
  b.data.k = b.spec.k;
  b.data.phi = b.spec.phi;
  b.data.mode = b.spec.mode;
  b.data.cot_template = parse_template(manifest.at("template").get<std::string>());
  b.data.train = read_jsonl_file((root / "train.jsonl").string());
  b.data.validation = read_jsonl_file((root / "validation.jsonl").string());
  b.data.test = read_jsonl_file((root / "test.jsonl").string());
  b.data.mix = read_jsonl_file((root / "mix.jsonl").string());
  const auto& counts = manifest.at("counts");
  b.data.n_atomics = counts.at("atomics");
  b.data.phi_base_size = counts.at("phi_base");
  b.data.n_composed_train = counts.at("composed_train");
  b.data.requested_composed_train = counts.at("requested_composed_train");
  b.data.capped = manifest.at("capped");
  b.warnings = manifest.at("warnings").get<std::vector<std::string>>();
  return b;
}

const std::vector<Example>& dataset_split(const Dataset& data, std::string_view name) {
  if (name == "train") return data.train;
  if (name == "validation" || name == "id_val") return data.validation;
  if (name == "test" || name == "ood_test") return data.test;
  if (name == "mix") return data.mix;
  throw std::invalid_argument("unknown split: " + std::string(name));
}

}  // namespace groklab
