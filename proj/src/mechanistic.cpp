#include "groklab/mechanistic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace groklab {

HiddenCache<float> extract_hidden(const Parameters& params, const Example& ex, int eos,
                                  bool with_target) {
  HiddenCache<float> cache;
  const auto tokens = with_target ? ex.sequence(eos) : ex.query;
  forward<float>(params, tokens, &cache);
  return cache;
}

std::string_view to_string(PositionRole r) {
  return r == PositionRole::final_query_token ? "final_query_token" : "entity_token";
}

std::string_view to_string(ProbeTarget t) {
  switch (t) {
    case ProbeTarget::answer_entity: return "answer_entity";
    case ProbeTarget::fact_value: return "fact_value";
    case ProbeTarget::token_identity: return "token_identity";
  }
  return "?";
}

PositionRole parse_position_role(std::string_view s) {
  if (s == "final_query_token" || s == "final") return PositionRole::final_query_token;
  if (s == "entity_token" || s == "entity") return PositionRole::entity_token;
  throw std::invalid_argument("unknown position role: " + std::string(s));
}

ProbeTarget parse_probe_target(std::string_view s) {
  if (s == "answer_entity" || s == "answer") return ProbeTarget::answer_entity;
  if (s == "fact_value" || s == "fact") return ProbeTarget::fact_value;
  if (s == "token_identity" || s == "token") return ProbeTarget::token_identity;
  throw std::invalid_argument("unknown probe target: " + std::string(s));
}

std::optional<int> probe_position(const Example& ex, const ProbeSpec& spec) {
  if (ex.query.empty()) return std::nullopt;
  if (spec.role == PositionRole::final_query_token) return static_cast<int>(ex.query.size()) - 1;
  const int i = spec.entity_slot;
  if (i < 0) return std::nullopt;
  int pos = -1;
  switch (ex.task) {
    case Task::comparison: pos = i < ex.k ? 2 + i : -1; break;
    case Task::sorting: pos = i < ex.k ? 3 + i : -1; break;
    case Task::composition:
    case Task::attribute_fact:
    case Task::relation_fact: pos = i == 0 ? 0 : -1; break;
    case Task::intersection: pos = -1; break;
  }
  if (pos < 0 || pos >= static_cast<int>(ex.query.size())) return std::nullopt;
  return pos;
}

std::optional<int> probe_label(const Example& ex, const ProbeSpec& spec, const Vocabulary& vocab) {
  switch (spec.target) {
    case ProbeTarget::answer_entity: {
      if (ex.answer.empty() || !vocab.entities().contains(ex.answer.front())) return std::nullopt;
      return vocab.entity_index(ex.answer.front());
    }
    case ProbeTarget::fact_value: {
      const int i = spec.entity_slot;
      if (ex.task == Task::attribute_fact) {
        if (ex.answer.empty() || !vocab.values().contains(ex.answer.front())) return std::nullopt;
        return ex.answer.front() - vocab.values().begin;
      }
      if (i < 0 || i >= static_cast<int>(ex.meta.values.size())) return std::nullopt;
      return ex.meta.values[i] - vocab.value_range().lo;
    }
    case ProbeTarget::token_identity: {
      const auto pos = probe_position(ex, spec);
      if (!pos) return std::nullopt;
      return ex.query[*pos];
    }
  }
  return std::nullopt;
}

ProbeData build_probe_data(const Parameters& params, std::span<const Example> examples,
                           const ProbeSpec& spec, const Vocabulary& vocab) {
  if (spec.layer < 0 || spec.layer > params.config.n_layers) {
    throw std::invalid_argument("probe layer out of range");
  }
  ProbeData d;
  switch (spec.target) {
    case ProbeTarget::answer_entity: d.n_classes = vocab.entities().size(); break;
    case ProbeTarget::fact_value: d.n_classes = vocab.values().size(); break;
    case ProbeTarget::token_identity: d.n_classes = vocab.size(); break;
  }
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto& ex : examples) {
    const auto pos = probe_position(ex, spec);
    const auto label = probe_label(ex, spec, vocab);
    if (!pos || !label) continue;
    const auto cache = extract_hidden(params, ex, vocab.eos());
    rows.push_back(cache.states[spec.layer].row(*pos).cast<double>());
    d.labels.push_back(*label);
  }
  d.features.resize(static_cast<Eigen::Index>(rows.size()), params.config.hidden_dim);
  for (std::size_t i = 0; i < rows.size(); ++i) d.features.row(static_cast<Eigen::Index>(i)) = rows[i];
  return d;
}

namespace {

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd p = z;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

std::vector<int> argmax_rows(const Eigen::MatrixXd& z) {
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    Eigen::Index c = 0;
    z.row(r).maxCoeff(&c);
    out[static_cast<std::size_t>(r)] = static_cast<int>(c);
  }
  return out;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& gold) {
  if (gold.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += pred[i] == gold[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

}  // namespace

std::vector<int> probe_predict(const ProbeResult& probe, const Eigen::MatrixXd& features) {
  const Eigen::MatrixXd x =
      (features.rowwise() - probe.mean).array().rowwise() / probe.scale.array();
  Eigen::MatrixXd z = x * probe.weights;
  z.rowwise() += probe.bias;
  return argmax_rows(z);
}

ProbeResult train_probe(const ProbeData& data, const ProbeConfig& cfg, ProbeSpec spec) {
  const auto n = static_cast<std::size_t>(data.features.rows());
  if (data.labels.size() != n) throw std::invalid_argument("probe labels and features differ in count");
  if (n < 2) throw std::invalid_argument("probe needs at least two examples");
  if (data.n_classes < 2) throw std::invalid_argument("probe needs at least two classes");
  for (int y : data.labels) {
    if (y < 0 || y >= data.n_classes) throw std::invalid_argument("probe label out of range");
  }
  {
    auto sorted = data.labels;
    std::sort(sorted.begin(), sorted.end());
    if (sorted.front() == sorted.back()) throw std::invalid_argument("probe labels have a single class");
  }

  auto rng = make_rng(cfg.seed, "probe-split");
  std::vector<int> labels = data.labels;
  if (cfg.shuffle_labels) {
    auto null_rng = make_rng(cfg.seed, "probe-shuffle");
    null_rng.shuffle(std::span<int>(labels));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n))), 1, n - 1);

  const auto d = data.features.cols();
  const int C = data.n_classes;
  Eigen::MatrixXd xtr(static_cast<Eigen::Index>(n_train), d);
  Eigen::MatrixXd xte(static_cast<Eigen::Index>(n - n_train), d);
  std::vector<int> ytr, yte;
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = static_cast<Eigen::Index>(order[i]);
    if (i < n_train) {
      xtr.row(static_cast<Eigen::Index>(i)) = data.features.row(src);
      ytr.push_back(labels[order[i]]);
    } else {
      xte.row(static_cast<Eigen::Index>(i - n_train)) = data.features.row(src);
      yte.push_back(labels[order[i]]);
    }
  }

  ProbeResult res;
  res.spec = spec;
  res.n_train = n_train;
  res.n_test = n - n_train;
  res.n_classes = C;
  res.mean = xtr.colwise().mean();
  res.scale = ((xtr.rowwise() - res.mean).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (!(res.scale(j) > 1e-12)) res.scale(j) = 1.0;
  }
  const Eigen::MatrixXd x = (xtr.rowwise() - res.mean).array().rowwise() / res.scale.array();

  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(x.rows(), C);
  for (std::size_t i = 0; i < ytr.size(); ++i) onehot(static_cast<Eigen::Index>(i), ytr[i]) = 1.0;
  res.weights = Eigen::MatrixXd::Zero(d, C);
  res.bias = Eigen::RowVectorXd::Zero(C);
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  for (int it = 0; it < cfg.iterations; ++it) {
    Eigen::MatrixXd z = x * res.weights;
    z.rowwise() += res.bias;
    const Eigen::MatrixXd err = softmax_rows(z) - onehot;
    const Eigen::MatrixXd gw = inv_n * (x.transpose() * err) + cfg.l2 * res.weights;
    const Eigen::RowVectorXd gb = inv_n * err.colwise().sum();
    res.weights -= cfg.step_size * gw;
    res.bias -= cfg.step_size * gb;
  }

  res.train_acc = accuracy(probe_predict(res, xtr), ytr);
  const auto pred = probe_predict(res, xte);
  res.test_acc = accuracy(pred, yte);
  std::vector<double> p_pred(static_cast<std::size_t>(C), 0.0), p_test(static_cast<std::size_t>(C), 0.0);
  for (std::size_t i = 0; i < yte.size(); ++i) {
    p_pred[static_cast<std::size_t>(pred[i])] += 1.0 / static_cast<double>(yte.size());
    p_test[static_cast<std::size_t>(yte[i])] += 1.0 / static_cast<double>(yte.size());
  }
  for (int c = 0; c < C; ++c) res.chance += p_pred[c] * p_test[c];
  res.chance_sigma = std::sqrt(res.chance * (1.0 - res.chance) / static_cast<double>(yte.size()));
  return res;
}

// ---------------------------------------------------------------------------
// Corruption

namespace {

bool unique_extreme(const std::vector<int>& v, bool take_max, int& index) {
  index = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (take_max ? v[i] > v[index] : v[i] < v[index]) index = static_cast<int>(i);
  }
  return std::count(v.begin(), v.end(), v[index]) == 1;
}

std::optional<PatchPair> corrupt_entity_tuple(const Example& clean, const Bundle& b, Pcg32& rng) {
  if (!b.attr_kb) throw std::invalid_argument("attribute KB required for corruption");
  const auto& kb = *b.attr_kb;
  const int a = clean.meta.attribute;
  const int offset = clean.task == Task::comparison ? 2 : 3;
  std::vector<int> slots(clean.meta.entities.size());
  std::iota(slots.begin(), slots.end(), 0);
  rng.shuffle(std::span<int>(slots));
  for (int i : slots) {
    const auto& pool = b.split.pool(b.split.tag_of[clean.meta.entities[i]]);
    std::vector<std::pair<int, std::vector<int>>> candidates;  // (entity, new values)
    for (int e : pool) {
      if (std::find(clean.meta.entities.begin(), clean.meta.entities.end(), e) !=
          clean.meta.entities.end()) {
        continue;
      }
      auto vals = clean.meta.values;
      vals[i] = kb.at(e, a);
      if (clean.task == Task::comparison) {
        int w = 0;
        if (!unique_extreme(vals, clean.meta.take_max, w)) continue;
        auto ents = clean.meta.entities;
        ents[i] = e;
        if (ents[w] == clean.meta.answer_entity) continue;
      } else {
        auto sorted = vals;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) continue;
      }
      candidates.emplace_back(e, std::move(vals));
    }
    if (candidates.empty()) continue;
    const auto& [e, vals] = candidates[rng.uniform(candidates.size())];
    PatchPair p;
    p.clean = clean;
    p.corrupt = clean;
    p.corrupt.trace.clear();
    p.corrupt.meta.entities[i] = e;
    p.corrupt.meta.values = vals;
    p.corrupted_position = offset + i;
    p.corrupt.query[static_cast<std::size_t>(p.corrupted_position)] = b.vocab.entity(e);
    if (clean.task == Task::comparison) {
      int w = 0;
      unique_extreme(vals, clean.meta.take_max, w);
      p.corrupt.meta.answer_entity = p.corrupt.meta.entities[w];
      p.corrupt.answer = {b.vocab.entity(p.corrupt.meta.answer_entity)};
    } else {
      std::vector<int> order(vals.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](int x, int y) { return vals[x] < vals[y]; });
      p.corrupt.meta.permutation = order;
      p.corrupt.answer.clear();
      for (int j : order) p.corrupt.answer.push_back(b.vocab.entity(p.corrupt.meta.entities[j]));
    }
    return p;
  }
  return std::nullopt;
}

std::optional<PatchPair> corrupt_composition(const Example& clean, const Bundle& b, Pcg32& rng) {
  if (!b.rel_kb) throw std::invalid_argument("relational KB required for corruption");
  const auto& kb = *b.rel_kb;
  const int head = clean.meta.path.front();
  std::vector<std::pair<int, int>> candidates;  // (new head, new tail)
  for (int e : b.split.pool(b.split.tag_of[head])) {
    if (e == head) continue;
    int node = e;
    for (int r : clean.meta.relations) {
      node = kb.tail(r, node);
      if (node == kNoEdge) break;
    }
    if (node == kNoEdge || node == clean.meta.answer_entity) continue;
    candidates.emplace_back(e, node);
  }
  if (candidates.empty()) return std::nullopt;
  const auto [e, tail] = candidates[rng.uniform(candidates.size())];
  PatchPair p;
  p.clean = clean;
  p.corrupt = clean;
  p.corrupt.trace.clear();
  p.corrupted_position = 0;
  p.corrupt.query[0] = b.vocab.entity(e);
  p.corrupt.meta.path = {e};
  p.corrupt.meta.answer_entity = tail;
  p.corrupt.answer = {b.vocab.entity(tail)};
  return p;
}

std::optional<PatchPair> corrupt_intersection(const Example& clean, const Bundle& b, Pcg32& rng) {
  if (!b.attr_kb) throw std::invalid_argument("attribute KB required for corruption");
  const auto& kb = *b.attr_kb;
  const auto range = kb.value_range;
  std::vector<int> slots(clean.meta.conditions.size());
  std::iota(slots.begin(), slots.end(), 0);
  rng.shuffle(std::span<int>(slots));
  for (int i : slots) {
    std::vector<std::pair<int, int>> candidates;  // (value, unique satisfier)
    for (int v = range.lo; v <= range.hi; ++v) {
      if (v == clean.meta.conditions[i].second) continue;
      auto conds = clean.meta.conditions;
      conds[i].second = v;
      int found = -1, count = 0;
      for (int e = 0; e < kb.n_entities && count < 2; ++e) {
        bool ok = true;
        for (const auto& [a, val] : conds) ok = ok && kb.at(e, a) == val;
        if (ok) {
          found = e;
          ++count;
        }
      }
      if (count == 1 && found != clean.meta.answer_entity) candidates.emplace_back(v, found);
    }
    if (candidates.empty()) continue;
    const auto [v, ans] = candidates[rng.uniform(candidates.size())];
    PatchPair p;
    p.clean = clean;
    p.corrupt = clean;
    p.corrupt.trace.clear();
    p.corrupt.meta.conditions[i].second = v;
    p.corrupt.meta.answer_entity = ans;
    p.corrupted_position = 3 + 2 * i;
    p.corrupt.query[static_cast<std::size_t>(p.corrupted_position)] = b.vocab.value(v);
    p.corrupt.answer = {b.vocab.entity(ans)};
    return p;
  }
  return std::nullopt;
}

}  // namespace

std::optional<PatchPair> make_patch_pair(const Example& clean, const Bundle& bundle, Pcg32& rng,
                                         int pair_id) {
  std::optional<PatchPair> p;
  switch (clean.task) {
    case Task::comparison:
    case Task::sorting: p = corrupt_entity_tuple(clean, bundle, rng); break;
    case Task::composition: p = corrupt_composition(clean, bundle, rng); break;
    case Task::intersection: p = corrupt_intersection(clean, bundle, rng); break;
    default: throw std::invalid_argument("corruption is defined for composed tasks only");
  }
  if (p) p->pair_id = pair_id;
  return p;
}

// ---------------------------------------------------------------------------
// Patching

std::vector<PatchPair> collect_patch_pairs(std::span<const Example> examples, const Bundle& bundle,
                                           int max_pairs, Pcg32& rng) {
  const int eos = bundle.vocab.eos();
  std::vector<PatchPair> pairs;
  std::size_t len = 0;
  for (const auto& ex : examples) {
    if (static_cast<int>(pairs.size()) >= max_pairs) break;
    if (len && ex.sequence(eos).size() != len) continue;
    auto p = make_patch_pair(ex, bundle, rng, static_cast<int>(pairs.size()));
    if (!p) continue;
    len = ex.sequence(eos).size();
    pairs.push_back(std::move(*p));
  }
  return pairs;
}

PatchScoring patch_scoring(const PatchPair& pair, int eos) {
  if (pair.clean.query.size() != pair.corrupt.query.size()) {
    throw std::invalid_argument("clean and corrupt queries differ in length");
  }
  PatchScoring s;
  s.clean_sequence = pair.clean.sequence(eos);
  s.corrupt_sequence = s.clean_sequence;
  std::copy(pair.corrupt.query.begin(), pair.corrupt.query.end(), s.corrupt_sequence.begin());
  const int start = static_cast<int>(pair.clean.query.size() + pair.clean.trace.size());
  for (int i = 0; i < static_cast<int>(pair.clean.answer.size()); ++i) s.answer_positions.push_back(start + i);
  return s;
}

double answer_logprob(const Matrix<float>& logits, const PatchScoring& s,
                      const std::vector<int>& tokens) {
  double total = 0.0;
  for (int pos : s.answer_positions) total += log_prob<float>(logits, pos - 1, tokens[pos]);
  return total;
}

namespace {

struct PairRuns {
  HiddenCache<float> clean, corrupt;
  double clean_lp = 0.0, corrupt_lp = 0.0;
};

PairRuns run_pair(const Parameters& params, const PatchScoring& s) {
  if (s.clean_sequence.size() != s.corrupt_sequence.size()) {
    throw std::invalid_argument("clean and corrupt sequences differ in length");
  }
  PairRuns r;
  r.clean_lp = answer_logprob(forward<float>(params, s.clean_sequence, &r.clean), s, s.clean_sequence);
  r.corrupt_lp =
      answer_logprob(forward<float>(params, s.corrupt_sequence, &r.corrupt), s, s.clean_sequence);
  return r;
}

double patched_effect(const Parameters& params, const PatchScoring& s, const PairRuns& r, int layer,
                      int position) {
  if (layer < 0 || layer > params.config.n_layers) throw std::invalid_argument("patch layer out of range");
  if (position < 0 || position >= static_cast<int>(s.clean_sequence.size())) {
    throw std::invalid_argument("patch position out of range");
  }
  Matrix<float> state = r.clean.states[layer];
  state.row(position) = r.corrupt.states[layer].row(position);
  const auto logits = forward_from<float>(params, layer, state);
  return r.clean_lp - answer_logprob(logits, s, s.clean_sequence);
}

}  // namespace

double causal_patch(const Parameters& params, const PatchScoring& s, int layer, int position) {
  return patched_effect(params, s, run_pair(params, s), layer, position);
}

std::vector<std::string> role_labels(const Example& ex, Mode mode) {
  std::vector<std::string> out;
  auto idx = [](const char* p, std::size_t i) { return std::string(p) + std::to_string(i + 1); };
  switch (ex.task) {
    case Task::comparison:
      out = {"a", "q"};
      for (int i = 0; i < ex.k; ++i) out.push_back(idx("e", i));
      out.push_back("mask");
      break;
    case Task::sorting:
      out = {"sort", "a", "q"};
      for (int i = 0; i < ex.k; ++i) out.push_back(idx("e", i));
      out.push_back("mask");
      break;
    case Task::intersection:
      out = {"intersect", "q"};
      for (int i = 0; i < ex.k; ++i) {
        out.push_back(idx("a", i));
        out.push_back(idx("v", i));
      }
      out.push_back("mask");
      break;
    case Task::composition:
      out = {"e_h"};
      for (int i = 0; i < ex.k; ++i) out.push_back(idx("r", i));
      break;
    case Task::attribute_fact: out = {"e", "a"}; break;
    case Task::relation_fact: out = {"e", "r"}; break;
  }
  out.resize(ex.query.size(), "x");
  if (mode == Mode::cot) {
    for (std::size_t i = 0; i < ex.trace.size(); ++i) {
      switch (ex.task) {
        case Task::comparison: out.push_back(idx("v", i) + "'"); break;
        case Task::sorting: {
          const char* part[] = {"se", "sv", "sep"};
          out.push_back(i % 3 == 2 ? std::string("sep") : idx(part[i % 3], i / 3));
          break;
        }
        case Task::composition: out.push_back(idx("b", i)); break;
        default: out.push_back(idx("t", i)); break;
      }
    }
  }
  for (std::size_t i = 0; i < ex.answer.size(); ++i) {
    out.push_back(ex.answer.size() == 1 ? std::string("ans") : idx("ans", i));
  }
  out.push_back("eos");
  return out;
}

EffectGrid patch_grid(const Parameters& params, std::span<const PatchPair> pairs, Mode mode, int eos,
                      std::vector<int> layers, std::vector<int> positions) {
  if (pairs.empty()) throw std::invalid_argument("patch grid needs at least one pair");
  const auto first = patch_scoring(pairs.front(), eos);
  const int len = static_cast<int>(first.clean_sequence.size());
  if (layers.empty()) {
    for (int l = 0; l <= params.config.n_layers; ++l) layers.push_back(l);
  }
  if (positions.empty()) {
    for (int t = 0; t < len; ++t) positions.push_back(t);
  }
  EffectGrid g;
  g.layers = layers;
  g.positions = positions;
  g.effects = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(layers.size()),
                                    static_cast<Eigen::Index>(positions.size()));
  const auto labels = role_labels(pairs.front().clean, mode);
  for (int t : positions) {
    g.position_labels.push_back(t >= 0 && t < static_cast<int>(labels.size()) ? labels[t] : "?");
  }
  for (const auto& pair : pairs) {
    const auto s = patch_scoring(pair, eos);
    if (static_cast<int>(s.clean_sequence.size()) != len) {
      throw std::invalid_argument("patch pairs must share one sequence length");
    }
    const auto runs = run_pair(params, s);
    g.clean_logprob += runs.clean_lp;
    g.corrupt_logprob += runs.corrupt_lp;
    g.pair_ids.push_back(pair.pair_id);
    for (std::size_t li = 0; li < layers.size(); ++li) {
      for (std::size_t ti = 0; ti < positions.size(); ++ti) {
        g.effects(static_cast<Eigen::Index>(li), static_cast<Eigen::Index>(ti)) +=
            patched_effect(params, s, runs, layers[li], positions[ti]);
      }
    }
  }
  const double n = static_cast<double>(pairs.size());
  g.effects /= n;
  g.clean_logprob /= n;
  g.corrupt_logprob /= n;
  return g;
}

std::string grid_csv(const EffectGrid& grid) {
  std::ostringstream os;
  os.precision(10);
  os << "layer,position,role,effect\n";
  for (std::size_t li = 0; li < grid.layers.size(); ++li) {
    for (std::size_t ti = 0; ti < grid.positions.size(); ++ti) {
      os << grid.layers[li] << ',' << grid.positions[ti] << ',' << grid.position_labels[ti] << ','
         << grid.effects(static_cast<Eigen::Index>(li), static_cast<Eigen::Index>(ti)) << '\n';
    }
  }
  return os.str();
}

}  // namespace groklab
