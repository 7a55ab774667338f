// Acceptance gate: one PASS/FAIL line per criterion. Run all of them, or pick
// with --criterion N (repeatable). Exit status is non-zero if any selected
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "datagen_audit.hpp"
#include "gradcheck.hpp"
#include "groklab/kinetics.hpp"
#include "groklab/mechanistic.hpp"
#include "groklab/metrics.hpp"
#include "groklab/pipeline.hpp"
#include "groklab/rng.hpp"
#include "groklab/trainer.hpp"
#include "synthetic_curves.hpp"

using namespace groklab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// 1. Normalized-rate golden numbers

Outcome golden_rate() {
  struct Row {
    double phi;
    int k;
    double L, k_fit, t0, printed;
  };
  const Row rows[] = {
      {3.6, 3, 0.887, 5.67, 86e3, 3.2e-5},   {3.6, 4, 0.842, 7.45, 148e3, 2.6e-5},
      {3.6, 5, 0.738, 9.97, 200e3, 2.9e-5},  {7.2, 3, 0.851, 5.33, 66e3, 4.1e-5},
      {7.2, 4, 0.834, 5.04, 121e3, 2.2e-5},  {7.2, 5, 0.775, 5.65, 183e3, 1.7e-5},
      {12.6, 3, 0.906, 6.45, 55e3, 5.7e-5},  {12.6, 4, 0.862, 6.36, 85e3, 3.8e-5},
      {12.6, 5, 0.795, 7.02, 118e3, 3.2e-5},
  };
  int matched = 0;
  std::ostringstream bad;
  for (const auto& r : rows) {
    const double got = normalized_rate(r.L, r.k_fit, r.t0);
    if (round_sig(got, 2) == round_sig(r.printed, 2)) {
      ++matched;
      continue;
    }
    // Range reachable from the rounding of the printed inputs.
    const double dl = 0.0005, dk = 0.005, dt = 500;
    const double lo = normalized_rate(r.L + dl, r.k_fit - dk, r.t0 + dt);
    const double hi = normalized_rate(r.L - dl, r.k_fit + dk, r.t0 - dt);
    bad << " mismatch phi=" << r.phi << " k=" << r.k << ": " << fmt(got, 3) << " -> "
        << fmt(round_sig(got, 2), 2) << " vs printed " << fmt(r.printed, 2) << " (input-rounding range ["
        << fmt(lo, 3) << ", " << fmt(hi, 3) << "])";
  }
  return {matched == 9, std::to_string(matched) + "/9 rows equal at 2 significant figures" + bad.str()};
}

// ---------------------------------------------------------------------------
// 2. Fit recovery on synthetic curves

Outcome fit_recovery() {
  auto rng = make_rng(2024, "acceptance-fit-recovery");
  const auto steps = testing::log_steps(50, 2.0, 6.0);
  int ok = 0;
  for (int i = 0; i < 200; ++i) {
    const auto c = testing::draw_curve(rng);
    const auto pts = testing::sample_curve(c, steps, 0.02, rng);
    ok += testing::recovered(fit_logistic(pts), c) ? 1 : 0;
  }
  return {ok >= 190, std::to_string(ok) + "/200 recovered (need >= 190)"};
}

// ---------------------------------------------------------------------------
// 3. Dataset audit at desk scale

Outcome datagen_suite() {
  std::size_t checked = 0, bundles = 0;
  std::vector<std::string> fails;
  for (Task t : {Task::comparison, Task::sorting, Task::intersection, Task::composition}) {
    std::vector<CotTemplate> templates{CotTemplate::standard};
    if (t == Task::intersection) {
      templates = {CotTemplate::retrieve_answer, CotTemplate::count_retrieve_answer,
                   CotTemplate::retrieve_count_answer, CotTemplate::retrieve_count_repeat_answer};
    }
    for (auto tmpl : templates) {
      for (Mode mode : {Mode::direct, Mode::cot}) {
        for (int k : {2, 3}) {
          auto s = DatasetSpec::defaults(t, 200);
          s.k = k;
          s.mode = mode;
          s.cot_template = tmpl;
          s.phi = 3.6;
          s.include_mix = t == Task::comparison || t == Task::sorting;
          const auto b = generate_bundle(s);
          const auto r = testing::audit_bundle(b);
          checked += r.checked;
          ++bundles;
          for (const auto& f : r.failures) {
            fails.push_back(std::string(to_string(t)) + "/" + std::string(to_string(tmpl)) + "/" +
                            std::string(to_string(mode)) + "/k" + std::to_string(k) + ": " + f);
          }
        }
      }
    }
  }
  std::string detail = std::to_string(bundles) + " datasets, " + std::to_string(checked) +
                       " examples re-solved, " + std::to_string(fails.size()) + " failures";
  for (std::size_t i = 0; i < std::min<std::size_t>(fails.size(), 5); ++i) detail += "; " + fails[i];
  return {fails.empty(), detail};
}

// ---------------------------------------------------------------------------
// 4. Gradient check

Outcome gradient_check() {
  bool ok = true;
  double worst_f = 0, worst_d = 0;
  std::string worst_f_name, worst_d_name;
  for (bool tied : {false, true}) {
    auto cfg = testing::gradcheck_config();
    cfg.tied_head = tied;
    const auto batch = testing::gradcheck_batch();
    const auto pf = init_params<float>(cfg, 17);
    const auto pd = pf.cast<double>();
    const auto numeric = testing::numeric_gradient(pd, batch, 1e-5);
    for (const auto& e : testing::compare_gradients(loss_and_grads<float>(pf, batch).grads, numeric)) {
      if (e.rel > worst_f) worst_f = e.rel, worst_f_name = e.name;
      ok = ok && e.rel <= 1e-3;
    }
    for (const auto& e : testing::compare_gradients(loss_and_grads<double>(pd, batch).grads, numeric)) {
      if (e.rel > worst_d) worst_d = e.rel, worst_d_name = e.name;
      ok = ok && e.rel <= 1e-6;
    }
  }
  return {ok, "worst block rel error float " + fmt(worst_f, 3) + " (" + worst_f_name + ", limit 1e-3), double " +
                  fmt(worst_d, 3) + " (" + worst_d_name + ", limit 1e-6); tied and untied heads"};
}

// ---------------------------------------------------------------------------
// 5 and 6. Desk training runs

Bundle desk_bundle(Mode mode) {
  auto spec = DatasetSpec::defaults(Task::comparison, 50);
  spec.n_attributes = 5;
  spec.k = 2;
  spec.phi = 3.6;
  spec.mode = mode;
  return generate_bundle(spec);
}

ModelConfig desk_model(const Bundle& b) {
  return ModelConfig::preset("desk", b.vocab.size(), longest_sequence(b.data, b.vocab.eos()));
}

Outcome memorization() {
  const auto b = desk_bundle(Mode::direct);
  const auto mc = desk_model(b);
  auto tc = TrainConfig::preset("desk");
  tc.max_steps = 5000;
  std::int64_t reached = -1;
  double best = 0, atomic = 0;
  TrainOptions o;
  o.on_eval = [&](const EvalPoint& p, std::span<const ScoreFlags>) {
    if (p.split == "train_atomic") atomic = p.acc.answer_acc;
    if (p.split != "train") return;
    best = std::max(best, p.acc.answer_acc);
    if (reached < 0 && p.acc.answer_acc >= 0.99) reached = p.step;
  };
  train(b.data, b.vocab.eos(), mc, tc, o);
  return {reached > 0 && reached <= 5000,
          "ID train answer acc >= 0.99 first at step " + std::to_string(reached) + " (best " + fmt(best) +
              ", atomic facts " + fmt(atomic) + " at end; " + std::to_string(b.data.n_composed_train) +
              " composed + " + std::to_string(b.data.n_atomics) + " atomic train examples)"};
}

Outcome cot_ordering() {
  const auto b = desk_bundle(Mode::cot);
  const auto mc = desk_model(b);
  auto tc = TrainConfig::preset("desk");
  tc.max_steps = 20000;
  tc.eval_every = 500;
  std::size_t evals = 0, batches = 0, gap_violations = 0, dominance_violations = 0;
  double min_gap = 1.0, max_gap = 0.0;
  TrainOptions o;
  o.on_eval = [&](const EvalPoint& p, std::span<const ScoreFlags> flags) {
    if (!p.acc.full_acc) return;  // atomic facts carry no trace
    ++evals;
    const double gap = p.acc.answer_acc - *p.acc.full_acc;
    min_gap = std::min(min_gap, gap);
    max_gap = std::max(max_gap, gap);
    if (gap < 0.0) ++gap_violations;
    for (std::size_t i = 0; i < flags.size(); i += 64) {
      const auto chunk = flags.subspan(i, std::min<std::size_t>(64, flags.size() - i));
      const auto rec = aggregate(chunk, b.spec.task, p.split, Mode::cot);
      ++batches;
      if (*rec.full_acc > std::min(rec.answer_acc, *rec.trace_acc)) ++dominance_violations;
      for (const auto& f : chunk) {
        if (*f.full_ok && !(f.answer_ok && *f.trace_ok)) ++dominance_violations;
      }
    }
  };
  train(b.data, b.vocab.eos(), mc, tc, o);
  return {evals > 0 && gap_violations == 0 && dominance_violations == 0,
          std::to_string(evals) + " evaluations, gap range [" + fmt(min_gap) + ", " + fmt(max_gap) + "], " +
              std::to_string(gap_violations) + " negative gaps; " + std::to_string(batches) + " batches, " +
              std::to_string(dominance_violations) + " dominance violations"};
}

// ---------------------------------------------------------------------------
// 7. Causal-tracing identities

Outcome patch_identities() {
  std::size_t pairs = 0, cells = 0;
  double worst_identity = 0, worst_layer0 = 0, worst_post = 0;
  for (Task t : {Task::comparison, Task::sorting, Task::intersection, Task::composition}) {
    for (Mode mode : {Mode::direct, Mode::cot}) {
      auto spec = DatasetSpec::defaults(t, 50);
      spec.mode = mode;
      spec.k = 2;
      spec.phi = 1.0;
      if (t != Task::composition) spec.n_attributes = t == Task::intersection ? 20 : 5;
      const auto b = generate_bundle(spec);
      const int eos = b.vocab.eos();
      auto tc = TrainConfig::preset("desk");
      tc.max_steps = 100;
      tc.eval_every = 100;
      tc.eval_samples = 50;
      const auto params = train(b.data, eos, desk_model(b), tc).params;
      auto rng = make_rng(7, "acceptance-patch");
      int made = 0;
      for (const auto* pool : {&b.data.validation, &b.data.test}) {
        for (const auto& ex : *pool) {
          if (made >= 8) break;
          const auto pair = make_patch_pair(ex, b, rng, made);
          if (!pair) continue;
          ++made;
          ++pairs;
          const auto s = patch_scoring(*pair, eos);
          const auto id = patch_scoring(PatchPair{pair->clean, pair->clean, pair->corrupted_position, 0}, eos);
          const int n = static_cast<int>(s.clean_sequence.size());
          const auto grid = patch_grid(params, std::span<const PatchPair>(&*pair, 1), mode, eos);
          const double gap = grid.clean_logprob - grid.corrupt_logprob;
          worst_layer0 = std::max(worst_layer0, std::abs(causal_patch(params, s, 0, pair->corrupted_position) - gap));
          for (int l = 0; l <= params.config.n_layers; ++l) {
            for (int p = 0; p < n; ++p) {
              ++cells;
              worst_identity = std::max(worst_identity, std::abs(causal_patch(params, id, l, p)));
              if (p >= s.answer_positions.back()) {
                worst_post = std::max(worst_post, std::abs(grid.effects(l, p)));
              }
            }
          }
        }
      }
    }
  }
  const bool ok = pairs >= 32 && worst_identity == 0.0 && worst_layer0 <= 1e-6 && worst_post == 0.0;
  return {ok, std::to_string(pairs) + " pairs over 4 tasks x 2 modes, " + std::to_string(cells) +
                  " identity cells: max |identity| " + fmt(worst_identity) + " (need 0), max |layer-0 - gap| " +
                  fmt(worst_layer0) + " (need <= 1e-6), max |post-answer| " + fmt(worst_post) + " (need 0)"};
}

// ---------------------------------------------------------------------------
// 8. Probe sanity

Outcome probe_sanity() {
  const auto b = desk_bundle(Mode::direct);
  auto tc = TrainConfig::preset("desk");
  tc.max_steps = 500;
  tc.eval_every = 500;
  tc.eval_samples = 100;
  const auto params = train(b.data, b.vocab.eos(), desk_model(b), tc).params;
  std::vector<Example> pool(b.data.validation.begin(), b.data.validation.end());
  pool.insert(pool.end(), b.data.test.begin(), b.data.test.end());

  const ProbeSpec token{0, PositionRole::entity_token, 0, ProbeTarget::token_identity};
  const auto id = train_probe(build_probe_data(params, pool, token, b.vocab), {}, token);

  ProbeConfig shuffled;
  shuffled.shuffle_labels = true;
  int within = 0, total = 0;
  double worst_z = 0;
  for (int layer = 0; layer <= params.config.n_layers; ++layer) {
    for (auto spec : {ProbeSpec{layer, PositionRole::entity_token, 0, ProbeTarget::token_identity},
                      ProbeSpec{layer, PositionRole::entity_token, 1, ProbeTarget::fact_value},
                      ProbeSpec{layer, PositionRole::final_query_token, 0, ProbeTarget::answer_entity}}) {
      const auto r = train_probe(build_probe_data(params, pool, spec, b.vocab), shuffled, spec);
      const double z = std::abs(r.test_acc - r.chance) / r.chance_sigma;
      worst_z = std::max(worst_z, z);
      ++total;
      within += z <= 3.0 ? 1 : 0;
    }
  }
  const bool ok = id.test_acc == 1.0 && within == total;
  return {ok, "layer-0 token-identity probe test acc " + fmt(id.test_acc) + " on " + std::to_string(id.n_test) +
                  " held-out examples; " + std::to_string(within) + "/" + std::to_string(total) +
                  " shuffled probes within 3 sigma of chance (worst " + fmt(worst_z, 3) + " sigma)"};
}

// ---------------------------------------------------------------------------
// 9. Metrics property suite

std::vector<int> mutate(const std::vector<int>& target, int vocab, int eos, Pcg32& rng) {
  std::vector<int> g = target;
  switch (rng.uniform(6)) {
    case 0: break;  // exact
    case 1:         // one substitution
      if (!g.empty()) g[rng.uniform(g.size())] = static_cast<int>(rng.uniform(static_cast<std::uint64_t>(vocab)));
      break;
    case 2:  // truncate
      g.resize(rng.uniform(g.size() + 1));
      break;
    case 3:  // drop eos, append junk
      if (!g.empty()) g.pop_back();
      g.push_back(static_cast<int>(rng.uniform(static_cast<std::uint64_t>(vocab))));
      break;
    case 4: {  // fully random
      const auto n = rng.uniform(target.size() + 3);
      g.clear();
      for (std::size_t i = 0; i < n; ++i) g.push_back(static_cast<int>(rng.uniform(static_cast<std::uint64_t>(vocab))));
      break;
    }
    default: {  // permute a copy
      rng.shuffle(std::span<int>(g));
      break;
    }
  }
  if (rng.uniform01() < 0.2) g.push_back(eos);
  return g;
}

Outcome metrics_properties() {
  std::size_t pairs = 0, violations = 0, batches = 0;
  for (Task t : {Task::comparison, Task::sorting, Task::intersection, Task::composition}) {
    auto spec = DatasetSpec::defaults(t, 200);
    spec.mode = Mode::cot;
    spec.k = 3;
    spec.phi = 1.0;
    if (t == Task::intersection) spec.n_attributes = 20;
    const auto b = generate_bundle(spec);
    std::vector<const Example*> golds;
    for (const auto& ex : b.data.validation) golds.push_back(&ex);
    for (const auto& ex : b.data.test) golds.push_back(&ex);
    if (golds.empty()) throw std::runtime_error("no composed examples for " + std::string(to_string(t)));
    auto rng = make_rng(99, std::string("acceptance-metrics-") + std::string(to_string(t)));
    std::vector<ScoreFlags> flags;
    for (int i = 0; i < 10000; ++i) {
      const auto& gold = *golds[rng.uniform(golds.size())];
      const auto gen = mutate(gold.target(b.vocab.eos()), b.vocab.size(), b.vocab.eos(), rng);
      const auto f = score_example(gen, gold, Mode::cot, b.vocab.eos());
      ++pairs;
      if (*f.full_ok && !(f.answer_ok && *f.trace_ok)) ++violations;
      if (f.answer_ok && f.answer_partial != 1.0) ++violations;
      if (f.answer_partial < 0.0 || f.answer_partial > 1.0) ++violations;
      flags.push_back(f);
      if (flags.size() == 100) {
        const auto r = aggregate(flags, t, "prop", Mode::cot);
        ++batches;
        if (r.answer_acc - *r.full_acc < 0.0) ++violations;
        if (*r.full_acc > std::min(r.answer_acc, *r.trace_acc)) ++violations;
        if (r.strict_answer_acc > r.answer_acc) ++violations;
        flags.clear();
      }
    }
  }
  return {violations == 0 && pairs == 40000,
          std::to_string(pairs) + " pairs, " + std::to_string(batches) + " aggregates, " + std::to_string(violations) +
              " violations"};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) {
      wanted.insert(std::stoi(argv[++i]));
    } else {
      std::cerr << "usage: groklab_acceptance [--criterion N]...\n";
      return 2;
    }
  }
  const std::vector<Criterion> all{
      {1, "normalized-rate golden numbers", 1.0, golden_rate},
      {2, "logistic fit recovery", 60.0, fit_recovery},
      {3, "data-generation audit", 300.0, datagen_suite},
      {4, "gradient check", 120.0, gradient_check},
      {5, "memorization sanity", 1200.0, memorization},
      {6, "CoT ordering property", 3600.0, cot_ordering},
      {7, "causal-tracing identities", 60.0, patch_identities},
      {8, "probe sanity", 120.0, probe_sanity},
      {9, "metrics property suite", 60.0, metrics_properties},
  };
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::printf("%s  criterion %d  %s: %s [%.2fs, budget %.0fs%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_seconds, in_time ? "" : ", OVER BUDGET");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
