#include <doctest.h>

#include <cmath>

#include "groklab/mechanistic.hpp"
#include "groklab/rng.hpp"

using namespace groklab;

namespace {

const Bundle& bundle_for(Task task, Mode mode) {
  static std::map<std::pair<Task, Mode>, Bundle> cache;
  auto it = cache.find({task, mode});
  if (it == cache.end()) {
    auto s = DatasetSpec::defaults(task, 60);
    s.mode = mode;
    s.k = 2;
    s.phi = 1.0;
    s.validation_cap = 100;
    s.test_cap = 100;
    if (task == Task::intersection) s.n_attributes = 20;
    if (task != Task::composition) s.n_attributes = std::min(s.n_attributes, 20);
    it = cache.emplace(std::make_pair(task, mode), generate_bundle(s)).first;
  }
  return it->second;
}

Parameters model_for(const Bundle& b) {
  auto c = ModelConfig::preset("tiny", b.vocab.size(), 40);
  return init_params<float>(c, 3);
}

}  // namespace

TEST_SUITE("mechanistic") {
  TEST_CASE("corruptions change the answer and one query token") {
    for (Task t : {Task::comparison, Task::sorting, Task::intersection, Task::composition}) {
      CAPTURE(to_string(t));
      const auto& b = bundle_for(t, Mode::cot);
      auto rng = make_rng(1, "test");
      int made = 0;
      for (const auto& ex : b.data.test) {
        const auto p = make_patch_pair(ex, b, rng);
        if (!p) continue;
        ++made;
        REQUIRE(p->clean.query.size() == p->corrupt.query.size());
        int diffs = 0;
        for (std::size_t i = 0; i < ex.query.size(); ++i) diffs += p->clean.query[i] != p->corrupt.query[i];
        CHECK(diffs == 1);
        CHECK(p->clean.query[static_cast<std::size_t>(p->corrupted_position)] !=
              p->corrupt.query[static_cast<std::size_t>(p->corrupted_position)]);
        CHECK(p->corrupt.answer != p->clean.answer);
      }
      CHECK(made > (t == Task::composition ? 0 : 10));
    }
  }

  TEST_CASE("patching identities") {
    for (Mode mode : {Mode::direct, Mode::cot}) {
      const auto& b = bundle_for(Task::comparison, mode);
      const auto params = model_for(b);
      const int eos = b.vocab.eos();
      auto rng = make_rng(2, "test");
      const auto pair = *make_patch_pair(b.data.test.front(), b, rng);
      const auto s = patch_scoring(pair, eos);
      const int n = static_cast<int>(s.clean_sequence.size());

      PatchPair same{pair.clean, pair.clean, pair.corrupted_position, 0};
      const auto id = patch_scoring(same, eos);
      for (int l = 0; l <= params.config.n_layers; ++l) {
        for (int t = 0; t < n; ++t) CHECK(causal_patch(params, id, l, t) == 0.0);
      }

      const auto grid = patch_grid(params, std::span<const PatchPair>(&pair, 1), mode, eos);
      const double gap = grid.clean_logprob - grid.corrupt_logprob;
      CHECK(std::abs(gap) > 0.0);
      CHECK(std::abs(causal_patch(params, s, 0, pair.corrupted_position) - gap) <= 1e-6);
      const int last_answer = s.answer_positions.back();
      for (int l = 0; l <= params.config.n_layers; ++l) {
        for (int t = last_answer; t < n; ++t) CHECK(causal_patch(params, s, l, t) == 0.0);
      }
      CHECK(grid.position_labels.size() == static_cast<std::size_t>(n));
      CHECK(grid.position_labels.back() == "eos");
    }
  }

  TEST_CASE("role labels line up with the sequence") {
    for (Task t : {Task::comparison, Task::sorting, Task::intersection, Task::composition}) {
      for (Mode m : {Mode::direct, Mode::cot}) {
        const auto& b = bundle_for(t, m);
        const auto& ex = b.data.test.front();
        CHECK(role_labels(ex, m).size() == ex.sequence(b.vocab.eos()).size());
      }
    }
  }

  TEST_CASE("probe positions") {
    const auto& b = bundle_for(Task::comparison, Mode::direct);
    const auto& ex = b.data.test.front();
    ProbeSpec entity{0, PositionRole::entity_token, 1, ProbeTarget::token_identity};
    CHECK(probe_position(ex, entity) == 3);
    CHECK(probe_label(ex, entity, b.vocab) == ex.query[3]);
    ProbeSpec last{0, PositionRole::final_query_token, 0, ProbeTarget::answer_entity};
    CHECK(probe_position(ex, last) == static_cast<int>(ex.query.size()) - 1);
    ProbeSpec out_of_range{0, PositionRole::entity_token, 5, ProbeTarget::token_identity};
    CHECK_FALSE(probe_position(ex, out_of_range).has_value());
  }

  TEST_CASE("token identity probe and shuffled null") {
    const auto& b = bundle_for(Task::comparison, Mode::direct);
    const auto params = model_for(b);
    ProbeSpec spec{0, PositionRole::entity_token, 0, ProbeTarget::token_identity};
    std::vector<Example> pool(b.data.test.begin(), b.data.test.end());
    const auto data = build_probe_data(params, pool, spec, b.vocab);
    CHECK(data.features.rows() == static_cast<Eigen::Index>(pool.size()));
    const auto r = train_probe(data, {}, spec);
    CHECK(r.train_acc == 1.0);
    CHECK(r.test_acc == 1.0);

    ProbeConfig shuffled;
    shuffled.shuffle_labels = true;
    const auto n = train_probe(data, shuffled, spec);
    CHECK(std::abs(n.test_acc - n.chance) <= 3.0 * n.chance_sigma);
  }

  TEST_CASE("probe recovers a linear rule and rejects degenerate data") {
    auto rng = make_rng(9, "probe-synthetic");
    ProbeData d;
    d.n_classes = 3;
    d.features.resize(300, 4);
    for (int i = 0; i < 300; ++i) {
      for (int j = 0; j < 4; ++j) d.features(i, j) = rng.normal();
      const double s = d.features(i, 0) - d.features(i, 1);
      d.labels.push_back(s > 0.5 ? 2 : (s < -0.5 ? 0 : 1));
    }
    const auto r = train_probe(d, {});
    CHECK(r.test_acc > 0.85);
    CHECK(probe_predict(r, d.features).size() == 300);

    ProbeData one = d;
    std::fill(one.labels.begin(), one.labels.end(), 1);
    CHECK_THROWS_AS(train_probe(one, {}), std::invalid_argument);
  }
}
