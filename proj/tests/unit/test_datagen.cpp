#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "datagen_audit.hpp"
#include "groklab/datagen.hpp"

using namespace groklab;

namespace {

DatasetSpec small_spec(Task task, Mode mode, int k = 2) {
  auto s = DatasetSpec::defaults(task, 60);
  s.k = k;
  s.mode = mode;
  s.phi = 2.0;
  s.validation_cap = 200;
  s.test_cap = 200;
  if (task == Task::intersection) {
    s.n_attributes = 20;
    s.cot_template = CotTemplate::retrieve_count_answer;
  }
  return s;
}

}  // namespace

TEST_SUITE("datagen") {
  TEST_CASE("every task passes the brute-force audit") {
    for (Task t : {Task::comparison, Task::sorting, Task::intersection, Task::composition}) {
      for (Mode m : {Mode::direct, Mode::cot}) {
        CAPTURE(to_string(t));
        CAPTURE(to_string(m));
        const auto b = generate_bundle(small_spec(t, m));
        const auto r = testing::audit_bundle(b);
        CHECK(r.checked > 0);
        for (const auto& f : r.failures) CAPTURE(f);
        CHECK(r.ok());
        CHECK(b.data.train.size() == b.data.n_atomics + b.data.n_composed_train);
      }
    }
  }

  TEST_CASE("audit catches a tampered answer") {
    auto b = generate_bundle(small_spec(Task::comparison, Mode::cot));
    auto it = std::find_if(b.data.test.begin(), b.data.test.end(), [](const Example& e) { return e.k == 2; });
    REQUIRE(it != b.data.test.end());
    const int other = it->query[2] == it->answer[0] ? it->query[3] : it->query[2];
    it->answer[0] = other;
    CHECK_FALSE(testing::audit_bundle(b).ok());
  }

  TEST_CASE("generation is deterministic in the seed") {
    const auto a = generate_bundle(small_spec(Task::sorting, Mode::cot, 3));
    const auto b = generate_bundle(small_spec(Task::sorting, Mode::cot, 3));
    auto spec = small_spec(Task::sorting, Mode::cot, 3);
    spec.seed = 8;
    const auto c = generate_bundle(spec);
    CHECK(a.data.train == b.data.train);
    CHECK(a.data.test == b.data.test);
    CHECK(a.data.train != c.data.train);
  }

  TEST_CASE("phi controls the composed count") {
    for (double phi : {0.5, 1.0, 3.6}) {
      auto s = small_spec(Task::comparison, Mode::direct);
      s.phi = phi;
      const auto b = generate_bundle(s);
      CHECK_FALSE(b.data.capped);
      const auto want = std::llround(phi * static_cast<double>(b.data.phi_base_size));
      CHECK(std::llabs(static_cast<long long>(b.data.n_composed_train) - want) <= 1);
    }
    auto s = small_spec(Task::comparison, Mode::direct);
    s.phi_base = PhiBase::id_atomics;
    const auto b = generate_bundle(s);
    CHECK(b.data.phi_base_size < b.data.n_atomics);
  }

  TEST_CASE("intersection templates change only the trace") {
    std::vector<std::vector<Example>> per_template;
    for (auto t : {CotTemplate::retrieve_answer, CotTemplate::count_retrieve_answer,
                   CotTemplate::retrieve_count_answer, CotTemplate::retrieve_count_repeat_answer}) {
      auto s = small_spec(Task::intersection, Mode::cot);
      s.cot_template = t;
      const auto b = generate_bundle(s);
      CHECK(testing::audit_bundle(b).ok());
      per_template.push_back(b.data.test);
    }
    for (std::size_t i = 1; i < per_template.size(); ++i) {
      REQUIRE(per_template[i].size() == per_template[0].size());
      CHECK(per_template[i][0].query == per_template[0][0].query);
      CHECK(per_template[i][0].answer == per_template[0][0].answer);
      CHECK(per_template[i][0].trace != per_template[0][0].trace);
    }
  }

  TEST_CASE("mix pools and symmetric values") {
    auto s = small_spec(Task::comparison, Mode::cot);
    s.include_mix = true;
    s.sign_mode = SignMode::symmetric;
    const auto b = generate_bundle(s);
    CHECK_FALSE(b.data.mix.empty());
    CHECK(testing::audit_bundle(b).ok());
    CHECK(b.attr_kb->value_range.lo < 0);
  }

  TEST_CASE("JSONL and bundle directory round trip") {
    const auto b = generate_bundle(small_spec(Task::composition, Mode::cot, 2));
    std::stringstream ss;
    write_jsonl(ss, b.data.test);
    CHECK(read_jsonl(ss) == b.data.test);

    const auto dir = std::filesystem::temp_directory_path() / "groklab_bundle_rt";
    std::filesystem::remove_all(dir);
    write_bundle(b, dir.string());
    const auto back = read_bundle(dir.string());
    CHECK(back.vocab == b.vocab);
    CHECK(back.data.train == b.data.train);
    CHECK(back.data.validation == b.data.validation);
    CHECK(back.data.test == b.data.test);
    CHECK(back.spec.k == 2);
    CHECK(back.rel_kb->edges == b.rel_kb->edges);
    const auto audit = testing::audit_bundle(back);
    for (const auto& f : audit.failures) MESSAGE(f);
    CHECK(audit.ok());
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("invalid requests are rejected") {
    auto s = small_spec(Task::comparison, Mode::direct, 1);
    CHECK_THROWS_AS(generate_bundle(s), std::invalid_argument);
    auto i = small_spec(Task::intersection, Mode::direct, 30);
    CHECK_THROWS(generate_bundle(i));
  }
}
