#include <doctest.h>

#include <filesystem>
#include <set>

#include "groklab/vocab_kb.hpp"

using namespace groklab;

TEST_SUITE("vocab_kb") {
  TEST_CASE("vocabulary sections are dense and disjoint") {
    VocabConfig c;
    c.n_entities = 7;
    c.n_attributes = 3;
    c.n_relations = 2;
    c.values = {-2, 4};
    c.tasks.comparison = c.tasks.sorting = c.tasks.intersection = true;
    const auto v = Vocabulary::build(c);
    std::set<std::string> seen(v.tokens().begin(), v.tokens().end());
    CHECK(seen.size() == v.tokens().size());
    CHECK(v.entities().end - v.entities().begin == 7);
    CHECK(v.values().end - v.values().begin == 7);
    CHECK(v.heads().end - v.heads().begin == 6);
    CHECK(v.value_of(v.value(-2)) == -2);
    CHECK(v.value_of(v.value(4)) == 4);
    CHECK(v.entity_index(v.entity(6)) == 6);
    CHECK(v.id_of(v.token(v.eos())) == v.eos());
    CHECK_THROWS(v.value(5));
    CHECK_THROWS(v.entity(7));
    CHECK_NOTHROW(v.sort_head());
    CHECK_NOTHROW(v.count_marker());
  }

  TEST_CASE("vocabulary file round trip") {
    VocabConfig c;
    c.n_entities = 4;
    c.n_attributes = 2;
    c.values = {0, 3};
    c.tasks.comparison = true;
    const auto v = Vocabulary::build(c);
    const auto path = (std::filesystem::temp_directory_path() / "groklab_vocab_rt.txt").string();
    v.write(path);
    const auto back = Vocabulary::read(path);
    CHECK(back == v);
    CHECK(back.eos() == v.eos());
    CHECK(back.max_head(1) == v.max_head(1));
    std::filesystem::remove(path);
  }

  TEST_CASE("attribute KB is seeded and in range") {
    const auto a = build_attr_kb(3, 30, 4, {0, 9}, SignMode::nonnegative);
    const auto b = build_attr_kb(3, 30, 4, {0, 9}, SignMode::nonnegative);
    const auto c = build_attr_kb(4, 30, 4, {0, 9}, SignMode::nonnegative);
    CHECK(a.values == b.values);
    CHECK(a.values != c.values);
    CHECK(kb_hash(a) == kb_hash(b));
    for (int x : a.values) CHECK((x >= 0 && x <= 9));
    const auto s = build_attr_kb(3, 200, 5, {0, 9}, SignMode::symmetric);
    bool negative = false;
    for (int x : s.values) {
      CHECK((x >= -9 && x <= 9));
      negative = negative || x < 0;
    }
    CHECK(negative);
  }

  TEST_CASE("relational KB maps are permutations and distances are BFS") {
    const auto kb = build_rel_kb(11, 25, 3);
    for (int r = 0; r < 3; ++r) {
      std::set<int> tails;
      for (int e = 0; e < 25; ++e) tails.insert(kb.tail(r, e));
      CHECK(tails.size() == 25);
    }
    for (int e = 0; e < 25; ++e) CHECK(kb.distance(e, e) == 0);
    for (const auto& edge : kb.edges) {
      if (edge.head != edge.tail) CHECK(kb.distance(edge.head, edge.tail) == 1);
    }
    const auto sparse = build_rel_kb(11, 25, 3, 20);
    CHECK(sparse.edges.size() == 20);
  }

  TEST_CASE("entity split ratio and tags") {
    const auto s = split_entities(5, 100, 0.9);
    CHECK(s.id_entities.size() == 90);
    CHECK(s.ood_entities.size() == 10);
    for (int e : s.id_entities) CHECK(s.is_id(e));
    for (int e : s.ood_entities) CHECK_FALSE(s.is_id(e));
  }

  TEST_CASE("atomic facts cover every cell") {
    VocabConfig c;
    c.n_entities = 6;
    c.n_attributes = 3;
    c.values = {0, 5};
    c.tasks.comparison = true;
    const auto v = Vocabulary::build(c);
    const auto kb = build_attr_kb(1, 6, 3, {0, 5}, SignMode::nonnegative);
    const auto split = split_entities(1, 6, 0.5);
    const auto facts = enumerate_atomic_facts(kb, split, v);
    REQUIRE(facts.size() == 18);
    for (const auto& f : facts) {
      const int e = v.entity_index(f.query.at(0));
      const int a = f.query.at(1) - v.attributes().begin;
      CHECK(f.answer == std::vector<int>{v.value(kb.at(e, a))});
      CHECK(f.split == split.tag_of[e]);
    }
  }
}
