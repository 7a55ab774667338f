#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "gradcheck.hpp"
#include "groklab/model.hpp"

using namespace groklab;

TEST_SUITE("model") {

TEST_CASE("parameter count matches closed form") {
  for (bool tied : {false, true}) {
    auto c = testing::gradcheck_config();
    c.tied_head = tied;
    const auto p = init_params<float>(c, 1);
    CHECK(p.count() == parameter_count(c));
  }
  const auto desk = ModelConfig::preset("desk", 100, 32);
  CHECK(parameter_count(desk) ==
        100 * 64 + 32 * 64 + 2 * (12 * 64 * 64 + 13 * 64) + 2 * 64 + 64 * 100 + 100);
  CHECK_THROWS_AS(ModelConfig::preset("huge", 10, 10), std::invalid_argument);
}

TEST_CASE("config validation") {
  auto c = testing::gradcheck_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = testing::gradcheck_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(init_params<float>(c, 0), std::invalid_argument);
}

TEST_CASE("zero weights give uniform logits and loss ln V") {
  auto c = testing::gradcheck_config();
  c.init_scale = 0.0;
  const auto p = init_params<double>(c, 3);
  const auto batch = testing::gradcheck_batch();
  CHECK(batch_loss<double>(p, batch) == doctest::Approx(std::log(11.0)).epsilon(1e-12));
}

TEST_CASE("forward rejects bad input") {
  const auto p = init_params<float>(testing::gradcheck_config(), 2);
  std::vector<int> too_long(13, 1);
  CHECK_THROWS_AS(forward<float>(p, too_long), std::invalid_argument);
  std::vector<int> bad_id{1, 11};
  CHECK_THROWS_AS(forward<float>(p, bad_id), std::invalid_argument);
  CHECK_THROWS_AS(forward<float>(p, std::span<const int>{}), std::invalid_argument);
}

TEST_CASE("causal: logits at t ignore later tokens") {
  const auto p = init_params<double>(testing::gradcheck_config(), 5);
  std::vector<int> a{1, 2, 3, 4, 5, 6};
  std::vector<int> b{1, 2, 3, 9, 0, 10};
  const auto la = forward<double>(p, a);
  const auto lb = forward<double>(p, b);
  for (int t = 0; t < 3; ++t) CHECK((la.row(t) - lb.row(t)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((la.row(3) - lb.row(3)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("capture and forward_from agree with forward") {
  const auto p = init_params<float>(testing::gradcheck_config(), 6);
  std::vector<int> toks{3, 1, 4, 1, 5, 9, 2};
  HiddenCache<float> cache;
  const auto logits = forward<float>(p, toks, &cache);
  REQUIRE(cache.states.size() == 3);
  for (int l = 0; l <= 2; ++l) {
    const auto resumed = forward_from<float>(p, l, cache.states[l]);
    CHECK((resumed - logits).cwiseAbs().maxCoeff() == 0.0f);
  }
  CHECK_THROWS_AS(forward_from<float>(p, 3, cache.states[0]), std::invalid_argument);
}

TEST_CASE("batched loss equals mean over concatenated targets") {
  const auto p = init_params<double>(testing::gradcheck_config(), 8);
  const auto batch = testing::gradcheck_batch();
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : batch) {
    const auto logits = forward<double>(p, s.tokens);
    for (std::size_t t = 1; t < s.tokens.size(); ++t) {
      if (!s.loss_mask[t]) continue;
      total -= log_prob<double>(logits, static_cast<int>(t) - 1, s.tokens[t]);
      ++n;
    }
  }
  const auto lg = loss_and_grads<double>(p, batch);
  CHECK(lg.n_targets == n);
  CHECK(lg.loss == doctest::Approx(total / static_cast<double>(n)).epsilon(1e-12));
}

TEST_CASE("gradients match finite differences") {
  for (bool tied : {false, true}) {
    CAPTURE(tied);
    auto c = testing::gradcheck_config();
    c.tied_head = tied;
    const auto pf = init_params<float>(c, 11);
    const auto pd = pf.cast<double>();
    const auto batch = testing::gradcheck_batch();
    const auto numeric = testing::numeric_gradient(pd, batch);
    for (const auto& e : testing::compare_gradients(loss_and_grads<double>(pd, batch).grads, numeric)) {
      CAPTURE(e.name);
      CHECK(e.rel <= 1e-6);
    }
    for (const auto& e : testing::compare_gradients(loss_and_grads<float>(pf, batch).grads, numeric)) {
      CAPTURE(e.name);
      CHECK(e.rel <= 1e-3);
    }
  }
}

TEST_CASE("greedy generation stops at the stop token") {
  auto c = testing::gradcheck_config();
  c.init_scale = 0.0;
  auto p = init_params<float>(c, 1);
  p.head_bias(0, 4) = 1.0f;
  std::vector<int> prompt{1, 2};
  const auto out = generate_greedy<float>(p, prompt, 5, 4);
  CHECK(out == std::vector<int>{4});
  p.head_bias(0, 4) = 0.0f;
  p.head_bias(0, 6) = 1.0f;
  CHECK(generate_greedy<float>(p, prompt, 3, 4) == std::vector<int>{6, 6, 6});
  CHECK_THROWS_AS(generate_greedy<float>(p, prompt, 11, 4), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is exact") {
  const auto p = init_params<float>(testing::gradcheck_config(), 21);
  const auto path = (std::filesystem::temp_directory_path() / "groklab_ckpt_test.bin").string();
  Checkpoint::from_params(p, 1234).save(path);
  const auto ck = Checkpoint::load(path);
  CHECK(ck.step == 1234);
  CHECK(ck.config == p.config);
  const auto q = ck.to_params();
  auto a = p.tensors();
  auto b = q.tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(Checkpoint::load(path), std::runtime_error);
}

}
