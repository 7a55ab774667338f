#include <doctest.h>

#include <filesystem>

#include "groklab/datagen.hpp"
#include "groklab/trainer.hpp"

using namespace groklab;
namespace fs = std::filesystem;

namespace {

const Bundle& tiny_bundle() {
  static const Bundle b = [] {
    auto s = DatasetSpec::defaults(Task::comparison, 20);
    s.n_attributes = 3;
    s.phi = 2.0;
    s.mode = Mode::cot;
    s.validation_cap = 50;
    s.test_cap = 30;
    return generate_bundle(s);
  }();
  return b;
}

ModelConfig tiny_model() {
  const auto& b = tiny_bundle();
  auto c = ModelConfig::preset("tiny", b.vocab.size(), 16);
  return c;
}

TrainConfig tiny_train(std::int64_t steps) {
  auto t = TrainConfig::preset("desk");
  t.max_steps = steps;
  t.batch_size = 8;
  t.eval_every = 10;
  t.checkpoint_every = 10;
  t.eval_samples = 20;
  t.warmup_steps = 5;
  return t;
}

bool same(const Parameters& a, const Parameters& b) {
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (*ta[i].second != *tb[i].second) return false;
  }
  return true;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("encode masks the query and supervises the target") {
    const auto& b = tiny_bundle();
    const auto& ex = b.data.train.back();
    const auto s = encode(ex, b.vocab.eos());
    REQUIRE(s.tokens == ex.sequence(b.vocab.eos()));
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      CHECK(s.loss_mask[t] == (t >= ex.query.size() ? 1 : 0));
    }
    const auto full = encode(ex, b.vocab.eos(), true);
    CHECK(full.loss_mask[0] == 0);
    CHECK(full.loss_mask[1] == 1);
  }

  TEST_CASE("warmup schedule") {
    auto c = tiny_train(10);
    c.learning_rate = 1e-3;
    c.warmup_steps = 4;
    CHECK(learning_rate_at(c, 1) == doctest::Approx(2.5e-4));
    CHECK(learning_rate_at(c, 4) == doctest::Approx(1e-3));
    CHECK(learning_rate_at(c, 100) == doctest::Approx(1e-3));
    CHECK(estimate_flops(tiny_model(), 10.0) == doctest::Approx(60.0 * parameter_count(tiny_model())));
  }

  TEST_CASE("zero learning rate leaves parameters unchanged") {
    auto c = tiny_train(5);
    c.learning_rate = 0.0;
    const auto res = train(tiny_bundle().data, tiny_bundle().vocab.eos(), tiny_model(), c);
    CHECK(same(res.params, init_params<float>(tiny_model(), c.seed)));
  }

  TEST_CASE("training reduces loss and is deterministic") {
    const auto c = tiny_train(60);
    const auto a = train(tiny_bundle().data, tiny_bundle().vocab.eos(), tiny_model(), c);
    const auto b = train(tiny_bundle().data, tiny_bundle().vocab.eos(), tiny_model(), c);
    CHECK(same(a.params, b.params));
    REQUIRE(a.log.train_loss.size() == 60);
    CHECK(a.log.train_loss.back().loss < a.log.train_loss.front().loss);
    const auto splits = a.log.splits();
    CHECK(std::find(splits.begin(), splits.end(), "ood_test") != splits.end());
    CHECK(std::find(splits.begin(), splits.end(), "train_atomic") != splits.end());
    CHECK(a.log.curve("id_val").points.size() == 6);
  }

  TEST_CASE("resume reproduces an uninterrupted run") {
    const auto& b = tiny_bundle();
    const auto straight = train(b.data, b.vocab.eos(), tiny_model(), tiny_train(30));

    const auto dir = fresh_dir("groklab_resume");
    TrainOptions o;
    o.run_dir = dir.string();
    train(b.data, b.vocab.eos(), tiny_model(), tiny_train(20), o);
    CHECK(fs::exists(dir / "ckpt" / "step_20.ckpt"));
    const auto resumed = train(b.data, b.vocab.eos(), tiny_model(), tiny_train(30), o);
    CHECK(resumed.resumed_from == 20);
    CHECK(same(resumed.params, straight.params));

    const auto log = RunLog::read(dir.string());
    CHECK(log.train_loss.size() == 30);
    CHECK(log.evals.size() == straight.log.evals.size());
    for (std::size_t i = 0; i < log.evals.size(); ++i) {
      CHECK(log.evals[i].step == straight.log.evals[i].step);
      CHECK(log.evals[i].acc.answer_acc == doctest::Approx(straight.log.evals[i].acc.answer_acc));
    }
    CHECK(fs::exists(dir / "train_manifest.json"));
    fs::remove_all(dir);
  }

  TEST_CASE("evaluating a saved checkpoint matches in-memory evaluation") {
    const auto& b = tiny_bundle();
    const auto dir = fresh_dir("groklab_ckpt_eval");
    TrainOptions o;
    o.run_dir = dir.string();
    const auto res = train(b.data, b.vocab.eos(), tiny_model(), tiny_train(20), o);
    const auto loaded = Checkpoint::load((dir / "ckpt" / "step_20.ckpt").string()).to_params();
    CHECK(same(loaded, res.params));
    const auto e1 = evaluate(res.params, b.data.test, Mode::cot, b.vocab.eos(), "ood_test");
    const auto e2 = evaluate(loaded, b.data.test, Mode::cot, b.vocab.eos(), "ood_test");
    CHECK(e1.record.answer_acc == e2.record.answer_acc);
    CHECK(e1.loss == e2.loss);
    const auto [p, st] = load_training_checkpoint((dir / "ckpt" / "last.ckpt").string());
    CHECK(st.t == 20);
    CHECK(same(p, res.params));
    fs::remove_all(dir);
  }

  TEST_CASE("divergence is reported") {
    auto c = tiny_train(50);
    c.learning_rate = 1e30;
    c.warmup_steps = 0;
    CHECK_THROWS_AS(train(tiny_bundle().data, tiny_bundle().vocab.eos(), tiny_model(), c), TrainingDiverged);
  }

  TEST_CASE("config validation and presets") {
    auto c = TrainConfig::preset("small");
    CHECK(c.max_steps == 20000);
    c.batch_size = 0;
    CHECK_THROWS(c.validate());
    CHECK_THROWS(TrainConfig::preset("huge"));
    nlohmann::json j = TrainConfig::preset("full");
    CHECK(j.get<TrainConfig>() == TrainConfig::preset("full"));
  }
}
