#include <cmath>
#include <map>
#include <numbers>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "groklab/kinetics.hpp"
#include "synthetic_curves.hpp"

using namespace groklab;

TEST_SUITE("kinetics") {

TEST_CASE("midpoint and asymptote") {
  LogisticFit f;
  f.L = 0.887, f.k_fit = 5.67, f.t0 = 86000, f.x0 = std::log10(86000.0), f.converged = true;
  CHECK(eval_logistic(f, 86000) == doctest::Approx(0.4435).epsilon(1e-12));
  CHECK(eval_logistic(f, 1e30) == doctest::Approx(0.887).epsilon(1e-9));
  CHECK_THROWS_AS(eval_logistic(f, 0.0), std::invalid_argument);
}

TEST_CASE("normalized rate arithmetic") {
  CHECK(round_sig(normalized_rate(0.887, 5.67, 86000), 2) == doctest::Approx(3.2e-5));
  CHECK(round_sig(normalized_rate(0.775, 5.65, 183000), 2) == doctest::Approx(1.7e-5));
  CHECK(normalized_rate(1.0, std::numbers::ln10, 1.0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(normalized_rate(0.0, 1.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(normalized_rate(1.0, 1.0, 0.0), std::invalid_argument);
  LogisticFit bad;
  CHECK_THROWS_AS(normalized_rate(bad), std::invalid_argument);
}

TEST_CASE("round_sig") {
  CHECK(round_sig(5.622e-5, 2) == doctest::Approx(5.6e-5));
  CHECK(round_sig(3.228e-5, 2) == doctest::Approx(3.2e-5));
  CHECK(round_sig(-0.0456, 2) == doctest::Approx(-0.046));
  CHECK(round_sig(0.0, 2) == 0.0);
}

TEST_CASE("linear logistic conversion") {
  const double L = 0.9, r = 1e-3, acc0 = 0.01;
  const double t0 = linear_takeoff(L, r, acc0);
  CHECK(eval_linear_logistic(L, r, t0, 0.0) == doctest::Approx(acc0).epsilon(1e-12));
  CHECK(eval_linear_logistic(L, r, t0, t0) == doctest::Approx(L / 2));
  CHECK_THROWS_AS(linear_takeoff(L, r, 0.95), std::invalid_argument);
}

TEST_CASE("noiseless curve is recovered exactly") {
  const auto steps = testing::log_steps();
  std::vector<CurvePoint> pts;
  for (double s : steps) pts.push_back({s, logistic_log_step(0.9, 6.0, 5e4, s)});
  const auto f = fit_logistic(pts);
  REQUIRE(f.converged);
  CHECK(f.L == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(f.k_fit == doctest::Approx(6.0).epsilon(1e-6));
  CHECK(f.t0 == doctest::Approx(5e4).epsilon(1e-6));
  CHECK(f.rmse < 1e-6);
  CHECK(f.r_squared == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(eval_logistic(f, f.t0) == doctest::Approx(f.L / 2).epsilon(1e-9));
}

TEST_CASE("degenerate curves are not fitted") {
  std::vector<CurvePoint> zeros;
  for (double s : testing::log_steps(10)) zeros.push_back({s, 0.0});
  const auto f = fit_logistic(zeros);
  CHECK_FALSE(f.converged);
  CHECK_FALSE(f.diagnostic.empty());
  std::vector<CurvePoint> flat;
  for (double s : testing::log_steps(10)) flat.push_back({s, 0.7});
  CHECK_FALSE(fit_logistic(flat).converged);
  CHECK_THROWS_AS(fit_logistic(std::vector<CurvePoint>{{1, 0}, {2, 1}, {3, 1}}), std::invalid_argument);
  CHECK_THROWS_AS(fit_logistic(std::vector<CurvePoint>{{0, 0}, {2, 1}, {3, 1}, {4, 1}}),
                  std::invalid_argument);
}

TEST_CASE("fit statistics match a direct residual computation") {
  auto rng = make_rng(3, "stats");
  const testing::TrueCurve c{0.8, 5.0, 2e4};
  const auto pts = testing::sample_curve(c, testing::log_steps(), 0.03, rng);
  const auto f = fit_logistic(pts);
  REQUIRE(f.converged);
  double ss = 0, mean = 0, tot = 0;
  for (const auto& p : pts) mean += p.acc / pts.size();
  for (const auto& p : pts) {
    const double e = eval_logistic(f, p.step) - p.acc;
    ss += e * e;
    tot += (p.acc - mean) * (p.acc - mean);
  }
  CHECK(f.rmse == doctest::Approx(std::sqrt(ss / pts.size())).epsilon(1e-9));
  CHECK(f.r_squared == doctest::Approx(1 - ss / tot).epsilon(1e-9));
}

TEST_CASE("fit respects bounds") {
  std::vector<CurvePoint> pts;
  for (double s : testing::log_steps(20)) pts.push_back({s, s > 1e4 ? 1.3 : 0.0});
  const auto f = fit_logistic(pts);
  CHECK(f.L <= 1.05);
  CHECK(f.k_fit <= 100.0);
  CHECK(f.x0 >= 1.0);
  CHECK(f.x0 <= 7.0);
}

TEST_CASE("noisy recovery on a small sample") {
  auto rng = make_rng(99, "recovery-unit");
  const auto steps = testing::log_steps();
  int ok = 0;
  for (int i = 0; i < 40; ++i) {
    const auto c = testing::draw_curve(rng);
    ok += testing::recovered(fit_logistic(testing::sample_curve(c, steps, 0.02, rng)), c) ? 1 : 0;
  }
  CHECK(ok >= 36);
}

TEST_CASE("trend report") {
  std::map<FitKey, LogisticFit> fits;
  auto mk = [](double L, double k, double t0) {
    LogisticFit f;
    f.L = L, f.k_fit = k, f.t0 = t0, f.x0 = std::log10(t0), f.converged = true;
    f.r_hat = normalized_rate(L, k, t0);
    return f;
  };
  fits[{Task::comparison, Mode::direct, 3.6, 3, "answer"}] = mk(0.887, 5.67, 86e3);
  fits[{Task::comparison, Mode::direct, 3.6, 4, "answer"}] = mk(0.842, 7.45, 148e3);
  fits[{Task::comparison, Mode::direct, 3.6, 5, "answer"}] = mk(0.738, 9.97, 200e3);
  fits[{Task::comparison, Mode::direct, 7.2, 3, "answer"}] = mk(0.851, 5.33, 66e3);
  fits[{Task::comparison, Mode::direct, 12.6, 3, "answer"}] = mk(0.906, 6.45, 55e3);
  const auto rep = trend_report(fits);
  CHECK(rep.rows.size() == 5);
  bool saw_k = false, saw_phi = false;
  for (const auto& f : rep.findings) {
    if (f.kind == "t0_vs_k") {
      saw_k = true;
      CHECK(f.values == std::vector<double>{86e3, 148e3, 200e3});
      CHECK(f.matches_expectation);
    }
    if (f.kind == "rhat_vs_phi") {
      saw_phi = true;
      CHECK(f.matches_expectation);
    }
  }
  CHECK(saw_k);
  CHECK(saw_phi);
  nlohmann::json j = rep;
  CHECK(j["rows"].size() == 5);
  CHECK(trend_csv(rep).find("comparison,direct,3.6,3,answer") != std::string::npos);

  std::map<FitKey, LogisticFit> same;
  same[{Task::sorting, Mode::direct, 3.6, 3, "answer"}] = mk(0.9, 6, 5e4);
  same[{Task::sorting, Mode::direct, 3.6, 4, "answer"}] = mk(0.9, 6, 5e4);
  for (const auto& f : trend_report(same).findings) {
    for (double d : f.deltas) CHECK(d == 0.0);
  }
  CHECK_THROWS_AS(trend_report({}), std::invalid_argument);
}

TEST_CASE("fit json round trip") {
  LogisticFit f;
  f.L = 0.5, f.k_fit = 4, f.t0 = 1e3, f.x0 = 3, f.converged = true, f.diagnostic = "x";
  nlohmann::json j = f;
  const auto g = j.get<LogisticFit>();
  CHECK(g.L == f.L);
  CHECK(g.t0 == f.t0);
  CHECK(g.converged);
  CHECK(g.diagnostic == "x");
}

}
