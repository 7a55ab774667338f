#pragma once

// Logistic-in-log-step fits of learning curves, the normalized rate and
// cross-run trend tables.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "groklab/example.hpp"

namespace groklab {

struct CurvePoint {
  double step = 0.0;
  double acc = 0.0;
};

/// Acc(t) = L / (1 + exp(-k_fit (log10 t - log10 t0))).
struct LogisticFit {
  double L = 0.0;
  double k_fit = 0.0;
  double t0 = 0.0;
  double x0 = 0.0;  // log10 t0
  double r_hat = 0.0;
  double r_squared = 0.0;
  double rmse = 0.0;
  bool converged = false;
  int iterations = 0;
  std::size_t n_points = 0;
  std::string diagnostic;
};

struct FitOptions {
  double max_ceiling = 1.05;
  double max_slope = 100.0;
  double x0_margin = 1.0;  // x0 may leave the data range by this many decades
  double rel_tol = 1e-8;
  int max_iterations = 500;
  double min_range = 1e-3;      // curves whose accuracy varies less are flat
  double min_peak = 0.01;       // curves that never exceed this did not take off
};

/// Bounded Levenberg-Marquardt fit with an analytic Jacobian, started from
/// (max acc, 1, median log10 step). Needs at least 4 points with positive steps.
LogisticFit fit_logistic(std::span<const CurvePoint> points, const FitOptions& options = {});

double logistic_log_step(double L, double k_fit, double t0, double step);
double eval_logistic(const LogisticFit& fit, double step);

/// k_fit / (t0 L ln 10)
double normalized_rate(double L, double k_fit, double t0);
double normalized_rate(const LogisticFit& fit);

/// Linear-time logistic L / (1 + exp(-r (t - t0))).
double eval_linear_logistic(double L, double r, double t0, double step);
/// Midpoint of the linear-time logistic reached from Acc(0) = acc0: (1/r) ln((L - acc0) / acc0).
double linear_takeoff(double L, double r, double acc0);

/// Rounds to `digits` significant figures.
double round_sig(double v, int digits);

void to_json(nlohmann::json& j, const LogisticFit& f);
void from_json(const nlohmann::json& j, LogisticFit& f);

struct FitKey {
  Task task = Task::comparison;
  Mode mode = Mode::direct;
  double phi = 0.0;
  int k = 0;
  std::string metric = "answer";  // which accuracy series was fitted

  auto operator<=>(const FitKey&) const = default;
};

struct TrendFinding {
  std::string kind;  // "t0_vs_k", "rhat_vs_phi", "cot_vs_direct_t0"
  std::string group;
  std::vector<double> xs;
  std::vector<double> values;
  std::vector<double> deltas;
  bool matches_expectation = false;
};

struct TrendReport {
  std::vector<std::pair<FitKey, LogisticFit>> rows;
  std::vector<TrendFinding> findings;
};

/// Tabulates converged fits and describes monotonic trends: t0 rising with k,
/// r_hat rising with phi, and CoT taking off before direct. Needs two groups.
TrendReport trend_report(const std::map<FitKey, LogisticFit>& fits);

void to_json(nlohmann::json& j, const TrendReport& r);
std::string trend_csv(const TrendReport& r);

}  // namespace groklab
