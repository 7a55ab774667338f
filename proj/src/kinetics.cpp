#include "groklab/kinetics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace groklab {

double logistic_log_step(double L, double k_fit, double t0, double step) {
  return L / (1.0 + std::exp(-k_fit * (std::log10(step) - std::log10(t0))));
}

double eval_logistic(const LogisticFit& fit, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("step must be positive");
  return fit.L / (1.0 + std::exp(-fit.k_fit * (std::log10(step) - fit.x0)));
}

double normalized_rate(double L, double k_fit, double t0) {
  if (L == 0.0 || t0 == 0.0) throw std::invalid_argument("normalized rate needs L and t0 non-zero");
  return k_fit / (t0 * L * std::numbers::ln10);
}

double normalized_rate(const LogisticFit& fit) {
  if (!fit.converged) throw std::invalid_argument("normalized rate of a non-converged fit");
  return normalized_rate(fit.L, fit.k_fit, fit.t0);
}

double eval_linear_logistic(double L, double r, double t0, double step) {
  return L / (1.0 + std::exp(-r * (step - t0)));
}

double linear_takeoff(double L, double r, double acc0) {
  if (!(r > 0.0) || !(acc0 > 0.0) || !(acc0 < L)) {
    throw std::invalid_argument("linear take-off needs r > 0 and 0 < acc0 < L");
  }
  return std::log((L - acc0) / acc0) / r;
}

double round_sig(double v, int digits) {
  if (v == 0.0 || !std::isfinite(v)) return v;
  const double mag = std::floor(std::log10(std::fabs(v)));
  const double scale = std::pow(10.0, digits - 1 - mag);
  return std::round(v * scale) / scale;
}

namespace {

struct Problem {
  Eigen::VectorXd x, y;
  Eigen::Vector3d lo, hi;

  Eigen::VectorXd residual(const Eigen::Vector3d& p) const {
    Eigen::VectorXd r(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      r(i) = p(0) / (1.0 + std::exp(-p(1) * (x(i) - p(2)))) - y(i);
    }
    return r;
  }

  Eigen::MatrixXd jacobian(const Eigen::Vector3d& p) const {
    Eigen::MatrixXd J(x.size(), 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-p(1) * (x(i) - p(2))));
      const double ds = p(0) * s * (1.0 - s);
      J(i, 0) = s;
      J(i, 1) = ds * (x(i) - p(2));
      J(i, 2) = -ds * p(1);
    }
    return J;
  }

  Eigen::Vector3d clamp(Eigen::Vector3d p) const { return p.cwiseMax(lo).cwiseMin(hi); }
};

void finish_stats(LogisticFit& f, const Problem& pb) {
  const Eigen::Vector3d p(f.L, f.k_fit, f.x0);
  const Eigen::VectorXd r = pb.residual(p);
  const double ss_res = r.squaredNorm();
  const double mean = pb.y.mean();
  const double ss_tot = (pb.y.array() - mean).square().sum();
  f.rmse = std::sqrt(ss_res / static_cast<double>(pb.y.size()));
  f.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
}

}  // namespace

LogisticFit fit_logistic(std::span<const CurvePoint> points, const FitOptions& opt) {
  if (points.size() < 4) throw std::invalid_argument("logistic fit needs at least 4 points");
  Problem pb;
  const auto n = static_cast<Eigen::Index>(points.size());
  pb.x.resize(n);
  pb.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& pt = points[static_cast<std::size_t>(i)];
    if (!(pt.step > 0.0)) throw std::invalid_argument("logistic fit needs positive steps");
    if (!std::isfinite(pt.acc)) throw std::invalid_argument("non-finite accuracy in curve");
    pb.x(i) = std::log10(pt.step);
    pb.y(i) = pt.acc;
  }

  LogisticFit fit;
  fit.n_points = points.size();
  const double ymax = pb.y.maxCoeff();
  const double ymin = pb.y.minCoeff();
  if (ymax - ymin < opt.min_range) {
    fit.diagnostic = "flat curve";
    return fit;
  }
  if (ymax < opt.min_peak) {
    fit.diagnostic = "accuracy never leaves zero";
    return fit;
  }

  const double xmin = pb.x.minCoeff();
  const double xmax = pb.x.maxCoeff();
  constexpr double tiny = 1e-12;
  pb.lo = Eigen::Vector3d(tiny, tiny, xmin - opt.x0_margin);
  pb.hi = Eigen::Vector3d(opt.max_ceiling, opt.max_slope, xmax + opt.x0_margin);

  std::vector<double> xs(pb.x.data(), pb.x.data() + n);
  std::sort(xs.begin(), xs.end());
  const double median = n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
  Eigen::Vector3d p = pb.clamp(Eigen::Vector3d(ymax, 1.0, median));

  Eigen::VectorXd r = pb.residual(p);
  double cost = r.squaredNorm();
  double lambda = 1e-3;
  for (int it = 1; it <= opt.max_iterations; ++it) {
    fit.iterations = it;
    const Eigen::MatrixXd J = pb.jacobian(p);
    const Eigen::Matrix3d JtJ = J.transpose() * J;
    const Eigen::Vector3d g = J.transpose() * r;
    Eigen::Matrix3d A = JtJ;
    for (int d = 0; d < 3; ++d) A(d, d) += lambda * std::max(JtJ(d, d), 1e-12);
    const Eigen::Vector3d step = A.ldlt().solve(-g);
    const Eigen::Vector3d cand = pb.clamp(p + step);
    const double rel = (cand - p).norm() / (p.norm() + 1e-12);
    const Eigen::VectorXd rc = pb.residual(cand);
    const double cc = rc.squaredNorm();
    if (cc <= cost) {
      p = cand;
      r = rc;
      cost = cc;
      lambda = std::max(lambda / 3.0, 1e-12);
    } else {
      lambda = std::min(lambda * 4.0, 1e16);
    }
    if (rel < opt.rel_tol) {
      fit.converged = true;
      break;
    }
  }
  if (!fit.converged) fit.diagnostic = "iteration limit reached";
  if (!p.allFinite()) {
    fit.converged = false;
    fit.diagnostic = "non-finite parameters";
  }

  fit.L = p(0);
  fit.k_fit = p(1);
  fit.x0 = p(2);
  fit.t0 = std::pow(10.0, p(2));
  fit.r_hat = normalized_rate(fit.L, fit.k_fit, fit.t0);
  finish_stats(fit, pb);
  return fit;
}

void to_json(nlohmann::json& j, const LogisticFit& f) {
  j = nlohmann::json{{"L", f.L},
                     {"k_fit", f.k_fit},
                     {"t0", f.t0},
                     {"x0", f.x0},
                     {"r_hat", f.r_hat},
                     {"r_squared", f.r_squared},
                     {"rmse", f.rmse},
                     {"converged", f.converged},
                     {"iterations", f.iterations},
                     {"n_points", f.n_points},
                     {"diagnostic", f.diagnostic}};
}

void from_json(const nlohmann::json& j, LogisticFit& f) {
  f.L = j.at("L").get<double>();
  f.k_fit = j.at("k_fit").get<double>();
  f.t0 = j.at("t0").get<double>();
  f.x0 = j.value("x0", f.t0 > 0 ? std::log10(f.t0) : 0.0);
  f.r_hat = j.value("r_hat", 0.0);
  f.r_squared = j.value("r_squared", 0.0);
  f.rmse = j.value("rmse", 0.0);
  f.converged = j.at("converged").get<bool>();
  f.iterations = j.value("iterations", 0);
  f.n_points = j.value("n_points", std::size_t{0});
  f.diagnostic = j.value("diagnostic", std::string{});
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

TrendFinding series(std::string kind, std::string group, std::vector<std::pair<double, double>> pts,
                    bool expect_increasing) {
  std::sort(pts.begin(), pts.end());
  TrendFinding f;
  f.kind = std::move(kind);
  f.group = std::move(group);
  bool ok = true;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    f.xs.push_back(pts[i].first);
    f.values.push_back(pts[i].second);
    if (i > 0) {
      const double d = pts[i].second - pts[i - 1].second;
      f.deltas.push_back(d);
      ok = ok && (expect_increasing ? d > 0 : d < 0);
    }
  }
  f.matches_expectation = ok;
  return f;
}

}  // namespace

TrendReport trend_report(const std::map<FitKey, LogisticFit>& fits) {
  if (fits.size() < 2) throw std::invalid_argument("trend report needs at least two groups");
  TrendReport rep;
  for (const auto& [key, fit] : fits) rep.rows.emplace_back(key, fit);

  using Group3 = std::tuple<Task, Mode, std::string, double>;  // fixed phi
  using GroupK = std::tuple<Task, Mode, std::string, int>;     // fixed k
  std::map<Group3, std::vector<std::pair<double, double>>> by_k;
  std::map<GroupK, std::vector<std::pair<double, double>>> by_phi;
  for (const auto& [key, fit] : fits) {
    if (!fit.converged) continue;
    by_k[{key.task, key.mode, key.metric, key.phi}].emplace_back(key.k, fit.t0);
    by_phi[{key.task, key.mode, key.metric, key.k}].emplace_back(key.phi, fit.r_hat);
  }
  for (auto& [g, pts] : by_k) {
    if (pts.size() < 2) continue;
    const auto& [task, mode, metric, phi] = g;
    rep.findings.push_back(series("t0_vs_k",
                                  std::string(to_string(task)) + "/" + std::string(to_string(mode)) +
                                      "/" + metric + "/phi=" + fmt(phi),
                                  pts, true));
  }
  for (auto& [g, pts] : by_phi) {
    if (pts.size() < 2) continue;
    const auto& [task, mode, metric, k] = g;
    rep.findings.push_back(series("rhat_vs_phi",
                                  std::string(to_string(task)) + "/" + std::string(to_string(mode)) +
                                      "/" + metric + "/k=" + std::to_string(k),
                                  pts, true));
  }
  for (const auto& [key, fit] : fits) {
    if (key.mode != Mode::cot || !fit.converged) continue;
    FitKey other = key;
    other.mode = Mode::direct;
    const auto it = fits.find(other);
    if (it == fits.end() || !it->second.converged) continue;
    TrendFinding f;
    f.kind = "cot_vs_direct_t0";
    f.group = std::string(to_string(key.task)) + "/" + key.metric + "/phi=" + fmt(key.phi) +
              "/k=" + std::to_string(key.k);
    f.xs = {0.0, 1.0};
    f.values = {it->second.t0, fit.t0};
    f.deltas = {fit.t0 - it->second.t0};
    f.matches_expectation = fit.t0 < it->second.t0;
    rep.findings.push_back(std::move(f));
  }
  return rep;
}

void to_json(nlohmann::json& j, const TrendReport& r) {
  j = nlohmann::json::object();
  auto rows = nlohmann::json::array();
  for (const auto& [key, fit] : r.rows) {
    nlohmann::json row = fit;
    row["task"] = to_string(key.task);
    row["mode"] = to_string(key.mode);
    row["phi"] = key.phi;
    row["k"] = key.k;
    row["metric"] = key.metric;
    rows.push_back(std::move(row));
  }
  auto findings = nlohmann::json::array();
  for (const auto& f : r.findings) {
    findings.push_back({{"kind", f.kind},
                        {"group", f.group},
                        {"xs", f.xs},
                        {"values", f.values},
                        {"deltas", f.deltas},
                        {"matches_expectation", f.matches_expectation}});
  }
  j["rows"] = std::move(rows);
  j["findings"] = std::move(findings);
}

std::string trend_csv(const TrendReport& r) {
  std::ostringstream os;
  os.precision(8);
  os << "task,mode,phi,k,metric,L,k_fit,t0,r_hat,r_squared,rmse,converged\n";
  for (const auto& [key, f] : r.rows) {
    os << to_string(key.task) << ',' << to_string(key.mode) << ',' << key.phi << ',' << key.k << ','
       << key.metric << ',' << f.L << ',' << f.k_fit << ',' << f.t0 << ',' << f.r_hat << ','
       << f.r_squared << ',' << f.rmse << ',' << (f.converged ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace groklab
