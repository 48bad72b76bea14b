#include "calens/evaluation.hpp"

#include <atomic>
#include <cmath>
#include <thread>

#include "calens/errors.hpp"
#include "calens/math.hpp"

namespace calens {

double rmse(const Eigen::Ref<const Eigen::VectorXd>& predicted,
            const Eigen::Ref<const Eigen::VectorXd>& truth) {
  if (predicted.size() != truth.size() || predicted.size() == 0) {
    throw InputError("rmse: length mismatch");
  }
  return std::sqrt((predicted - truth).squaredNorm() / static_cast<double>(truth.size()));
}

std::vector<double> default_coverage_levels() {
  std::vector<double> levels;
  for (int i = 1; i <= 19; ++i) levels.push_back(0.05 * i);
  return levels;
}

double CoverageCurve::mean_abs_deviation() const {
  if (points.empty()) return 0.0;
  double acc = 0.0;
  for (const CoveragePoint& p : points) acc += std::abs(p.empirical - p.nominal);
  return acc / static_cast<double>(points.size());
}

CoverageCurve coverage_curve(const PredictiveDistribution& predictive,
                             const Eigen::Ref<const Eigen::VectorXd>& truth,
                             const std::vector<double>& nominal_levels) {
  const Eigen::Index n = predictive.locations();
  if (truth.size() != n) throw InputError("coverage_curve: truth length mismatch");
  CoverageCurve out;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (truth[i] < predictive.y_grid[0] || truth[i] > predictive.y_grid[predictive.y_grid.size() - 1]) {
      ++out.out_of_span;
    }
  }
  for (double p : nominal_levels) {
    const double lo_q = (1.0 - p) / 2.0;
    const double hi_q = (1.0 + p) / 2.0;
    Eigen::Index hits = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd row = predictive.cdf.row(i).transpose();
      const double lo = quantile_from_cdf(predictive.y_grid, row, lo_q);
      const double hi = quantile_from_cdf(predictive.y_grid, row, hi_q);
      if (truth[i] >= lo && truth[i] <= hi) ++hits;
    }
    out.points.push_back({p, static_cast<double>(hits) / static_cast<double>(n)});
  }
  return out;
}

double calibration_loss(const PredictiveDistribution& predictive,
                        const Eigen::Ref<const Eigen::VectorXd>& truth) {
  const Eigen::Index n = predictive.locations();
  const Eigen::Index m = predictive.y_grid.size();
  if (truth.size() != n) throw InputError("calibration_loss: truth length mismatch");
  Eigen::VectorXd mean_abs(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double ind = truth[i] < predictive.y_grid[j] ? 1.0 : 0.0;
      acc += std::abs(ind - predictive.cdf(i, j));
    }
    mean_abs[j] = acc / static_cast<double>(n);
  }
  return trapezoid(predictive.y_grid, mean_abs);
}

namespace {

// CRPS on the grid standardized to [0,1].
double standardized_crps(const PredictiveDistribution& predictive, const Eigen::VectorXd& truth) {
  const Eigen::Index n = predictive.locations();
  const Eigen::Index m = predictive.y_grid.size();
  const double lo = predictive.y_grid[0];
  const double span = predictive.y_grid[m - 1] - lo;
  if (!(span > 0.0)) throw InputError("grid_crps: degenerate grid");
  Eigen::VectorXd tgrid = (predictive.y_grid.array() - lo) / span;
  double acc = 0.0;
  Eigen::VectorXd integrand(m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ty = (truth[i] - lo) / span;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double f = predictive.cdf(i, j);
      const double ind = ty < tgrid[j] ? 1.0 : 0.0;
      integrand[j] = (f - ind) * (f - ind);
    }
    acc += trapezoid(tgrid, integrand);
  }
  return acc / static_cast<double>(n);
}

double standardized_calibration_loss(const PredictiveDistribution& predictive,
                                     const Eigen::VectorXd& truth) {
  const Eigen::Index m = predictive.y_grid.size();
  const double span = predictive.y_grid[m - 1] - predictive.y_grid[0];
  if (!(span > 0.0)) throw InputError("theorem1_check: degenerate grid");
  return calibration_loss(predictive, truth) / span;
}

}  // namespace

double grid_crps(const PredictiveDistribution& predictive,
                 const Eigen::Ref<const Eigen::VectorXd>& truth) {
  if (truth.size() != predictive.locations()) throw InputError("grid_crps: truth length mismatch");
  return standardized_crps(predictive, truth);
}

TheoremBound theorem1_check(const PredictiveDistribution& calibrated,
                            const PredictiveDistribution& uncalibrated,
                            const Eigen::Ref<const Eigen::VectorXd>& truth) {
  if (calibrated.locations() != uncalibrated.locations() ||
      calibrated.y_grid.size() != uncalibrated.y_grid.size()) {
    throw InputError("theorem1_check: distributions must share locations and grid");
  }
  TheoremBound out;
  out.b = 1.0;  // standardized grid span
  const double loss_cal = standardized_crps(calibrated, truth);
  const double loss_unc = standardized_crps(uncalibrated, truth);
  const double closs = standardized_calibration_loss(calibrated, truth);
  out.lhs = loss_cal - loss_unc;
  out.eps_n = closs;  // empirical stand-in for the calibration rate
  out.rhs = 2.0 * out.b * closs + (out.b + 1.0) * out.eps_n;
  out.holds = out.lhs <= out.rhs;
  return out;
}

LooResult loo_harness(const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                      const Eigen::Ref<const Eigen::VectorXd>& targets,
                      const std::function<double(const std::vector<Eigen::Index>&, Eigen::Index)>&
                          fit_predict,
                      int jobs) {
  const Eigen::Index n = inputs.rows();
  if (n < 3) throw InputError("loo_harness: needs at least 3 observations");
  if (targets.size() != n) throw InputError("loo_harness: target length mismatch");
  jobs = std::max(1, jobs);

  LooResult out;
  out.predictions = Eigen::VectorXd::Zero(n);
  out.ok.assign(static_cast<size_t>(n), false);

  std::atomic<Eigen::Index> next{0};
  auto worker = [&]() {
    while (true) {
      const Eigen::Index i = next.fetch_add(1);
      if (i >= n) break;
      std::vector<Eigen::Index> train_rows;
      train_rows.reserve(n - 1);
      for (Eigen::Index r = 0; r < n; ++r) {
        if (r != i) train_rows.push_back(r);
      }
      try {
        out.predictions[i] = fit_predict(train_rows, i);
        out.ok[static_cast<size_t>(i)] = std::isfinite(out.predictions[i]);
      } catch (const Error&) {
        out.ok[static_cast<size_t>(i)] = false;
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  double acc = 0.0;
  Eigen::Index used = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (out.ok[static_cast<size_t>(i)]) {
      const double e = out.predictions[i] - targets[i];
      acc += e * e;
      ++used;
    } else {
      ++out.failed;
    }
  }
  out.pooled_rmse = used > 0 ? std::sqrt(acc / static_cast<double>(used))
                             : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace calens
