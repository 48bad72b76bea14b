#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "calens/ensemble.hpp"

namespace calens {

double rmse(const Eigen::Ref<const Eigen::VectorXd>& predicted,
            const Eigen::Ref<const Eigen::VectorXd>& truth);

struct CoveragePoint {
  double nominal;
  double empirical;
};

// Empirical coverage of central predictive intervals
// [q_{(1-p)/2}, q_{(1+p)/2}], with quantiles from monotone interpolation of
// the CDF over the grid. `out_of_span` counts truths outside the grid, which
// rely on clamped CDF extrapolation.
struct CoverageCurve {
  std::vector<CoveragePoint> points;
  Eigen::Index out_of_span = 0;

  double mean_abs_deviation() const;  // mean |empirical - nominal|
};
CoverageCurve coverage_curve(const PredictiveDistribution& predictive,
                             const Eigen::Ref<const Eigen::VectorXd>& truth,
                             const std::vector<double>& nominal_levels);
std::vector<double> default_coverage_levels();  // 0.05 .. 0.95 step 0.05

// Empirical calibration loss: the y-grid trapezoid integral of
// (1/N) sum_i |1{y_i < t} - F(t|x_i)|.
double calibration_loss(const PredictiveDistribution& predictive,
                        const Eigen::Ref<const Eigen::VectorXd>& truth);

// Grid CRPS with values standardized to the [0,1] span of the grid: bounded
// by B = 1 and proper. The accuracy loss of the excess-risk bound check.
double grid_crps(const PredictiveDistribution& predictive,
                 const Eigen::Ref<const Eigen::VectorXd>& truth);

struct TheoremBound {
  double lhs = 0.0;    // L(calibrated) - L(uncalibrated)
  double rhs = 0.0;    // 2B*C(calibrated) + (B+1)*eps_n
  double b = 1.0;      // loss bound (standardized grid span)
  double eps_n = 0.0;  // estimated by the calibrated model's own C
  bool holds = false;
};
// Excess-risk bound check between the calibrated and uncalibrated
// distributions on the same truths (standardized grid-CRPS loss).
TheoremBound theorem1_check(const PredictiveDistribution& calibrated,
                            const PredictiveDistribution& uncalibrated,
                            const Eigen::Ref<const Eigen::VectorXd>& truth);

struct EvaluationReport {
  double rmse = 0.0;
  CoverageCurve coverage;
  double calibration_loss = 0.0;
  double accuracy_loss = 0.0;  // grid CRPS
  TheoremBound theorem;
  double mean_ensemble_var = 0.0;
  double mean_residual_var = 0.0;
  double mean_noise_var = 0.0;
  bool probabilistic = false;
  bool has_theorem = false;
};

// Leave-one-out refit harness. `fit_predict(train_rows, test_row)` returns
// the held-out prediction; fold failures are recorded and excluded from the
// pooled RMSE.
struct LooResult {
  Eigen::VectorXd predictions;
  std::vector<bool> ok;
  double pooled_rmse = 0.0;
  int failed = 0;
};
LooResult loo_harness(const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                      const Eigen::Ref<const Eigen::VectorXd>& targets,
                      const std::function<double(const std::vector<Eigen::Index>&, Eigen::Index)>&
                          fit_predict,
                      int jobs = 1);

}  // namespace calens
