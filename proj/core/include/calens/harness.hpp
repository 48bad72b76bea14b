#pragma once

#include <string>
#include <vector>

#include "calens/config.hpp"
#include "calens/csv.hpp"
#include "calens/dataset.hpp"
#include "calens/evaluation.hpp"
#include "calens/snapshot.hpp"

namespace calens {

// Even grid over [min - margin*range, max + margin*range].
Eigen::VectorXd make_even_grid(const Eigen::Ref<const Eigen::VectorXd>& values, int size,
                               double margin);

// One replication of the 1-D benchmark protocol: four independently
// generated base training sets, one holdout set for ensemble fitting, and an
// even validation grid, all seeded from (seed, replication).
struct BenchmarkInstance {
  std::vector<KernelRidgeModel> base_models;
  Dataset holdout;
  Dataset validation;
  BaseModelSet bases_holdout;
  BaseModelSet bases_validation;
  Eigen::VectorXd eval_grid;
};
BenchmarkInstance make_benchmark_instance(const RunConfig& cfg, int replication);

struct MethodResult {
  std::string method;
  int replication = 0;
  EvaluationReport report;
};

// Fits `method` on the instance's holdout set and evaluates it on the
// validation set. Probabilistic methods fill the coverage/calibration
// fields; `ours` also carries the excess-risk bound check.
MethodResult evaluate_method_on_instance(const std::string& method,
                                         const BenchmarkInstance& instance, const RunConfig& cfg,
                                         int replication);

// Full replication study; results ordered by (replication, method) no matter
// how many worker threads run.
std::vector<MethodResult> run_benchmark(const RunConfig& cfg);

std::vector<ReportRow> report_rows(const MethodResult& result);
void write_benchmark_report(const std::string& path, const std::vector<MethodResult>& results);

// Leave-one-out pooled RMSE of a method on a dataset that carries its own
// base predictions (the spatial scenario). For `ours`, kernels come from one
// empirical-Bayes pass on the full data and are then held fixed per fold.
double loo_rmse_for_method(const Dataset& ds, const std::string& method, const RunConfig& cfg);

// Applies the spatial defaults of the application study: RBF weights and an
// OU residual kernel.
void apply_spatial_defaults(RunConfig& cfg);

// Prediction of a fitted snapshot at new locations, on a fresh grid.
struct SnapshotPrediction {
  PredictiveDistribution calibrated;
  PredictiveDistribution uncalibrated;
  Eigen::MatrixXd mean_weights;  // K x N
};
SnapshotPrediction predict_with_snapshot(const ModelSnapshot& snapshot, const BaseModelSet& bases,
                                         const Eigen::Ref<const Eigen::MatrixXd>& x,
                                         const Eigen::Ref<const Eigen::VectorXd>& y_grid,
                                         std::uint64_t seed);

}  // namespace calens
