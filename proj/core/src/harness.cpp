#include "calens/harness.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "calens/baselines.hpp"
#include "calens/errors.hpp"
#include "calens/rng.hpp"

namespace calens {

Eigen::VectorXd make_even_grid(const Eigen::Ref<const Eigen::VectorXd>& values, int size,
                               double margin) {
  if (size < 3) throw InputError("make_even_grid: size must be >= 3");
  double lo = values.minCoeff(), hi = values.maxCoeff();
  double range = hi - lo;
  if (range <= 0.0) range = std::max(std::abs(lo), 1.0);
  lo -= margin * range;
  hi += margin * range;
  Eigen::VectorXd grid(size);
  for (int j = 0; j < size; ++j) grid[j] = lo + (hi - lo) * j / (size - 1);
  return grid;
}

BenchmarkInstance make_benchmark_instance(const RunConfig& cfg, int replication) {
  const std::uint64_t rep_seed = mix64(cfg.seed + 0x9E3779B97F4A7C15ULL * (replication + 1));
  BenchmarkInstance inst;

  std::vector<TrainingSet> sets;
  for (size_t k = 0; k < cfg.base_length_scales.size(); ++k) {
    const Dataset d = synth_1d(cfg.n_per_base, Rng::derive(rep_seed, 100 + k).next_u64());
    sets.push_back(TrainingSet{d.inputs, d.targets});
  }
  inst.base_models = fit_base_models(sets, cfg.base_length_scales, cfg.base_ridge);

  inst.holdout = synth_1d(cfg.n_train, Rng::derive(rep_seed, 200).next_u64());
  inst.validation = synth_1d_grid(cfg.n_validation, Rng::derive(rep_seed, 300).next_u64());
  inst.bases_holdout = tabulate(inst.base_models, inst.holdout.inputs);
  inst.bases_validation = tabulate(inst.base_models, inst.validation.inputs);

  // Evaluation grid spans both target sets; an evaluation-time choice shared
  // by every method.
  Eigen::VectorXd pooled(inst.holdout.targets.size() + inst.validation.targets.size());
  pooled << inst.holdout.targets, inst.validation.targets;
  inst.eval_grid = make_even_grid(pooled, cfg.eval_grid_size, cfg.eval_grid_margin);
  return inst;
}

namespace {

EvaluationReport point_report(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truth) {
  EvaluationReport rep;
  rep.rmse = rmse(predictions, truth);
  rep.probabilistic = false;
  return rep;
}

EvaluationReport probabilistic_report(const PredictiveDistribution& predictive,
                                      const Eigen::VectorXd& truth) {
  EvaluationReport rep;
  rep.rmse = rmse(predictive.mean, truth);
  rep.coverage = coverage_curve(predictive, truth, default_coverage_levels());
  rep.calibration_loss = calibration_loss(predictive, truth);
  rep.accuracy_loss = grid_crps(predictive, truth);
  rep.mean_ensemble_var = predictive.ensemble_var.size() ? predictive.ensemble_var.mean() : 0.0;
  rep.mean_residual_var = predictive.residual_var.size() ? predictive.residual_var.mean() : 0.0;
  rep.mean_noise_var = predictive.noise_var.size() ? predictive.noise_var.mean() : 0.0;
  rep.probabilistic = true;
  return rep;
}

FitConfig method_fit_config(const std::string& method, const RunConfig& cfg,
                            std::uint64_t seed) {
  FitConfig fit = cfg.fit;
  fit.seed = seed;
  if (method == "ours_kl_only") {
    fit.mode = DivergenceMode::KL_only;
    fit.calibrate = false;
  } else {
    fit.mode = DivergenceMode::KL_plus_CvM;
    fit.calibrate = true;
  }
  return fit;
}

SplineHyperGrid spline_grid(const RunConfig& cfg, std::uint64_t seed) {
  SplineHyperGrid grid;
  grid.candidates = cfg.spline_candidates;
  grid.seed = seed;
  return grid;
}

}  // namespace

MethodResult evaluate_method_on_instance(const std::string& method,
                                         const BenchmarkInstance& inst, const RunConfig& cfg,
                                         int replication) {
  const std::uint64_t rep_seed = mix64(cfg.seed + 0x9E3779B97F4A7C15ULL * (replication + 1));
  const std::uint64_t method_seed = Rng::derive(rep_seed, std::hash<std::string>{}(method)).next_u64();
  const Eigen::MatrixXd& val_preds = inst.bases_validation.predictions;
  const Eigen::VectorXd& truth = inst.validation.targets;

  MethodResult out;
  out.method = method;
  out.replication = replication;

  if (method == "avg") {
    out.report = point_report(avg_ensemble(val_preds), truth);
  } else if (method == "cv_stack") {
    const StackWeights w =
        cv_stack(inst.bases_holdout.predictions, inst.holdout.targets, 5, method_seed);
    out.report = point_report(val_preds * w.weights, truth);
  } else if (method == "lnr_stack") {
    const StackWeights w = lnr_stack(inst.bases_holdout.predictions, inst.holdout.targets);
    out.report = probabilistic_report(
        gaussian_predictive(w.predict(val_preds), std::sqrt(w.residual_variance), inst.eval_grid),
        truth);
  } else if (method == "nlr_stack") {
    const NlrStackModel m =
        nlr_stack(inst.bases_holdout.predictions, inst.holdout.targets, spline_grid(cfg, method_seed));
    out.report = probabilistic_report(
        gaussian_predictive(m.predict(val_preds), std::sqrt(m.residual_variance), inst.eval_grid),
        truth);
  } else if (method == "gam") {
    const GamModel m = gam_ensemble(inst.bases_holdout.predictions, inst.holdout.inputs.col(0),
                                    inst.holdout.targets, spline_grid(cfg, method_seed));
    out.report = probabilistic_report(
        gaussian_predictive(m.predict(val_preds, inst.validation.inputs.col(0)),
                            std::sqrt(m.residual_variance), inst.eval_grid),
        truth);
  } else if (method == "ours" || method == "ours_kl_only") {
    const FitConfig fit = method_fit_config(method, cfg, method_seed);
    const GibbsFit gf =
        gibbs_fit(inst.holdout.inputs, inst.holdout.targets, inst.bases_holdout, fit);
    const PredictiveDistribution f0 =
        systematic_cdf(gf.ensemble, inst.bases_validation, inst.validation.inputs, inst.eval_grid,
                       fit.cdf_draws, Rng::derive(method_seed, 0xFA).next_u64());
    const PredictiveDistribution calibrated = apply_link(gf.link, f0);
    out.report = probabilistic_report(calibrated, truth);
    if (method == "ours") {
      out.report.theorem = theorem1_check(calibrated, f0, truth);
      out.report.has_theorem = true;
    }
  } else {
    throw ConfigError("unknown method '" + method + "'");
  }
  return out;
}

std::vector<MethodResult> run_benchmark(const RunConfig& cfg) {
  const std::vector<std::string> methods = cfg.methods.empty() ? all_methods() : cfg.methods;
  std::vector<MethodResult> results(static_cast<size_t>(cfg.reps) * methods.size());

  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex error_mutex;
  auto worker = [&]() {
    while (!failed.load()) {
      const int r = next.fetch_add(1);
      if (r >= cfg.reps) break;
      try {
        const BenchmarkInstance inst = make_benchmark_instance(cfg, r);
        for (size_t m = 0; m < methods.size(); ++m) {
          results[static_cast<size_t>(r) * methods.size() + m] =
              evaluate_method_on_instance(methods[m], inst, cfg, r);
        }
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!failed.exchange(true)) first_error = e.what();
      }
    }
  };
  const int jobs = std::max(1, cfg.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failed.load()) throw InferenceError("benchmark replication failed: " + first_error);
  return results;
}

std::vector<ReportRow> report_rows(const MethodResult& r) {
  std::vector<ReportRow> rows;
  rows.push_back({"rmse", std::nullopt, r.report.rmse, r.method, r.replication});
  if (r.report.probabilistic) {
    for (const CoveragePoint& p : r.report.coverage.points) {
      rows.push_back({"coverage", p.nominal, p.empirical, r.method, r.replication});
    }
    rows.push_back({"coverage_mad", std::nullopt, r.report.coverage.mean_abs_deviation(),
                    r.method, r.replication});
    rows.push_back(
        {"calibration_loss", std::nullopt, r.report.calibration_loss, r.method, r.replication});
    rows.push_back({"crps", std::nullopt, r.report.accuracy_loss, r.method, r.replication});
    rows.push_back({"ensemble_var", std::nullopt, r.report.mean_ensemble_var, r.method,
                    r.replication});
    rows.push_back({"residual_var", std::nullopt, r.report.mean_residual_var, r.method,
                    r.replication});
    rows.push_back(
        {"noise_var", std::nullopt, r.report.mean_noise_var, r.method, r.replication});
  }
  if (r.report.has_theorem) {
    rows.push_back({"theorem_lhs", std::nullopt, r.report.theorem.lhs, r.method, r.replication});
    rows.push_back({"theorem_rhs", std::nullopt, r.report.theorem.rhs, r.method, r.replication});
    rows.push_back({"theorem_b", std::nullopt, r.report.theorem.b, r.method, r.replication});
    rows.push_back(
        {"theorem_eps_n", std::nullopt, r.report.theorem.eps_n, r.method, r.replication});
    rows.push_back({"theorem_holds", std::nullopt, r.report.theorem.holds ? 1.0 : 0.0, r.method,
                    r.replication});
  }
  return rows;
}

void write_benchmark_report(const std::string& path, const std::vector<MethodResult>& results) {
  std::vector<ReportRow> rows;
  for (const MethodResult& r : results) {
    const std::vector<ReportRow> part = report_rows(r);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  write_report_csv(path, rows);
}

void apply_spatial_defaults(RunConfig& cfg) {
  cfg.fit.kernel_mu.family = KernelFamily::RBF;
  cfg.fit.kernel_eps.family = KernelFamily::OU;
}

double loo_rmse_for_method(const Dataset& ds, const std::string& method, const RunConfig& cfg) {
  validate_dataset(ds);
  if (!ds.base_predictions) throw InputError("loo: dataset carries no base predictions");
  const Eigen::MatrixXd& preds = *ds.base_predictions;
  const Eigen::Index n = ds.size();

  FitConfig fit = cfg.fit;
  fit.seed = Rng::derive(cfg.seed, 0x100).next_u64();
  if (method == "ours" || method == "ours_kl_only") {
    fit = method_fit_config(method, cfg, fit.seed);
    // One empirical-Bayes pass on the full data; folds reuse the kernels.
    if (fit.eb.enabled && (!fit.eb.mu_grid.empty() || !fit.eb.eps_grid.empty())) {
      BaseModelSet bases{ds.base_names, ds.inputs, preds};
      const KernelSelection sel = empirical_bayes_select(ds.inputs, ds.targets, bases, fit);
      fit.kernel_mu = sel.kernel_mu;
      fit.kernel_eps = sel.kernel_eps;
      fit.eb.enabled = false;
    }
  }

  auto subset = [&](const std::vector<Eigen::Index>& rows, Eigen::MatrixXd& x, Eigen::VectorXd& y,
                    Eigen::MatrixXd& p) {
    x.resize(static_cast<Eigen::Index>(rows.size()), ds.inputs.cols());
    y.resize(static_cast<Eigen::Index>(rows.size()));
    p.resize(static_cast<Eigen::Index>(rows.size()), preds.cols());
    for (size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = ds.inputs.row(rows[i]);
      y[static_cast<Eigen::Index>(i)] = ds.targets[rows[i]];
      p.row(static_cast<Eigen::Index>(i)) = preds.row(rows[i]);
    }
  };

  auto fit_predict = [&](const std::vector<Eigen::Index>& rows, Eigen::Index test) -> double {
    Eigen::MatrixXd x, p;
    Eigen::VectorXd y;
    subset(rows, x, y, p);
    if (method == "avg") {
      return avg_ensemble(preds.row(test)).value();
    }
    if (method == "cv_stack") {
      const StackWeights w = cv_stack(p, y, 5, Rng::derive(fit.seed, test).next_u64());
      return preds.row(test).dot(w.weights);
    }
    if (method == "lnr_stack") {
      const StackWeights w = lnr_stack(p, y);
      return w.intercept + preds.row(test).dot(w.weights);
    }
    if (method == "nlr_stack") {
      SplineHyperGrid grid;
      grid.candidates = cfg.spline_candidates;
      grid.seed = Rng::derive(fit.seed, test).next_u64();
      const NlrStackModel m = nlr_stack(p, y, grid);
      return m.predict(preds.row(test))[0];
    }
    if (method == "ours" || method == "ours_kl_only") {
      FitConfig fold_fit = fit;
      fold_fit.seed = Rng::derive(fit.seed, test).next_u64();
      BaseModelSet bases{ds.base_names, x, p};
      const GibbsFit gf = gibbs_fit(x, y, bases, fold_fit);
      const Eigen::VectorXd grid = make_even_grid(y, cfg.eval_grid_size, cfg.eval_grid_margin);
      BaseModelSet test_bases{ds.base_names, ds.inputs.row(test), preds.row(test)};
      const PredictiveDistribution f0 =
          systematic_cdf(gf.ensemble, test_bases, ds.inputs.row(test), grid, fold_fit.cdf_draws,
                         Rng::derive(fold_fit.seed, 0xFA).next_u64());
      return apply_link(gf.link, f0).mean[0];
    }
    throw ConfigError("loo: unsupported method '" + method + "'");
  };

  const LooResult res = loo_harness(ds.inputs, ds.targets, fit_predict, cfg.jobs);
  (void)n;
  return res.pooled_rmse;
}

SnapshotPrediction predict_with_snapshot(const ModelSnapshot& snapshot, const BaseModelSet& bases,
                                         const Eigen::Ref<const Eigen::MatrixXd>& x,
                                         const Eigen::Ref<const Eigen::VectorXd>& y_grid,
                                         std::uint64_t seed) {
  SnapshotPrediction out;
  out.uncalibrated =
      systematic_cdf(snapshot.ensemble, bases, x, y_grid, snapshot.cdf_draws, seed);
  out.calibrated = apply_link(snapshot.link, out.uncalibrated);
  out.mean_weights =
      systematic_draws(snapshot.ensemble, bases, x, 256, Rng::derive(seed, 0x77).next_u64())
          .mean_weights;
  return out;
}

}  // namespace calens
