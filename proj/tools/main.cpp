// Command-line driver: synthetic data generation, base-model training,
// ensemble fitting, prediction, evaluation, leave-one-out and the
// replication benchmark.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "calens/baselines.hpp"
#include "calens/csv.hpp"
#include "calens/dataset.hpp"
#include "calens/errors.hpp"
#include "calens/harness.hpp"
#include "calens/rng.hpp"
#include "calens/snapshot.hpp"

namespace fs = std::filesystem;
using namespace calens;

namespace {

struct CommonFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  int jobs = 0;
  std::string method;
  int reps = 0;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON config file");
  cmd->add_option("--seed", flags.seed, "master seed")->each([&](const std::string&) {
    flags.seed_set = true;
  });
  cmd->add_option("--out", flags.out, "output path or directory");
  cmd->add_option("--jobs", flags.jobs, "parallel worker count");
  cmd->add_option("--method", flags.method, "method name");
  cmd->add_option("--reps", flags.reps, "replication count");
}

RunConfig resolve_config(const CommonFlags& flags) {
  RunConfig cfg =
      flags.config_path.empty() ? default_run_config() : load_run_config(flags.config_path);
  if (flags.seed_set) {
    cfg.seed = flags.seed;
    cfg.fit.seed = flags.seed;
  } else {
    cfg.fit.seed = cfg.seed;
  }
  if (flags.jobs > 0) cfg.jobs = flags.jobs;
  if (flags.reps > 0) cfg.reps = flags.reps;
  if (!flags.method.empty()) cfg.methods = {flags.method};
  if (!flags.out.empty()) cfg.out_dir = flags.out;
  return cfg;
}

std::string join_out(const RunConfig& cfg, const std::string& name) {
  if (cfg.out_dir.empty()) return name;
  fs::create_directories(cfg.out_dir);
  return (fs::path(cfg.out_dir) / name).string();
}

BaseModelSet bases_from_dataset(const Dataset& ds) {
  if (!ds.base_predictions) throw InputError("dataset has no base predictions");
  return BaseModelSet{ds.base_names, ds.inputs, *ds.base_predictions};
}

int run_cli(int argc, char** argv) {
  CLI::App app{"spatially adaptive calibrated GP ensembles"};
  app.require_subcommand(1);

  CommonFlags flags;

  // synth1d
  auto* synth1d_cmd = app.add_subcommand("synth1d", "generate the 1-D benchmark dataset");
  int synth_n = 20;
  bool additive = false;
  synth1d_cmd->add_option("--n", synth_n, "number of points");
  synth1d_cmd->add_flag("--additive-noise", additive, "use y = f(x) + e instead of y = f(x+e)");
  add_common(synth1d_cmd, flags);
  synth1d_cmd->callback([&]() {
    RunConfig cfg = resolve_config(flags);
    const Dataset ds = synth_1d(synth_n, cfg.seed, additive);
    const std::string path = join_out(cfg, "dataset.csv");
    save_dataset(ds, path);
    std::cout << "wrote " << path << " (" << ds.size() << " rows)\n";
  });

  // synthspatial
  auto* spatial_cmd = app.add_subcommand("synthspatial", "generate the 2-D spatial scenario");
  int sites = 43, models = 3;
  spatial_cmd->add_option("--sites", sites, "number of monitor sites");
  spatial_cmd->add_option("--models", models, "number of base models");
  add_common(spatial_cmd, flags);
  spatial_cmd->callback([&]() {
    RunConfig cfg = resolve_config(flags);
    const Dataset ds = synth_spatial(sites, models, cfg.seed);
    const std::string obs = join_out(cfg, "spatial.csv");
    const std::string preds = join_out(cfg, "spatial_bases.csv");
    save_dataset(ds, obs);
    save_base_predictions(ds, preds);
    std::cout << "wrote " << obs << " and " << preds << "\n";
  });

  // fitbases
  auto* fitbases_cmd =
      app.add_subcommand("fitbases", "train the kernel ridge base models of the 1-D protocol");
  std::string fitbases_data;
  fitbases_cmd->add_option("--data", fitbases_data, "observations to tabulate at");
  add_common(fitbases_cmd, flags);
  fitbases_cmd->callback([&]() {
    RunConfig cfg = resolve_config(flags);
    std::vector<TrainingSet> sets;
    for (size_t k = 0; k < cfg.base_length_scales.size(); ++k) {
      const Dataset d = synth_1d(cfg.n_per_base, Rng::derive(cfg.seed, 100 + k).next_u64());
      sets.push_back(TrainingSet{d.inputs, d.targets});
    }
    const std::vector<KernelRidgeModel> models_fit =
        fit_base_models(sets, cfg.base_length_scales, cfg.base_ridge);
    ModelSnapshot snap;
    snap.base_models = models_fit;
    for (const KernelRidgeModel& m : models_fit) snap.base_names.push_back(m.name);
    snap.link = LinkPosterior::make_identity();
    snap.y_grid = Eigen::VectorXd::LinSpaced(2, 0.0, 1.0);
    const std::string bases_path = join_out(cfg, "bases.json");
    save_snapshot(snap, bases_path);
    std::cout << "wrote " << bases_path << "\n";
    if (!fitbases_data.empty()) {
      Dataset ds = load_dataset(fitbases_data);
      const BaseModelSet tab = tabulate(models_fit, ds.inputs);
      ds.base_predictions = tab.predictions;
      ds.base_names = tab.names;
      const std::string preds_path = join_out(cfg, "base_predictions.csv");
      save_base_predictions(ds, preds_path);
      std::cout << "wrote " << preds_path << "\n";
    }
    std::cout << "trained " << models_fit.size() << " base models\n";
  });

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "fit the ensemble (two-step algorithm)");
  std::string fit_data, fit_bases, fit_bases_model;
  fit_cmd->add_option("--data", fit_data, "observations CSV")->required();
  fit_cmd->add_option("--bases", fit_bases, "base predictions CSV at the observation locations");
  fit_cmd->add_option("--bases-model", fit_bases_model, "bases snapshot to embed for prediction");
  add_common(fit_cmd, flags);
  fit_cmd->callback([&]() {
    RunConfig cfg = resolve_config(flags);
    Dataset ds = load_dataset(fit_data);
    if (!fit_bases.empty()) attach_base_predictions(ds, load_base_predictions(fit_bases));
    std::vector<KernelRidgeModel> embedded;
    if (!fit_bases_model.empty()) {
      embedded = load_snapshot(fit_bases_model).base_models;
      if (!ds.base_predictions) {
        const BaseModelSet tab = tabulate(embedded, ds.inputs);
        ds.base_predictions = tab.predictions;
        ds.base_names = tab.names;
      }
    }
    const BaseModelSet bases = bases_from_dataset(ds);
    if (ds.dim() == 2) apply_spatial_defaults(cfg);
    FitConfig fit = cfg.fit;
    if (!cfg.methods.empty() && cfg.methods.front() == "ours_kl_only") {
      fit.mode = DivergenceMode::KL_only;
      fit.calibrate = false;
    }
    const GibbsFit gf = gibbs_fit(ds.inputs, ds.targets, bases, fit);
    ModelSnapshot snap;
    snap.ensemble = gf.ensemble;
    snap.link = gf.link;
    snap.y_grid = gf.grid.y;
    snap.mode = fit.mode;
    snap.base_names = bases.names;
    snap.base_models = embedded;
    snap.cdf_draws = fit.cdf_draws;
    const std::string path = join_out(cfg, "model.json");
    save_snapshot(snap, path);
    std::cout << "wrote " << path << " (selected l_mu=" << gf.selection.kernel_mu.length_scale
              << ", l_eps=" << gf.selection.kernel_eps.length_scale << ")\n";
  });

  // predict
  auto* predict_cmd = app.add_subcommand("predict", "predict at new locations");
  std::string predict_model, predict_locations, predict_bases;
  int predict_grid = 101;
  predict_cmd->add_option("--model", predict_model, "model snapshot")->required();
  predict_cmd->add_option("--locations", predict_locations, "locations CSV (x1[,x2],y or bases file)")
      ->required();
  predict_cmd->add_option("--bases", predict_bases, "base predictions CSV at the locations");
  predict_cmd->add_option("--grid-size", predict_grid, "prediction grid size");
  add_common(predict_cmd, flags);
  predict_cmd->callback([&]() {
    RunConfig cfg = resolve_config(flags);
    const ModelSnapshot snap = load_snapshot(predict_model);
    Eigen::MatrixXd x;
    BaseModelSet bases;
    if (!predict_bases.empty()) {
      const Dataset preds = load_base_predictions(predict_bases);
      x = preds.inputs;
      bases = BaseModelSet{preds.base_names, preds.inputs, *preds.base_predictions};
    } else if (!snap.base_models.empty()) {
      const Dataset locs = load_dataset(predict_locations);
      x = locs.inputs;
      bases = tabulate(snap.base_models, x);
    } else {
      throw InputError("predict: need --bases or a snapshot with embedded base models");
    }
    const Eigen::VectorXd grid =
        make_even_grid(snap.y_grid, predict_grid, 0.0);  // span of the fit-time grid
    const SnapshotPrediction pred =
        predict_with_snapshot(snap, bases, x, grid, Rng::derive(cfg.seed, 0xBB).next_u64());
    const std::string path = join_out(cfg, "predictions.csv");
    std::ofstream outf(path);
    if (!outf) throw IoError("cannot write '" + path + "'");
    outf << (x.cols() == 2 ? "x1,x2" : "x1")
         << ",mean,var_ensemble,var_residual,var_noise,q05,q25,q50,q75,q95\n";
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      outf << format_g17(x(i, 0));
      if (x.cols() == 2) outf << ',' << format_g17(x(i, 1));
      outf << ',' << format_g17(pred.calibrated.mean[i]) << ','
           << format_g17(pred.calibrated.ensemble_var[i]) << ','
           << format_g17(pred.calibrated.residual_var[i]) << ','
           << format_g17(pred.calibrated.noise_var[i]);
      const Eigen::VectorXd row = pred.calibrated.cdf.row(i).transpose();
      for (double q : {0.05, 0.25, 0.5, 0.75, 0.95}) {
        outf << ',' << format_g17(quantile_from_cdf(grid, row, q));
      }
      outf << "\n";
    }
    std::cout << "wrote " << path << "\n";
  });

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a fitted model on a dataset");
  std::string eval_model, eval_data, eval_bases;
  eval_cmd->add_option("--model", eval_model, "model snapshot")->required();
  eval_cmd->add_option("--data", eval_data, "validation observations CSV")->required();
  eval_cmd->add_option("--bases", eval_bases, "base predictions CSV at the validation locations");
  add_common(eval_cmd, flags);
  eval_cmd->callback([&]() {
    RunConfig cfg = resolve_config(flags);
    const ModelSnapshot snap = load_snapshot(eval_model);
    Dataset ds = load_dataset(eval_data);
    if (!eval_bases.empty()) attach_base_predictions(ds, load_base_predictions(eval_bases));
    BaseModelSet bases;
    if (ds.base_predictions) {
      bases = bases_from_dataset(ds);
    } else if (!snap.base_models.empty()) {
      bases = tabulate(snap.base_models, ds.inputs);
    } else {
      throw InputError("evaluate: need --bases or a snapshot with embedded base models");
    }
    Eigen::VectorXd pooled(ds.targets.size() + snap.y_grid.size());
    pooled << ds.targets, snap.y_grid;
    const Eigen::VectorXd grid = make_even_grid(pooled, cfg.eval_grid_size, cfg.eval_grid_margin);
    const SnapshotPrediction pred =
        predict_with_snapshot(snap, bases, ds.inputs, grid, Rng::derive(cfg.seed, 0xE).next_u64());
    MethodResult res;
    res.method = cfg.methods.empty() ? "ours" : cfg.methods.front();
    res.replication = 0;
    res.report.rmse = rmse(pred.calibrated.mean, ds.targets);
    res.report.coverage = coverage_curve(pred.calibrated, ds.targets, default_coverage_levels());
    res.report.calibration_loss = calibration_loss(pred.calibrated, ds.targets);
    res.report.accuracy_loss = grid_crps(pred.calibrated, ds.targets);
    res.report.theorem = theorem1_check(pred.calibrated, pred.uncalibrated, ds.targets);
    res.report.has_theorem = true;
    res.report.probabilistic = true;
    res.report.mean_ensemble_var = pred.calibrated.ensemble_var.mean();
    res.report.mean_residual_var = pred.calibrated.residual_var.mean();
    res.report.mean_noise_var = pred.calibrated.noise_var.mean();
    if (res.report.coverage.out_of_span > 0) {
      std::cerr << "warning: " << res.report.coverage.out_of_span
                << " truths outside the evaluation grid span (CDF extrapolated)\n";
    }
    const std::string path = join_out(cfg, "report.csv");
    write_report_csv(path, report_rows(res));
    std::cout << "wrote " << path << " (rmse=" << res.report.rmse << ")\n";
  });

  // loo
  auto* loo_cmd = app.add_subcommand("loo", "leave-one-out RMSE on a dataset with base predictions");
  std::string loo_data, loo_bases;
  loo_cmd->add_option("--data", loo_data, "observations CSV")->required();
  loo_cmd->add_option("--bases", loo_bases, "base predictions CSV");
  add_common(loo_cmd, flags);
  loo_cmd->callback([&]() {
    RunConfig cfg = resolve_config(flags);
    Dataset ds = load_dataset(loo_data);
    if (!loo_bases.empty()) attach_base_predictions(ds, load_base_predictions(loo_bases));
    if (ds.dim() == 2) apply_spatial_defaults(cfg);
    const std::vector<std::string> methods = cfg.methods.empty() ? all_methods() : cfg.methods;
    std::vector<ReportRow> rows;
    for (const std::string& m : methods) {
      if (m == "gam" && ds.dim() == 2) continue;  // gam's smoother is 1-D
      const double v = loo_rmse_for_method(ds, m, cfg);
      rows.push_back({"loo_rmse", std::nullopt, v, m, 0});
      std::cout << m << " loo_rmse=" << v << "\n";
    }
    const std::string path = join_out(cfg, "loo_report.csv");
    write_report_csv(path, rows);
    std::cout << "wrote " << path << "\n";
  });

  // benchmark
  auto* bench_cmd = app.add_subcommand("benchmark", "replicated 1-D benchmark study");
  add_common(bench_cmd, flags);
  bench_cmd->callback([&]() {
    RunConfig cfg = resolve_config(flags);
    const std::vector<MethodResult> results = run_benchmark(cfg);
    const std::string path = join_out(cfg, "benchmark_report.csv");
    write_benchmark_report(path, results);
    std::cout << "wrote " << path << " (" << results.size() << " method-replications)\n";
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: category=" << e.category() << " message=\"" << e.what() << "\"\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: category=internal message=\"" << e.what() << "\"\n";
    return 1;
  }
}
