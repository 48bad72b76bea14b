#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "calens/calibration.hpp"
#include "calens/ensemble.hpp"

namespace calens {

enum class DivergenceMode { KL_only, KL_plus_CvM };
enum class GridPolicy { even_span, empirical_quantiles };

// The {y_j} grid approximating the CvM integral.
struct DivergenceGrid {
  Eigen::VectorXd y;
  GridPolicy policy = GridPolicy::even_span;
};

// even_span covers [min - 0.1*range, max + 0.1*range]; empirical_quantiles
// takes mid-quantiles of the observed values. Requires size >= 8.
DivergenceGrid make_divergence_grid(const Eigen::Ref<const Eigen::VectorXd>& values, int size,
                                    GridPolicy policy);

// -log f with the density floored at 1e-300.
double kl_hat(double density);
double gaussian_log_density(double y, double mean, double sd);

// (1/M) sum_j (F(y_j) - 1{y < y_j})^2; always in [0,1].
double cvm_hat(double y, const Eigen::Ref<const Eigen::VectorXd>& cdf_at_grid,
               const DivergenceGrid& grid);

double composite_divergence(double y, const Eigen::Ref<const Eigen::VectorXd>& cdf_at_grid,
                            double density, const DivergenceGrid& grid, DivergenceMode mode);

// Priors for the scalar hyperparameters; GP priors are the zero-mean
// processes under kernel_mu / kernel_eps.
struct EnsemblePrior {
  LogNormalFactor temperature{0.0, 1.0};
  LogNormalFactor noise_sd{0.0, 1.0};
};

struct EmpiricalBayesConfig {
  std::vector<double> mu_grid;
  std::vector<double> eps_grid;
  int iterations = 200;
  bool enabled = true;
};

struct FitConfig {
  double step_size = 1e-2;
  int iterations = 2000;
  int mc_samples = 8;
  std::uint64_t seed = 0;
  int inducing_mean = 64;  // caps, actual count is min(N, cap)
  int inducing_cov = 16;
  GridPolicy grid_policy = GridPolicy::even_span;
  int grid_size = 30;
  DivergenceMode mode = DivergenceMode::KL_plus_CvM;
  bool calibrate = true;
  double probit_scale = 1e-2;
  KernelSpec kernel_mu{KernelFamily::RBF, 0.2, 1.0, std::nullopt};
  KernelSpec kernel_eps{KernelFamily::RBF, 0.2, 1.0, std::nullopt};
  bool auto_scale_eps_variance = true;  // set kernel_eps.variance from data
  EnsemblePrior prior;
  EmpiricalBayesConfig eb;
  LinkConfig link;
  int cdf_draws = 1024;
  int decomposition_draws = 4096;
};
void validate_config(const FitConfig& cfg);

struct FitStats {
  long cvm_term_evaluations = 0;
  int rejected_steps = 0;
};

// Monte Carlo estimate of the three-term objective
//   E_Q[-log f0] (+ CvM term under KL_plus_CvM) + KL(Q || P),
// reproducible under `seed`. GP-factor KLs are taken between the variational
// and prior marginals at the training inputs (jittered on both sides).
double vi_objective(const Eigen::Ref<const Eigen::MatrixXd>& x,
                    const Eigen::Ref<const Eigen::VectorXd>& y, const BaseModelSet& bases,
                    const EnsemblePosterior& state, const EnsemblePrior& prior,
                    const DivergenceGrid& grid, DivergenceMode mode, int mc_samples,
                    std::uint64_t seed);

// Initial variational state: uniform weights, zero residual mean, wide
// covariances, noise located at the sd of the average-ensemble residuals.
EnsemblePosterior initial_posterior(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                    const Eigen::Ref<const Eigen::VectorXd>& y,
                                    const BaseModelSet& bases, const FitConfig& cfg);

// Stochastic-gradient fit of the systematic component (the ensemble step).
// Reparameterization gradients; each step draws fresh noise from a stream
// derived from (seed, step), so fixed seeds give identical fits.
EnsemblePosterior optimize_vi(const Eigen::Ref<const Eigen::MatrixXd>& x,
                              const Eigen::Ref<const Eigen::VectorXd>& y,
                              const BaseModelSet& bases, const FitConfig& cfg,
                              std::vector<double>* trace = nullptr, FitStats* stats = nullptr);

// Tie-break helper: smallest objective, ties toward the larger length-scale.
struct LengthScaleCandidate {
  double length_scale;
  double objective;
};
int select_best_candidate(const std::vector<LengthScaleCandidate>& candidates);

// Coordinate-wise empirical Bayes over the candidate length-scale grids:
// a short optimize_vi per candidate, scored by the fixed-seed objective.
struct KernelSelection {
  KernelSpec kernel_mu;
  KernelSpec kernel_eps;
};
KernelSelection empirical_bayes_select(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                       const Eigen::Ref<const Eigen::VectorXd>& y,
                                       const BaseModelSet& bases, const FitConfig& cfg);

// The two-step algorithm: ensemble step (optimize_vi + Monte Carlo CDF),
// then the calibration step (fit_link). One pass; no iteration back.
struct GibbsFit {
  EnsemblePosterior ensemble;
  LinkPosterior link;
  PredictiveDistribution uncalibrated;  // at the training locations
  PredictiveDistribution calibrated;
  DivergenceGrid grid;
  std::vector<double> trace;
  FitStats stats;
  KernelSelection selection;
};
GibbsFit gibbs_fit(const Eigen::Ref<const Eigen::MatrixXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& y, const BaseModelSet& bases,
                   const FitConfig& cfg);

}  // namespace calens
