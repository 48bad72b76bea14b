#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "calens/ensemble.hpp"
#include "calens/gp.hpp"
#include "calens/kernel.hpp"

namespace calens {

// Posterior over the monotone map G: [0,1] -> [0,1] and its derivative g.
// `value_factor` is a sparse-GP factor over probability inputs; the
// derivative process is read off the same factor through the derivative
// cross-kernels. `derivative_stats` caches the fitted marginal of g on the
// constraint grid.
struct LinkPosterior {
  SgpFactor value_factor;
  MarginalGaussian derivative_stats;
  Eigen::VectorXd constraint_grid;
  double probit_scale = 1e-2;
  KernelSpec kernel;
  bool identity = false;

  static LinkPosterior make_identity();
};

// Joint covariance of (G at value_points, g at deriv_points):
//   [ K        d2 K ]
//   [ d1 K   d1d2 K ]
// assembled from kernel_derivative_blocks. RBF only.
Eigen::MatrixXd joint_cov_blocks(const KernelSpec& kernel,
                                 const Eigen::Ref<const Eigen::VectorXd>& value_points,
                                 const Eigen::Ref<const Eigen::VectorXd>& deriv_points);

// sum_d log Phi(g_d / nu); saturates to 0 for g >> nu and diverges to -inf
// for g << -nu. Uses the tail-safe log CDF.
double constraint_loglik(const Eigen::Ref<const Eigen::VectorXd>& g_values, double nu);

// sum_i [ -(1/M) sum_j (G_ij - I_ij)^2 + log g_i ], the quantile-regression
// likelihood of the calibration step. g is clamped at 1e-12 before the log.
double calibration_loglik(const Eigen::Ref<const Eigen::MatrixXd>& g_big_values,
                          const Eigen::Ref<const Eigen::VectorXd>& g_small_values,
                          const Eigen::Ref<const Eigen::MatrixXd>& indicators);

struct LinkConfig {
  int inducing_count = 16;
  int constraint_points = 32;
  double probit_scale = 1e-2;
  double anchor_weight = 10.0;  // pseudo-observations G(0)=0, G(1)=1
  double length_scale = 0.25;   // RBF over probabilities
  double variance = 1.0;
  int iterations = 1500;
  double step_size = 0.05;
  int quad_order = 20;
};

// Variational fit of the link to (F0, observations): quantile-to-quantile
// regression of the empirical indicators on G[F0] with the probit
// monotonicity likelihood on g at the constraint grid. Deterministic: all
// expectations are Gauss-Hermite, no Monte Carlo.
LinkPosterior fit_link(const PredictiveDistribution& f0,
                       const Eigen::Ref<const Eigen::VectorXd>& y_obs, const LinkConfig& cfg);

// Posterior-mean values of G and g at probabilities p.
Eigen::VectorXd link_value_mean(const LinkPosterior& link,
                                const Eigen::Ref<const Eigen::VectorXd>& p);
Eigen::VectorXd link_deriv_mean(const LinkPosterior& link,
                                const Eigen::Ref<const Eigen::VectorXd>& p);

// Calibrated distribution: cdf = clamp(G[F0]) re-monotonized by running max,
// pdf = max(0, g[F0]) * f0 (chain rule), mean re-integrated from the new
// cdf. Variance components carry over from the systematic stage.
PredictiveDistribution apply_link(const LinkPosterior& link, const PredictiveDistribution& f0);

}  // namespace calens
