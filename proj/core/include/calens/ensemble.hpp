#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "calens/gp.hpp"
#include "calens/kernel.hpp"

namespace calens {

// Deterministic base predictors tabulated at a fixed set of locations.
// Rows of `predictions` align with rows of `locations`; columns follow
// `names`.
struct BaseModelSet {
  std::vector<std::string> names;
  Eigen::MatrixXd locations;    // N x d
  Eigen::MatrixXd predictions;  // N x K

  int count() const { return static_cast<int>(predictions.cols()); }
};
void validate_base_models(const BaseModelSet& bases);

// Fitted variational posterior of the systematic component: one weight GP
// per base model (sharing kernel_mu), a residual GP, the softmax temperature
// and the observation noise sd as lognormal factors.
struct EnsemblePosterior {
  std::vector<DgpFactor> weight_gps;
  DgpFactor residual_gp;
  LogNormalFactor temperature;
  LogNormalFactor noise_sd;
  KernelSpec kernel_mu;
  KernelSpec kernel_eps;

  int model_count() const { return static_cast<int>(weight_gps.size()); }
};

// Column-wise softmax of g/temperature with max-subtraction; g is K x N
// (models by locations) and every returned column lies in the simplex.
Eigen::MatrixXd softmax_weights(const Eigen::Ref<const Eigen::MatrixXd>& g_values,
                                double temperature);

// Monte Carlo draws from the systematic component at X. `combined` holds the
// weighted base-prediction part of each draw, `residual` the residual-GP
// part; observation noise is kept out of the draws (it enters predictive
// CDFs through the per-draw sigma).
struct SystematicDraws {
  Eigen::MatrixXd combined;      // count x N
  Eigen::MatrixXd residual;      // count x N
  Eigen::VectorXd sigma;         // count
  Eigen::VectorXd lambda;        // count
  Eigen::MatrixXd mean_weights;  // K x N, averaged over draws

  Eigen::MatrixXd values() const { return combined + residual; }
};
SystematicDraws systematic_draws(const EnsemblePosterior& post, const BaseModelSet& bases,
                                 const Eigen::Ref<const Eigen::MatrixXd>& x, int count,
                                 std::uint64_t seed);

// Predictive CDF/PDF on a y-grid, plus pointwise mean and the variance
// decomposition (model combination, residual process, observation noise).
struct PredictiveDistribution {
  Eigen::VectorXd y_grid;  // M
  Eigen::MatrixXd cdf;     // N x M
  Eigen::MatrixXd pdf;     // N x M
  Eigen::VectorXd mean;    // N
  Eigen::VectorXd ensemble_var;
  Eigen::VectorXd residual_var;
  Eigen::VectorXd noise_var;

  Eigen::Index locations() const { return cdf.rows(); }
};

// F0(y|x) = (1/count) sum_draws Phi((y - m_draw(x)) / sigma_draw), with the
// density given by the matching Gaussian-mixture average. Throws a
// ConfigError for count < 16 (CDF too unstable to use downstream).
PredictiveDistribution systematic_cdf(const EnsemblePosterior& post, const BaseModelSet& bases,
                                      const Eigen::Ref<const Eigen::MatrixXd>& x,
                                      const Eigen::Ref<const Eigen::VectorXd>& y_grid, int count,
                                      std::uint64_t seed);

struct UncertaintyDecomposition {
  Eigen::VectorXd ensemble_var;
  Eigen::VectorXd residual_var;
  Eigen::VectorXd noise_var;
};
UncertaintyDecomposition decompose_uncertainty(const EnsemblePosterior& post,
                                               const BaseModelSet& bases,
                                               const Eigen::Ref<const Eigen::MatrixXd>& x,
                                               int count, std::uint64_t seed);

// Gaussian predictive on a grid; used by the stacking baselines.
PredictiveDistribution gaussian_predictive(const Eigen::Ref<const Eigen::VectorXd>& mean,
                                           double sd,
                                           const Eigen::Ref<const Eigen::VectorXd>& y_grid);

}  // namespace calens
