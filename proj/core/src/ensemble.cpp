#include "calens/ensemble.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

#include "calens/errors.hpp"
#include "calens/math.hpp"
#include "calens/rng.hpp"

namespace calens {

namespace {

void check_alignment(const BaseModelSet& bases, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  if (bases.locations.rows() != x.rows() || bases.locations.cols() != x.cols() ||
      (bases.locations - x).cwiseAbs().maxCoeff() > 0.0) {
    throw InputError("base predictions are not tabulated at the requested locations");
  }
}

// Eigen factor of a marginal covariance for repeated joint draws.
Eigen::MatrixXd sample_factor(const MarginalGaussian& g) {
  Eigen::MatrixXd sym = 0.5 * (g.covariance + g.covariance.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalError("covariance eigendecomposition failed");
  return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

Eigen::VectorXd column_variance(const Eigen::MatrixXd& draws) {
  const Eigen::Index n = draws.cols();
  const double count = static_cast<double>(draws.rows());
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = draws.col(i).mean();
    out[i] = (draws.col(i).array() - mean).square().sum() / std::max(count - 1.0, 1.0);
  }
  return out;
}

}  // namespace

void validate_base_models(const BaseModelSet& bases) {
  if (bases.count() < 1) throw InputError("BaseModelSet: needs at least one model");
  if (bases.predictions.rows() != bases.locations.rows()) {
    throw InputError("BaseModelSet: prediction rows disagree with locations");
  }
  if (static_cast<int>(bases.names.size()) != bases.count()) {
    throw InputError("BaseModelSet: names disagree with prediction columns");
  }
  if (!bases.predictions.allFinite() || !bases.locations.allFinite()) {
    throw InputError("BaseModelSet: non-finite values");
  }
}

Eigen::MatrixXd softmax_weights(const Eigen::Ref<const Eigen::MatrixXd>& g_values,
                                double temperature) {
  if (!(temperature > 0.0)) throw InputError("softmax_weights: temperature must be > 0");
  if (!g_values.allFinite()) throw InputError("softmax_weights: non-finite inputs");
  Eigen::MatrixXd w(g_values.rows(), g_values.cols());
  for (Eigen::Index j = 0; j < g_values.cols(); ++j) {
    const Eigen::VectorXd a = g_values.col(j) / temperature;
    const double peak = a.maxCoeff();
    Eigen::VectorXd e = (a.array() - peak).exp();
    w.col(j) = e / e.sum();
  }
  return w;
}

SystematicDraws systematic_draws(const EnsemblePosterior& post, const BaseModelSet& bases,
                                 const Eigen::Ref<const Eigen::MatrixXd>& x, int count,
                                 std::uint64_t seed) {
  validate_base_models(bases);
  check_alignment(bases, x);
  const int k = post.model_count();
  if (k != bases.count()) {
    throw InputError("systematic_draws: posterior and base-model counts disagree");
  }
  if (count < 1) throw InputError("systematic_draws: count must be >= 1");
  const Eigen::Index n = x.rows();

  std::vector<MarginalGaussian> weight_marginals(k);
  std::vector<Eigen::MatrixXd> weight_factors(k);
  for (int m = 0; m < k; ++m) {
    weight_marginals[m] = dgp_marginal(post.weight_gps[m], x);
    weight_factors[m] = sample_factor(weight_marginals[m]);
  }
  const MarginalGaussian resid_marginal = dgp_marginal(post.residual_gp, x);
  const Eigen::MatrixXd resid_factor = sample_factor(resid_marginal);

  Rng rng_lambda = Rng::derive(seed, 1);
  Rng rng_sigma = Rng::derive(seed, 2);
  Rng rng_resid = Rng::derive(seed, 3);
  std::vector<Rng> rng_gp;
  rng_gp.reserve(k);
  for (int m = 0; m < k; ++m) rng_gp.push_back(Rng::derive(seed, 16 + m));

  SystematicDraws out;
  out.combined.resize(count, n);
  out.residual.resize(count, n);
  out.sigma.resize(count);
  out.lambda.resize(count);
  out.mean_weights = Eigen::MatrixXd::Zero(k, n);

  Eigen::MatrixXd g(k, n);
  Eigen::VectorXd xi(n);
  for (int s = 0; s < count; ++s) {
    out.lambda[s] = std::exp(post.temperature.location + post.temperature.scale * rng_lambda.normal());
    out.sigma[s] = std::exp(post.noise_sd.location + post.noise_sd.scale * rng_sigma.normal());
    for (int m = 0; m < k; ++m) {
      for (Eigen::Index i = 0; i < n; ++i) xi[i] = rng_gp[m].normal();
      g.row(m) = (weight_marginals[m].mean + weight_factors[m] * xi).transpose();
    }
    const Eigen::MatrixXd w = softmax_weights(g, out.lambda[s]);
    for (Eigen::Index i = 0; i < n; ++i) {
      out.combined(s, i) = bases.predictions.row(i).dot(w.col(i));
    }
    out.mean_weights += w;
    for (Eigen::Index i = 0; i < n; ++i) xi[i] = rng_resid.normal();
    out.residual.row(s) = (resid_marginal.mean + resid_factor * xi).transpose();
  }
  out.mean_weights /= static_cast<double>(count);
  return out;
}

PredictiveDistribution systematic_cdf(const EnsemblePosterior& post, const BaseModelSet& bases,
                                      const Eigen::Ref<const Eigen::MatrixXd>& x,
                                      const Eigen::Ref<const Eigen::VectorXd>& y_grid, int count,
                                      std::uint64_t seed) {
  const Eigen::Index m = y_grid.size();
  if (m < 3) throw InputError("systematic_cdf: y_grid needs at least 3 points");
  for (Eigen::Index j = 1; j < m; ++j) {
    if (!(y_grid[j] > y_grid[j - 1])) {
      throw InputError("systematic_cdf: y_grid must be strictly increasing");
    }
  }
  if (count < 16) throw ConfigError("systematic_cdf: count < 16 gives an unstable CDF");

  const SystematicDraws draws = systematic_draws(post, bases, x, count, seed);
  const Eigen::Index n = x.rows();
  const Eigen::MatrixXd values = draws.values();

  PredictiveDistribution out;
  out.y_grid = y_grid;
  out.cdf = Eigen::MatrixXd::Zero(n, m);
  out.pdf = Eigen::MatrixXd::Zero(n, m);
  out.mean.resize(n);
  const double inv_count = 1.0 / static_cast<double>(count);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.mean[i] = values.col(i).mean();
    for (int s = 0; s < count; ++s) {
      const double mu = values(s, i);
      const double sd = draws.sigma[s];
      for (Eigen::Index j = 0; j < m; ++j) {
        const double u = (y_grid[j] - mu) / sd;
        out.cdf(i, j) += norm_cdf(u);
        out.pdf(i, j) += norm_pdf(u) / sd;
      }
    }
  }
  out.cdf *= inv_count;
  out.pdf *= inv_count;
  out.cdf = out.cdf.cwiseMax(0.0).cwiseMin(1.0);

  out.ensemble_var = column_variance(draws.combined);
  out.residual_var = column_variance(draws.residual);
  const double noise = draws.sigma.array().square().mean();
  out.noise_var = Eigen::VectorXd::Constant(n, noise);
  return out;
}

UncertaintyDecomposition decompose_uncertainty(const EnsemblePosterior& post,
                                               const BaseModelSet& bases,
                                               const Eigen::Ref<const Eigen::MatrixXd>& x,
                                               int count, std::uint64_t seed) {
  const SystematicDraws draws = systematic_draws(post, bases, x, count, seed);
  UncertaintyDecomposition out;
  out.ensemble_var = column_variance(draws.combined);
  out.residual_var = column_variance(draws.residual);
  out.noise_var =
      Eigen::VectorXd::Constant(x.rows(), draws.sigma.array().square().mean());
  return out;
}

PredictiveDistribution gaussian_predictive(const Eigen::Ref<const Eigen::VectorXd>& mean,
                                           double sd,
                                           const Eigen::Ref<const Eigen::VectorXd>& y_grid) {
  if (!(sd > 0.0)) throw InputError("gaussian_predictive: sd must be > 0");
  const Eigen::Index n = mean.size();
  const Eigen::Index m = y_grid.size();
  PredictiveDistribution out;
  out.y_grid = y_grid;
  out.cdf.resize(n, m);
  out.pdf.resize(n, m);
  out.mean = mean;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const double u = (y_grid[j] - mean[i]) / sd;
      out.cdf(i, j) = norm_cdf(u);
      out.pdf(i, j) = norm_pdf(u) / sd;
    }
  }
  out.ensemble_var = Eigen::VectorXd::Zero(n);
  out.residual_var = Eigen::VectorXd::Zero(n);
  out.noise_var = Eigen::VectorXd::Constant(n, sd * sd);
  return out;
}

}  // namespace calens
