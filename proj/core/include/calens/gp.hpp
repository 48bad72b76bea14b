#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "calens/kernel.hpp"

namespace calens {

// Finite-dimensional Gaussian over function values at a fixed point set.
struct MarginalGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

// Pointwise means and variances only; what the inference loop consumes.
struct MarginalDiag {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

// Sparse-GP variational factor: q(u) = N(m, S) on inducing values, S stored
// through its lower Cholesky factor so it stays SPD under gradient updates.
struct SgpFactor {
  Eigen::MatrixXd inducing;     // M x d
  Eigen::VectorXd mean_params;  // m
  Eigen::MatrixXd cov_chol;     // L with S = L L^T
  KernelSpec kernel;

  Eigen::Index size() const { return inducing.rows(); }
  Eigen::MatrixXd cov() const { return cov_chol * cov_chol.transpose(); }
};
void validate_factor(const SgpFactor& f);

// De-coupled variant: separate inducing sets for the mean and the
// covariance. Requires M_m >= M_S >= 1.
struct DgpFactor {
  Eigen::MatrixXd mean_inducing;  // M_m x d
  Eigen::VectorXd mean_params;    // m
  Eigen::MatrixXd cov_inducing;   // M_S x d
  Eigen::MatrixXd cov_chol;       // L with S = L L^T
  KernelSpec kernel;

  Eigen::Index mean_size() const { return mean_inducing.rows(); }
  Eigen::Index cov_size() const { return cov_inducing.rows(); }
  Eigen::MatrixXd cov() const { return cov_chol * cov_chol.transpose(); }
};
void validate_factor(const DgpFactor& f);

// q(f(X)) for the sparse factor:
//   mu    = K_XZ K_ZZ^-1 m
//   Sigma = K_XX - K_XZ K_ZZ^-1 (K_ZZ - S) K_ZZ^-1 K_XZ^T
MarginalGaussian sgp_marginal(const SgpFactor& f, const Eigen::Ref<const Eigen::MatrixXd>& x);
MarginalDiag sgp_marginal_diag(const SgpFactor& f, const Eigen::Ref<const Eigen::MatrixXd>& x);

// q(f(X)) for the de-coupled factor:
//   mu    = K_XZm m
//   Sigma = K_XX - K_XZs (K_ZsZs^-1 + S)^-1 K_XZs^T
// The covariance expression can leave the PSD cone for small S; the returned
// covariance is symmetrized and eigenvalue-clipped at zero. See the module
// notes in the README about this parameterization.
MarginalGaussian dgp_marginal(const DgpFactor& f, const Eigen::Ref<const Eigen::MatrixXd>& x);
MarginalDiag dgp_marginal_diag(const DgpFactor& f, const Eigen::Ref<const Eigen::MatrixXd>& x);

// `count` joint draws (rows) from a marginal. Covariance is factorized by a
// symmetric eigendecomposition with negative eigenvalues clamped to zero, so
// borderline-PSD inputs sample cleanly. Same seed, same bits.
Eigen::MatrixXd mvn_sample(const MarginalGaussian& g, int count, std::uint64_t seed);

// Scalar lognormal variational factor: X = exp(location + scale * Z).
struct LogNormalFactor {
  double location = 0.0;
  double scale = 1.0;
};
void validate_factor(const LogNormalFactor& f);

double lognormal_entropy(const LogNormalFactor& f);
double lognormal_mean_sq(const LogNormalFactor& f);  // E[X^2]

struct LogNormalSample {
  Eigen::VectorXd draws;
  double entropy;
};
LogNormalSample lognormal_sample_and_entropy(const LogNormalFactor& f, int count,
                                             std::uint64_t seed);

// KL(N(loc_q, scale_q^2) || N(loc_p, scale_p^2)) on the log scale; equals the
// KL between the lognormals themselves.
double lognormal_kl(const LogNormalFactor& q, const LogNormalFactor& p);

// Exact GP regression posterior over f(X) for Gaussian noise; the reference
// conditioning formula used by higher-level fits (the test suites carry
// their own independent copies).
MarginalGaussian exact_gp_posterior(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                    const Eigen::Ref<const Eigen::VectorXd>& y,
                                    const KernelSpec& kernel, double noise_sd);

// Fits q(u)=N(m,S) of a sparse factor to a Gaussian-likelihood regression by
// Adam on the closed-form objective
//   sum_i [(y_i - mu_i)^2 + Sigma_ii] / (2 sigma^2) + N/2 log(2 pi sigma^2)
//     + KL(N(m,S) || N(0, K_ZZ)).
// With inducing points equal to the training inputs the optimum reproduces
// exact GP conditioning.
SgpFactor fit_sgp_gaussian_regression(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                      const Eigen::Ref<const Eigen::VectorXd>& y,
                                      const Eigen::Ref<const Eigen::MatrixXd>& inducing,
                                      const KernelSpec& kernel, double noise_sd,
                                      int iterations = 4000, double step_size = 0.05);

// Deduplicates rows closer than `tol` in Euclidean distance (keeps first).
Eigen::MatrixXd dedup_points(const Eigen::Ref<const Eigen::MatrixXd>& points, double tol = 1e-9);

}  // namespace calens
