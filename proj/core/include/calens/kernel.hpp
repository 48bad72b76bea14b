#pragma once

#include <Eigen/Dense>
#include <optional>

namespace calens {

enum class KernelFamily { RBF, OU };

// Covariance function family with its hyperparameters.
//
//   RBF: k(z,z') = variance * exp(-||z-z'||^2 / length_scale)
//   OU:  k(z,z') = variance * exp(-||z-z'|| / length_scale)
//
// `dim_scales`, when set, replaces the scalar length-scale by per-dimension
// scales for the RBF family: k = variance * exp(-sum_d (z_d-z'_d)^2 / l_d).
// Off by default.
struct KernelSpec {
  KernelFamily family = KernelFamily::RBF;
  double length_scale = 1.0;
  double variance = 1.0;
  std::optional<Eigen::VectorXd> dim_scales;
};

void validate_kernel(const KernelSpec& spec);

double kernel_eval(const KernelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& z,
                   const Eigen::Ref<const Eigen::VectorXd>& z2);

// Covariance blocks of the joint (value, derivative) prior of a 1-D RBF GP
// at a point pair: [k, d/dz' k; d/dz k, d2/dz dz' k]. OU is not
// differentiable at zero distance and is rejected.
struct DerivativeBlocks {
  double k;
  double dk_dz2;
  double dk_dz;
  double d2k_dz_dz2;
};
DerivativeBlocks kernel_derivative_blocks(const KernelSpec& spec, double z, double z2);

// Symmetric Gram matrix with a cached Cholesky factor of values + jitter*I.
// `values` excludes the jitter.
struct GramMatrix {
  Eigen::MatrixXd values;
  double jitter_applied = 0.0;
  Eigen::MatrixXd cholesky_factor;  // lower triangular

  Eigen::Index size() const { return values.rows(); }

  // Solve (values + jitter*I) x = rhs via the cached factor.
  Eigen::MatrixXd solve(const Eigen::Ref<const Eigen::MatrixXd>& rhs) const;
  double log_det() const;  // of values + jitter*I
};

// Builds the Gram matrix of `points` (rows) and factorizes it. The requested
// jitter is tried first; on failure it escalates geometrically (x10, starting
// from 1e-8*variance when the request was zero) up to 1e-2*variance, beyond
// which a NumericalError carrying the last attempted jitter is thrown.
GramMatrix gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& points,
                double jitter = 0.0);

// Rectangular kernel matrix k(A_i, B_j).
Eigen::MatrixXd cross_gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& a,
                           const Eigen::Ref<const Eigen::MatrixXd>& b);

}  // namespace calens
