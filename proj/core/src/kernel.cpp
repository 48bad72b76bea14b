#include "calens/kernel.hpp"

#include <Eigen/Cholesky>
#include <cmath>

#include "calens/errors.hpp"

namespace calens {

void validate_kernel(const KernelSpec& spec) {
  if (!(spec.length_scale > 0.0)) throw InputError("kernel length_scale must be > 0");
  if (!(spec.variance > 0.0)) throw InputError("kernel variance must be > 0");
  if (spec.dim_scales) {
    if (spec.family != KernelFamily::RBF) {
      throw InputError("per-dimension length-scales are supported for RBF only");
    }
    if ((spec.dim_scales->array() <= 0.0).any()) {
      throw InputError("per-dimension length-scales must be > 0");
    }
  }
}

double kernel_eval(const KernelSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& z,
                   const Eigen::Ref<const Eigen::VectorXd>& z2) {
  validate_kernel(spec);
  if (z.size() != z2.size()) throw InputError("kernel_eval: point dimensions differ");
  if (spec.dim_scales) {
    if (spec.dim_scales->size() != z.size()) {
      throw InputError("kernel_eval: dim_scales dimension mismatch");
    }
    const double q = ((z - z2).array().square() / spec.dim_scales->array()).sum();
    return spec.variance * std::exp(-q);
  }
  const double d2 = (z - z2).squaredNorm();
  switch (spec.family) {
    case KernelFamily::RBF:
      return spec.variance * std::exp(-d2 / spec.length_scale);
    case KernelFamily::OU:
      return spec.variance * std::exp(-std::sqrt(d2) / spec.length_scale);
  }
  throw InputError("kernel_eval: unknown family");
}

DerivativeBlocks kernel_derivative_blocks(const KernelSpec& spec, double z, double z2) {
  validate_kernel(spec);
  if (spec.family != KernelFamily::RBF) {
    throw InputError("kernel_derivative_blocks: only the RBF family is differentiable here");
  }
  const double l = spec.length_scale;
  const double d = z - z2;
  const double k = spec.variance * std::exp(-d * d / l);
  DerivativeBlocks out;
  out.k = k;
  out.dk_dz2 = k * (2.0 * d / l);
  out.dk_dz = -out.dk_dz2;
  out.d2k_dz_dz2 = k * (2.0 / l - 4.0 * d * d / (l * l));
  return out;
}

Eigen::MatrixXd GramMatrix::solve(const Eigen::Ref<const Eigen::MatrixXd>& rhs) const {
  Eigen::MatrixXd x = cholesky_factor.triangularView<Eigen::Lower>().solve(rhs);
  cholesky_factor.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
  return x;
}

double GramMatrix::log_det() const {
  return 2.0 * cholesky_factor.diagonal().array().log().sum();
}

GramMatrix gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& points,
                double jitter) {
  validate_kernel(spec);
  if (points.rows() == 0) throw InputError("gram: empty point set");
  if (jitter < 0.0) throw InputError("gram: jitter must be >= 0");

  const Eigen::Index n = points.rows();
  GramMatrix out;
  out.values.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i, i) = spec.variance;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = kernel_eval(spec, points.row(i).transpose(), points.row(j).transpose());
      out.values(i, j) = v;
      out.values(j, i) = v;
    }
  }

  const double cap = 1e-2 * spec.variance;
  double attempt = jitter;
  while (true) {
    Eigen::MatrixXd k = out.values;
    k.diagonal().array() += attempt;
    Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() == Eigen::Success) {
      out.jitter_applied = attempt;
      out.cholesky_factor = llt.matrixL();
      return out;
    }
    if (attempt >= cap) {
      throw NumericalError("gram: Cholesky failed at jitter cap", attempt);
    }
    attempt = (attempt == 0.0) ? 1e-8 * spec.variance : std::min(attempt * 10.0, cap);
  }
}

Eigen::MatrixXd cross_gram(const KernelSpec& spec, const Eigen::Ref<const Eigen::MatrixXd>& a,
                           const Eigen::Ref<const Eigen::MatrixXd>& b) {
  validate_kernel(spec);
  if (a.cols() != b.cols()) throw InputError("cross_gram: point dimensions differ");
  Eigen::MatrixXd out(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      out(i, j) = kernel_eval(spec, a.row(i).transpose(), b.row(j).transpose());
    }
  }
  return out;
}

}  // namespace calens
