#include "calens/gp.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <vector>

#include "calens/errors.hpp"
#include "calens/math.hpp"
#include "calens/optim.hpp"
#include "calens/rng.hpp"

namespace calens {

namespace {

void check_pairwise_distinct(const Eigen::MatrixXd& pts, double tol, const char* what) {
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < pts.rows(); ++j) {
      if ((pts.row(i) - pts.row(j)).norm() < tol) {
        throw InputError(std::string(what) + ": inducing points closer than dedup tolerance");
      }
    }
  }
}

// Symmetrize and clip negative eigenvalues at zero when present.
void make_psd(Eigen::MatrixXd& cov) {
  cov = 0.5 * (cov + cov.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const double floor = -1e-12 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  if (eig.eigenvalues().minCoeff() >= floor) {
    if (eig.eigenvalues().minCoeff() >= 0.0) return;
  }
  Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0);
  cov = eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
  cov = 0.5 * (cov + cov.transpose()).eval();
}

}  // namespace

void validate_factor(const SgpFactor& f) {
  validate_kernel(f.kernel);
  if (f.size() < 1) throw InputError("SgpFactor: needs at least one inducing point");
  if (f.mean_params.size() != f.size() || f.cov_chol.rows() != f.size() ||
      f.cov_chol.cols() != f.size()) {
    throw InputError("SgpFactor: parameter shapes disagree with inducing count");
  }
  check_pairwise_distinct(f.inducing, 1e-9, "SgpFactor");
}

void validate_factor(const DgpFactor& f) {
  validate_kernel(f.kernel);
  if (f.cov_size() < 1) throw InputError("DgpFactor: needs at least one covariance point");
  if (f.mean_size() < f.cov_size()) {
    throw InputError("DgpFactor: mean basis must be at least as rich as covariance basis");
  }
  if (f.mean_params.size() != f.mean_size() || f.cov_chol.rows() != f.cov_size() ||
      f.cov_chol.cols() != f.cov_size()) {
    throw InputError("DgpFactor: parameter shapes disagree with inducing counts");
  }
}

MarginalGaussian sgp_marginal(const SgpFactor& f, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  validate_factor(f);
  if (x.rows() == 0) throw InputError("sgp_marginal: empty point set");
  const GramMatrix kzz = gram(f.kernel, f.inducing);
  const Eigen::MatrixXd kxz = cross_gram(f.kernel, x, f.inducing);
  const Eigen::MatrixXd a = kzz.solve(kxz.transpose()).transpose();  // K_XZ K_ZZ^-1
  MarginalGaussian out;
  out.mean = a * f.mean_params;
  const Eigen::MatrixXd kxx = gram(f.kernel, x).values;
  const Eigen::MatrixXd mid = kzz.values - f.cov();
  out.covariance = kxx - a * mid * a.transpose();
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

MarginalDiag sgp_marginal_diag(const SgpFactor& f, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  validate_factor(f);
  if (x.rows() == 0) throw InputError("sgp_marginal_diag: empty point set");
  const GramMatrix kzz = gram(f.kernel, f.inducing);
  const Eigen::MatrixXd kxz = cross_gram(f.kernel, x, f.inducing);
  const Eigen::MatrixXd a = kzz.solve(kxz.transpose()).transpose();
  MarginalDiag out;
  out.mean = a * f.mean_params;
  out.var.resize(x.rows());
  const Eigen::MatrixXd ak = a * kzz.values;
  const Eigen::MatrixXd al = a * f.cov_chol;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.var[i] = f.kernel.variance - ak.row(i).dot(a.row(i)) + al.row(i).squaredNorm();
  }
  return out;
}

MarginalGaussian dgp_marginal(const DgpFactor& f, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  validate_factor(f);
  if (x.rows() == 0) throw InputError("dgp_marginal: empty point set");
  MarginalGaussian out;
  out.mean = cross_gram(f.kernel, x, f.mean_inducing) * f.mean_params;

  const GramMatrix kss = gram(f.kernel, f.cov_inducing);
  const Eigen::Index ms = f.cov_size();
  const Eigen::MatrixXd kss_inv = kss.solve(Eigen::MatrixXd::Identity(ms, ms));
  Eigen::MatrixXd w = kss_inv + f.cov();  // K_ZsZs^-1 + S
  w = 0.5 * (w + w.transpose()).eval();
  Eigen::LLT<Eigen::MatrixXd> wllt(w);
  if (wllt.info() != Eigen::Success) {
    throw NumericalError("dgp_marginal: K_ZsZs^-1 + S not factorizable");
  }
  const Eigen::MatrixXd b = cross_gram(f.kernel, x, f.cov_inducing);
  const Eigen::MatrixXd kxx = gram(f.kernel, x).values;
  out.covariance = kxx - b * wllt.solve(b.transpose());
  make_psd(out.covariance);
  return out;
}

MarginalDiag dgp_marginal_diag(const DgpFactor& f, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  validate_factor(f);
  if (x.rows() == 0) throw InputError("dgp_marginal_diag: empty point set");
  MarginalDiag out;
  out.mean = cross_gram(f.kernel, x, f.mean_inducing) * f.mean_params;
  const GramMatrix kss = gram(f.kernel, f.cov_inducing);
  const Eigen::Index ms = f.cov_size();
  const Eigen::MatrixXd kss_inv = kss.solve(Eigen::MatrixXd::Identity(ms, ms));
  Eigen::MatrixXd w = kss_inv + f.cov();
  w = 0.5 * (w + w.transpose()).eval();
  Eigen::LLT<Eigen::MatrixXd> wllt(w);
  if (wllt.info() != Eigen::Success) {
    throw NumericalError("dgp_marginal_diag: K_ZsZs^-1 + S not factorizable");
  }
  const Eigen::MatrixXd b = cross_gram(f.kernel, x, f.cov_inducing);
  const Eigen::MatrixXd u = wllt.solve(b.transpose());  // W^-1 B^T
  out.var.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    out.var[i] = std::max(f.kernel.variance - b.row(i).dot(u.col(i)), 0.0);
  }
  return out;
}

Eigen::MatrixXd mvn_sample(const MarginalGaussian& g, int count, std::uint64_t seed) {
  if (count < 1) throw InputError("mvn_sample: count must be >= 1");
  const Eigen::Index n = g.mean.size();
  if (g.covariance.rows() != n || g.covariance.cols() != n) {
    throw InputError("mvn_sample: covariance shape mismatch");
  }
  Eigen::MatrixXd sym = 0.5 * (g.covariance + g.covariance.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalError("mvn_sample: eigendecomposition failed");
  const Eigen::MatrixXd factor =
      eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  Rng rng = Rng::derive(seed, 0xA11CE5);
  Eigen::MatrixXd out(count, n);
  Eigen::VectorXd xi(n);
  for (int s = 0; s < count; ++s) {
    for (Eigen::Index i = 0; i < n; ++i) xi[i] = rng.normal();
    out.row(s) = (g.mean + factor * xi).transpose();
  }
  return out;
}

void validate_factor(const LogNormalFactor& f) {
  if (!(f.scale > 0.0)) throw InputError("LogNormalFactor: scale must be > 0");
}

double lognormal_entropy(const LogNormalFactor& f) {
  validate_factor(f);
  return f.location + 0.5 * std::log(2.0 * kPi * std::exp(1.0) * f.scale * f.scale);
}

double lognormal_mean_sq(const LogNormalFactor& f) {
  validate_factor(f);
  return std::exp(2.0 * f.location + 2.0 * f.scale * f.scale);
}

LogNormalSample lognormal_sample_and_entropy(const LogNormalFactor& f, int count,
                                             std::uint64_t seed) {
  validate_factor(f);
  if (count < 1) throw InputError("lognormal_sample_and_entropy: count must be >= 1");
  Rng rng = Rng::derive(seed, 0x10C4);
  LogNormalSample out;
  out.draws.resize(count);
  for (int i = 0; i < count; ++i) {
    out.draws[i] = std::exp(f.location + f.scale * rng.normal());
  }
  out.entropy = lognormal_entropy(f);
  return out;
}

double lognormal_kl(const LogNormalFactor& q, const LogNormalFactor& p) {
  validate_factor(q);
  validate_factor(p);
  const double r = q.scale / p.scale;
  const double d = q.location - p.location;
  return std::log(p.scale / q.scale) + 0.5 * (r * r + d * d / (p.scale * p.scale)) - 0.5;
}

MarginalGaussian exact_gp_posterior(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                    const Eigen::Ref<const Eigen::VectorXd>& y,
                                    const KernelSpec& kernel, double noise_sd) {
  if (x.rows() != y.size() || x.rows() == 0) throw InputError("exact_gp_posterior: bad shapes");
  if (!(noise_sd > 0.0)) throw InputError("exact_gp_posterior: noise_sd must be > 0");
  const Eigen::MatrixXd kxx = gram(kernel, x).values;
  Eigen::MatrixXd ky = kxx;
  ky.diagonal().array() += noise_sd * noise_sd;
  Eigen::LLT<Eigen::MatrixXd> llt(ky);
  if (llt.info() != Eigen::Success) throw NumericalError("exact_gp_posterior: factorization failed");
  MarginalGaussian out;
  out.mean = kxx * llt.solve(y);
  out.covariance = kxx - kxx * llt.solve(kxx);
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

SgpFactor fit_sgp_gaussian_regression(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                      const Eigen::Ref<const Eigen::VectorXd>& y,
                                      const Eigen::Ref<const Eigen::MatrixXd>& inducing,
                                      const KernelSpec& kernel, double noise_sd,
                                      int iterations, double step_size) {
  const Eigen::Index n = x.rows();
  const Eigen::Index m = inducing.rows();
  if (n == 0 || y.size() != n) throw InputError("fit_sgp_gaussian_regression: bad shapes");
  const GramMatrix kzz = gram(kernel, inducing, 1e-8 * kernel.variance);
  const Eigen::MatrixXd kzz_inv = kzz.solve(Eigen::MatrixXd::Identity(m, m));
  const Eigen::MatrixXd kxz = cross_gram(kernel, x, inducing);
  const Eigen::MatrixXd a = kzz.solve(kxz.transpose()).transpose();  // N x M
  const double inv_noise = 1.0 / (noise_sd * noise_sd);

  // Parameters: [m (M); rho = log diag L (M); strict lower of L (M(M-1)/2)].
  const Eigen::Index n_lower = m * (m - 1) / 2;
  Eigen::VectorXd params = Eigen::VectorXd::Zero(2 * m + n_lower);
  params.segment(m, m).setConstant(std::log(0.5 * std::sqrt(kernel.variance)));

  auto unpack = [&](const Eigen::VectorXd& p, Eigen::VectorXd& mv, Eigen::MatrixXd& lmat) {
    mv = p.head(m);
    lmat = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i) lmat(i, i) = std::exp(p[m + i]);
    Eigen::Index idx = 2 * m;
    for (Eigen::Index i = 1; i < m; ++i) {
      for (Eigen::Index j = 0; j < i; ++j) lmat(i, j) = p[idx++];
    }
  };

  Adam adam(params.size(), step_size);
  Eigen::VectorXd mv;
  Eigen::MatrixXd lmat;
  for (int it = 0; it < iterations; ++it) {
    unpack(params, mv, lmat);
    const Eigen::VectorXd mu = a * mv;
    const Eigen::VectorXd resid = y - mu;
    // d/d m: data term + KL term
    Eigen::VectorXd grad_m = -inv_noise * (a.transpose() * resid) + kzz_inv * mv;
    // d/d S: (1/2sigma^2) A^T A + 0.5 (Kzz^-1 - S^-1); chain to L as (G+G^T)L
    Eigen::MatrixXd grad_s = 0.5 * inv_noise * (a.transpose() * a) + 0.5 * kzz_inv;
    Eigen::MatrixXd grad_l = (grad_s + grad_s.transpose()) * lmat;
    // -0.5 d logdet S / dL = -L^-T
    Eigen::MatrixXd linv_t = lmat.triangularView<Eigen::Lower>()
                                 .solve(Eigen::MatrixXd::Identity(m, m))
                                 .transpose();
    grad_l -= linv_t;

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
    grad.head(m) = grad_m;
    for (Eigen::Index i = 0; i < m; ++i) grad[m + i] = grad_l(i, i) * lmat(i, i);
    Eigen::Index idx = 2 * m;
    for (Eigen::Index i = 1; i < m; ++i) {
      for (Eigen::Index j = 0; j < i; ++j) grad[idx++] = grad_l(i, j);
    }
    adam.step(params, grad);
  }
  unpack(params, mv, lmat);
  SgpFactor out;
  out.inducing = inducing;
  out.mean_params = mv;
  out.cov_chol = lmat;
  out.kernel = kernel;
  return out;
}

Eigen::MatrixXd dedup_points(const Eigen::Ref<const Eigen::MatrixXd>& points, double tol) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    bool dup = false;
    for (Eigen::Index j : keep) {
      if ((points.row(i) - points.row(j)).norm() < tol) {
        dup = true;
        break;
      }
    }
    if (!dup) keep.push_back(i);
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(keep.size()), points.cols());
  for (size_t r = 0; r < keep.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = points.row(keep[r]);
  return out;
}

}  // namespace calens
