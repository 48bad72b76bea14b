#include "calens/calibration.hpp"

#include <Eigen/Cholesky>
#include <cmath>
#include <sstream>

#include "calens/errors.hpp"
#include "calens/math.hpp"
#include "calens/optim.hpp"

namespace calens {

namespace {

Eigen::MatrixXd deriv_cross(const KernelSpec& kernel, const Eigen::VectorXd& d_points,
                            const Eigen::VectorXd& value_points) {
  // rows: derivative points (d/dz on the first argument), cols: value points
  Eigen::MatrixXd out(d_points.size(), value_points.size());
  for (Eigen::Index i = 0; i < d_points.size(); ++i) {
    for (Eigen::Index j = 0; j < value_points.size(); ++j) {
      out(i, j) = kernel_derivative_blocks(kernel, d_points[i], value_points[j]).dk_dz;
    }
  }
  return out;
}

Eigen::MatrixXd deriv_deriv(const KernelSpec& kernel, const Eigen::VectorXd& a,
                            const Eigen::VectorXd& b) {
  Eigen::MatrixXd out(a.size(), b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    for (Eigen::Index j = 0; j < b.size(); ++j) {
      out(i, j) = kernel_derivative_blocks(kernel, a[i], b[j]).d2k_dz_dz2;
    }
  }
  return out;
}

Eigen::VectorXd linspace01(int n) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = n == 1 ? 0.5 : static_cast<double>(i) / (n - 1);
  return v;
}

// F0(y_i | x_i) by monotone interpolation of row i over the grid.
Eigen::VectorXd cdf_at_observations(const PredictiveDistribution& f0, const Eigen::VectorXd& y) {
  Eigen::VectorXd out(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    out[i] = interp_monotone(f0.y_grid, f0.cdf.row(i).transpose(), y[i]);
  }
  return out;
}

struct PackedParams {
  Eigen::Index m;  // inducing count
  Eigen::Index size() const { return 2 * m + m * (m - 1) / 2; }
  void unpack(const Eigen::VectorXd& p, Eigen::VectorXd& mean, Eigen::MatrixXd& lmat) const {
    mean = p.head(m);
    lmat = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i) lmat(i, i) = std::exp(p[m + i]);
    Eigen::Index idx = 2 * m;
    for (Eigen::Index i = 1; i < m; ++i)
      for (Eigen::Index j = 0; j < i; ++j) lmat(i, j) = p[idx++];
  }
  void pack_grad(const Eigen::VectorXd& gm, const Eigen::MatrixXd& gl,
                 const Eigen::MatrixXd& lmat, Eigen::VectorXd& out) const {
    out.resize(size());
    out.head(m) = gm;
    for (Eigen::Index i = 0; i < m; ++i) out[m + i] = gl(i, i) * lmat(i, i);
    Eigen::Index idx = 2 * m;
    for (Eigen::Index i = 1; i < m; ++i)
      for (Eigen::Index j = 0; j < i; ++j) out[idx++] = gl(i, j);
  }
};

}  // namespace

LinkPosterior LinkPosterior::make_identity() {
  LinkPosterior link;
  link.identity = true;
  link.probit_scale = 1e-2;
  link.kernel = KernelSpec{KernelFamily::RBF, 0.25, 1.0, std::nullopt};
  link.constraint_grid = linspace01(2);
  return link;
}

Eigen::MatrixXd joint_cov_blocks(const KernelSpec& kernel,
                                 const Eigen::Ref<const Eigen::VectorXd>& value_points,
                                 const Eigen::Ref<const Eigen::VectorXd>& deriv_points) {
  validate_kernel(kernel);
  if (kernel.family != KernelFamily::RBF) {
    throw InputError("joint_cov_blocks: link kernel must be differentiable (RBF)");
  }
  const Eigen::Index p = value_points.size();
  const Eigen::Index d = deriv_points.size();
  Eigen::MatrixXd out(p + d, p + d);
  for (Eigen::Index i = 0; i < p; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) {
      out(i, j) = kernel_derivative_blocks(kernel, value_points[i], value_points[j]).k;
    }
  }
  for (Eigen::Index i = 0; i < p; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto blocks = kernel_derivative_blocks(kernel, value_points[i], deriv_points[j]);
      out(i, p + j) = blocks.dk_dz2;
    }
  }
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto blocks = kernel_derivative_blocks(kernel, deriv_points[i], value_points[j]);
      out(p + i, j) = blocks.dk_dz;
    }
  }
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      out(p + i, p + j) = kernel_derivative_blocks(kernel, deriv_points[i], deriv_points[j]).d2k_dz_dz2;
    }
  }
  return out;
}

double constraint_loglik(const Eigen::Ref<const Eigen::VectorXd>& g_values, double nu) {
  if (!(nu > 0.0)) throw InputError("constraint_loglik: nu must be > 0");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < g_values.size(); ++i) {
    acc += log_norm_cdf(g_values[i] / nu);
  }
  return acc;
}

double calibration_loglik(const Eigen::Ref<const Eigen::MatrixXd>& g_big_values,
                          const Eigen::Ref<const Eigen::VectorXd>& g_small_values,
                          const Eigen::Ref<const Eigen::MatrixXd>& indicators) {
  if (g_big_values.rows() != indicators.rows() || g_big_values.cols() != indicators.cols() ||
      g_small_values.size() != g_big_values.rows()) {
    throw InputError("calibration_loglik: shape mismatch");
  }
  if (!g_big_values.allFinite()) throw InputError("calibration_loglik: non-finite G values");
  const double m = static_cast<double>(g_big_values.cols());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < g_big_values.rows(); ++i) {
    acc -= (g_big_values.row(i) - indicators.row(i)).squaredNorm() / m;
    acc += std::log(std::max(g_small_values[i], 1e-12));
  }
  return acc;
}

LinkPosterior fit_link(const PredictiveDistribution& f0,
                       const Eigen::Ref<const Eigen::VectorXd>& y_obs, const LinkConfig& cfg) {
  const Eigen::Index n = f0.locations();
  const Eigen::Index mg = f0.y_grid.size();
  if (y_obs.size() != n) throw InputError("fit_link: observations disagree with F0 rows");
  if (n < 2) throw InputError("fit_link: needs at least two observations");

  KernelSpec kernel{KernelFamily::RBF, cfg.length_scale, cfg.variance, std::nullopt};
  const Eigen::Index mi = cfg.inducing_count;
  Eigen::MatrixXd inducing = linspace01(static_cast<int>(mi));

  // Value-side evaluation points: every F0(y_j|x_i), plus the two endpoint
  // anchors. Weights 1/M for data terms, anchor_weight for the anchors.
  const Eigen::Index n_val = n * mg + 2;
  Eigen::VectorXd p_val(n_val), target(n_val), weight(n_val);
  {
    Eigen::Index idx = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < mg; ++j, ++idx) {
        p_val[idx] = std::clamp(f0.cdf(i, j), 0.0, 1.0);
        target[idx] = y_obs[i] < f0.y_grid[j] ? 1.0 : 0.0;
        weight[idx] = 1.0 / static_cast<double>(mg);
      }
    }
    p_val[idx] = 0.0; target[idx] = 0.0; weight[idx] = cfg.anchor_weight; ++idx;
    p_val[idx] = 1.0; target[idx] = 1.0; weight[idx] = cfg.anchor_weight;
  }

  // Derivative-side points: F0(y_i|x_i) (log-derivative term of the
  // likelihood) followed by the constraint grid (probit term).
  const Eigen::VectorXd p_obs = cdf_at_observations(f0, y_obs);
  const Eigen::VectorXd grid = linspace01(cfg.constraint_points);
  Eigen::VectorXd p_der(n + grid.size());
  p_der << p_obs, grid;

  const GramMatrix kzz = gram(kernel, inducing, 1e-8 * kernel.variance);
  const Eigen::MatrixXd kzz_inv = kzz.solve(Eigen::MatrixXd::Identity(mi, mi));

  const Eigen::MatrixXd kpz = cross_gram(kernel, p_val, inducing);
  const Eigen::MatrixXd a_val = kzz.solve(kpz.transpose()).transpose();
  Eigen::VectorXd c_val(n_val);
  for (Eigen::Index i = 0; i < n_val; ++i) {
    c_val[i] = std::max(kernel.variance - a_val.row(i).dot(kpz.row(i)), 0.0);
  }

  const Eigen::MatrixXd kdz = deriv_cross(kernel, p_der, inducing);
  const Eigen::MatrixXd a_der = kzz.solve(kdz.transpose()).transpose();
  Eigen::VectorXd c_der(p_der.size());
  const double prior_dvar = 2.0 * kernel.variance / kernel.length_scale;
  for (Eigen::Index i = 0; i < p_der.size(); ++i) {
    c_der[i] = std::max(prior_dvar - a_der.row(i).dot(kdz.row(i)), 0.0);
  }

  // Constant pieces of the weighted quadratic term.
  const Eigen::MatrixXd wq = a_val.transpose() * weight.asDiagonal() * a_val;
  const Eigen::VectorXd rhs = a_val.transpose() * weight.cwiseProduct(target).matrix();

  const GaussHermite& gh = gauss_hermite(cfg.quad_order);
  const double nu = cfg.probit_scale;

  PackedParams pp{mi};
  Eigen::VectorXd params = Eigen::VectorXd::Zero(pp.size());
  {
    // Warm start at the identity map; data terms move it from there.
    Eigen::VectorXd p0 = linspace01(33);
    Eigen::MatrixXd a0 = kzz.solve(cross_gram(kernel, p0, inducing).transpose()).transpose();
    Eigen::MatrixXd lhs = a0.transpose() * a0 + 1e-6 * Eigen::MatrixXd::Identity(mi, mi);
    params.head(mi) = lhs.ldlt().solve(a0.transpose() * p0);
    params.segment(mi, mi).setConstant(std::log(0.1));
  }

  Adam adam(params.size(), cfg.step_size);
  Eigen::VectorXd mv;
  Eigen::MatrixXd lmat;
  double last_objective = std::numeric_limits<double>::quiet_NaN();
  for (int it = 0; it < cfg.iterations; ++it) {
    pp.unpack(params, mv, lmat);

    Eigen::VectorXd grad_m = 2.0 * (wq * mv - rhs);
    Eigen::MatrixXd grad_l = 2.0 * wq * lmat;
    double objective = mv.dot(wq * mv) - 2.0 * mv.dot(rhs) +
                       weight.dot(target.cwiseProduct(target)) +
                       (weight.asDiagonal() * (a_val * lmat)).cwiseProduct(a_val * lmat).sum();

    // Gauss-Hermite terms on the derivative process: -E[log g] at the data
    // probabilities, -E[log Phi(g/nu)] on the constraint grid.
    const Eigen::MatrixXd a_der_l = a_der * lmat;
    for (Eigen::Index i = 0; i < p_der.size(); ++i) {
      const bool is_constraint = i >= n;
      const double mu = a_der.row(i).dot(mv);
      const double sd = std::sqrt(c_der[i] + a_der_l.row(i).squaredNorm());
      double e_h = 0.0, d_mu = 0.0, d_sd = 0.0;
      for (int q = 0; q < cfg.quad_order; ++q) {
        const double z = gh.nodes[q];
        const double x = mu + sd * z;
        double h, hp;
        if (is_constraint) {
          const double u = x / nu;
          h = log_norm_cdf(u);
          hp = std::exp(-0.5 * u * u - 0.5 * kLogTwoPi - h) / nu;
        } else {
          h = std::log(std::max(x, 1e-12));
          hp = x > 1e-12 ? 1.0 / x : 0.0;
        }
        e_h += gh.weights[q] * h;
        d_mu += gh.weights[q] * hp;
        d_sd += gh.weights[q] * hp * z;
      }
      objective -= e_h;
      grad_m -= d_mu * a_der.row(i).transpose();
      if (sd > 0.0) {
        grad_l -= (d_sd / sd) * (a_der.row(i).transpose() * a_der_l.row(i));
      }
    }

    // KL(N(m,S) || N(0, K_ZZ)).
    const Eigen::MatrixXd kinv_l = kzz_inv * lmat;
    const double tr_term = (lmat.cwiseProduct(kinv_l)).sum();
    const double logdet_s = 2.0 * lmat.diagonal().array().log().sum();
    objective += 0.5 * (tr_term + mv.dot(kzz_inv * mv) - static_cast<double>(mi) +
                        kzz.log_det() - logdet_s);
    grad_m += kzz_inv * mv;
    Eigen::MatrixXd linv_t = lmat.triangularView<Eigen::Lower>()
                                 .solve(Eigen::MatrixXd::Identity(mi, mi))
                                 .transpose();
    grad_l += kinv_l - linv_t;

    if (!std::isfinite(objective)) {
      std::ostringstream msg;
      msg << "fit_link: non-finite objective at iteration " << it
          << " (last finite value " << last_objective << ")";
      throw InferenceError(msg.str());
    }
    last_objective = objective;

    Eigen::VectorXd grad;
    pp.pack_grad(grad_m, grad_l, lmat, grad);
    adam.step(params, grad);
  }
  pp.unpack(params, mv, lmat);

  LinkPosterior link;
  link.value_factor = SgpFactor{inducing, mv, lmat, kernel};
  link.constraint_grid = grid;
  link.probit_scale = nu;
  link.kernel = kernel;
  link.identity = false;

  const Eigen::MatrixXd kgz = deriv_cross(kernel, grid, inducing);
  const Eigen::MatrixXd a_grid = kzz.solve(kgz.transpose()).transpose();
  link.derivative_stats.mean = a_grid * mv;
  Eigen::MatrixXd cov = deriv_deriv(kernel, grid, grid) -
                        a_grid * (kzz.values - lmat * lmat.transpose()) * a_grid.transpose();
  link.derivative_stats.covariance = 0.5 * (cov + cov.transpose());
  return link;
}

Eigen::VectorXd link_value_mean(const LinkPosterior& link,
                                const Eigen::Ref<const Eigen::VectorXd>& p) {
  if (link.identity) return p;
  const GramMatrix kzz = gram(link.kernel, link.value_factor.inducing, 1e-8 * link.kernel.variance);
  const Eigen::MatrixXd kpz = cross_gram(link.kernel, p, link.value_factor.inducing);
  return kpz * kzz.solve(link.value_factor.mean_params);
}

Eigen::VectorXd link_deriv_mean(const LinkPosterior& link,
                                const Eigen::Ref<const Eigen::VectorXd>& p) {
  if (link.identity) return Eigen::VectorXd::Ones(p.size());
  const GramMatrix kzz = gram(link.kernel, link.value_factor.inducing, 1e-8 * link.kernel.variance);
  const Eigen::MatrixXd kdz = deriv_cross(link.kernel, p, link.value_factor.inducing);
  return kdz * kzz.solve(link.value_factor.mean_params);
}

PredictiveDistribution apply_link(const LinkPosterior& link, const PredictiveDistribution& f0) {
  if (link.identity) {
    PredictiveDistribution out = f0;
    out.cdf = out.cdf.cwiseMax(0.0).cwiseMin(1.0);
    out.pdf = out.pdf.cwiseMax(0.0);
    return out;
  }
  const Eigen::Index n = f0.locations();
  const Eigen::Index m = f0.y_grid.size();

  Eigen::VectorXd flat(n * m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) flat[i * m + j] = std::clamp(f0.cdf(i, j), 0.0, 1.0);
  const Eigen::VectorXd gvals = link_value_mean(link, flat);
  const Eigen::VectorXd dvals = link_deriv_mean(link, flat);

  PredictiveDistribution out;
  out.y_grid = f0.y_grid;
  out.cdf.resize(n, m);
  out.pdf.resize(n, m);
  out.mean.resize(n);
  out.ensemble_var = f0.ensemble_var;
  out.residual_var = f0.residual_var;
  out.noise_var = f0.noise_var;
  for (Eigen::Index i = 0; i < n; ++i) {
    double running = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double v = std::clamp(gvals[i * m + j], 0.0, 1.0);
      running = std::max(running, v);
      out.cdf(i, j) = running;
      out.pdf(i, j) = std::max(dvals[i * m + j], 0.0) * std::max(f0.pdf(i, j), 0.0);
    }
    // Stieltjes mean over the grid, normalized by the captured mass.
    double mass = out.cdf(i, m - 1) - out.cdf(i, 0);
    if (mass > 1e-9) {
      double acc = 0.0;
      for (Eigen::Index j = 0; j + 1 < m; ++j) {
        acc += 0.5 * (f0.y_grid[j] + f0.y_grid[j + 1]) * (out.cdf(i, j + 1) - out.cdf(i, j));
      }
      out.mean[i] = acc / mass;
    } else {
      out.mean[i] = f0.mean[i];
    }
  }
  return out;
}

}  // namespace calens
