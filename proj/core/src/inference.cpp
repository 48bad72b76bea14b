#include "calens/inference.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "calens/errors.hpp"
#include "calens/math.hpp"
#include "calens/optim.hpp"
#include "calens/rng.hpp"

namespace calens {

DivergenceGrid make_divergence_grid(const Eigen::Ref<const Eigen::VectorXd>& values, int size,
                                    GridPolicy policy) {
  if (size < 8) throw InputError("make_divergence_grid: size must be >= 8");
  if (values.size() == 0) throw InputError("make_divergence_grid: empty values");
  DivergenceGrid out;
  out.policy = policy;
  out.y.resize(size);
  if (policy == GridPolicy::even_span) {
    double lo = values.minCoeff(), hi = values.maxCoeff();
    double range = hi - lo;
    if (range <= 0.0) range = std::max(std::abs(lo), 1.0);
    lo -= 0.1 * range;
    hi += 0.1 * range;
    for (int j = 0; j < size; ++j) {
      out.y[j] = lo + (hi - lo) * j / (size - 1);
    }
  } else {
    std::vector<double> sorted(values.data(), values.data() + values.size());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    for (int j = 0; j < size; ++j) {
      const double q = (j + 0.5) / size;
      const double pos = q * (n - 1);
      const auto lo = static_cast<size_t>(std::floor(pos));
      const auto hi = std::min(lo + 1, sorted.size() - 1);
      out.y[j] = sorted[lo] + (pos - std::floor(pos)) * (sorted[hi] - sorted[lo]);
    }
    // strictly increasing for downstream CDF evaluation
    for (int j = 1; j < size; ++j) {
      if (out.y[j] <= out.y[j - 1]) out.y[j] = out.y[j - 1] + 1e-12 * (1.0 + std::abs(out.y[j - 1]));
    }
  }
  return out;
}

double kl_hat(double density) { return -std::log(std::max(density, 1e-300)); }

double gaussian_log_density(double y, double mean, double sd) {
  const double u = (y - mean) / sd;
  return -0.5 * u * u - std::log(sd) - 0.5 * kLogTwoPi;
}

double cvm_hat(double y, const Eigen::Ref<const Eigen::VectorXd>& cdf_at_grid,
               const DivergenceGrid& grid) {
  if (cdf_at_grid.size() != grid.y.size()) throw InputError("cvm_hat: grid size mismatch");
  const Eigen::Index m = grid.y.size();
  double acc = 0.0;
  for (Eigen::Index j = 0; j < m; ++j) {
    const double f = std::clamp(cdf_at_grid[j], 0.0, 1.0);
    const double ind = y < grid.y[j] ? 1.0 : 0.0;
    acc += (f - ind) * (f - ind);
  }
  return acc / static_cast<double>(m);
}

double composite_divergence(double y, const Eigen::Ref<const Eigen::VectorXd>& cdf_at_grid,
                            double density, const DivergenceGrid& grid, DivergenceMode mode) {
  double out = kl_hat(density);
  if (mode == DivergenceMode::KL_plus_CvM) out += cvm_hat(y, cdf_at_grid, grid);
  return out;
}

void validate_config(const FitConfig& cfg) {
  if (!(cfg.step_size > 0.0)) throw ConfigError("step_size must be > 0");
  if (cfg.iterations < 0) throw ConfigError("iterations must be >= 0");
  if (cfg.mc_samples < 1) throw ConfigError("mc_samples must be >= 1");
  if (cfg.inducing_mean < 1 || cfg.inducing_cov < 1) throw ConfigError("inducing counts must be >= 1");
  if (cfg.inducing_mean < cfg.inducing_cov) {
    throw ConfigError("inducing_mean must be >= inducing_cov");
  }
  if (cfg.grid_size < 8) throw ConfigError("grid_size must be >= 8");
  if (!(cfg.probit_scale > 0.0)) throw ConfigError("probit_scale must be > 0");
  if (cfg.cdf_draws < 16) throw ConfigError("cdf_draws must be >= 16");
  validate_kernel(cfg.kernel_mu);
  validate_kernel(cfg.kernel_eps);
}

namespace {

constexpr std::uint64_t kEvalStream = 0xEEEE;
constexpr double kKlJitterScale = 1e-6;

// Lexicographic sort then even strides; for 1-D inputs this picks evenly
// spaced quantiles of the training inputs.
Eigen::MatrixXd strided_inducing(const Eigen::MatrixXd& x, int count) {
  const Eigen::MatrixXd unique = dedup_points(x, 1e-9);
  const Eigen::Index n = unique.rows();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < unique.cols(); ++c) {
      if (unique(a, c) != unique(b, c)) return unique(a, c) < unique(b, c);
    }
    return false;
  });
  const Eigen::Index take = std::min<Eigen::Index>(count, n);
  Eigen::MatrixXd out(take, unique.cols());
  for (Eigen::Index i = 0; i < take; ++i) {
    const Eigen::Index pos =
        take == 1 ? n / 2 : static_cast<Eigen::Index>(std::llround(double(i) * (n - 1) / (take - 1)));
    out.row(i) = unique.row(order[static_cast<size_t>(pos)]);
  }
  return out;
}

struct GpDesign {
  Eigen::MatrixXd zm, zs;
  Eigen::MatrixXd bm;         // K_X,Zm
  Eigen::MatrixXd bs;         // K_X,Zs
  Eigen::MatrixXd kss_inv;    // (K_ZsZs + jitter)^-1
  Eigen::MatrixXd prior_inv;  // (K_XX + j I)^-1
  double prior_logdet = 0.0;
  double kvar = 1.0;
  double kl_jitter = 0.0;
  KernelSpec kernel;
};

GpDesign make_design(const KernelSpec& kernel, const Eigen::MatrixXd& x,
                     const Eigen::MatrixXd& zm, const Eigen::MatrixXd& zs) {
  GpDesign d;
  d.kernel = kernel;
  d.zm = zm;
  d.zs = zs;
  d.kvar = kernel.variance;
  d.kl_jitter = kKlJitterScale * kernel.variance;
  d.bm = cross_gram(kernel, x, zm);
  d.bs = cross_gram(kernel, x, zs);
  const GramMatrix kss = gram(kernel, zs, 1e-8 * kernel.variance);
  d.kss_inv = kss.solve(Eigen::MatrixXd::Identity(zs.rows(), zs.rows()));
  Eigen::MatrixXd kxx = gram(kernel, x).values;
  kxx.diagonal().array() += d.kl_jitter;
  Eigen::LLT<Eigen::MatrixXd> llt(kxx);
  if (llt.info() != Eigen::Success) throw NumericalError("prior covariance not factorizable");
  d.prior_inv = llt.solve(Eigen::MatrixXd::Identity(x.rows(), x.rows()));
  d.prior_logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  return d;
}

struct GpParams {
  Eigen::VectorXd m;
  Eigen::MatrixXd l;
};

struct Layout {
  int n_gps = 0;  // K weight GPs + 1 residual
  Eigen::Index mm = 0, ms = 0;
  Eigen::Index gp_block() const { return mm + ms + ms * (ms - 1) / 2; }
  Eigen::Index total() const { return n_gps * gp_block() + 4; }
  Eigen::Index gp_offset(int j) const { return j * gp_block(); }
  Eigen::Index scalar_offset() const { return n_gps * gp_block(); }

  GpParams unpack_gp(const Eigen::VectorXd& p, int j) const {
    GpParams out;
    const Eigen::Index off = gp_offset(j);
    out.m = p.segment(off, mm);
    out.l = Eigen::MatrixXd::Zero(ms, ms);
    for (Eigen::Index i = 0; i < ms; ++i) out.l(i, i) = std::exp(p[off + mm + i]);
    Eigen::Index idx = off + mm + ms;
    for (Eigen::Index i = 1; i < ms; ++i)
      for (Eigen::Index c = 0; c < i; ++c) out.l(i, c) = p[idx++];
    return out;
  }

  void pack_gp_grad(Eigen::VectorXd& grad, int j, const Eigen::VectorXd& gm,
                    const Eigen::MatrixXd& gl, const Eigen::MatrixXd& l) const {
    const Eigen::Index off = gp_offset(j);
    grad.segment(off, mm) += gm;
    for (Eigen::Index i = 0; i < ms; ++i) grad[off + mm + i] += gl(i, i) * l(i, i);
    Eigen::Index idx = off + mm + ms;
    for (Eigen::Index i = 1; i < ms; ++i)
      for (Eigen::Index c = 0; c < i; ++c) grad[idx++] += gl(i, c);
  }
};

struct Evaluation {
  double value = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd grad;
  bool finite = false;
};

class VariationalProblem {
 public:
  VariationalProblem(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                     const BaseModelSet& bases, const KernelSpec& kernel_mu,
                     const KernelSpec& kernel_eps, const Eigen::MatrixXd& zm_mu,
                     const Eigen::MatrixXd& zs_mu, const Eigen::MatrixXd& zm_eps,
                     const Eigen::MatrixXd& zs_eps, const DivergenceGrid& grid,
                     const EnsemblePrior& prior)
      : x_(x), y_(y), preds_(bases.predictions), grid_(grid), prior_(prior) {
    if (zm_mu.rows() != zm_eps.rows() || zs_mu.rows() != zs_eps.rows()) {
      throw InputError("weight and residual factors must share inducing counts");
    }
    k_ = static_cast<int>(preds_.cols());
    layout_.n_gps = k_ + 1;
    layout_.mm = zm_mu.rows();
    layout_.ms = zs_mu.rows();
    design_mu_ = make_design(kernel_mu, x_, zm_mu, zs_mu);
    design_eps_ = make_design(kernel_eps, x_, zm_eps, zs_eps);
  }

  const Layout& layout() const { return layout_; }
  const GpDesign& design(int j) const { return j < k_ ? design_mu_ : design_eps_; }

  Eigen::VectorXd initial_params(double noise_location) const {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(layout_.total());
    for (int j = 0; j < layout_.n_gps; ++j) {
      const double s0 = 1e3 * design(j).kvar;  // wide start: marginal ~ prior
      p.segment(layout_.gp_offset(j) + layout_.mm, layout_.ms)
          .setConstant(0.5 * std::log(s0));
    }
    const Eigen::Index so = layout_.scalar_offset();
    p[so + 0] = 0.0;                 // temperature location: ln(1)
    p[so + 1] = std::log(0.1);       // temperature log-scale
    p[so + 2] = noise_location;      // noise location: ln(residual sd)
    p[so + 3] = std::log(0.1);       // noise log-scale
    return p;
  }

  Evaluation evaluate(const Eigen::VectorXd& params, int mc_samples, std::uint64_t seed,
                      DivergenceMode mode, bool with_grad, FitStats* stats) const {
    const Eigen::Index n = x_.rows();
    const Eigen::Index mg = grid_.y.size();
    const int ngp = layout_.n_gps;
    Evaluation ev;
    if (with_grad) ev.grad = Eigen::VectorXd::Zero(layout_.total());

    std::vector<GpParams> gp(ngp);
    std::vector<Eigen::MatrixXd> v(ngp);     // W^-1 Bs^T, Ms x N
    std::vector<Eigen::VectorXd> mu(ngp), sd(ngp);
    std::vector<Eigen::Matrix<bool, Eigen::Dynamic, 1>> floored(ngp);
    for (int j = 0; j < ngp; ++j) {
      gp[j] = layout_.unpack_gp(params, j);
      const GpDesign& d = design(j);
      Eigen::MatrixXd w = d.kss_inv + gp[j].l * gp[j].l.transpose();
      w = 0.5 * (w + w.transpose()).eval();
      Eigen::LLT<Eigen::MatrixXd> wllt(w);
      if (wllt.info() != Eigen::Success) return ev;  // non-finite step
      v[j] = wllt.solve(d.bs.transpose());
      mu[j] = d.bm * gp[j].m;
      sd[j].resize(n);
      floored[j].resize(n);
      const double vfloor = 1e-10 * d.kvar;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double var = d.kvar - d.bs.row(i).dot(v[j].col(i));
        floored[j][i] = var < vfloor;
        sd[j][i] = std::sqrt(std::max(var, vfloor));
      }
    }

    const Eigen::Index so = layout_.scalar_offset();
    const double loc_lambda = params[so + 0], scale_lambda = std::exp(params[so + 1]);
    const double loc_sigma = params[so + 2], scale_sigma = std::exp(params[so + 3]);

    double data_value = 0.0;
    std::vector<Eigen::VectorXd> gm_data(ngp), dvar(ngp);
    for (int j = 0; j < ngp; ++j) {
      gm_data[j] = Eigen::VectorXd::Zero(n);  // d obj / d f_j, summed in f-space
      dvar[j] = Eigen::VectorXd::Zero(n);
    }
    double d_loc_lambda = 0.0, d_rho_lambda = 0.0, d_loc_sigma = 0.0, d_rho_sigma = 0.0;

    Rng rng = Rng::derive(seed, 0x5A);
    Eigen::MatrixXd g(k_, n);
    Eigen::MatrixXd xi(ngp, n);
    Eigen::VectorXd w_col(k_), dw(k_), da(k_);
    for (int s = 0; s < mc_samples; ++s) {
      const double xi_lambda = rng.normal();
      const double xi_sigma = rng.normal();
      const double lambda = std::exp(loc_lambda + scale_lambda * xi_lambda);
      const double sigma = std::exp(loc_sigma + scale_sigma * xi_sigma);
      for (int j = 0; j < ngp; ++j)
        for (Eigen::Index i = 0; i < n; ++i) xi(j, i) = rng.normal();

      double d_lambda = 0.0, d_sigma = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < k_; ++j) g(j, i) = mu[j][i] + sd[j][i] * xi(j, i);
        const double eps = mu[k_][i] + sd[k_][i] * xi(k_, i);

        // softmax weights at this location
        double peak = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k_; ++j) peak = std::max(peak, g(j, i) / lambda);
        double norm = 0.0;
        for (int j = 0; j < k_; ++j) {
          w_col[j] = std::exp(g(j, i) / lambda - peak);
          norm += w_col[j];
        }
        w_col /= norm;

        const double mean_i = preds_.row(i).dot(w_col) + eps;
        const double resid = y_[i] - mean_i;
        data_value += 0.5 * kLogTwoPi + std::log(sigma) + 0.5 * resid * resid / (sigma * sigma);

        double d_mean = 0.0;
        if (with_grad) {
          d_mean = -resid / (sigma * sigma);
          d_sigma += 1.0 / sigma - resid * resid / (sigma * sigma * sigma);
        }
        if (mode == DivergenceMode::KL_plus_CvM) {
          if (stats) stats->cvm_term_evaluations += mg;
          for (Eigen::Index jg = 0; jg < mg; ++jg) {
            const double u = (grid_.y[jg] - mean_i) / sigma;
            const double f = norm_cdf(u);
            const double ind = y_[i] < grid_.y[jg] ? 1.0 : 0.0;
            data_value += (f - ind) * (f - ind) / static_cast<double>(mg);
            if (with_grad) {
              const double coeff = 2.0 * (f - ind) * norm_pdf(u) / static_cast<double>(mg);
              d_mean += coeff * (-1.0 / sigma);
              d_sigma += coeff * (-u / sigma);
            }
          }
        }
        if (with_grad) {
          // residual GP gets d_mean directly
          gm_data[k_][i] += d_mean;
          if (!floored[k_][i]) dvar[k_][i] += d_mean * xi(k_, i) / (2.0 * sd[k_][i]);
          // softmax backward
          for (int j = 0; j < k_; ++j) dw[j] = d_mean * preds_(i, j);
          const double inner = w_col.dot(dw);
          for (int j = 0; j < k_; ++j) {
            da[j] = w_col[j] * (dw[j] - inner);
            const double dg = da[j] / lambda;
            gm_data[j][i] += dg;
            if (!floored[j][i]) dvar[j][i] += dg * xi(j, i) / (2.0 * sd[j][i]);
            d_lambda += da[j] * (-g(j, i) / (lambda * lambda));
          }
        }
      }
      if (with_grad) {
        d_loc_lambda += d_lambda * lambda;
        d_rho_lambda += d_lambda * lambda * xi_lambda * scale_lambda;
        d_loc_sigma += d_sigma * sigma;
        d_rho_sigma += d_sigma * sigma * xi_sigma * scale_sigma;
      }
    }
    const double inv_mc = 1.0 / static_cast<double>(mc_samples);
    data_value *= inv_mc;

    double kl_value = 0.0;
    std::vector<Eigen::VectorXd> gm_kl(ngp);
    std::vector<Eigen::MatrixXd> gs(ngp);
    for (int j = 0; j < ngp; ++j) {
      const GpDesign& d = design(j);
      Eigen::MatrixXd sigma_q = -d.bs * v[j];
      sigma_q += gram(d.kernel, x_).values;  // K_XX - Bs W^-1 Bs^T
      sigma_q.diagonal().array() += d.kl_jitter;
      sigma_q = 0.5 * (sigma_q + sigma_q.transpose()).eval();
      Eigen::LLT<Eigen::MatrixXd> sllt(sigma_q);
      if (sllt.info() != Eigen::Success) return ev;
      const Eigen::MatrixXd sq_inv = sllt.solve(Eigen::MatrixXd::Identity(n, n));
      const double logdet_sq =
          2.0 * Eigen::MatrixXd(sllt.matrixL()).diagonal().array().log().sum();
      const Eigen::VectorXd pm = d.prior_inv * mu[j];
      kl_value += 0.5 * ((d.prior_inv.cwiseProduct(sigma_q)).sum() + mu[j].dot(pm) -
                          static_cast<double>(n) + d.prior_logdet - logdet_sq);
      if (with_grad) {
        gm_kl[j] = d.bm.transpose() * pm;
        const Eigen::MatrixXd g_sigma = 0.5 * (d.prior_inv - sq_inv);
        gs[j] = v[j] * g_sigma * v[j].transpose();
      }
    }
    const LogNormalFactor q_lambda{loc_lambda, scale_lambda};
    const LogNormalFactor q_sigma{loc_sigma, scale_sigma};
    kl_value += lognormal_kl(q_lambda, prior_.temperature);
    kl_value += lognormal_kl(q_sigma, prior_.noise_sd);

    ev.value = data_value + kl_value;
    if (!std::isfinite(ev.value)) return ev;

    if (with_grad) {
      for (int j = 0; j < ngp; ++j) {
        const GpDesign& d = design(j);
        Eigen::VectorXd gm = d.bm.transpose() * (gm_data[j] * inv_mc) + gm_kl[j];
        Eigen::MatrixXd gtot =
            gs[j] + v[j] * (dvar[j] * inv_mc).asDiagonal() * v[j].transpose();
        Eigen::MatrixXd gl = (gtot + gtot.transpose()) * gp[j].l;
        layout_.pack_gp_grad(ev.grad, j, gm, gl, gp[j].l);
      }
      const Eigen::Index off = so;
      ev.grad[off + 0] += d_loc_lambda * inv_mc +
                          (loc_lambda - prior_.temperature.location) /
                              (prior_.temperature.scale * prior_.temperature.scale);
      ev.grad[off + 1] +=
          d_rho_lambda * inv_mc +
          (-1.0 / scale_lambda + scale_lambda / (prior_.temperature.scale * prior_.temperature.scale)) *
              scale_lambda;
      ev.grad[off + 2] += d_loc_sigma * inv_mc +
                          (loc_sigma - prior_.noise_sd.location) /
                              (prior_.noise_sd.scale * prior_.noise_sd.scale);
      ev.grad[off + 3] +=
          d_rho_sigma * inv_mc +
          (-1.0 / scale_sigma + scale_sigma / (prior_.noise_sd.scale * prior_.noise_sd.scale)) *
              scale_sigma;
      if (!ev.grad.allFinite()) return ev;
    }
    ev.finite = true;
    return ev;
  }

  EnsemblePosterior to_posterior(const Eigen::VectorXd& params) const {
    EnsemblePosterior post;
    post.kernel_mu = design_mu_.kernel;
    post.kernel_eps = design_eps_.kernel;
    post.weight_gps.resize(k_);
    for (int j = 0; j < k_; ++j) {
      const GpParams gpj = layout_.unpack_gp(params, j);
      post.weight_gps[j] =
          DgpFactor{design_mu_.zm, gpj.m, design_mu_.zs, gpj.l, design_mu_.kernel};
    }
    const GpParams gpe = layout_.unpack_gp(params, k_);
    post.residual_gp = DgpFactor{design_eps_.zm, gpe.m, design_eps_.zs, gpe.l, design_eps_.kernel};
    const Eigen::Index so = layout_.scalar_offset();
    post.temperature = LogNormalFactor{params[so + 0], std::exp(params[so + 1])};
    post.noise_sd = LogNormalFactor{params[so + 2], std::exp(params[so + 3])};
    return post;
  }

  Eigen::VectorXd from_posterior(const EnsemblePosterior& post) const {
    if (static_cast<int>(post.weight_gps.size()) != k_) {
      throw InputError("vi state: weight GP count disagrees with base models");
    }
    Eigen::VectorXd p = Eigen::VectorXd::Zero(layout_.total());
    for (int j = 0; j < layout_.n_gps; ++j) {
      const DgpFactor& f = j < k_ ? post.weight_gps[j] : post.residual_gp;
      validate_factor(f);
      if (f.mean_size() != layout_.mm || f.cov_size() != layout_.ms) {
        throw InputError("vi state: factor inducing counts disagree with problem layout");
      }
      const Eigen::Index off = layout_.gp_offset(j);
      p.segment(off, layout_.mm) = f.mean_params;
      for (Eigen::Index i = 0; i < layout_.ms; ++i) {
        if (!(f.cov_chol(i, i) > 0.0)) throw InputError("vi state: cov_chol diagonal must be > 0");
        p[off + layout_.mm + i] = std::log(f.cov_chol(i, i));
      }
      Eigen::Index idx = off + layout_.mm + layout_.ms;
      for (Eigen::Index i = 1; i < layout_.ms; ++i)
        for (Eigen::Index c = 0; c < i; ++c) p[idx++] = f.cov_chol(i, c);
    }
    const Eigen::Index so = layout_.scalar_offset();
    p[so + 0] = post.temperature.location;
    p[so + 1] = std::log(post.temperature.scale);
    p[so + 2] = post.noise_sd.location;
    p[so + 3] = std::log(post.noise_sd.scale);
    return p;
  }

 private:
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
  Eigen::MatrixXd preds_;
  DivergenceGrid grid_;
  EnsemblePrior prior_;
  int k_ = 0;
  Layout layout_;
  GpDesign design_mu_, design_eps_;
};

double residual_sd_from_average(const Eigen::VectorXd& y, const Eigen::MatrixXd& preds) {
  const Eigen::VectorXd resid = y - preds.rowwise().mean();
  const double mean = resid.mean();
  const double var = (resid.array() - mean).square().sum() / std::max<double>(resid.size() - 1, 1);
  const double ysd = std::sqrt((y.array() - y.mean()).square().sum() / std::max<double>(y.size() - 1, 1));
  return std::max({std::sqrt(var), 1e-3 * ysd, 1e-6});
}

struct ResolvedSpec {
  KernelSpec kernel_mu;
  KernelSpec kernel_eps;
  EnsemblePrior prior;
  double noise_location = 0.0;
};

ResolvedSpec resolve_spec(const Eigen::VectorXd& y, const BaseModelSet& bases,
                          const FitConfig& cfg) {
  ResolvedSpec out;
  out.kernel_mu = cfg.kernel_mu;
  out.kernel_eps = cfg.kernel_eps;
  if (cfg.auto_scale_eps_variance) {
    const double rsd = residual_sd_from_average(y, bases.predictions);
    out.kernel_eps.variance = std::max(rsd * rsd, 1e-8);
  }
  out.prior = cfg.prior;
  const double rsd = residual_sd_from_average(y, bases.predictions);
  out.noise_location = std::log(rsd);
  // Noise prior is centered on the data-scale estimate; the configured
  // location acts as an offset from it.
  out.prior.noise_sd.location += out.noise_location;
  return out;
}

VariationalProblem build_problem(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                 const BaseModelSet& bases, const FitConfig& cfg,
                                 const ResolvedSpec& spec, const DivergenceGrid& grid) {
  const Eigen::MatrixXd zm = strided_inducing(x, cfg.inducing_mean);
  const Eigen::MatrixXd zs = strided_inducing(x, cfg.inducing_cov);
  return VariationalProblem(x, y, bases, spec.kernel_mu, spec.kernel_eps, zm, zs, zm, zs, grid,
                            spec.prior);
}

}  // namespace

double vi_objective(const Eigen::Ref<const Eigen::MatrixXd>& x,
                    const Eigen::Ref<const Eigen::VectorXd>& y, const BaseModelSet& bases,
                    const EnsemblePosterior& state, const EnsemblePrior& prior,
                    const DivergenceGrid& grid, DivergenceMode mode, int mc_samples,
                    std::uint64_t seed) {
  validate_base_models(bases);
  if (mc_samples < 1) throw InputError("vi_objective: mc_samples must be >= 1");
  if (state.weight_gps.empty()) throw InputError("vi_objective: state has no weight GPs");
  for (const DgpFactor& f : state.weight_gps) {
    const DgpFactor& ref = state.weight_gps.front();
    const bool same_shape = f.mean_inducing.rows() == ref.mean_inducing.rows() &&
                            f.cov_inducing.rows() == ref.cov_inducing.rows();
    if (!same_shape || (f.mean_inducing - ref.mean_inducing).cwiseAbs().maxCoeff() > 0.0 ||
        (f.cov_inducing - ref.cov_inducing).cwiseAbs().maxCoeff() > 0.0) {
      throw InputError("vi_objective: weight GPs must share inducing sets");
    }
  }
  VariationalProblem prob(x, y, bases, state.kernel_mu, state.kernel_eps,
                          state.weight_gps.front().mean_inducing,
                          state.weight_gps.front().cov_inducing, state.residual_gp.mean_inducing,
                          state.residual_gp.cov_inducing, grid, prior);
  const Eigen::VectorXd params = prob.from_posterior(state);
  const Evaluation ev = prob.evaluate(params, mc_samples, seed, mode, /*with_grad=*/false, nullptr);
  if (!std::isfinite(ev.value)) {
    throw InferenceError("vi_objective: non-finite objective (check factor covariances)");
  }
  return ev.value;
}

EnsemblePosterior initial_posterior(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                    const Eigen::Ref<const Eigen::VectorXd>& y,
                                    const BaseModelSet& bases, const FitConfig& cfg) {
  validate_config(cfg);
  validate_base_models(bases);
  const ResolvedSpec spec = resolve_spec(y, bases, cfg);
  const DivergenceGrid grid = make_divergence_grid(y, cfg.grid_size, cfg.grid_policy);
  VariationalProblem prob = build_problem(x, y, bases, cfg, spec, grid);
  return prob.to_posterior(prob.initial_params(spec.noise_location));
}

EnsemblePosterior optimize_vi(const Eigen::Ref<const Eigen::MatrixXd>& x,
                              const Eigen::Ref<const Eigen::VectorXd>& y,
                              const BaseModelSet& bases, const FitConfig& cfg,
                              std::vector<double>* trace, FitStats* stats) {
  validate_config(cfg);
  validate_base_models(bases);
  if (x.rows() < 5) throw InputError("optimize_vi: needs at least 5 observations");
  if (y.size() != x.rows()) throw InputError("optimize_vi: targets disagree with inputs");

  const ResolvedSpec spec = resolve_spec(y, bases, cfg);
  const DivergenceGrid grid = make_divergence_grid(y, cfg.grid_size, cfg.grid_policy);
  VariationalProblem prob = build_problem(x, y, bases, cfg, spec, grid);

  Eigen::VectorXd params = prob.initial_params(spec.noise_location);
  const Eigen::VectorXd init_params = params;
  Adam adam(params.size(), cfg.step_size);
  int consecutive_bad = 0;
  for (int it = 0; it < cfg.iterations; ++it) {
    const Evaluation ev =
        prob.evaluate(params, cfg.mc_samples, Rng::derive(cfg.seed, it).next_u64(), cfg.mode,
                      /*with_grad=*/true, stats);
    if (!ev.finite) {
      if (stats) ++stats->rejected_steps;
      if (++consecutive_bad >= 50) {
        throw InferenceError("optimize_vi: non-finite objective for 50 consecutive steps");
      }
      continue;
    }
    consecutive_bad = 0;
    if (trace) trace->push_back(ev.value);
    Eigen::VectorXd grad = ev.grad;
    adam.step(params, grad);
  }

  if (cfg.iterations > 0) {
    // Fixed-seed evaluation of the start and end points; keep the better one
    // so the fit can never end above its starting objective.
    const std::uint64_t eval_seed = Rng::derive(cfg.seed, kEvalStream).next_u64();
    const int eval_mc = std::max(64, cfg.mc_samples);
    const Evaluation e0 =
        prob.evaluate(init_params, eval_mc, eval_seed, cfg.mode, false, nullptr);
    const Evaluation e1 = prob.evaluate(params, eval_mc, eval_seed, cfg.mode, false, nullptr);
    if (e0.finite && (!e1.finite || e0.value < e1.value)) {
      params = init_params;
    }
  }
  return prob.to_posterior(params);
}

int select_best_candidate(const std::vector<LengthScaleCandidate>& candidates) {
  if (candidates.empty()) throw InputError("select_best_candidate: empty grid");
  int best = -1;
  for (int i = 0; i < static_cast<int>(candidates.size()); ++i) {
    if (!std::isfinite(candidates[i].objective)) continue;
    if (best < 0 || candidates[i].objective < candidates[best].objective ||
        (candidates[i].objective == candidates[best].objective &&
         candidates[i].length_scale > candidates[best].length_scale)) {
      best = i;
    }
  }
  if (best < 0) throw InferenceError("empirical Bayes: all candidates non-finite");
  return best;
}

namespace {

double score_candidate(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                       const BaseModelSet& bases, FitConfig cfg) {
  cfg.iterations = std::max(cfg.eb.iterations, 1);
  try {
    const EnsemblePosterior post = optimize_vi(x, y, bases, cfg, nullptr, nullptr);
    const ResolvedSpec spec = resolve_spec(y, bases, cfg);
    const DivergenceGrid grid = make_divergence_grid(y, cfg.grid_size, cfg.grid_policy);
    return vi_objective(x, y, bases, post, spec.prior, grid, cfg.mode, 64,
                        Rng::derive(cfg.seed, kEvalStream).next_u64());
  } catch (const Error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

KernelSelection empirical_bayes_select(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                       const Eigen::Ref<const Eigen::VectorXd>& y,
                                       const BaseModelSet& bases, const FitConfig& cfg) {
  validate_config(cfg);
  KernelSelection out{cfg.kernel_mu, cfg.kernel_eps};
  if (!cfg.eb.mu_grid.empty()) {
    if (cfg.eb.mu_grid.size() == 1) {
      out.kernel_mu.length_scale = cfg.eb.mu_grid.front();
    } else {
      std::vector<LengthScaleCandidate> cands;
      for (double l : cfg.eb.mu_grid) {
        FitConfig c = cfg;
        c.kernel_mu.length_scale = l;
        c.kernel_eps = out.kernel_eps;
        cands.push_back({l, score_candidate(x, y, bases, c)});
      }
      out.kernel_mu.length_scale = cands[select_best_candidate(cands)].length_scale;
    }
  }
  if (!cfg.eb.eps_grid.empty()) {
    if (cfg.eb.eps_grid.size() == 1) {
      out.kernel_eps.length_scale = cfg.eb.eps_grid.front();
    } else {
      std::vector<LengthScaleCandidate> cands;
      for (double l : cfg.eb.eps_grid) {
        FitConfig c = cfg;
        c.kernel_mu = out.kernel_mu;
        c.kernel_eps.length_scale = l;
        cands.push_back({l, score_candidate(x, y, bases, c)});
      }
      out.kernel_eps.length_scale = cands[select_best_candidate(cands)].length_scale;
    }
  }
  return out;
}

GibbsFit gibbs_fit(const Eigen::Ref<const Eigen::MatrixXd>& x,
                   const Eigen::Ref<const Eigen::VectorXd>& y, const BaseModelSet& bases,
                   const FitConfig& cfg) {
  validate_config(cfg);
  GibbsFit out;

  FitConfig fit_cfg = cfg;
  if (cfg.eb.enabled && (!cfg.eb.mu_grid.empty() || !cfg.eb.eps_grid.empty())) {
    const KernelSelection sel = empirical_bayes_select(x, y, bases, cfg);
    fit_cfg.kernel_mu = sel.kernel_mu;
    fit_cfg.kernel_eps = sel.kernel_eps;
  }
  out.selection = KernelSelection{fit_cfg.kernel_mu, fit_cfg.kernel_eps};

  out.ensemble = optimize_vi(x, y, bases, fit_cfg, &out.trace, &out.stats);
  out.grid = make_divergence_grid(y, cfg.grid_size, cfg.grid_policy);
  out.uncalibrated = systematic_cdf(out.ensemble, bases, x, out.grid.y, cfg.cdf_draws,
                                    Rng::derive(cfg.seed, 0xF0).next_u64());
  if (cfg.calibrate) {
    LinkConfig link_cfg = cfg.link;
    link_cfg.probit_scale = cfg.probit_scale;
    out.link = fit_link(out.uncalibrated, y, link_cfg);
  } else {
    out.link = LinkPosterior::make_identity();
  }
  out.calibrated = apply_link(out.link, out.uncalibrated);
  return out;
}

}  // namespace calens
