#include "calens/math.hpp"

#include <Eigen/Eigenvalues>
#include <map>
#include <mutex>

#include "calens/errors.hpp"

namespace calens {

double log_norm_cdf(double x) {
  if (x > -12.0) {
    return std::log(norm_cdf(x));
  }
  // Phi(x) = phi(x)/(-x) * (1 - 1/x^2 + 3/x^4 - 15/x^6 + 105/x^8 - ...)
  const double x2 = x * x;
  const double series =
      1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
  return -0.5 * x2 - std::log(-x) - 0.5 * kLogTwoPi + std::log(series);
}

double norm_ppf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw InputError("norm_ppf requires p in (0,1)");
  }
  const bool lower = p < 0.5;
  const double q = lower ? p : 1.0 - p;
  // Hastings approximation (Abramowitz & Stegun 26.2.23) for the upper-tail
  // quantile of probability q.
  const double t = std::sqrt(-2.0 * std::log(q));
  double z = t - (2.515517 + 0.802853 * t + 0.010328 * t * t) /
                     (1.0 + 1.432788 * t + 0.189269 * t * t + 0.001308 * t * t * t);
  double x = lower ? -z : z;
  for (int it = 0; it < 3; ++it) {
    const double err = norm_cdf(x) - p;
    const double d = norm_pdf(x);
    if (d <= 0.0) break;
    x -= err / d;
  }
  return x;
}

double trapezoid(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw InputError("trapezoid requires matching vectors of length >= 2");
  }
  double acc = 0.0;
  for (Eigen::Index i = 0; i + 1 < x.size(); ++i) {
    acc += 0.5 * (y[i] + y[i + 1]) * (x[i + 1] - x[i]);
  }
  return acc;
}

const GaussHermite& gauss_hermite(int order) {
  static std::map<int, GaussHermite> cache;
  static std::mutex mutex;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(order);
  if (it != cache.end()) return it->second;
  if (order < 1) throw InputError("gauss_hermite order must be >= 1");

  // Golub-Welsch on the Jacobi matrix of the (physicists') Hermite
  // polynomials, then rescale nodes by sqrt(2) so the rule integrates
  // against the standard normal density.
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    const double b = std::sqrt(k / 2.0);
    jacobi(k, k - 1) = b;
    jacobi(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  GaussHermite rule;
  rule.nodes = eig.eigenvalues() * std::sqrt(2.0);
  rule.weights.resize(order);
  for (int k = 0; k < order; ++k) {
    const double v0 = eig.eigenvectors()(0, k);
    rule.weights[k] = v0 * v0;  // normalized: sum of squares of first row = 1
  }
  auto [pos, inserted] = cache.emplace(order, std::move(rule));
  return pos->second;
}

double gh_expectation(double mu, double sigma, int order,
                      const std::function<double(double)>& h) {
  const GaussHermite& rule = gauss_hermite(order);
  double acc = 0.0;
  for (int q = 0; q < order; ++q) {
    acc += rule.weights[q] * h(mu + sigma * rule.nodes[q]);
  }
  return acc;
}

double interp_monotone(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double q) {
  const Eigen::Index n = x.size();
  if (n == 0 || y.size() != n) throw InputError("interp_monotone shape mismatch");
  if (q <= x[0]) return y[0];
  if (q >= x[n - 1]) return y[n - 1];
  Eigen::Index lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    const Eigen::Index mid = (lo + hi) / 2;
    (x[mid] <= q ? lo : hi) = mid;
  }
  const double span = x[hi] - x[lo];
  if (span <= 0.0) return y[lo];
  const double w = (q - x[lo]) / span;
  return y[lo] + w * (y[hi] - y[lo]);
}

double quantile_from_cdf(const Eigen::VectorXd& y_grid, const Eigen::VectorXd& cdf, double p) {
  const Eigen::Index n = y_grid.size();
  if (n == 0 || cdf.size() != n) throw InputError("quantile_from_cdf shape mismatch");
  if (p <= cdf[0]) return y_grid[0];
  if (p >= cdf[n - 1]) return y_grid[n - 1];
  // first index with cdf >= p
  Eigen::Index lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    const Eigen::Index mid = (lo + hi) / 2;
    (cdf[mid] < p ? lo : hi) = mid;
  }
  const double rise = cdf[hi] - cdf[lo];
  if (rise <= 0.0) return y_grid[lo];  // flat segment: leftmost point
  const double w = (p - cdf[lo]) / rise;
  return y_grid[lo] + w * (y_grid[hi] - y_grid[lo]);
}

}  // namespace calens
