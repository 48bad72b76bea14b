#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>

namespace calens {

inline constexpr double kPi = 3.14159265358979323846264338327950288;
inline constexpr double kLogTwoPi = 1.83787706640934548356065947281123527;

inline double norm_pdf(double x) {
  return std::exp(-0.5 * x * x - 0.5 * kLogTwoPi);
}

inline double norm_cdf(double x) {
  return 0.5 * std::erfc(-x * 0.70710678118654752440);
}

// log Phi(x) with an asymptotic expansion in the deep lower tail, where
// erfc underflows.
double log_norm_cdf(double x);

// Inverse standard normal CDF. Hastings initial guess refined by Newton
// steps against the erfc-based CDF; accurate to ~1e-14 over (0,1).
double norm_ppf(double p);

// Trapezoid rule over an increasing abscissa.
double trapezoid(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

// Gauss-Hermite rule adapted to expectations under N(mu, sigma^2):
//   E[h(Z)] ~= sum_q weight[q] * h(mu + sigma * node[q]).
// Nodes/weights are produced by Golub-Welsch on the Jacobi matrix and cached
// per order.
struct GaussHermite {
  Eigen::VectorXd nodes;    // standardized: E[h(N(0,1))] = sum w_q h(node_q)
  Eigen::VectorXd weights;  // sum to 1
};
const GaussHermite& gauss_hermite(int order);

// E[h(X)] for X ~ N(mu, sigma^2) by Gauss-Hermite quadrature.
double gh_expectation(double mu, double sigma, int order,
                      const std::function<double(double)>& h);

// Monotone linear interpolation of y(x) at query q; clamps outside [x0, xN].
double interp_monotone(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double q);

// Left-continuous generalized inverse of a nondecreasing cdf sampled on
// y_grid: smallest y with cdf(y) >= p, linearly interpolated. Ties resolve to
// the leftmost grid point.
double quantile_from_cdf(const Eigen::VectorXd& y_grid, const Eigen::VectorXd& cdf, double p);

}  // namespace calens
