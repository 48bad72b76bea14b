#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace calens {

struct Dataset {
  Eigen::MatrixXd inputs;  // N x d, d in {1, 2}
  Eigen::VectorXd targets;
  std::optional<Eigen::MatrixXd> base_predictions;  // N x K
  std::vector<std::string> base_names;
  std::string generator;
  std::uint64_t seed = 0;

  Eigen::Index size() const { return inputs.rows(); }
  Eigen::Index dim() const { return inputs.cols(); }
};
void validate_dataset(const Dataset& ds);

// The 1-D benchmark generating function: a slow global component
// x + sin(4x) + sin(13x) plus a fast local one 0.5 sin(40x) active on the
// open interval (0.1, 0.6).
double synth_1d_truth(double x);

// n points with x ~ Uniform(0,1) and y = f(x + e), e ~ N(0, 0.01); the noise
// perturbs the input. `additive_noise` switches to y = f(x) + e for
// sensitivity checks.
Dataset synth_1d(int n, std::uint64_t seed, bool additive_noise = false);

// Same mechanism on an even grid over (0,1); the validation layout.
Dataset synth_1d_grid(int n, std::uint64_t seed, bool additive_noise = false);

// 2-D spatial scenario: sites on the unit square, a smooth random-feature
// truth field with a region-dependent shift, and per-model bias fields that
// vanish in the lower-left quadrant and disagree elsewhere, so no model is
// best everywhere. n_models == 1 disables the bias fields entirely.
Dataset synth_spatial(int n_sites, int n_models, std::uint64_t seed);

// Evaluates the synth_spatial construction at arbitrary locations (same seed
// gives the same fields); used for gridded prediction maps.
struct SpatialFields {
  Eigen::VectorXd truth;
  Eigen::MatrixXd base_predictions;
};
SpatialFields synth_spatial_fields(const Eigen::Ref<const Eigen::MatrixXd>& locations,
                                   int n_models, std::uint64_t seed);

}  // namespace calens
