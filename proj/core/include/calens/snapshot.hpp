#pragma once

#include <string>
#include <vector>

#include "calens/baselines.hpp"
#include "calens/calibration.hpp"
#include "calens/inference.hpp"

namespace calens {

// Self-describing fitted-model state. Serialized as JSON with a mandatory
// format_version field; doubles round-trip exactly.
struct ModelSnapshot {
  static constexpr int kFormatVersion = 1;

  EnsemblePosterior ensemble;
  LinkPosterior link;
  Eigen::VectorXd y_grid;  // divergence grid used at fit time
  DivergenceMode mode = DivergenceMode::KL_plus_CvM;
  std::vector<std::string> base_names;
  std::vector<KernelRidgeModel> base_models;  // empty when bases were tabulated
  int cdf_draws = 1024;
};

void save_snapshot(const ModelSnapshot& snapshot, const std::string& path);
ModelSnapshot load_snapshot(const std::string& path);

}  // namespace calens
