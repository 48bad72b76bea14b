#pragma once

#include <string>
#include <vector>

#include "calens/inference.hpp"

namespace calens {

// Full driver configuration: fit settings plus the benchmark protocol and
// file paths. Parsed from a JSON document whose keys mirror the field names;
// unknown keys are rejected, and input paths must resolve at parse time.
struct RunConfig {
  FitConfig fit;
  std::uint64_t seed = 0;
  int reps = 20;
  int jobs = 1;
  std::vector<std::string> methods;  // empty = all registered methods

  // benchmark protocol sizes
  int n_train = 20;
  int n_per_base = 20;
  int n_validation = 500;
  std::vector<double> base_length_scales{0.2, 0.1, 0.02, 0.01};
  double base_ridge = 1e-3;
  int eval_grid_size = 64;
  double eval_grid_margin = 0.15;
  int spline_candidates = 1000;

  // paths
  std::string data_path;
  std::string bases_path;
  std::string model_path;
  std::string out_dir;
};

RunConfig default_run_config();
std::vector<double> default_eb_grid();  // 8 log-spaced length-scales

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

const std::vector<std::string>& all_methods();
bool is_probabilistic_method(const std::string& method);

}  // namespace calens
