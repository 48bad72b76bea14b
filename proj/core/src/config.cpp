#include "calens/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "calens/errors.hpp"

namespace calens {

namespace {

using nlohmann::json;

void require_keys(const json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

KernelSpec parse_kernel(const json& obj, const KernelSpec& base, const std::string& where) {
  require_keys(obj, {"family", "length_scale", "variance"}, where);
  KernelSpec out = base;
  if (obj.contains("family")) {
    const std::string fam = obj.at("family").get<std::string>();
    if (fam == "rbf") {
      out.family = KernelFamily::RBF;
    } else if (fam == "ou") {
      out.family = KernelFamily::OU;
    } else {
      throw ConfigError("unknown kernel family '" + fam + "' in " + where);
    }
  }
  if (obj.contains("length_scale")) out.length_scale = obj.at("length_scale").get<double>();
  if (obj.contains("variance")) out.variance = obj.at("variance").get<double>();
  return out;
}

void check_path(const std::string& path, const std::string& key) {
  if (path.empty()) return;
  if (!std::filesystem::exists(path)) {
    throw ConfigError("path for '" + key + "' does not resolve: " + path);
  }
}

}  // namespace

std::vector<double> default_eb_grid() {
  std::vector<double> grid;
  const double lo = std::log(0.01), hi = std::log(3.0);
  for (int i = 0; i < 8; ++i) grid.push_back(std::exp(lo + (hi - lo) * i / 7.0));
  return grid;
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.fit.eb.mu_grid = default_eb_grid();
  cfg.fit.eb.eps_grid = default_eb_grid();
  return cfg;
}

const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> methods = {
      "ours", "ours_kl_only", "avg", "cv_stack", "lnr_stack", "nlr_stack", "gam"};
  return methods;
}

bool is_probabilistic_method(const std::string& method) {
  return method == "ours" || method == "ours_kl_only" || method == "lnr_stack" ||
         method == "nlr_stack" || method == "gam";
}

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be a JSON object");

  require_keys(root,
               {"seed", "reps", "jobs", "method", "methods", "iterations", "step_size",
                "mc_samples", "inducing_mean", "inducing_cov", "grid_size", "grid_policy",
                "mode", "calibrate", "probit_scale", "kernel_mu", "kernel_eps",
                "auto_scale_eps_variance", "eb", "link", "cdf_draws", "decomposition_draws",
                "n_train", "n_per_base", "n_validation", "base_length_scales", "base_ridge",
                "eval_grid_size", "eval_grid_margin", "spline_candidates", "data", "bases",
                "model", "out"},
               "config");

  RunConfig cfg = default_run_config();
  auto get = [&](const char* key, auto& field) {
    if (root.contains(key)) field = root.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("seed", cfg.seed);
  get("reps", cfg.reps);
  get("jobs", cfg.jobs);
  if (root.contains("method")) cfg.methods = {root.at("method").get<std::string>()};
  if (root.contains("methods")) {
    cfg.methods = root.at("methods").get<std::vector<std::string>>();
  }
  for (const std::string& m : cfg.methods) {
    if (std::find(all_methods().begin(), all_methods().end(), m) == all_methods().end()) {
      throw ConfigError("unknown method '" + m + "'");
    }
  }
  get("iterations", cfg.fit.iterations);
  get("step_size", cfg.fit.step_size);
  get("mc_samples", cfg.fit.mc_samples);
  get("inducing_mean", cfg.fit.inducing_mean);
  get("inducing_cov", cfg.fit.inducing_cov);
  get("grid_size", cfg.fit.grid_size);
  if (root.contains("grid_policy")) {
    const std::string p = root.at("grid_policy").get<std::string>();
    if (p == "even_span") {
      cfg.fit.grid_policy = GridPolicy::even_span;
    } else if (p == "empirical_quantiles") {
      cfg.fit.grid_policy = GridPolicy::empirical_quantiles;
    } else {
      throw ConfigError("unknown grid_policy '" + p + "'");
    }
  }
  if (root.contains("mode")) {
    const std::string m = root.at("mode").get<std::string>();
    if (m == "kl_only") {
      cfg.fit.mode = DivergenceMode::KL_only;
    } else if (m == "kl_plus_cvm") {
      cfg.fit.mode = DivergenceMode::KL_plus_CvM;
    } else {
      throw ConfigError("unknown mode '" + m + "'");
    }
  }
  get("calibrate", cfg.fit.calibrate);
  get("probit_scale", cfg.fit.probit_scale);
  if (root.contains("kernel_mu")) {
    cfg.fit.kernel_mu = parse_kernel(root.at("kernel_mu"), cfg.fit.kernel_mu, "kernel_mu");
  }
  if (root.contains("kernel_eps")) {
    cfg.fit.kernel_eps = parse_kernel(root.at("kernel_eps"), cfg.fit.kernel_eps, "kernel_eps");
  }
  get("auto_scale_eps_variance", cfg.fit.auto_scale_eps_variance);
  if (root.contains("eb")) {
    const json& eb = root.at("eb");
    require_keys(eb, {"mu_grid", "eps_grid", "iterations", "enabled"}, "eb");
    if (eb.contains("mu_grid")) cfg.fit.eb.mu_grid = eb.at("mu_grid").get<std::vector<double>>();
    if (eb.contains("eps_grid")) cfg.fit.eb.eps_grid = eb.at("eps_grid").get<std::vector<double>>();
    if (eb.contains("iterations")) cfg.fit.eb.iterations = eb.at("iterations").get<int>();
    if (eb.contains("enabled")) cfg.fit.eb.enabled = eb.at("enabled").get<bool>();
  }
  if (root.contains("link")) {
    const json& link = root.at("link");
    require_keys(link,
                 {"inducing_count", "constraint_points", "anchor_weight", "length_scale",
                  "variance", "iterations", "step_size", "quad_order"},
                 "link");
    auto getl = [&](const char* key, auto& field) {
      if (link.contains(key)) field = link.at(key).get<std::decay_t<decltype(field)>>();
    };
    getl("inducing_count", cfg.fit.link.inducing_count);
    getl("constraint_points", cfg.fit.link.constraint_points);
    getl("anchor_weight", cfg.fit.link.anchor_weight);
    getl("length_scale", cfg.fit.link.length_scale);
    getl("variance", cfg.fit.link.variance);
    getl("iterations", cfg.fit.link.iterations);
    getl("step_size", cfg.fit.link.step_size);
    getl("quad_order", cfg.fit.link.quad_order);
  }
  get("cdf_draws", cfg.fit.cdf_draws);
  get("decomposition_draws", cfg.fit.decomposition_draws);
  get("n_train", cfg.n_train);
  get("n_per_base", cfg.n_per_base);
  get("n_validation", cfg.n_validation);
  get("base_length_scales", cfg.base_length_scales);
  get("base_ridge", cfg.base_ridge);
  get("eval_grid_size", cfg.eval_grid_size);
  get("eval_grid_margin", cfg.eval_grid_margin);
  get("spline_candidates", cfg.spline_candidates);
  get("data", cfg.data_path);
  get("bases", cfg.bases_path);
  get("model", cfg.model_path);
  get("out", cfg.out_dir);
  check_path(cfg.data_path, "data");
  check_path(cfg.bases_path, "bases");
  check_path(cfg.model_path, "model");
  validate_config(cfg.fit);
  if (cfg.reps < 1) throw ConfigError("reps must be >= 1");
  if (cfg.jobs < 1) throw ConfigError("jobs must be >= 1");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

}  // namespace calens
