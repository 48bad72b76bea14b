#include "calens/snapshot.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "calens/errors.hpp"

namespace calens {

namespace {

using nlohmann::json;

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array()) throw ParseError("snapshot: expected matrix");
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Eigen::MatrixXd(0, 0);
  const Eigen::Index cols = static_cast<Eigen::Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j.at(i).size()) != cols) {
      throw ParseError("snapshot: ragged matrix");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j.at(i).at(c).get<double>();
  }
  return m;
}

json vector_to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j.at(i).get<double>();
  return v;
}

json kernel_to_json(const KernelSpec& k) {
  json out;
  out["family"] = k.family == KernelFamily::RBF ? "rbf" : "ou";
  out["length_scale"] = k.length_scale;
  out["variance"] = k.variance;
  return out;
}

KernelSpec kernel_from_json(const json& j) {
  KernelSpec k;
  const std::string fam = j.at("family").get<std::string>();
  if (fam == "rbf") {
    k.family = KernelFamily::RBF;
  } else if (fam == "ou") {
    k.family = KernelFamily::OU;
  } else {
    throw ParseError("snapshot: unknown kernel family '" + fam + "'");
  }
  k.length_scale = j.at("length_scale").get<double>();
  k.variance = j.at("variance").get<double>();
  return k;
}

json dgp_to_json(const DgpFactor& f) {
  json out;
  out["mean_inducing"] = matrix_to_json(f.mean_inducing);
  out["mean_params"] = vector_to_json(f.mean_params);
  out["cov_inducing"] = matrix_to_json(f.cov_inducing);
  out["cov_chol"] = matrix_to_json(f.cov_chol);
  out["kernel"] = kernel_to_json(f.kernel);
  return out;
}

DgpFactor dgp_from_json(const json& j) {
  DgpFactor f;
  f.mean_inducing = matrix_from_json(j.at("mean_inducing"));
  f.mean_params = vector_from_json(j.at("mean_params"));
  f.cov_inducing = matrix_from_json(j.at("cov_inducing"));
  f.cov_chol = matrix_from_json(j.at("cov_chol"));
  f.kernel = kernel_from_json(j.at("kernel"));
  return f;
}

json lognormal_to_json(const LogNormalFactor& f) {
  return json{{"location", f.location}, {"scale", f.scale}};
}

LogNormalFactor lognormal_from_json(const json& j) {
  return LogNormalFactor{j.at("location").get<double>(), j.at("scale").get<double>()};
}

}  // namespace

void save_snapshot(const ModelSnapshot& snapshot, const std::string& path) {
  json root;
  root["format_version"] = ModelSnapshot::kFormatVersion;
  root["kind"] = "calens_model";
  root["mode"] = snapshot.mode == DivergenceMode::KL_plus_CvM ? "kl_plus_cvm" : "kl_only";
  root["cdf_draws"] = snapshot.cdf_draws;
  root["y_grid"] = vector_to_json(snapshot.y_grid);
  root["base_names"] = snapshot.base_names;

  json ens;
  ens["kernel_mu"] = kernel_to_json(snapshot.ensemble.kernel_mu);
  ens["kernel_eps"] = kernel_to_json(snapshot.ensemble.kernel_eps);
  ens["temperature"] = lognormal_to_json(snapshot.ensemble.temperature);
  ens["noise_sd"] = lognormal_to_json(snapshot.ensemble.noise_sd);
  ens["residual_gp"] = dgp_to_json(snapshot.ensemble.residual_gp);
  json wgps = json::array();
  for (const DgpFactor& f : snapshot.ensemble.weight_gps) wgps.push_back(dgp_to_json(f));
  ens["weight_gps"] = std::move(wgps);
  root["ensemble"] = std::move(ens);

  json link;
  link["identity"] = snapshot.link.identity;
  link["probit_scale"] = snapshot.link.probit_scale;
  if (!snapshot.link.identity) {
    link["kernel"] = kernel_to_json(snapshot.link.kernel);
    link["constraint_grid"] = vector_to_json(snapshot.link.constraint_grid);
    json vf;
    vf["inducing"] = matrix_to_json(snapshot.link.value_factor.inducing);
    vf["mean_params"] = vector_to_json(snapshot.link.value_factor.mean_params);
    vf["cov_chol"] = matrix_to_json(snapshot.link.value_factor.cov_chol);
    vf["kernel"] = kernel_to_json(snapshot.link.value_factor.kernel);
    link["value_factor"] = std::move(vf);
    link["derivative_mean"] = vector_to_json(snapshot.link.derivative_stats.mean);
    link["derivative_cov"] = matrix_to_json(snapshot.link.derivative_stats.covariance);
  }
  root["link"] = std::move(link);

  json bases = json::array();
  for (const KernelRidgeModel& m : snapshot.base_models) {
    json b;
    b["name"] = m.name;
    b["kernel"] = kernel_to_json(m.kernel);
    b["train_inputs"] = matrix_to_json(m.train_inputs);
    b["alpha"] = vector_to_json(m.alpha);
    bases.push_back(std::move(b));
  }
  root["base_models"] = std::move(bases);

  std::ofstream out(path);
  if (!out) throw IoError("cannot write snapshot '" + path + "'");
  out << root.dump(1) << "\n";
}

ModelSnapshot load_snapshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open snapshot '" + path + "'");
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("snapshot is not valid JSON: ") + e.what());
  }
  if (!root.contains("format_version")) {
    throw ParseError("snapshot: missing format_version");
  }
  const int version = root.at("format_version").get<int>();
  if (version != ModelSnapshot::kFormatVersion) {
    throw ParseError("snapshot: unsupported format_version " + std::to_string(version));
  }
  if (root.value("kind", std::string()) != "calens_model") {
    throw ParseError("snapshot: not a calens model file");
  }

  ModelSnapshot s;
  s.mode = root.value("mode", std::string("kl_plus_cvm")) == "kl_only"
               ? DivergenceMode::KL_only
               : DivergenceMode::KL_plus_CvM;
  s.cdf_draws = root.value("cdf_draws", 1024);
  s.y_grid = vector_from_json(root.at("y_grid"));
  s.base_names = root.at("base_names").get<std::vector<std::string>>();

  const json& ens = root.at("ensemble");
  s.ensemble.kernel_mu = kernel_from_json(ens.at("kernel_mu"));
  s.ensemble.kernel_eps = kernel_from_json(ens.at("kernel_eps"));
  s.ensemble.temperature = lognormal_from_json(ens.at("temperature"));
  s.ensemble.noise_sd = lognormal_from_json(ens.at("noise_sd"));
  s.ensemble.residual_gp = dgp_from_json(ens.at("residual_gp"));
  for (const json& f : ens.at("weight_gps")) s.ensemble.weight_gps.push_back(dgp_from_json(f));

  const json& link = root.at("link");
  s.link.identity = link.at("identity").get<bool>();
  s.link.probit_scale = link.at("probit_scale").get<double>();
  if (!s.link.identity) {
    s.link.kernel = kernel_from_json(link.at("kernel"));
    s.link.constraint_grid = vector_from_json(link.at("constraint_grid"));
    const json& vf = link.at("value_factor");
    s.link.value_factor.inducing = matrix_from_json(vf.at("inducing"));
    s.link.value_factor.mean_params = vector_from_json(vf.at("mean_params"));
    s.link.value_factor.cov_chol = matrix_from_json(vf.at("cov_chol"));
    s.link.value_factor.kernel = kernel_from_json(vf.at("kernel"));
    s.link.derivative_stats.mean = vector_from_json(link.at("derivative_mean"));
    s.link.derivative_stats.covariance = matrix_from_json(link.at("derivative_cov"));
  } else {
    s.link = LinkPosterior::make_identity();
    s.link.probit_scale = link.at("probit_scale").get<double>();
  }

  for (const json& b : root.at("base_models")) {
    KernelRidgeModel m;
    m.name = b.at("name").get<std::string>();
    m.kernel = kernel_from_json(b.at("kernel"));
    m.train_inputs = matrix_from_json(b.at("train_inputs"));
    m.alpha = vector_from_json(b.at("alpha"));
    s.base_models.push_back(std::move(m));
  }
  return s;
}

}  // namespace calens
