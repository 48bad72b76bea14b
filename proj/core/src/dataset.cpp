#include "calens/dataset.hpp"

#include <cmath>
#include <sstream>

#include "calens/errors.hpp"
#include "calens/math.hpp"
#include "calens/rng.hpp"

namespace calens {

void validate_dataset(const Dataset& ds) {
  if (ds.size() == 0) throw InputError("dataset: empty");
  if (ds.dim() < 1 || ds.dim() > 2) throw InputError("dataset: input dimension must be 1 or 2");
  if (ds.targets.size() != ds.size() && ds.targets.size() != 0) {
    throw InputError("dataset: target rows disagree with inputs");
  }
  if (!ds.inputs.allFinite() || !ds.targets.allFinite()) {
    throw InputError("dataset: non-finite values");
  }
  if (ds.base_predictions) {
    if (ds.base_predictions->rows() != ds.size()) {
      throw InputError("dataset: base prediction rows disagree with inputs");
    }
    if (!ds.base_predictions->allFinite()) throw InputError("dataset: non-finite predictions");
    if (ds.base_names.size() != static_cast<size_t>(ds.base_predictions->cols())) {
      throw InputError("dataset: base names disagree with prediction columns");
    }
  }
}

double synth_1d_truth(double x) {
  double f = x + std::sin(4.0 * x) + std::sin(13.0 * x);
  if (x > 0.1 && x < 0.6) f += 0.5 * std::sin(40.0 * x);
  return f;
}

namespace {

Dataset synth_1d_impl(int n, std::uint64_t seed, bool additive_noise, bool even_grid) {
  if (n < 1) throw InputError("synth_1d: n must be >= 1");
  Dataset ds;
  ds.inputs.resize(n, 1);
  ds.targets.resize(n);
  Rng rng = Rng::derive(seed, even_grid ? 0x1D6 : 0x1D);
  for (int i = 0; i < n; ++i) {
    const double x = even_grid ? (i + 0.5) / n : rng.uniform01();
    const double e = 0.1 * rng.normal();
    ds.inputs(i, 0) = x;
    ds.targets[i] = additive_noise ? synth_1d_truth(x) + e : synth_1d_truth(x + e);
  }
  std::ostringstream os;
  os << (even_grid ? "synth1d_grid" : "synth1d") << "(n=" << n
     << (additive_noise ? ",additive" : "") << ")";
  ds.generator = os.str();
  ds.seed = seed;
  return ds;
}

// Random-feature field whose covariance approximates the RBF kernel
// exp(-||d||^2 / l) in 2-D.
struct FeatureField {
  Eigen::MatrixXd omega;  // R x 2
  Eigen::VectorXd phase;  // R
  Eigen::VectorXd amp;    // R
  double scale = 0.0;

  static FeatureField make(double length_scale, int features, Rng& rng) {
    FeatureField f;
    f.omega.resize(features, 2);
    f.phase.resize(features);
    f.amp.resize(features);
    const double sd = std::sqrt(2.0 / length_scale);
    for (int r = 0; r < features; ++r) {
      f.omega(r, 0) = sd * rng.normal();
      f.omega(r, 1) = sd * rng.normal();
      f.phase[r] = rng.uniform(0.0, 2.0 * kPi);
      f.amp[r] = rng.normal();
    }
    f.scale = std::sqrt(2.0 / features);
    return f;
  }

  double eval(double x1, double x2) const {
    double acc = 0.0;
    for (Eigen::Index r = 0; r < omega.rows(); ++r) {
      acc += amp[r] * std::cos(omega(r, 0) * x1 + omega(r, 1) * x2 + phase[r]);
    }
    return scale * acc;
  }
};

struct SpatialScenario {
  FeatureField truth_field;
  int n_models = 0;
  double bias_amp = 0.0;

  static SpatialScenario make(int n_models, std::uint64_t seed) {
    SpatialScenario s;
    Rng rng = Rng::derive(seed, 0x2D);
    s.truth_field = FeatureField::make(0.3, 256, rng);
    s.n_models = n_models;
    s.bias_amp = n_models > 1 ? 0.8 : 0.0;
    return s;
  }

  double truth(double x1, double x2) const {
    return truth_field.eval(x1, x2) + 0.3 * std::tanh(8.0 * (x1 - 0.5)) * std::tanh(8.0 * (x2 - 0.5));
  }

  // Bias fields vanish on x1 + x2 <= 1 (the lower-left region) and fan out
  // with model-specific oscillation beyond it, so the models agree near the
  // origin quadrant and disagree toward the opposite corner.
  double bias(int model, double x1, double x2) const {
    const double ramp = std::max(0.0, x1 + x2 - 1.0);
    if (ramp == 0.0 || bias_amp == 0.0) return 0.0;
    const double omega = 3.0 + 2.0 * model;
    const double psi = 2.0 * kPi * model / std::max(1, n_models);
    return bias_amp * ramp * std::cos(omega * (x1 - x2) + psi);
  }
};

}  // namespace

Dataset synth_1d(int n, std::uint64_t seed, bool additive_noise) {
  return synth_1d_impl(n, seed, additive_noise, /*even_grid=*/false);
}

Dataset synth_1d_grid(int n, std::uint64_t seed, bool additive_noise) {
  return synth_1d_impl(n, seed, additive_noise, /*even_grid=*/true);
}

SpatialFields synth_spatial_fields(const Eigen::Ref<const Eigen::MatrixXd>& locations,
                                   int n_models, std::uint64_t seed) {
  if (locations.cols() != 2) throw InputError("synth_spatial_fields: locations must be 2-D");
  if (n_models < 1) throw InputError("synth_spatial_fields: n_models must be >= 1");
  const SpatialScenario scenario = SpatialScenario::make(n_models, seed);
  SpatialFields out;
  out.truth.resize(locations.rows());
  out.base_predictions.resize(locations.rows(), n_models);
  for (Eigen::Index i = 0; i < locations.rows(); ++i) {
    const double t = scenario.truth(locations(i, 0), locations(i, 1));
    out.truth[i] = t;
    for (int k = 0; k < n_models; ++k) {
      out.base_predictions(i, k) = t + scenario.bias(k, locations(i, 0), locations(i, 1));
    }
  }
  return out;
}

Dataset synth_spatial(int n_sites, int n_models, std::uint64_t seed) {
  if (n_sites < 5) throw InputError("synth_spatial: n_sites must be >= 5");
  if (n_models < 1) throw InputError("synth_spatial: n_models must be >= 1");
  Dataset ds;
  ds.inputs.resize(n_sites, 2);
  Rng rng = Rng::derive(seed, 0x51735);
  for (int i = 0; i < n_sites; ++i) {
    ds.inputs(i, 0) = rng.uniform01();
    ds.inputs(i, 1) = rng.uniform01();
  }
  const SpatialFields fields = synth_spatial_fields(ds.inputs, n_models, seed);
  ds.targets.resize(n_sites);
  Rng noise = Rng::derive(seed, 0x4015E);
  for (int i = 0; i < n_sites; ++i) ds.targets[i] = fields.truth[i] + 0.1 * noise.normal();
  ds.base_predictions = fields.base_predictions;
  for (int k = 0; k < n_models; ++k) ds.base_names.push_back("m" + std::to_string(k + 1));
  std::ostringstream os;
  os << "synthspatial(sites=" << n_sites << ",models=" << n_models << ")";
  ds.generator = os.str();
  ds.seed = seed;
  return ds;
}

}  // namespace calens
