#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "calens/ensemble.hpp"
#include "calens/kernel.hpp"

namespace calens {

// Kernel ridge regressor; the base learners of the benchmark protocol.
struct KernelRidgeModel {
  std::string name;
  KernelSpec kernel;
  Eigen::MatrixXd train_inputs;
  Eigen::VectorXd alpha;  // (K + ridge I)^-1 y

  double predict_one(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  Eigen::VectorXd predict(const Eigen::Ref<const Eigen::MatrixXd>& x) const;
};

// One RBF kernel ridge model per length-scale. `training_sets` holds either
// one (x, y) pair shared by all models or one per length-scale.
struct TrainingSet {
  Eigen::MatrixXd inputs;
  Eigen::VectorXd targets;
};
std::vector<KernelRidgeModel> fit_base_models(const std::vector<TrainingSet>& training_sets,
                                              const std::vector<double>& length_scales,
                                              double ridge);

BaseModelSet tabulate(const std::vector<KernelRidgeModel>& models,
                      const Eigen::Ref<const Eigen::MatrixXd>& x);

Eigen::VectorXd avg_ensemble(const Eigen::Ref<const Eigen::MatrixXd>& preds);

struct StackWeights {
  Eigen::VectorXd weights;
  double intercept = 0.0;
  bool constrained = false;
  double residual_variance = 0.0;

  Eigen::VectorXd predict(const Eigen::Ref<const Eigen::MatrixXd>& preds) const {
    return (preds * weights).array() + intercept;
  }
};

// Simplex-constrained least squares on out-of-fold predictions (the bases
// are pre-trained on separate data, so every row is out-of-fold) by
// projected gradient from the uniform start.
StackWeights cv_stack(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                      const Eigen::Ref<const Eigen::VectorXd>& y, int folds,
                      std::uint64_t seed = 0);

// Ordinary least squares with intercept; ridge 1e-8 fallback on rank
// deficiency. Residual variance is the unbiased estimate.
StackWeights lnr_stack(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                       const Eigen::Ref<const Eigen::VectorXd>& y);

// Clamped cubic B-spline basis on [lo, hi] with evenly spaced interior knots.
struct BSplineBasis {
  Eigen::VectorXd knots;  // full clamped sequence
  int degree = 3;
  double lo = 0.0, hi = 1.0;

  static BSplineBasis make(double lo, double hi, int interior_knots, int degree = 3);
  Eigen::Index size() const;
  Eigen::MatrixXd eval(const Eigen::Ref<const Eigen::VectorXd>& x) const;  // inputs clamped to [lo,hi]
};

struct SplineModel {
  BSplineBasis basis;
  Eigen::VectorXd coefficients;
  double penalty = 0.0;
  double offset = 0.0;  // centering constant

  Eigen::VectorXd eval(const Eigen::Ref<const Eigen::VectorXd>& x) const;
};

struct SplineHyperGrid {
  int candidates = 1000;
  int knots_min = 4;
  int knots_max = 20;
  double log10_penalty_min = -6.0;
  double log10_penalty_max = 2.0;
  int cv_folds = 5;
  std::uint64_t seed = 0;
};

// Additive penalized B-spline regression in each base prediction, with
// hyperparameters (interior knots, penalty) picked by seeded random search
// over the grid, scored by k-fold cross-validation.
struct NlrStackModel {
  double intercept = 0.0;
  std::vector<SplineModel> components;  // one per base model
  double residual_variance = 0.0;
  int interior_knots = 0;
  double penalty = 0.0;

  Eigen::VectorXd predict(const Eigen::Ref<const Eigen::MatrixXd>& preds) const;
};
NlrStackModel nlr_stack(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                        const Eigen::Ref<const Eigen::VectorXd>& y, const SplineHyperGrid& grid);

// Linear stack plus a smoothing spline in the input, fit by backfitting
// (<= 50 cycles, coefficient tolerance 1e-8).
struct GamModel {
  StackWeights linear;
  SplineModel spline;
  bool converged = false;
  double residual_variance = 0.0;

  Eigen::VectorXd predict(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                          const Eigen::Ref<const Eigen::VectorXd>& x) const;
};
GamModel gam_ensemble(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                      const Eigen::Ref<const Eigen::VectorXd>& x,
                      const Eigen::Ref<const Eigen::VectorXd>& y, const SplineHyperGrid& grid);

}  // namespace calens
