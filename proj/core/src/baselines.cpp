#include "calens/baselines.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "calens/errors.hpp"
#include "calens/rng.hpp"

namespace calens {

namespace {

std::string scale_name(double l) {
  std::ostringstream os;
  os << "krr_l" << l;
  return os.str();
}

Eigen::VectorXd project_simplex(Eigen::VectorXd v) {
  const Eigen::Index n = v.size();
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0, theta = 0.0;
  int rho = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    css += u[i];
    const double t = (css - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) {
      rho = static_cast<int>(i + 1);
      theta = t;
    }
  }
  (void)rho;
  Eigen::VectorXd w = (v.array() - theta).cwiseMax(0.0);
  const double s = w.sum();
  if (s > 0.0) w /= s;
  return w;
}

// Second-difference penalty D^T D for a coefficient block of size p.
Eigen::MatrixXd second_diff_penalty(Eigen::Index p) {
  if (p < 3) return Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(p - 2, p);
  for (Eigen::Index i = 0; i < p - 2; ++i) {
    d(i, i) = 1.0;
    d(i, i + 1) = -2.0;
    d(i, i + 2) = 1.0;
  }
  return d.transpose() * d;
}

std::vector<int> fold_assignment(Eigen::Index n, int folds, std::uint64_t seed) {
  std::vector<int> assign(n);
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng rng = Rng::derive(seed, 0xF01D);
  for (Eigen::Index i = n - 1; i > 0; --i) {
    const Eigen::Index j = rng.uniform_int(static_cast<int>(i + 1));
    std::swap(order[i], order[j]);
  }
  for (Eigen::Index i = 0; i < n; ++i) assign[order[i]] = static_cast<int>(i % folds);
  return assign;
}

}  // namespace

double KernelRidgeModel::predict_one(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < train_inputs.rows(); ++i) {
    acc += alpha[i] * kernel_eval(kernel, x, train_inputs.row(i).transpose());
  }
  return acc;
}

Eigen::VectorXd KernelRidgeModel::predict(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
  return cross_gram(kernel, x, train_inputs) * alpha;
}

std::vector<KernelRidgeModel> fit_base_models(const std::vector<TrainingSet>& training_sets,
                                              const std::vector<double>& length_scales,
                                              double ridge) {
  if (length_scales.empty()) throw InputError("fit_base_models: no length-scales given");
  if (training_sets.size() != 1 && training_sets.size() != length_scales.size()) {
    throw InputError("fit_base_models: provide one training set, or one per model");
  }
  if (ridge < 0.0) throw InputError("fit_base_models: ridge must be >= 0");
  std::vector<KernelRidgeModel> models;
  models.reserve(length_scales.size());
  for (size_t k = 0; k < length_scales.size(); ++k) {
    const TrainingSet& ts = training_sets.size() == 1 ? training_sets.front() : training_sets[k];
    if (ts.inputs.rows() != ts.targets.size() || ts.inputs.rows() == 0) {
      throw InputError("fit_base_models: bad training set shapes");
    }
    KernelRidgeModel m;
    m.kernel = KernelSpec{KernelFamily::RBF, length_scales[k], 1.0, std::nullopt};
    m.name = scale_name(length_scales[k]);
    m.train_inputs = ts.inputs;
    // The ridge doubles as the jitter start; gram escalates it on failure.
    const GramMatrix gm = gram(m.kernel, ts.inputs, ridge);
    m.alpha = gm.solve(ts.targets);
    models.push_back(std::move(m));
  }
  return models;
}

BaseModelSet tabulate(const std::vector<KernelRidgeModel>& models,
                      const Eigen::Ref<const Eigen::MatrixXd>& x) {
  if (models.empty()) throw InputError("tabulate: no models");
  BaseModelSet out;
  out.locations = x;
  out.predictions.resize(x.rows(), static_cast<Eigen::Index>(models.size()));
  for (size_t k = 0; k < models.size(); ++k) {
    out.predictions.col(static_cast<Eigen::Index>(k)) = models[k].predict(x);
    out.names.push_back(models[k].name);
  }
  validate_base_models(out);
  return out;
}

Eigen::VectorXd avg_ensemble(const Eigen::Ref<const Eigen::MatrixXd>& preds) {
  if (preds.cols() == 0) throw InputError("avg_ensemble: no models");
  return preds.rowwise().mean();
}

StackWeights cv_stack(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                      const Eigen::Ref<const Eigen::VectorXd>& y, int folds, std::uint64_t seed) {
  const Eigen::Index n = preds.rows();
  const Eigen::Index k = preds.cols();
  if (n != y.size() || n == 0 || k == 0) throw InputError("cv_stack: bad shapes");
  if (folds < 2) throw InputError("cv_stack: folds must be >= 2");
  if (n < folds) throw InputError("cv_stack: degenerate fold (fewer rows than folds)");
  const std::vector<int> assign = fold_assignment(n, folds, seed);
  std::vector<int> counts(folds, 0);
  for (int a : assign) ++counts[a];
  for (int c : counts) {
    if (c == 0) throw InputError("cv_stack: degenerate fold (empty)");
  }

  // The bases are fixed predictors trained elsewhere, so the combined
  // out-of-fold squared error is || y - P w ||^2 over all rows for any fold
  // split; minimize it on the simplex by projected gradient.
  const Eigen::MatrixXd ptp = preds.transpose() * preds;
  const Eigen::VectorXd pty = preds.transpose() * y;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ptp);
  const double lip = 2.0 * std::max(eig.eigenvalues().maxCoeff(), 1e-12);
  const double step = 1.0 / lip;

  Eigen::VectorXd w = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
  for (int it = 0; it < 2000; ++it) {
    const Eigen::VectorXd grad = 2.0 * (ptp * w - pty);
    w = project_simplex(w - step * grad);
  }
  StackWeights out;
  out.weights = w;
  out.intercept = 0.0;
  out.constrained = true;
  const Eigen::VectorXd resid = y - preds * w;
  out.residual_variance = resid.squaredNorm() / std::max<double>(static_cast<double>(n - k), 1.0);
  return out;
}

StackWeights lnr_stack(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                       const Eigen::Ref<const Eigen::VectorXd>& y) {
  const Eigen::Index n = preds.rows();
  const Eigen::Index k = preds.cols();
  if (n != y.size() || n == 0 || k == 0) throw InputError("lnr_stack: bad shapes");
  if (n <= k + 1) throw InputError("lnr_stack: needs more rows than models plus intercept");
  Eigen::MatrixXd x(n, k + 1);
  x.col(0).setOnes();
  x.rightCols(k) = preds;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  Eigen::VectorXd beta;
  if (qr.rank() < k + 1) {
    Eigen::MatrixXd xtx = x.transpose() * x;
    xtx.diagonal().array() += 1e-8;
    beta = xtx.ldlt().solve(x.transpose() * y);
  } else {
    beta = qr.solve(y);
  }
  StackWeights out;
  out.intercept = beta[0];
  out.weights = beta.tail(k);
  out.constrained = false;
  const Eigen::VectorXd resid = y - x * beta;
  out.residual_variance =
      resid.squaredNorm() / std::max<double>(static_cast<double>(n - k - 1), 1.0);
  return out;
}

BSplineBasis BSplineBasis::make(double lo, double hi, int interior_knots, int degree) {
  if (!(hi > lo)) {
    hi = lo + 1.0;  // degenerate feature range; any constant basis will do
  }
  if (interior_knots < 0 || degree < 1) throw InputError("BSplineBasis: bad parameters");
  BSplineBasis b;
  b.degree = degree;
  b.lo = lo;
  b.hi = hi;
  const int total = interior_knots + 2 * (degree + 1);
  b.knots.resize(total);
  for (int i = 0; i <= degree; ++i) b.knots[i] = lo;
  for (int i = 0; i < interior_knots; ++i) {
    b.knots[degree + 1 + i] = lo + (hi - lo) * (i + 1) / (interior_knots + 1);
  }
  for (int i = 0; i <= degree; ++i) b.knots[total - 1 - i] = hi;
  return b;
}

Eigen::Index BSplineBasis::size() const { return knots.size() - degree - 1; }

Eigen::MatrixXd BSplineBasis::eval(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const Eigen::Index nb = size();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.size(), nb);
  for (Eigen::Index r = 0; r < x.size(); ++r) {
    double t = std::clamp(x[r], lo, hi);
    // Cox-de Boor; the right endpoint belongs to the last span.
    Eigen::VectorXd n0 = Eigen::VectorXd::Zero(knots.size() - 1);
    for (Eigen::Index i = 0; i + 1 < knots.size(); ++i) {
      const bool last_span = knots[i] < knots[i + 1] && t == hi && knots[i + 1] == hi;
      if ((t >= knots[i] && t < knots[i + 1]) || last_span) n0[i] = 1.0;
    }
    Eigen::VectorXd prev = n0;
    for (int d = 1; d <= degree; ++d) {
      Eigen::VectorXd cur = Eigen::VectorXd::Zero(knots.size() - 1 - d);
      for (Eigen::Index i = 0; i + d + 1 < knots.size(); ++i) {
        double left = 0.0, right = 0.0;
        const double den_l = knots[i + d] - knots[i];
        const double den_r = knots[i + d + 1] - knots[i + 1];
        if (den_l > 0.0) left = (t - knots[i]) / den_l * prev[i];
        if (den_r > 0.0) right = (knots[i + d + 1] - t) / den_r * prev[i + 1];
        cur[i] = left + right;
      }
      prev = cur;
    }
    out.row(r) = prev.head(nb).transpose();
  }
  return out;
}

Eigen::VectorXd SplineModel::eval(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  return (basis.eval(x) * coefficients).array() - offset;
}

Eigen::VectorXd NlrStackModel::predict(const Eigen::Ref<const Eigen::MatrixXd>& preds) const {
  Eigen::VectorXd out = Eigen::VectorXd::Constant(preds.rows(), intercept);
  for (size_t k = 0; k < components.size(); ++k) {
    out += components[k].eval(preds.col(static_cast<Eigen::Index>(k)));
  }
  return out;
}

namespace {

struct AdditiveDesign {
  Eigen::MatrixXd x;        // [1 | B_1 | ... | B_K]
  Eigen::MatrixXd penalty;  // block-diagonal D^T D (zero row/col for intercept)
  std::vector<BSplineBasis> bases;
  std::vector<Eigen::Index> offsets;
};

AdditiveDesign additive_design(const Eigen::MatrixXd& feats, int interior_knots) {
  AdditiveDesign d;
  const Eigen::Index k = feats.cols();
  d.bases.reserve(k);
  Eigen::Index p = 1;
  for (Eigen::Index c = 0; c < k; ++c) {
    const double lo = feats.col(c).minCoeff();
    const double hi = feats.col(c).maxCoeff();
    d.bases.push_back(BSplineBasis::make(lo, hi, interior_knots));
    d.offsets.push_back(p);
    p += d.bases.back().size();
  }
  d.x = Eigen::MatrixXd::Zero(feats.rows(), p);
  d.x.col(0).setOnes();
  d.penalty = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index c = 0; c < k; ++c) {
    const Eigen::Index nb = d.bases[c].size();
    d.x.block(0, d.offsets[c], feats.rows(), nb) = d.bases[c].eval(feats.col(c));
    d.penalty.block(d.offsets[c], d.offsets[c], nb, nb) = second_diff_penalty(nb);
  }
  return d;
}

Eigen::VectorXd solve_penalized(const Eigen::MatrixXd& xtx, const Eigen::VectorXd& xty,
                                const Eigen::MatrixXd& penalty, double lambda) {
  Eigen::MatrixXd lhs = xtx + lambda * penalty;
  lhs.diagonal().array() += 1e-8;
  return lhs.ldlt().solve(xty);
}

struct HyperCandidate {
  int knots;
  double penalty;
};

std::vector<HyperCandidate> draw_candidates(const SplineHyperGrid& grid) {
  Rng rng = Rng::derive(grid.seed, 0xCA4D);
  std::vector<HyperCandidate> out;
  out.reserve(grid.candidates);
  for (int c = 0; c < grid.candidates; ++c) {
    HyperCandidate h;
    h.knots = grid.knots_min + rng.uniform_int(grid.knots_max - grid.knots_min + 1);
    h.penalty = std::pow(10.0, rng.uniform(grid.log10_penalty_min, grid.log10_penalty_max));
    out.push_back(h);
  }
  return out;
}

}  // namespace

NlrStackModel nlr_stack(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                        const Eigen::Ref<const Eigen::VectorXd>& y, const SplineHyperGrid& grid) {
  const Eigen::Index n = preds.rows();
  if (n != y.size() || n < 10) throw InputError("nlr_stack: needs at least 10 rows");

  const std::vector<int> assign = fold_assignment(n, grid.cv_folds, grid.seed);
  const std::vector<HyperCandidate> cands = draw_candidates(grid);

  // Shared per-(knots, fold) normal equations; candidates only vary lambda.
  struct FoldSystem {
    Eigen::MatrixXd xtx;
    Eigen::VectorXd xty;
    std::vector<Eigen::Index> val_rows;
  };
  std::map<int, std::pair<AdditiveDesign, std::vector<FoldSystem>>> by_knots;
  for (const HyperCandidate& h : cands) {
    if (by_knots.count(h.knots)) continue;
    AdditiveDesign d = additive_design(preds, h.knots);
    std::vector<FoldSystem> systems(grid.cv_folds);
    for (int f = 0; f < grid.cv_folds; ++f) {
      std::vector<Eigen::Index> train, val;
      for (Eigen::Index i = 0; i < n; ++i) (assign[i] == f ? val : train).push_back(i);
      const Eigen::Index p = d.x.cols();
      FoldSystem fs;
      fs.xtx = Eigen::MatrixXd::Zero(p, p);
      fs.xty = Eigen::VectorXd::Zero(p);
      for (Eigen::Index i : train) {
        fs.xtx.noalias() += d.x.row(i).transpose() * d.x.row(i);
        fs.xty.noalias() += d.x.row(i).transpose() * y[i];
      }
      fs.val_rows = val;
      systems[f] = std::move(fs);
    }
    by_knots.emplace(h.knots, std::make_pair(std::move(d), std::move(systems)));
  }

  double best_err = std::numeric_limits<double>::infinity();
  HyperCandidate best{grid.knots_min, 1.0};
  for (const HyperCandidate& h : cands) {
    const auto& [design, systems] = by_knots.at(h.knots);
    double err = 0.0;
    for (const FoldSystem& fs : systems) {
      const Eigen::VectorXd beta = solve_penalized(fs.xtx, fs.xty, design.penalty, h.penalty);
      for (Eigen::Index i : fs.val_rows) {
        const double e = y[i] - design.x.row(i).dot(beta);
        err += e * e;
      }
    }
    if (err < best_err) {
      best_err = err;
      best = h;
    }
  }

  const AdditiveDesign& design = by_knots.at(best.knots).first;
  const Eigen::MatrixXd xtx = design.x.transpose() * design.x;
  const Eigen::VectorXd xty = design.x.transpose() * y;
  const Eigen::VectorXd beta = solve_penalized(xtx, xty, design.penalty, best.penalty);

  NlrStackModel model;
  model.intercept = beta[0];
  model.interior_knots = best.knots;
  model.penalty = best.penalty;
  for (size_t c = 0; c < design.bases.size(); ++c) {
    SplineModel s;
    s.basis = design.bases[c];
    s.coefficients = beta.segment(design.offsets[c], design.bases[c].size());
    s.penalty = best.penalty;
    model.components.push_back(std::move(s));
  }
  const Eigen::VectorXd fitted = design.x * beta;
  const Eigen::VectorXd resid = y - fitted;
  // Effective dof from the hat-matrix trace keeps the variance honest
  // despite the overcomplete basis.
  Eigen::MatrixXd lhs = xtx + best.penalty * design.penalty;
  lhs.diagonal().array() += 1e-8;
  const double edf = (lhs.ldlt().solve(xtx)).trace();
  model.residual_variance = resid.squaredNorm() / std::max(static_cast<double>(n) - edf, 1.0);
  return model;
}

Eigen::VectorXd GamModel::predict(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                                  const Eigen::Ref<const Eigen::VectorXd>& x) const {
  return linear.predict(preds) + spline.eval(x);
}

namespace {

struct GamFit {
  StackWeights linear;
  SplineModel spline;
  bool converged = false;
  Eigen::VectorXd fitted;
};

GamFit backfit_gam(const Eigen::MatrixXd& preds, const Eigen::VectorXd& x,
                   const Eigen::VectorXd& y, int interior_knots, double lambda, int max_cycles) {
  const Eigen::Index n = y.size();
  const Eigen::Index k = preds.cols();
  const BSplineBasis basis = BSplineBasis::make(x.minCoeff(), x.maxCoeff(), interior_knots);
  const Eigen::MatrixXd b = basis.eval(x);
  const Eigen::MatrixXd pen = second_diff_penalty(basis.size());
  const Eigen::MatrixXd btb = b.transpose() * b;

  Eigen::MatrixXd xd(n, k + 1);
  xd.col(0).setOnes();
  xd.rightCols(k) = preds;
  Eigen::MatrixXd xtx = xd.transpose() * xd;
  xtx.diagonal().array() += 1e-8;
  const Eigen::LDLT<Eigen::MatrixXd> lin_solver(xtx);

  Eigen::VectorXd s = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(k + 1);
  Eigen::VectorXd gamma = Eigen::VectorXd::Zero(basis.size());
  double spline_offset = 0.0;
  bool converged = false;
  for (int cycle = 0; cycle < max_cycles; ++cycle) {
    const Eigen::VectorXd beta_new = lin_solver.solve(xd.transpose() * (y - s));
    const Eigen::VectorXd partial = y - xd * beta_new;
    const Eigen::VectorXd gamma_new = solve_penalized(btb, b.transpose() * partial, pen, lambda);
    Eigen::VectorXd s_new = b * gamma_new;
    const double offset_new = s_new.mean();  // center the smooth term
    s_new.array() -= offset_new;
    const double delta = std::max((beta_new - beta).cwiseAbs().maxCoeff(),
                                  (gamma_new - gamma).cwiseAbs().maxCoeff());
    beta = beta_new;
    gamma = gamma_new;
    s = s_new;
    spline_offset = offset_new;
    if (delta < 1e-8) {
      converged = true;
      break;
    }
  }
  GamFit out;
  out.linear.intercept = beta[0];
  out.linear.weights = beta.tail(k);
  out.linear.constrained = false;
  out.spline.basis = basis;
  out.spline.coefficients = gamma;
  out.spline.penalty = lambda;
  out.spline.offset = spline_offset;
  out.converged = converged;
  out.fitted = xd * beta + s;
  return out;
}

}  // namespace

GamModel gam_ensemble(const Eigen::Ref<const Eigen::MatrixXd>& preds,
                      const Eigen::Ref<const Eigen::VectorXd>& x,
                      const Eigen::Ref<const Eigen::VectorXd>& y, const SplineHyperGrid& grid) {
  const Eigen::Index n = y.size();
  const Eigen::Index k = preds.cols();
  if (preds.rows() != n || x.size() != n) throw InputError("gam_ensemble: bad shapes");
  if (n <= k + 1) throw InputError("gam_ensemble: needs more rows than models plus intercept");

  const std::vector<int> assign = fold_assignment(n, grid.cv_folds, grid.seed);
  const std::vector<HyperCandidate> cands = draw_candidates(grid);

  double best_err = std::numeric_limits<double>::infinity();
  HyperCandidate best{grid.knots_min, 1.0};
  for (const HyperCandidate& h : cands) {
    double err = 0.0;
    for (int f = 0; f < grid.cv_folds; ++f) {
      std::vector<Eigen::Index> train, val;
      for (Eigen::Index i = 0; i < n; ++i) (assign[i] == f ? val : train).push_back(i);
      if (train.size() <= static_cast<size_t>(k + 1) || val.empty()) continue;
      Eigen::MatrixXd pt(train.size(), k);
      Eigen::VectorXd xt(train.size()), yt(train.size());
      for (size_t i = 0; i < train.size(); ++i) {
        pt.row(static_cast<Eigen::Index>(i)) = preds.row(train[i]);
        xt[static_cast<Eigen::Index>(i)] = x[train[i]];
        yt[static_cast<Eigen::Index>(i)] = y[train[i]];
      }
      const GamFit fit = backfit_gam(pt, xt, yt, h.knots, h.penalty, 25);
      GamModel tmp{fit.linear, fit.spline, fit.converged, 0.0};
      for (Eigen::Index i : val) {
        Eigen::MatrixXd pv = preds.row(i);
        Eigen::VectorXd xv(1);
        xv[0] = x[i];
        const double e = y[i] - tmp.predict(pv, xv)[0];
        err += e * e;
      }
    }
    if (err < best_err) {
      best_err = err;
      best = h;
    }
  }

  const GamFit fit = backfit_gam(preds, x, y, best.knots, best.penalty, 50);
  GamModel out;
  out.linear = fit.linear;
  out.spline = fit.spline;
  out.converged = fit.converged;
  const Eigen::VectorXd resid = y - fit.fitted;
  out.residual_variance =
      resid.squaredNorm() / std::max<double>(static_cast<double>(n - k - 2), 1.0);
  out.linear.residual_variance = out.residual_variance;
  return out;
}

}  // namespace calens
