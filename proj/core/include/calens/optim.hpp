#pragma once

#include <Eigen/Dense>
#include <cmath>

namespace calens {

// Adam with the usual bias correction. Parameters live in a flat vector the
// caller owns; step() applies one update in place.
class Adam {
 public:
  Adam(Eigen::Index dim, double step_size, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8)
      : step_size_(step_size),
        beta1_(beta1),
        beta2_(beta2),
        epsilon_(epsilon),
        m_(Eigen::VectorXd::Zero(dim)),
        v_(Eigen::VectorXd::Zero(dim)) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    params -= (step_size_ / c1) *
              (m_.array() / ((v_.array() / c2).sqrt() + epsilon_)).matrix();
  }

  void set_step_size(double s) { step_size_ = s; }
  double step_size() const { return step_size_; }

 private:
  double step_size_, beta1_, beta2_, epsilon_;
  long t_ = 0;
  Eigen::VectorXd m_, v_;
};

}  // namespace calens
