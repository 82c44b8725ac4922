#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "lfme/autodiff.hpp"
#include "lfme/method.hpp"

namespace lfme {

/// SGD with momentum 0.9, or Adam(0.9, 0.999, 1e-8). Weight decay is the
/// classical coupled L2 term: wd * theta is added to the gradient.
class Optimizer {
 public:
  Optimizer(std::vector<Parameter*> params, OptimizerKind kind, double lr, double weight_decay)
      : params_(std::move(params)), kind_(kind), lr_(lr), weight_decay_(weight_decay) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      if (kind_ == OptimizerKind::Adam) v_.emplace_back(p->value.size(), 0.0);
    }
  }

  static constexpr double kMomentum = 0.9;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& theta = params_[i]->value.values();
      const auto& grad = params_[i]->grad;
      auto& m = m_[i];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        const double g = grad[j] + weight_decay_ * theta[j];
        if (kind_ == OptimizerKind::Sgd) {
          m[j] = kMomentum * m[j] + g;
          theta[j] -= lr_ * m[j];
        } else {
          auto& v = v_[i];
          m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g;
          v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g * g;
          theta[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kEps);
        }
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  OptimizerKind kind_;
  double lr_;
  double weight_decay_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace lfme
