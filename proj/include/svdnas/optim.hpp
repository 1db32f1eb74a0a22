#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "svdnas/tensor.hpp"

namespace svdnas {

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, double lr, double momentum = 0.9, double weight_decay = 0.0)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), wd_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(VectorX<T>::Zero(p.numel()));
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      VectorX<T> g = p.grad().data() + T(wd_) * p.value().data();
      velocity_[i] = T(momentum_) * velocity_[i] + g;
      p.mutable_value().data() -= T(lr_) * velocity_[i];
    }
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<VectorX<T>> velocity_;
  double lr_, momentum_, wd_;
};

// Adam with L2 weight decay added to the gradient.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double weight_decay = 0.0,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(Eigen::ArrayXd::Zero(p.numel()));
      v_.emplace_back(Eigen::ArrayXd::Zero(p.numel()));
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      Eigen::ArrayXd g = p.grad().data().template cast<double>() + wd_ * p.value().data().template cast<double>();
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g.square();
      Eigen::ArrayXd upd = lr_ * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps_);
      p.mutable_value().data() -= upd.cast<T>();
    }
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<Eigen::ArrayXd> m_, v_;
  double lr_, b1_, b2_, wd_, eps_;
  int t_ = 0;
};

// Multiplies the learning rate by `factor` once the tracked metric has not
// improved for `patience` consecutive steps.
class Plateau {
 public:
  Plateau(double factor, int patience, bool maximize) : factor_(factor), patience_(patience), maximize_(maximize) {}

  // Returns true when the rate should be decayed now.
  bool observe(double metric) {
    const bool better = maximize_ ? metric > best_ : metric < best_;
    if (!seen_ || better) {
      best_ = metric;
      seen_ = true;
      stale_ = 0;
      return false;
    }
    if (++stale_ >= patience_) {
      stale_ = 0;
      return true;
    }
    return false;
  }
  double factor() const { return factor_; }

 private:
  double factor_;
  int patience_;
  bool maximize_;
  bool seen_ = false;
  double best_ = 0.0;
  int stale_ = 0;
};

}  // namespace svdnas
