#pragma once

// AdamW: adaptive moments with decoupled weight decay.

#include "coral/autodiff.hpp"
#include "coral/common.hpp"

#include <cmath>
#include <vector>

namespace coral {

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 64;
  int epochs = 100;

  void validate() const {
    require(lr > 0, "optimizer: lr must be > 0");
    require(weight_decay >= 0, "optimizer: weight_decay must be >= 0");
    require(batch_size >= 2, "optimizer: batch_size must be >= 2");
    require(epochs >= 1, "optimizer: epochs must be >= 1");
  }
};

template <class S>
class AdamW {
 public:
  AdamW(std::vector<ad::Parameter<S>*> params, OptimizerConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
      m_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step() {
    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S bc1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, t_));
    const S bc2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, t_));
    const S lr = static_cast<S>(cfg_.lr);
    const S wd = static_cast<S>(cfg_.weight_decay);
    const S eps = static_cast<S>(cfg_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ad::Parameter<S>& p = *params_[i];
      if (!p.trainable) continue;
      m_[i] = b1 * m_[i] + (S(1) - b1) * p.grad;
      v_[i].array() = b2 * v_[i].array() + (S(1) - b2) * p.grad.array().square();
      p.value.array() -= lr * ((m_[i].array() / bc1) /
                               ((v_[i].array() / bc2).sqrt() + eps) +
                               wd * p.value.array());
    }
  }

  std::int64_t step_count() const { return t_; }
  Matrix<S>& moment1(std::size_t i) { return m_[i]; }
  Matrix<S>& moment2(std::size_t i) { return v_[i]; }
  void set_step_count(std::int64_t t) { t_ = t; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  std::vector<ad::Parameter<S>*> params_;
  OptimizerConfig cfg_;
  std::vector<Matrix<S>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace coral
