#pragma once

#include "dialcal/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace dialcal {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied as value -= lr * wd * value
};

/// Adam over a fixed list of parameters; moments are kept per parameter.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    if (!(opt_.learning_rate > 0)) throw std::invalid_argument("learning rate must be positive");
    for (Parameter* p : params_) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * p.grad;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * p.grad.cwiseProduct(p.grad);
      if (opt_.weight_decay > 0) p.value *= 1.0 - opt_.learning_rate * opt_.weight_decay;
      p.value.array() -= opt_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + opt_.epsilon);
    }
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  long steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions opt_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

inline double global_grad_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const Parameter* p : params) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most max_norm; returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter* p : params) p->grad *= s;
  }
  return norm;
}

}  // namespace dialcal
