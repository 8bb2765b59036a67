#pragma once

#include "promptmel/rng.hpp"
#include "promptmel/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace promptmel {

/// Named trainable tensor. Gradients are accumulated across a batch and
/// cleared by the optimizer step.
template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<S> v) : name(std::move(n)), value(std::move(v)) {
    grad = Mat<S>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
};

template <typename S>
using ParamList = std::vector<Parameter<S>*>;

template <typename S>
Mat<S> xavier_init(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  S lim = static_cast<S>(std::sqrt(6.0 / double(rows + cols)));
  return rng.uniform_mat<S>(rows, cols, -lim, lim);
}

template <typename S>
Mat<S> normal_init(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sd) {
  return static_cast<S>(sd) * rng.gauss_mat<S>(rows, cols);
}

/// Adam optimizer. Moment buffers are indexed by parameter order, which must
/// stay fixed between init and step (and across checkpoint resume).
template <typename S>
class Adam {
 public:
  Adam() = default;
  Adam(S lr, S beta1, S beta2, S eps = S(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void init(const ParamList<S>& params) {
    m_.clear();
    v_.clear();
    for (auto* p : params) {
      m_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
    t_ = 0;
  }

  void step(const ParamList<S>& params) {
    if (m_.size() != params.size()) throw std::logic_error("adam: not initialized");
    ++t_;
    S bc1 = S(1) - static_cast<S>(std::pow(double(beta1_), double(t_)));
    S bc2 = S(1) - static_cast<S>(std::pow(double(beta2_), double(t_)));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      m_[i] = beta1_ * m_[i] + (S(1) - beta1_) * p.grad;
      v_[i] = beta2_ * v_[i] + (S(1) - beta2_) * p.grad.cwiseProduct(p.grad);
      Mat<S> mhat = m_[i] / bc1;
      Mat<S> vhat = v_[i] / bc2;
      p.value.array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
      p.zero_grad();
    }
  }

  S lr() const { return lr_; }
  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t) { t_ = t; }

  std::vector<Mat<S>>& moments1() { return m_; }
  std::vector<Mat<S>>& moments2() { return v_; }

 private:
  S lr_ = S(2e-4);
  S beta1_ = S(0.5);
  S beta2_ = S(0.9);
  S eps_ = S(1e-8);
  std::vector<Mat<S>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace promptmel
