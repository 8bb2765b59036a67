#pragma once

// Shared finite-difference gradient-check harness for tests.

#include <doctest.h>

#include "promptmel/graph.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace fd {

using promptmel::Graph;
using promptmel::Mat;
using promptmel::MatD;
using promptmel::Parameter;
using promptmel::Rng;

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

/// Norm-based relative error between an analytic gradient tensor and its
/// finite-difference estimate.
inline double tensor_rel_err(const MatD& a, const MatD& n) {
  double num = (a - n).norm();
  double den = std::max({1e-12, a.norm(), n.norm()});
  return num / den;
}

/// Central finite differences over every element of every listed parameter.
/// build() constructs the loss node from current parameter values and must
/// not call backward itself. Returns the max per-tensor relative error.
inline double check_grads(const std::function<Graph<double>::V(Graph<double>&)>& build,
                          const std::vector<Parameter<double>*>& params,
                          double h = 1e-6, double tol = 1e-7) {
  for (auto* p : params) p->zero_grad();
  std::vector<MatD> analytic;
  {
    Graph<double> g;
    g.backward(build(g));
  }
  for (auto* p : params) analytic.push_back(p->grad);

  auto eval = [&]() {
    Graph<double> g;
    return g.val(build(g))(0, 0);
  };
  double worst = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>* p = params[pi];
    MatD fd_grad(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        double orig = p->value(i, j);
        p->value(i, j) = orig + h;
        double lp = eval();
        p->value(i, j) = orig - h;
        double lm = eval();
        p->value(i, j) = orig;
        fd_grad(i, j) = (lp - lm) / (2 * h);
      }
    double err = tensor_rel_err(analytic[pi], fd_grad);
    INFO("param ", p->name, " rel_err=", err);
    CHECK(err < tol);
    worst = std::max(worst, err);
    p->grad = analytic[pi];  // restore accumulated analytic gradient
  }
  return worst;
}

}  // namespace fd
