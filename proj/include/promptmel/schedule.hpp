#pragma once

#include "promptmel/rng.hpp"
#include "promptmel/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace promptmel {

/// Discrete-time forward diffusion schedule.
/// betas[t-1] is beta_t for t in [1, T]; alpha_bar(0) is defined as 1 so the
/// t = 1 posterior is deterministic.
template <typename S>
struct VarianceSchedule {
  int T = 0;
  std::vector<S> betas;
  std::vector<S> alphas;
  std::vector<S> alpha_bars;

  S beta(int t) const {
    check_t(t);
    return betas[t - 1];
  }
  S alpha(int t) const {
    check_t(t);
    return alphas[t - 1];
  }
  /// Valid for t in [0, T]; alpha_bar(0) == 1.
  S alpha_bar(int t) const {
    if (t == 0) return S(1);
    check_t(t);
    return alpha_bars[t - 1];
  }
  void check_t(int t) const {
    if (t < 1 || t > T) throw std::out_of_range("timestep out of [1, T]");
  }
};

template <typename S>
struct GaussianPosterior {
  Mat<S> mean;
  S variance = S(0);  // isotropic scalar; exactly 0 at t == 1

  Mat<S> sample(Rng& rng) const {
    if (variance == S(0)) return mean;
    S sigma = std::sqrt(variance);
    return mean + sigma * rng.gauss_mat<S>(mean.rows(), mean.cols());
  }
};

template <typename S>
VarianceSchedule<S> make_schedule(int T, S beta_start, S beta_end) {
  if (T < 1) throw std::invalid_argument("schedule: T must be positive");
  if (!(beta_start > S(0) && beta_start <= beta_end && beta_end < S(1)))
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
  VarianceSchedule<S> s;
  s.T = T;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bars.resize(T);
  S prod = S(1);
  for (int i = 0; i < T; ++i) {
    S frac = T == 1 ? S(0) : S(i) / S(T - 1);
    s.betas[i] = beta_start + frac * (beta_end - beta_start);
    s.alphas[i] = S(1) - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

/// One forward step: x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise.
template <typename S>
Mat<S> q_sample_step(const Mat<S>& x_prev, int t, const VarianceSchedule<S>& sched,
                     const Mat<S>& noise) {
  sched.check_t(t);
  if (noise.rows() != x_prev.rows() || noise.cols() != x_prev.cols())
    throw std::invalid_argument("q_sample_step: noise shape mismatch");
  S b = sched.beta(t);
  return std::sqrt(S(1) - b) * x_prev + std::sqrt(b) * noise;
}

/// Closed-form marginal: x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise.
/// Valid for t in [0, T]; t = 0 returns x_0.
template <typename S>
Mat<S> q_sample_closed(const Mat<S>& x0, int t, const VarianceSchedule<S>& sched,
                       const Mat<S>& noise) {
  if (noise.rows() != x0.rows() || noise.cols() != x0.cols())
    throw std::invalid_argument("q_sample_closed: noise shape mismatch");
  if (t < 0 || t > sched.T) throw std::out_of_range("q_sample_closed: t out of [0, T]");
  S ab = sched.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(S(1) - ab) * noise;
}

/// Gaussian posterior q(x_{t-1} | x_t, x_0):
///   mean = sqrt(abar_{t-1}) beta_t / (1 - abar_t) x_0
///        + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) x_t
///   var  = beta_t (1 - abar_{t-1}) / (1 - abar_t)
template <typename S>
GaussianPosterior<S> q_posterior(const Mat<S>& x0, const Mat<S>& xt, int t,
                                 const VarianceSchedule<S>& sched) {
  sched.check_t(t);
  if (x0.rows() != xt.rows() || x0.cols() != xt.cols())
    throw std::invalid_argument("q_posterior: shape mismatch");
  S ab_t = sched.alpha_bar(t);
  S ab_prev = sched.alpha_bar(t - 1);
  S beta_t = sched.beta(t);
  S denom = S(1) - ab_t;
  GaussianPosterior<S> post;
  if (t == 1) {
    post.mean = x0;
    post.variance = S(0);
    return post;
  }
  S c0 = std::sqrt(ab_prev) * beta_t / denom;
  S c1 = std::sqrt(sched.alpha(t)) * (S(1) - ab_prev) / denom;
  post.mean = c0 * x0 + c1 * xt;
  post.variance = beta_t * (S(1) - ab_prev) / denom;
  return post;
}

/// Coefficients of the posterior mean (mean = c0 * x0 + c1 * xt).
/// Exposed so the mean can be built inside a differentiable graph.
template <typename S>
std::pair<S, S> q_posterior_coeffs(int t, const VarianceSchedule<S>& sched) {
  sched.check_t(t);
  if (t == 1) return {S(1), S(0)};
  S ab_t = sched.alpha_bar(t);
  S ab_prev = sched.alpha_bar(t - 1);
  S beta_t = sched.beta(t);
  S denom = S(1) - ab_t;
  return {std::sqrt(ab_prev) * beta_t / denom,
          std::sqrt(sched.alpha(t)) * (S(1) - ab_prev) / denom};
}

template <typename S>
S q_posterior_variance(int t, const VarianceSchedule<S>& sched) {
  sched.check_t(t);
  if (t == 1) return S(0);
  return sched.beta(t) * (S(1) - sched.alpha_bar(t - 1)) / (S(1) - sched.alpha_bar(t));
}

/// Training pair: x_{t-1} from the closed-form marginal at t-1 (x_0 itself
/// when t == 1), then x_t by one forward step from x_{t-1}. The pair is a
/// valid draw from the joint chain.
template <typename S>
std::pair<Mat<S>, Mat<S>> sample_training_pair(const Mat<S>& x0, int t,
                                               const VarianceSchedule<S>& sched,
                                               Rng& rng) {
  sched.check_t(t);
  Mat<S> eps_prev = rng.gauss_mat<S>(x0.rows(), x0.cols());
  Mat<S> x_prev = q_sample_closed(x0, t - 1, sched, eps_prev);
  Mat<S> eps_step = rng.gauss_mat<S>(x0.rows(), x0.cols());
  Mat<S> x_t = q_sample_step(x_prev, t, sched, eps_step);
  return {std::move(x_prev), std::move(x_t)};
}

}  // namespace promptmel
