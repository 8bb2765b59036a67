#pragma once

#include "promptmel/graph.hpp"
#include "promptmel/nn.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <utility>

namespace promptmel {

/// Numerical floor inside the layer-norm variance square root; required for
/// constant rows. Pinned so tests can assert the exact normalized values.
inline constexpr double kLayerNormEps = 1e-5;

template <typename S>
struct LayerStats {
  Mat<S> mu;      // rows x 1
  Mat<S> sigma2;  // rows x 1, biased (1/m)
};

/// Row-wise normalization: x_hat = (x - mu) / sqrt(sigma2 + eps).
template <typename S>
std::pair<Mat<S>, LayerStats<S>> layer_normalize(const Mat<S>& x,
                                                 S eps = S(kLayerNormEps)) {
  if (x.cols() < 1) throw std::invalid_argument("layer_normalize: empty rows");
  LayerStats<S> st;
  st.mu = x.rowwise().mean();
  Mat<S> centered = x.colwise() - st.mu.col(0);
  st.sigma2 = centered.cwiseProduct(centered).rowwise().mean();
  Mat<S> inv = (st.sigma2.array() + eps).rsqrt();
  Mat<S> xhat = centered.array().colwise() * inv.col(0).array();
  return {std::move(xhat), std::move(st)};
}

/// Graph version of the same normalization (no affine).
template <typename S>
typename Graph<S>::V layer_normalize_g(Graph<S>& g, typename Graph<S>::V x,
                                       S eps = S(kLayerNormEps)) {
  auto mu = g.row_mean(x);
  auto centered = g.sub_colvec(x, mu);
  auto var = g.row_mean(g.square(centered));
  return g.mul_colvec(centered, g.rsqrt_eps(var, eps));
}

/// Conditional prosodic layer normalization parameters for one site:
/// learnable layer-norm affine (gamma_ln, beta_ln), a bounded mixing
/// coefficient rho, and a linear style projection producing
/// (gamma_style, beta_style) from the style embedding.
template <typename S>
struct CPLNParams {
  Parameter<S> gamma_ln;  // 1 x m
  Parameter<S> beta_ln;   // 1 x m
  Parameter<S> rho;       // 1 x 1
  Parameter<S> style_w;   // style_dim x 2m
  Parameter<S> style_b;   // 1 x 2m
  int m = 0;
  int style_dim = 0;

  CPLNParams() = default;

  CPLNParams(const std::string& prefix, int m_, int style_dim_, Rng& rng,
             S rho_init = S(0.9))
      : m(m_), style_dim(style_dim_) {
    gamma_ln = Parameter<S>(prefix + ".gamma_ln", Mat<S>(Mat<S>::Ones(1, m)));
    beta_ln = Parameter<S>(prefix + ".beta_ln", Mat<S>(Mat<S>::Zero(1, m)));
    Mat<S> r(1, 1);
    r(0, 0) = rho_init;
    rho = Parameter<S>(prefix + ".rho", std::move(r));
    style_w = Parameter<S>(prefix + ".style_w", normal_init<S>(rng, style_dim, 2 * m, 0.02));
    // style gamma half starts at 1 so both paths agree before training
    Mat<S> sb = Mat<S>::Zero(1, 2 * m);
    sb.leftCols(m).setOnes();
    style_b = Parameter<S>(prefix + ".style_b", std::move(sb));
  }

  void collect(ParamList<S>& out) {
    out.push_back(&gamma_ln);
    out.push_back(&beta_ln);
    out.push_back(&rho);
    out.push_back(&style_w);
    out.push_back(&style_b);
  }
};

/// (gamma_style, beta_style) halves of the style projection.
template <typename S>
std::pair<typename Graph<S>::V, typename Graph<S>::V> style_affine_params(
    Graph<S>& g, typename Graph<S>::V s, CPLNParams<S>& p) {
  if (g.cols(s) != p.style_dim || g.rows(s) != 1)
    throw std::invalid_argument("style_affine_params: style dimension mismatch");
  auto proj = g.add_rowvec(g.matmul(s, g.param(p.style_w)), g.param(p.style_b));
  return {g.slice_cols(proj, 0, p.m), g.slice_cols(proj, p.m, p.m)};
}

/// y = rho (gamma_ln x_hat + beta_ln) + (1 - rho)(gamma_style x_hat + beta_style)
template <typename S>
typename Graph<S>::V cpln_forward(Graph<S>& g, typename Graph<S>::V x,
                                  typename Graph<S>::V s, CPLNParams<S>& p) {
  if (g.cols(x) != p.m) throw std::invalid_argument("cpln_forward: width mismatch");
  S r = p.rho.value(0, 0);
  if (r < S(0) || r > S(1)) throw std::invalid_argument("cpln_forward: rho out of [0,1]");
  auto xhat = layer_normalize_g(g, x);
  auto [gamma_s, beta_s] = style_affine_params(g, s, p);
  auto ln_path = g.add_rowvec(g.mul_rowvec(xhat, g.param(p.gamma_ln)), g.param(p.beta_ln));
  auto style_path = g.add_rowvec(g.mul_rowvec(xhat, gamma_s), beta_s);
  auto rho_node = g.param(p.rho);
  auto one_minus = g.add_const(g.scale(rho_node, S(-1)), S(1));
  return g.add(g.mul_scalar(ln_path, rho_node), g.mul_scalar(style_path, one_minus));
}

/// Clamp rho into [0, 1]; all other fields untouched. Part of the
/// single-writer parameter-update step.
template <typename S>
void clamp_rho(CPLNParams<S>& p) {
  p.rho.value(0, 0) = std::min(S(1), std::max(S(0), p.rho.value(0, 0)));
}

/// Plain layer norm with learnable affine (used where style conditioning is
/// not wanted, e.g. the variance predictor stacks).
template <typename S>
struct LayerNorm {
  Parameter<S> gamma;  // 1 x m
  Parameter<S> beta;   // 1 x m

  LayerNorm() = default;
  LayerNorm(const std::string& prefix, int m) {
    gamma = Parameter<S>(prefix + ".gamma", Mat<S>(Mat<S>::Ones(1, m)));
    beta = Parameter<S>(prefix + ".beta", Mat<S>(Mat<S>::Zero(1, m)));
  }
  void collect(ParamList<S>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  typename Graph<S>::V forward(Graph<S>& g, typename Graph<S>::V x) {
    auto xhat = layer_normalize_g(g, x);
    return g.add_rowvec(g.mul_rowvec(xhat, g.param(gamma)), g.param(beta));
  }
};

}  // namespace promptmel
