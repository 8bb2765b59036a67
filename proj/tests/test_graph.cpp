#include <doctest.h>

#include "promptmel/graph.hpp"

#include <cmath>
#include <functional>
#include <memory>

using namespace promptmel;

namespace {

using P = Parameter<double>;
using G = Graph<double>;

double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

// Central finite differences over every element of every listed parameter.
// build() must construct the loss (a 1x1 node) from current parameter values
// and must not call backward itself.
void check_grads(const std::function<G::V(G&)>& build, const std::vector<P*>& params,
                 double h = 1e-6, double tol = 1e-7) {
  for (auto* p : params) p->zero_grad();
  std::vector<MatD> analytic;
  {
    G g;
    g.backward(build(g));
  }
  for (auto* p : params) analytic.push_back(p->grad);

  auto eval = [&]() {
    G g;
    return g.val(build(g))(0, 0);
  };
  for (size_t pi = 0; pi < params.size(); ++pi) {
    P* p = params[pi];
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        double orig = p->value(i, j);
        p->value(i, j) = orig + h;
        double lp = eval();
        p->value(i, j) = orig - h;
        double lm = eval();
        p->value(i, j) = orig;
        double fd = (lp - lm) / (2 * h);
        INFO(p->name, "(", i, ",", j, ") analytic=", analytic[pi](i, j), " fd=", fd);
        CHECK(rel_err(analytic[pi](i, j), fd) < tol);
      }
  }
}

struct Env {
  Rng rng{1234};
  std::vector<std::unique_ptr<P>> owned;
  P* mk(const std::string& name, int r, int c, double scale = 1.0) {
    owned.push_back(
        std::make_unique<P>(name, MatD(scale * rng.gauss_mat<double>(r, c))));
    return owned.back().get();
  }
  std::vector<P*> all() {
    std::vector<P*> v;
    for (auto& p : owned) v.push_back(p.get());
    return v;
  }
};

// loss = sum(out .* w) spreads a distinct weight onto every output element.
G::V weighted(G& g, G::V out, const MatD& w) {
  return g.sum_all(g.mul(out, g.input(w)));
}

}  // namespace

TEST_CASE("grad: elementwise add sub mul scale add_const") {
  Env e;
  auto* a = e.mk("a", 3, 4);
  auto* b = e.mk("b", 3, 4);
  MatD w = e.rng.gauss_mat<double>(3, 4);
  check_grads(
      [&](G& g) {
        auto va = g.param(*a), vb = g.param(*b);
        auto y = g.add(g.mul(g.sub(va, vb), g.scale(va, 0.7)), g.add_const(vb, 0.3));
        return weighted(g, y, w);
      },
      e.all());
}

TEST_CASE("grad: broadcast row/col ops and mul_scalar") {
  Env e;
  auto* x = e.mk("x", 4, 5);
  auto* rv = e.mk("rv", 1, 5);
  auto* cv = e.mk("cv", 4, 1);
  auto* s = e.mk("s", 1, 1);
  MatD w = e.rng.gauss_mat<double>(4, 5);
  check_grads(
      [&](G& g) {
        auto vx = g.param(*x);
        auto y = g.add_rowvec(vx, g.param(*rv));
        y = g.mul_rowvec(y, g.param(*rv));
        y = g.sub_colvec(y, g.param(*cv));
        y = g.mul_colvec(y, g.param(*cv));
        y = g.mul_scalar(y, g.param(*s));
        return weighted(g, y, w);
      },
      e.all());
}

TEST_CASE("grad: nonlinearities") {
  Env e;
  auto* x = e.mk("x", 3, 6);
  // keep entries away from the relu/abs kink
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = 0; j < 6; ++j)
      if (std::abs(x->value(i, j)) < 0.05) x->value(i, j) += 0.2;
  MatD w = e.rng.gauss_mat<double>(3, 6);
  check_grads(
      [&](G& g) {
        auto vx = g.param(*x);
        auto y = g.add(g.relu(vx), g.leaky_relu(vx, 0.2));
        y = g.add(y, g.abs(vx));
        y = g.add(y, g.square(vx));
        y = g.add(y, g.rsqrt_eps(g.square(vx), 1e-3));
        return weighted(g, y, w);
      },
      e.all());
}

TEST_CASE("grad: softmax rows") {
  Env e;
  auto* x = e.mk("x", 3, 5);
  MatD w = e.rng.gauss_mat<double>(3, 5);
  check_grads(
      [&](G& g) { return weighted(g, g.softmax_rows(g.param(*x)), w); }, e.all());
}

TEST_CASE("grad: reductions") {
  Env e;
  auto* x = e.mk("x", 4, 3);
  MatD w = e.rng.gauss_mat<double>(4, 1);
  check_grads(
      [&](G& g) {
        auto vx = g.param(*x);
        auto y = g.row_mean(vx);
        auto l1 = weighted(g, y, w);
        auto l2 = g.mean_all(g.square(vx));
        return g.add(l1, l2);
      },
      e.all());
}

TEST_CASE("grad: matmul and matmul_nt") {
  Env e;
  auto* a = e.mk("a", 3, 4);
  auto* b = e.mk("b", 4, 5);
  auto* c = e.mk("c", 2, 5);
  MatD w = e.rng.gauss_mat<double>(3, 2);
  check_grads(
      [&](G& g) {
        auto prod = g.matmul(g.param(*a), g.param(*b));  // 3x5
        auto y = g.matmul_nt(prod, g.param(*c));         // 3x2
        return weighted(g, y, w);
      },
      e.all());
}

TEST_CASE("grad: slice and concat") {
  Env e;
  auto* x = e.mk("x", 4, 6);
  MatD w = e.rng.gauss_mat<double>(2, 8);
  check_grads(
      [&](G& g) {
        auto vx = g.param(*x);
        auto left = g.slice_cols(vx, 0, 3);
        auto right = g.slice_cols(vx, 3, 3);
        auto top = g.slice_rows(g.concat_cols({left, right, left}), 0, 2);  // 2x9
        auto y = g.slice_cols(top, 1, 8);
        return weighted(g, y, w);
      },
      e.all());
}

TEST_CASE("grad: embed and repeat rows") {
  Env e;
  auto* table = e.mk("table", 7, 4);
  MatD w = e.rng.gauss_mat<double>(6, 4);
  check_grads(
      [&](G& g) {
        auto emb = g.embed_rows(g.param(*table), {2, 2, 5, 0});  // 4x4
        auto y = g.repeat_rows(emb, {2, 0, 3, 1});               // 6x4
        return weighted(g, y, w);
      },
      e.all());
}

TEST_CASE("grad: conv1d stride 1 and 2") {
  Env e;
  auto* x = e.mk("x", 9, 3);
  auto* w1 = e.mk("w1", 3 * 3, 4, 0.5);
  auto* b1 = e.mk("b1", 1, 4, 0.1);
  auto* w2 = e.mk("w2", 5 * 4, 2, 0.5);
  auto* b2 = e.mk("b2", 1, 2, 0.1);
  MatD w = e.rng.gauss_mat<double>(5, 2);
  check_grads(
      [&](G& g) {
        auto h = g.conv1d(g.param(*x), g.param(*w1), g.param(*b1), 3, 1);  // 9x4
        auto y = g.conv1d(h, g.param(*w2), g.param(*b2), 5, 2);            // 5x2
        return weighted(g, y, w);
      },
      e.all());
}

TEST_CASE("conv1d shapes") {
  G g;
  Rng rng(7);
  auto x = g.input(rng.gauss_mat<double>(10, 2));
  auto w = g.input(rng.gauss_mat<double>(3 * 2, 4));
  auto b = g.input(rng.gauss_mat<double>(1, 4));
  auto y = g.conv1d(x, w, b, 3, 2);
  CHECK(g.rows(y) == 5);
  CHECK(g.cols(y) == 4);
  CHECK_THROWS_AS(g.conv1d(x, w, b, 4, 1), std::invalid_argument);
}

TEST_CASE("grad: cross entropy logits") {
  Env e;
  auto* logits = e.mk("logits", 1, 5);
  check_grads([&](G& g) { return g.cross_entropy_logits(g.param(*logits), 2); },
              e.all());
}

TEST_CASE("cross entropy value for uniform logits") {
  G g;
  auto l = g.input(MatD(MatD::Zero(1, 3)));
  auto ce = g.cross_entropy_logits(l, 1);
  CHECK(g.val(ce)(0, 0) == doctest::Approx(std::log(3.0)));
}

TEST_CASE("dropout eval mode is identity, train mode rescales") {
  G g;
  Rng rng(3);
  MatD x = MatD::Ones(20, 20);
  auto vx = g.input(x);
  auto eval_out = g.dropout(vx, 0.4, false, nullptr);
  CHECK(eval_out == vx);
  auto train_out = g.dropout(vx, 0.4, true, &rng);
  double mean = g.val(train_out).mean();
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
  for (Eigen::Index i = 0; i < 20; ++i)
    for (Eigen::Index j = 0; j < 20; ++j) {
      double v = g.val(train_out)(i, j);
      CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.6)));
    }
}

TEST_CASE("parameter gradient accumulates across two graphs") {
  P p("p", MatD(MatD::Ones(1, 1)));
  for (int rep = 0; rep < 2; ++rep) {
    G g;
    auto v = g.param(p);
    g.backward(g.square(v));
  }
  CHECK(p.grad(0, 0) == doctest::Approx(4.0));  // d(x^2)/dx = 2 per pass
}

TEST_CASE("shape errors throw") {
  G g;
  Rng rng(5);
  auto a = g.input(rng.gauss_mat<double>(2, 3));
  auto b = g.input(rng.gauss_mat<double>(3, 2));
  CHECK_THROWS_AS(g.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(g.matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS(g.backward(a), std::invalid_argument);
  CHECK_THROWS_AS(g.slice_cols(a, 2, 2), std::invalid_argument);
}
