#pragma once

#include "promptmel/nn.hpp"
#include "promptmel/rng.hpp"
#include "promptmel/tensor.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace promptmel {

/// Reverse-mode autodiff tape over dense matrices. A graph is built once per
/// forward pass; backward() runs the recorded closures in reverse order and
/// accumulates gradients into any bound Parameters.
template <typename S>
class Graph {
 public:
  using V = int;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  V input(Mat<S> v) {
    nodes_.push_back(Node{std::move(v), nullptr, {}, {}});
    return alloc_grad(int(nodes_.size()) - 1);
  }

  V scalar_input(S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return input(std::move(m));
  }

  /// Leaf bound to an external parameter; value is not copied, and
  /// backward() adds the accumulated node gradient into p.grad.
  V param(Parameter<S>& p) {
    nodes_.push_back(Node{{}, &p.value, {}, {}});
    V id = alloc_grad(int(nodes_.size()) - 1);
    bindings_.emplace_back(id, &p);
    return id;
  }

  const Mat<S>& val(V i) const { return nodes_[i].ext ? *nodes_[i].ext : nodes_[i].val; }
  const Mat<S>& grad(V i) const { return nodes_[i].grad; }
  Eigen::Index rows(V i) const { return val(i).rows(); }
  Eigen::Index cols(V i) const { return val(i).cols(); }

  // ---- elementwise / broadcast ----

  V add(V a, V b) {
    same_shape(a, b, "add");
    V o = make(val(a) + val(b));
    set_back(o, [this, a, b, o] {
      g(a) += grad(o);
      g(b) += grad(o);
    });
    return o;
  }

  V sub(V a, V b) {
    same_shape(a, b, "sub");
    V o = make(val(a) - val(b));
    set_back(o, [this, a, b, o] {
      g(a) += grad(o);
      g(b) -= grad(o);
    });
    return o;
  }

  V mul(V a, V b) {
    same_shape(a, b, "mul");
    V o = make(val(a).cwiseProduct(val(b)));
    set_back(o, [this, a, b, o] {
      g(a) += grad(o).cwiseProduct(val(b));
      g(b) += grad(o).cwiseProduct(val(a));
    });
    return o;
  }

  V scale(V a, S k) {
    V o = make(k * val(a));
    set_back(o, [this, a, o, k] { g(a) += k * grad(o); });
    return o;
  }

  V add_const(V a, S k) {
    V o = make(val(a).array() + k);
    set_back(o, [this, a, o] { g(a) += grad(o); });
    return o;
  }

  /// a (r x c) + v (1 x c) broadcast over rows.
  V add_rowvec(V a, V vv) {
    if (cols(a) != cols(vv) || rows(vv) != 1)
      throw std::invalid_argument("add_rowvec: shape mismatch");
    V o = make(val(a).rowwise() + val(vv).row(0));
    set_back(o, [this, a, vv, o] {
      g(a) += grad(o);
      g(vv).row(0) += grad(o).colwise().sum();
    });
    return o;
  }

  /// a (r x c) .* v (1 x c) broadcast over rows.
  V mul_rowvec(V a, V vv) {
    if (cols(a) != cols(vv) || rows(vv) != 1)
      throw std::invalid_argument("mul_rowvec: shape mismatch");
    V o = make(val(a).array().rowwise() * val(vv).row(0).array());
    set_back(o, [this, a, vv, o] {
      g(a).array() += grad(o).array().rowwise() * val(vv).row(0).array();
      g(vv).row(0) += grad(o).cwiseProduct(val(a)).colwise().sum();
    });
    return o;
  }

  /// a (r x c) - v (r x 1) broadcast over columns.
  V sub_colvec(V a, V vv) {
    if (rows(a) != rows(vv) || cols(vv) != 1)
      throw std::invalid_argument("sub_colvec: shape mismatch");
    V o = make(val(a).colwise() - val(vv).col(0));
    set_back(o, [this, a, vv, o] {
      g(a) += grad(o);
      g(vv).col(0) -= grad(o).rowwise().sum();
    });
    return o;
  }

  /// a (r x c) .* v (r x 1) broadcast over columns.
  V mul_colvec(V a, V vv) {
    if (rows(a) != rows(vv) || cols(vv) != 1)
      throw std::invalid_argument("mul_colvec: shape mismatch");
    V o = make(val(a).array().colwise() * val(vv).col(0).array());
    set_back(o, [this, a, vv, o] {
      g(a).array() += grad(o).array().colwise() * val(vv).col(0).array();
      g(vv).col(0) += grad(o).cwiseProduct(val(a)).rowwise().sum();
    });
    return o;
  }

  /// a * s where s is a 1x1 node.
  V mul_scalar(V a, V s1) {
    if (rows(s1) != 1 || cols(s1) != 1)
      throw std::invalid_argument("mul_scalar: scalar node must be 1x1");
    V o = make(val(s1)(0, 0) * val(a));
    set_back(o, [this, a, s1, o] {
      g(a) += val(s1)(0, 0) * grad(o);
      g(s1)(0, 0) += grad(o).cwiseProduct(val(a)).sum();
    });
    return o;
  }

  // ---- nonlinearities ----

  V relu(V a) {
    V o = make(val(a).cwiseMax(S(0)));
    set_back(o, [this, a, o] {
      g(a).array() += grad(o).array() * (val(a).array() > S(0)).template cast<S>();
    });
    return o;
  }

  V leaky_relu(V a, S slope) {
    Mat<S> m = val(a);
    V o = make(m.unaryExpr([slope](S x) { return x > S(0) ? x : slope * x; }));
    set_back(o, [this, a, o, slope] {
      g(a).array() += grad(o).array() *
                      (val(a).array() > S(0)).select(Mat<S>::Constant(rows(a), cols(a), S(1)),
                                                     Mat<S>::Constant(rows(a), cols(a), slope))
                          .array();
    });
    return o;
  }

  V square(V a) {
    V o = make(val(a).cwiseProduct(val(a)));
    set_back(o, [this, a, o] { g(a) += S(2) * grad(o).cwiseProduct(val(a)); });
    return o;
  }

  /// |a| elementwise; subgradient 0 at exactly 0.
  V abs(V a) {
    V o = make(val(a).cwiseAbs());
    set_back(o, [this, a, o] {
      g(a).array() += grad(o).array() * val(a).array().sign();
    });
    return o;
  }

  /// (a + eps)^(-1/2) elementwise.
  V rsqrt_eps(V a, S eps) {
    Mat<S> y = (val(a).array() + eps).rsqrt();
    V o = make(std::move(y));
    set_back(o, [this, a, o] {
      g(a).array() += grad(o).array() * (S(-0.5) * val(o).array().cube());
    });
    return o;
  }

  V softmax_rows(V a) {
    Mat<S> m = val(a);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      S mx = m.row(i).maxCoeff();
      m.row(i) = (m.row(i).array() - mx).exp();
      m.row(i) /= m.row(i).sum();
    }
    V o = make(std::move(m));
    set_back(o, [this, a, o] {
      const Mat<S>& s = val(o);
      const Mat<S>& go = grad(o);
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        S dot = go.row(i).cwiseProduct(s.row(i)).sum();
        g(a).row(i).array() += s.row(i).array() * (go.row(i).array() - dot);
      }
    });
    return o;
  }

  // ---- reductions ----

  V row_mean(V a) {
    S inv = S(1) / S(cols(a));
    V o = make(val(a).rowwise().mean());
    set_back(o, [this, a, o, inv] {
      g(a).colwise() += inv * grad(o).col(0);
    });
    return o;
  }

  V sum_all(V a) {
    Mat<S> m(1, 1);
    m(0, 0) = val(a).sum();
    V o = make(std::move(m));
    set_back(o, [this, a, o] { g(a).array() += grad(o)(0, 0); });
    return o;
  }

  V mean_all(V a) {
    S inv = S(1) / S(rows(a) * cols(a));
    Mat<S> m(1, 1);
    m(0, 0) = val(a).sum() * inv;
    V o = make(std::move(m));
    set_back(o, [this, a, o, inv] { g(a).array() += inv * grad(o)(0, 0); });
    return o;
  }

  // ---- matrix products ----

  V matmul(V a, V b) {
    if (cols(a) != rows(b)) throw std::invalid_argument("matmul: inner dim mismatch");
    Mat<S> m(rows(a), cols(b));
    m.noalias() = val(a) * val(b);
    V o = make(std::move(m));
    set_back(o, [this, a, b, o] {
      g(a).noalias() += grad(o) * val(b).transpose();
      g(b).noalias() += val(a).transpose() * grad(o);
    });
    return o;
  }

  /// a * b^T
  V matmul_nt(V a, V b) {
    if (cols(a) != cols(b)) throw std::invalid_argument("matmul_nt: dim mismatch");
    Mat<S> m(rows(a), rows(b));
    m.noalias() = val(a) * val(b).transpose();
    V o = make(std::move(m));
    set_back(o, [this, a, b, o] {
      g(a).noalias() += grad(o) * val(b);
      g(b).noalias() += grad(o).transpose() * val(a);
    });
    return o;
  }

  // ---- reshaping / selection ----

  V slice_cols(V a, int off, int n) {
    if (off < 0 || n < 1 || off + n > cols(a))
      throw std::invalid_argument("slice_cols: out of range");
    V o = make(val(a).middleCols(off, n));
    set_back(o, [this, a, o, off, n] { g(a).middleCols(off, n) += grad(o); });
    return o;
  }

  V slice_rows(V a, int off, int n) {
    if (off < 0 || n < 1 || off + n > rows(a))
      throw std::invalid_argument("slice_rows: out of range");
    V o = make(val(a).middleRows(off, n));
    set_back(o, [this, a, o, off, n] { g(a).middleRows(off, n) += grad(o); });
    return o;
  }

  V concat_cols(const std::vector<V>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    Eigen::Index r = rows(parts[0]), c = 0;
    for (V p : parts) {
      if (rows(p) != r) throw std::invalid_argument("concat_cols: row mismatch");
      c += cols(p);
    }
    Mat<S> m(r, c);
    Eigen::Index off = 0;
    for (V p : parts) {
      m.middleCols(off, cols(p)) = val(p);
      off += cols(p);
    }
    V o = make(std::move(m));
    set_back(o, [this, parts, o] {
      Eigen::Index off = 0;
      for (V p : parts) {
        g(p) += grad(o).middleCols(off, cols(p));
        off += cols(p);
      }
    });
    return o;
  }

  /// Gather rows of a table by index; ids must be within [0, rows(table)).
  V embed_rows(V table, std::vector<int> ids) {
    Mat<S> m(Eigen::Index(ids.size()), cols(table));
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= rows(table))
        throw std::invalid_argument("embed_rows: id out of range");
      m.row(Eigen::Index(i)) = val(table).row(ids[i]);
    }
    V o = make(std::move(m));
    set_back(o, [this, table, o, ids = std::move(ids)] {
      for (size_t i = 0; i < ids.size(); ++i)
        g(table).row(ids[i]) += grad(o).row(Eigen::Index(i));
    });
    return o;
  }

  /// Repeat row i of a counts[i] times, preserving order (length regulator).
  V repeat_rows(V a, std::vector<int> counts) {
    if (Eigen::Index(counts.size()) != rows(a))
      throw std::invalid_argument("repeat_rows: counts length mismatch");
    Eigen::Index total = 0;
    for (int c : counts) {
      if (c < 0) throw std::invalid_argument("repeat_rows: negative count");
      total += c;
    }
    if (total == 0) throw std::invalid_argument("repeat_rows: all-zero durations");
    Mat<S> m(total, cols(a));
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < rows(a); ++i)
      for (int k = 0; k < counts[i]; ++k) m.row(r++) = val(a).row(i);
    V o = make(std::move(m));
    set_back(o, [this, a, o, counts = std::move(counts)] {
      Eigen::Index r = 0;
      for (Eigen::Index i = 0; i < rows(a); ++i)
        for (int k = 0; k < counts[i]; ++k) g(a).row(i) += grad(o).row(r++);
    });
    return o;
  }

  // ---- conv ----

  /// 1-D convolution over rows (time) with same zero padding.
  /// x: L x Cin, w: (k*Cin) x Cout laid out tap-major, b: 1 x Cout.
  /// Output: Lout x Cout with Lout = floor((L + 2*pad - k)/stride) + 1,
  /// pad = (k-1)/2 (k must be odd).
  V conv1d(V x, V w, V b, int k, int stride = 1) {
    if (k < 1 || k % 2 == 0) throw std::invalid_argument("conv1d: kernel must be odd");
    if (stride < 1) throw std::invalid_argument("conv1d: bad stride");
    Eigen::Index L = rows(x), cin = cols(x);
    if (rows(w) != Eigen::Index(k) * cin) throw std::invalid_argument("conv1d: weight shape");
    if (cols(b) != cols(w) || rows(b) != 1) throw std::invalid_argument("conv1d: bias shape");
    int pad = (k - 1) / 2;
    Eigen::Index lout = (L + 2 * pad - k) / stride + 1;
    Mat<S> cols_m = Mat<S>::Zero(lout, Eigen::Index(k) * cin);
    for (Eigen::Index i = 0; i < lout; ++i) {
      Eigen::Index base = i * stride - pad;
      for (int j = 0; j < k; ++j) {
        Eigen::Index src = base + j;
        if (src >= 0 && src < L) cols_m.block(i, Eigen::Index(j) * cin, 1, cin) = val(x).row(src);
      }
    }
    Mat<S> out(lout, cols(w));
    out.noalias() = cols_m * val(w);
    out.rowwise() += val(b).row(0);
    V o = make(std::move(out));
    set_back(o, [this, x, w, b, o, k, stride, pad, cols_m = std::move(cols_m)] {
      const Mat<S>& go = grad(o);
      g(w).noalias() += cols_m.transpose() * go;
      g(b).row(0) += go.colwise().sum();
      Eigen::Index L = rows(x), cin = cols(x);
      Mat<S> gcols(go.rows(), cols_m.cols());
      gcols.noalias() = go * val(w).transpose();
      for (Eigen::Index i = 0; i < go.rows(); ++i) {
        Eigen::Index base = i * stride - pad;
        for (int j = 0; j < k; ++j) {
          Eigen::Index src = base + j;
          if (src >= 0 && src < L)
            g(x).row(src) += gcols.block(i, Eigen::Index(j) * cin, 1, cin);
        }
      }
    });
    return o;
  }

  // ---- losses ----

  /// Cross entropy of a 1 x k logit row against an integer label.
  V cross_entropy_logits(V logits, int label) {
    if (rows(logits) != 1) throw std::invalid_argument("cross_entropy: want 1 x k");
    if (label < 0 || label >= cols(logits))
      throw std::invalid_argument("cross_entropy: label out of range");
    const Mat<S>& l = val(logits);
    S mx = l.row(0).maxCoeff();
    S lse = mx + std::log((l.row(0).array() - mx).exp().sum());
    Mat<S> m(1, 1);
    m(0, 0) = lse - l(0, label);
    V o = make(std::move(m));
    set_back(o, [this, logits, o, label, lse] {
      S go = grad(o)(0, 0);
      const Mat<S>& l = val(logits);
      for (Eigen::Index j = 0; j < l.cols(); ++j) {
        S p = std::exp(l(0, j) - lse);
        g(logits)(0, j) += go * (p - (j == label ? S(1) : S(0)));
      }
    });
    return o;
  }

  /// Inverted-scale dropout; identity when train is false or p == 0.
  V dropout(V a, S p, bool train, Rng* rng) {
    if (!train || p <= S(0)) return a;
    if (!rng) throw std::invalid_argument("dropout: rng required in train mode");
    Mat<S> mask(rows(a), cols(a));
    S keep = S(1) - p;
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
      for (Eigen::Index j = 0; j < mask.cols(); ++j)
        mask(i, j) = rng->uniform() < double(p) ? S(0) : S(1) / keep;
    V m = input(std::move(mask));
    return mul(a, m);
  }

  // ---- backward ----

  void backward(V root) {
    if (rows(root) != 1 || cols(root) != 1)
      throw std::invalid_argument("backward: root must be scalar");
    nodes_[root].grad(0, 0) = S(1);
    for (int i = root; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back();
    for (auto& [id, p] : bindings_) p->grad += nodes_[id].grad;
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> val;
    const Mat<S>* ext = nullptr;
    Mat<S> grad;
    std::function<void()> back;
  };

  V make(Mat<S> v) {
    nodes_.push_back(Node{std::move(v), nullptr, {}, {}});
    return alloc_grad(int(nodes_.size()) - 1);
  }

  V alloc_grad(V id) {
    nodes_[id].grad = Mat<S>::Zero(val(id).rows(), val(id).cols());
    return id;
  }

  void set_back(V id, std::function<void()> fn) { nodes_[id].back = std::move(fn); }

  Mat<S>& g(V i) { return nodes_[i].grad; }

  void same_shape(V a, V b, const char* op) const {
    if (rows(a) != rows(b) || cols(a) != cols(b))
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<V, Parameter<S>*>> bindings_;
};

}  // namespace promptmel
