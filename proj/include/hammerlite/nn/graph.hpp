#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hammerlite/nn/kernels.hpp"
#include "hammerlite/nn/tensor.hpp"
#include "hammerlite/util/random.hpp"

namespace hammerlite::nn {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff tape. Ops append nodes in evaluation order, so the
// tape is already topologically sorted and backprop is a reverse sweep.
// Leaves created with `input` reference caller-owned storage which must
// outlive the graph.
template <typename T>
class Graph {
 public:
  using Mat = Tensor<T>;
  using Backward = std::function<void(Graph&, int)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  std::size_t size() const { return nodes_.size(); }

  // Every op output is scanned for NaN/Inf unless disabled. Scalar outputs
  // (losses) are always checked.
  void set_check_finite(bool on) { check_finite_ = on; }

  Var input(const Mat& value, bool requires_grad) {
    Node n;
    n.ref = &value;
    n.requires_grad = requires_grad;
    return push_node(std::move(n));
  }

  Var constant(Mat value) { return leaf(std::move(value), false); }
  Var variable(Mat value) { return leaf(std::move(value), true); }

  const Mat& value(Var v) const { return node(v).get(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Accumulated gradient; an empty (0 x 0) matrix means "identically zero".
  const Mat& grad(Var v) const { return node(v).grad; }

  Mat grad_or_zero(Var v) const {
    const auto& n = node(v);
    if (n.grad.size() == 0) return Mat::Zero(n.get().rows(), n.get().cols());
    return n.grad;
  }

  void seed(Var v, const Mat& g) {
    const auto& val = value(v);
    if (g.rows() != val.rows() || g.cols() != val.cols())
      throw shape_error("seed: gradient shape " + shape_str(g) + " != value shape " + shape_str(val));
    accumulate(v.id, g);
  }

  void backward(Var loss) {
    if (value(loss).size() != 1) throw shape_error("backward: loss must be a scalar");
    seed(loss, Mat::Constant(1, 1, T(1)));
    propagate();
  }

  // Reverse sweep from whatever gradients have been seeded.
  void propagate() {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.back && n.grad.size() != 0) n.back(*this, i);
    }
  }

  // ---------------------------------------------------------------- linear

  Var matmul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.rows()) throw shape_error("matmul: " + shape_str(A) + " x " + shape_str(B));
    Mat out(A.rows(), B.cols());
    out.noalias() = A * B;
    return op(std::move(out), {a, b}, [a, b](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      if (g.requires_grad(a)) g.accumulate(a.id, G * g.value(b).transpose());
      if (g.requires_grad(b)) g.accumulate(b.id, g.value(a).transpose() * G);
    });
  }

  // a * b^T
  Var matmul_nt(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.cols()) throw shape_error("matmul_nt: " + shape_str(A) + " x " + shape_str(B) + "^T");
    Mat out(A.rows(), B.rows());
    out.noalias() = A * B.transpose();
    return op(std::move(out), {a, b}, [a, b](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      if (g.requires_grad(a)) g.accumulate(a.id, G * g.value(b));
      if (g.requires_grad(b)) g.accumulate(b.id, G.transpose() * g.value(a));
    });
  }

  Var add(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols())
      throw shape_error("add: " + shape_str(A) + " + " + shape_str(B));
    return op(A + B, {a, b}, [a, b](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      if (g.requires_grad(a)) g.accumulate(a.id, G);
      if (g.requires_grad(b)) g.accumulate(b.id, G);
    });
  }

  // Elementwise product.
  Var mul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols())
      throw shape_error("mul: " + shape_str(A) + " * " + shape_str(B));
    return op(A.cwiseProduct(B), {a, b}, [a, b](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      if (g.requires_grad(a)) g.accumulate(a.id, G.cwiseProduct(g.value(b)));
      if (g.requires_grad(b)) g.accumulate(b.id, G.cwiseProduct(g.value(a)));
    });
  }

  Var scale(Var a, T s) {
    return op(value(a) * s, {a}, [a, s](Graph& g, int self) {
      g.accumulate(a.id, g.nodes_[self].grad * s);
    });
  }

  Var sum(Var a) {
    Mat out = Mat::Constant(1, 1, value(a).sum());
    return op(std::move(out), {a}, [a](Graph& g, int self) {
      const T G = g.nodes_[self].grad(0, 0);
      const Mat& A = g.value(a);
      g.accumulate(a.id, Mat::Constant(A.rows(), A.cols(), G));
    });
  }

  // ------------------------------------------------------------- structure

  Var row(Var a, Index r) {
    const Mat& A = value(a);
    if (r < 0 || r >= A.rows()) throw shape_error("row: index out of range");
    return op(Mat(A.row(r)), {a}, [a, r](Graph& g, int self) {
      const Mat& A = g.value(a);
      Mat G = Mat::Zero(A.rows(), A.cols());
      G.row(r) = g.nodes_[self].grad;
      g.accumulate(a.id, G);
    });
  }

  Var last_row(Var a) { return row(a, value(a).rows() - 1); }

  Var gather_rows(Var a, std::vector<Index> rows) {
    const Mat& A = value(a);
    Mat out(static_cast<Index>(rows.size()), A.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= A.rows()) throw shape_error("gather_rows: index out of range");
      out.row(static_cast<Index>(i)) = A.row(rows[i]);
    }
    return op(std::move(out), {a}, [a, rows = std::move(rows)](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      Mat& dst = g.zero_grad(a.id);
      for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) += G.row(static_cast<Index>(i));
    });
  }

  Var stack_rows(std::span<const Var> parts) {
    if (parts.empty()) throw shape_error("stack_rows: no inputs");
    const Index cols = value(parts[0]).cols();
    Index rows = 0;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw shape_error("stack_rows: column mismatch");
      rows += value(p).rows();
    }
    Mat out(rows, cols);
    Index at = 0;
    for (Var p : parts) {
      out.middleRows(at, value(p).rows()) = value(p);
      at += value(p).rows();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return op(std::move(out), inputs, [inputs](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      Index at = 0;
      for (Var p : inputs) {
        const Index r = g.value(p).rows();
        if (g.requires_grad(p)) g.accumulate(p.id, Mat(G.middleRows(at, r)));
        at += r;
      }
    });
  }

  // out[t] = table[tokens[t]]
  Var embedding(Var table, std::span<const std::int32_t> tokens) {
    const Mat& E = value(table);
    Mat out(static_cast<Index>(tokens.size()), E.cols());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (tokens[t] < 0 || tokens[t] >= E.rows()) throw shape_error("embedding: token out of range");
      out.row(static_cast<Index>(t)) = E.row(tokens[t]);
    }
    std::vector<std::int32_t> ids(tokens.begin(), tokens.end());
    return op(std::move(out), {table}, [table, ids = std::move(ids)](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      Mat& dst = g.zero_grad(table.id);
      for (std::size_t t = 0; t < ids.size(); ++t) dst.row(ids[t]) += G.row(static_cast<Index>(t));
    });
  }

  // --------------------------------------------------------- nonlinearity

  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const Mat& X = value(x);
    const Mat& Gn = value(gain);
    const Mat& Bs = value(bias);
    if (Gn.rows() != 1 || Gn.cols() != X.cols() || Bs.rows() != 1 || Bs.cols() != X.cols())
      throw shape_error("layer_norm: parameter shape mismatch");
    const Index n = X.rows();
    const Index d = X.cols();
    Mat xhat(n, d);
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    for (Index r = 0; r < n; ++r) {
      const T mean = X.row(r).mean();
      const T var = (X.row(r).array() - mean).square().mean();
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      xhat.row(r) = (X.row(r).array() - mean) * is;
    }
    Mat out = (xhat.array().rowwise() * Gn.row(0).array()).rowwise() + Bs.row(0).array();
    return op(std::move(out), {x, gain, bias},
              [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, int self) {
                const Mat& G = g.nodes_[self].grad;
                if (g.requires_grad(gain)) g.accumulate(gain.id, Mat(G.cwiseProduct(xhat).colwise().sum()));
                if (g.requires_grad(bias)) g.accumulate(bias.id, Mat(G.colwise().sum()));
                if (!g.requires_grad(x)) return;
                const Mat dxhat = G.array().rowwise() * g.value(gain).row(0).array();
                Mat dx(G.rows(), G.cols());
                for (Index r = 0; r < G.rows(); ++r) {
                  const T m1 = dxhat.row(r).mean();
                  const T m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                  dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) *
                              inv_std[static_cast<std::size_t>(r)];
                }
                g.accumulate(x.id, dx);
              });
  }

  // tanh approximation of GELU.
  Var gelu(Var x) {
    const Mat& X = value(x);
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T k = static_cast<T>(0.044715);
    Mat th = (c * (X.array() + k * X.array().cube())).tanh().matrix();
    Mat out = (T(0.5) * X.array() * (T(1) + th.array())).matrix();
    return op(std::move(out), {x}, [x, c, k, th = std::move(th)](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      const auto X = g.value(x).array();
      auto d = T(0.5) * (T(1) + th.array()) +
               T(0.5) * X * (T(1) - th.array().square()) * c * (T(1) + T(3) * k * X.square());
      g.accumulate(x.id, Mat(G.array() * d));
    });
  }

  Var sigmoid(Var x) {
    Mat out = (T(1) / (T(1) + (-value(x).array()).exp())).matrix();
    return op(std::move(out), {x}, [x](Graph& g, int self) {
      const Mat& Y = g.nodes_[self].get();
      const Mat& G = g.nodes_[self].grad;
      g.accumulate(x.id, Mat(G.array() * Y.array() * (T(1) - Y.array())));
    });
  }

  Var softmax_rows(Var x) {
    Mat out = nn::softmax_rows(value(x));
    return op(std::move(out), {x}, [x](Graph& g, int self) {
      const Mat& P = g.nodes_[self].get();
      const Mat& G = g.nodes_[self].grad;
      Mat dx = P.cwiseProduct(G);
      for (Index r = 0; r < dx.rows(); ++r) dx.row(r) -= P.row(r) * dx.row(r).sum();
      g.accumulate(x.id, dx);
    });
  }

  // Inverted dropout with a mask hashed from `seed`; identity when rate == 0.
  Var dropout(Var x, double rate, std::uint64_t seed) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
    const Mat& X = value(x);
    const T kept = static_cast<T>(1.0 / (1.0 - rate));
    Mat mask(X.rows(), X.cols());
    for (Index i = 0; i < mask.size(); ++i)
      mask.data()[i] = unit_interval(mix64(seed + static_cast<std::uint64_t>(i))) >= rate ? kept : T(0);
    Mat out = X.cwiseProduct(mask);
    return op(std::move(out), {x}, [x, mask = std::move(mask)](Graph& g, int self) {
      g.accumulate(x.id, Mat(g.nodes_[self].grad.cwiseProduct(mask)));
    });
  }

  Var l2_normalize_rows(Var x) {
    const Mat& X = value(x);
    Mat out(X.rows(), X.cols());
    std::vector<T> norms(static_cast<std::size_t>(X.rows()));
    for (Index r = 0; r < X.rows(); ++r) {
      const T n = X.row(r).norm();
      if (!(n > T(0))) throw numeric_error("l2_normalize_rows: zero-norm row");
      norms[static_cast<std::size_t>(r)] = n;
      out.row(r) = X.row(r) / n;
    }
    return op(std::move(out), {x}, [x, norms = std::move(norms)](Graph& g, int self) {
      const Mat& Y = g.nodes_[self].get();
      const Mat& G = g.nodes_[self].grad;
      Mat dx(G.rows(), G.cols());
      for (Index r = 0; r < G.rows(); ++r) {
        const T proj = Y.row(r).dot(G.row(r));
        dx.row(r) = (G.row(r) - Y.row(r) * proj) / norms[static_cast<std::size_t>(r)];
      }
      g.accumulate(x.id, dx);
    });
  }

  // ------------------------------------------------------------ attention

  // Rotates every head block of x; row r sits at position positions[r]
  // (rows are positions 0..n-1 when positions is empty).
  Var rotary(Var x, const RotaryTable<T>& table, std::vector<int> positions = {}) {
    Mat out = value(x);
    table.rotate(out, positions);
    return op(std::move(out), {x}, [x, &table, positions = std::move(positions)](Graph& g, int self) {
      Mat G = g.nodes_[self].grad;
      table.rotate(G, positions, true);
      g.accumulate(x.id, G);
    });
  }

  // Multi-head causal attention; q, k, v are [rows, heads * d_head]. Rows are
  // split into consecutive segments (independent sequences); a row attends
  // only to earlier-or-equal rows of its own segment. Empty `segments` means
  // one segment spanning all rows.
  Var attention(Var q, Var k, Var v, Index heads, std::vector<Index> segments = {}) {
    const Mat& Q = value(q);
    const Mat& K = value(k);
    const Mat& V = value(v);
    if (heads <= 0 || Q.cols() % heads != 0 || Q.rows() != K.rows() || Q.rows() != V.rows() ||
        Q.cols() != K.cols() || Q.cols() != V.cols())
      throw shape_error("attention: shape mismatch");
    if (segments.empty()) segments.push_back(Q.rows());
    Index total = 0;
    for (Index len : segments) total += len;
    if (total != Q.rows()) throw shape_error("attention: segment lengths do not cover all rows");
    const Index dh = Q.cols() / heads;
    Mat out(Q.rows(), Q.cols());
    std::vector<Mat> probs;
    probs.reserve(segments.size() * static_cast<std::size_t>(heads));
    Index start = 0;
    for (Index len : segments) {
      for (Index h = 0; h < heads; ++h) {
        probs.emplace_back();
        out.block(start, h * dh, len, dh) =
            causal_attention<T>(Q.block(start, h * dh, len, dh), K.block(start, h * dh, len, dh),
                                V.block(start, h * dh, len, dh), &probs.back());
      }
      start += len;
    }
    return op(std::move(out), {q, k, v},
              [q, k, v, heads, dh, segments = std::move(segments), probs = std::move(probs)](Graph& g, int self) {
      const Mat& G = g.nodes_[self].grad;
      const Mat& Q = g.value(q);
      const Mat& K = g.value(k);
      const Mat& V = g.value(v);
      const T scale = T(1) / std::sqrt(static_cast<T>(dh));
      Mat dQ(Q.rows(), Q.cols()), dK(K.rows(), K.cols()), dV(V.rows(), V.cols());
      std::size_t at = 0;
      Index start = 0;
      for (Index len : segments) {
        for (Index h = 0; h < heads; ++h) {
          const Mat& P = probs[at++];
          const Mat Gh = G.block(start, h * dh, len, dh);
          dV.block(start, h * dh, len, dh).noalias() = P.transpose() * Gh;
          Mat dS(len, len);
          dS.noalias() = Gh * V.block(start, h * dh, len, dh).transpose();
          dS = P.cwiseProduct(dS);
          for (Index r = 0; r < len; ++r) dS.row(r) -= P.row(r) * dS.row(r).sum();
          dS *= scale;
          dQ.block(start, h * dh, len, dh).noalias() = dS * K.block(start, h * dh, len, dh);
          dK.block(start, h * dh, len, dh).noalias() = dS.transpose() * Q.block(start, h * dh, len, dh);
        }
        start += len;
      }
      if (g.requires_grad(q)) g.accumulate(q.id, dQ);
      if (g.requires_grad(k)) g.accumulate(k.id, dK);
      if (g.requires_grad(v)) g.accumulate(v.id, dV);
    });
  }

  // ---------------------------------------------------------------- losses

  // Mean over rows of -log softmax(sims[i] / tau)[i]. Entries where
  // `excluded` is non-zero are dropped from that row's denominator.
  Var info_nce(Var sims, T tau, const Mat* excluded = nullptr) {
    if (!(tau > T(0))) throw std::invalid_argument("info_nce: temperature must be positive");
    const Mat& S = value(sims);
    if (S.cols() < S.rows()) throw shape_error("info_nce: need at least one column per row");
    const Index n = S.rows();
    Mat P = Mat::Zero(n, S.cols());
    T loss = 0;
    for (Index i = 0; i < n; ++i) {
      T peak = -std::numeric_limits<T>::infinity();
      for (Index j = 0; j < S.cols(); ++j)
        if (j == i || !excluded || (*excluded)(i, j) == T(0)) peak = std::max(peak, S(i, j) / tau);
      T total = 0;
      for (Index j = 0; j < S.cols(); ++j) {
        if (j != i && excluded && (*excluded)(i, j) != T(0)) continue;
        P(i, j) = std::exp(S(i, j) / tau - peak);
        total += P(i, j);
      }
      P.row(i) /= total;
      loss -= std::log(P(i, i));
    }
    loss /= static_cast<T>(n);
    return op(Mat::Constant(1, 1, loss), {sims}, [sims, tau, P = std::move(P)](Graph& g, int self) {
      const T G = g.nodes_[self].grad(0, 0);
      Mat d = P;
      for (Index i = 0; i < d.rows(); ++i) d(i, i) -= T(1);
      d *= G / (tau * static_cast<T>(d.rows()));
      g.accumulate(sims.id, d);
    });
  }

  // Mean binary cross-entropy of sigmoid(logits) against {0,1} labels.
  Var bce_with_logits(Var logits, std::span<const T> labels) {
    const Mat& Z = value(logits);
    if (static_cast<std::size_t>(Z.size()) != labels.size()) throw shape_error("bce: label count mismatch");
    const Index n = Z.size();
    T loss = 0;
    Mat prob(Z.rows(), Z.cols());
    for (Index i = 0; i < n; ++i) {
      const T z = Z.data()[i];
      const T y = labels[static_cast<std::size_t>(i)];
      // softplus(z) - y z, evaluated stably.
      loss += std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z))) - y * z;
      prob.data()[i] = T(1) / (T(1) + std::exp(-z));
    }
    loss /= static_cast<T>(n);
    std::vector<T> y(labels.begin(), labels.end());
    return op(Mat::Constant(1, 1, loss), {logits}, [logits, prob = std::move(prob), y = std::move(y)](Graph& g, int self) {
      const T G = g.nodes_[self].grad(0, 0);
      Mat d = prob;
      for (Index i = 0; i < d.size(); ++i) d.data()[i] -= y[static_cast<std::size_t>(i)];
      d *= G / static_cast<T>(d.size());
      g.accumulate(logits.id, d);
    });
  }

  // Mean next-token cross-entropy; targets[t] < 0 marks an ignored row.
  Var cross_entropy(Var logits, std::span<const std::int32_t> targets) {
    const Mat& Z = value(logits);
    if (static_cast<std::size_t>(Z.rows()) != targets.size()) throw shape_error("cross_entropy: target count mismatch");
    Mat P = Mat::Zero(Z.rows(), Z.cols());
    T loss = 0;
    Index counted = 0;
    for (Index r = 0; r < Z.rows(); ++r) {
      const auto t = targets[static_cast<std::size_t>(r)];
      if (t < 0) continue;
      const T peak = Z.row(r).maxCoeff();
      P.row(r) = (Z.row(r).array() - peak).exp().matrix();
      const T total = P.row(r).sum();
      P.row(r) /= total;
      loss -= std::log(P(r, t));
      ++counted;
    }
    if (counted == 0) throw shape_error("cross_entropy: no targets");
    loss /= static_cast<T>(counted);
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    return op(Mat::Constant(1, 1, loss), {logits},
              [logits, counted, P = std::move(P), tg = std::move(tg)](Graph& g, int self) {
                const T G = g.nodes_[self].grad(0, 0);
                Mat d = P;
                for (Index r = 0; r < d.rows(); ++r)
                  if (tg[static_cast<std::size_t>(r)] >= 0) d(r, tg[static_cast<std::size_t>(r)]) -= T(1);
                d *= G / static_cast<T>(counted);
                g.accumulate(logits.id, d);
              });
  }

 private:
  struct Node {
    Mat owned;
    const Mat* ref = nullptr;
    Mat grad;
    bool requires_grad = false;
    Backward back;

    const Mat& get() const { return ref ? *ref : owned; }
  };

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("graph: invalid variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Var push_node(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var leaf(Mat value, bool requires_grad) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    return push_node(std::move(n));
  }

  Var op(Mat value, std::initializer_list<Var> inputs, Backward back) {
    return op(std::move(value), std::vector<Var>(inputs), std::move(back));
  }

  Var op(Mat value, const std::vector<Var>& inputs, Backward back) {
    if (check_finite_ || value.size() == 1) require_finite(value, "graph op");
    Node n;
    n.owned = std::move(value);
    for (Var in : inputs) n.requires_grad = n.requires_grad || requires_grad(in);
    if (n.requires_grad) n.back = std::move(back);
    return push_node(std::move(n));
  }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad.noalias() = g;
    else
      n.grad.noalias() += g;
  }

  Mat& zero_grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.get().rows(), n.get().cols());
    return n.grad;
  }

  std::vector<Node> nodes_;
  bool check_finite_ = true;
};

}  // namespace hammerlite::nn
