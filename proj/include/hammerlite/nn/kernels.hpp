#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "hammerlite/nn/tensor.hpp"

namespace hammerlite::nn {

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_finite(x, "softmax_rows");
  Tensor<T> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const T peak = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// cos/sin of position * theta_i, theta_i = 10000^(-2i/d_head), for every
// position below `max_positions` and every rotation plane i < d_head/2.
template <typename T>
class RotaryTable {
 public:
  RotaryTable() = default;

  RotaryTable(Index max_positions, Index d_head) : d_head_(d_head) {
    if (d_head % 2 != 0) throw shape_error("rotary: head dimension must be even");
    const Index planes = d_head / 2;
    cos_.resize(max_positions, planes);
    sin_.resize(max_positions, planes);
    for (Index i = 0; i < planes; ++i) {
      const long double theta =
          std::pow(10000.0L, -2.0L * static_cast<long double>(i) / static_cast<long double>(d_head));
      for (Index m = 0; m < max_positions; ++m) {
        const long double angle = static_cast<long double>(m) * theta;
        cos_(m, i) = static_cast<T>(std::cos(angle));
        sin_(m, i) = static_cast<T>(std::sin(angle));
      }
    }
  }

  Index d_head() const { return d_head_; }
  Index max_positions() const { return cos_.rows(); }

  // Rotates each d_head-wide column block of x in place; row r sits at
  // position positions[r] (or r when positions is empty). `inverse` applies
  // the transpose rotation, which is the adjoint used in backprop.
  void rotate(Tensor<T>& x, std::span<const int> positions = {}, bool inverse = false) const {
    if (d_head_ == 0 || x.cols() % d_head_ != 0)
      throw shape_error("rotary: width " + std::to_string(x.cols()) +
                        " is not a multiple of the head dimension");
    const Index planes = d_head_ / 2;
    const T sign = inverse ? T(-1) : T(1);
    for (Index r = 0; r < x.rows(); ++r) {
      const Index m = positions.empty() ? r : positions[static_cast<std::size_t>(r)];
      if (m < 0 || m >= cos_.rows()) throw shape_error("rotary: position outside table");
      for (Index base = 0; base < x.cols(); base += d_head_) {
        for (Index i = 0; i < planes; ++i) {
          const T c = cos_(m, i);
          const T s = sign * sin_(m, i);
          T& a = x(r, base + 2 * i);
          T& b = x(r, base + 2 * i + 1);
          const T a0 = a;
          a = a0 * c - b * s;
          b = a0 * s + b * c;
        }
      }
    }
  }

 private:
  Index d_head_ = 0;
  Tensor<T> cos_;
  Tensor<T> sin_;
};

// Single-head rotary embedding with d_head = x.cols().
template <typename T>
Tensor<T> apply_rotary(const Tensor<T>& x, std::span<const int> positions) {
  if (x.cols() % 2 != 0) throw shape_error("rotary: head dimension must be even");
  int max_pos = 0;
  for (int p : positions) max_pos = std::max(max_pos, p);
  RotaryTable<T> table(max_pos + 1, x.cols());
  Tensor<T> out = x;
  table.rotate(out, positions);
  return out;
}

// softmax(q k^T / sqrt(d)) v with position t restricted to keys <= t.
// Optionally returns the attention probabilities.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           Tensor<T>* probs = nullptr) {
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols())
    throw shape_error("causal_attention: shape mismatch " + shape_str(q) + " " + shape_str(k) +
                      " " + shape_str(v));
  const Index n = q.rows();
  const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  Tensor<T> p = Tensor<T>::Zero(n, n);
  p.noalias() = (q * k.transpose()) * scale;
  for (Index t = 0; t < n; ++t) {
    const T peak = p.row(t).head(t + 1).maxCoeff();
    T total = 0;
    for (Index j = 0; j <= t; ++j) {
      p(t, j) = std::exp(p(t, j) - peak);
      total += p(t, j);
    }
    for (Index j = 0; j <= t; ++j) p(t, j) /= total;
    for (Index j = t + 1; j < n; ++j) p(t, j) = 0;
  }
  Tensor<T> out(n, v.cols());
  out.noalias() = p * v;
  if (probs) *probs = std::move(p);
  return out;
}

}  // namespace hammerlite::nn
