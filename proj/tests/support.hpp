#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hammerlite/nn/graph.hpp"
#include "hammerlite/nn/tensor.hpp"

namespace hl_test {

using Mat = hammerlite::nn::Tensor<double>;
using hammerlite::nn::Graph;
using hammerlite::nn::Var;

inline Mat random_mat(std::mt19937_64& rng, long rows, long cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(rows, cols);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Scalar function of one matrix input built on a fresh graph.
using Builder = std::function<Var(Graph<double>&, Var)>;

inline double eval_scalar(const Builder& f, const Mat& x) {
  Graph<double> g;
  Var v = g.variable(x);
  return g.value(f(g, v))(0, 0);
}

inline Mat analytic_grad(const Builder& f, const Mat& x) {
  Graph<double> g;
  Var v = g.variable(x);
  g.backward(f(g, v));
  return g.grad_or_zero(v);
}

inline Mat numeric_grad(const Builder& f, const Mat& x, double h = 1e-5) {
  Mat out(x.rows(), x.cols());
  Mat probe = x;
  for (long i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double up = eval_scalar(f, probe);
    probe.data()[i] = orig - h;
    const double down = eval_scalar(f, probe);
    probe.data()[i] = orig;
    out.data()[i] = (up - down) / (2 * h);
  }
  return out;
}

// Largest |a - n| / max(|a|, |n|, floor) over all coordinates.
inline double max_rel_error(const Mat& a, const Mat& n, double floor = 1e-4) {
  double worst = 0;
  for (long i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a.data()[i]), std::abs(n.data()[i]), floor});
    worst = std::max(worst, std::abs(a.data()[i] - n.data()[i]) / scale);
  }
  return worst;
}

// Reduces a matrix output to a scalar with fixed random weights, so every
// output coordinate carries a distinct gradient.
inline Var weighted_sum(Graph<double>& g, Var out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const Mat& v = g.value(out);
  return g.sum(g.mul(out, g.constant(random_mat(rng, v.rows(), v.cols()))));
}

}  // namespace hl_test
