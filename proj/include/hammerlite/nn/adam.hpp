#pragma once

#include <cmath>
#include <cstdint>

#include "hammerlite/nn/tensor.hpp"

namespace hammerlite::nn {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: theta <- theta - lr * decay * theta
};

template <typename T>
struct AdamState {
  AdamOptions options;
  GradSet<T> m;
  GradSet<T> v;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(const ParamSet<T>& params, AdamOptions opts)
      : options(opts), m(zeros_like(params)), v(zeros_like(params)) {}
};

// Decoupled weight decay followed by the bias-corrected Adam update.
template <typename T>
void adam_step(ParamSet<T>& params, const GradSet<T>& grads, AdamState<T>& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw shape_error("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].rows() != params.values[i].rows() || grads[i].cols() != params.values[i].cols())
      throw shape_error("adam_step: shape mismatch for " + params.names[i]);
    if (!grads[i].allFinite()) throw numeric_error("adam_step: non-finite gradient for " + params.names[i]);
  }
  const auto& o = state.options;
  state.step += 1;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(o.beta1);
  const T b2 = static_cast<T>(o.beta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(o.eps);
  const T decay = static_cast<T>(1.0 - lr * o.weight_decay);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto g = grads[i].array();
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.square();
    auto p = params.values[i].array();
    if (o.weight_decay != 0.0) p *= decay;
    p -= step_size * m / (v.sqrt() * inv_sqrt_c2 + eps);
  }
}

}  // namespace hammerlite::nn
