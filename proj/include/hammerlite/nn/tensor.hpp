#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace hammerlite::nn {

// Every tensor in the engine is a dense row-major matrix; vectors are 1 x n.
template <typename T>
using Tensor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
std::string shape_str(const Tensor<T>& t) {
  return "[" + std::to_string(t.rows()) + ", " + std::to_string(t.cols()) + "]";
}

template <typename T>
const Tensor<T>& require_finite(const Tensor<T>& t, const char* op) {
  if (!t.allFinite()) throw numeric_error(std::string(op) + ": non-finite value");
  return t;
}

// A named, ordered collection of parameter tensors. Gradients and optimizer
// moments are stored as vectors aligned with `values`.
template <typename T>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor<T>> values;

  std::size_t size() const { return values.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += static_cast<std::size_t>(v.size());
    return n;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.names != b.names || a.values.size() != b.values.size()) return false;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
      if (a.values[i].rows() != b.values[i].rows() || a.values[i].cols() != b.values[i].cols())
        return false;
      if (a.values[i] != b.values[i]) return false;
    }
    return true;
  }
};

template <typename T>
using GradSet = std::vector<Tensor<T>>;

template <typename T>
GradSet<T> zeros_like(const ParamSet<T>& params) {
  GradSet<T> out;
  out.reserve(params.size());
  for (const auto& v : params.values) out.push_back(Tensor<T>::Zero(v.rows(), v.cols()));
  return out;
}

template <typename To, typename From>
ParamSet<To> cast_params(const ParamSet<From>& in) {
  ParamSet<To> out;
  out.names = in.names;
  for (const auto& v : in.values) out.values.push_back(v.template cast<To>());
  return out;
}

}  // namespace hammerlite::nn
