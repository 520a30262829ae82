#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "hammerlite/nn/graph.hpp"
#include "hammerlite/util/parallel.hpp"

namespace hammerlite::nn {

struct ExecPolicy {
  int workers = 1;
  // Items per sub-graph. Fixed independently of `workers` so gradient sums
  // happen in the same order for every worker count.
  std::size_t chunk = 8;
  bool check_finite = false;
};

// Loss over a batch of items whose forward passes are independent and are
// coupled only through a small head (e.g. a similarity matrix).
//
//   group_fn(graph, params, begin, end) -> Var   forward pass for items
//                                                [begin, end); one output row
//                                                per item
//   loss_fn(head, outputs) -> Var                scalar loss; `outputs` holds
//                                                every item's row, in order
//
// Groups of `exec.chunk` items run on `exec.workers` threads, each in its own
// sub-graph. The head is differentiated first, then each sub-graph is seeded
// with its rows of the output gradient and swept backwards. Partial parameter
// gradients are summed in group order. Pass grads == nullptr for a
// forward-only evaluation.
template <typename T, typename GroupFn, typename LossFn>
T value_and_grad(const ParamSet<T>& params, std::size_t n_items, GroupFn&& group_fn, LossFn&& loss_fn,
                 GradSet<T>* grads, const ExecPolicy& exec = {}) {
  if (n_items == 0) throw shape_error("value_and_grad: empty batch");
  const std::size_t chunk = std::max<std::size_t>(1, exec.chunk);
  const std::size_t n_groups = (n_items + chunk - 1) / chunk;
  const bool need_grad = grads != nullptr;

  struct SubGraph {
    Graph<T> graph;
    std::vector<Var> params;
    Var output;
  };
  std::vector<SubGraph> subs(n_groups);
  std::vector<Tensor<T>> outputs(n_groups);

  parallel_for(n_groups, exec.workers, [&](std::size_t c) {
    SubGraph& sub = subs[c];
    sub.graph.set_check_finite(exec.check_finite);
    sub.params.reserve(params.size());
    for (const auto& v : params.values) sub.params.push_back(sub.graph.input(v, need_grad));
    const std::size_t begin = c * chunk;
    const std::size_t end = std::min(n_items, begin + chunk);
    sub.output = group_fn(sub.graph, static_cast<const std::vector<Var>&>(sub.params), begin, end);
    outputs[c] = require_finite(sub.graph.value(sub.output), "batch item output");
    if (outputs[c].rows() != static_cast<Index>(end - begin))
      throw shape_error("value_and_grad: group output needs one row per item");
    if (!need_grad) sub = SubGraph{};
  });

  Index cols = outputs[0].cols();
  Tensor<T> stacked(static_cast<Index>(n_items), cols);
  for (std::size_t c = 0; c < n_groups; ++c) {
    if (outputs[c].cols() != cols) throw shape_error("value_and_grad: group outputs differ in width");
    stacked.middleRows(static_cast<Index>(c * chunk), outputs[c].rows()) = outputs[c];
  }
  outputs.clear();

  Graph<T> head;
  Var leaf = head.variable(std::move(stacked));
  Var loss = loss_fn(head, leaf);
  if (head.value(loss).size() != 1) throw shape_error("value_and_grad: loss must be scalar");
  const T value = head.value(loss)(0, 0);
  if (!need_grad) return value;
  head.backward(loss);
  const Tensor<T> seed = head.grad_or_zero(leaf);

  std::vector<GradSet<T>> partial(n_groups);
  parallel_for(n_groups, exec.workers, [&](std::size_t c) {
    SubGraph& sub = subs[c];
    const Index rows = sub.graph.value(sub.output).rows();
    sub.graph.seed(sub.output, seed.middleRows(static_cast<Index>(c * chunk), rows));
    sub.graph.propagate();
    partial[c].resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) partial[c][p] = sub.graph.grad(sub.params[p]);
    sub = SubGraph{};
  });

  *grads = zeros_like(params);
  for (const auto& part : partial)
    for (std::size_t p = 0; p < params.size(); ++p)
      if (part[p].size() != 0) (*grads)[p] += part[p];
  for (const auto& g : *grads) require_finite(g, "gradient");
  return value;
}

}  // namespace hammerlite::nn
