#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "hammerlite/model.hpp"
#include "hammerlite/text.hpp"
#include "hammerlite/util/random.hpp"

namespace hammerlite::gradcheck {

// Small random batch that drives all three heads: InfoNCE over state and
// premise embeddings plus BCE over rerank pairs.
struct Fixture {
  std::vector<text::TokenSeq> states;
  std::vector<text::TokenSeq> premises;  // premises[i] is the positive of states[i]
  std::vector<text::TokenSeq> pairs;
  std::vector<double> labels;
  double temperature = 0.5;
};

inline Fixture make_fixture(std::uint64_t seed, int n_states = 3, int n_extra = 2, int n_pairs = 4, int max_len = 12) {
  Rng rng(derive_seed(seed, {0xf1c}));
  auto random_text = [&] {
    std::string s(1 + uniform_index(rng, static_cast<std::size_t>(max_len)), ' ');
    for (auto& ch : s) ch = static_cast<char>('a' + uniform_index(rng, 26));
    return s;
  };
  Fixture f;
  const std::size_t ctx = 64;
  for (int i = 0; i < n_states; ++i) f.states.push_back(text::encode_state(random_text(), ctx));
  for (int i = 0; i < n_states + n_extra; ++i) f.premises.push_back(text::encode_premise(random_text(), ctx));
  for (int i = 0; i < n_pairs; ++i) {
    f.pairs.push_back(text::encode_pair(random_text(), random_text(), ctx));
    f.labels.push_back(i % 2 == 0 ? 1.0 : 0.0);
  }
  return f;
}

// Composite loss; fills `grads` (aligned with the model's parameters) when
// non-null.
template <typename T>
double composite_loss(const model::Model<T>& m, const Fixture& f, nn::GradSet<T>* grads = nullptr) {
  nn::Graph<T> g;
  auto p = m.bind(g, grads != nullptr);
  model::SeqBatch s(f.states.begin(), f.states.end());
  model::SeqBatch q(f.premises.begin(), f.premises.end());
  model::SeqBatch r(f.pairs.begin(), f.pairs.end());
  nn::Var sims = g.matmul_nt(m.state_embeddings(g, p, s), m.premise_embeddings(g, p, q));
  nn::Var contrastive = g.info_nce(sims, static_cast<T>(f.temperature));
  std::vector<T> labels(f.labels.begin(), f.labels.end());
  nn::Var bce = g.bce_with_logits(m.rerank_logits(g, p, r), labels);
  nn::Var loss = g.add(contrastive, bce);
  if (grads) {
    g.backward(loss);
    grads->clear();
    for (nn::Var v : p) grads->push_back(g.grad_or_zero(v));
  }
  return static_cast<double>(g.value(loss)(0, 0));
}

struct Coordinate {
  std::size_t tensor = 0;
  nn::Index index = 0;
};

// Round-robin over tensors, uniform within each; embedding coordinates are
// restricted to rows of tokens the fixture uses.
inline std::vector<Coordinate> sample_coordinates(const nn::ParamSet<double>& params, const Fixture& f, std::size_t n,
                                                  std::uint64_t seed) {
  std::set<text::Token> used;
  for (const auto* group : {&f.states, &f.premises, &f.pairs})
    for (const auto& seq : *group) used.insert(seq.begin(), seq.end());
  const std::vector<text::Token> rows(used.begin(), used.end());
  Rng rng(derive_seed(seed, {0xc0}));
  std::vector<Coordinate> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = i % params.size();
    const auto& v = params.values[t];
    nn::Index idx;
    if (t == model::Layout::embedding) {
      const auto row = rows[uniform_index(rng, rows.size())];
      idx = static_cast<nn::Index>(row) * v.cols() + static_cast<nn::Index>(uniform_index(rng, static_cast<std::size_t>(v.cols())));
    } else {
      idx = static_cast<nn::Index>(uniform_index(rng, static_cast<std::size_t>(v.size())));
    }
    out.push_back({t, idx});
  }
  return out;
}

struct Report {
  double max_rel_error = 0.0;
  std::size_t samples = 0;
  std::string worst_param;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// |a - n| / max(|a|, |n|), with both-zero pairs counted as exact.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

// Adds N(0, scale^2) noise to every parameter so attention is far from
// uniform and gradients sit well above finite-difference roundoff.
inline void perturb(nn::ParamSet<double>& params, std::uint64_t seed, double scale) {
  Rng rng(derive_seed(seed, {0x9e7}));
  std::normal_distribution<double> noise(0.0, scale);
  for (auto& v : params.values)
    for (nn::Index i = 0; i < v.size(); ++i) v.data()[i] += noise(rng);
}

// Central differences in double precision at `samples` coordinates.
inline Report check(const model::ModelConfig& cfg, std::uint64_t seed, std::size_t samples = 200, double h = 1e-5,
                    double perturbation = 0.1) {
  auto m = model::Model<double>::init(cfg, seed);
  if (perturbation > 0) perturb(m.params(), seed, perturbation);
  const auto f = make_fixture(seed);
  nn::GradSet<double> grads;
  composite_loss(m, f, &grads);
  Report rep;
  for (const auto& at : sample_coordinates(m.params(), f, samples, seed)) {
    double& x = m.params().values[at.tensor].data()[at.index];
    const double orig = x;
    x = orig + h;
    const double up = composite_loss(m, f);
    x = orig - h;
    const double down = composite_loss(m, f);
    x = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grads[at.tensor].data()[at.index];
    const double err = relative_error(analytic, numeric);
    ++rep.samples;
    if (err >= rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_param = m.params().names[at.tensor];
      rep.worst_analytic = analytic;
      rep.worst_numeric = numeric;
    }
  }
  return rep;
}

}  // namespace hammerlite::gradcheck
