#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hammerlite/corpus.hpp"
#include "hammerlite/eval.hpp"
#include "hammerlite/model.hpp"
#include "hammerlite/retrieval.hpp"
#include "hammerlite/synth.hpp"
#include "hammerlite/text.hpp"
#include "hammerlite/training.hpp"

namespace hammerlite::pipeline {

// Retriever over a trained model; honours the config's mode, K_S, K_R and
// tactic-prompt flag, and each state's candidate set.
template <typename T>
eval::Retriever model_retriever(const model::Model<T>& m, const corpus::Corpus& c, const retrieval::PremiseIndex& index,
                                const eval::EvalConfig& cfg, const retrieval::EmbedOptions& opt = {}) {
  if (cfg.mode == eval::Mode::bm25) throw eval::eval_error("model retriever: bm25 mode needs a bm25 retriever");
  const auto mode = cfg.mode == eval::Mode::full ? retrieval::Mode::full : retrieval::Mode::select_only;
  const auto ks = static_cast<std::size_t>(cfg.select_k);
  const auto kr = static_cast<std::size_t>(cfg.rerank_k);
  return [&m, &c, &index, opt, mode, ks, kr](corpus::StateId id, const std::string* tactic) {
    const auto& state = c.state(id);
    const std::string query = tactic ? text::tactic_prompt(state.text, *tactic) : state.text;
    const auto emb = retrieval::embed_state_texts(m, {query}, opt);
    const auto r = retrieval::retrieve(query, emb, index, ks, kr, mode, retrieval::model_pair_scorer(m, c, opt),
                                       c.candidate_ids(id));
    return r.names(c);
  };
}

// BM25 over the state text; the tactic prompt is ignored.
inline eval::Retriever bm25_retriever(const retrieval::Bm25Index& index, const corpus::Corpus& c, std::size_t k) {
  return [&index, &c, k](corpus::StateId id, const std::string*) {
    return retrieval::bm25_topk(c.state(id).text, index, k, c.candidate_ids(id)).names(c);
  };
}

inline std::size_t max_k(const eval::EvalConfig& cfg) {
  return static_cast<std::size_t>(std::max(1, cfg.k_list.back()));
}

// Synthetic benchmark, alternating training and evaluation in one call.
struct Spec {
  synth::SynthSpec synth;
  model::ModelConfig model;
  training::TrainConfig train = training::TrainConfig::desk();
  eval::EvalConfig eval;
  corpus::Split eval_split = corpus::Split::test;
  std::uint64_t seed = 1;
  int workers = 1;
};

inline nlohmann::ordered_json to_json(const Spec& s) {
  return {{"synth", synth::to_json(s.synth)},   {"model", model::to_json(s.model)},
          {"train", training::to_json(s.train)}, {"eval", eval::to_json(s.eval)},
          {"eval_split", corpus::to_string(s.eval_split)}, {"seed", s.seed},
          {"workers", s.workers}};
}

struct Result {
  model::Model<float> model;
  std::vector<training::MetricsRecord> log;
  eval::EvalReport report;
};

inline eval::EvalReport evaluate_model(const model::Model<float>& m, const synth::Benchmark& bench,
                                       const eval::EvalConfig& cfg, corpus::Split split, int workers) {
  const auto theorems = bench.corpus.state_ids(split);
  if (cfg.mode == eval::Mode::bm25) {
    const auto bm = retrieval::bm25_build(bench.corpus);
    return eval::evaluate_suite(theorems, bm25_retriever(bm, bench.corpus, max_k(cfg)), bench.oracle, cfg, workers);
  }
  const retrieval::EmbedOptions opt{1, 16};
  const auto index = retrieval::build_index(m, bench.corpus, std::nullopt, {workers, 16});
  return eval::evaluate_suite(theorems, model_retriever(m, bench.corpus, index, cfg, opt), bench.oracle, cfg, workers);
}

inline Result run(const Spec& s) {
  const auto bench = synth::generate(s.synth);
  auto init = model::Model<float>::init(s.model, derive_seed(s.seed, {1}));
  training::TrainOptions opt;
  opt.exec.workers = s.workers;
  auto trained = training::train_alternating(std::move(init), bench.corpus, s.train, derive_seed(s.seed, {2}), opt);
  auto report = evaluate_model(trained.model, bench, s.eval, s.eval_split, s.workers);
  return {std::move(trained.model), std::move(trained.log), std::move(report)};
}

}  // namespace hammerlite::pipeline
