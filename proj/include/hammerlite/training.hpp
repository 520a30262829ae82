#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hammerlite/corpus.hpp"
#include "hammerlite/model.hpp"
#include "hammerlite/nn/adam.hpp"
#include "hammerlite/nn/batch_backprop.hpp"
#include "hammerlite/nn/schedule.hpp"
#include "hammerlite/retrieval.hpp"
#include "hammerlite/text.hpp"
#include "hammerlite/util/random.hpp"

namespace hammerlite::training {

using corpus::Corpus;
using corpus::Datapoint;
using corpus::PremiseId;
using corpus::StateId;
using nn::Var;

class training_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int select_batch = 32;       // N states (and N positives) per select step
  int extra_negatives = 32;    // M shared negatives per select step
  double temperature = 0.07;
  int rerank_positives = 2;
  int negatives_per_positive = 15;
  int mined_pool = 1024;
  int refresh_interval = 50;   // T: steps between negative mining (and metric records)
  double lr = 1e-4;
  double dropout = 0.0;
  double weight_decay = 0.02;
  double warmup_fraction = 0.05;
  int steps = 2000;
  int probe_states = 128;      // validation states used for probe recall
  int recall_k = 10;
  bool mask_collisions = true; // drop in-batch columns that are gt for the row's state
  // Early stopping, checked at every refresh; 0 disables.
  double stop_at_train_recall = 0.0;
  int patience = 0;            // refreshes without probe-recall improvement

  static TrainConfig desk() { return {}; }

  static TrainConfig full_scale() {
    TrainConfig c;
    c.select_batch = 256;
    c.extra_negatives = 768;
    c.rerank_positives = 16;
    c.refresh_interval = 1000;
    c.lr = 2e-4;
    c.dropout = 0.1;
    c.steps = 100000;
    c.probe_states = 1024;
    return c;
  }

  void validate() const {
    if (select_batch < 1 || extra_negatives < 0) throw training_error("train config: need N >= 1 and M >= 0");
    if (!(temperature > 0.0)) throw training_error("train config: temperature must be positive");
    if (rerank_positives < 1 || negatives_per_positive < 1 || mined_pool < 1)
      throw training_error("train config: rerank sizes must be positive");
    if (refresh_interval < 1) throw training_error("train config: refresh interval must be >= 1");
    if (!(lr > 0.0)) throw training_error("train config: lr must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw training_error("train config: dropout must lie in [0, 1)");
    if (weight_decay < 0.0) throw training_error("train config: weight decay must be >= 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0))
      throw training_error("train config: warmup fraction must lie in [0, 1]");
    if (steps < 0) throw training_error("train config: steps must be >= 0");
    if (recall_k < 1) throw training_error("train config: recall_k must be >= 1");
    if (probe_states < 0 || patience < 0) throw training_error("train config: negative probe settings");
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"select_batch", c.select_batch},
          {"extra_negatives", c.extra_negatives},
          {"temperature", c.temperature},
          {"rerank_positives", c.rerank_positives},
          {"negatives_per_positive", c.negatives_per_positive},
          {"mined_pool", c.mined_pool},
          {"refresh_interval", c.refresh_interval},
          {"lr", c.lr},
          {"dropout", c.dropout},
          {"weight_decay", c.weight_decay},
          {"warmup_fraction", c.warmup_fraction},
          {"steps", c.steps},
          {"probe_states", c.probe_states},
          {"recall_k", c.recall_k},
          {"mask_collisions", c.mask_collisions},
          {"stop_at_train_recall", c.stop_at_train_recall},
          {"patience", c.patience}};
}

// ---------------------------------------------------------------------------
// Training view of a corpus: training pairs and cached encodings.

class TrainData {
 public:
  TrainData(const Corpus& c, int context) : corpus_(&c), ctx_(static_cast<std::size_t>(context)) {
    for (const auto& d : corpus::pairs_or_extract(c))
      if (c.state(d.state_id).split == corpus::Split::train) pairs_.push_back(d);
    std::set<StateId> seen;
    for (const auto& d : pairs_)
      if (seen.insert(d.state_id).second) states_.push_back(d.state_id);
    for (const auto& p : c.premises()) premise_tokens_.emplace(p.id, text::encode_premise(corpus::premise_text(p), ctx_));
    for (StateId s : states_) state_tokens_.emplace(s, text::encode_state(c.state(s).text, ctx_));
  }

  const Corpus& corpus() const { return *corpus_; }
  const std::vector<Datapoint>& pairs() const { return pairs_; }
  const std::vector<StateId>& states() const { return states_; }
  std::size_t context() const { return ctx_; }

  const text::TokenSeq& premise_tokens(PremiseId id) const { return premise_tokens_.at(id); }

  const text::TokenSeq& state_tokens(StateId id) const {
    auto it = state_tokens_.find(id);
    if (it == state_tokens_.end()) throw training_error("state " + std::to_string(id) + " is not a training state");
    return it->second;
  }

  text::TokenSeq pair_tokens(StateId s, PremiseId p) const {
    return text::encode_pair(corpus_->state(s).text, corpus::premise_text(corpus_->premise(p)), ctx_);
  }

 private:
  const Corpus* corpus_;
  std::size_t ctx_;
  std::vector<Datapoint> pairs_;
  std::vector<StateId> states_;
  std::unordered_map<PremiseId, text::TokenSeq> premise_tokens_;
  std::unordered_map<StateId, text::TokenSeq> state_tokens_;
};

// ---------------------------------------------------------------------------
// Select batches

struct SelectBatch {
  std::vector<StateId> states;
  std::vector<PremiseId> positives;  // positives[i] is a gt premise of states[i]
  std::vector<PremiseId> negatives;  // shared; gt for none of `states`

  friend bool operator==(const SelectBatch&, const SelectBatch&) = default;
};

// N training pairs with distinct states, uniformly without replacement, plus M
// shared negatives drawn uniformly from premises that are gt for no batch
// state.
inline SelectBatch build_select_batch(const TrainData& data, int n, int m, std::uint64_t seed) {
  const Corpus& c = data.corpus();
  Rng rng(derive_seed(seed, {0x5e1ec7}));
  SelectBatch b;
  std::set<StateId> used;
  for (auto i : sample_without_replacement(rng, data.pairs().size(), data.pairs().size())) {
    if (static_cast<int>(b.states.size()) == n) break;
    const auto& d = data.pairs()[i];
    if (!used.insert(d.state_id).second) continue;
    b.states.push_back(d.state_id);
    b.positives.push_back(d.premise_id);
  }
  if (static_cast<int>(b.states.size()) < n)
    throw training_error("select batch: need " + std::to_string(n) + " distinct training states, corpus has " +
                         std::to_string(b.states.size()));
  std::set<PremiseId> gt;
  for (StateId s : b.states)
    for (PremiseId p : c.gt_ids(s)) gt.insert(p);
  std::vector<PremiseId> eligible;
  for (const auto& p : c.premises())
    if (!gt.contains(p.id)) eligible.push_back(p.id);
  if (static_cast<int>(eligible.size()) < m)
    throw training_error("select batch: only " + std::to_string(eligible.size()) +
                         " premises are valid negatives, need " + std::to_string(m));
  for (auto i : sample_without_replacement(rng, eligible.size(), static_cast<std::size_t>(m)))
    b.negatives.push_back(eligible[i]);
  return b;
}

// Non-zero where column j (a batch premise other than row i's own positive)
// is a ground-truth premise of state i.
template <typename T>
nn::Tensor<T> collision_mask(const Corpus& c, const SelectBatch& b) {
  const auto n = static_cast<nn::Index>(b.states.size());
  const auto cols = n + static_cast<nn::Index>(b.negatives.size());
  nn::Tensor<T> mask = nn::Tensor<T>::Zero(n, cols);
  for (nn::Index i = 0; i < n; ++i)
    for (nn::Index j = 0; j < n; ++j)
      if (j != i && c.is_gt(b.states[static_cast<std::size_t>(i)], b.positives[static_cast<std::size_t>(j)]))
        mask(i, j) = T(1);
  return mask;
}

// ---------------------------------------------------------------------------
// Mined negatives and rerank batches

struct MinedTable {
  std::map<StateId, std::vector<PremiseId>> pools;  // best-first

  friend bool operator==(const MinedTable&, const MinedTable&) = default;
};

// Embeddings of every premise and of a set of states under the current model.
struct EmbeddingSnapshot {
  retrieval::PremiseIndex index;
  std::map<StateId, nn::Tensor<double>> states;
};

template <typename T>
EmbeddingSnapshot snapshot_embeddings(const model::Model<T>& m, const Corpus& c, const std::vector<StateId>& states,
                                      const retrieval::EmbedOptions& opt) {
  EmbeddingSnapshot s{retrieval::build_index(m, c, std::nullopt, opt), {}};
  std::vector<std::string> texts;
  for (StateId id : states) texts.push_back(c.state(id).text);
  if (texts.empty()) return s;
  const auto emb = retrieval::embed_state_texts(m, texts, opt);
  for (std::size_t i = 0; i < states.size(); ++i) s.states.emplace(states[i], emb.row(static_cast<nn::Index>(i)));
  return s;
}

// Scores against the state's visible premises (its candidate set, or all).
inline std::vector<retrieval::Scored> visible_scores(const Corpus& c, const EmbeddingSnapshot& snap, StateId s) {
  auto all = snap.index.score_all(snap.states.at(s));
  if (auto cand = c.candidate_ids(s)) {
    std::set<PremiseId> keep(cand->begin(), cand->end());
    std::erase_if(all, [&](const retrieval::Scored& x) { return !keep.contains(x.id); });
  }
  return all;
}

// Per state: its non-gt premises ranked by select score, top `pool_size`.
inline MinedTable mine_negatives(const Corpus& c, const EmbeddingSnapshot& snap, const std::vector<StateId>& states,
                                 int pool_size) {
  MinedTable t;
  for (StateId s : states) {
    auto all = visible_scores(c, snap, s);
    std::erase_if(all, [&](const retrieval::Scored& x) { return c.is_gt(s, x.id); });
    std::vector<PremiseId> pool;
    for (const auto& x : retrieval::top_k(std::move(all), static_cast<std::size_t>(pool_size))) pool.push_back(x.id);
    t.pools.emplace(s, std::move(pool));
  }
  return t;
}

template <typename T>
MinedTable recompute_negatives_for_rerank(const model::Model<T>& m, const TrainData& data, int pool_size,
                                          const retrieval::EmbedOptions& opt = {}) {
  return mine_negatives(data.corpus(), snapshot_embeddings(m, data.corpus(), data.states(), opt), data.states(),
                        pool_size);
}

struct RerankBatch {
  std::vector<StateId> states;
  std::vector<PremiseId> premises;
  std::vector<double> labels;
  std::size_t skipped = 0;  // sampled pairs dropped because their state has no negatives

  std::size_t size() const { return labels.size(); }
  friend bool operator==(const RerankBatch&, const RerankBatch&) = default;
};

// `positives` training pairs, each followed by `negatives` draws from its
// state's mined pool (without replacement unless the pool is smaller).
inline RerankBatch build_rerank_batch(const MinedTable& mined, const TrainData& data, int positives, int negatives,
                                      std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x2e2a4c}));
  RerankBatch b;
  int taken = 0;
  for (auto i : sample_without_replacement(rng, data.pairs().size(), data.pairs().size())) {
    if (taken == positives) break;
    const auto& d = data.pairs()[i];
    auto it = mined.pools.find(d.state_id);
    if (it == mined.pools.end() || it->second.empty()) {
      ++b.skipped;
      continue;
    }
    const auto& pool = it->second;
    b.states.push_back(d.state_id);
    b.premises.push_back(d.premise_id);
    b.labels.push_back(1.0);
    const auto k = static_cast<std::size_t>(negatives);
    if (pool.size() >= k) {
      for (auto j : sample_without_replacement(rng, pool.size(), k)) {
        b.states.push_back(d.state_id);
        b.premises.push_back(pool[j]);
        b.labels.push_back(0.0);
      }
    } else {
      for (std::size_t j = 0; j < k; ++j) {
        b.states.push_back(d.state_id);
        b.premises.push_back(pool[uniform_index(rng, pool.size())]);
        b.labels.push_back(0.0);
      }
    }
    ++taken;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Losses with gradients

template <typename T>
double select_loss(const model::Model<T>& m, const TrainData& data, const SelectBatch& b, const TrainConfig& cfg,
                   std::uint64_t dropout_seed, nn::GradSet<T>* grads, const nn::ExecPolicy& exec) {
  const std::size_t n = b.states.size();
  std::vector<std::span<const text::Token>> seqs;
  for (StateId s : b.states) seqs.emplace_back(data.state_tokens(s));
  for (PremiseId p : b.positives) seqs.emplace_back(data.premise_tokens(p));
  for (PremiseId p : b.negatives) seqs.emplace_back(data.premise_tokens(p));
  const nn::Tensor<T> mask = collision_mask<T>(data.corpus(), b);
  const double rate = grads ? cfg.dropout : 0.0;

  auto group = [&](nn::Graph<T>& g, const std::vector<Var>& p, std::size_t begin, std::size_t end) {
    std::vector<Var> parts;
    const model::DropoutCtx drop{rate, derive_seed(dropout_seed, {begin})};
    if (begin < n) {
      model::SeqBatch sb(seqs.begin() + static_cast<std::ptrdiff_t>(begin),
                         seqs.begin() + static_cast<std::ptrdiff_t>(std::min(end, n)));
      parts.push_back(m.state_embeddings(g, p, sb, drop));
    }
    if (end > n) {
      model::SeqBatch sb(seqs.begin() + static_cast<std::ptrdiff_t>(std::max(begin, n)),
                         seqs.begin() + static_cast<std::ptrdiff_t>(end));
      parts.push_back(m.premise_embeddings(g, p, sb, {drop.rate, derive_seed(drop.seed, {1})}));
    }
    return parts.size() == 1 ? parts[0] : g.stack_rows(parts);
  };
  auto loss = [&](nn::Graph<T>& g, Var all) {
    std::vector<nn::Index> rows_s, rows_p;
    for (std::size_t i = 0; i < seqs.size(); ++i) (i < n ? rows_s : rows_p).push_back(static_cast<nn::Index>(i));
    Var sims = g.matmul_nt(g.gather_rows(all, rows_s), g.gather_rows(all, rows_p));
    return g.info_nce(sims, static_cast<T>(cfg.temperature), cfg.mask_collisions ? &mask : nullptr);
  };
  return static_cast<double>(nn::value_and_grad<T>(m.params(), seqs.size(), group, loss, grads, exec));
}

template <typename T>
double rerank_loss(const model::Model<T>& m, const TrainData& data, const RerankBatch& b, const TrainConfig& cfg,
                   std::uint64_t dropout_seed, nn::GradSet<T>* grads, const nn::ExecPolicy& exec) {
  if (b.size() == 0) throw training_error("rerank batch is empty");
  std::vector<text::TokenSeq> pairs;
  pairs.reserve(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) pairs.push_back(data.pair_tokens(b.states[i], b.premises[i]));
  std::vector<T> labels(b.labels.begin(), b.labels.end());
  const double rate = grads ? cfg.dropout : 0.0;

  auto group = [&](nn::Graph<T>& g, const std::vector<Var>& p, std::size_t begin, std::size_t end) {
    model::SeqBatch sb(pairs.begin() + static_cast<std::ptrdiff_t>(begin), pairs.begin() + static_cast<std::ptrdiff_t>(end));
    return m.rerank_logits(g, p, sb, {rate, derive_seed(dropout_seed, {begin})});
  };
  auto loss = [&](nn::Graph<T>& g, Var logits) { return g.bce_with_logits(logits, labels); };
  return static_cast<double>(nn::value_and_grad<T>(m.params(), pairs.size(), group, loss, grads, exec));
}

// ---------------------------------------------------------------------------
// Recall probes

// Fraction of (state, gt premise) pairs whose premise is in the state's
// select top-k, pooled over `states`.
inline double pair_recall_at_k(const Corpus& c, const EmbeddingSnapshot& snap, const std::vector<StateId>& states,
                               int k) {
  std::size_t hits = 0, total = 0;
  for (StateId s : states) {
    const auto& gt = c.gt_ids(s);
    if (gt.empty()) continue;
    auto top = retrieval::top_k(visible_scores(c, snap, s), static_cast<std::size_t>(k));
    for (PremiseId p : gt) {
      ++total;
      if (std::any_of(top.begin(), top.end(), [&](const auto& x) { return x.id == p; })) ++hits;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

inline std::vector<StateId> probe_states(const Corpus& c, int limit) {
  std::vector<StateId> out;
  for (const auto& s : c.states()) {
    if (static_cast<int>(out.size()) >= limit) break;
    if (s.split == corpus::Split::valid && !c.gt_ids(s.id).empty()) out.push_back(s.id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alternating training loop

struct MetricsRecord {
  std::int64_t step = 0;
  std::optional<double> select_loss;  // mean over the steps since the previous record
  std::optional<double> rerank_loss;
  std::optional<double> probe_recall;
  double train_recall = 0.0;
  std::int64_t select_steps = 0;
  std::int64_t rerank_steps = 0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

inline nlohmann::ordered_json to_json(const MetricsRecord& r, int k = 10) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
  const std::string kk = std::to_string(k);
  return {{"step", r.step},
          {"select_loss", opt(r.select_loss)},
          {"rerank_loss", opt(r.rerank_loss)},
          {"probe_recall@" + kk, opt(r.probe_recall)},
          {"train_recall@" + kk, r.train_recall},
          {"select_steps", r.select_steps},
          {"rerank_steps", r.rerank_steps}};
}

template <typename T>
struct TrainResult {
  model::Model<T> model;
  std::vector<MetricsRecord> log;
  std::int64_t steps_run = 0;
  std::vector<std::string> warnings;
  bool stopped_early = false;
};

struct TrainOptions {
  nn::ExecPolicy exec{};
  std::function<void(const MetricsRecord&)> on_record;
};

template <typename T>
TrainResult<T> train_alternating(model::Model<T> model, const Corpus& c, const TrainConfig& cfg, std::uint64_t seed,
                                 const TrainOptions& opt = {}) {
  cfg.validate();
  TrainResult<T> res{std::move(model), {}, 0, {}, false};
  model::Model<T>& m = res.model;
  const TrainData data(c, m.config().context);
  if (data.pairs().empty()) throw training_error("corpus has no training pairs");
  const auto probe = probe_states(c, cfg.probe_states);
  const retrieval::EmbedOptions embed{opt.exec.workers, 16};
  nn::AdamState<T> adam(m.params(), {0.9, 0.999, 1e-8, cfg.weight_decay});
  const auto schedule = nn::warmup_cosine(cfg.lr, std::max(1, cfg.steps), cfg.warmup_fraction);

  MinedTable mined;
  double sel_sum = 0, rr_sum = 0;
  std::int64_t sel_n = 0, rr_n = 0, sel_steps = 0, rr_steps = 0;
  double best_probe = -1;
  int stale = 0;

  // Mines negatives for the next interval and records metrics; returns true
  // when early stopping triggers.
  auto refresh = [&](std::int64_t step, bool mine) {
    std::vector<StateId> states = data.states();
    states.insert(states.end(), probe.begin(), probe.end());
    const auto snap = snapshot_embeddings(m, c, states, embed);
    if (mine) mined = mine_negatives(c, snap, data.states(), cfg.mined_pool);
    MetricsRecord r;
    r.step = step;
    if (sel_n > 0) r.select_loss = sel_sum / static_cast<double>(sel_n);
    if (rr_n > 0) r.rerank_loss = rr_sum / static_cast<double>(rr_n);
    if (!probe.empty()) r.probe_recall = pair_recall_at_k(c, snap, probe, cfg.recall_k);
    r.train_recall = pair_recall_at_k(c, snap, data.states(), cfg.recall_k);
    r.select_steps = sel_steps;
    r.rerank_steps = rr_steps;
    sel_sum = rr_sum = 0;
    sel_n = rr_n = 0;
    res.log.push_back(r);
    if (opt.on_record) opt.on_record(r);
    if (cfg.stop_at_train_recall > 0 && r.train_recall >= cfg.stop_at_train_recall) return true;
    if (cfg.patience > 0 && r.probe_recall) {
      if (*r.probe_recall > best_probe) {
        best_probe = *r.probe_recall;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        return true;
      }
    }
    return false;
  };

  if (cfg.steps == 0) {
    refresh(0, false);
    return res;
  }
  if (refresh(0, true)) {
    res.stopped_early = true;
    return res;
  }

  nn::GradSet<T> grads;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const double lr = nn::lr_at(schedule, step + 1);

    const auto sb = build_select_batch(data, cfg.select_batch, cfg.extra_negatives, derive_seed(seed, {static_cast<std::uint64_t>(step), 1}));
    const double ls = select_loss(m, data, sb, cfg, derive_seed(seed, {static_cast<std::uint64_t>(step), 2}), &grads, opt.exec);
    if (!std::isfinite(ls)) throw training_error("select loss diverged at step " + std::to_string(step));
    nn::adam_step(m.params(), grads, adam, lr);
    sel_sum += ls;
    ++sel_n;
    ++sel_steps;

    const auto rb = build_rerank_batch(mined, data, cfg.rerank_positives, cfg.negatives_per_positive,
                                       derive_seed(seed, {static_cast<std::uint64_t>(step), 3}));
    if (rb.skipped > 0)
      res.warnings.push_back("step " + std::to_string(step) + ": skipped " + std::to_string(rb.skipped) +
                             " rerank positives whose state has no mined negatives");
    if (rb.size() > 0) {
      const double lr_loss = rerank_loss(m, data, rb, cfg, derive_seed(seed, {static_cast<std::uint64_t>(step), 4}), &grads, opt.exec);
      if (!std::isfinite(lr_loss)) throw training_error("rerank loss diverged at step " + std::to_string(step));
      nn::adam_step(m.params(), grads, adam, lr);
      rr_sum += lr_loss;
      ++rr_n;
    }
    ++rr_steps;

    res.steps_run = step + 1;
    const bool last = step + 1 == cfg.steps;
    if ((step + 1) % cfg.refresh_interval == 0 || last) {
      if (refresh(step + 1, !last)) {
        res.stopped_early = !last;
        break;
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Causal LM pretraining

struct LmConfig {
  int steps = 500;
  int batch = 8;
  int seq_len = 64;
  double lr = 3e-4;
  double warmup_fraction = 0.01;
  double weight_decay = 0.02;

  void validate() const {
    if (steps < 0 || batch < 1 || seq_len < 2) throw training_error("lm config: invalid sizes");
    if (!(lr > 0.0)) throw training_error("lm config: lr must be positive");
  }
};

// Next-token loss on random windows of `text`, BOS-prefixed.
template <typename T>
double lm_loss(const model::Model<T>& m, const std::vector<text::TokenSeq>& windows, nn::GradSet<T>* grads,
               const nn::ExecPolicy& exec) {
  auto group = [&](nn::Graph<T>& g, const std::vector<Var>& p, std::size_t begin, std::size_t end) {
    std::vector<std::int32_t> targets;
    model::SeqBatch sb;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& w = windows[i];
      sb.emplace_back(w.data(), w.size() - 1);
      targets.insert(targets.end(), w.begin() + 1, w.end());
    }
    Var logits = g.matmul_nt(m.backbone(g, p, sb), p[model::Layout::embedding]);
    std::vector<Var> per_seq;
    nn::Index at = 0;
    for (const auto& s : sb) {
      std::vector<nn::Index> rows;
      for (std::size_t t = 0; t < s.size(); ++t) rows.push_back(at + static_cast<nn::Index>(t));
      per_seq.push_back(g.cross_entropy(g.gather_rows(logits, rows),
                                        std::span<const std::int32_t>(targets).subspan(static_cast<std::size_t>(at), s.size())));
      at += static_cast<nn::Index>(s.size());
    }
    return per_seq.size() == 1 ? per_seq[0] : g.stack_rows(per_seq);
  };
  auto loss = [&](nn::Graph<T>& g, Var per_seq) {
    return g.scale(g.sum(per_seq), T(1) / static_cast<T>(windows.size()));
  };
  return static_cast<double>(nn::value_and_grad<T>(m.params(), windows.size(), group, loss, grads, exec));
}

inline std::vector<text::TokenSeq> lm_windows(const std::string& text, int count, int seq_len, std::uint64_t seed) {
  if (text.empty()) throw training_error("lm: empty text corpus");
  Rng rng(seed);
  std::vector<text::TokenSeq> out;
  const auto len = static_cast<std::size_t>(seq_len - 1);
  for (int i = 0; i < count; ++i) {
    text::TokenSeq w{text::kBos};
    const std::size_t start = text.size() > len ? uniform_index(rng, text.size() - len + 1) : 0;
    const auto piece = text::encode(std::string_view(text).substr(start, len));
    w.insert(w.end(), piece.begin(), piece.end());
    out.push_back(std::move(w));
  }
  return out;
}

template <typename T>
struct LmResult {
  model::Model<T> model;
  std::vector<double> losses;
};

// Dropout is off for pretraining.
template <typename T>
LmResult<T> pretrain_lm(model::Model<T> model, const std::string& text, const LmConfig& cfg, std::uint64_t seed,
                        const nn::ExecPolicy& exec = {}) {
  cfg.validate();
  if (cfg.seq_len > model.config().context) throw training_error("lm: seq_len exceeds model context");
  LmResult<T> res{std::move(model), {}};
  auto& m = res.model;
  nn::AdamState<T> adam(m.params(), {0.9, 0.999, 1e-8, cfg.weight_decay});
  const auto schedule = nn::warmup_cosine(cfg.lr, std::max(1, cfg.steps), cfg.warmup_fraction);
  nn::GradSet<T> grads;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto windows = lm_windows(text, cfg.batch, cfg.seq_len, derive_seed(seed, {static_cast<std::uint64_t>(step)}));
    const double loss = lm_loss(m, windows, &grads, exec);
    if (!std::isfinite(loss)) throw training_error("lm loss diverged at step " + std::to_string(step));
    nn::adam_step(m.params(), grads, adam, nn::lr_at(schedule, step + 1));
    res.losses.push_back(loss);
  }
  return res;
}

}  // namespace hammerlite::training
