#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hammerlite/corpus.hpp"
#include "hammerlite/model.hpp"
#include "hammerlite/text.hpp"
#include "hammerlite/util/parallel.hpp"

namespace hammerlite::retrieval {

using corpus::PremiseId;

class retrieval_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stage : std::uint8_t { select, rerank, bm25 };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::select: return "select";
    case Stage::rerank: return "rerank";
    case Stage::bm25: return "bm25";
  }
  return "select";
}

struct Scored {
  PremiseId id = 0;
  double score = 0.0;

  friend bool operator==(const Scored&, const Scored&) = default;
};

struct RetrievalResult {
  Stage stage = Stage::select;
  std::vector<Scored> ranked;

  std::vector<PremiseId> ids() const {
    std::vector<PremiseId> out;
    out.reserve(ranked.size());
    for (const auto& s : ranked) out.push_back(s.id);
    return out;
  }

  std::vector<std::string> names(const corpus::Corpus& c) const {
    std::vector<std::string> out;
    out.reserve(ranked.size());
    for (const auto& s : ranked) out.push_back(c.premise(s.id).name);
    return out;
  }

  friend bool operator==(const RetrievalResult&, const RetrievalResult&) = default;
};

// Best k by descending score, ties by ascending id.
inline std::vector<Scored> top_k(std::vector<Scored> all, std::size_t k) {
  auto better = [](const Scored& a, const Scored& b) { return a.score != b.score ? a.score > b.score : a.id < b.id; };
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), better);
  all.resize(k);
  return all;
}

// ---------------------------------------------------------------------------
// Dense index

class PremiseIndex {
 public:
  PremiseIndex() = default;

  PremiseIndex(std::vector<PremiseId> ids, nn::Tensor<double> embeddings, std::uint64_t fingerprint)
      : ids_(std::move(ids)), emb_(std::move(embeddings)), fingerprint_(fingerprint) {
    if (ids_.empty()) throw retrieval_error("index: empty premise set");
    if (static_cast<nn::Index>(ids_.size()) != emb_.rows()) throw retrieval_error("index: id/row count mismatch");
    for (std::size_t i = 1; i < ids_.size(); ++i)
      if (ids_[i] <= ids_[i - 1]) throw retrieval_error("index: ids must be strictly increasing");
    for (nn::Index r = 0; r < emb_.rows(); ++r)
      if (std::abs(emb_.row(r).norm() - 1.0) > 1e-5) throw retrieval_error("index: rows must be unit norm");
  }

  const std::vector<PremiseId>& ids() const { return ids_; }
  const nn::Tensor<double>& embeddings() const { return emb_; }
  std::uint64_t fingerprint() const { return fingerprint_; }
  std::size_t size() const { return ids_.size(); }
  nn::Index dim() const { return emb_.cols(); }

  std::optional<std::size_t> row_of(PremiseId id) const {
    auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
    if (it == ids_.end() || *it != id) return std::nullopt;
    return static_cast<std::size_t>(it - ids_.begin());
  }

  // Cosine score of every row against a unit query.
  std::vector<Scored> score_all(const nn::Tensor<double>& query) const {
    if (query.rows() != 1 || query.cols() != emb_.cols()) throw retrieval_error("index: query dimension mismatch");
    Eigen::VectorXd s = emb_ * query.row(0).transpose();
    std::vector<Scored> out(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) out[i] = {ids_[i], s(static_cast<nn::Index>(i))};
    return out;
  }

  friend bool operator==(const PremiseIndex&, const PremiseIndex&) = default;

 private:
  std::vector<PremiseId> ids_;
  nn::Tensor<double> emb_;
  std::uint64_t fingerprint_ = 0;
};

struct EmbedOptions {
  int workers = 1;
  std::size_t chunk = 16;  // sequences packed per forward pass
};

template <typename T>
nn::Tensor<double> embed_premise_texts(const model::Model<T>& m, const std::vector<std::string>& texts,
                                       const EmbedOptions& opt = {}) {
  const auto ctx = static_cast<std::size_t>(m.config().context);
  std::vector<text::TokenSeq> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(text::encode_premise(t, ctx));
  nn::Tensor<double> out(static_cast<nn::Index>(texts.size()), m.config().dim);
  const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
  parallel_for((seqs.size() + chunk - 1) / chunk, opt.workers, [&](std::size_t c) {
    const std::size_t b = c * chunk, e = std::min(seqs.size(), b + chunk);
    model::SeqBatch batch(seqs.begin() + static_cast<std::ptrdiff_t>(b), seqs.begin() + static_cast<std::ptrdiff_t>(e));
    out.middleRows(static_cast<nn::Index>(b), static_cast<nn::Index>(e - b)) = m.embed_premises(batch).template cast<double>();
  });
  return out;
}

template <typename T>
nn::Tensor<double> embed_state_texts(const model::Model<T>& m, const std::vector<std::string>& texts,
                                     const EmbedOptions& opt = {}) {
  const auto ctx = static_cast<std::size_t>(m.config().context);
  std::vector<text::TokenSeq> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(text::encode_state(t, ctx));
  nn::Tensor<double> out(static_cast<nn::Index>(texts.size()), m.config().dim);
  const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
  parallel_for((seqs.size() + chunk - 1) / chunk, opt.workers, [&](std::size_t c) {
    const std::size_t b = c * chunk, e = std::min(seqs.size(), b + chunk);
    model::SeqBatch batch(seqs.begin() + static_cast<std::ptrdiff_t>(b), seqs.begin() + static_cast<std::ptrdiff_t>(e));
    out.middleRows(static_cast<nn::Index>(b), static_cast<nn::Index>(e - b)) = m.embed_states(batch).template cast<double>();
  });
  return out;
}

// One premise embedding per premise (optionally restricted to `filter`).
template <typename T>
PremiseIndex build_index(const model::Model<T>& m, const corpus::Corpus& c,
                         const std::optional<std::vector<PremiseId>>& filter = std::nullopt,
                         const EmbedOptions& opt = {}) {
  std::vector<PremiseId> ids;
  if (filter) {
    for (PremiseId id : *filter) {
      c.premise(id);
      ids.push_back(id);
    }
  } else {
    for (const auto& p : c.premises()) ids.push_back(p.id);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.empty()) throw retrieval_error("index: empty premise set");
  std::vector<std::string> texts;
  for (PremiseId id : ids) texts.push_back(corpus::premise_text(c.premise(id)));
  return PremiseIndex(std::move(ids), embed_premise_texts(m, texts, opt), m.fingerprint());
}

// Binary layout: "HMLTINDX", u64 fingerprint, u64 rows, u64 cols, ids, values.
inline void save_index(const PremiseIndex& idx, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw retrieval_error("cannot write " + path);
  const std::uint64_t fp = idx.fingerprint(), rows = idx.size(), cols = static_cast<std::uint64_t>(idx.dim());
  out.write("HMLTINDX", 8);
  out.write(reinterpret_cast<const char*>(&fp), sizeof fp);
  out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
  out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
  out.write(reinterpret_cast<const char*>(idx.ids().data()), static_cast<std::streamsize>(rows * sizeof(PremiseId)));
  out.write(reinterpret_cast<const char*>(idx.embeddings().data()),
            static_cast<std::streamsize>(rows * cols * sizeof(double)));
  if (!out) throw retrieval_error("write failed: " + path);
}

// Errors unless the stored fingerprint equals `expected_fingerprint`.
inline PremiseIndex load_index(const std::string& path, std::uint64_t expected_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw retrieval_error("cannot open " + path);
  char magic[8];
  std::uint64_t fp = 0, rows = 0, cols = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&fp), sizeof fp);
  in.read(reinterpret_cast<char*>(&rows), sizeof rows);
  in.read(reinterpret_cast<char*>(&cols), sizeof cols);
  if (!in || std::memcmp(magic, "HMLTINDX", 8) != 0) throw retrieval_error(path + ": not an index file");
  if (fp != expected_fingerprint)
    throw retrieval_error(path + ": index was built by a different model (fingerprint mismatch)");
  if (rows > (1ULL << 32) || cols > (1ULL << 20)) throw retrieval_error(path + ": corrupt header");
  std::vector<PremiseId> ids(rows);
  nn::Tensor<double> emb(static_cast<nn::Index>(rows), static_cast<nn::Index>(cols));
  in.read(reinterpret_cast<char*>(ids.data()), static_cast<std::streamsize>(rows * sizeof(PremiseId)));
  in.read(reinterpret_cast<char*>(emb.data()), static_cast<std::streamsize>(rows * cols * sizeof(double)));
  if (!in) throw retrieval_error(path + ": truncated index");
  return PremiseIndex(std::move(ids), std::move(emb), fp);
}

// ---------------------------------------------------------------------------
// Two-stage retrieval

// Top min(k, |index|) premises by cosine against a unit state embedding,
// optionally restricted to `allowed` ids.
inline RetrievalResult select_topk(const nn::Tensor<double>& state_embedding, const PremiseIndex& index,
                                   std::size_t k, const std::optional<std::vector<PremiseId>>& allowed = std::nullopt) {
  if (k < 1) throw retrieval_error("select: k must be at least 1");
  if (index.size() == 0) throw retrieval_error("select: empty index");
  auto all = index.score_all(state_embedding);
  if (allowed) {
    std::set<PremiseId> keep(allowed->begin(), allowed->end());
    std::erase_if(all, [&](const Scored& s) { return !keep.contains(s.id); });
  }
  return {Stage::select, top_k(std::move(all), k)};
}

template <typename T>
RetrievalResult select_topk(const std::string& state_text, const PremiseIndex& index, std::size_t k,
                            const model::Model<T>& m,
                            const std::optional<std::vector<PremiseId>>& allowed = std::nullopt) {
  const auto tokens = text::encode_state(state_text, static_cast<std::size_t>(m.config().context));
  return select_topk(m.embed_state(tokens).template cast<double>(), index, k, allowed);
}

// Relevance of each candidate premise to a state.
using PairScorer = std::function<std::vector<double>(const std::string& state_text, const std::vector<PremiseId>&)>;

template <typename T>
PairScorer model_pair_scorer(const model::Model<T>& m, const corpus::Corpus& c, const EmbedOptions& opt = {}) {
  return [&m, &c, opt](const std::string& state_text, const std::vector<PremiseId>& ids) {
    const auto ctx = static_cast<std::size_t>(m.config().context);
    std::vector<text::TokenSeq> seqs;
    seqs.reserve(ids.size());
    for (PremiseId id : ids) seqs.push_back(text::encode_pair(state_text, corpus::premise_text(c.premise(id)), ctx));
    std::vector<double> out(ids.size());
    const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
    parallel_for((seqs.size() + chunk - 1) / chunk, opt.workers, [&](std::size_t g) {
      const std::size_t b = g * chunk, e = std::min(seqs.size(), b + chunk);
      model::SeqBatch batch(seqs.begin() + static_cast<std::ptrdiff_t>(b), seqs.begin() + static_cast<std::ptrdiff_t>(e));
      auto s = m.rerank_scores(batch);
      std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(b));
    });
    return out;
  };
}

inline RetrievalResult rerank_candidates(const std::string& state_text, const std::vector<PremiseId>& candidates,
                                         std::size_t k, const PairScorer& scorer) {
  if (candidates.empty()) return {Stage::rerank, {}};
  const auto scores = scorer(state_text, candidates);
  if (scores.size() != candidates.size()) throw retrieval_error("rerank: scorer returned wrong number of scores");
  std::vector<Scored> all;
  all.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) all.push_back({candidates[i], scores[i]});
  return {Stage::rerank, top_k(std::move(all), k)};
}

enum class Mode : std::uint8_t { full, select_only };

// full: rerank the select stage's top K_S and keep K_R;
// select_only: the select stage's top K_S truncated to K_R.
inline RetrievalResult retrieve(const std::string& state_text, const nn::Tensor<double>& state_embedding,
                                const PremiseIndex& index, std::size_t select_k, std::size_t rerank_k, Mode mode,
                                const PairScorer& scorer,
                                const std::optional<std::vector<PremiseId>>& allowed = std::nullopt) {
  if (rerank_k > select_k) throw retrieval_error("retrieve: K_R must not exceed K_S");
  auto selected = select_topk(state_embedding, index, select_k, allowed);
  if (mode == Mode::select_only) {
    if (selected.ranked.size() > rerank_k) selected.ranked.resize(rerank_k);
    return selected;
  }
  return rerank_candidates(state_text, selected.ids(), rerank_k, scorer);
}

template <typename T>
RetrievalResult retrieve(const std::string& state_text, const PremiseIndex& index, const model::Model<T>& m,
                         const corpus::Corpus& c, std::size_t select_k, std::size_t rerank_k, Mode mode,
                         const std::optional<std::vector<PremiseId>>& allowed = std::nullopt,
                         const EmbedOptions& opt = {}) {
  const auto tokens = text::encode_state(state_text, static_cast<std::size_t>(m.config().context));
  return retrieve(state_text, m.embed_state(tokens).template cast<double>(), index, select_k, rerank_k, mode,
                  model_pair_scorer(m, c, opt), allowed);
}

// ---------------------------------------------------------------------------
// BM25

// Lowercased maximal runs of ASCII letters and digits.
inline std::vector<std::string> bm25_tokenize(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) && u < 128) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

class Bm25Index {
 public:
  Bm25Index() = default;

  Bm25Index(std::vector<PremiseId> ids, const std::vector<std::string>& docs, Bm25Params params = {})
      : ids_(std::move(ids)), params_(params) {
    if (docs.empty()) throw retrieval_error("bm25: empty corpus");
    if (docs.size() != ids_.size()) throw retrieval_error("bm25: id/document count mismatch");
    doc_len_.resize(docs.size());
    double total = 0;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      std::map<std::string, int> tf;
      for (auto& t : bm25_tokenize(docs[d])) ++tf[t];
      int len = 0;
      for (const auto& [term, f] : tf) {
        postings_[term].push_back({d, f});
        len += f;
      }
      doc_len_[d] = len;
      total += len;
    }
    avgdl_ = total / static_cast<double>(docs.size());
  }

  std::size_t size() const { return ids_.size(); }
  double avgdl() const { return avgdl_; }
  const Bm25Params& params() const { return params_; }
  const std::vector<PremiseId>& ids() const { return ids_; }

  std::size_t df(const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : it->second.size();
  }

  double idf(const std::string& term) const {
    const double n = static_cast<double>(df(term));
    const double N = static_cast<double>(ids_.size());
    return std::log((N - n + 0.5) / (n + 0.5) + 1.0);
  }

  // Score of every document; query terms are summed in query order
  // (repeated terms count repeatedly).
  std::vector<double> scores(std::string_view query) const {
    std::vector<double> s(ids_.size(), 0.0);
    for (const auto& term : bm25_tokenize(query)) {
      auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      const double w = idf(term);
      for (const auto& [d, f] : it->second) {
        const double tf = f;
        const double norm = params_.k1 * (1.0 - params_.b + params_.b * doc_len_[d] / avgdl_);
        s[d] += w * tf * (params_.k1 + 1.0) / (tf + norm);
      }
    }
    return s;
  }

 private:
  struct Posting {
    std::size_t doc;
    int tf;
  };

  std::vector<PremiseId> ids_;
  Bm25Params params_;
  std::vector<int> doc_len_;
  double avgdl_ = 0;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
};

inline Bm25Index bm25_build(const corpus::Corpus& c, Bm25Params params = {}) {
  std::vector<PremiseId> ids;
  std::vector<std::string> docs;
  for (const auto& p : c.premises()) {
    ids.push_back(p.id);
    docs.push_back(corpus::premise_text(p));
  }
  return Bm25Index(std::move(ids), docs, params);
}

inline RetrievalResult bm25_topk(std::string_view query, const Bm25Index& index, std::size_t k,
                                 const std::optional<std::vector<PremiseId>>& allowed = std::nullopt) {
  if (k < 1) throw retrieval_error("bm25: k must be at least 1");
  const auto s = index.scores(query);
  std::vector<Scored> all;
  std::set<PremiseId> keep;
  if (allowed) keep.insert(allowed->begin(), allowed->end());
  for (std::size_t i = 0; i < s.size(); ++i)
    if (!allowed || keep.contains(index.ids()[i])) all.push_back({index.ids()[i], s[i]});
  return {Stage::bm25, top_k(std::move(all), k)};
}

// ---------------------------------------------------------------------------
// Metrics

inline double recall_at_k(const std::vector<PremiseId>& ranked, const std::set<PremiseId>& gt, std::size_t k) {
  if (gt.empty()) throw retrieval_error("recall: empty ground-truth set");
  if (k < 1) throw retrieval_error("recall: k must be at least 1");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i)
    if (gt.contains(ranked[i])) ++hit;
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

inline double recall_at_k(const RetrievalResult& r, const std::set<PremiseId>& gt, std::size_t k) {
  return recall_at_k(r.ids(), gt, k);
}

inline double mrr(const std::vector<PremiseId>& ranked, const std::set<PremiseId>& gt) {
  if (gt.empty()) throw retrieval_error("mrr: empty ground-truth set");
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (gt.contains(ranked[i])) return 1.0 / static_cast<double>(i + 1);
  return 0.0;
}

inline double mrr(const RetrievalResult& r, const std::set<PremiseId>& gt) { return mrr(r.ids(), gt); }

}  // namespace hammerlite::retrieval
