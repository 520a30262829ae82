#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hammerlite/util/random.hpp"

namespace hammerlite::corpus {

using PremiseId = std::int64_t;
using StateId = std::int64_t;

enum class Source : std::uint8_t { hpl, sh };
enum class Split : std::uint8_t { train, valid, test };

class corpus_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string_view to_string(Source s) { return s == Source::hpl ? "HPL" : "SH"; }

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

inline Source parse_source(std::string_view s) {
  if (s == "HPL") return Source::hpl;
  if (s == "SH") return Source::sh;
  throw corpus_error("unknown source tag '" + std::string(s) + "' (expected HPL or SH)");
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw corpus_error("unknown split '" + std::string(s) + "' (expected train, valid or test)");
}

struct Premise {
  PremiseId id = 0;
  std::string name;
  std::string statement;

  friend bool operator==(const Premise&, const Premise&) = default;
};

// Text seen by every encoder and by BM25.
inline std::string premise_text(const Premise& p) { return p.name + " : " + p.statement; }

struct ProofState {
  StateId id = 0;
  std::string text;
  std::vector<std::string> premises;  // ground-truth premise names, proof order
  Source source = Source::hpl;
  Split split = Split::train;
  // Premises visible from this state; absent means the whole premise table.
  std::optional<std::vector<std::string>> candidates;

  friend bool operator==(const ProofState&, const ProofState&) = default;
};

struct Datapoint {
  StateId state_id = 0;
  PremiseId premise_id = 0;
  Source source = Source::hpl;

  friend auto operator<=>(const Datapoint&, const Datapoint&) = default;
};

class Corpus {
 public:
  Corpus() = default;

  Corpus(std::vector<Premise> premises, std::vector<ProofState> states,
         std::vector<Datapoint> datapoints = {})
      : premises_(std::move(premises)), states_(std::move(states)), datapoints_(std::move(datapoints)) {
    index();
  }

  const std::vector<Premise>& premises() const { return premises_; }
  const std::vector<ProofState>& states() const { return states_; }
  const std::vector<Datapoint>& datapoints() const { return datapoints_; }

  bool has_premise(PremiseId id) const { return premise_pos_.contains(id); }
  bool has_state(StateId id) const { return state_pos_.contains(id); }

  const Premise& premise(PremiseId id) const {
    auto it = premise_pos_.find(id);
    if (it == premise_pos_.end()) throw corpus_error("unknown premise id " + std::to_string(id));
    return premises_[it->second];
  }

  const Premise* find_premise(std::string_view name) const {
    auto it = premise_by_name_.find(std::string(name));
    return it == premise_by_name_.end() ? nullptr : &premises_[it->second];
  }

  const ProofState& state(StateId id) const {
    auto it = state_pos_.find(id);
    if (it == state_pos_.end()) throw corpus_error("unknown state id " + std::to_string(id));
    return states_[it->second];
  }

  // Resolved ground-truth ids of a state, deduplicated, in proof order.
  const std::vector<PremiseId>& gt_ids(StateId id) const { return gt_ids_[state_pos_.at(id)]; }

  bool is_gt(StateId state, PremiseId premise) const {
    const auto& sorted = gt_sorted_[state_pos_.at(state)];
    return std::binary_search(sorted.begin(), sorted.end(), premise);
  }

  std::optional<std::vector<PremiseId>> candidate_ids(StateId id) const {
    const auto& s = state(id);
    if (!s.candidates) return std::nullopt;
    std::vector<PremiseId> out;
    out.reserve(s.candidates->size());
    for (const auto& name : *s.candidates) out.push_back(find_premise(name)->id);
    return out;
  }

  std::vector<StateId> state_ids(std::optional<Split> split = std::nullopt) const {
    std::vector<StateId> out;
    for (const auto& s : states_)
      if (!split || s.split == *split) out.push_back(s.id);
    return out;
  }

  Corpus with_states(std::vector<ProofState> states) const {
    return Corpus(premises_, std::move(states), datapoints_);
  }

  Corpus with_datapoints(std::vector<Datapoint> datapoints) const {
    return Corpus(premises_, states_, std::move(datapoints));
  }

  friend bool operator==(const Corpus& a, const Corpus& b) {
    return a.premises_ == b.premises_ && a.states_ == b.states_ && a.datapoints_ == b.datapoints_;
  }

 private:
  void index() {
    for (std::size_t i = 0; i < premises_.size(); ++i) {
      const auto& p = premises_[i];
      if (p.statement.empty()) throw corpus_error("premise '" + p.name + "' has an empty statement");
      if (!premise_pos_.emplace(p.id, i).second)
        throw corpus_error("duplicate premise id " + std::to_string(p.id));
      if (!premise_by_name_.emplace(p.name, i).second)
        throw corpus_error("duplicate premise name '" + p.name + "'");
    }
    gt_ids_.resize(states_.size());
    gt_sorted_.resize(states_.size());
    for (std::size_t i = 0; i < states_.size(); ++i) {
      const auto& s = states_[i];
      if (s.text.empty()) throw corpus_error("state " + std::to_string(s.id) + " has empty text");
      if (!state_pos_.emplace(s.id, i).second)
        throw corpus_error("duplicate state id " + std::to_string(s.id));
      for (const auto& name : s.premises) {
        const Premise* p = find_premise(name);
        if (!p)
          throw corpus_error("unresolved premise '" + name + "' in state " + std::to_string(s.id));
        if (std::find(gt_ids_[i].begin(), gt_ids_[i].end(), p->id) == gt_ids_[i].end())
          gt_ids_[i].push_back(p->id);
      }
      if (s.candidates)
        for (const auto& name : *s.candidates)
          if (!find_premise(name))
            throw corpus_error("unresolved candidate premise '" + name + "' in state " +
                               std::to_string(s.id));
      gt_sorted_[i] = gt_ids_[i];
      std::sort(gt_sorted_[i].begin(), gt_sorted_[i].end());
    }
    std::set<Datapoint> seen;
    for (const auto& d : datapoints_) {
      if (!has_state(d.state_id) || !has_premise(d.premise_id))
        throw corpus_error("datapoint references unknown state " + std::to_string(d.state_id) +
                           " or premise " + std::to_string(d.premise_id));
      if (!seen.insert(d).second)
        throw corpus_error("duplicate datapoint (" + std::to_string(d.state_id) + ", " +
                           std::to_string(d.premise_id) + ")");
    }
  }

  std::vector<Premise> premises_;
  std::vector<ProofState> states_;
  std::vector<Datapoint> datapoints_;
  std::unordered_map<PremiseId, std::size_t> premise_pos_;
  std::unordered_map<std::string, std::size_t> premise_by_name_;
  std::unordered_map<StateId, std::size_t> state_pos_;
  std::vector<std::vector<PremiseId>> gt_ids_;
  std::vector<std::vector<PremiseId>> gt_sorted_;
};

// ---------------------------------------------------------------------------
// JSONL schema

inline nlohmann::ordered_json to_json(const Premise& p) {
  return {{"id", p.id}, {"name", p.name}, {"statement", p.statement}};
}

inline nlohmann::ordered_json to_json(const ProofState& s) {
  nlohmann::ordered_json j = {{"id", s.id},
                              {"text", s.text},
                              {"premises", s.premises},
                              {"source", to_string(s.source)},
                              {"split", to_string(s.split)}};
  if (s.candidates) j["candidates"] = *s.candidates;
  return j;
}

inline Premise premise_from_json(const nlohmann::json& j) {
  return {j.at("id").get<PremiseId>(), j.at("name").get<std::string>(),
          j.at("statement").get<std::string>()};
}

inline ProofState state_from_json(const nlohmann::json& j) {
  ProofState s;
  s.id = j.at("id").get<StateId>();
  s.text = j.at("text").get<std::string>();
  s.premises = j.at("premises").get<std::vector<std::string>>();
  s.source = parse_source(j.at("source").get<std::string>());
  if (j.contains("split")) s.split = parse_split(j.at("split").get<std::string>());
  if (j.contains("candidates")) s.candidates = j.at("candidates").get<std::vector<std::string>>();
  return s;
}

// Calls fn(json, line_number) for every non-blank line; wraps parse and
// schema failures with the file name and line number.
template <typename Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw corpus_error("cannot open " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw corpus_error("record is not a JSON object");
      fn(j, line_no);
    } catch (const nlohmann::json::exception& e) {
      throw corpus_error(path + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
    } catch (const corpus_error& e) {
      throw corpus_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline nlohmann::ordered_json to_json(const Datapoint& d) {
  return {{"state_id", d.state_id}, {"premise_id", d.premise_id}, {"source", to_string(d.source)}};
}

inline Datapoint datapoint_from_json(const nlohmann::json& j) {
  return {j.at("state_id").get<StateId>(), j.at("premise_id").get<PremiseId>(),
          parse_source(j.at("source").get<std::string>())};
}

// `states_path` may be empty (no states); `datapoints_path` is optional and
// holds an explicit datapoint list (e.g. after fraction sampling).
inline Corpus load_corpus(const std::string& premises_path, const std::string& states_path,
                          const std::string& datapoints_path = {}) {
  std::vector<Premise> premises;
  std::set<PremiseId> ids;
  std::set<std::string> names;
  for_each_jsonl(premises_path, [&](const nlohmann::json& j, std::size_t) {
    auto p = premise_from_json(j);
    if (!ids.insert(p.id).second) throw corpus_error("duplicate premise id " + std::to_string(p.id));
    if (!names.insert(p.name).second) throw corpus_error("duplicate premise name '" + p.name + "'");
    premises.push_back(std::move(p));
  });
  std::vector<ProofState> states;
  if (!states_path.empty()) {
    for_each_jsonl(states_path, [&](const nlohmann::json& j, std::size_t) {
      auto s = state_from_json(j);
      for (const auto& name : s.premises)
        if (!names.contains(name)) throw corpus_error("unresolved premise '" + name + "'");
      states.push_back(std::move(s));
    });
  }
  std::vector<Datapoint> datapoints;
  if (!datapoints_path.empty())
    for_each_jsonl(datapoints_path, [&](const nlohmann::json& j, std::size_t) { datapoints.push_back(datapoint_from_json(j)); });
  return Corpus(std::move(premises), std::move(states), std::move(datapoints));
}

inline void save_datapoints(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw corpus_error("cannot write " + path);
  for (const auto& d : corpus.datapoints()) out << to_json(d).dump() << '\n';
  if (!out) throw corpus_error("write failed: " + path);
}

inline void save_corpus(const Corpus& corpus, const std::string& premises_path,
                        const std::string& states_path) {
  std::ofstream p(premises_path, std::ios::binary);
  if (!p) throw corpus_error("cannot write " + premises_path);
  for (const auto& premise : corpus.premises()) p << to_json(premise).dump() << '\n';
  std::ofstream s(states_path, std::ios::binary);
  if (!s) throw corpus_error("cannot write " + states_path);
  for (const auto& state : corpus.states()) s << to_json(state).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Datapoints, splits, sampling

// One datapoint per (state, ground-truth premise), deduplicated per source.
inline std::vector<Datapoint> extract_pairs(const Corpus& corpus) {
  std::vector<Datapoint> out;
  std::set<Datapoint> seen;
  for (const auto& s : corpus.states()) {
    for (PremiseId pid : corpus.gt_ids(s.id)) {
      Datapoint d{s.id, pid, s.source};
      if (seen.insert(d).second) out.push_back(d);
    }
  }
  return out;
}

inline std::vector<Datapoint> pairs_or_extract(const Corpus& corpus) {
  return corpus.datapoints().empty() ? extract_pairs(corpus) : corpus.datapoints();
}

struct SplitFractions {
  double train = 1.0;
  double valid = 0.0;
  double test = 0.0;
};

inline Split assign_split(StateId id, const SplitFractions& f, std::uint64_t seed) {
  const double u = unit_interval(derive_seed(seed, {static_cast<std::uint64_t>(id)}));
  if (u < f.train) return Split::train;
  if (u < f.train + f.valid) return Split::valid;
  return Split::test;
}

inline Corpus split_corpus(const Corpus& corpus, const SplitFractions& f, std::uint64_t seed) {
  if (f.train < 0 || f.valid < 0 || f.test < 0 || std::abs(f.train + f.valid + f.test - 1.0) > 1e-9)
    throw corpus_error("split fractions must be non-negative and sum to 1");
  auto states = corpus.states();
  for (auto& s : states) s.split = assign_split(s.id, f, seed);
  return corpus.with_states(std::move(states));
}

// Uniform subset of round(fraction * |training datapoints|) training pairs.
// Training states no longer referenced are dropped; premises and the
// validation/test states are kept.
inline Corpus sample_fraction(const Corpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw corpus_error("fraction must lie in (0, 1]");
  const auto all = pairs_or_extract(corpus);
  std::vector<Datapoint> train;
  std::vector<Datapoint> rest;
  for (const auto& d : all) (corpus.state(d.state_id).split == Split::train ? train : rest).push_back(d);
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.size())));
  Rng rng(derive_seed(seed, {0x5a3f1e}));
  auto picked = sample_without_replacement(rng, train.size(), n);
  std::sort(picked.begin(), picked.end());
  std::vector<Datapoint> kept;
  std::set<StateId> referenced;
  for (auto i : picked) {
    kept.push_back(train[i]);
    referenced.insert(train[i].state_id);
  }
  kept.insert(kept.end(), rest.begin(), rest.end());
  std::vector<ProofState> states;
  for (const auto& s : corpus.states())
    if (s.split != Split::train || referenced.contains(s.id)) states.push_back(s);
  return Corpus(corpus.premises(), std::move(states), std::move(kept));
}

struct PartitionStats {
  std::size_t datapoints = 0;
  std::size_t unique_states = 0;
  std::size_t unique_premises = 0;

  friend bool operator==(const PartitionStats&, const PartitionStats&) = default;
};

struct CorpusStats {
  PartitionStats hpl;
  PartitionStats sh;
  PartitionStats total;
};

inline CorpusStats corpus_stats(const Corpus& corpus) {
  const auto pairs = pairs_or_extract(corpus);
  auto count = [&](std::optional<Source> source) {
    PartitionStats st;
    std::set<StateId> states;
    std::set<PremiseId> premises;
    for (const auto& d : pairs) {
      if (source && d.source != *source) continue;
      ++st.datapoints;
      states.insert(d.state_id);
      premises.insert(d.premise_id);
    }
    st.unique_states = states.size();
    st.unique_premises = premises.size();
    return st;
  };
  return {count(Source::hpl), count(Source::sh), count(std::nullopt)};
}

}  // namespace hammerlite::corpus
