#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hammerlite/corpus.hpp"
#include "hammerlite/util/parallel.hpp"

namespace hammerlite::eval {

using corpus::StateId;

class eval_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::string> default_tactics() {
  return {"smt", "metis", "auto", "simp", "blast", "meson", "force", "eval", "presburger", "linarith"};
}

enum class Mode : std::uint8_t { full, select_only, bm25 };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::full: return "full";
    case Mode::select_only: return "select_only";
    case Mode::bm25: return "bm25";
  }
  return "full";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "full") return Mode::full;
  if (s == "select_only") return Mode::select_only;
  if (s == "bm25") return Mode::bm25;
  throw eval_error("unknown mode '" + s + "' (expected full, select_only or bm25)");
}

struct EvalConfig {
  std::vector<std::string> tactics = default_tactics();
  std::vector<int> k_list = {1, 2, 4, 8, 16, 32, 64};
  double timeout = 2.0;
  int select_k = 64;
  int rerank_k = 64;
  Mode mode = Mode::full;
  bool tactic_prompt = false;

  void validate() const {
    if (tactics.empty()) throw eval_error("eval config: tactic list is empty");
    for (const auto& t : tactics)
      if (t.empty()) throw eval_error("eval config: empty tactic name");
    if (k_list.empty()) throw eval_error("eval config: k list is empty");
    for (std::size_t i = 0; i < k_list.size(); ++i) {
      if (k_list[i] < 0) throw eval_error("eval config: k values must be non-negative");
      if (i > 0 && k_list[i] <= k_list[i - 1]) throw eval_error("eval config: k list must be strictly increasing");
    }
    if (!(timeout > 0.0)) throw eval_error("eval config: timeout must be positive");
    if (select_k < 1 || rerank_k < 1) throw eval_error("eval config: select_k and rerank_k must be at least 1");
    if (rerank_k > select_k) throw eval_error("eval config: rerank_k must not exceed select_k");
  }
};

inline nlohmann::ordered_json to_json(const EvalConfig& c) {
  return {{"tactics", c.tactics}, {"k_list", c.k_list},   {"timeout", c.timeout},
          {"select_k", c.select_k}, {"rerank_k", c.rerank_k}, {"mode", to_string(c.mode)},
          {"tactic_prompt", c.tactic_prompt}};
}

// C = |tactics| x |k values| x per-step timeout.
inline double compute_budget(const EvalConfig& c) {
  return static_cast<double>(c.tactics.size()) * static_cast<double>(c.k_list.size()) * c.timeout;
}

struct ProofStep {
  std::string tactic;
  std::vector<std::string> premises;

  friend bool operator==(const ProofStep&, const ProofStep&) = default;
  friend auto operator<=>(const ProofStep&, const ProofStep&) = default;
};

struct PlannedStep {
  ProofStep step;
  int k = 0;
};

// For each k (increasing) and each tactic (config order): the tactic with the
// top-k retrieved premises. `retrieved_for` gives the ranked list used for a
// tactic. k beyond the list length is clipped; repeated steps are dropped.
inline std::vector<PlannedStep> plan_steps(const std::function<const std::vector<std::string>&(std::size_t)>& retrieved_for,
                                           const EvalConfig& c) {
  std::vector<PlannedStep> out;
  std::set<ProofStep> seen;
  for (int k : c.k_list) {
    for (std::size_t t = 0; t < c.tactics.size(); ++t) {
      const auto& ranked = retrieved_for(t);
      const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
      ProofStep s{c.tactics[t], std::vector<std::string>(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n))};
      if (seen.insert(s).second) out.push_back({std::move(s), k});
    }
  }
  return out;
}

inline std::vector<ProofStep> generate_steps(const std::vector<std::string>& retrieved, const EvalConfig& c) {
  std::vector<ProofStep> out;
  for (auto& p : plan_steps([&](std::size_t) -> const std::vector<std::string>& { return retrieved; }, c))
    out.push_back(std::move(p.step));
  return out;
}

// ---------------------------------------------------------------------------
// Mock prover

struct OracleEntry {
  StateId theorem_id = 0;
  std::vector<std::string> tactics;
  std::vector<std::vector<std::string>> sufficient_sets;

  friend bool operator==(const OracleEntry&, const OracleEntry&) = default;
};

class ProverOracle {
 public:
  ProverOracle() = default;

  explicit ProverOracle(std::vector<OracleEntry> entries) {
    for (auto& e : entries) add(std::move(e));
  }

  void add(OracleEntry e) {
    const StateId id = e.theorem_id;
    if (!entries_.emplace(id, std::move(e)).second)
      throw eval_error("oracle: duplicate theorem " + std::to_string(id));
  }

  bool knows(StateId id) const { return entries_.contains(id); }
  std::size_t size() const { return entries_.size(); }

  const OracleEntry& entry(StateId id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw eval_error("oracle: unknown theorem " + std::to_string(id));
    return it->second;
  }

  std::vector<OracleEntry> entries() const {
    std::vector<OracleEntry> out;
    for (const auto& [id, e] : entries_) out.push_back(e);
    return out;
  }

  // Every premise named in a sufficient set must exist in `c`.
  void check_against(const corpus::Corpus& c) const {
    for (const auto& [id, e] : entries_)
      for (const auto& set : e.sufficient_sets)
        for (const auto& name : set)
          if (!c.find_premise(name))
            throw eval_error("oracle: theorem " + std::to_string(id) + " names unknown premise '" + name + "'");
  }

  // Success iff the tactic is admissible and some sufficient set is covered.
  bool try_step(StateId theorem, const ProofStep& step) const {
    const auto& e = entry(theorem);
    if (std::find(e.tactics.begin(), e.tactics.end(), step.tactic) == e.tactics.end()) return false;
    std::set<std::string> have(step.premises.begin(), step.premises.end());
    for (const auto& set : e.sufficient_sets)
      if (std::all_of(set.begin(), set.end(), [&](const std::string& p) { return have.contains(p); })) return true;
    return false;
  }

 private:
  std::map<StateId, OracleEntry> entries_;
};

inline bool oracle_try_step(const ProverOracle& oracle, StateId theorem, const ProofStep& step) {
  return oracle.try_step(theorem, step);
}

inline nlohmann::ordered_json to_json(const OracleEntry& e) {
  return {{"theorem_id", e.theorem_id}, {"tactics", e.tactics}, {"sufficient_sets", e.sufficient_sets}};
}

inline ProverOracle load_oracle(const std::string& path) {
  ProverOracle o;
  corpus::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    OracleEntry e;
    e.theorem_id = j.at("theorem_id").get<StateId>();
    e.tactics = j.at("tactics").get<std::vector<std::string>>();
    e.sufficient_sets = j.at("sufficient_sets").get<std::vector<std::vector<std::string>>>();
    o.add(std::move(e));
  });
  return o;
}

inline void save_oracle(const ProverOracle& o, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw eval_error("cannot write " + path);
  for (const auto& e : o.entries()) out << to_json(e).dump() << '\n';
  if (!out) throw eval_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Suite evaluation

struct TheoremResult {
  StateId id = 0;
  bool solved = false;
  std::optional<int> solved_k;  // smallest k with a successful step
  std::optional<ProofStep> first_step;
  std::size_t steps_tried = 0;

  friend bool operator==(const TheoremResult&, const TheoremResult&) = default;
};

struct EvalReport {
  std::string stage;
  EvalConfig config;
  double budget = 0.0;
  std::vector<TheoremResult> theorems;

  std::size_t solved() const {
    return static_cast<std::size_t>(std::count_if(theorems.begin(), theorems.end(), [](const auto& t) { return t.solved; }));
  }

  double proof_rate() const {
    return theorems.empty() ? 0.0 : static_cast<double>(solved()) / static_cast<double>(theorems.size());
  }
};

// Ranked premise names for a theorem; `tactic` is set only in tactic-prompt
// mode.
using Retriever = std::function<std::vector<std::string>(StateId, const std::string* tactic)>;

inline TheoremResult evaluate_theorem(StateId id, const Retriever& retriever, const ProverOracle& oracle,
                                      const EvalConfig& c) {
  std::vector<std::vector<std::string>> lists;
  if (c.tactic_prompt) {
    for (const auto& t : c.tactics) lists.push_back(retriever(id, &t));
  } else {
    lists.push_back(retriever(id, nullptr));
  }
  auto steps = plan_steps(
      [&](std::size_t t) -> const std::vector<std::string>& { return lists[c.tactic_prompt ? t : 0]; }, c);
  TheoremResult r;
  r.id = id;
  r.steps_tried = steps.size();
  for (const auto& p : steps) {
    if (oracle_try_step(oracle, id, p.step)) {
      r.solved = true;
      r.solved_k = p.k;
      r.first_step = p.step;
      break;
    }
  }
  return r;
}

// Theorems are evaluated independently (optionally in parallel); results are
// kept in input order.
inline EvalReport evaluate_suite(const std::vector<StateId>& theorems, const Retriever& retriever,
                                 const ProverOracle& oracle, const EvalConfig& c, int workers = 1,
                                 std::string stage = {}) {
  c.validate();
  for (StateId id : theorems)
    if (!oracle.knows(id)) throw eval_error("oracle: unknown theorem " + std::to_string(id));
  EvalReport rep;
  rep.stage = stage.empty() ? (c.mode == Mode::full ? "rerank" : c.mode == Mode::select_only ? "select" : "bm25")
                            : std::move(stage);
  rep.config = c;
  rep.budget = compute_budget(c);
  rep.theorems.resize(theorems.size());
  parallel_for(theorems.size(), workers,
               [&](std::size_t i) { rep.theorems[i] = evaluate_theorem(theorems[i], retriever, oracle, c); });
  return rep;
}

struct CurvePoint {
  int k = 0;
  double budget = 0.0;  // budget of the k-list prefix ending at k
  double rate = 0.0;
};

// Fraction of theorems solved using at most k premises, for each k of the
// report's k list.
inline std::vector<CurvePoint> accumulated_proof_rate(const EvalReport& r) {
  std::vector<CurvePoint> out;
  const double n = static_cast<double>(r.theorems.size());
  for (std::size_t i = 0; i < r.config.k_list.size(); ++i) {
    const int k = r.config.k_list[i];
    std::size_t hit = 0;
    for (const auto& t : r.theorems)
      if (t.solved_k && *t.solved_k <= k) ++hit;
    const double budget =
        static_cast<double>(r.config.tactics.size()) * static_cast<double>(i + 1) * r.config.timeout;
    out.push_back({k, budget, n > 0 ? static_cast<double>(hit) / n : 0.0});
  }
  return out;
}

inline double ensemble_union(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw eval_error("ensemble: no reports");
  auto ids = [](const EvalReport& r) {
    std::set<StateId> s;
    for (const auto& t : r.theorems) s.insert(t.id);
    return s;
  };
  const auto base = ids(reports[0]);
  std::set<StateId> solved;
  for (const auto& r : reports) {
    if (ids(r) != base) throw eval_error("ensemble: reports cover different theorem sets");
    for (const auto& t : r.theorems)
      if (t.solved) solved.insert(t.id);
  }
  return base.empty() ? 0.0 : static_cast<double>(solved.size()) / static_cast<double>(base.size());
}

// ---------------------------------------------------------------------------
// Output

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["stage"] = r.stage;
  j["config"] = to_json(r.config);
  j["budget"] = r.budget;
  j["total"] = r.theorems.size();
  j["solved"] = r.solved();
  j["proof_rate"] = r.proof_rate();
  auto curve = nlohmann::ordered_json::array();
  for (const auto& p : accumulated_proof_rate(r)) curve.push_back({{"k", p.k}, {"budget", p.budget}, {"rate", p.rate}});
  j["curve"] = curve;
  auto th = nlohmann::ordered_json::array();
  for (const auto& t : r.theorems) {
    nlohmann::ordered_json e{{"id", t.id}, {"solved", t.solved}, {"steps_tried", t.steps_tried}};
    e["solved_k"] = t.solved_k ? nlohmann::ordered_json(*t.solved_k) : nlohmann::ordered_json(nullptr);
    if (t.first_step)
      e["first_step"] = {{"tactic", t.first_step->tactic}, {"premises", t.first_step->premises}};
    else
      e["first_step"] = nullptr;
    th.push_back(std::move(e));
  }
  j["theorems"] = th;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.stage = j.at("stage").get<std::string>();
  const auto& c = j.at("config");
  r.config.tactics = c.at("tactics").get<std::vector<std::string>>();
  r.config.k_list = c.at("k_list").get<std::vector<int>>();
  r.config.timeout = c.at("timeout").get<double>();
  r.config.select_k = c.at("select_k").get<int>();
  r.config.rerank_k = c.at("rerank_k").get<int>();
  r.config.mode = parse_mode(c.at("mode").get<std::string>());
  r.config.tactic_prompt = c.at("tactic_prompt").get<bool>();
  r.budget = j.at("budget").get<double>();
  for (const auto& e : j.at("theorems")) {
    TheoremResult t;
    t.id = e.at("id").get<StateId>();
    t.solved = e.at("solved").get<bool>();
    t.steps_tried = e.at("steps_tried").get<std::size_t>();
    if (!e.at("solved_k").is_null()) t.solved_k = e.at("solved_k").get<int>();
    if (!e.at("first_step").is_null())
      t.first_step = ProofStep{e["first_step"].at("tactic").get<std::string>(),
                               e["first_step"].at("premises").get<std::vector<std::string>>()};
    r.theorems.push_back(std::move(t));
  }
  return r;
}

inline std::string summary_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "stage " << r.stage << "  mode " << to_string(r.config.mode) << "  budget C=" << r.budget << "\n";
  os << "solved " << r.solved() << " / " << r.theorems.size() << "  proof rate " << 100.0 * r.proof_rate() << "%\n";
  os << std::setw(8) << "k" << std::setw(12) << "budget" << std::setw(12) << "rate %" << "\n";
  for (const auto& p : accumulated_proof_rate(r))
    os << std::setw(8) << p.k << std::setw(12) << p.budget << std::setw(12) << 100.0 * p.rate << "\n";
  return os.str();
}

inline std::string curve_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "k,budget,proof_rate\n";
  for (const auto& p : accumulated_proof_rate(r)) os << p.k << ',' << p.budget << ',' << p.rate << '\n';
  return os.str();
}

}  // namespace hammerlite::eval
