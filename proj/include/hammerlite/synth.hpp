#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hammerlite/corpus.hpp"
#include "hammerlite/eval.hpp"
#include "hammerlite/util/random.hpp"

namespace hammerlite::synth {

struct SynthSpec {
  int premises = 256;
  int states = 512;
  int symbols = 1024;        // size of the symbol vocabulary
  int statement_length = 6;  // symbols per premise statement
  int max_gt = 3;            // ground-truth premises per state: 1..max_gt
  double overlap = 0.6;      // fraction of each gt statement copied into the goal
  double distractor = 0.0;   // chance that each of the decoy slots is filled
  int decoy_slots = 4;
  corpus::SplitFractions split{0.8, 0.1, 0.1};
  std::uint64_t seed = 1;

  void validate() const {
    if (premises < 1 || states < 1) throw std::invalid_argument("synth: premise and state counts must be >= 1");
    if (statement_length < 1) throw std::invalid_argument("synth: statement length must be >= 1");
    if (symbols < statement_length) throw std::invalid_argument("synth: need at least statement_length symbols");
    if (max_gt < 1) throw std::invalid_argument("synth: max_gt must be >= 1");
    if (!(overlap >= 0.0 && overlap <= 1.0)) throw std::invalid_argument("synth: overlap must lie in [0, 1]");
    if (!(distractor >= 0.0 && distractor <= 1.0))
      throw std::invalid_argument("synth: distractor rate must lie in [0, 1]");
    if (decoy_slots < 0) throw std::invalid_argument("synth: decoy slots must be >= 0");
  }
};

inline nlohmann::ordered_json to_json(const SynthSpec& s) {
  return {{"premises", s.premises},
          {"states", s.states},
          {"symbols", s.symbols},
          {"statement_length", s.statement_length},
          {"max_gt", s.max_gt},
          {"overlap", s.overlap},
          {"distractor", s.distractor},
          {"decoy_slots", s.decoy_slots},
          {"split", {s.split.train, s.split.valid, s.split.test}},
          {"seed", s.seed}};
}

// Pronounceable pseudo-identifier for symbol i: consonant-vowel syllables,
// unique per index.
inline std::string symbol_name(int i) {
  static constexpr char consonants[] = "bdfgklmnprstvz";
  static constexpr char vowels[] = "aeiou";
  constexpr int nc = sizeof consonants - 1;
  constexpr int nv = sizeof vowels - 1;
  std::string out;
  int x = i;
  do {
    out.push_back(consonants[x % nc]);
    x /= nc;
    out.push_back(vowels[x % nv]);
    x /= nv;
  } while (x > 0);
  return out;
}

struct Benchmark {
  corpus::Corpus corpus;
  eval::ProverOracle oracle;
};

// Premise i: name "lem_<i>", statement of distinct random symbols. State: an
// optional "assume" block holding full statements of non-gt decoy premises in
// upper case (identical to the premise after case folding), then "show"
// followed by ceil(overlap * len) symbols of every gt premise, shuffled.
// Every state is provable by metis from its full gt set.
inline Benchmark generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, {0x5e7b}));
  const int vocab = spec.symbols;

  std::vector<corpus::Premise> premises;
  std::vector<std::vector<int>> statement_symbols;
  for (int i = 0; i < spec.premises; ++i) {
    auto picked = sample_without_replacement(rng, static_cast<std::size_t>(vocab),
                                             static_cast<std::size_t>(spec.statement_length));
    std::vector<int> syms(picked.begin(), picked.end());
    std::string stmt;
    for (int s : syms) {
      if (!stmt.empty()) stmt.push_back(' ');
      stmt += symbol_name(s);
    }
    premises.push_back({i, "lem_" + std::to_string(i), stmt});
    statement_symbols.push_back(std::move(syms));
  }

  const auto keep = static_cast<std::size_t>(std::ceil(spec.overlap * spec.statement_length - 1e-9));
  const int max_gt = std::min(spec.max_gt, spec.premises);
  std::vector<corpus::ProofState> states;
  std::vector<eval::OracleEntry> oracle;
  for (int j = 0; j < spec.states; ++j) {
    const auto n_gt = 1 + uniform_index(rng, static_cast<std::size_t>(max_gt));
    const auto gt = sample_without_replacement(rng, static_cast<std::size_t>(spec.premises), n_gt);

    std::vector<int> goal;
    for (auto p : gt) {
      const auto& syms = statement_symbols[p];
      for (auto k : sample_without_replacement(rng, syms.size(), keep)) goal.push_back(syms[k]);
    }
    shuffle(goal, rng);

    std::string assume;
    for (int slot = 0; slot < spec.decoy_slots; ++slot) {
      if (unit_interval(rng()) >= spec.distractor) continue;
      if (static_cast<std::size_t>(spec.premises) <= gt.size()) break;
      std::size_t d;
      do d = uniform_index(rng, static_cast<std::size_t>(spec.premises));
      while (std::find(gt.begin(), gt.end(), d) != gt.end());
      std::string decoy = premises[d].statement;
      for (char& ch : decoy) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      assume += (assume.empty() ? "" : " ; ") + decoy;
    }

    std::string text = assume.empty() ? "show" : "assume " + assume + " show";
    for (int s : goal) text += " " + symbol_name(s);

    corpus::ProofState st;
    st.id = j;
    st.text = std::move(text);
    for (auto p : gt) st.premises.push_back(premises[p].name);
    st.source = corpus::Source::hpl;
    st.split = corpus::assign_split(j, spec.split, spec.seed);
    oracle.push_back({j, {"metis"}, {st.premises}});
    states.push_back(std::move(st));
  }
  corpus::Corpus c(std::move(premises), std::move(states));
  return {c.with_datapoints(corpus::extract_pairs(c)), eval::ProverOracle(std::move(oracle))};
}

}  // namespace hammerlite::synth
