#include <Eigen/Core>
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "hammerlite.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace hammerlite;

namespace {

// JSON config files: nested objects address subcommands.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool, bool, std::string) const override {
    return options_json(app).dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
    std::vector<CLI::ConfigItem> out;
    collect(j, {}, out);
    return out;
  }

  // Every named option with its current or default value, recursing into
  // parsed subcommands.
  static json options_json(const CLI::App* app) {
    json j = json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string name = opt->get_lnames().front();
      if (name == "help" || name == "config") continue;
      std::vector<std::string> values = opt->count() > 0 ? opt->results() : std::vector<std::string>{};
      if (values.empty()) {
        const std::string d = opt->get_default_str();
        if (d.empty()) continue;
        values = split_default(d);
      }
      if (opt->get_expected_max() > 1 || values.size() > 1) {
        json arr = json::array();
        for (const auto& v : values) arr.push_back(scalar(v));
        j[name] = arr;
      } else {
        j[name] = scalar(values.front());
      }
    }
    for (const CLI::App* sub : app->get_subcommands()) j[sub->get_name()] = options_json(sub);
    return j;
  }

 private:
  static void collect(const nlohmann::json& j, std::vector<std::string> parents, std::vector<CLI::ConfigItem>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it->is_object()) {
        auto p = parents;
        p.push_back(it.key());
        collect(*it, p, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = it.key();
      if (it->is_array()) {
        for (const auto& v : *it) item.inputs.push_back(text_of(v));
      } else if (!it->is_null()) {
        item.inputs.push_back(text_of(*it));
      } else {
        continue;
      }
      out.push_back(std::move(item));
    }
  }

  static std::string text_of(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

  static json scalar(const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    try {
      std::size_t used = 0;
      if (s.find_first_of(".eE") == std::string::npos) {
        const long long v = std::stoll(s, &used);
        if (used == s.size()) return v;
      } else {
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
      }
    } catch (const std::exception&) {
    }
    return s;
  }

  // Vector defaults are captured as "[a,b,c]".
  static std::vector<std::string> split_default(const std::string& d) {
    if (d.size() < 2 || d.front() != '[' || d.back() != ']') return {d};
    std::vector<std::string> out;
    std::stringstream ss(d.substr(1, d.size() - 2));
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(part);
    return out;
  }
};

struct Global {
  std::uint64_t seed = 1;
  int workers = 1;
  std::string out = "hammerlite_out";
};

struct CorpusPaths {
  std::string premises;
  std::string states;
  std::string datapoints;

  corpus::Corpus load() const { return corpus::load_corpus(premises, states, datapoints); }
};

void add_corpus_options(CLI::App* sub, CorpusPaths& p, bool states_required = true) {
  sub->add_option("--premises", p.premises, "premises JSONL")->required()->check(CLI::ExistingFile);
  auto* s = sub->add_option("--states", p.states, "states JSONL")->check(CLI::ExistingFile);
  if (states_required) s->required();
  sub->add_option("--datapoints", p.datapoints, "explicit datapoints JSONL")->check(CLI::ExistingFile);
}

void add_model_options(CLI::App* sub, model::ModelConfig& m) {
  sub->add_option("--layers", m.layers, "transformer layers L");
  sub->add_option("--dim", m.dim, "model width D");
  sub->add_option("--context", m.context, "context length in tokens");
}

void add_eval_options(CLI::App* sub, eval::EvalConfig& e, std::string& mode) {
  sub->add_option("--tactics", e.tactics, "tactic names")->delimiter(',');
  sub->add_option("--k-list", e.k_list, "premise counts k")->delimiter(',');
  sub->add_option("--timeout", e.timeout, "per-step timeout T in seconds");
  sub->add_option("--select-k", e.select_k, "K_S");
  sub->add_option("--rerank-k", e.rerank_k, "K_R");
  sub->add_option("--mode", mode, "full, select_only or bm25")->check(CLI::IsMember({"full", "select_only", "bm25"}));
  sub->add_flag("--tactic-prompt", e.tactic_prompt, "condition retrieval on the tactic");
}

std::string join_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  return nlohmann::json::parse(f);
}

std::vector<corpus::StateId> theorems_for(const corpus::Corpus& c, const std::string& split) {
  if (split == "all") return c.state_ids();
  return c.state_ids(corpus::parse_split(split));
}

void write_report(const std::string& out, const eval::EvalReport& r) {
  write_json(join_path(out, "report.json"), eval::to_json(r));
  write_text(join_path(out, "summary.txt"), eval::summary_table(r));
  write_text(join_path(out, "curve.csv"), eval::curve_csv(r));
  std::cout << eval::summary_table(r);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hammerlite: neural premise selection"};
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config file (flags override it)");
  app.allow_config_extras(CLI::config_extras_mode::ignore);
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();

  Global g;
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--workers", g.workers, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");

  // synth
  synth::SynthSpec sp;
  std::vector<double> split_fracs{sp.split.train, sp.split.valid, sp.split.test};
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic corpus and oracle");
  c_synth->add_option("--premises", sp.premises, "premise count P");
  c_synth->add_option("--states", sp.states, "state count S");
  c_synth->add_option("--symbols", sp.symbols, "symbol vocabulary size");
  c_synth->add_option("--statement-length", sp.statement_length, "symbols per premise");
  c_synth->add_option("--max-gt", sp.max_gt, "maximum ground-truth premises per state");
  c_synth->add_option("--overlap", sp.overlap, "overlap rate");
  c_synth->add_option("--distractor", sp.distractor, "distractor rate");
  c_synth->add_option("--decoy-slots", sp.decoy_slots, "decoy slots per state");
  c_synth->add_option("--split", split_fracs, "train,valid,test fractions")->delimiter(',')->expected(3);

  // ingest
  CorpusPaths ingest_paths;
  double fraction = 1.0;
  std::vector<double> resplit;
  auto* c_ingest = app.add_subcommand("ingest", "validate a corpus, optionally re-split and subsample it");
  add_corpus_options(c_ingest, ingest_paths);
  c_ingest->add_option("--fraction", fraction, "fraction of training pairs to keep");
  c_ingest->add_option("--resplit", resplit, "train,valid,test fractions")->delimiter(',')->expected(3);

  // stats
  CorpusPaths stats_paths;
  auto* c_stats = app.add_subcommand("stats", "datapoint statistics per source");
  add_corpus_options(c_stats, stats_paths);

  // train
  CorpusPaths train_paths;
  model::ModelConfig train_model;
  training::TrainConfig tc = training::TrainConfig::desk();
  std::string init_ckpt;
  bool no_mask = false;
  auto* c_train = app.add_subcommand("train", "alternating SELECT/RERANK training");
  add_corpus_options(c_train, train_paths);
  add_model_options(c_train, train_model);
  c_train->add_option("--init", init_ckpt, "start from this checkpoint")->check(CLI::ExistingFile);
  c_train->add_option("--steps", tc.steps, "training iterations");
  c_train->add_option("--lr", tc.lr, "peak learning rate");
  c_train->add_option("--select-batch", tc.select_batch, "N: states per select step");
  c_train->add_option("--extra-negatives", tc.extra_negatives, "M: extra negatives per select step");
  c_train->add_option("--temperature", tc.temperature, "InfoNCE temperature");
  c_train->add_option("--rerank-positives", tc.rerank_positives, "positives per rerank step");
  c_train->add_option("--negatives-per-positive", tc.negatives_per_positive, "mined negatives per positive");
  c_train->add_option("--mined-pool", tc.mined_pool, "hard-negative pool size per state");
  c_train->add_option("--refresh-interval", tc.refresh_interval, "T: steps between mining");
  c_train->add_option("--dropout", tc.dropout, "dropout rate");
  c_train->add_option("--weight-decay", tc.weight_decay, "AdamW weight decay");
  c_train->add_option("--warmup", tc.warmup_fraction, "warmup fraction");
  c_train->add_option("--probe-states", tc.probe_states, "validation states for probe recall");
  c_train->add_option("--stop-at-recall", tc.stop_at_train_recall, "stop once train recall@k reaches this");
  c_train->add_option("--patience", tc.patience, "refreshes without probe improvement before stopping");
  c_train->add_flag("--no-mask-collisions", no_mask, "keep in-batch columns that are gt for the row");

  // pretrain-lm
  CorpusPaths lm_paths;
  model::ModelConfig lm_model;
  training::LmConfig lc;
  std::string lm_text;
  auto* c_lm = app.add_subcommand("pretrain-lm", "causal LM pretraining on corpus text");
  c_lm->add_option("--premises", lm_paths.premises, "premises JSONL")->check(CLI::ExistingFile);
  c_lm->add_option("--states", lm_paths.states, "states JSONL")->check(CLI::ExistingFile);
  c_lm->add_option("--text", lm_text, "plain text file instead of a corpus")->check(CLI::ExistingFile);
  add_model_options(c_lm, lm_model);
  c_lm->add_option("--steps", lc.steps, "optimizer steps");
  c_lm->add_option("--batch", lc.batch, "windows per step");
  c_lm->add_option("--seq-len", lc.seq_len, "window length");
  c_lm->add_option("--lr", lc.lr, "peak learning rate");

  // index
  CorpusPaths index_paths;
  std::string index_model;
  auto* c_index = app.add_subcommand("index", "embed every premise with a trained model");
  add_corpus_options(c_index, index_paths, false);
  c_index->add_option("--model", index_model, "checkpoint")->required()->check(CLI::ExistingFile);

  // query
  CorpusPaths query_paths;
  std::string query_model, query_index, query_text;
  corpus::StateId query_state = -1;
  int q_select = 64, q_rerank = 10;
  std::string q_mode = "full";
  auto* c_query = app.add_subcommand("query", "retrieve premises for one state");
  add_corpus_options(c_query, query_paths, false);
  c_query->add_option("--model", query_model, "checkpoint")->required()->check(CLI::ExistingFile);
  c_query->add_option("--index", query_index, "prebuilt index")->check(CLI::ExistingFile);
  auto* q_text_opt = c_query->add_option("--text", query_text, "state text");
  auto* q_id_opt = c_query->add_option("--state-id", query_state, "state id from --states");
  q_text_opt->excludes(q_id_opt);
  c_query->add_option("--select-k", q_select, "K_S");
  c_query->add_option("--rerank-k", q_rerank, "K_R");
  c_query->add_option("--mode", q_mode, "full or select_only")->check(CLI::IsMember({"full", "select_only"}));

  // evaluate
  CorpusPaths eval_paths;
  eval::EvalConfig ec;
  std::string eval_mode = "full", eval_model, eval_index, eval_oracle, eval_split = "test";
  auto* c_eval = app.add_subcommand("evaluate", "proof-rate evaluation against an oracle");
  add_corpus_options(c_eval, eval_paths);
  add_eval_options(c_eval, ec, eval_mode);
  c_eval->add_option("--model", eval_model, "checkpoint")->check(CLI::ExistingFile);
  c_eval->add_option("--index", eval_index, "prebuilt index")->check(CLI::ExistingFile);
  c_eval->add_option("--oracle", eval_oracle, "oracle JSONL")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--split", eval_split, "train, valid, test or all");

  // bm25-eval
  CorpusPaths bm_paths;
  eval::EvalConfig bc;
  std::string bm_mode = "bm25", bm_oracle, bm_split = "test";
  auto* c_bm = app.add_subcommand("bm25-eval", "proof-rate evaluation of the BM25 baseline");
  add_corpus_options(c_bm, bm_paths);
  add_eval_options(c_bm, bc, bm_mode);
  c_bm->add_option("--oracle", bm_oracle, "oracle JSONL")->required()->check(CLI::ExistingFile);
  c_bm->add_option("--split", bm_split, "train, valid, test or all");

  // grad-check
  model::ModelConfig gc_model;
  gc_model.layers = 2;
  gc_model.dim = 32;
  std::size_t gc_samples = 200;
  double gc_h = 1e-5, gc_tol = 1e-5;
  auto* c_gc = app.add_subcommand("grad-check", "finite-difference gradient check in double precision");
  add_model_options(c_gc, gc_model);
  c_gc->add_option("--samples", gc_samples, "sampled parameters");
  c_gc->add_option("--step", gc_h, "central difference step");
  c_gc->add_option("--tolerance", gc_tol, "maximum relative error");

  // param-count
  model::ModelConfig pc_model;
  auto* c_pc = app.add_subcommand("param-count", "non-embedding parameter count");
  add_model_options(c_pc, pc_model);

  // ensemble
  std::vector<std::string> ens_reports;
  auto* c_ens = app.add_subcommand("ensemble", "union of theorems solved by several reports");
  c_ens->add_option("reports", ens_reports, "report.json files")->required()->expected(1, -1)->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  const CLI::App* cmd = app.get_subcommands().front();
  try {
    fs::create_directories(g.out);
    json manifest = JsonConfig::options_json(&app);
    manifest["command"] = cmd->get_name();
    manifest["hammerlite_version"] = kVersion;
    manifest["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION);
    manifest["compiler"] = __VERSION__;
    write_json(join_path(g.out, "manifest.json"), manifest);

    const retrieval::EmbedOptions embed{g.workers, 16};

    if (cmd == c_synth) {
      sp.seed = g.seed;
      sp.split = {split_fracs[0], split_fracs[1], split_fracs[2]};
      const auto bench = synth::generate(sp);
      corpus::save_corpus(bench.corpus, join_path(g.out, "premises.jsonl"), join_path(g.out, "states.jsonl"));
      corpus::save_datapoints(bench.corpus, join_path(g.out, "datapoints.jsonl"));
      eval::save_oracle(bench.oracle, join_path(g.out, "oracle.jsonl"));
      std::cout << "premises " << bench.corpus.premises().size() << "  states " << bench.corpus.states().size()
                << "  oracle theorems " << bench.oracle.size() << "\n";
    } else if (cmd == c_ingest) {
      auto c = ingest_paths.load();
      if (!resplit.empty()) c = corpus::split_corpus(c, {resplit[0], resplit[1], resplit[2]}, g.seed);
      if (c.datapoints().empty()) c = c.with_datapoints(corpus::extract_pairs(c));
      if (fraction < 1.0) c = corpus::sample_fraction(c, fraction, g.seed);
      corpus::save_corpus(c, join_path(g.out, "premises.jsonl"), join_path(g.out, "states.jsonl"));
      corpus::save_datapoints(c, join_path(g.out, "datapoints.jsonl"));
      std::cout << "premises " << c.premises().size() << "  states " << c.states().size() << "  datapoints "
                << c.datapoints().size() << "\n";
    } else if (cmd == c_stats) {
      const auto st = corpus::corpus_stats(stats_paths.load());
      auto part = [](const corpus::PartitionStats& p) {
        return json{{"datapoints", p.datapoints}, {"unique_states", p.unique_states}, {"unique_premises", p.unique_premises}};
      };
      const json j{{"HPL", part(st.hpl)}, {"SH", part(st.sh)}, {"total", part(st.total)}};
      write_json(join_path(g.out, "stats.json"), j);
      std::cout << j.dump(2) << "\n";
    } else if (cmd == c_train) {
      const auto c = train_paths.load();
      tc.mask_collisions = !no_mask;
      auto m = init_ckpt.empty() ? model::Model<float>::init(train_model, derive_seed(g.seed, {1}))
                                 : model::load_checkpoint<float>(init_ckpt);
      std::ofstream metrics(join_path(g.out, "metrics.jsonl"), std::ios::binary);
      training::TrainOptions opt;
      opt.exec.workers = g.workers;
      opt.on_record = [&](const training::MetricsRecord& r) {
        const auto line = training::to_json(r, tc.recall_k).dump();
        metrics << line << '\n' << std::flush;
        std::cout << line << std::endl;
      };
      auto res = training::train_alternating(std::move(m), c, tc, derive_seed(g.seed, {2}), opt);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
      model::save_checkpoint(res.model, join_path(g.out, "model.ckpt"));
      std::cout << "steps " << res.steps_run << (res.stopped_early ? " (stopped early)" : "") << "\n";
    } else if (cmd == c_lm) {
      std::string text;
      if (!lm_text.empty()) {
        std::ifstream f(lm_text, std::ios::binary);
        text.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
      } else {
        if (lm_paths.premises.empty()) throw std::runtime_error("pretrain-lm needs --text or --premises");
        const auto c = lm_paths.load();
        for (const auto& p : c.premises()) text += corpus::premise_text(p) + "\n";
        for (const auto& s : c.states()) text += s.text + "\n";
      }
      auto m = model::Model<float>::init(lm_model, derive_seed(g.seed, {1}));
      auto res = training::pretrain_lm(std::move(m), text, lc, derive_seed(g.seed, {3}), {g.workers});
      std::ofstream losses(join_path(g.out, "lm_losses.jsonl"), std::ios::binary);
      for (std::size_t i = 0; i < res.losses.size(); ++i) losses << json{{"step", i}, {"loss", res.losses[i]}}.dump() << '\n';
      model::save_checkpoint(res.model, join_path(g.out, "model.ckpt"));
      if (!res.losses.empty())
        std::cout << "first loss " << res.losses.front() << "  last loss " << res.losses.back() << "\n";
    } else if (cmd == c_index) {
      const auto c = index_paths.load();
      const auto m = model::load_checkpoint<float>(index_model);
      const auto idx = retrieval::build_index(m, c, std::nullopt, embed);
      retrieval::save_index(idx, join_path(g.out, "index.bin"));
      std::cout << "indexed " << idx.size() << " premises\n";
    } else if (cmd == c_query) {
      const auto c = query_paths.load();
      const auto m = model::load_checkpoint<float>(query_model);
      const auto idx = query_index.empty() ? retrieval::build_index(m, c, std::nullopt, embed)
                                           : retrieval::load_index(query_index, m.fingerprint());
      std::string state_text = query_text;
      std::optional<std::vector<corpus::PremiseId>> allowed;
      if (query_state >= 0) {
        state_text = c.state(query_state).text;
        allowed = c.candidate_ids(query_state);
      }
      if (state_text.empty()) throw std::runtime_error("query needs --text or --state-id");
      const auto mode = q_mode == "full" ? retrieval::Mode::full : retrieval::Mode::select_only;
      const auto r = retrieval::retrieve(state_text, idx, m, c, static_cast<std::size_t>(q_select),
                                         static_cast<std::size_t>(q_rerank), mode, allowed, embed);
      json out{{"stage", retrieval::to_string(r.stage)}, {"results", json::array()}};
      for (const auto& s : r.ranked)
        out["results"].push_back({{"id", s.id}, {"name", c.premise(s.id).name}, {"score", s.score}});
      write_json(join_path(g.out, "query.json"), out);
      std::cout << out.dump(2) << "\n";
    } else if (cmd == c_eval || cmd == c_bm) {
      const bool is_bm = cmd == c_bm;
      const auto& paths = is_bm ? bm_paths : eval_paths;
      auto cfg = is_bm ? bc : ec;
      cfg.mode = eval::parse_mode(is_bm ? bm_mode : eval_mode);
      if (is_bm && cfg.mode != eval::Mode::bm25) throw std::runtime_error("bm25-eval supports only --mode bm25");
      const auto c = paths.load();
      const auto oracle = eval::load_oracle(is_bm ? bm_oracle : eval_oracle);
      oracle.check_against(c);
      const auto theorems = theorems_for(c, is_bm ? bm_split : eval_split);
      eval::EvalReport report;
      if (cfg.mode == eval::Mode::bm25) {
        const auto bm = retrieval::bm25_build(c);
        report = eval::evaluate_suite(theorems, pipeline::bm25_retriever(bm, c, pipeline::max_k(cfg)), oracle, cfg,
                                      g.workers);
      } else {
        if (eval_model.empty()) throw std::runtime_error("evaluate needs --model unless --mode bm25");
        const auto m = model::load_checkpoint<float>(eval_model);
        const auto idx = eval_index.empty() ? retrieval::build_index(m, c, std::nullopt, embed)
                                            : retrieval::load_index(eval_index, m.fingerprint());
        report = eval::evaluate_suite(theorems, pipeline::model_retriever(m, c, idx, cfg, {1, 16}), oracle, cfg,
                                      g.workers);
      }
      write_report(g.out, report);
    } else if (cmd == c_gc) {
      const auto rep = gradcheck::check(gc_model, g.seed, gc_samples, gc_h);
      const json j{{"samples", rep.samples},          {"max_rel_error", rep.max_rel_error},
                   {"worst_param", rep.worst_param},   {"analytic", rep.worst_analytic},
                   {"numeric", rep.worst_numeric},     {"tolerance", gc_tol},
                   {"pass", rep.max_rel_error < gc_tol}};
      write_json(join_path(g.out, "grad_check.json"), j);
      std::cout << j.dump(2) << "\n";
      if (rep.max_rel_error >= gc_tol) return 1;
    } else if (cmd == c_pc) {
      pc_model.validate();
      const json j{{"layers", pc_model.layers},
                   {"dim", pc_model.dim},
                   {"params", model::param_count_matrices(pc_model)},
                   {"params_exact", model::param_count(pc_model)}};
      write_json(join_path(g.out, "param_count.json"), j);
      std::cout << j.dump(2) << "\n";
    } else if (cmd == c_ens) {
      std::vector<eval::EvalReport> reports;
      json rates = json::array();
      for (const auto& p : ens_reports) {
        reports.push_back(eval::report_from_json(read_json(p)));
        rates.push_back({{"report", p}, {"proof_rate", reports.back().proof_rate()}});
      }
      const json j{{"components", rates}, {"union_proof_rate", eval::ensemble_union(reports)}};
      write_json(join_path(g.out, "ensemble.json"), j);
      std::cout << j.dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
