#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hammerlite/nn/graph.hpp"
#include "hammerlite/nn/kernels.hpp"
#include "hammerlite/nn/tensor.hpp"
#include "hammerlite/text.hpp"
#include "hammerlite/util/random.hpp"

namespace hammerlite::model {

using nn::Graph;
using nn::Index;
using nn::Tensor;
using nn::Var;
using text::Token;

class model_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Decoder-only transformer shape. Heads are 64 wide (H = D/64); widths
// below 64 fall back to a single head of width D.
struct ModelConfig {
  int layers = 2;
  int dim = 128;
  int vocab = text::kVocabSize;
  int context = 256;

  int heads() const { return dim >= 64 ? dim / 64 : 1; }
  int head_dim() const { return dim / heads(); }
  int ff() const { return 4 * dim; }

  void validate() const {
    if (layers < 1) throw model_error("config: layers must be >= 1");
    if (dim < 2 || dim % 2 != 0) throw model_error("config: dim must be a positive even number");
    if (dim >= 64 && dim % 64 != 0) throw model_error("config: dim >= 64 must be a multiple of 64");
    if (vocab < text::kByteOffset + 1) throw model_error("config: vocab too small");
    if (context < 3) throw model_error("config: context must be >= 3");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"layers", c.layers}, {"dim", c.dim}, {"vocab", c.vocab}, {"context", c.context}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.dim = j.at("dim").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.context = j.at("context").get<int>();
  return c;
}

// Exact non-embedding parameter count of the allocated model:
// per layer 4D^2 (attention) + 8D^2 (MLP) + 4D (two norms); final norm 2D;
// state and premise projections 2D^2; rerank head D.
inline std::int64_t param_count(const ModelConfig& c) {
  const std::int64_t L = c.layers;
  const std::int64_t D = c.dim;
  return L * (12 * D * D + 4 * D) + 2 * D + 2 * D * D + D;
}

// The matrix-only figure 12 L D^2 + 2 D^2 used for model-size tables.
inline std::int64_t param_count_matrices(const ModelConfig& c) {
  const std::int64_t L = c.layers;
  const std::int64_t D = c.dim;
  return 12 * L * D * D + 2 * D * D;
}

// Position of each tensor in the flat parameter list.
struct Layout {
  enum Slot : std::size_t { ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w_in, w_out, kSlots };

  static constexpr std::size_t embedding = 0;
  static constexpr std::size_t layer(int l, Slot s) { return 1 + static_cast<std::size_t>(l) * kSlots + s; }
  static constexpr std::size_t final_gain(int layers) { return layer(layers, ln1_gain); }
  static constexpr std::size_t final_bias(int layers) { return final_gain(layers) + 1; }
  static constexpr std::size_t state_proj(int layers) { return final_gain(layers) + 2; }
  static constexpr std::size_t premise_proj(int layers) { return final_gain(layers) + 3; }
  static constexpr std::size_t rerank_proj(int layers) { return final_gain(layers) + 4; }
  static constexpr std::size_t count(int layers) { return final_gain(layers) + 5; }
};

template <typename T>
nn::ParamSet<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(derive_seed(seed, {0x1417}));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_std = 0.02 / std::sqrt(2.0 * c.layers);
  nn::ParamSet<T> p;
  auto gaussian = [&](const std::string& name, Index rows, Index cols, double std) {
    Tensor<T> t(rows, cols);
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(std * normal(rng));
    p.names.push_back(name);
    p.values.push_back(std::move(t));
  };
  auto constant = [&](const std::string& name, Index cols, T value) {
    p.names.push_back(name);
    p.values.push_back(Tensor<T>::Constant(1, cols, value));
  };
  const Index D = c.dim;
  gaussian("token_embedding", c.vocab, D, 0.02);
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    constant(pre + "ln1.gain", D, T(1));
    constant(pre + "ln1.bias", D, T(0));
    gaussian(pre + "attn.wq", D, D, 0.02);
    gaussian(pre + "attn.wk", D, D, 0.02);
    gaussian(pre + "attn.wv", D, D, 0.02);
    gaussian(pre + "attn.wo", D, D, residual_std);
    constant(pre + "ln2.gain", D, T(1));
    constant(pre + "ln2.bias", D, T(0));
    gaussian(pre + "mlp.w_in", D, c.ff(), 0.02);
    gaussian(pre + "mlp.w_out", c.ff(), D, residual_std);
  }
  constant("final_ln.gain", D, T(1));
  constant("final_ln.bias", D, T(0));
  gaussian("state_proj", D, D, 0.02);
  gaussian("premise_proj", D, D, 0.02);
  gaussian("rerank_proj", D, 1, 0.02);
  return p;
}

// Per-sequence dropout randomness; every dropout site derives its own mask
// seed so masks do not depend on evaluation order.
using SeqBatch = std::vector<std::span<const Token>>;

struct DropoutCtx {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

template <typename T>
class Model {
 public:
  Model() = default;

  Model(ModelConfig config, nn::ParamSet<T> params) : config_(config), params_(std::move(params)) {
    config_.validate();
    check_shapes();
    rotary_ = std::make_shared<const nn::RotaryTable<T>>(config_.context, config_.head_dim());
  }

  static Model init(const ModelConfig& config, std::uint64_t seed) {
    return Model(config, init_params<T>(config, seed));
  }

  const ModelConfig& config() const { return config_; }
  const nn::ParamSet<T>& params() const { return params_; }
  nn::ParamSet<T>& params() { return params_; }

  // ------------------------------------------------------- graph builders

  // Hidden states after the final layer norm for several sequences packed
  // row-wise into one [sum of lengths, D] block. Sequences never attend to
  // each other and each starts at rotary position 0.
  Var backbone(Graph<T>& g, const std::vector<Var>& p, const SeqBatch& seqs, const DropoutCtx& drop = {}) const {
    if (seqs.empty()) throw model_error("empty batch");
    std::vector<Token> tokens;
    std::vector<Index> lengths;
    std::vector<int> positions;
    for (const auto& s : seqs) {
      check_tokens(s);
      tokens.insert(tokens.end(), s.begin(), s.end());
      lengths.push_back(static_cast<Index>(s.size()));
      for (std::size_t i = 0; i < s.size(); ++i) positions.push_back(static_cast<int>(i));
    }
    const int L = config_.layers;
    Var x = g.embedding(p[Layout::embedding], tokens);
    for (int l = 0; l < L; ++l) {
      auto at = [&](Layout::Slot s) { return p[Layout::layer(l, s)]; };
      Var h = g.layer_norm(x, at(Layout::ln1_gain), at(Layout::ln1_bias));
      Var q = g.rotary(g.matmul(h, at(Layout::wq)), *rotary_, positions);
      Var k = g.rotary(g.matmul(h, at(Layout::wk)), *rotary_, positions);
      Var v = g.matmul(h, at(Layout::wv));
      Var a = g.matmul(g.attention(q, k, v, config_.heads(), lengths), at(Layout::wo));
      a = g.dropout(a, drop.rate, derive_seed(drop.seed, {static_cast<std::uint64_t>(l), 0}));
      x = g.add(x, a);
      Var h2 = g.layer_norm(x, at(Layout::ln2_gain), at(Layout::ln2_bias));
      Var m = g.matmul(g.gelu(g.matmul(h2, at(Layout::w_in))), at(Layout::w_out));
      m = g.dropout(m, drop.rate, derive_seed(drop.seed, {static_cast<std::uint64_t>(l), 1}));
      x = g.add(x, m);
    }
    return g.layer_norm(x, p[Layout::final_gain(L)], p[Layout::final_bias(L)]);
  }

  Var backbone(Graph<T>& g, const std::vector<Var>& p, std::span<const Token> tokens,
               const DropoutCtx& drop = {}) const {
    return backbone(g, p, SeqBatch{tokens}, drop);
  }

  // Unit-norm [n, D] embeddings read at each sequence's closing EOS_STATE.
  Var state_embeddings(Graph<T>& g, const std::vector<Var>& p, const SeqBatch& seqs,
                       const DropoutCtx& drop = {}) const {
    for (const auto& s : seqs) require_last(s, text::kEosState, "state embedding");
    Var last = g.gather_rows(backbone(g, p, seqs, drop), last_rows(seqs));
    return g.l2_normalize_rows(g.matmul(last, p[Layout::state_proj(config_.layers)]));
  }

  Var premise_embeddings(Graph<T>& g, const std::vector<Var>& p, const SeqBatch& seqs,
                         const DropoutCtx& drop = {}) const {
    for (const auto& s : seqs) require_last(s, text::kEosPremise, "premise embedding");
    Var last = g.gather_rows(backbone(g, p, seqs, drop), last_rows(seqs));
    return g.l2_normalize_rows(g.matmul(last, p[Layout::premise_proj(config_.layers)]));
  }

  // Pre-sigmoid relevance [n, 1] of encoded (state, premise) pairs.
  Var rerank_logits(Graph<T>& g, const std::vector<Var>& p, const SeqBatch& seqs,
                    const DropoutCtx& drop = {}) const {
    for (const auto& s : seqs) {
      require_last(s, text::kEosPremise, "rerank score");
      if (std::count(s.begin(), s.end(), text::kSep) != 1)
        throw model_error("rerank score: pair encoding must contain exactly one SEP");
    }
    Var last = g.gather_rows(backbone(g, p, seqs, drop), last_rows(seqs));
    return g.matmul(last, p[Layout::rerank_proj(config_.layers)]);
  }

  Var state_embedding(Graph<T>& g, const std::vector<Var>& p, std::span<const Token> tokens,
                      const DropoutCtx& drop = {}) const {
    return state_embeddings(g, p, SeqBatch{tokens}, drop);
  }

  Var premise_embedding(Graph<T>& g, const std::vector<Var>& p, std::span<const Token> tokens,
                        const DropoutCtx& drop = {}) const {
    return premise_embeddings(g, p, SeqBatch{tokens}, drop);
  }

  Var rerank_logit(Graph<T>& g, const std::vector<Var>& p, std::span<const Token> tokens,
                   const DropoutCtx& drop = {}) const {
    return rerank_logits(g, p, SeqBatch{tokens}, drop);
  }

  // Next-token logits [seq, vocab] through the tied token embedding.
  Var lm_logits(Graph<T>& g, const std::vector<Var>& p, std::span<const Token> tokens,
                const DropoutCtx& drop = {}) const {
    return g.matmul_nt(backbone(g, p, tokens, drop), p[Layout::embedding]);
  }

  std::vector<Var> bind(Graph<T>& g, bool requires_grad) const {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (const auto& v : params_.values) out.push_back(g.input(v, requires_grad));
    return out;
  }

  // ------------------------------------------------------------ inference

  Tensor<T> hidden(std::span<const Token> tokens) const {
    Graph<T> g;
    auto p = bind(g, false);
    return g.value(backbone(g, p, tokens));
  }

  Tensor<T> embed_state(std::span<const Token> tokens) const {
    Graph<T> g;
    auto p = bind(g, false);
    return g.value(state_embedding(g, p, tokens));
  }

  Tensor<T> embed_premise(std::span<const Token> tokens) const {
    Graph<T> g;
    auto p = bind(g, false);
    return g.value(premise_embedding(g, p, tokens));
  }

  Tensor<T> embed_states(const SeqBatch& seqs) const {
    Graph<T> g;
    g.set_check_finite(false);
    auto p = bind(g, false);
    return nn::require_finite(g.value(state_embeddings(g, p, seqs)), "state embedding");
  }

  Tensor<T> embed_premises(const SeqBatch& seqs) const {
    Graph<T> g;
    g.set_check_finite(false);
    auto p = bind(g, false);
    return nn::require_finite(g.value(premise_embeddings(g, p, seqs)), "premise embedding");
  }

  // sigmoid of each pair's rerank logit.
  std::vector<double> rerank_scores(const SeqBatch& seqs) const {
    Graph<T> g;
    g.set_check_finite(false);
    auto p = bind(g, false);
    const Tensor<T>& z = nn::require_finite(g.value(rerank_logits(g, p, seqs)), "rerank logit");
    std::vector<double> out(seqs.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(z(static_cast<Index>(i), 0))));
    return out;
  }

  // sigmoid(rerank logit), strictly inside (0, 1) for finite logits.
  double rerank_score(std::span<const Token> tokens) const {
    Graph<T> g;
    auto p = bind(g, false);
    const double z = static_cast<double>(g.value(rerank_logit(g, p, tokens))(0, 0));
    return 1.0 / (1.0 + std::exp(-z));
  }

  Tensor<T> lm_logits(std::span<const Token> tokens) const {
    Graph<T> g;
    auto p = bind(g, false);
    return g.value(lm_logits(g, p, tokens));
  }

  // Stable 64-bit digest of the configuration and every parameter value.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&](const void* data, std::size_t n) {
      const auto* bytes = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    };
    const std::string cfg = to_json(config_).dump();
    feed(cfg.data(), cfg.size());
    for (const auto& v : params_.values) {
      for (Index i = 0; i < v.size(); ++i) {
        const float f = static_cast<float>(v.data()[i]);
        feed(&f, sizeof f);
      }
    }
    return h;
  }

 private:
  void check_shapes() const {
    const auto expected = init_shapes();
    if (params_.size() != expected.size())
      throw model_error("parameter count " + std::to_string(params_.size()) + " does not match config");
    for (std::size_t i = 0; i < expected.size(); ++i)
      if (params_.values[i].rows() != expected[i].first || params_.values[i].cols() != expected[i].second)
        throw model_error("parameter '" + params_.names[i] + "' has shape " + nn::shape_str(params_.values[i]));
  }

  std::vector<std::pair<Index, Index>> init_shapes() const {
    const Index D = config_.dim;
    std::vector<std::pair<Index, Index>> s{{config_.vocab, D}};
    for (int l = 0; l < config_.layers; ++l) {
      s.insert(s.end(), {{1, D}, {1, D}, {D, D}, {D, D}, {D, D}, {D, D}, {1, D}, {1, D},
                         {D, config_.ff()}, {config_.ff(), D}});
    }
    s.insert(s.end(), {{1, D}, {1, D}, {D, D}, {D, D}, {D, 1}});
    return s;
  }

  void check_tokens(std::span<const Token> tokens) const {
    if (tokens.empty()) throw model_error("empty token sequence");
    if (tokens.size() > static_cast<std::size_t>(config_.context))
      throw model_error("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context " +
                        std::to_string(config_.context));
    for (Token t : tokens)
      if (t < 0 || t >= config_.vocab) throw model_error("token outside vocabulary");
  }

  static std::vector<Index> last_rows(const SeqBatch& seqs) {
    std::vector<Index> rows;
    Index at = 0;
    for (const auto& s : seqs) {
      at += static_cast<Index>(s.size());
      rows.push_back(at - 1);
    }
    return rows;
  }

  static void require_last(std::span<const Token> tokens, Token expected, const char* what) {
    if (tokens.empty() || tokens.back() != expected)
      throw model_error(std::string(what) + ": sequence must end with its EOS token");
  }

  ModelConfig config_;
  nn::ParamSet<T> params_;
  std::shared_ptr<const nn::RotaryTable<T>> rotary_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "HMLTCKPT", u32 version, u32 header length, JSON header
// (config, dtype, tensor names and shapes), then raw little-endian values.

inline constexpr char kCheckpointMagic[8] = {'H', 'M', 'L', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  nlohmann::ordered_json header;
  header["config"] = to_json(m.config());
  header["dtype"] = std::is_same_v<T, float> ? "f32" : "f64";
  header["tensors"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.params().size(); ++i)
    header["tensors"].push_back({{"name", m.params().names[i]},
                                 {"rows", m.params().values[i].rows()},
                                 {"cols", m.params().values[i].cols()}});
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw model_error("cannot write checkpoint " + path);
  const auto len = static_cast<std::uint32_t>(h.size());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& v : m.params().values)
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  if (!out) throw model_error("failed writing checkpoint " + path);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw model_error("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint32_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw model_error(path + ": not a hammerlite checkpoint");
  if (version != kCheckpointVersion) throw model_error(path + ": unsupported checkpoint version");
  std::string h(len, '\0');
  in.read(h.data(), len);
  const auto header = nlohmann::json::parse(h);
  const ModelConfig config = config_from_json(header.at("config"));
  const std::string dtype = header.at("dtype").get<std::string>();
  nn::ParamSet<T> params;
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Index>();
    const auto cols = t.at("cols").get<Index>();
    Tensor<T> v(rows, cols);
    if (dtype == "f32") {
      std::vector<float> buf(static_cast<std::size_t>(rows * cols));
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
      for (std::size_t i = 0; i < buf.size(); ++i) v.data()[i] = static_cast<T>(buf[i]);
    } else if (dtype == "f64") {
      std::vector<double> buf(static_cast<std::size_t>(rows * cols));
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
      for (std::size_t i = 0; i < buf.size(); ++i) v.data()[i] = static_cast<T>(buf[i]);
    } else {
      throw model_error(path + ": unknown dtype " + dtype);
    }
    if (!in) throw model_error(path + ": truncated checkpoint");
    params.names.push_back(t.at("name").get<std::string>());
    params.values.push_back(std::move(v));
  }
  return Model<T>(config, std::move(params));
}

}  // namespace hammerlite::model
