#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <unistd.h>

#include "hammerlite/model.hpp"

using namespace hammerlite;
using namespace hammerlite::model;
using text::TokenSeq;

namespace {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

// Plain scalar-loop transformer forward pass, one sequence at a time.
struct NaiveForward {
  const ModelConfig& c;
  const nn::ParamSet<double>& p;

  double w(std::size_t tensor, long r, long col) const { return p.values[tensor](r, col); }

  Rows matmul(const Rows& x, std::size_t tensor) const {
    const auto& m = p.values[tensor];
    Rows out(x.size(), Vec(static_cast<std::size_t>(m.cols()), 0.0));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (long k = 0; k < m.rows(); ++k)
        for (long j = 0; j < m.cols(); ++j) out[i][static_cast<std::size_t>(j)] += x[i][static_cast<std::size_t>(k)] * m(k, j);
    return out;
  }

  Rows layer_norm(const Rows& x, std::size_t gain, std::size_t bias) const {
    Rows out = x;
    for (auto& row : out) {
      double mean = 0, var = 0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(row.size());
      for (double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(row.size());
      for (std::size_t j = 0; j < row.size(); ++j)
        row[j] = (row[j] - mean) / std::sqrt(var + 1e-5) * w(gain, 0, static_cast<long>(j)) + w(bias, 0, static_cast<long>(j));
    }
    return out;
  }

  void rotate(Rows& x) const {
    const int dh = c.head_dim();
    for (std::size_t pos = 0; pos < x.size(); ++pos)
      for (int h = 0; h < c.heads(); ++h)
        for (int i = 0; i < dh / 2; ++i) {
          const double angle = static_cast<double>(pos) * std::pow(10000.0, -2.0 * i / dh);
          double& a = x[pos][static_cast<std::size_t>(h * dh + 2 * i)];
          double& b = x[pos][static_cast<std::size_t>(h * dh + 2 * i + 1)];
          const double a0 = a;
          a = a0 * std::cos(angle) - b * std::sin(angle);
          b = a0 * std::sin(angle) + b * std::cos(angle);
        }
  }

  Rows attention(const Rows& q, const Rows& k, const Rows& v) const {
    const int dh = c.head_dim();
    Rows out(q.size(), Vec(q[0].size(), 0.0));
    for (int h = 0; h < c.heads(); ++h) {
      for (std::size_t t = 0; t < q.size(); ++t) {
        Vec s(t + 1);
        double mx = -1e300;
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0;
          for (int d = 0; d < dh; ++d) dot += q[t][static_cast<std::size_t>(h * dh + d)] * k[u][static_cast<std::size_t>(h * dh + d)];
          s[u] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[u]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t u = 0; u <= t; ++u)
          for (int d = 0; d < dh; ++d) out[t][static_cast<std::size_t>(h * dh + d)] += s[u] / z * v[u][static_cast<std::size_t>(h * dh + d)];
      }
    }
    return out;
  }

  static void add(Rows& x, const Rows& y) {
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += y[i][j];
  }

  Rows hidden(const TokenSeq& tokens) const {
    Rows x;
    for (auto t : tokens) {
      Vec row;
      for (long j = 0; j < c.dim; ++j) row.push_back(w(Layout::embedding, t, j));
      x.push_back(row);
    }
    for (int l = 0; l < c.layers; ++l) {
      auto at = [&](Layout::Slot s) { return Layout::layer(l, s); };
      Rows h = layer_norm(x, at(Layout::ln1_gain), at(Layout::ln1_bias));
      Rows q = matmul(h, at(Layout::wq)), k = matmul(h, at(Layout::wk)), v = matmul(h, at(Layout::wv));
      rotate(q);
      rotate(k);
      add(x, matmul(attention(q, k, v), at(Layout::wo)));
      Rows u = matmul(layer_norm(x, at(Layout::ln2_gain), at(Layout::ln2_bias)), at(Layout::w_in));
      for (auto& row : u)
        for (auto& e : row) e = 0.5 * e * (1 + std::tanh(std::sqrt(2 / M_PI) * (e + 0.044715 * e * e * e)));
      add(x, matmul(u, at(Layout::w_out)));
    }
    return layer_norm(x, Layout::final_gain(c.layers), Layout::final_bias(c.layers));
  }

  Vec embed(const TokenSeq& tokens, std::size_t proj) const {
    Rows last{hidden(tokens).back()};
    Vec e = matmul(last, proj)[0];
    double n = 0;
    for (double v : e) n += v * v;
    for (double& v : e) v /= std::sqrt(n);
    return e;
  }

  double rerank_logit(const TokenSeq& tokens) const {
    Rows last{hidden(tokens).back()};
    return matmul(last, Layout::rerank_proj(c.layers))[0][0];
  }
};

ModelConfig cfg(int layers, int dim, int context = 64) {
  ModelConfig c;
  c.layers = layers;
  c.dim = dim;
  c.context = context;
  return c;
}

// Gaussian noise on every parameter so norms and biases are not trivial.
Model<double> perturbed(const ModelConfig& c, std::uint64_t seed) {
  auto m = Model<double>::init(c, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> n(0, 0.1);
  for (auto& v : m.params().values)
    for (long i = 0; i < v.size(); ++i) v.data()[i] += n(rng);
  return m;
}

double max_diff(const nn::Tensor<double>& a, const Rows& b) {
  double worst = 0;
  for (long i = 0; i < a.rows(); ++i)
    for (long j = 0; j < a.cols(); ++j) worst = std::max(worst, std::abs(a(i, j) - b[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
  return worst;
}

}  // namespace

TEST(ParamCount, TableRows) {
  struct Row {
    int layers, dim;
    double listed;
  };
  const std::vector<Row> rows{{1, 256, 920e3}, {1, 512, 3.7e6},  {2, 256, 1.7e6},  {2, 512, 6.8e6},  {2, 768, 15.4e6},
                              {6, 512, 19.2e6}, {6, 768, 43.7e6}, {12, 512, 38.3e6}, {12, 768, 86.2e6}};
  for (const auto& r : rows) {
    const auto c = cfg(r.layers, r.dim);
    EXPECT_LE(std::abs(static_cast<double>(param_count_matrices(c)) - r.listed) / r.listed, 0.025) << r.layers << "x" << r.dim;
  }
}

TEST(ParamCount, ExactCountMatchesAllocation) {
  for (auto [l, d] : std::vector<std::pair<int, int>>{{1, 32}, {2, 64}, {3, 128}}) {
    const auto m = Model<float>::init(cfg(l, d), 1);
    std::int64_t total = 0;
    for (std::size_t i = 1; i < m.params().size(); ++i) total += m.params().values[i].size();
    EXPECT_EQ(total, param_count(m.config()));
    EXPECT_EQ(m.params().values[0].size(), static_cast<long>(text::kVocabSize) * d);
  }
}

TEST(Config, HeadsAndValidation) {
  EXPECT_EQ(cfg(1, 32).heads(), 1);
  EXPECT_EQ(cfg(1, 128).heads(), 2);
  EXPECT_EQ(cfg(1, 768).head_dim(), 64);
  EXPECT_THROW(cfg(1, 96).validate(), model_error);
  EXPECT_THROW(cfg(0, 64).validate(), model_error);
  EXPECT_THROW(cfg(1, 33).validate(), model_error);
}

TEST(Init, DeterministicWithExpectedScales) {
  const auto c = cfg(2, 128);
  const auto a = Model<double>::init(c, 5), b = Model<double>::init(c, 5), d = Model<double>::init(c, 6);
  EXPECT_EQ(a.params().values, b.params().values);
  EXPECT_NE(a.params().values, d.params().values);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& name = a.params().names[i];
    const auto& v = a.params().values[i];
    if (name.find("gain") != std::string::npos) {
      EXPECT_TRUE((v.array() == 1.0).all()) << name;
    } else if (name.find("bias") != std::string::npos) {
      EXPECT_TRUE((v.array() == 0.0).all()) << name;
    } else {
      const double sd = std::sqrt(v.array().square().mean());
      const bool residual = name.find("wo") != std::string::npos || name.find("w_out") != std::string::npos;
      const double expect = residual ? 0.02 / std::sqrt(4.0) : 0.02;
      EXPECT_NEAR(sd, expect, 0.1 * expect) << name;
    }
  }
}

TEST(Forward, MatchesNaiveOracle) {
  for (auto [l, d] : std::vector<std::pair<int, int>>{{1, 64}, {2, 32}, {1, 128}}) {
    const auto m = perturbed(cfg(l, d), 3);
    const NaiveForward ref{m.config(), m.params()};
    const auto st = text::encode_state("show lemma x = y", 64);
    const auto pr = text::encode_premise("foo : a + b = b + a", 64);
    const auto pair = text::encode_pair("show x", "bar : x", 64);
    EXPECT_LT(max_diff(m.hidden(st), ref.hidden(st)), 1e-10);
    const auto es = m.embed_state(st), ep = m.embed_premise(pr);
    const auto rs = ref.embed(st, Layout::state_proj(l)), rp = ref.embed(pr, Layout::premise_proj(l));
    for (long j = 0; j < d; ++j) {
      EXPECT_NEAR(es(0, j), rs[static_cast<std::size_t>(j)], 1e-10);
      EXPECT_NEAR(ep(0, j), rp[static_cast<std::size_t>(j)], 1e-10);
    }
    EXPECT_NEAR(m.rerank_score(pair), 1 / (1 + std::exp(-ref.rerank_logit(pair))), 1e-10);
  }
}

TEST(Forward, CausalPrefixIndependence) {
  const auto m = perturbed(cfg(2, 64), 4);
  TokenSeq a = text::encode("abcdefghij"), b = a;
  b[7] = 120;
  const auto ha = m.hidden(a), hb = m.hidden(b);
  EXPECT_EQ(ha.topRows(7), hb.topRows(7));
  EXPECT_GT((ha.row(7) - hb.row(7)).norm(), 1e-6);
}

TEST(Forward, PackedBatchMatchesSingles) {
  const auto m = perturbed(cfg(2, 64), 5);
  std::vector<TokenSeq> seqs{text::encode_state("a", 64), text::encode_state("longer goal text", 64),
                             text::encode_state("mid goal", 64)};
  SeqBatch batch(seqs.begin(), seqs.end());
  const auto packed = m.embed_states(batch);
  for (std::size_t i = 0; i < seqs.size(); ++i)
    EXPECT_LT((packed.row(static_cast<long>(i)) - m.embed_state(seqs[i])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, EmbeddingsUnitNorm) {
  const auto m = Model<float>::init(cfg(2, 64), 6);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    std::string s(1 + rng() % 50, 'a');
    for (auto& ch : s) ch = static_cast<char>('a' + rng() % 26);
    EXPECT_NEAR(m.embed_state(text::encode_state(s, 64)).norm(), 1.0, 1e-5);
    EXPECT_NEAR(m.embed_premise(text::encode_premise(s, 64)).norm(), 1.0, 1e-5);
  }
}

TEST(Forward, ZeroRerankHeadGivesHalf) {
  auto m = Model<double>::init(cfg(1, 32), 7);
  m.params().values[Layout::rerank_proj(1)].setZero();
  EXPECT_EQ(m.rerank_score(text::encode_pair("s", "p", 64)), 0.5);
}

TEST(Forward, InputChecks) {
  const auto m = Model<float>::init(cfg(1, 32, 16), 8);
  EXPECT_THROW(m.hidden(TokenSeq{}), model_error);
  EXPECT_THROW(m.hidden(TokenSeq(17, 10)), model_error);
  EXPECT_THROW(m.hidden(TokenSeq{300}), model_error);
  EXPECT_THROW(m.embed_state(text::encode_premise("x", 16)), model_error);
  EXPECT_THROW(m.embed_premise(text::encode_state("x", 16)), model_error);
  EXPECT_THROW(m.rerank_score(text::encode_premise("x", 16)), model_error);
  EXPECT_NO_THROW(m.hidden(TokenSeq(16, 10)));
}

TEST(Forward, LmLossNearUniformAtInit) {
  const auto m = Model<double>::init(cfg(2, 64, 128), 9);
  const auto t = text::encode("the quick brown fox jumps over the lazy dog");
  const auto logits = m.lm_logits(t);
  double ce = 0;
  for (long i = 0; i + 1 < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    ce += lse - logits(i, t[static_cast<std::size_t>(i + 1)]);
  }
  ce /= static_cast<double>(logits.rows() - 1);
  EXPECT_NEAR(ce, std::log(static_cast<double>(text::kVocabSize)), 0.3);
}

TEST(Checkpoint, RoundTripAndFingerprint) {
  const auto dir = std::filesystem::temp_directory_path() / ("hl_ckpt_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  const auto m = Model<float>::init(cfg(2, 64), 10);
  save_checkpoint(m, (dir / "m.ckpt").string());
  const auto back = load_checkpoint<float>((dir / "m.ckpt").string());
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.params().values, m.params().values);
  EXPECT_EQ(back.params().names, m.params().names);
  EXPECT_EQ(back.fingerprint(), m.fingerprint());
  EXPECT_NE(Model<float>::init(cfg(2, 64), 11).fingerprint(), m.fingerprint());

  std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint<float>((dir / "bad.ckpt").string()), model_error);
  EXPECT_THROW(load_checkpoint<float>((dir / "missing.ckpt").string()), model_error);
  std::filesystem::remove_all(dir);
}
