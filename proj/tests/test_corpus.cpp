#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <unistd.h>

#include "hammerlite/corpus.hpp"

using namespace hammerlite::corpus;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("hl_corpus_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name, const std::string& content) const {
    const auto p = (path_ / name).string();
    std::ofstream(p) << content;
    return p;
  }
  std::string path(const std::string& name) const { return (path_ / name).string(); }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  fs::path path_;
};

Corpus small_corpus() {
  std::vector<Premise> ps{{1, "p1", "a b"}, {2, "p2", "b c"}, {3, "p3", "c d"}};
  std::vector<ProofState> ss;
  ss.push_back({10, "goal one", {"p1", "p2"}, Source::hpl, Split::train, std::nullopt});
  ss.push_back({11, "goal two", {"p1"}, Source::sh, Split::train, std::nullopt});
  ss.push_back({12, "goal three", {}, Source::hpl, Split::test, std::nullopt});
  return Corpus(ps, ss);
}

}  // namespace

TEST(LoadCorpus, TwoPremisesOneState) {
  TempDir d;
  const auto p = d.file("p.jsonl", R"({"id":1,"name":"p1","statement":"x = x"}
{"id":2,"name":"p2","statement":"y = y"}
)");
  const auto s = d.file("s.jsonl", R"({"id":5,"text":"show x","premises":["p1","p2"],"source":"HPL"}
)");
  const auto c = load_corpus(p, s);
  EXPECT_EQ(c.premises().size(), 2u);
  EXPECT_EQ(c.states().size(), 1u);
  EXPECT_TRUE(c.datapoints().empty());
  EXPECT_EQ(c.gt_ids(5), (std::vector<PremiseId>{1, 2}));
}

TEST(LoadCorpus, EmptyStatesFile) {
  TempDir d;
  const auto p = d.file("p.jsonl", R"({"id":1,"name":"p1","statement":"x"})");
  EXPECT_EQ(load_corpus(p, d.file("s.jsonl", "")).states().size(), 0u);
}

TEST(LoadCorpus, UnresolvedPremise) {
  TempDir d;
  const auto p = d.file("p.jsonl", R"({"id":1,"name":"p1","statement":"x"})");
  const auto s = d.file("s.jsonl", R"({"id":5,"text":"t","premises":["ghost"],"source":"HPL"})");
  try {
    load_corpus(p, s);
    FAIL() << "expected corpus_error";
  } catch (const corpus_error& e) {
    EXPECT_NE(std::string(e.what()).find("unresolved premise"), std::string::npos);
  }
}

TEST(LoadCorpus, MalformedLineReportsLocation) {
  TempDir d;
  const auto p = d.file("p.jsonl", "{\"id\":1,\"name\":\"p1\",\"statement\":\"x\"}\n{oops\n");
  try {
    load_corpus(p, "");
    FAIL() << "expected corpus_error";
  } catch (const corpus_error& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
}

TEST(LoadCorpus, DuplicatesRejected) {
  TempDir d;
  EXPECT_THROW(load_corpus(d.file("a.jsonl", "{\"id\":1,\"name\":\"p\",\"statement\":\"x\"}\n{\"id\":1,\"name\":\"q\",\"statement\":\"y\"}\n"), ""),
               corpus_error);
  EXPECT_THROW(load_corpus(d.file("b.jsonl", "{\"id\":1,\"name\":\"p\",\"statement\":\"x\"}\n{\"id\":2,\"name\":\"p\",\"statement\":\"y\"}\n"), ""),
               corpus_error);
}

TEST(LoadCorpus, SaveRoundTrip) {
  TempDir d;
  auto c = small_corpus();
  c = c.with_datapoints(extract_pairs(c));
  save_corpus(c, d.path("p.jsonl"), d.path("s.jsonl"));
  save_datapoints(c, d.path("d.jsonl"));
  EXPECT_EQ(load_corpus(d.path("p.jsonl"), d.path("s.jsonl"), d.path("d.jsonl")), c);
}

TEST(Corpus, CandidatesMustResolve) {
  std::vector<Premise> ps{{1, "p1", "a"}};
  std::vector<ProofState> ss{{1, "t", {}, Source::hpl, Split::train, std::vector<std::string>{"nope"}}};
  EXPECT_THROW(Corpus(ps, ss), corpus_error);
}

TEST(ExtractPairs, OnePairPerGtPremise) {
  const auto c = small_corpus();
  const auto pairs = extract_pairs(c);
  ASSERT_EQ(pairs.size(), 3u);
  EXPECT_EQ(pairs[0], (Datapoint{10, 1, Source::hpl}));
  EXPECT_EQ(pairs[1], (Datapoint{10, 2, Source::hpl}));
  EXPECT_EQ(pairs[2], (Datapoint{11, 1, Source::sh}));
}

TEST(ExtractPairs, EmptyGroundTruthGivesNothing) {
  std::vector<Premise> ps{{1, "p1", "a"}};
  std::vector<ProofState> ss{{1, "t", {}, Source::hpl, Split::train, std::nullopt}};
  EXPECT_TRUE(extract_pairs(Corpus(ps, ss)).empty());
}

TEST(Split, DegenerateAndDeterministic) {
  const auto c = small_corpus();
  for (const auto& s : split_corpus(c, {1, 0, 0}, 3).states()) EXPECT_EQ(s.split, Split::train);
  EXPECT_EQ(split_corpus(c, {0.5, 0.25, 0.25}, 9), split_corpus(c, {0.5, 0.25, 0.25}, 9));
  EXPECT_THROW(split_corpus(c, {0.5, 0.2, 0.2}, 1), corpus_error);
}

TEST(Split, ThousandStatesNearTargetCounts) {
  std::vector<Premise> ps{{0, "p", "x"}};
  std::vector<ProofState> ss;
  for (int i = 0; i < 1000; ++i) ss.push_back({i, "t", {}, Source::hpl, Split::train, std::nullopt});
  const auto c = split_corpus(Corpus(ps, ss), {0.8, 0.1, 0.1}, 7);
  std::map<Split, int> n;
  for (const auto& s : c.states()) ++n[s.split];
  // within five percentage points of each target fraction
  EXPECT_NEAR(n[Split::train] / 1000.0, 0.8, 0.05);
  EXPECT_NEAR(n[Split::valid] / 1000.0, 0.1, 0.05);
  EXPECT_NEAR(n[Split::test] / 1000.0, 0.1, 0.05);
}

TEST(SampleFraction, IdentityRoundingDeterminism) {
  std::vector<Premise> ps;
  for (int i = 0; i < 40; ++i) ps.push_back({i, "p" + std::to_string(i), "x"});
  std::vector<ProofState> ss;
  for (int i = 0; i < 400; ++i) {
    std::vector<std::string> gt;
    for (int j = 0; j < 10; ++j) gt.push_back("p" + std::to_string((i + j * 3) % 40));
    ss.push_back({i, "t", gt, Source::hpl, Split::train, std::nullopt});
  }
  const Corpus c(ps, ss);
  ASSERT_EQ(extract_pairs(c).size(), 4000u);
  EXPECT_EQ(sample_fraction(c, 1.0, 1).datapoints(), extract_pairs(c));
  EXPECT_EQ(sample_fraction(c, 0.001, 1).datapoints().size(), 4u);
  EXPECT_EQ(sample_fraction(c, 0.3, 5), sample_fraction(c, 0.3, 5));
  EXPECT_NE(sample_fraction(c, 0.3, 5).datapoints(), sample_fraction(c, 0.3, 6).datapoints());
  EXPECT_THROW(sample_fraction(c, 0.0, 1), corpus_error);
}

TEST(Stats, CountsBySource) {
  const auto st = corpus_stats(small_corpus());
  EXPECT_EQ(st.hpl, (PartitionStats{2, 1, 2}));
  EXPECT_EQ(st.sh, (PartitionStats{1, 1, 1}));
  EXPECT_EQ(st.total, (PartitionStats{3, 2, 2}));
}
