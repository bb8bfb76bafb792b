// tests/decode_test.cpp
//
// Copyright 2026  asrkit contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "asrkit/decode.hpp"
#include "testutil.hpp"

using namespace asrkit;

namespace {

// Fixed score table for hand-built graphs: log_like(t, label) = m(t, label).
// Column 0 is the unused epsilon slot.
class TableScorer final : public AcousticScorer {
 public:
  explicit TableScorer(Mat scores) : scores_(std::move(scores)) {}
  int num_frames() const override { return static_cast<int>(scores_.rows()); }
  double log_like(int t, std::int32_t l) override { return scores_(t, l); }

 private:
  Mat scores_;
};

Mat random_scores(Rng* rng, int t, int nlabels) {
  Mat m(t, nlabels + 1);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j <= nlabels; ++j) m(i, j) = rng->gauss(0.0, 1.0);
  return m;
}

struct OraclePath {
  double cost = 0.0;
  double ac = 0.0;
  double gc = 0.0;
  std::vector<std::int32_t> words;
};

// Brute-force oracle: every complete path with exactly t_total emitting arcs,
// collected by DFS.  Epsilon arcs may appear anywhere (including after the
// last frame); consecutive-epsilon runs are capped so cycles terminate.
void oracle_dfs(const Fst& g, const Mat& scores, double scale, int t_total,
                int s, int t, int eps_run, double ac, double gc,
                std::vector<std::int32_t>* words,
                std::vector<OraclePath>* out) {
  if (t == t_total && g.final_weight(s) < kInf) {
    double fw = g.final_weight(s);
    out->push_back({ac + gc + fw, ac, gc + fw, *words});
  }
  for (const auto& a : g.arcs(s)) {
    bool emit = a.ilabel != 0;
    if (emit && t >= t_total) continue;
    if (!emit && eps_run >= g.num_states()) continue;
    double d_ac = emit ? -scale * scores(t, a.ilabel) : 0.0;
    if (a.olabel != 0) words->push_back(a.olabel);
    oracle_dfs(g, scores, scale, t_total, a.next, emit ? t + 1 : t,
               emit ? 0 : eps_run + 1, ac + d_ac, gc + a.weight, words, out);
    if (a.olabel != 0) words->pop_back();
  }
}

std::vector<OraclePath> oracle_paths(const Fst& g, const Mat& scores,
                                     double scale, int t_total) {
  std::vector<OraclePath> out;
  std::vector<std::int32_t> words;
  oracle_dfs(g, scores, scale, t_total, g.start(), 0, 0, 0.0, 0.0, &words,
             &out);
  return out;
}

OraclePath oracle_best(const std::vector<OraclePath>& paths) {
  REQUIRE_FALSE(paths.empty());
  return *std::min_element(
      paths.begin(), paths.end(),
      [](const OraclePath& a, const OraclePath& b) { return a.cost < b.cost; });
}

// Gap between the best and second-best path cost; word comparisons are only
// meaningful when this is clearly positive.
double oracle_gap(const std::vector<OraclePath>& paths) {
  if (paths.size() < 2) return kInf;
  std::vector<double> c;
  c.reserve(paths.size());
  for (const auto& p : paths) c.push_back(p.cost);
  std::sort(c.begin(), c.end());
  return c[1] - c[0];
}

// Random word-loop graph shaped like a miniature HCLG: each word is a chain
// of emitting states with self-loops, an epsilon arc loops back to the
// (final) start state, and the word label rides on the entry arc.
Fst random_word_graph(Rng* rng, int nwords, int* nlabels, int* min_frames) {
  Fst g(Semiring::kTropical);
  int start = g.add_state();
  g.set_start(start);
  g.set_final(start, rng->uniform(0.0, 0.5));
  int label = 1;
  *min_frames = 1 << 20;
  for (int w = 1; w <= nwords; ++w) {
    int len = rng->uniform_int(1, 3);
    *min_frames = std::min(*min_frames, len);
    int prev = start;
    for (int i = 0; i < len; ++i) {
      int st = g.add_state();
      g.add_arc(prev, {label, i == 0 ? w : 0, rng->uniform(0.1, 1.0), st});
      g.add_arc(st, {label, 0, rng->uniform(0.1, 1.0), st});
      ++label;
      prev = st;
    }
    g.add_arc(prev, {0, 0, rng->uniform(0.0, 0.5), start});
  }
  *nlabels = label - 1;
  sort_arcs(g);
  return g;
}

double decode_cost_or_inf(const Fst& g, const Mat& scores,
                          const DecodeOptions& opts) {
  TableScorer sc(scores);
  try {
    return decode_utterance(g, sc, opts).total_cost;
  } catch (const NoPathSurvived&) {
    return kInf;
  }
}

DecodeOptions wide_open() {
  DecodeOptions o;
  o.beam = 1e30;
  o.max_active = 1 << 30;
  o.acoustic_scale = 1.0;
  return o;
}

// in-memory lexicon; "sil" occupies phone id 1 per the construction contract
Lexicon make_lex(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& es) {
  Lexicon lex;
  auto wt = std::make_shared<SymbolTable>();
  wt->name = "words";
  auto pt = std::make_shared<SymbolTable>();
  pt->name = "phones";
  pt->add("sil");
  std::set<std::string> words;
  for (const auto& [w, ph] : es) {
    lex.entries.push_back({w, ph, 1.0});
    words.insert(w);
  }
  for (const auto& w : words) wt->add(w);
  for (const auto& [w, ph] : es)
    for (const auto& p : ph) pt->add(p);
  lex.word_table = wt;
  lex.phone_table = pt;
  return lex;
}

}  // namespace

TEST_CASE("single-word graph decodes that word for any input", "[decode]") {
  // start -1/w7-> s1 -2-> s2(final); the only path, two frames
  Fst g(Semiring::kTropical);
  int s0 = g.add_state(), s1 = g.add_state(), s2 = g.add_state();
  g.set_start(s0);
  g.set_final(s2, 0.2);
  g.add_arc(s0, {1, 7, 0.3, s1});
  g.add_arc(s1, {2, 0, 0.1, s2});

  Rng rng(derive_seed(1, "decode-single"));
  for (int rep = 0; rep < 5; ++rep) {
    Mat sc = random_scores(&rng, 2, 2);
    TableScorer scorer(sc);
    DecodeOptions opts = wide_open();
    DecodeResult r = decode_utterance(g, scorer, opts);
    REQUIRE(r.words == std::vector<std::int32_t>{7});
    double want = 0.3 + 0.1 + 0.2 - sc(0, 1) - sc(1, 2);
    CHECK(r.total_cost == Catch::Approx(want).margin(1e-12));
    CHECK(r.acoustic_cost == Catch::Approx(-sc(0, 1) - sc(1, 2)).margin(1e-12));
    CHECK(r.graph_cost == Catch::Approx(0.6).margin(1e-12));
    CHECK(std::abs(r.total_cost - (r.acoustic_cost + r.graph_cost)) < 1e-6);
    REQUIRE(r.active.size() == 2);
    CHECK(r.active[0] == 1);
    CHECK(r.active[1] == 1);
  }
}

TEST_CASE("wide-open search equals the exhaustive oracle on a two-word five-frame fixture",
          "[decode]") {
  // two words: w1 = labels 1,2 (two states), w2 = label 3 (one state), all
  // with self-loops and an epsilon return to the final start state
  Fst g(Semiring::kTropical);
  int start = g.add_state();
  g.set_start(start);
  g.set_final(start, 0.1);
  int a1 = g.add_state(), a2 = g.add_state(), b1 = g.add_state();
  g.add_arc(start, {1, 1, 0.4, a1});
  g.add_arc(a1, {1, 0, 0.6, a1});
  g.add_arc(a1, {2, 0, 0.3, a2});
  g.add_arc(a2, {2, 0, 0.5, a2});
  g.add_arc(a2, {0, 0, 0.2, start});
  g.add_arc(start, {3, 2, 0.7, b1});
  g.add_arc(b1, {3, 0, 0.4, b1});
  g.add_arc(b1, {0, 0, 0.1, start});
  sort_arcs(g);

  Rng rng(derive_seed(2, "decode-oracle"));
  Mat sc = random_scores(&rng, 5, 3);
  auto paths = oracle_paths(g, sc, 1.0, 5);
  REQUIRE(paths.size() > 4);
  OraclePath best = oracle_best(paths);

  TableScorer scorer(sc);
  DecodeOptions opts = wide_open();
  DecodeResult r = decode_utterance(g, scorer, opts);
  CHECK(r.total_cost == Catch::Approx(best.cost).margin(1e-9));
  CHECK(std::abs(r.total_cost - (r.acoustic_cost + r.graph_cost)) < 1e-6);
  if (oracle_gap(paths) > 1e-9) {
    CHECK(r.words == best.words);
    CHECK(r.acoustic_cost == Catch::Approx(best.ac).margin(1e-9));
    CHECK(r.graph_cost == Catch::Approx(best.gc).margin(1e-9));
  }
}

TEST_CASE("wide-open search equals the oracle on random word graphs", "[decode]") {
  Rng rng(derive_seed(3, "decode-random"));
  int checked = 0;
  for (int rep = 0; rep < 50; ++rep) {
    int nlabels = 0, min_frames = 0;
    Fst g = random_word_graph(&rng, rng.uniform_int(2, 3), &nlabels,
                              &min_frames);
    int t = min_frames + rng.uniform_int(0, 3);
    Mat sc = random_scores(&rng, t, nlabels);
    auto paths = oracle_paths(g, sc, 1.0, t);
    OraclePath best = oracle_best(paths);

    TableScorer scorer(sc);
    DecodeOptions opts = wide_open();
    DecodeResult r = decode_utterance(g, scorer, opts);
    REQUIRE(r.total_cost == Catch::Approx(best.cost).margin(1e-9));
    REQUIRE(std::abs(r.total_cost - (r.acoustic_cost + r.graph_cost)) < 1e-6);
    REQUIRE(static_cast<int>(r.active.size()) == t);
    if (oracle_gap(paths) > 1e-9) {
      REQUIRE(r.words == best.words);
      ++checked;
    }
  }
  CHECK(checked >= 40);  // ties should be rare with gaussian scores
}

TEST_CASE("uniform acoustic scores let the graph cost decide", "[decode]") {
  // same-length branches; w1 is cheaper in the graph
  Fst g(Semiring::kTropical);
  int start = g.add_state(), a = g.add_state(), b = g.add_state();
  g.set_start(start);
  g.add_arc(start, {1, 1, 0.5, a});
  g.add_arc(start, {2, 2, 1.0, b});
  g.set_final(a, 0.0);
  g.set_final(b, 0.0);

  Mat sc = Mat::Constant(1, 3, 0.25);
  TableScorer scorer(sc);
  DecodeOptions opts = wide_open();
  DecodeResult r = decode_utterance(g, scorer, opts);
  CHECK(r.words == std::vector<std::int32_t>{1});
  CHECK(r.total_cost == Catch::Approx(0.5 - 0.25).margin(1e-12));
}

TEST_CASE("beam widening never hurts and saturates on a small fixture", "[decode]") {
  Rng rng(derive_seed(4, "decode-beam"));
  for (int rep = 0; rep < 10; ++rep) {
    int nlabels = 0, min_frames = 0;
    Fst g = random_word_graph(&rng, 3, &nlabels, &min_frames);
    int t = min_frames + 2;
    Mat sc = random_scores(&rng, t, nlabels);

    std::vector<double> beams = {0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 1e30};
    std::vector<double> costs;
    for (double b : beams) {
      DecodeOptions o = wide_open();
      o.beam = b;
      costs.push_back(decode_cost_or_inf(g, sc, o));
    }
    for (std::size_t i = 1; i < costs.size(); ++i)
      REQUIRE(costs[i] <= costs[i - 1] + 1e-12);
    // both 16 and the unbounded beam exceed this fixture's exhaustive threshold
    REQUIRE(costs.back() < kInf);
    REQUIRE(costs[costs.size() - 2] == Catch::Approx(costs.back()).margin(1e-12));
  }
}

TEST_CASE("tight pruning forces the locally greedy branch", "[decode]") {
  // branch A looks better after one frame but has an expensive continuation
  Fst g(Semiring::kTropical);
  int start = g.add_state(), a = g.add_state(), b = g.add_state();
  g.set_start(start);
  g.add_arc(start, {1, 1, 0.0, a});
  g.add_arc(a, {1, 0, 5.0, a});
  g.set_final(a, 0.0);
  g.add_arc(start, {2, 2, 0.5, b});
  g.add_arc(b, {2, 0, 0.1, b});
  g.set_final(b, 0.0);
  Mat sc = Mat::Zero(3, 3);

  DecodeOptions wide = wide_open();
  TableScorer s1(sc);
  DecodeResult full = decode_utterance(g, s1, wide);
  CHECK(full.words == std::vector<std::int32_t>{2});
  CHECK(full.total_cost == Catch::Approx(0.7).margin(1e-12));

  DecodeOptions narrow = wide_open();
  narrow.max_active = 1;
  TableScorer s2(sc);
  DecodeResult greedy = decode_utterance(g, s2, narrow);
  CHECK(greedy.words == std::vector<std::int32_t>{1});
  CHECK(greedy.total_cost == Catch::Approx(10.0).margin(1e-12));
  for (int n : greedy.active) CHECK(n <= 1);

  DecodeOptions tight = wide_open();
  tight.beam = 0.3;  // prunes B at frame 1 just like max_active = 1
  TableScorer s3(sc);
  DecodeResult beamed = decode_utterance(g, s3, tight);
  CHECK(beamed.words == std::vector<std::int32_t>{1});
  CHECK(beamed.total_cost == Catch::Approx(10.0).margin(1e-12));
}

TEST_CASE("max_active keeps exactly the best-ranked tokens", "[decode]") {
  Rng rng(derive_seed(5, "decode-maxactive"));
  int nlabels = 0, min_frames = 0;
  Fst g = random_word_graph(&rng, 3, &nlabels, &min_frames);
  int t = min_frames + 3;
  Mat sc = random_scores(&rng, t, nlabels);

  DecodeOptions o = wide_open();
  double best = decode_cost_or_inf(g, sc, o);
  for (int cap : {1, 2, 3}) {
    DecodeOptions capped = wide_open();
    capped.max_active = cap;
    TableScorer scorer(sc);
    try {
      DecodeResult r = decode_utterance(g, scorer, capped);
      CHECK(r.total_cost >= best - 1e-12);
      for (int n : r.active) CHECK(n <= cap);
    } catch (const NoPathSurvived&) {
      // legitimate under aggressive pruning
    }
  }
}

TEST_CASE("dead ends and unreachable finals raise NoPathSurvived", "[decode]") {
  // cheap arc into a dead end; survivable only with a generous beam
  Fst g(Semiring::kTropical);
  int start = g.add_state(), dead = g.add_state(), live = g.add_state();
  g.set_start(start);
  g.add_arc(start, {1, 1, 0.0, dead});
  g.add_arc(start, {2, 2, 1.0, live});
  g.add_arc(live, {2, 0, 0.0, live});
  g.set_final(live, 0.0);
  Mat sc = Mat::Zero(2, 3);

  DecodeOptions tight = wide_open();
  tight.beam = 0.5;
  TableScorer s1(sc);
  CHECK_THROWS_AS(decode_utterance(g, s1, tight), NoPathSurvived);

  DecodeOptions wide = wide_open();
  TableScorer s2(sc);
  CHECK(decode_utterance(g, s2, wide).words == std::vector<std::int32_t>{2});

  DecodeOptions capped = wide_open();
  capped.max_active = 1;
  TableScorer s3(sc);
  CHECK_THROWS_AS(decode_utterance(g, s3, capped), NoPathSurvived);

  // linear graph: too few or too many frames never reaches a final state
  Fst lin(Semiring::kTropical);
  int l0 = lin.add_state(), l1 = lin.add_state(), l2 = lin.add_state();
  lin.set_start(l0);
  lin.set_final(l2, 0.0);
  lin.add_arc(l0, {1, 0, 0.0, l1});
  lin.add_arc(l1, {2, 0, 0.0, l2});
  for (int t : {1, 3}) {
    TableScorer s(Mat::Zero(t, 3));
    DecodeOptions o = wide_open();
    CHECK_THROWS_AS(decode_utterance(lin, s, o), NoPathSurvived);
  }

  Fst empty(Semiring::kTropical);
  TableScorer s4(Mat::Zero(1, 2));
  DecodeOptions o = wide_open();
  CHECK_THROWS_AS(decode_utterance(empty, s4, o), NoPathSurvived);
}

TEST_CASE("options and graph preconditions are validated", "[decode]") {
  Fst g(Semiring::kTropical);
  int s = g.add_state();
  g.set_start(s);
  g.set_final(s, 0.0);
  g.add_arc(s, {1, 0, 0.0, s});
  TableScorer sc(Mat::Zero(1, 2));

  DecodeOptions bad_beam;
  bad_beam.beam = 0.0;
  CHECK_THROWS_AS(decode_utterance(g, sc, bad_beam), BadConfig);
  DecodeOptions bad_active;
  bad_active.max_active = 0;
  CHECK_THROWS_AS(decode_utterance(g, sc, bad_active), BadConfig);

  Fst logg(Semiring::kLog);
  int t = logg.add_state();
  logg.set_start(t);
  logg.set_final(t, 0.0);
  DecodeOptions o;
  CHECK_THROWS_AS(decode_utterance(logg, sc, o), WrongSemiring);
}

TEST_CASE("decoding is deterministic", "[decode]") {
  Rng rng(derive_seed(6, "decode-det"));
  int nlabels = 0, min_frames = 0;
  Fst g = random_word_graph(&rng, 3, &nlabels, &min_frames);
  int t = min_frames + 2;
  Mat sc = random_scores(&rng, t, nlabels);

  DecodeOptions o;
  o.beam = 4.0;
  o.max_active = 3;
  o.acoustic_scale = 0.7;
  TableScorer s1(sc), s2(sc);
  DecodeResult a = decode_utterance(g, s1, o);
  DecodeResult b = decode_utterance(g, s2, o);
  CHECK(a.words == b.words);
  CHECK(a.total_cost == b.total_cost);
  CHECK(a.acoustic_cost == b.acoustic_cost);
  CHECK(a.graph_cost == b.graph_cost);
  CHECK(a.active == b.active);
}

TEST_CASE("gmm scorer delegates to the acoustic model", "[decode]") {
  auto topo = make_topology(TopoKind::kThreeState);
  auto pt = std::make_shared<SymbolTable>();
  pt->name = "phones";
  pt->add("sil");
  pt->add("a");
  ContextDep cd = make_mono_context(pt, topo);
  TransitionModel tm = make_transition_model(topo, cd);

  Rng rng(derive_seed(7, "decode-gmm"));
  AmGmm am;
  am.dim = 3;
  for (int p = 0; p < tm.num_pdfs(); ++p) {
    DiagGmm gmm(2, 3);
    for (int k = 0; k < 2; ++k)
      for (int d = 0; d < 3; ++d) {
        gmm.means(k, d) = rng.gauss(0.0, 1.0);
        gmm.inv_vars(k, d) = rng.uniform(0.5, 2.0);
      }
    gmm.weights << 0.3, 0.7;
    gmm.compute_gconsts();
    am.pdfs.push_back(gmm);
  }

  Mat feats(4, 3);
  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < 3; ++d) feats(t, d) = rng.gauss(0.0, 1.0);

  GmmScorer scorer = gmm_scorer(am, tm, feats);
  REQUIRE(scorer.num_frames() == 4);
  for (int t = 0; t < 4; ++t)
    for (int tid = 1; tid <= tm.num_transition_ids(); ++tid) {
      double want = am.log_like(tm.pdf_of(tid), feats.row(t));
      CHECK(scorer.log_like(t, tid) == want);
      CHECK(scorer.log_like(t, tid) == want);  // cached second read
    }

  CHECK_THROWS_AS(gmm_scorer(am, tm, Mat::Zero(4, 2)), DimensionMismatch);
}

TEST_CASE("chain scorer serves the subsampled frame count and raw logits",
          "[decode]") {
  TdnnSpec spec;
  spec.hidden_dim = 4;
  TdnnNet net = make_tdnn(6, 3, spec, 1);
  REQUIRE(net.left_context() == 9);
  REQUIRE(net.right_context() == 9);
  const int context = net.left_context() + net.right_context();

  Rng rng(derive_seed(8, "decode-chain"));
  for (int t = 19; t <= 40; t += 3) {
    Mat feats(t, 6);
    for (int i = 0; i < t; ++i)
      for (int d = 0; d < 6; ++d) feats(i, d) = rng.gauss(0.0, 1.0);
    ChainScorer scorer = chain_scorer(net, feats);
    int want = static_cast<int>(
        std::ceil(static_cast<double>(t - context) / 3.0));
    REQUIRE(scorer.num_frames() == want);

    Mat logits = tdnn_forward(net, feats);
    for (int f = 0; f < want; ++f)
      for (int p = 0; p < 3; ++p)
        CHECK(scorer.log_like(f, p + 1) == logits(f, p));

    Vec priors(3);
    priors << 0.2, -0.4, 0.9;
    ChainScorer with_priors = chain_scorer(net, feats, &priors);
    for (int f = 0; f < want; ++f)
      for (int p = 0; p < 3; ++p)
        CHECK(with_priors.log_like(f, p + 1) ==
              Catch::Approx(logits(f, p) - priors(p)).margin(1e-12));
  }

  CHECK_THROWS_AS(chain_scorer(net, Mat::Zero(30, 5)), DimensionMismatch);
  Vec short_priors(2);
  short_priors << 0.0, 0.0;
  CHECK_THROWS_AS(chain_scorer(net, Mat::Zero(30, 6), &short_priors),
                  DimensionMismatch);
}

TEST_CASE("chain network decodes a word HCLG built on the chain topology",
          "[decode]") {
  auto topo = make_topology(TopoKind::kChainTwoState);
  Lexicon lex = make_lex({{"w1", {"a", "b"}}, {"w2", {"b", "a"}}});
  ContextDep cd = make_mono_context(lex.phone_table, topo);
  TransitionModel tm = make_transition_model(topo, cd);

  ArpaLm lm = estimate_lm(
      count_ngrams({{"w1"}, {"w2"}, {"w1"}, {"w2", "w1"}}, 2), 2,
      Smoothing::kWittenBell);
  Fst g = make_grammar_fst(lm, lex.word_table);
  Fst l = make_lexicon_fst(lex, 0.0);
  Fst c = make_context_fst(cd);
  Fst h = make_h_fst(topo, tm, cd, Semiring::kTropical, /*pdf_labels=*/true);
  Fst hclg = compile_hclg(h, c, l, g);
  REQUIRE(hclg.start() >= 0);

  TdnnSpec spec;
  spec.hidden_dim = 4;
  TdnnNet net = make_tdnn(5, tm.num_pdfs(), spec, 2);
  Rng rng(derive_seed(9, "decode-chain-e2e"));
  Mat feats(25, 5);
  for (int i = 0; i < 25; ++i)
    for (int d = 0; d < 5; ++d) feats(i, d) = rng.gauss(0.0, 1.0);

  ChainScorer scorer = chain_scorer(net, feats);
  REQUIRE(scorer.num_frames() == 3);
  DecodeOptions opts = wide_open();
  DecodeResult r = decode_utterance(hclg, scorer, opts);

  // the hypothesis must spell a sentence the grammar accepts
  auto lang = test::enumerate_language(g, 4);
  CHECK(lang.count(r.words) == 1);
  CHECK(std::abs(r.total_cost - (r.acoustic_cost + r.graph_cost)) < 1e-6);

  // exhaustive oracle over the compiled graph with the same logits
  Mat table(3, tm.num_pdfs() + 1);
  table.setZero();
  Mat logits = tdnn_forward(net, feats);
  for (int f = 0; f < 3; ++f)
    for (int p = 0; p < tm.num_pdfs(); ++p) table(f, p + 1) = logits(f, p);
  auto paths = oracle_paths(hclg, table, 1.0, 3);
  OraclePath best = oracle_best(paths);
  CHECK(r.total_cost == Catch::Approx(best.cost).margin(1e-9));
  if (oracle_gap(paths) > 1e-9) CHECK(r.words == best.words);

  // determinism across fresh scorers
  ChainScorer scorer2 = chain_scorer(net, feats);
  DecodeResult r2 = decode_utterance(hclg, scorer2, opts);
  CHECK(r2.words == r.words);
  CHECK(r2.total_cost == r.total_cost);
}

TEST_CASE("hypothesis and diagnostics files round-trip", "[decode]") {
  test::TempDir dir("decode_io");

  std::map<std::string, std::vector<std::string>> hyps = {
      {"utt1", {"hello", "world"}}, {"utt2", {}}, {"utt3", {"one"}}};
  auto path = dir.path() / "hyp.txt";
  write_hypotheses(hyps, path);
  CHECK(read_hypotheses(path) == hyps);

  {
    std::ofstream os(dir.path() / "dup.txt");
    os << "u1 a b\nu1 c\n";
  }
  CHECK_THROWS_AS(read_hypotheses(dir.path() / "dup.txt"), DuplicateUttId);
  CHECK_THROWS_AS(read_hypotheses(dir.path() / "missing.txt"), IoError);

  std::map<std::string, DecodeResult> results;
  DecodeResult r;
  r.total_cost = 3.5;
  r.acoustic_cost = 1.25;
  r.graph_cost = 2.25;
  r.active = {4, 5};
  results["utt1"] = r;
  results["utt2"] = r;
  auto diag = dir.path() / "costs.txt";
  write_decode_diagnostics(results, diag);
  std::ifstream is(diag);
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    ++lines;
    std::istringstream ls(line);
    std::string utt;
    double total = 0, ac = 0, gc = 0;
    int frames = 0;
    REQUIRE((ls >> utt >> total >> ac >> gc >> frames));
    CHECK(total == Catch::Approx(3.5));
    CHECK(frames == 2);
  }
  CHECK(lines == 2);

  SymbolTable words;
  words.name = "words";
  words.add("alpha");
  words.add("beta");
  CHECK(spell_words({2, 1}, words) ==
        std::vector<std::string>{"beta", "alpha"});
}
