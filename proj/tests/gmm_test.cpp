// tests/gmm_test.cpp
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

#include <cmath>
#include <set>
#include <sstream>

#include "asrkit/gmm.hpp"
#include "testutil.hpp"

using namespace asrkit;

namespace {

Lexicon make_lex(
    const std::vector<std::tuple<std::string, double, std::vector<std::string>>>& es) {
  Lexicon lex;
  auto wt = std::make_shared<SymbolTable>();
  wt->name = "words";
  auto pt = std::make_shared<SymbolTable>();
  pt->name = "phones";
  pt->add("sil");
  std::set<std::string> words;
  for (const auto& [w, p, ph] : es) {
    LexEntry e;
    e.word = w;
    e.pron_prob = p;
    e.phones = ph;
    lex.entries.push_back(e);
    words.insert(w);
  }
  for (const auto& w : words) wt->add(w);
  for (const auto& [w, p, ph] : es)
    for (const auto& phone : ph) pt->add(phone);
  lex.word_table = wt;
  lex.phone_table = pt;
  return lex;
}

FeatureMatrix mat(const std::vector<std::vector<double>>& rows) {
  FeatureMatrix f;
  f.frames.resize(static_cast<int>(rows.size()),
                  rows.empty() ? 0 : static_cast<int>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      f.frames(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  return f;
}

// longhand density sum, no Eigen, no log tricks beyond a max shift
double naive_gmm_loglike(const DiagGmm& g, const std::vector<double>& x) {
  double best = -1e300;
  std::vector<double> comp(static_cast<std::size_t>(g.num_comp()));
  for (int k = 0; k < g.num_comp(); ++k) {
    double acc = std::log(g.weights[k]);
    for (int d = 0; d < g.dim(); ++d) {
      double var = 1.0 / g.inv_vars(k, d);
      double diff = x[static_cast<std::size_t>(d)] - g.means(k, d);
      acc += -0.5 * std::log(2.0 * M_PI * var) - 0.5 * diff * diff / var;
    }
    comp[static_cast<std::size_t>(k)] = acc;
    best = std::max(best, acc);
  }
  double s = 0.0;
  for (double c : comp) s += std::exp(c - best);
  return best + std::log(s);
}

std::string serialize_am(const AmGmm& am) {
  std::ostringstream os;
  am.write(os);
  return os.str();
}

}  // namespace

TEST_CASE("diag gmm log-likelihood matches a longhand oracle", "[gmm]") {
  Rng rng(derive_seed(17, "gmm-ll"));
  DiagGmm g(3, 4);
  double wsum = 0.0;
  for (int k = 0; k < 3; ++k) {
    g.weights[k] = rng.uniform(0.1, 1.0);
    wsum += g.weights[k];
    for (int d = 0; d < 4; ++d) {
      g.means(k, d) = rng.uniform(-3.0, 3.0);
      g.inv_vars(k, d) = 1.0 / rng.uniform(0.2, 2.0);
    }
  }
  g.weights /= wsum;
  g.compute_gconsts();
  g.validate();

  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(4);
    Eigen::RowVectorXd xe(4);
    for (int d = 0; d < 4; ++d) {
      x[static_cast<std::size_t>(d)] = rng.uniform(-5.0, 5.0);
      xe[d] = x[static_cast<std::size_t>(d)];
    }
    CHECK(g.log_likelihood(xe) ==
          Catch::Approx(naive_gmm_loglike(g, x)).margin(1e-8));
    Vec post;
    double total = g.component_posteriors(xe, &post);
    CHECK(total == Catch::Approx(g.log_likelihood(xe)).margin(1e-12));
    CHECK(post.sum() == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("flat start uses global moments and floors variances", "[gmm]") {
  auto lex = make_lex({{"pa", 1.0, {"p"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);

  // third dimension is constant: its variance must hit the absolute floor
  auto f1 = mat({{1.0, 2.0, 7.0}, {3.0, 0.0, 7.0}});
  auto f2 = mat({{5.0, 4.0, 7.0}});
  auto am = flat_start({f1, f2}, tm);

  // two-pass oracle over the 3 frames
  double m0 = (1.0 + 3.0 + 5.0) / 3.0;
  double v0 = ((1 - m0) * (1 - m0) + (3 - m0) * (3 - m0) + (5 - m0) * (5 - m0)) / 3.0;
  REQUIRE(am.num_pdfs() == tm.num_pdfs());
  for (int p = 0; p < am.num_pdfs(); ++p) {
    CHECK(am.pdfs[static_cast<std::size_t>(p)].num_comp() == 1);
    CHECK(am.pdfs[static_cast<std::size_t>(p)].means(0, 0) ==
          Catch::Approx(m0).margin(1e-8));
    CHECK(1.0 / am.pdfs[static_cast<std::size_t>(p)].inv_vars(0, 0) ==
          Catch::Approx(v0).margin(1e-8));
    // constant dimension: floored at the absolute guard
    CHECK(1.0 / am.pdfs[static_cast<std::size_t>(p)].inv_vars(0, 2) ==
          Catch::Approx(1e-10).margin(1e-16));
  }
  CHECK(am.var_floor[0] == Catch::Approx(v0 * 1e-4).margin(1e-12));

  CHECK_THROWS_AS(flat_start({}, tm), EmptyData);
  CHECK_THROWS_AS(flat_start({mat({})}, tm), EmptyData);
}

TEST_CASE("equal align distributes frames over the skeleton path", "[gmm]") {
  auto lex = make_lex({{"pa", 1.0, {"p"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);
  Fst l = make_lexicon_fst(lex, 0.0);
  Fst graph = make_training_graph(make_h_fst(topo, tm, cd),
                                  make_context_fst(cd), l,
                                  {lex.word_table->find("pa")}, lex.word_table);

  auto ali = equal_align(graph, tm, 10);
  REQUIRE(ali.size() == 10);
  std::vector<int> states;
  for (auto t : ali) states.push_back(tm.hmm_state_of(t));
  CHECK(states == std::vector<int>{0, 0, 0, 0, 1, 1, 1, 2, 2, 2});
  for (auto t : ali) CHECK(tm.phone_of(t) == lex.phone_table->find("p"));
  // holds come first within a state, then the frame that advances
  CHECK(tm.is_self_loop(ali[0]));
  CHECK_FALSE(tm.is_self_loop(ali[3]));

  // minimum-length path has no self-loops at all
  auto tight = equal_align(graph, tm, 3);
  CHECK(static_cast<int>(tight.size()) == 3);
  for (auto t : tight) CHECK_FALSE(tm.is_self_loop(t));

  CHECK_THROWS_AS(equal_align(graph, tm, 2), AlignmentFailed);
  CHECK_THROWS_AS(equal_align(graph, tm, 0), AlignmentFailed);
}

TEST_CASE("viterbi alignment follows the acoustics", "[gmm]") {
  auto lex = make_lex({{"pq", 1.0, {"p", "q"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);
  Fst l = make_lexicon_fst(lex, 0.0);
  Fst graph = make_training_graph(make_h_fst(topo, tm, cd),
                                  make_context_fst(cd), l,
                                  {lex.word_table->find("pq")}, lex.word_table);

  // distinct means per phone: p-states near 0, q-states near 5
  AmGmm am;
  am.dim = 2;
  am.var_floor = Vec::Constant(2, 1e-10);
  am.pdfs.assign(static_cast<std::size_t>(tm.num_pdfs()), DiagGmm(1, 2));
  int p = lex.phone_table->find("p"), q = lex.phone_table->find("q");
  for (int pdf = 0; pdf < tm.num_pdfs(); ++pdf) {
    // recover the phone this pdf belongs to through the mono layout
    int phone = pdf / 3 + 1;
    double mean = phone == p ? 0.0 : (phone == q ? 5.0 : -50.0);
    am.pdfs[static_cast<std::size_t>(pdf)].means.setConstant(mean);
    am.pdfs[static_cast<std::size_t>(pdf)].compute_gconsts();
  }
  am.occupancy.assign(am.pdfs.size(), Vec::Ones(1));

  std::vector<std::vector<double>> rows;
  for (int t = 0; t < 10; ++t) rows.push_back({0.0, 0.0});
  for (int t = 0; t < 10; ++t) rows.push_back({5.0, 5.0});
  auto feats = mat(rows);

  auto ali = align_utterance(am, tm, graph, feats, 10.0);
  REQUIRE(ali.size() == 20);
  int boundary = 0;
  for (std::size_t t = 0; t < ali.size(); ++t)
    if (tm.phone_of(ali[t]) == p) boundary = static_cast<int>(t) + 1;
  for (std::size_t t = 0; t < ali.size(); ++t)
    CHECK(tm.phone_of(ali[t]) == (static_cast<int>(t) < boundary ? p : q));
  CHECK(std::abs(boundary - 10) <= 1);

  // single-phone transcript: states walk monotonically through the chain
  auto lex1 = make_lex({{"pa", 1.0, {"p"}}});
  auto cd1 = make_mono_context(lex1.phone_table, topo);
  auto tm1 = make_transition_model(topo, cd1);
  Fst l1 = make_lexicon_fst(lex1, 0.0);
  Fst g1 = make_training_graph(make_h_fst(topo, tm1, cd1),
                               make_context_fst(cd1), l1,
                               {lex1.word_table->find("pa")}, lex1.word_table);
  AmGmm am1 = flat_start({feats}, tm1);
  auto a1 = align_utterance(am1, tm1, g1, feats, 10.0);
  REQUIRE(a1.size() == 20);
  int prev = 0;
  for (auto t : a1) {
    CHECK(tm1.hmm_state_of(t) >= prev);
    prev = tm1.hmm_state_of(t);
  }

  FeatureMatrix empty;
  empty.frames.resize(0, 2);
  CHECK_THROWS_AS(align_utterance(am1, tm1, g1, empty, 10.0), AlignmentFailed);
}

TEST_CASE("accumulate matches closed-form single-gaussian updates", "[gmm]") {
  auto lex = make_lex({{"pa", 1.0, {"p"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);

  auto feats = mat({{1.0, -1.0}, {2.0, 0.0}, {3.0, 4.0}, {6.0, 1.0}});
  AmGmm am = flat_start({feats}, tm);

  // assign all frames to the pdf of (phone p, state 0) via its self-loop tid
  int pphone = lex.phone_table->find("p");
  int tup = tm.tuple_index(pphone, 0, (pphone - 1) * 3);
  REQUIRE(tup >= 0);
  std::int32_t self_tid = tm.tid(tup, 0);
  REQUIRE(tm.is_self_loop(self_tid));
  std::vector<std::int32_t> ali(4, self_tid);

  auto [am2, ll] = accumulate_and_update(am, tm, {ali}, {feats});
  double m0 = (1.0 + 2.0 + 3.0 + 6.0) / 4.0;
  double m1 = (-1.0 + 0.0 + 4.0 + 1.0) / 4.0;
  const DiagGmm& g = am2.pdfs[static_cast<std::size_t>((pphone - 1) * 3)];
  CHECK(g.means(0, 0) == Catch::Approx(m0).margin(1e-12));
  CHECK(g.means(0, 1) == Catch::Approx(m1).margin(1e-12));
  double v0 = ((1 - m0) * (1 - m0) + (2 - m0) * (2 - m0) + (3 - m0) * (3 - m0) +
               (6 - m0) * (6 - m0)) /
              4.0;
  CHECK(1.0 / g.inv_vars(0, 0) == Catch::Approx(v0).margin(1e-10));
  g.validate();

  // the reported log-likelihood is the pre-update score of the 4 frames
  double want = 0.0;
  for (int t = 0; t < 4; ++t)
    want += am.log_like((pphone - 1) * 3, feats.frames.row(t));
  CHECK(ll == Catch::Approx(want).margin(1e-10));

  // untouched pdfs keep flat-start parameters
  const DiagGmm& other = am2.pdfs[0];
  CHECK(other.means(0, 0) == am.pdfs[0].means(0, 0));
}

TEST_CASE("em recovers a bimodal mixture and never decreases", "[gmm]") {
  auto lex = make_lex({{"pa", 1.0, {"p"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);

  Rng rng(derive_seed(23, "gmm-em"));
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 1000; ++i) rows.push_back({rng.gauss(-2.0, 0.5)});
  for (int i = 0; i < 1000; ++i) rows.push_back({rng.gauss(2.0, 0.5)});
  auto feats = mat(rows);

  AmGmm am = flat_start({feats}, tm);
  int pphone = lex.phone_table->find("p");
  int pdf = (pphone - 1) * 3;
  // two components started off-center
  DiagGmm& g = am.pdfs[static_cast<std::size_t>(pdf)];
  DiagGmm two(2, 1);
  two.means(0, 0) = -1.0;
  two.means(1, 0) = 1.0;
  two.inv_vars.setConstant(1.0);
  two.compute_gconsts();
  g = two;
  am.occupancy[static_cast<std::size_t>(pdf)] = Vec::Ones(2);

  int tup = tm.tuple_index(pphone, 0, pdf);
  std::vector<std::int32_t> ali(rows.size(), tm.tid(tup, 0));

  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 10; ++iter) {
    auto [am2, ll] = accumulate_and_update(am, tm, {ali}, {feats});
    CHECK(ll >= prev_ll - 1e-6);
    prev_ll = ll;
    am = std::move(am2);
  }
  const DiagGmm& r = am.pdfs[static_cast<std::size_t>(pdf)];
  double lo = std::min(r.means(0, 0), r.means(1, 0));
  double hi = std::max(r.means(0, 0), r.means(1, 0));
  CHECK(lo == Catch::Approx(-2.0).margin(0.1));
  CHECK(hi == Catch::Approx(2.0).margin(0.1));
  CHECK(r.weights[0] == Catch::Approx(0.5).margin(0.05));
}

TEST_CASE("split mixtures grows by occupancy and respects the cap", "[gmm]") {
  auto lex = make_lex({{"pa", 1.0, {"p"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);
  auto feats = mat({{1.0, 2.0}, {3.0, 4.0}, {0.0, 1.0}});
  AmGmm am = flat_start({feats}, tm);
  int total = am.total_gauss();

  auto same = split_mixtures(am, total, 0.01);
  CHECK(serialize_am(same) == serialize_am(am));

  // make pdf 1 the biggest by occupancy; it must be split first
  am.occupancy[1][0] = 100.0;
  auto grown = split_mixtures(am, total + 1, 0.01);
  CHECK(grown.total_gauss() == total + 1);
  const DiagGmm& g = grown.pdfs[1];
  REQUIRE(g.num_comp() == 2);
  CHECK(g.weights[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(g.weights[1] == Catch::Approx(0.5).margin(1e-12));
  double sigma0 = std::sqrt(1.0 / am.pdfs[1].inv_vars(0, 0));
  CHECK(g.means(0, 0) ==
        Catch::Approx(am.pdfs[1].means(0, 0) + 0.01 * sigma0).margin(1e-12));
  CHECK(g.means(1, 0) ==
        Catch::Approx(am.pdfs[1].means(0, 0) - 0.01 * sigma0).margin(1e-12));

  // cap: 32 per pdf
  auto capped = split_mixtures(am, 100000, 0.01);
  CHECK(capped.total_gauss() == am.num_pdfs() * 32);
}

TEST_CASE("alignment contexts track phone instances", "[gmm]") {
  auto lex = make_lex({{"w", 1.0, {"p", "q"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);
  int p = lex.phone_table->find("p"), q = lex.phone_table->find("q");

  auto tid = [&](int phone, int state, int trans) {
    int tup = tm.tuple_index(phone, state, (phone - 1) * 3 + state);
    REQUIRE(tup >= 0);
    return tm.tid(tup, trans);
  };
  // p: states 0(self,fwd),1(fwd),2(fwd)  then q: 0(fwd),1(fwd),2(fwd)
  // then p again: 0,1,2 forwards
  std::vector<std::int32_t> ali = {
      tid(p, 0, 0), tid(p, 0, 1), tid(p, 1, 1), tid(p, 2, 1),
      tid(q, 0, 1), tid(q, 1, 1), tid(q, 2, 1),
      tid(p, 0, 1), tid(p, 1, 1), tid(p, 2, 1)};
  auto ctx = alignment_contexts(tm, ali);
  REQUIRE(ctx.size() == 10);
  // first instance of p: boundary on the left, q on the right
  for (int t = 0; t < 4; ++t) {
    CHECK(ctx[static_cast<std::size_t>(t)].phone == p);
    CHECK(ctx[static_cast<std::size_t>(t)].left == 0);
    CHECK(ctx[static_cast<std::size_t>(t)].right == q);
  }
  for (int t = 4; t < 7; ++t) {
    CHECK(ctx[static_cast<std::size_t>(t)].phone == q);
    CHECK(ctx[static_cast<std::size_t>(t)].left == p);
    CHECK(ctx[static_cast<std::size_t>(t)].right == p);
  }
  for (int t = 7; t < 10; ++t) {
    CHECK(ctx[static_cast<std::size_t>(t)].left == q);
    CHECK(ctx[static_cast<std::size_t>(t)].right == 0);
  }
  CHECK(ctx[0].hmm_state == 0);
  CHECK(ctx[3].hmm_state == 2);

  // back-to-back same phone: instances split where the first one exits
  std::vector<std::int32_t> twice = {tid(p, 0, 1), tid(p, 1, 1), tid(p, 2, 1),
                                     tid(p, 0, 1), tid(p, 1, 1), tid(p, 2, 1)};
  auto ctx2 = alignment_contexts(tm, twice);
  CHECK(ctx2[0].left == 0);
  CHECK(ctx2[0].right == p);
  CHECK(ctx2[5].left == p);
  CHECK(ctx2[5].right == 0);
}

TEST_CASE("decision tree splits on informative context", "[gmm]") {
  auto lex = make_lex({{"w", 1.0, {"a", "b", "c"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);
  int a = lex.phone_table->find("a"), b = lex.phone_table->find("b"),
      c = lex.phone_table->find("c");

  auto tid = [&](int phone, int state) {
    return tm.tid(tm.tuple_index(phone, state, (phone - 1) * 3 + state), 1);
  };
  auto self_tid = [&](int phone, int state) {
    return tm.tid(tm.tuple_index(phone, state, (phone - 1) * 3 + state), 0);
  };

  // utterances "b a" and "c a": the left context of a decides its emission
  std::vector<std::vector<std::int32_t>> alis;
  std::vector<FeatureMatrix> feats;
  Rng rng(derive_seed(31, "gmm-tree"));
  auto add_utt = [&](int left_phone, double a_mean) {
    std::vector<std::int32_t> ali;
    std::vector<std::vector<double>> rows;
    for (int s = 0; s < 3; ++s) {
      for (int r = 0; r < 39; ++r) {
        ali.push_back(self_tid(left_phone, s));
        rows.push_back({rng.gauss(0.0, 1.0)});
      }
      ali.push_back(tid(left_phone, s));
      rows.push_back({rng.gauss(0.0, 1.0)});
    }
    for (int s = 0; s < 3; ++s) {
      for (int r = 0; r < 39; ++r) {
        ali.push_back(self_tid(a, s));
        rows.push_back({rng.gauss(a_mean, 1.0)});
      }
      ali.push_back(tid(a, s));
      rows.push_back({rng.gauss(a_mean, 1.0)});
    }
    alis.push_back(std::move(ali));
    feats.push_back(mat(rows));
  };
  for (int i = 0; i < 3; ++i) add_utt(b, 10.0);
  for (int i = 0; i < 3; ++i) add_utt(c, -10.0);

  auto tree = build_tree(alis, feats, tm, *lex.phone_table, 100, 150.0);

  // phone a's states split by left context b vs c
  for (int cls = 0; cls < 3; ++cls)
    CHECK(tree.map(b, a, 0, cls) != tree.map(c, a, 0, cls));
  // the right context of a never varies, so it cannot influence the mapping
  for (int cls = 0; cls < 3; ++cls)
    CHECK(tree.map(b, a, b, cls) == tree.map(b, a, c, cls));
  // distinct center phones live in distinct roots by construction
  CHECK(tree.map(0, b, 0, 0) != tree.map(0, c, 0, 0));

  // the mapping is total and in range over the full cross product
  std::set<int> used;
  for (int lft = 0; lft <= lex.phone_table->size(); ++lft)
    for (int ctr = 1; ctr <= lex.phone_table->size(); ++ctr)
      for (int rgt = 0; rgt <= lex.phone_table->size(); ++rgt)
        for (int cls = 0; cls < 3; ++cls) {
          int pdf = tree.map(lft, ctr, rgt, cls);
          CHECK(pdf >= 0);
          CHECK(pdf < tree.num_leaves());
          used.insert(pdf);
        }
  CHECK(static_cast<int>(used.size()) == tree.num_leaves());

  // serialization round-trips bit-for-bit
  std::ostringstream os;
  tree.write(os);
  std::istringstream is(os.str());
  auto rt = DecisionTree::read(is);
  std::ostringstream os2;
  rt.write(os2);
  CHECK(os.str() == os2.str());
  CHECK(rt.map(b, a, 0, 1) == tree.map(b, a, 0, 1));

  // a sky-high threshold keeps the monophone tying
  auto flat = build_tree(alis, feats, tm, *lex.phone_table, 100, 1e9);
  CHECK(flat.num_leaves() == static_cast<int>(flat.roots.size()));
  for (int cls = 0; cls < 3; ++cls)
    CHECK(flat.map(b, a, 0, cls) == flat.map(c, a, 0, cls));

  CHECK_THROWS_AS(build_tree({}, {}, tm, *lex.phone_table, 100), InsufficientData);
}

TEST_CASE("alignment conversion keeps timing and remaps pdfs", "[gmm]") {
  auto lex = make_lex({{"w", 1.0, {"a", "b", "c"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);
  int a = lex.phone_table->find("a"), b = lex.phone_table->find("b");

  auto tid = [&](int phone, int state, int trans) {
    return tm.tid(tm.tuple_index(phone, state, (phone - 1) * 3 + state), trans);
  };
  std::vector<std::int32_t> ali = {tid(b, 0, 0), tid(b, 0, 1), tid(b, 1, 1),
                                   tid(b, 2, 1), tid(a, 0, 1), tid(a, 1, 1),
                                   tid(a, 2, 1)};
  auto feats = mat(std::vector<std::vector<double>>(7, {0.0}));
  auto tree = build_tree({ali}, {feats}, tm, *lex.phone_table, 100, 1e12);

  auto cd3 = make_context_dep(lex.phone_table, 3, topo,
                              [&](int lft, int ctr, int rgt, int cls) {
                                return tree.map(lft, ctr, rgt, cls);
                              });
  auto tm3 = make_transition_model(topo, cd3);
  auto conv = convert_alignment(ali, tm, tm3, tree);
  REQUIRE(conv.size() == ali.size());
  for (std::size_t t = 0; t < conv.size(); ++t) {
    CHECK(tm3.phone_of(conv[t]) == tm.phone_of(ali[t]));
    CHECK(tm3.hmm_state_of(conv[t]) == tm.hmm_state_of(ali[t]));
    CHECK(tm3.is_self_loop(conv[t]) == tm.is_self_loop(ali[t]));
  }
  // the remapped pdf agrees with a direct tree lookup
  CHECK(tm3.pdf_of(conv[0]) == tree.map(0, b, a, 0));
  CHECK(tm3.pdf_of(conv[6]) == tree.map(b, a, 0, 2));
}

TEST_CASE("alignment archive round-trips", "[gmm]") {
  test::TempDir tmp("gmm");
  std::vector<std::pair<std::string, std::vector<std::int32_t>>> alis = {
      {"utt1", {1, 2, 3}}, {"utt2", {7}}, {"utt3", {}}};
  auto path = tmp.path() / "ali.txt";
  write_alignments(path, alis);
  auto back = read_alignments(path);
  REQUIRE(back.size() == 3);
  CHECK(back[0].first == "utt1");
  CHECK(back[0].second == std::vector<std::int32_t>{1, 2, 3});
  CHECK(back[2].second.empty());
}

TEST_CASE("am serialization round-trips bit-for-bit", "[gmm]") {
  auto lex = make_lex({{"pa", 1.0, {"p"}}});
  auto topo = make_topology(TopoKind::kThreeState);
  auto cd = make_mono_context(lex.phone_table, topo);
  auto tm = make_transition_model(topo, cd);
  auto feats = mat({{1.0, 2.0}, {3.0, -1.0}, {0.5, 0.5}});
  AmGmm am = flat_start({feats}, tm);
  am = split_mixtures(am, am.total_gauss() + 3, 0.01);

  std::string bytes = serialize_am(am);
  std::istringstream is(bytes);
  AmGmm back = AmGmm::read(is);
  CHECK(serialize_am(back) == bytes);
  CHECK(back.num_pdfs() == am.num_pdfs());
  CHECK(back.dim == am.dim);
}

TEST_CASE("training ladder runs deterministically end to end", "[gmm][slow]") {
  auto lex = make_lex({{"ba", 1.0, {"b", "aa"}},
                       {"di", 1.0, {"d", "ii"}},
                       {"gu", 1.0, {"g", "uu"}}});
  auto topo = make_topology(TopoKind::kThreeState);

  // synthetic utterances: per-phone target means, 8 frames per phone
  Rng rng(derive_seed(41, "gmm-ladder"));
  std::map<std::string, double> phone_mean = {{"sil", 0.0}, {"b", 2.0},
                                              {"aa", -2.0}, {"d", 4.0},
                                              {"ii", -4.0}, {"g", 6.0},
                                              {"uu", -6.0}};
  std::vector<std::vector<std::string>> sents = {
      {"ba", "di"}, {"di", "gu"}, {"gu", "ba"},
      {"ba", "gu"}, {"di", "ba"}, {"gu", "di"}};
  std::vector<std::string> ids;
  std::vector<FeatureMatrix> fm;
  std::vector<std::vector<std::int32_t>> trans;
  std::map<std::string, std::vector<std::string>> prons = {
      {"ba", {"b", "aa"}}, {"di", {"d", "ii"}}, {"gu", {"g", "uu"}}};
  for (std::size_t u = 0; u < sents.size(); ++u) {
    ids.push_back("utt" + std::to_string(u));
    std::vector<std::vector<double>> rows;
    std::vector<std::int32_t> t;
    for (const auto& w : sents[u]) {
      t.push_back(lex.word_table->find(w));
      for (const auto& ph : prons[w])
        for (int r = 0; r < 8; ++r)
          rows.push_back({rng.gauss(phone_mean[ph], 0.3),
                          rng.gauss(-phone_mean[ph], 0.3)});
    }
    fm.push_back(mat(rows));
    trans.push_back(std::move(t));
  }

  GmmLadderConfig cfg;
  cfg.mono_iters = 8;
  cfg.tri_iters = 6;
  cfg.realign_iters = {1, 2, 4, 6};
  cfg.mono_target_gauss = 40;
  cfg.tri_target_gauss = 60;
  cfg.max_leaves = 60;
  cfg.tree_gain_threshold = 20.0;
  cfg.sil_prob = 0.0;

  auto run = [&] {
    return train_gmm_ladder(ids, fm, fm, trans, lex, cfg);
  };
  auto r1 = run();
  CHECK(r1.failures == 0);
  CHECK(r1.utt_ids.size() == ids.size());
  CHECK(r1.mono.ali.size() == ids.size());
  for (std::size_t u = 0; u < ids.size(); ++u) {
    CHECK(static_cast<std::int64_t>(r1.mono.ali[u].size()) ==
          fm[u].frames.rows());
    CHECK(static_cast<std::int64_t>(r1.tri.ali[u].size()) ==
          fm[u].frames.rows());
  }
  CHECK(r1.tri.tm.num_pdfs() == r1.tree.num_leaves());
  CHECK(r1.mono.am.total_gauss() >= 40 - 2);
  CHECK(r1.tri.last_loglike > -std::numeric_limits<double>::infinity());

  auto r2 = run();
  CHECK(serialize_am(r1.mono.am) == serialize_am(r2.mono.am));
  CHECK(serialize_am(r1.tri.am) == serialize_am(r2.tri.am));
  std::ostringstream t1, t2;
  r1.tree.write(t1);
  r2.tree.write(t2);
  CHECK(t1.str() == t2.str());
}
