// asrkit/graph.hpp
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
//
// HMM topologies, the transition model, L/G/C/H construction, HCLG
// compilation and the denominator/normalization graph pipeline.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "asrkit/common.hpp"
#include "asrkit/fst.hpp"
#include "asrkit/lexlm.hpp"

namespace asrkit {

ASRKIT_ERROR(EmptyLexicon);
ASRKIT_ERROR(BadContextWidth);
ASRKIT_ERROR(EmptyAlignments);
ASRKIT_ERROR(BadTransitionId);

// ---------------------------------------------------------------------------
// HMM topologies.

enum class TopoKind { kThreeState = 0, kChainTwoState = 1 };

// one outgoing transition of an HMM state; target -1 leaves the phone
struct TopoTransition {
  int target = -1;
  double prob = 0.0;
  bool self_loop = false;
};

struct HmmTopology {
  struct State {
    double self_loop_prob = 0.0;
    double forward_prob = 0.0;
    int pdf_class = 0;
  };
  TopoKind kind = TopoKind::kThreeState;
  std::vector<State> states;

  int num_states() const { return static_cast<int>(states.size()); }
  int num_pdf_classes() const {
    int n = 0;
    for (const auto& s : states) n = std::max(n, s.pdf_class + 1);
    return n;
  }

  std::vector<TopoTransition> transitions(int state) const {
    const auto& st = states.at(static_cast<std::size_t>(state));
    if (kind == TopoKind::kThreeState) {
      int fwd = (state + 1 < num_states()) ? state + 1 : -1;
      return {{state, st.self_loop_prob, true}, {fwd, st.forward_prob, false}};
    }
    // chain: the first state occurs exactly once and splits its forward mass
    // between the repeatable state and leaving in a single frame
    if (state == 0)
      return {{1, st.forward_prob / 2.0, false}, {-1, st.forward_prob / 2.0, false}};
    return {{1, st.self_loop_prob, true}, {-1, st.forward_prob, false}};
  }

  void validate() const {
    for (int s = 0; s < num_states(); ++s) {
      double sum = 0.0;
      for (const auto& t : transitions(s)) sum += t.prob;
      if (std::abs(sum - 1.0) > 1e-9)
        throw BadConfig("topology state " + std::to_string(s) +
                        " probabilities sum to " + std::to_string(sum));
    }
  }
};

inline HmmTopology make_topology(TopoKind kind) {
  HmmTopology t;
  t.kind = kind;
  if (kind == TopoKind::kThreeState)
    t.states = {{0.5, 0.5, 0}, {0.5, 0.5, 1}, {0.5, 0.5, 2}};
  else
    t.states = {{0.0, 1.0, 0}, {0.5, 0.5, 1}};
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Transition model: dense transition ids over (phone, hmm state, pdf) tuples.

struct TransitionTuple {
  int phone = 0;
  int hmm_state = 0;
  int pdf_id = 0;
  friend bool operator<(const TransitionTuple& a, const TransitionTuple& b) {
    return std::tie(a.phone, a.hmm_state, a.pdf_id) <
           std::tie(b.phone, b.hmm_state, b.pdf_id);
  }
  friend bool operator==(const TransitionTuple& a, const TransitionTuple& b) {
    return a.phone == b.phone && a.hmm_state == b.hmm_state && a.pdf_id == b.pdf_id;
  }
};

class TransitionModel {
 public:
  TransitionModel() = default;
  TransitionModel(HmmTopology topo, std::vector<TransitionTuple> tuples)
      : topo_(std::move(topo)), tuples_(std::move(tuples)) {
    topo_.validate();
    std::sort(tuples_.begin(), tuples_.end());
    tuples_.erase(std::unique(tuples_.begin(), tuples_.end()), tuples_.end());
    if (tuples_.empty()) throw BadConfig("transition model needs tuples");
    first_tid_.assign(tuples_.size() + 1, 0);
    first_tid_[0] = 1;  // 0 reserved for epsilon
    std::vector<bool> seen;
    for (std::size_t i = 0; i < tuples_.size(); ++i) {
      const auto& t = tuples_[i];
      if (t.pdf_id < 0 || t.hmm_state < 0 || t.hmm_state >= topo_.num_states())
        throw BadConfig("bad transition tuple");
      num_pdfs_ = std::max(num_pdfs_, t.pdf_id + 1);
      if (static_cast<int>(seen.size()) < num_pdfs_) seen.resize(static_cast<std::size_t>(num_pdfs_));
      seen[static_cast<std::size_t>(t.pdf_id)] = true;
      first_tid_[i + 1] =
          first_tid_[i] + static_cast<int>(topo_.transitions(t.hmm_state).size());
      index_[std::make_tuple(t.phone, t.hmm_state, t.pdf_id)] = static_cast<int>(i);
    }
    for (int p = 0; p < num_pdfs_; ++p)
      if (!seen[static_cast<std::size_t>(p)])
        throw BadConfig("pdf ids are not dense: " + std::to_string(p) + " unused");
  }

  const HmmTopology& topo() const { return topo_; }
  int num_tuples() const { return static_cast<int>(tuples_.size()); }
  int num_pdfs() const { return num_pdfs_; }
  int num_transition_ids() const { return first_tid_.back() - 1; }
  const TransitionTuple& tuple(int idx) const {
    return tuples_.at(static_cast<std::size_t>(idx));
  }

  int tuple_index(int phone, int hmm_state, int pdf_id) const {
    auto it = index_.find(std::make_tuple(phone, hmm_state, pdf_id));
    return it == index_.end() ? -1 : it->second;
  }
  int tid(int tuple_idx, int trans_idx) const {
    return first_tid_.at(static_cast<std::size_t>(tuple_idx)) + trans_idx;
  }
  // tid -> (tuple index, transition index)
  std::pair<int, int> decompose(int t) const {
    if (t < 1 || t > num_transition_ids())
      throw BadTransitionId("transition id " + std::to_string(t) + " out of range");
    auto it = std::upper_bound(first_tid_.begin(), first_tid_.end(), t);
    int tup = static_cast<int>(it - first_tid_.begin()) - 1;
    return {tup, t - first_tid_[static_cast<std::size_t>(tup)]};
  }

  int pdf_of(int t) const { return tuple(decompose(t).first).pdf_id; }
  int phone_of(int t) const { return tuple(decompose(t).first).phone; }
  int hmm_state_of(int t) const { return tuple(decompose(t).first).hmm_state; }
  bool is_self_loop(int t) const {
    auto [tup, tr] = decompose(t);
    return topo_.transitions(tuples_[static_cast<std::size_t>(tup)].hmm_state)
        .at(static_cast<std::size_t>(tr))
        .self_loop;
  }
  double transition_prob(int t) const {
    auto [tup, tr] = decompose(t);
    return topo_.transitions(tuples_[static_cast<std::size_t>(tup)].hmm_state)
        .at(static_cast<std::size_t>(tr))
        .prob;
  }

  void write(std::ostream& os) const {
    os.write("TMDL", 4);
    write_pod<std::uint8_t>(os, 1);
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(topo_.kind));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(topo_.states.size()));
    for (const auto& s : topo_.states) {
      write_pod<double>(os, s.self_loop_prob);
      write_pod<double>(os, s.forward_prob);
      write_pod<std::int32_t>(os, s.pdf_class);
    }
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tuples_.size()));
    for (const auto& t : tuples_) {
      write_pod<std::int32_t>(os, t.phone);
      write_pod<std::int32_t>(os, t.hmm_state);
      write_pod<std::int32_t>(os, t.pdf_id);
    }
  }
  static TransitionModel read(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "TMDL")
      throw IoError("not a transition model stream");
    if (read_pod<std::uint8_t>(is) != 1) throw IoError("transition model version");
    HmmTopology topo;
    topo.kind = static_cast<TopoKind>(read_pod<std::uint8_t>(is));
    auto nstates = read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < nstates; ++i) {
      HmmTopology::State s;
      s.self_loop_prob = read_pod<double>(is);
      s.forward_prob = read_pod<double>(is);
      s.pdf_class = read_pod<std::int32_t>(is);
      topo.states.push_back(s);
    }
    auto ntup = read_pod<std::uint32_t>(is);
    std::vector<TransitionTuple> tuples;
    for (std::uint32_t i = 0; i < ntup; ++i) {
      TransitionTuple t;
      t.phone = read_pod<std::int32_t>(is);
      t.hmm_state = read_pod<std::int32_t>(is);
      t.pdf_id = read_pod<std::int32_t>(is);
      tuples.push_back(t);
    }
    if (!is) throw IoError("truncated transition model");
    return TransitionModel(std::move(topo), std::move(tuples));
  }

 private:
  HmmTopology topo_;
  std::vector<TransitionTuple> tuples_;
  std::vector<int> first_tid_;
  int num_pdfs_ = 0;
  std::map<std::tuple<int, int, int>, int> index_;
};

// ---------------------------------------------------------------------------
// Context dependency: enumerates context-dependent phone labels and resolves
// each to a pdf per topology state.  Width 1 = monophone, 2 = left biphone
// (chain), 3 = triphone.

inline std::shared_ptr<SymbolTable> build_cd_table(const SymbolTable& phones,
                                                   int width) {
  auto t = std::make_shared<SymbolTable>();
  t->name = "cd" + std::to_string(width);
  int np = phones.size();
  if (width == 2) {
    for (int l = 0; l <= np; ++l)
      for (int c = 1; c <= np; ++c) t->add(phones.str(l) + "-" + phones.str(c));
  } else if (width == 3) {
    for (int l = 0; l <= np; ++l)
      for (int c = 1; c <= np; ++c)
        for (int r = 0; r <= np; ++r)
          t->add(phones.str(l) + "-" + phones.str(c) + "+" + phones.str(r));
  } else {
    throw BadContextWidth("context width " + std::to_string(width));
  }
  return t;
}

struct ContextDep {
  int width = 1;
  SymTabPtr phone_table;
  SymTabPtr cd_table;                   // == phone_table when width 1
  std::vector<int> center;              // [cd_id] -> phone id (index 0 unused)
  std::vector<std::vector<int>> pdfs;   // [cd_id][pdf_class] -> pdf id
  int num_pdfs = 0;

  int cd_id(int l, int c, int r) const {
    if (width == 1) return c;
    const auto& pt = *phone_table;
    if (width == 2) return cd_table->find(pt.str(l) + "-" + pt.str(c));
    return cd_table->find(pt.str(l) + "-" + pt.str(c) + "+" + pt.str(r));
  }
};

// resolver(left, center, right, pdf_class) -> pdf id; unused context slots are 0
template <class Resolver>
inline ContextDep make_context_dep(SymTabPtr phone_table, int width,
                                   const HmmTopology& topo, Resolver resolve) {
  if (width < 1 || width > 3) throw BadContextWidth(std::to_string(width));
  ContextDep cd;
  cd.width = width;
  cd.phone_table = phone_table;
  int np = phone_table->size();
  int ncls = topo.num_pdf_classes();
  auto fill = [&](int id, int l, int c, int r) {
    if (static_cast<int>(cd.center.size()) <= id) {
      cd.center.resize(static_cast<std::size_t>(id + 1), 0);
      cd.pdfs.resize(static_cast<std::size_t>(id + 1));
    }
    cd.center[static_cast<std::size_t>(id)] = c;
    auto& v = cd.pdfs[static_cast<std::size_t>(id)];
    v.resize(static_cast<std::size_t>(ncls));
    for (int k = 0; k < ncls; ++k) {
      v[static_cast<std::size_t>(k)] = resolve(l, c, r, k);
      cd.num_pdfs = std::max(cd.num_pdfs, v[static_cast<std::size_t>(k)] + 1);
    }
  };
  if (width == 1) {
    cd.cd_table = phone_table;
    for (int c = 1; c <= np; ++c) fill(c, 0, c, 0);
  } else {
    auto table = build_cd_table(*phone_table, width);
    cd.cd_table = table;
    if (width == 2) {
      for (int l = 0; l <= np; ++l)
        for (int c = 1; c <= np; ++c) fill(cd.cd_id(l, c, 0), l, c, 0);
    } else {
      for (int l = 0; l <= np; ++l)
        for (int c = 1; c <= np; ++c)
          for (int r = 0; r <= np; ++r) fill(cd.cd_id(l, c, r), l, c, r);
    }
  }
  return cd;
}

// monophone context: pdf = (phone - 1) * classes + class
inline ContextDep make_mono_context(SymTabPtr phone_table, const HmmTopology& topo) {
  int ncls = topo.num_pdf_classes();
  return make_context_dep(phone_table, 1, topo,
                          [ncls](int, int c, int, int k) { return (c - 1) * ncls + k; });
}

// all tuples a context dependency can produce
inline TransitionModel make_transition_model(const HmmTopology& topo,
                                             const ContextDep& cd) {
  std::set<TransitionTuple> tuples;
  for (std::size_t id = 1; id < cd.pdfs.size(); ++id) {
    if (cd.center[id] == 0) continue;
    for (int s = 0; s < topo.num_states(); ++s)
      tuples.insert({cd.center[id], s,
                     cd.pdfs[id].at(static_cast<std::size_t>(
                         topo.states[static_cast<std::size_t>(s)].pdf_class))});
  }
  return TransitionModel(topo, {tuples.begin(), tuples.end()});
}

// ---------------------------------------------------------------------------
// L: phones -> words with optional silence between words and at the edges.

inline Fst make_lexicon_fst(const Lexicon& lex, double sil_prob = 0.5) {
  if (lex.entries.empty()) throw EmptyLexicon("lexicon has no entries");
  if (!(sil_prob >= 0.0 && sil_prob < 1.0))
    throw BadConfig("sil_prob must be in [0,1)");
  Fst l(Semiring::kTropical);
  l.isyms = lex.phone_table;
  l.osyms = lex.word_table;
  int init = l.add_state();
  int loop = l.add_state();
  int wend = l.add_state();
  l.set_start(init);
  l.set_final(loop, sr_one());
  double w_sil = -std::log(sil_prob);
  double w_nosil = -std::log(1.0 - sil_prob);
  int sil = lex.phone_table->find("sil");
  for (int from : {init, wend}) {
    l.add_arc(from, {0, 0, w_nosil, loop});
    if (sil > 0) l.add_arc(from, {sil, 0, w_sil, loop});
  }
  for (const auto& e : lex.entries) {
    int word = lex.word_table->find(e.word);
    int cur = loop;
    for (std::size_t i = 0; i < e.phones.size(); ++i) {
      int pid = lex.phone_table->find(e.phones[i]);
      if (pid <= 0) throw MalformedLine("phone missing from table: " + e.phones[i]);
      int nxt = (i + 1 == e.phones.size()) ? wend : l.add_state();
      Arc a;
      a.ilabel = pid;
      a.olabel = (i == 0) ? word : 0;
      a.weight = (i == 0) ? -std::log(e.pron_prob) : sr_one();
      a.next = nxt;
      l.add_arc(cur, a);
      cur = nxt;
    }
  }
  return l;
}

// ---------------------------------------------------------------------------
// G: standard n-gram acceptor.  One state per history; explicit word arcs,
// epsilon back-off arcs, </s> probabilities as final weights.

inline Fst make_grammar_fst(const ArpaLm& lm, SymTabPtr word_table = nullptr,
                            Semiring ring = Semiring::kTropical) {
  const double ln10 = std::log(10.0);
  if (!word_table) {
    auto own = std::make_shared<SymbolTable>();
    own->name = "words";
    for (const auto& [key, e] : lm.tables.at(0))
      if (key[0] != kBos && key[0] != kEos && key[0] != kUnk) own->add(key[0]);
    word_table = own;
  }
  Fst g(ring);
  g.isyms = word_table;
  g.osyms = word_table;

  // longest suffix (up to order-1 words) existing as an entry
  auto suffix_hist = [&](std::vector<std::string> seq) {
    if (static_cast<int>(seq.size()) > lm.order - 1)
      seq.erase(seq.begin(), seq.end() - (lm.order - 1));
    while (!seq.empty() && !lm.tables.at(seq.size() - 1).count(seq))
      seq.erase(seq.begin());
    return seq;
  };

  std::map<std::vector<std::string>, int> state_of;
  std::vector<std::vector<std::string>> queue;
  auto ensure = [&](const std::vector<std::string>& h) {
    auto it = state_of.find(h);
    if (it != state_of.end()) return it->second;
    int s = g.add_state();
    state_of.emplace(h, s);
    queue.push_back(h);
    return s;
  };

  std::vector<std::string> start_hist =
      lm.order >= 2 ? std::vector<std::string>{kBos} : std::vector<std::string>{};
  g.set_start(ensure(suffix_hist(start_hist)));

  while (!queue.empty()) {
    auto h = queue.back();
    queue.pop_back();
    int src = state_of.at(h);
    if (static_cast<int>(h.size()) + 1 <= lm.order) {
      const auto& table = lm.tables.at(h.size());
      for (auto it = table.lower_bound(h);
           it != table.end() && std::equal(h.begin(), h.end(), it->first.begin());
           ++it) {
        const std::string& w = it->first.back();
        if (w == kBos) continue;
        if (w == kEos) {
          g.set_final(src, -it->second.log10_prob * ln10);
          continue;
        }
        int wid = word_table->find(w);
        if (wid <= 0) continue;  // <unk> and out-of-table words get no arc
        std::vector<std::string> ext = h;
        ext.push_back(w);
        int dst = ensure(suffix_hist(std::move(ext)));
        g.add_arc(src, {wid, wid, -it->second.log10_prob * ln10, dst});
      }
    }
    if (!h.empty()) {
      const auto& own = lm.tables.at(h.size() - 1);
      auto hit = own.find(h);
      if (hit != own.end() && hit->second.has_backoff) {
        std::vector<std::string> back(h.begin() + 1, h.end());
        int dst = ensure(suffix_hist(std::move(back)));
        g.add_arc(src, {0, 0, -hit->second.log10_backoff * ln10, dst});
      }
    }
  }
  sort_arcs(g);
  return g;
}

// ---------------------------------------------------------------------------
// C: context-dependent labels -> phone sequences.

inline Fst make_context_fst(const ContextDep& cd, Semiring ring = Semiring::kTropical) {
  const auto& phones = *cd.phone_table;
  int np = phones.size();
  Fst c(ring);
  c.isyms = cd.cd_table;
  c.osyms = cd.phone_table;
  if (cd.width == 1) {
    int s = c.add_state();
    c.set_start(s);
    c.set_final(s, sr_one());
    for (int p = 1; p <= np; ++p) c.add_arc(s, {p, p, sr_one(), s});
    return c;
  }
  if (cd.width == 2) {
    // state = previous phone; label known immediately (left context only)
    std::vector<int> st(static_cast<std::size_t>(np + 1));
    for (int l = 0; l <= np; ++l) {
      st[static_cast<std::size_t>(l)] = c.add_state();
      c.set_final(st[static_cast<std::size_t>(l)], sr_one());
    }
    c.set_start(st[0]);
    for (int l = 0; l <= np; ++l)
      for (int p = 1; p <= np; ++p)
        c.add_arc(st[static_cast<std::size_t>(l)],
                  {cd.cd_id(l, p, 0), p, sr_one(), st[static_cast<std::size_t>(p)]});
    return c;
  }
  // width 3: states remember (previous, current); emitting the label for the
  // current phone is delayed one step until its right context is known, and a
  // flush arc emits the final phone's label with an epsilon output
  auto key = [np](int l, int cur) { return l * (np + 1) + cur; };
  std::vector<int> st(static_cast<std::size_t>((np + 1) * (np + 1)), -1);
  auto ensure = [&](int l, int cur) {
    int& s = st[static_cast<std::size_t>(key(l, cur))];
    if (s < 0) s = c.add_state();
    return s;
  };
  int start = ensure(0, 0);
  c.set_start(start);
  c.set_final(start, sr_one());  // empty sequence
  int fin = c.add_state();
  c.set_final(fin, sr_one());
  for (int l = 0; l <= np; ++l)
    for (int cur = 0; cur <= np; ++cur) {
      if (cur == 0 && l != 0) continue;  // current=eps only at the very start
      int s = ensure(l, cur);
      for (int r = 1; r <= np; ++r) {
        int ilab = (cur == 0) ? 0 : cd.cd_id(l, cur, r);
        c.add_arc(s, {ilab, r, sr_one(), ensure(cur, r)});
      }
      if (cur != 0) c.add_arc(s, {cd.cd_id(l, cur, 0), 0, sr_one(), fin});
    }
  return c;
}

// spec'd convenience form: builds its own context dependency without pdfs
inline Fst make_context_fst(SymTabPtr phone_table, int context_width,
                            Semiring ring = Semiring::kTropical) {
  if (context_width < 1 || context_width > 3)
    throw BadContextWidth(std::to_string(context_width));
  HmmTopology topo = make_topology(TopoKind::kThreeState);
  auto cd = make_context_dep(phone_table, context_width, topo,
                             [](int, int, int, int) { return 0; });
  return make_context_fst(cd, ring);
}

// ---------------------------------------------------------------------------
// H: transition-id (or pdf+1) sequences -> context-dependent labels.

inline std::shared_ptr<SymbolTable> build_pdf_table(int num_pdfs) {
  auto t = std::make_shared<SymbolTable>();
  t->name = "pdfs";
  for (int p = 0; p < num_pdfs; ++p) t->add("pdf" + std::to_string(p));
  return t;
}

inline Fst make_h_fst(const HmmTopology& topo, const TransitionModel& tm,
                      const ContextDep& cd, Semiring ring = Semiring::kTropical,
                      bool pdf_labels = false,
                      const std::set<int>* restrict_cd = nullptr) {
  Fst h(ring);
  h.isyms = pdf_labels ? SymTabPtr(build_pdf_table(tm.num_pdfs())) : nullptr;
  h.osyms = cd.cd_table;
  int start = h.add_state();
  h.set_start(start);
  h.set_final(start, sr_one());
  int nstates = topo.num_states();
  for (int id = 1; id < static_cast<int>(cd.pdfs.size()); ++id) {
    int phone = cd.center[static_cast<std::size_t>(id)];
    if (phone == 0) continue;
    if (restrict_cd && !restrict_cd->count(id)) continue;
    std::vector<int> emit(static_cast<std::size_t>(nstates));
    std::vector<int> tup(static_cast<std::size_t>(nstates));
    for (int s = 0; s < nstates; ++s) {
      emit[static_cast<std::size_t>(s)] = h.add_state();
      int pdf = cd.pdfs[static_cast<std::size_t>(id)].at(static_cast<std::size_t>(
          topo.states[static_cast<std::size_t>(s)].pdf_class));
      tup[static_cast<std::size_t>(s)] = tm.tuple_index(phone, s, pdf);
      if (tup[static_cast<std::size_t>(s)] < 0)
        throw BadConfig("transition model lacks tuple for phone " +
                        std::to_string(phone));
    }
    h.add_arc(start, {0, id, sr_one(), emit[0]});
    for (int s = 0; s < nstates; ++s) {
      auto trans = topo.transitions(s);
      for (std::size_t j = 0; j < trans.size(); ++j) {
        std::int32_t lab =
            pdf_labels
                ? tm.tuple(tup[static_cast<std::size_t>(s)]).pdf_id + 1
                : tm.tid(tup[static_cast<std::size_t>(s)], static_cast<int>(j));
        int dst = trans[j].target < 0 ? start
                                      : emit[static_cast<std::size_t>(trans[j].target)];
        h.add_arc(emit[static_cast<std::size_t>(s)],
                  {lab, 0, -std::log(trans[j].prob), dst});
      }
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// HCLG compilation.

inline Fst compile_hclg(const Fst& h, const Fst& c, const Fst& l, const Fst& g) {
  Fst lg = compose(l, g);
  Fst clg = compose(c, lg);
  Fst hclg = compose(h, clg);
  hclg = rm_epsilon(hclg);
  hclg = connect(hclg);
  sort_arcs(hclg);
  return hclg;
}

// ---------------------------------------------------------------------------
// Chain phone LM: relative frequencies at every order, back-off permitted
// only from full-order histories to the next shorter one (4-gram -> trigram
// by default), never further down.

inline ArpaLm train_phone_lm(const std::vector<std::vector<std::string>>& seqs,
                             int order = 4) {
  if (seqs.empty()) throw EmptyAlignments("no alignment phone sequences");
  ArpaLm lm = estimate_lm(count_ngrams(seqs, order), order, Smoothing::kNone);
  if (order >= 2)
    for (auto& [key, e] : lm.tables[static_cast<std::size_t>(order - 2)]) {
      e.has_backoff = true;
      e.log10_backoff = 0.0;  // merging, not discounting: full weight
    }
  return lm;
}

// ---------------------------------------------------------------------------
// Denominator graph.

struct DenominatorGraph {
  Fst fst;  // log semiring, epsilon-free acceptor over pdf_id + 1
  std::vector<double> initial_probs;
  int num_pdfs = 0;
};

inline std::vector<double> occupancy_initial_probs(const Fst& f, int steps = 100) {
  int n = f.num_states();
  std::vector<double> p(static_cast<std::size_t>(n), 0.0);
  std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
  p[static_cast<std::size_t>(f.start())] = 1.0;
  std::vector<double> q(static_cast<std::size_t>(n));
  for (int t = 0; t < steps; ++t) {
    std::fill(q.begin(), q.end(), 0.0);
    for (int s = 0; s < n; ++s) {
      if (p[static_cast<std::size_t>(s)] == 0.0) continue;
      for (const auto& a : f.arcs(s))
        q[static_cast<std::size_t>(a.next)] +=
            p[static_cast<std::size_t>(s)] * std::exp(-a.weight);
    }
    double tot = 0.0;
    for (double v : q) tot += v;
    if (tot <= 0.0) break;  // dead end: keep whatever has accumulated
    for (int s = 0; s < n; ++s) {
      q[static_cast<std::size_t>(s)] /= tot;
      acc[static_cast<std::size_t>(s)] += q[static_cast<std::size_t>(s)];
    }
    p = q;
  }
  double tot = 0.0;
  for (double v : acc) tot += v;
  if (tot > 0.0)
    for (double& v : acc) v /= tot;
  return acc;
}

inline DenominatorGraph compile_denominator_graph(const ArpaLm& phone_lm,
                                                  const HmmTopology& topo,
                                                  const TransitionModel& tm,
                                                  const ContextDep& cd) {
  Fst gp = make_grammar_fst(phone_lm, cd.phone_table, Semiring::kLog);
  Fst c = make_context_fst(cd, Semiring::kLog);
  Fst h = make_h_fst(topo, tm, cd, Semiring::kLog, /*pdf_labels=*/true);
  Fst cg = compose(c, gp);
  Fst den = compose(h, cg);
  // project onto the pdf+1 input side
  for (int s = 0; s < den.num_states(); ++s)
    for (auto& a : den.mutable_arcs(s)) a.olabel = a.ilabel;
  den.osyms = den.isyms;
  // chunks can end anywhere: every state is final with weight one
  for (int s = 0; s < den.num_states(); ++s) den.set_final(s, sr_one());
  den = rm_epsilon(den);
  den = minimize_cycle(den);
  DenominatorGraph out;
  out.fst = std::move(den);
  out.initial_probs = occupancy_initial_probs(out.fst);
  out.num_pdfs = tm.num_pdfs();
  return out;
}

inline Fst make_normalization_fst(const DenominatorGraph& den) {
  Fst out = den.fst;
  int super = out.add_state();
  for (std::size_t s = 0; s < den.initial_probs.size(); ++s)
    if (den.initial_probs[s] > 0.0)
      out.add_arc(super, {0, 0, -std::log(den.initial_probs[s]),
                          static_cast<std::int32_t>(s)});
  out.set_start(super);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization sidecar.

struct GraphMeta {
  int num_pdfs = 0;
  TopoKind topo = TopoKind::kThreeState;
  int context_width = 1;
  std::vector<double> initial_probs;
};

inline void write_graph_meta(const GraphMeta& m, const std::filesystem::path& path) {
  nlohmann::json j;
  j["num_pdfs"] = m.num_pdfs;
  j["topology"] = m.topo == TopoKind::kThreeState ? "three_state" : "chain_two_state";
  j["context_width"] = m.context_width;
  j["initial_probs"] = m.initial_probs;
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

inline GraphMeta read_graph_meta(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  is >> j;
  GraphMeta m;
  m.num_pdfs = j.at("num_pdfs").get<int>();
  std::string topo = j.at("topology").get<std::string>();
  if (topo == "three_state")
    m.topo = TopoKind::kThreeState;
  else if (topo == "chain_two_state")
    m.topo = TopoKind::kChainTwoState;
  else
    throw IoError("unknown topology " + topo);
  m.context_width = j.at("context_width").get<int>();
  m.initial_probs = j.at("initial_probs").get<std::vector<double>>();
  return m;
}

}  // namespace asrkit
