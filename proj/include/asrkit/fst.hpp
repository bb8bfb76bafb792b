// asrkit/fst.hpp
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
// Weighted finite-state transducers over the tropical and log semirings,
// with the algorithms needed for decoding-graph construction: composition
// with an epsilon filter, epsilon removal, acceptor determinization, weight
// pushing, minimization, reversal and shortest path.  Weights are stored as
// costs (negated logs); in both semirings "times" is + and "one" is 0.

#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "asrkit/common.hpp"

namespace asrkit {

ASRKIT_ERROR(SemiringMismatch);
ASRKIT_ERROR(SymbolTableMismatch);
ASRKIT_ERROR(NotAcceptor);
ASRKIT_ERROR(NotDeterministic);
ASRKIT_ERROR(NegativeEpsilonCycle);
ASRKIT_ERROR(DeterminizationBudget);
ASRKIT_ERROR(EmptyFst);
ASRKIT_ERROR(WrongSemiring);
ASRKIT_ERROR(MalformedFst);

enum class Semiring : std::uint8_t { kTropical = 0, kLog = 1 };

// Cost-domain plus: min for tropical, -log(e^-a + e^-b) for log.
inline double sr_plus(Semiring r, double a, double b) {
  if (r == Semiring::kTropical) return std::min(a, b);
  if (a == kInf) return b;
  if (b == kInf) return a;
  double m = std::min(a, b);
  return m - std::log1p(std::exp(m - std::max(a, b)));
}

inline double sr_zero() { return kInf; }
inline double sr_one() { return 0.0; }

struct Arc {
  std::int32_t ilabel = 0;
  std::int32_t olabel = 0;
  double weight = 0.0;
  std::int32_t next = -1;
};

inline bool arc_less(const Arc& a, const Arc& b) {
  if (a.ilabel != b.ilabel) return a.ilabel < b.ilabel;
  if (a.olabel != b.olabel) return a.olabel < b.olabel;
  if (a.next != b.next) return a.next < b.next;
  return a.weight < b.weight;
}

// Symbol table: id 0 is reserved for <eps> and is implicit.
struct SymbolTable {
  std::string name;
  std::vector<std::string> syms;  // syms[k] has id k+1
  std::unordered_map<std::string, std::int32_t> index;

  std::int32_t add(const std::string& s) {
    auto it = index.find(s);
    if (it != index.end()) return it->second;
    syms.push_back(s);
    std::int32_t id = static_cast<std::int32_t>(syms.size());
    index.emplace(s, id);
    return id;
  }
  std::int32_t find(const std::string& s) const {
    auto it = index.find(s);
    return it == index.end() ? -1 : it->second;
  }
  const std::string& str(std::int32_t id) const {
    static const std::string eps = "<eps>";
    if (id == 0) return eps;
    return syms.at(static_cast<std::size_t>(id - 1));
  }
  std::int32_t size() const { return static_cast<std::int32_t>(syms.size()); }
};

using SymTabPtr = std::shared_ptr<const SymbolTable>;

inline void write_symtab(const SymbolTable& t, std::ostream& os) {
  for (const auto& s : t.syms) os << s << "\n";
}

inline SymbolTable read_symtab(std::istream& is, const std::string& name = "") {
  SymbolTable t;
  t.name = name;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (!line.empty()) t.add(line);
  }
  return t;
}

class Fst {
 public:
  explicit Fst(Semiring ring = Semiring::kTropical) : ring_(ring) {}

  Semiring ring() const { return ring_; }
  int start() const { return start_; }
  void set_start(int s) { start_ = s; }

  int add_state() {
    arcs_.emplace_back();
    final_.push_back(sr_zero());
    return static_cast<int>(arcs_.size()) - 1;
  }
  void add_states(int n) {
    for (int i = 0; i < n; ++i) add_state();
  }
  int num_states() const { return static_cast<int>(arcs_.size()); }

  void add_arc(int s, Arc a) {
    if (a.weight == sr_zero()) return;  // zero-weight arcs carry no paths
    arcs_[static_cast<std::size_t>(s)].push_back(a);
  }
  const std::vector<Arc>& arcs(int s) const { return arcs_[static_cast<std::size_t>(s)]; }
  std::vector<Arc>& mutable_arcs(int s) { return arcs_[static_cast<std::size_t>(s)]; }

  void set_final(int s, double w) { final_[static_cast<std::size_t>(s)] = w; }
  double final_weight(int s) const { return final_[static_cast<std::size_t>(s)]; }
  bool is_final(int s) const { return final_[static_cast<std::size_t>(s)] != sr_zero(); }

  std::size_t num_arcs() const {
    std::size_t n = 0;
    for (const auto& v : arcs_) n += v.size();
    return n;
  }

  SymTabPtr isyms, osyms;

 private:
  Semiring ring_;
  int start_ = -1;
  std::vector<std::vector<Arc>> arcs_;
  std::vector<double> final_;
};

inline bool is_acceptor(const Fst& f) {
  for (int s = 0; s < f.num_states(); ++s)
    for (const Arc& a : f.arcs(s))
      if (a.ilabel != a.olabel) return false;
  return true;
}

inline bool has_epsilons(const Fst& f) {
  for (int s = 0; s < f.num_states(); ++s)
    for (const Arc& a : f.arcs(s))
      if (a.ilabel == 0 && a.olabel == 0) return true;
  return false;
}

// Deterministic on input labels and epsilon-free on input side.
inline bool is_ideterministic(const Fst& f) {
  for (int s = 0; s < f.num_states(); ++s) {
    std::set<std::int32_t> seen;
    for (const Arc& a : f.arcs(s)) {
      if (a.ilabel == 0) return false;
      if (!seen.insert(a.ilabel).second) return false;
    }
  }
  return true;
}

// Sorts every state's arcs by (ilabel, olabel, nextstate, weight).
inline void sort_arcs(Fst& f) {
  for (int s = 0; s < f.num_states(); ++s) {
    auto& v = f.mutable_arcs(s);
    std::stable_sort(v.begin(), v.end(), arc_less);
  }
}

// ---------------------------------------------------------------------------
// connect: keep only states on some start->final path, renumber densely
// preserving relative order.

inline Fst connect(const Fst& f) {
  Fst out(f.ring());
  out.isyms = f.isyms;
  out.osyms = f.osyms;
  int n = f.num_states();
  if (f.start() < 0 || n == 0) return out;

  std::vector<char> fwd(static_cast<std::size_t>(n), 0);
  {
    std::vector<int> stack = {f.start()};
    fwd[static_cast<std::size_t>(f.start())] = 1;
    while (!stack.empty()) {
      int s = stack.back();
      stack.pop_back();
      for (const Arc& a : f.arcs(s))
        if (!fwd[static_cast<std::size_t>(a.next)]) {
          fwd[static_cast<std::size_t>(a.next)] = 1;
          stack.push_back(a.next);
        }
    }
  }
  // backward reachability over reversed arcs
  std::vector<std::vector<int>> pred(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s)
    for (const Arc& a : f.arcs(s)) pred[static_cast<std::size_t>(a.next)].push_back(s);
  std::vector<char> bwd(static_cast<std::size_t>(n), 0);
  {
    std::vector<int> stack;
    for (int s = 0; s < n; ++s)
      if (f.is_final(s)) {
        bwd[static_cast<std::size_t>(s)] = 1;
        stack.push_back(s);
      }
    while (!stack.empty()) {
      int s = stack.back();
      stack.pop_back();
      for (int p : pred[static_cast<std::size_t>(s)])
        if (!bwd[static_cast<std::size_t>(p)]) {
          bwd[static_cast<std::size_t>(p)] = 1;
          stack.push_back(p);
        }
    }
  }

  std::vector<int> remap(static_cast<std::size_t>(n), -1);
  for (int s = 0; s < n; ++s)
    if (fwd[static_cast<std::size_t>(s)] && bwd[static_cast<std::size_t>(s)])
      remap[static_cast<std::size_t>(s)] = out.add_state();
  if (remap[static_cast<std::size_t>(f.start())] < 0) return out;  // empty language
  out.set_start(remap[static_cast<std::size_t>(f.start())]);
  for (int s = 0; s < n; ++s) {
    int ns = remap[static_cast<std::size_t>(s)];
    if (ns < 0) continue;
    out.set_final(ns, f.final_weight(s));
    for (const Arc& a : f.arcs(s)) {
      int nt = remap[static_cast<std::size_t>(a.next)];
      if (nt < 0) continue;
      out.add_arc(ns, {a.ilabel, a.olabel, a.weight, nt});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composition with a two-state epsilon-sequencing filter.  Between two
// matched symbols, output-epsilon moves in A and input-epsilon moves in B are
// both legal, but only in the canonical order "A-moves then B-moves": filter
// state 1 means a B-move has happened since the last match, which bars
// further A-moves until the next match resets to state 0.  This keeps every
// interleaving reachable exactly once, so no path weight is dropped or
// double-counted in either semiring.

inline Fst compose(const Fst& a, const Fst& b) {
  if (a.ring() != b.ring())
    throw SemiringMismatch("compose: semirings differ");
  if (a.osyms && b.isyms && a.osyms->name != b.isyms->name)
    throw SymbolTableMismatch("compose: output symbols of A (" + a.osyms->name +
                              ") do not match input symbols of B (" + b.isyms->name + ")");
  Fst out(a.ring());
  out.isyms = a.isyms;
  out.osyms = b.osyms;
  if (a.start() < 0 || b.start() < 0) return out;

  // arcs of B indexed by ilabel for matching
  std::vector<std::vector<Arc>> bsorted(static_cast<std::size_t>(b.num_states()));
  for (int s = 0; s < b.num_states(); ++s) {
    bsorted[static_cast<std::size_t>(s)] = b.arcs(s);
    std::stable_sort(bsorted[static_cast<std::size_t>(s)].begin(),
                     bsorted[static_cast<std::size_t>(s)].end(), arc_less);
  }
  auto b_match = [&](int s, std::int32_t label, std::vector<const Arc*>& hits) {
    hits.clear();
    const auto& v = bsorted[static_cast<std::size_t>(s)];
    auto it = std::lower_bound(v.begin(), v.end(), label,
                               [](const Arc& x, std::int32_t l) { return x.ilabel < l; });
    for (; it != v.end() && it->ilabel == label; ++it) hits.push_back(&*it);
  };

  // arcs of A whose output label occurs nowhere in B can never fire; dropping
  // them up front keeps the state-pair loop proportional to the useful part
  std::unordered_set<std::int32_t> blabels;
  for (int s = 0; s < b.num_states(); ++s)
    for (const Arc& x : b.arcs(s)) blabels.insert(x.ilabel);
  std::vector<std::vector<Arc>> afilt(static_cast<std::size_t>(a.num_states()));
  for (int s = 0; s < a.num_states(); ++s)
    for (const Arc& x : a.arcs(s))
      if (x.olabel == 0 || blabels.count(x.olabel))
        afilt[static_cast<std::size_t>(s)].push_back(x);

  struct Key {
    int s1, s2, f;
    bool operator==(const Key& o) const { return s1 == o.s1 && s2 == o.s2 && f == o.f; }
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      return std::hash<std::uint64_t>()((static_cast<std::uint64_t>(k.s1) << 33) ^
                                        (static_cast<std::uint64_t>(k.s2) << 1) ^
                                        static_cast<std::uint64_t>(k.f));
    }
  };
  std::unordered_map<Key, int, KeyHash> ids;
  std::deque<Key> queue;
  auto state_id = [&](const Key& k) {
    auto it = ids.find(k);
    if (it != ids.end()) return it->second;
    int id = out.add_state();
    ids.emplace(k, id);
    queue.push_back(k);
    return id;
  };
  out.set_start(state_id({a.start(), b.start(), 0}));

  std::vector<const Arc*> hits;
  while (!queue.empty()) {
    Key k = queue.front();
    queue.pop_front();
    int id = ids[k];
    double fa = a.final_weight(k.s1), fb = b.final_weight(k.s2);
    if (fa != sr_zero() && fb != sr_zero()) out.set_final(id, fa + fb);
    for (const Arc& aa : afilt[static_cast<std::size_t>(k.s1)]) {
      if (aa.olabel == 0) {
        if (k.f == 0)
          out.add_arc(id, {aa.ilabel, 0, aa.weight, state_id({aa.next, k.s2, 0})});
      } else {
        b_match(k.s2, aa.olabel, hits);
        for (const Arc* bb : hits)
          out.add_arc(id, {aa.ilabel, bb->olabel, aa.weight + bb->weight,
                           state_id({aa.next, bb->next, 0})});
      }
    }
    b_match(k.s2, 0, hits);
    for (const Arc* bb : hits)
      out.add_arc(id, {0, bb->olabel, bb->weight, state_id({k.s1, bb->next, 1})});
  }
  return connect(out);
}

// ---------------------------------------------------------------------------
// Generic single-source shortest distance (Mohri's queue algorithm).  Each
// state keeps the mass not yet propagated, so a path's weight flows onward
// exactly once -- required for correctness in the log semiring, where the
// naive "re-relax the full distance" scheme double-counts.  Improvements
// below a relative 1e-13 are dropped, which bounds the work on convergent
// cycles; exceeding the pop budget means a cycle whose weight diverges
// (negative cost in the tropical sense, probability mass >= 1 in the log).

namespace detail {

inline std::vector<double> relax_distance(
    Semiring ring, int nstates,
    const std::vector<std::vector<std::pair<int, double>>>& adj,
    const std::vector<std::pair<int, double>>& sources, bool throw_on_cap,
    const char* what) {
  std::vector<double> d(static_cast<std::size_t>(nstates), sr_zero());
  std::vector<double> rem(static_cast<std::size_t>(nstates), sr_zero());
  std::deque<int> queue;
  std::vector<char> inq(static_cast<std::size_t>(nstates), 0);
  for (const auto& [s, w] : sources) {
    d[static_cast<std::size_t>(s)] = sr_plus(ring, d[static_cast<std::size_t>(s)], w);
    rem[static_cast<std::size_t>(s)] = sr_plus(ring, rem[static_cast<std::size_t>(s)], w);
    if (!inq[static_cast<std::size_t>(s)]) {
      inq[static_cast<std::size_t>(s)] = 1;
      queue.push_back(s);
    }
  }
  std::size_t pops = 0;
  const std::size_t cap = 2000ull * static_cast<std::size_t>(std::max(nstates, 1)) + 20000;
  while (!queue.empty()) {
    int s = queue.front();
    queue.pop_front();
    inq[static_cast<std::size_t>(s)] = 0;
    if (++pops > cap) {
      if (throw_on_cap)
        throw NegativeEpsilonCycle(std::string(what) + ": relaxation does not converge");
      break;
    }
    double r = rem[static_cast<std::size_t>(s)];
    rem[static_cast<std::size_t>(s)] = sr_zero();
    if (r == sr_zero()) continue;
    for (const auto& [t, w] : adj[static_cast<std::size_t>(s)]) {
      double add = r + w;
      double& dt = d[static_cast<std::size_t>(t)];
      double nd = sr_plus(ring, dt, add);
      if (nd < dt - 1e-13 * std::max(1.0, std::fabs(nd))) {
        dt = nd;
        if (nd < -1e15 && throw_on_cap)
          throw NegativeEpsilonCycle(std::string(what) + ": weight diverges");
        rem[static_cast<std::size_t>(t)] =
            sr_plus(ring, rem[static_cast<std::size_t>(t)], add);
        if (!inq[static_cast<std::size_t>(t)]) {
          inq[static_cast<std::size_t>(t)] = 1;
          queue.push_back(t);
        }
      }
    }
  }
  return d;
}

}  // namespace detail

// Epsilon closure of one state: shortest distances over epsilon-only arcs.

inline std::unordered_map<int, double> eps_closure(const Fst& f, int src) {
  // eps-reachable member set, then dense relaxation over it
  std::vector<int> members = {src};
  std::unordered_map<int, int> index;
  index[src] = 0;
  for (std::size_t i = 0; i < members.size(); ++i)
    for (const Arc& a : f.arcs(members[i]))
      if (a.ilabel == 0 && a.olabel == 0 && !index.count(a.next)) {
        index[a.next] = static_cast<int>(members.size());
        members.push_back(a.next);
      }
  std::vector<std::vector<std::pair<int, double>>> adj(members.size());
  for (std::size_t i = 0; i < members.size(); ++i)
    for (const Arc& a : f.arcs(members[i]))
      if (a.ilabel == 0 && a.olabel == 0)
        adj[i].emplace_back(index[a.next], a.weight);
  auto d = detail::relax_distance(f.ring(), static_cast<int>(members.size()), adj,
                                  {{0, sr_one()}}, true, "eps_closure");
  std::unordered_map<int, double> out;
  for (std::size_t i = 0; i < members.size(); ++i)
    if (d[i] != sr_zero()) out[members[i]] = d[i];
  return out;
}

inline Fst rm_epsilon(const Fst& f) {
  Fst out(f.ring());
  out.isyms = f.isyms;
  out.osyms = f.osyms;
  if (f.start() < 0) return out;
  out.add_states(f.num_states());
  out.set_start(f.start());
  for (int s = 0; s < f.num_states(); ++s) {
    bool has_eps = false;
    for (const Arc& a : f.arcs(s))
      if (a.ilabel == 0 && a.olabel == 0) {
        has_eps = true;
        break;
      }
    if (!has_eps) {
      out.set_final(s, f.final_weight(s));
      for (const Arc& a : f.arcs(s)) out.add_arc(s, a);
      continue;
    }
    auto closure = eps_closure(f, s);
    // deterministic iteration order
    std::vector<std::pair<int, double>> cl(closure.begin(), closure.end());
    std::sort(cl.begin(), cl.end());
    double fw = sr_zero();
    for (const auto& [t, d] : cl) {
      if (f.is_final(t)) fw = sr_plus(f.ring(), fw, d + f.final_weight(t));
      for (const Arc& a : f.arcs(t)) {
        if (a.ilabel == 0 && a.olabel == 0) continue;
        out.add_arc(s, {a.ilabel, a.olabel, d + a.weight, a.next});
      }
    }
    out.set_final(s, fw);
  }
  return connect(out);
}

// ---------------------------------------------------------------------------
// Acceptor determinization by weighted subset construction.  Subsets carry
// residual weights normalized so their semiring sum is one; the common part
// is emitted on the transition.  Residuals are quantized at 1e-9 for subset
// identity.  Output size is capped at budget_factor * max(input states, 1).

inline Fst determinize_acceptor(const Fst& f_in, double budget_factor = 100.0) {
  if (!is_acceptor(f_in)) throw NotAcceptor("determinize: transducer input");
  Fst f = has_epsilons(f_in) ? rm_epsilon(f_in) : f_in;
  Fst out(f.ring());
  out.isyms = f.isyms;
  out.osyms = f.osyms ? f.osyms : f.isyms;
  if (f.start() < 0) return out;

  using Subset = std::vector<std::pair<int, double>>;  // sorted by state id
  auto subset_key = [](const Subset& ss) {
    std::string key;
    key.reserve(ss.size() * 12);
    for (const auto& [s, w] : ss) {
      std::int64_t q = (w == kInf) ? std::numeric_limits<std::int64_t>::max()
                                   : llround(w * 1e9);
      key.append(reinterpret_cast<const char*>(&s), sizeof(s));
      key.append(reinterpret_cast<const char*>(&q), sizeof(q));
    }
    return key;
  };

  std::size_t budget =
      static_cast<std::size_t>(budget_factor * std::max(1, f.num_states()));
  std::unordered_map<std::string, int> ids;
  std::deque<Subset> queue;
  auto subset_id = [&](Subset ss) {
    std::string key = subset_key(ss);
    auto it = ids.find(key);
    if (it != ids.end()) return it->second;
    int id = out.add_state();
    if (static_cast<std::size_t>(out.num_states()) > budget)
      throw DeterminizationBudget("determinize: state budget " + std::to_string(budget) +
                                  " exceeded");
    ids.emplace(std::move(key), id);
    queue.push_back(std::move(ss));
    return id;
  };

  out.set_start(subset_id({{f.start(), sr_one()}}));
  while (!queue.empty()) {
    Subset ss = std::move(queue.front());
    queue.pop_front();
    int id = ids[subset_key(ss)];

    double fw = sr_zero();
    std::map<std::int32_t, std::map<int, double>> trans;  // label -> state -> weight
    for (const auto& [s, r] : ss) {
      if (f.is_final(s)) fw = sr_plus(f.ring(), fw, r + f.final_weight(s));
      for (const Arc& a : f.arcs(s)) {
        auto& slot = trans[a.ilabel];
        double w = r + a.weight;
        auto it = slot.find(a.next);
        slot[a.next] = (it == slot.end()) ? w : sr_plus(f.ring(), it->second, w);
      }
    }
    out.set_final(id, fw);
    for (const auto& [label, targets] : trans) {
      double common = sr_zero();
      for (const auto& [t, w] : targets) common = sr_plus(f.ring(), common, w);
      Subset next;
      next.reserve(targets.size());
      for (const auto& [t, w] : targets) next.emplace_back(t, w - common);
      out.add_arc(id, {label, label, common, subset_id(std::move(next))});
    }
  }
  return connect(out);
}

// ---------------------------------------------------------------------------
// Shortest distance from every state to a final state (including the final
// weight), by relaxation over reversed arcs.  Exact on acyclic inputs;
// converges on the cyclic stochastic graphs used here.

inline std::vector<double> backward_distance(const Fst& f) {
  int n = f.num_states();
  std::vector<std::vector<std::pair<int, double>>> rev(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s)
    for (const Arc& a : f.arcs(s))
      rev[static_cast<std::size_t>(a.next)].emplace_back(s, a.weight);
  std::vector<std::pair<int, double>> sources;
  for (int s = 0; s < n; ++s)
    if (f.is_final(s)) sources.emplace_back(s, f.final_weight(s));
  return detail::relax_distance(f.ring(), n, rev, sources, false, "backward_distance");
}

// Weight pushing toward the initial state.  Arc weights are reweighted by
// backward potentials; the total path weight is preserved by folding the
// start potential into the final weights.

inline Fst push_weights(const Fst& f_in) {
  Fst f = connect(f_in);
  if (f.start() < 0 || f.num_states() == 0) return f;
  std::vector<double> d = backward_distance(f);
  Fst out(f.ring());
  out.isyms = f.isyms;
  out.osyms = f.osyms;
  out.add_states(f.num_states());
  out.set_start(f.start());
  double d_start = d[static_cast<std::size_t>(f.start())];
  for (int s = 0; s < f.num_states(); ++s) {
    double ds = d[static_cast<std::size_t>(s)];
    if (ds == sr_zero()) continue;  // cannot happen after connect
    if (f.is_final(s)) out.set_final(s, f.final_weight(s) - ds + d_start);
    for (const Arc& a : f.arcs(s)) {
      double dn = d[static_cast<std::size_t>(a.next)];
      out.add_arc(s, {a.ilabel, a.olabel, a.weight + dn - ds, a.next});
    }
  }
  // after reweighting, fold d_start out of finals so it sits on... (kept at
  // finals: total = (w + d_next - d_src summed) + final - d_final + d_start
  // telescopes back to the original path weight)
  return out;
}

// ---------------------------------------------------------------------------
// Minimization of a deterministic, epsilon-free acceptor by partition
// refinement on (final weight, outgoing signature) with weights quantized at
// 1e-9.  Merges states with identical residual languages; never increases
// the state count.

inline Fst minimize(const Fst& f_in) {
  Fst f = connect(f_in);
  if (f.start() < 0 || f.num_states() == 0) return f;
  if (!is_acceptor(f)) throw NotAcceptor("minimize: transducer input");
  if (!is_ideterministic(f)) throw NotDeterministic("minimize: nondeterministic input");

  int n = f.num_states();
  auto quant = [](double w) -> std::int64_t {
    return (w == kInf) ? std::numeric_limits<std::int64_t>::max() : llround(w * 1e9);
  };

  std::vector<int> cls(static_cast<std::size_t>(n));
  {
    std::map<std::int64_t, int> by_final;
    for (int s = 0; s < n; ++s) {
      auto [it, fresh] = by_final.emplace(quant(f.final_weight(s)),
                                          static_cast<int>(by_final.size()));
      cls[static_cast<std::size_t>(s)] = it->second;
    }
  }

  bool changed = true;
  while (changed) {
    changed = false;
    std::map<std::vector<std::int64_t>, int> sig_map;
    std::vector<int> next_cls(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s) {
      std::vector<std::pair<std::int32_t, std::pair<std::int64_t, int>>> outs;
      for (const Arc& a : f.arcs(s))
        outs.push_back({a.ilabel, {quant(a.weight), cls[static_cast<std::size_t>(a.next)]}});
      std::sort(outs.begin(), outs.end());
      std::vector<std::int64_t> sig;
      sig.push_back(cls[static_cast<std::size_t>(s)]);
      for (const auto& [l, wn] : outs) {
        sig.push_back(l);
        sig.push_back(wn.first);
        sig.push_back(wn.second);
      }
      auto [it, fresh] = sig_map.emplace(std::move(sig), static_cast<int>(sig_map.size()));
      next_cls[static_cast<std::size_t>(s)] = it->second;
    }
    if (next_cls != cls) {
      changed = true;
      cls = std::move(next_cls);
    }
  }

  int nclasses = *std::max_element(cls.begin(), cls.end()) + 1;
  std::vector<int> rep(static_cast<std::size_t>(nclasses), -1);
  for (int s = 0; s < n; ++s)
    if (rep[static_cast<std::size_t>(cls[static_cast<std::size_t>(s)])] < 0)
      rep[static_cast<std::size_t>(cls[static_cast<std::size_t>(s)])] = s;

  Fst out(f.ring());
  out.isyms = f.isyms;
  out.osyms = f.osyms;
  out.add_states(nclasses);
  out.set_start(cls[static_cast<std::size_t>(f.start())]);
  for (int c = 0; c < nclasses; ++c) {
    int s = rep[static_cast<std::size_t>(c)];
    out.set_final(c, f.final_weight(s));
    for (const Arc& a : f.arcs(s))
      out.add_arc(c, {a.ilabel, a.olabel, a.weight,
                      cls[static_cast<std::size_t>(a.next)]});
  }
  return connect(out);
}

// ---------------------------------------------------------------------------
// Reversal.  A super-initial state with epsilon arcs absorbs multiple or
// weighted finals; a single final with weight one becomes the start directly.

inline Fst reverse(const Fst& f) {
  Fst out(f.ring());
  out.isyms = f.isyms;
  out.osyms = f.osyms;
  if (f.start() < 0) return out;
  int n = f.num_states();
  out.add_states(n);
  std::vector<int> finals;
  for (int s = 0; s < n; ++s)
    if (f.is_final(s)) finals.push_back(s);
  if (finals.size() == 1 && f.final_weight(finals[0]) == sr_one()) {
    out.set_start(finals[0]);
  } else {
    int super = out.add_state();
    out.set_start(super);
    for (int s : finals) out.add_arc(super, {0, 0, f.final_weight(s), s});
  }
  out.set_final(f.start(), sr_one());
  for (int s = 0; s < n; ++s)
    for (const Arc& a : f.arcs(s)) out.add_arc(a.next, {a.ilabel, a.olabel, a.weight, s});
  return connect(out);
}

// ---------------------------------------------------------------------------
// Single shortest path (tropical only): label-queue relaxation with parent
// pointers, deterministic tie-breaking by state order.

struct ShortestPath {
  std::vector<Arc> arcs;  // along the path, in order
  double weight = kInf;   // total including the final weight
};

inline ShortestPath shortest_path(const Fst& f) {
  if (f.ring() != Semiring::kTropical)
    throw WrongSemiring("shortest_path: tropical semiring required");
  if (f.start() < 0 || f.num_states() == 0) return {};  // empty language
  int n = f.num_states();
  std::vector<double> d(static_cast<std::size_t>(n), kInf);
  std::vector<std::pair<int, int>> parent(static_cast<std::size_t>(n), {-1, -1});
  d[static_cast<std::size_t>(f.start())] = 0.0;
  std::deque<int> queue = {f.start()};
  std::vector<char> inq(static_cast<std::size_t>(n), 0);
  inq[static_cast<std::size_t>(f.start())] = 1;
  while (!queue.empty()) {
    int s = queue.front();
    queue.pop_front();
    inq[static_cast<std::size_t>(s)] = 0;
    const auto& arcs = f.arcs(s);
    for (int i = 0; i < static_cast<int>(arcs.size()); ++i) {
      const Arc& a = arcs[static_cast<std::size_t>(i)];
      double nd = d[static_cast<std::size_t>(s)] + a.weight;
      if (nd < d[static_cast<std::size_t>(a.next)] - 1e-15) {
        d[static_cast<std::size_t>(a.next)] = nd;
        parent[static_cast<std::size_t>(a.next)] = {s, i};
        if (!inq[static_cast<std::size_t>(a.next)]) {
          inq[static_cast<std::size_t>(a.next)] = 1;
          queue.push_back(a.next);
        }
      }
    }
  }
  int best = -1;
  double best_w = kInf;
  for (int s = 0; s < n; ++s)
    if (f.is_final(s)) {
      double w = d[static_cast<std::size_t>(s)] + f.final_weight(s);
      if (w < best_w) {
        best_w = w;
        best = s;
      }
    }
  ShortestPath sp;
  if (best < 0) return sp;  // no accepting path; weight stays +inf
  sp.weight = best_w;
  int s = best;
  while (s != f.start()) {
    auto [p, idx] = parent[static_cast<std::size_t>(s)];
    sp.arcs.push_back(f.arcs(p)[static_cast<std::size_t>(idx)]);
    s = p;
  }
  std::reverse(sp.arcs.begin(), sp.arcs.end());
  return sp;
}

// ---------------------------------------------------------------------------
// Brute-force language equivalence up to a string length, for testing graph
// transforms.  Walks both machines in lockstep over weighted state vectors,
// treating epsilons as free moves, and compares total weights per string.

namespace detail {

using StateVec = std::map<int, double>;

inline StateVec sv_closure(const Fst& f, StateVec v) {
  // member set: support of v plus everything eps-reachable from it
  std::vector<int> members;
  std::unordered_map<int, int> index;
  for (const auto& [s, w] : v) {
    index.emplace(s, static_cast<int>(members.size()));
    members.push_back(s);
  }
  for (std::size_t i = 0; i < members.size(); ++i)
    for (const Arc& a : f.arcs(members[i]))
      if (a.ilabel == 0 && a.olabel == 0 && !index.count(a.next)) {
        index[a.next] = static_cast<int>(members.size());
        members.push_back(a.next);
      }
  std::vector<std::vector<std::pair<int, double>>> adj(members.size());
  for (std::size_t i = 0; i < members.size(); ++i)
    for (const Arc& a : f.arcs(members[i]))
      if (a.ilabel == 0 && a.olabel == 0) adj[i].emplace_back(index[a.next], a.weight);
  std::vector<std::pair<int, double>> sources;
  for (const auto& [s, w] : v) sources.emplace_back(index[s], w);
  auto d = relax_distance(f.ring(), static_cast<int>(members.size()), adj, sources, false,
                          "sv_closure");
  StateVec out;
  for (std::size_t i = 0; i < members.size(); ++i)
    if (d[i] != sr_zero()) out[members[i]] = d[i];
  return out;
}

inline double sv_total(const Fst& f, const StateVec& v) {
  double t = sr_zero();
  for (const auto& [s, w] : v)
    if (f.is_final(s)) t = sr_plus(f.ring(), t, w + f.final_weight(s));
  return t;
}

inline StateVec sv_step(const Fst& f, const StateVec& v, std::int32_t label) {
  StateVec out;
  for (const auto& [s, w] : v)
    for (const Arc& a : f.arcs(s)) {
      if (a.ilabel != label) continue;
      auto it = out.find(a.next);
      double old = (it == out.end()) ? sr_zero() : it->second;
      out[a.next] = sr_plus(f.ring(), old, w + a.weight);
    }
  return out;
}

inline bool weights_close(double a, double b, double tol) {
  const double big = 1e12;
  bool za = !(a < big), zb = !(b < big);
  if (za || zb) return za == zb;
  return std::fabs(a - b) <= tol;
}

inline bool sv_equiv(const Fst& fa, const Fst& fb, StateVec va, StateVec vb, int depth,
                     double tol) {
  va = sv_closure(fa, va);
  vb = sv_closure(fb, vb);
  if (!weights_close(sv_total(fa, va), sv_total(fb, vb), tol)) return false;
  if (depth == 0) return true;
  std::set<std::int32_t> labels;
  for (const auto& [s, w] : va)
    for (const Arc& a : fa.arcs(s))
      if (a.ilabel != 0) labels.insert(a.ilabel);
  for (const auto& [s, w] : vb)
    for (const Arc& a : fb.arcs(s))
      if (a.ilabel != 0) labels.insert(a.ilabel);
  for (std::int32_t l : labels) {
    StateVec na = sv_step(fa, va, l);
    StateVec nb = sv_step(fb, vb, l);
    if (na.empty() && nb.empty()) continue;
    if (!sv_equiv(fa, fb, std::move(na), std::move(nb), depth - 1, tol)) return false;
  }
  return true;
}

}  // namespace detail

inline bool equivalent_brute(const Fst& a, const Fst& b, int max_len, double tol = 1e-6) {
  if (a.ring() != b.ring()) throw SemiringMismatch("equivalent_brute: semirings differ");
  detail::StateVec va, vb;
  if (a.start() >= 0) va[a.start()] = sr_one();
  if (b.start() >= 0) vb[b.start()] = sr_one();
  return detail::sv_equiv(a, b, std::move(va), std::move(vb), max_len, tol);
}

// ---------------------------------------------------------------------------
// The canonical graph-shrinking cycle: three repetitions of push, minimize
// and reverse, then a restoring reversal so the language keeps its original
// orientation.  Push and minimize need a deterministic epsilon-free acceptor,
// so the graph is re-canonicalized after every reversal.  A final push +
// minimize leaves the result in minimal pushed form.

inline Fst minimize_cycle(const Fst& f_in) {
  auto canon = [](const Fst& g) { return determinize_acceptor(rm_epsilon(g)); };
  Fst g = canon(f_in);
  for (int i = 0; i < 3; ++i) {
    g = push_weights(g);
    g = minimize(g);
    g = canon(reverse(g));
  }
  g = canon(reverse(g));
  g = push_weights(g);
  g = minimize(g);
  sort_arcs(g);
  return g;
}

// ---------------------------------------------------------------------------
// Text I/O, one arc per line "src dst ilabel olabel weight"; final states on
// "state weight" lines.  The first line's source is the start state.

inline void write_fst_text(const Fst& f, std::ostream& os) {
  os.precision(17);
  if (f.start() >= 0) {
    // emit start state's arcs first, then the rest in order
    std::vector<int> order;
    order.push_back(f.start());
    for (int s = 0; s < f.num_states(); ++s)
      if (s != f.start()) order.push_back(s);
    for (int s : order)
      for (const Arc& a : f.arcs(s))
        os << s << " " << a.next << " " << a.ilabel << " " << a.olabel << " " << a.weight
           << "\n";
    for (int s : order)
      if (f.is_final(s)) os << s << " " << f.final_weight(s) << "\n";
  }
}

inline Fst read_fst_text(std::istream& is, Semiring ring = Semiring::kTropical) {
  Fst f(ring);
  std::string line;
  bool saw_start = false;
  auto ensure = [&](int s) {
    while (f.num_states() <= s) f.add_state();
  };
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto tok = split_ws(line);
    try {
      if (tok.size() == 5) {
        int src = std::stoi(tok[0]), dst = std::stoi(tok[1]);
        ensure(std::max(src, dst));
        if (!saw_start) {
          f.set_start(src);
          saw_start = true;
        }
        f.add_arc(src, {std::stoi(tok[2]), std::stoi(tok[3]), std::stod(tok[4]), dst});
      } else if (tok.size() == 2) {
        int s = std::stoi(tok[0]);
        ensure(s);
        if (!saw_start) {
          f.set_start(s);
          saw_start = true;
        }
        f.set_final(s, std::stod(tok[1]));
      } else if (tok.size() == 1) {
        int s = std::stoi(tok[0]);
        ensure(s);
        if (!saw_start) {
          f.set_start(s);
          saw_start = true;
        }
        f.set_final(s, sr_one());
      } else {
        throw MalformedFst("bad fst text line: " + line);
      }
    } catch (const std::invalid_argument&) {
      throw MalformedFst("bad fst text line: " + line);
    }
  }
  return f;
}

// Binary format: magic, semiring byte, counts, then fixed-width arc records.
inline void write_fst_bin(const Fst& f, std::ostream& os) {
  os.write("WFST", 4);
  write_pod<std::uint8_t>(os, 1);  // format version
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(f.ring()));
  write_pod<std::int32_t>(os, f.start());
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(f.num_states()));
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(f.num_arcs()));
  for (int s = 0; s < f.num_states(); ++s) write_pod<double>(os, f.final_weight(s));
  for (int s = 0; s < f.num_states(); ++s)
    for (const Arc& a : f.arcs(s)) {
      write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s));
      write_pod<std::int32_t>(os, a.ilabel);
      write_pod<std::int32_t>(os, a.olabel);
      write_pod<double>(os, a.weight);
      write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(a.next));
    }
}

inline Fst read_fst_bin(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "WFST") throw MalformedFst("bad fst magic");
  auto version = read_pod<std::uint8_t>(is);
  if (version != 1) throw MalformedFst("unsupported fst version");
  auto ring = static_cast<Semiring>(read_pod<std::uint8_t>(is));
  if (ring != Semiring::kTropical && ring != Semiring::kLog)
    throw MalformedFst("bad semiring byte");
  Fst f(ring);
  auto start = read_pod<std::int32_t>(is);
  auto nstates = read_pod<std::uint32_t>(is);
  auto narcs = read_pod<std::uint64_t>(is);
  f.add_states(static_cast<int>(nstates));
  if (start >= static_cast<std::int32_t>(nstates)) throw MalformedFst("start out of range");
  f.set_start(start);
  for (std::uint32_t s = 0; s < nstates; ++s) f.set_final(static_cast<int>(s), read_pod<double>(is));
  for (std::uint64_t i = 0; i < narcs; ++i) {
    auto src = read_pod<std::uint32_t>(is);
    Arc a;
    a.ilabel = read_pod<std::int32_t>(is);
    a.olabel = read_pod<std::int32_t>(is);
    a.weight = read_pod<double>(is);
    a.next = static_cast<std::int32_t>(read_pod<std::uint32_t>(is));
    if (src >= nstates || a.next >= static_cast<std::int32_t>(nstates))
      throw MalformedFst("arc state out of range");
    f.add_arc(static_cast<int>(src), a);
  }
  return f;
}

inline void save_fst(const Fst& f, const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  write_fst_bin(f, os);
}

inline Fst load_fst(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  return read_fst_bin(is);
}

}  // namespace asrkit
