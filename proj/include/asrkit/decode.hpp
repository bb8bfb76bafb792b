// asrkit/decode.hpp
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
// Time-synchronous token-passing Viterbi beam search over a decoding graph.
// Acoustic scores come from a per-utterance scorer: GMM log-likelihoods keyed
// by transition id, or raw chain-network logits keyed by pdf id + 1 at the
// subsampled frame rate.  One-best only; no lattices.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "asrkit/chain.hpp"
#include "asrkit/common.hpp"
#include "asrkit/fst.hpp"
#include "asrkit/gmm.hpp"
#include "asrkit/graph.hpp"

namespace asrkit {

ASRKIT_ERROR(NoPathSurvived);

// ---------------------------------------------------------------------------
// Options / result.

struct DecodeOptions {
  double beam = 16.0;
  int max_active = 7000;
  double acoustic_scale = 0.1;  // GMM default; chain decoding wants 1.0
  SymTabPtr word_table;         // optional, for spelling hypotheses

  void validate() const {
    if (!(beam > 0.0)) throw BadConfig("beam must be > 0");
    if (max_active < 1) throw BadConfig("max_active must be >= 1");
  }
};

struct DecodeResult {
  std::vector<std::int32_t> words;  // output labels along the best path
  double total_cost = 0.0;
  double acoustic_cost = 0.0;
  double graph_cost = 0.0;          // includes the final weight
  std::vector<int> active;          // surviving tokens after each frame's prune
};

// ---------------------------------------------------------------------------
// Acoustic scorers.  log_like() returns an UNSCALED log-likelihood (or logit)
// for a graph input label; the decoder applies acoustic_scale.  Scorers are
// per-utterance objects and may cache, hence the non-const method.

class AcousticScorer {
 public:
  virtual ~AcousticScorer() = default;
  virtual int num_frames() const = 0;
  virtual double log_like(int frame, std::int32_t label) = 0;
};

// GMM: label is a transition id; tid -> pdf -> DiagGmm log-likelihood, with a
// lazy per-(frame, pdf) cache since many tids share a pdf.
class GmmScorer final : public AcousticScorer {
 public:
  GmmScorer(const AmGmm& am, const TransitionModel& tm, Mat feats)
      : am_(&am), tm_(&tm), feats_(std::move(feats)) {
    if (static_cast<int>(feats_.cols()) != am.dim)
      throw DimensionMismatch("feature dim " + std::to_string(feats_.cols()) +
                              " vs model dim " + std::to_string(am.dim));
    cache_.assign(static_cast<std::size_t>(feats_.rows()) *
                      static_cast<std::size_t>(am.num_pdfs()),
                  0.0);
    have_.assign(cache_.size(), 0);
  }

  int num_frames() const override { return static_cast<int>(feats_.rows()); }

  double log_like(int frame, std::int32_t label) override {
    int pdf = tm_->pdf_of(label);
    std::size_t k = static_cast<std::size_t>(frame) *
                        static_cast<std::size_t>(am_->num_pdfs()) +
                    static_cast<std::size_t>(pdf);
    if (!have_[k]) {
      cache_[k] = am_->log_like(pdf, feats_.row(frame));
      have_[k] = 1;
    }
    return cache_[k];
  }

 private:
  const AmGmm* am_;
  const TransitionModel* tm_;
  Mat feats_;
  std::vector<double> cache_;
  std::vector<char> have_;
};

inline GmmScorer gmm_scorer(const AmGmm& am, const TransitionModel& tm,
                            const Mat& feats) {
  return GmmScorer(am, tm, feats);
}

// Chain: the whole utterance goes through the network once (eval mode, no
// padding), so T input frames serve ceil((T - context) / subsample) score
// frames; input frame t lands on output row floor(t / subsample) once the
// left context is consumed.  Label is pdf + 1.  Raw logits: no softmax and,
// unless log-priors are supplied, no prior division.
class ChainScorer final : public AcousticScorer {
 public:
  ChainScorer(const TdnnNet& net, const Mat& feats,
              const Vec* log_priors = nullptr) {
    if (static_cast<int>(feats.cols()) != net.in_dim)
      throw DimensionMismatch("feature dim " + std::to_string(feats.cols()) +
                              " vs network input " +
                              std::to_string(net.in_dim));
    if (log_priors && static_cast<int>(log_priors->size()) != net.num_pdfs)
      throw DimensionMismatch("prior size " +
                              std::to_string(log_priors->size()) + " vs " +
                              std::to_string(net.num_pdfs) + " pdfs");
    logits_ = tdnn_forward(net, feats);
    if (log_priors)
      logits_.rowwise() -= log_priors->transpose();
  }

  int num_frames() const override { return static_cast<int>(logits_.rows()); }

  double log_like(int frame, std::int32_t label) override {
    return logits_(frame, label - 1);
  }

 private:
  Mat logits_;
};

inline ChainScorer chain_scorer(const TdnnNet& net, const Mat& feats,
                                const Vec* log_priors = nullptr) {
  return ChainScorer(net, feats, log_priors);
}

// ---------------------------------------------------------------------------
// Decoder.

namespace detail {

// Backtrace arena: one node per surviving arc traversal.
struct TraceNode {
  int parent = -1;
  std::int32_t olabel = 0;
};

struct Token {
  double cost = 0.0;  // graph + scaled acoustic
  double ac = 0.0;    // scaled acoustic part
  double gc = 0.0;    // graph part
  int node = -1;
};

// Ordered by state id so iteration (and therefore tie-breaking) is
// deterministic.
using TokenMap = std::map<int, Token>;

inline void relax(TokenMap* toks, std::vector<TraceNode>* arena, int state,
                  double cost, double ac, double gc, int parent,
                  std::int32_t olabel, bool* changed) {
  auto it = toks->find(state);
  if (it != toks->end() && it->second.cost <= cost) return;  // first wins ties
  arena->push_back({parent, olabel});
  (*toks)[state] = {cost, ac, gc, static_cast<int>(arena->size()) - 1};
  if (changed) *changed = true;
}

// Follow epsilon input arcs to a fixpoint.  Passes are bounded by the state
// count; decode graphs are epsilon-free after compilation, so this only runs
// hot on hand-built test graphs.
inline void eps_expand(const Fst& graph, TokenMap* toks,
                       std::vector<TraceNode>* arena) {
  int limit = graph.num_states() + 2;
  for (int pass = 0; pass < limit; ++pass) {
    bool changed = false;
    for (auto it = toks->begin(); it != toks->end(); ++it) {
      const Token tok = it->second;  // copy: relax may touch *it
      for (const auto& a : graph.arcs(it->first)) {
        if (a.ilabel != 0) continue;
        relax(toks, arena, a.next, tok.cost + a.weight, tok.ac,
              tok.gc + a.weight, tok.node, a.olabel, &changed);
      }
    }
    if (!changed) return;
  }
  throw NegativeEpsilonCycle("epsilon expansion does not converge");
}

// Beam + rank pruning.  max_active is enforced by exact (cost, state)-rank
// selection rather than approximate histogram buckets: same effect,
// deterministic, and cheap at this scale.
inline void prune(TokenMap* toks, double beam, int max_active) {
  double best = kInf;
  for (const auto& [s, tok] : *toks) best = std::min(best, tok.cost);
  double cutoff = best + beam;
  for (auto it = toks->begin(); it != toks->end();)
    it = it->second.cost > cutoff ? toks->erase(it) : std::next(it);
  if (static_cast<int>(toks->size()) <= max_active) return;
  std::vector<std::pair<double, int>> rank;
  rank.reserve(toks->size());
  for (const auto& [s, tok] : *toks) rank.emplace_back(tok.cost, s);
  std::nth_element(rank.begin(), rank.begin() + max_active, rank.end());
  std::pair<double, int> bound = *std::max_element(
      rank.begin(), rank.begin() + max_active);
  for (auto it = toks->begin(); it != toks->end();)
    it = std::make_pair(it->second.cost, it->first) > bound ? toks->erase(it)
                                                            : std::next(it);
}

}  // namespace detail

// Token-passing Viterbi.  Per frame: expand emitting arcs with cost
// graph_weight - acoustic_scale * loglike, follow epsilon arcs, then prune to
// best + beam and at most max_active tokens.  Final weights are added after
// the last frame; the backtrace returns the output labels of the best
// complete path.
inline DecodeResult decode_utterance(const Fst& graph, AcousticScorer& scorer,
                                     const DecodeOptions& opts = {}) {
  opts.validate();
  if (graph.ring() != Semiring::kTropical)
    throw WrongSemiring("decoding expects a tropical graph");
  if (graph.start() < 0)
    throw NoPathSurvived("decoding graph has no start state");
  const int t_count = scorer.num_frames();
  if (t_count < 1) throw BadConfig("scorer has no frames");

  std::vector<detail::TraceNode> arena;
  detail::TokenMap cur;
  cur[graph.start()] = {0.0, 0.0, 0.0, -1};
  detail::eps_expand(graph, &cur, &arena);

  DecodeResult res;
  res.active.reserve(static_cast<std::size_t>(t_count));
  for (int t = 0; t < t_count; ++t) {
    detail::TokenMap next;
    for (const auto& [s, tok] : cur) {
      for (const auto& a : graph.arcs(s)) {
        if (a.ilabel == 0) continue;
        double ac = -opts.acoustic_scale * scorer.log_like(t, a.ilabel);
        detail::relax(&next, &arena, a.next, tok.cost + a.weight + ac,
                      tok.ac + ac, tok.gc + a.weight, tok.node, a.olabel,
                      nullptr);
      }
    }
    if (next.empty())
      throw NoPathSurvived("no token survives frame " + std::to_string(t));
    detail::eps_expand(graph, &next, &arena);
    detail::prune(&next, opts.beam, opts.max_active);
    res.active.push_back(static_cast<int>(next.size()));
    cur.swap(next);
  }

  int best_state = -1;
  double best_total = kInf;
  for (const auto& [s, tok] : cur) {
    double fw = graph.final_weight(s);
    if (fw >= kInf) continue;
    if (tok.cost + fw < best_total) {
      best_total = tok.cost + fw;
      best_state = s;
    }
  }
  if (best_state < 0)
    throw NoPathSurvived("no token reached a final state");
  const detail::Token& tok = cur.at(best_state);
  res.total_cost = best_total;
  res.acoustic_cost = tok.ac;
  res.graph_cost = tok.gc + graph.final_weight(best_state);
  for (int n = tok.node; n >= 0; n = arena[static_cast<std::size_t>(n)].parent)
    if (arena[static_cast<std::size_t>(n)].olabel != 0)
      res.words.push_back(arena[static_cast<std::size_t>(n)].olabel);
  std::reverse(res.words.begin(), res.words.end());
  return res;
}

// ---------------------------------------------------------------------------
// Hypothesis / diagnostics files.

inline std::vector<std::string> spell_words(
    const std::vector<std::int32_t>& words, const SymbolTable& table) {
  std::vector<std::string> out;
  out.reserve(words.size());
  for (std::int32_t w : words) out.push_back(table.str(w));
  return out;
}

// "utt_id word word ..." text lines, one per utterance; also the reference
// transcript format the scorer consumes.
inline void write_hypotheses(
    const std::map<std::string, std::vector<std::string>>& hyps,
    const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& [utt, words] : hyps) {
    os << utt;
    for (const auto& w : words) os << ' ' << w;
    os << '\n';
  }
}

inline std::map<std::string, std::vector<std::string>> read_hypotheses(
    const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::map<std::string, std::vector<std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string utt;
    if (!(ls >> utt)) continue;  // blank line
    if (out.count(utt)) throw DuplicateUttId(utt);
    std::vector<std::string> words;
    for (std::string w; ls >> w;) words.push_back(w);
    out.emplace(utt, std::move(words));
  }
  return out;
}

// Per-utterance cost breakdown, one "utt_id total acoustic graph frames"
// line each.
inline void write_decode_diagnostics(
    const std::map<std::string, DecodeResult>& results,
    const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::setprecision(10);
  for (const auto& [utt, r] : results)
    os << utt << ' ' << r.total_cost << ' ' << r.acoustic_cost << ' '
       << r.graph_cost << ' ' << r.active.size() << '\n';
}

}  // namespace asrkit
