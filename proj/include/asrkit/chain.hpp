// asrkit/chain.hpp
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
// Lattice-free MMI ("chain") training: numerator supervision FSTs with frame
// tolerance, chunk splitting, normalization composition, probability-domain
// forward-backward with per-frame rescaling and a leaky HMM, the clamped
// objective, and a small spliced/subsampled TDNN trained by SGD.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "asrkit/common.hpp"
#include "asrkit/fst.hpp"
#include "asrkit/gmm.hpp"
#include "asrkit/graph.hpp"

namespace asrkit {

ASRKIT_ERROR(EmptyAlignment);
ASRKIT_ERROR(NumericalFailure);
ASRKIT_ERROR(DiscardChunk);
ASRKIT_ERROR(InputTooShort);
ASRKIT_ERROR(Diverged);

// ---------------------------------------------------------------------------
// Supervision chunks.

struct ChainSupervision {
  std::string utt_id;
  int index = 0;        // chunk ordinal within the utterance
  int first_frame = 0;  // offset in subsampled frames
  int num_frames = 0;   // length in subsampled frames
  double weight = 1.0;
  Fst fst{Semiring::kLog};  // acceptor over pdf_id + 1, frame-synchronous
};

inline void write_supervisions(const std::filesystem::path& path,
                               const std::vector<ChainSupervision>& sups) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write("CSUP", 4);
  write_pod<std::uint8_t>(os, 1);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sups.size()));
  for (const auto& s : sups) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.utt_id.size()));
    os.write(s.utt_id.data(), static_cast<std::streamsize>(s.utt_id.size()));
    write_pod<std::int32_t>(os, s.index);
    write_pod<std::int32_t>(os, s.first_frame);
    write_pod<std::int32_t>(os, s.num_frames);
    write_pod<double>(os, s.weight);
    write_fst_bin(s.fst, os);
  }
}

inline std::vector<ChainSupervision> read_supervisions(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (std::string(magic, 4) != "CSUP") throw IoError("bad supervision file");
  if (read_pod<std::uint8_t>(is) != 1) throw IoError("bad supervision version");
  auto n = read_pod<std::uint32_t>(is);
  std::vector<ChainSupervision> out(n);
  for (auto& s : out) {
    auto len = read_pod<std::uint32_t>(is);
    s.utt_id.resize(len);
    is.read(s.utt_id.data(), static_cast<std::streamsize>(len));
    s.index = read_pod<std::int32_t>(is);
    s.first_frame = read_pod<std::int32_t>(is);
    s.num_frames = read_pod<std::int32_t>(is);
    s.weight = read_pod<double>(is);
    s.fst = read_fst_bin(is);
  }
  if (!is) throw IoError("truncated supervision file");
  return out;
}

// ---------------------------------------------------------------------------
// Alignment -> subsampled phone segmentation.

namespace detail {

// (phone, frame count) runs at the alignment's own frame rate
inline std::vector<std::pair<int, int>> phone_segments(
    const TransitionModel& tm, const std::vector<std::int32_t>& ali) {
  std::vector<std::pair<int, int>> segs;
  bool open = false;
  for (auto t : ali) {
    if (!open) {
      segs.emplace_back(tm.phone_of(t), 0);
      open = true;
    }
    ++segs.back().second;
    if (leaves_phone(tm, t)) open = false;
  }
  return segs;
}

// cumulative phone end positions mapped to the subsampled rate; every phone
// keeps at least one frame and the last end lands exactly on t_sub
inline std::vector<int> subsample_bounds(
    const std::vector<std::pair<int, int>>& segs, int subsample, int t_sub) {
  int n = static_cast<int>(segs.size());
  if (t_sub < n)
    throw EmptyAlignment("utterance shorter than its phone count after subsampling");
  std::vector<int> ends(static_cast<std::size_t>(n));
  int raw = 0;
  for (int i = 0; i < n; ++i) {
    raw += segs[static_cast<std::size_t>(i)].second;
    ends[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(raw) / subsample));
  }
  for (int i = 0; i < n; ++i)
    ends[static_cast<std::size_t>(i)] =
        std::max(ends[static_cast<std::size_t>(i)],
                 i == 0 ? 1 : ends[static_cast<std::size_t>(i - 1)] + 1);
  ends[static_cast<std::size_t>(n - 1)] = t_sub;
  for (int i = n - 2; i >= 0; --i)
    ends[static_cast<std::size_t>(i)] =
        std::min(ends[static_cast<std::size_t>(i)],
                 ends[static_cast<std::size_t>(i + 1)] - 1);
  return ends;
}

inline int context_pdf(const ContextDep& cd, int left, int center, int cls) {
  int id = cd.cd_id(left, center, 0);
  return cd.pdfs.at(static_cast<std::size_t>(id)).at(static_cast<std::size_t>(cls));
}

}  // namespace detail

// Re-render a source-rate alignment as a chain-topology alignment at the
// subsampled rate with canonical (tolerance-free) boundaries.  Used to build
// the chain decision tree and the phone LM training sequences.
inline std::vector<std::int32_t> chain_alignment(
    const std::vector<std::int32_t>& ali, const TransitionModel& tm_src,
    const TransitionModel& tm_chain, const ContextDep& cd_chain,
    int subsample = 3) {
  if (ali.empty()) throw EmptyAlignment("empty alignment");
  const auto& topo = tm_chain.topo();
  if (topo.kind != TopoKind::kChainTwoState)
    throw BadConfig("chain_alignment needs the chain topology");
  auto segs = detail::phone_segments(tm_src, ali);
  int t_sub = (static_cast<int>(ali.size()) + subsample - 1) / subsample;
  auto ends = detail::subsample_bounds(segs, subsample, t_sub);
  std::vector<std::int32_t> out;
  out.reserve(static_cast<std::size_t>(t_sub));
  int left = 0, start = 0;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    int phone = segs[i].first;
    int len = ends[i] - start;
    int pdf0 = detail::context_pdf(cd_chain, left, phone, topo.states[0].pdf_class);
    int pdf1 = detail::context_pdf(cd_chain, left, phone, topo.states[1].pdf_class);
    int tup0 = tm_chain.tuple_index(phone, 0, pdf0);
    int tup1 = tm_chain.tuple_index(phone, 1, pdf1);
    if (tup0 < 0 || tup1 < 0)
      throw BadConfig("chain transition model lacks phone " + std::to_string(phone));
    // state 0: transition 0 enters state 1, transition 1 leaves immediately
    if (len == 1) {
      out.push_back(tm_chain.tid(tup0, 1));
    } else {
      out.push_back(tm_chain.tid(tup0, 0));
      for (int k = 0; k < len - 2; ++k) out.push_back(tm_chain.tid(tup1, 0));
      out.push_back(tm_chain.tid(tup1, 1));
    }
    left = phone;
    start = ends[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Numerator FST: frame-synchronous acceptor over pdf_id + 1 in which each
// phone boundary may shift up to tol subsampled frames from the alignment.

inline Fst make_numerator_fst(const std::vector<std::int32_t>& ali,
                              const TransitionModel& tm_src,
                              const ContextDep& cd_chain,
                              const HmmTopology& topo_chain, int subsample = 3,
                              int tol = 2) {
  if (ali.empty()) throw EmptyAlignment("empty alignment");
  if (topo_chain.kind != TopoKind::kChainTwoState)
    throw BadConfig("numerator FSTs use the chain topology");
  auto segs = detail::phone_segments(tm_src, ali);
  int t_sub = (static_cast<int>(ali.size()) + subsample - 1) / subsample;
  auto ends = detail::subsample_bounds(segs, subsample, t_sub);
  int n = static_cast<int>(segs.size());

  std::vector<int> pdf0(static_cast<std::size_t>(n)), pdf1(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int left = i == 0 ? 0 : segs[static_cast<std::size_t>(i - 1)].first;
    int phone = segs[static_cast<std::size_t>(i)].first;
    pdf0[static_cast<std::size_t>(i)] =
        detail::context_pdf(cd_chain, left, phone, topo_chain.states[0].pdf_class);
    pdf1[static_cast<std::size_t>(i)] =
        detail::context_pdf(cd_chain, left, phone, topo_chain.states[1].pdf_class);
  }

  // phone i may not cover frames at or past hi_end[i]; phone i+1 may only be
  // entered within tol of the canonical boundary and with room left over
  auto hi_end = [&](int i) {
    return std::min(ends[static_cast<std::size_t>(i)] + tol, t_sub - (n - 1 - i));
  };
  auto enter_lo = [&](int i) {  // first frame of phone i
    return std::max(ends[static_cast<std::size_t>(i - 1)] - tol, i);
  };
  auto enter_hi = [&](int i) {
    return std::min(ends[static_cast<std::size_t>(i - 1)] + tol, t_sub - (n - i));
  };

  Fst f(Semiring::kLog);
  std::map<std::pair<int, int>, int> ids;  // (frames emitted, phone) -> state
  auto state_of = [&](int t, int i) {
    auto [it, fresh] = ids.emplace(std::make_pair(t, i), -1);
    if (fresh) it->second = f.add_state();
    return it->second;
  };
  int start = f.add_state();
  f.set_start(start);
  f.add_arc(start, {pdf0[0] + 1, pdf0[0] + 1, sr_one(), state_of(1, 0)});
  for (int t = 1; t < t_sub; ++t)
    for (int i = 0; i < n; ++i) {
      auto it = ids.find({t, i});
      if (it == ids.end()) continue;
      int src = it->second;
      if (t <= hi_end(i) - 1)  // stay in the repeatable state
        f.add_arc(src, {pdf1[static_cast<std::size_t>(i)] + 1,
                        pdf1[static_cast<std::size_t>(i)] + 1, sr_one(),
                        state_of(t + 1, i)});
      if (i + 1 < n && t >= enter_lo(i + 1) && t <= enter_hi(i + 1))
        f.add_arc(src, {pdf0[static_cast<std::size_t>(i + 1)] + 1,
                        pdf0[static_cast<std::size_t>(i + 1)] + 1, sr_one(),
                        state_of(t + 1, i + 1)});
    }
  auto fin = ids.find({t_sub, n - 1});
  if (fin != ids.end()) f.set_final(fin->second, sr_one());
  f = connect(f);
  sort_arcs(f);
  return f;
}

// ---------------------------------------------------------------------------
// Frame index per state of a frame-synchronous FST (every arc advances one
// frame, so the index is well defined).

inline std::vector<int> state_frames(const Fst& f) {
  std::vector<int> frame(static_cast<std::size_t>(f.num_states()), -1);
  if (f.start() < 0) return frame;
  frame[static_cast<std::size_t>(f.start())] = 0;
  std::vector<int> queue = {f.start()};
  while (!queue.empty()) {
    int s = queue.back();
    queue.pop_back();
    for (const auto& a : f.arcs(s)) {
      int want = frame[static_cast<std::size_t>(s)] + 1;
      int& got = frame[static_cast<std::size_t>(a.next)];
      if (got < 0) {
        got = want;
        queue.push_back(a.next);
      } else if (got != want) {
        throw BadConfig("FST is not frame-synchronous");
      }
    }
  }
  return frame;
}

// ---------------------------------------------------------------------------
// Chunk splitting: cover the utterance with primary-size chunks plus at most
// two alternate-size chunks, preferring the decomposition that wastes the
// fewest frames; the remainder is dropped from the end.

namespace detail {

inline std::vector<int> plan_chunks(int total, int primary,
                                    const std::vector<int>& alternates) {
  std::vector<int> alts = {0};
  alts.insert(alts.end(), alternates.begin(), alternates.end());
  int best_waste = std::numeric_limits<int>::max();
  int best_primaries = -1;
  std::vector<int> best;
  for (int x : alts)
    for (int y : alts) {
      int rem = total - x - y;
      if (rem < 0) continue;
      int a = rem / primary;
      int waste = rem - a * primary;
      int chunks = a + (x > 0) + (y > 0);
      if (chunks == 0) continue;
      if (waste < best_waste || (waste == best_waste && a > best_primaries)) {
        best_waste = waste;
        best_primaries = a;
        best.clear();
        if (x > 0) best.push_back(x);
        best.insert(best.end(), static_cast<std::size_t>(a), primary);
        if (y > 0) best.push_back(y);
      }
    }
  return best;  // empty: utterance too short for any chunk
}

}  // namespace detail

inline std::vector<ChainSupervision> split_supervision(
    const ChainSupervision& full, int primary = 50,
    const std::vector<int>& alternates = {40, 60}) {
  auto sizes = detail::plan_chunks(full.num_frames, primary, alternates);
  if (sizes.empty()) {
    log_info("chain: skipping " + full.utt_id + " (" +
             std::to_string(full.num_frames) + " frames, too short to chunk)");
    return {};
  }
  auto frame = state_frames(full.fst);
  std::vector<ChainSupervision> out;
  int at = 0;
  for (std::size_t ci = 0; ci < sizes.size(); ++ci) {
    int a = at, b = at + sizes[ci];
    at = b;
    ChainSupervision sup;
    sup.utt_id = full.utt_id;
    sup.index = static_cast<int>(ci);
    sup.first_frame = a;
    sup.num_frames = b - a;
    sup.weight = full.weight;
    Fst g(Semiring::kLog);
    int ns = full.fst.num_states();
    std::vector<int> map(static_cast<std::size_t>(ns), -1);
    int st = g.add_state();
    g.set_start(st);
    auto local = [&](int s) {
      int& m = map[static_cast<std::size_t>(s)];
      if (m < 0) m = g.add_state();
      return m;
    };
    for (int s = 0; s < ns; ++s) {
      int t = frame[static_cast<std::size_t>(s)];
      if (t < a || t >= b) continue;
      int src = t == a ? st : local(s);
      for (const auto& arc : full.fst.arcs(s))
        g.add_arc(src, {arc.ilabel, arc.olabel, arc.weight, local(arc.next)});
    }
    for (int s = 0; s < ns; ++s)
      if (frame[static_cast<std::size_t>(s)] == b && map[static_cast<std::size_t>(s)] >= 0)
        g.set_final(map[static_cast<std::size_t>(s)], sr_one());
    g = connect(g);
    sort_arcs(g);
    sup.fst = std::move(g);
    out.push_back(std::move(sup));
  }
  return out;
}

// Compose a supervision with the normalization FST so its paths carry
// denominator-consistent weights.  False means the chunk's phone sequence is
// outside the unsmoothed phone LM and must be discarded.
inline bool compose_with_normalization(ChainSupervision* sup, const Fst& norm) {
  Fst c = compose(sup->fst, norm);
  if (c.num_states() == 0 || c.start() < 0) {
    log_info("chain: discarding " + sup->utt_id + " chunk " +
             std::to_string(sup->index) + " (outside the phone LM)");
    return false;
  }
  c = rm_epsilon(c);
  c = connect(c);
  if (c.num_states() == 0 || c.start() < 0) return false;
  sort_arcs(c);
  sup->fst = std::move(c);
  return true;
}

// ---------------------------------------------------------------------------
// Probability-domain forward-backward with per-frame rescaling.  Exponentiated
// logits (shifted by the per-frame maximum) act as emission scores; the alpha
// sum of every frame is renormalized and its log accumulated, so the recursion
// stays in a safe numeric range without moving to the log domain.

struct FbResult {
  double logprob = 0.0;
  Mat posteriors;  // frames x num_pdfs, rows sum to 1
};

namespace detail {

struct FbArc {
  int next = 0;
  int pdf = 0;
  double prob = 0.0;
};

inline FbResult prob_forward_backward(const Fst& f, const Vec& init,
                                      const Vec& leak_init, double leaky,
                                      const Mat& logits, int num_pdfs) {
  const int big_t = static_cast<int>(logits.rows());
  const int n = f.num_states();
  if (big_t < 1) throw BadConfig("forward-backward needs at least one frame");
  if (static_cast<int>(init.size()) != n)
    throw BadConfig("initial distribution does not match the graph");

  std::vector<std::vector<FbArc>> arcs(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s)
    for (const auto& a : f.arcs(s)) {
      if (a.ilabel < 1 || a.ilabel > num_pdfs)
        throw BadConfig("graph label " + std::to_string(a.ilabel) +
                        " outside [1, num_pdfs]");
      arcs[static_cast<std::size_t>(s)].push_back(
          {a.next, a.ilabel - 1, std::exp(-a.weight)});
    }

  Vec shift(big_t);
  Mat emis(big_t, num_pdfs);
  for (int t = 0; t < big_t; ++t) {
    shift[t] = logits.row(t).maxCoeff();
    emis.row(t) = (logits.row(t).array() - shift[t]).exp().matrix();
  }

  Mat alpha(big_t + 1, n);
  alpha.row(0) = init.transpose();
  Vec scale(big_t);
  Vec hat(n), raw(n);
  for (int t = 0; t < big_t; ++t) {
    hat = alpha.row(t).transpose();
    if (leaky > 0.0) hat += leaky * alpha.row(t).sum() * leak_init;
    raw.setZero();
    for (int s = 0; s < n; ++s) {
      double v = hat[s];
      if (v == 0.0) continue;
      for (const auto& a : arcs[static_cast<std::size_t>(s)])
        raw[a.next] += v * a.prob * emis(t, a.pdf);
    }
    double c = raw.sum();
    if (!(c > 0.0) || !std::isfinite(c))
      throw NumericalFailure("alpha sum underflowed at frame " + std::to_string(t));
    scale[t] = c;
    alpha.row(t + 1) = (raw / c).transpose();
  }

  Vec fvec(n);
  for (int s = 0; s < n; ++s) fvec[s] = std::exp(-f.final_weight(s));
  double total = alpha.row(big_t).dot(fvec);
  if (!(total > 0.0) || !std::isfinite(total))
    throw NumericalFailure("no successful path in forward-backward");

  FbResult out;
  out.logprob = std::log(total) + scale.array().log().sum() + shift.sum();
  out.posteriors = Mat::Zero(big_t, num_pdfs);
  Vec beta = fvec, tmp(n);
  for (int t = big_t - 1; t >= 0; --t) {
    hat = alpha.row(t).transpose();
    if (leaky > 0.0) hat += leaky * alpha.row(t).sum() * leak_init;
    const double norm = scale[t] * total;
    tmp.setZero();
    for (int s = 0; s < n; ++s) {
      double v = hat[s];
      for (const auto& a : arcs[static_cast<std::size_t>(s)]) {
        double contrib = a.prob * emis(t, a.pdf) * beta[a.next];
        tmp[s] += contrib;
        if (v != 0.0) out.posteriors(t, a.pdf) += v * contrib / norm;
      }
    }
    if (leaky > 0.0) {
      double dot = leak_init.dot(tmp);  // adjoint of the leak step
      tmp.array() += leaky * dot;
    }
    beta = tmp / scale[t];
  }
  return out;
}

}  // namespace detail

inline FbResult denominator_forward_backward(const DenominatorGraph& den,
                                             const Mat& logits,
                                             double leaky = 1e-5) {
  if (static_cast<int>(logits.cols()) != den.num_pdfs)
    throw BadConfig("logit dimension does not match the denominator graph");
  Vec init(den.fst.num_states());
  for (int s = 0; s < den.fst.num_states(); ++s)
    init[s] = den.initial_probs[static_cast<std::size_t>(s)];
  return detail::prob_forward_backward(den.fst, init, init, leaky, logits,
                                       den.num_pdfs);
}

inline FbResult numerator_forward_backward(const ChainSupervision& sup,
                                           const Mat& logits) {
  if (sup.fst.start() < 0 || sup.fst.num_states() == 0)
    throw DiscardChunk("empty numerator for " + sup.utt_id);
  if (static_cast<int>(logits.rows()) != sup.num_frames)
    throw BadConfig("logit frames do not match the supervision");
  Vec init = Vec::Zero(sup.fst.num_states());
  init[sup.fst.start()] = 1.0;
  return detail::prob_forward_backward(sup.fst, init, Vec(), 0.0, logits,
                                       static_cast<int>(logits.cols()));
}

// ---------------------------------------------------------------------------
// The LF-MMI objective: per-frame (numerator - denominator) log-probability,
// clamped; its gradient is the scaled posterior difference.

struct ChainObjective {
  double objf = 0.0;      // clamped, per frame
  double raw_objf = 0.0;  // before clamping
  bool clamped = false;
  Mat grad;          // d objf / d logits
  Mat xent_targets;  // numerator posteriors, targets for the auxiliary head
};

inline ChainObjective chain_objective_and_grad(const ChainSupervision& sup,
                                               const DenominatorGraph& den,
                                               const Mat& logits,
                                               double leaky = 1e-5) {
  constexpr double kClampLo = -30.0, kClampHi = 30.0;
  // the denominator runs first; its posteriors are on hand before the
  // (cheaper) numerator pass
  FbResult d = denominator_forward_backward(den, logits, leaky);
  FbResult nu = numerator_forward_backward(sup, logits);
  ChainObjective out;
  const double frames = static_cast<double>(sup.num_frames);
  out.raw_objf = (nu.logprob - d.logprob) / frames;
  out.objf = std::clamp(out.raw_objf, kClampLo, kClampHi);
  out.clamped = out.objf != out.raw_objf;
  if (out.clamped)
    log_warn("chain objective clamped for " + sup.utt_id + " chunk " +
             std::to_string(sup.index) + ": " + std::to_string(out.raw_objf));
  out.grad = (nu.posteriors - d.posteriors) / frames;
  out.xent_targets = std::move(nu.posteriors);
  return out;
}

// ---------------------------------------------------------------------------
// TDNN: optional 2-D convolution front-end over (time x mel bin), then a
// stack of spliced affine layers with ReLU + batch-norm, one of which strides
// by the subsampling factor; two affine heads (chain and cross-entropy).

constexpr double kBnEpsilon = 1e-5;

struct ConvLayer {
  int in_c = 1, out_c = 16;
  int kt = 3, kf = 3;  // kernel extents, kt odd
  Mat w;               // out_c x (in_c * kt * kf)
  Vec b;
};

struct TdnnLayer {
  std::vector<int> offsets{-1, 0, 1};  // in units of this layer's input
  int stride = 1;
  Mat w;  // out_dim x (in_dim * offsets.size())
  Vec b;
  // pooled statistics of the batch-norm input, filled after training
  Vec bn_sum, bn_sumsq;
  double bn_count = 0.0;
};

struct TdnnNet {
  int in_dim = 0;
  int num_pdfs = 0;
  std::vector<ConvLayer> conv;
  std::vector<TdnnLayer> layers;
  Mat out_w;
  Vec out_b;
  Mat xent_w;
  Vec xent_b;

  int left_context() const {
    int ctx = 0, factor = 1;
    for (const auto& c : conv) ctx += (c.kt - 1) / 2;
    for (const auto& l : layers) {
      ctx += -l.offsets.front() * factor;
      factor *= l.stride;
    }
    return ctx;
  }
  int right_context() const {
    int ctx = 0, factor = 1;
    for (const auto& c : conv) ctx += (c.kt - 1) / 2;
    for (const auto& l : layers) {
      ctx += l.offsets.back() * factor;
      factor *= l.stride;
    }
    return ctx;
  }
  int subsample_factor() const {
    int q = 1;
    for (const auto& l : layers) q *= l.stride;
    return q;
  }
  int output_len(int t) const {
    for (const auto& c : conv) t -= c.kt - 1;
    for (const auto& l : layers) {
      t -= l.offsets.back() - l.offsets.front();
      if (t <= 0) return 0;
      if (l.stride > 1) t = (t + l.stride - 1) / l.stride;
    }
    return std::max(t, 0);
  }
};

struct TdnnSpec {
  int conv_layers = 0;  // optional front-end
  int conv_filters = 16;
  int conv_kt = 3, conv_kf = 3;
  int hidden_dim = 256;
  int tdnn_layers = 5;
  int subsample_layer = 3;  // 1-based position of the striding layer
  int subsample = 3;
};

inline TdnnNet make_tdnn(int in_dim, int num_pdfs, const TdnnSpec& spec = {},
                         std::uint64_t seed = 0) {
  if (in_dim < 1 || num_pdfs < 1) throw BadConfig("make_tdnn: bad dimensions");
  if (spec.tdnn_layers < 1 || spec.subsample_layer < 1 ||
      spec.subsample_layer > spec.tdnn_layers)
    throw BadConfig("make_tdnn: bad layer counts");
  if (spec.conv_kt % 2 == 0) throw BadConfig("make_tdnn: conv time kernel must be odd");
  Rng rng(seed, "tdnn-init");
  auto fill = [&](Mat& w, int rows, int cols) {
    w.resize(rows, cols);
    double s = 1.0 / std::sqrt(static_cast<double>(cols));
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) w(i, j) = rng.gauss(0.0, s);
  };
  TdnnNet net;
  net.in_dim = in_dim;
  net.num_pdfs = num_pdfs;
  int c = 1, f = in_dim;
  for (int i = 0; i < spec.conv_layers; ++i) {
    ConvLayer cl;
    cl.in_c = c;
    cl.out_c = spec.conv_filters;
    cl.kt = spec.conv_kt;
    cl.kf = spec.conv_kf;
    if (f < cl.kf) throw BadConfig("make_tdnn: too few bins for the conv kernel");
    fill(cl.w, cl.out_c, cl.in_c * cl.kt * cl.kf);
    cl.b = Vec::Zero(cl.out_c);
    net.conv.push_back(std::move(cl));
    c = spec.conv_filters;
    f = f - spec.conv_kf + 1;
  }
  int cur = c * f;
  for (int i = 0; i < spec.tdnn_layers; ++i) {
    TdnnLayer l;
    l.offsets = {-1, 0, 1};
    l.stride = (i + 1 == spec.subsample_layer) ? spec.subsample : 1;
    fill(l.w, spec.hidden_dim, cur * static_cast<int>(l.offsets.size()));
    l.b = Vec::Zero(spec.hidden_dim);
    l.bn_sum = Vec::Zero(spec.hidden_dim);
    l.bn_sumsq = Vec::Zero(spec.hidden_dim);
    net.layers.push_back(std::move(l));
    cur = spec.hidden_dim;
  }
  fill(net.out_w, num_pdfs, cur);
  net.out_b = Vec::Zero(num_pdfs);
  fill(net.xent_w, num_pdfs, cur);
  net.xent_b = Vec::Zero(num_pdfs);
  return net;
}

struct ConvCache {
  Mat input;
  Mat lin;
};
struct LayerCache {
  Mat spliced;
  Mat lin;
  Mat xhat;
  Eigen::RowVectorXd inv_std;
  int in_rows = 0;
};
struct TdnnActivations {
  std::vector<ConvCache> conv;
  std::vector<LayerCache> layers;
  Mat hidden;
  Mat logits;
  Mat xent_logits;
};

// Forward pass.  Train mode normalizes with the statistics of the chunk at
// hand (and caches everything the backward pass needs); inference mode uses
// the pooled statistics, falling back to identity when none were collected.
inline Mat tdnn_forward(const TdnnNet& net, const Mat& input, bool train = false,
                        TdnnActivations* acts = nullptr) {
  if (static_cast<int>(input.cols()) != net.in_dim)
    throw BadConfig("tdnn_forward: input dimension mismatch");
  int min_t = net.left_context() + net.right_context() + 1;
  if (static_cast<int>(input.rows()) < min_t)
    throw InputTooShort("need " + std::to_string(min_t) + " frames, got " +
                        std::to_string(input.rows()));
  if (acts) {
    acts->conv.clear();
    acts->layers.clear();
  }
  Mat x = input;
  int bins = net.in_dim;
  for (const auto& cl : net.conv) {
    int rows = static_cast<int>(x.rows()) - (cl.kt - 1);
    int obins = bins - cl.kf + 1;
    Mat lin(rows, cl.out_c * obins);
    for (int t = 0; t < rows; ++t)
      for (int oc = 0; oc < cl.out_c; ++oc)
        for (int of = 0; of < obins; ++of) {
          double acc = cl.b[oc];
          for (int ic = 0; ic < cl.in_c; ++ic)
            for (int dt = 0; dt < cl.kt; ++dt)
              for (int df = 0; df < cl.kf; ++df)
                acc += cl.w(oc, (ic * cl.kt + dt) * cl.kf + df) *
                       x(t + dt, ic * bins + of + df);
          lin(t, oc * obins + of) = acc;
        }
    if (acts) acts->conv.push_back({x, lin});
    x = lin.cwiseMax(0.0);
    bins = obins;
  }
  for (const auto& l : net.layers) {
    int d = static_cast<int>(l.w.cols()) / static_cast<int>(l.offsets.size());
    int span = l.offsets.back() - l.offsets.front();
    int valid = static_cast<int>(x.rows()) - span;
    int rows = l.stride > 1 ? (valid + l.stride - 1) / l.stride : valid;
    Mat spliced(rows, l.w.cols());
    for (int j = 0; j < rows; ++j)
      for (std::size_t k = 0; k < l.offsets.size(); ++k)
        spliced.block(j, static_cast<int>(k) * d, 1, d) =
            x.row(j * l.stride + l.offsets[k] - l.offsets.front());
    Mat lin = spliced * l.w.transpose();
    lin.rowwise() += l.b.transpose();
    Mat r = lin.cwiseMax(0.0);
    Mat y;
    Eigen::RowVectorXd inv_std;
    if (train) {
      Eigen::RowVectorXd mu = r.colwise().mean();
      Eigen::RowVectorXd var =
          (r.rowwise() - mu).array().square().colwise().mean().matrix();
      inv_std = (var.array() + kBnEpsilon).sqrt().inverse().matrix();
      y = ((r.rowwise() - mu).array().rowwise() * inv_std.array()).matrix();
    } else if (l.bn_count > 0.0) {
      Eigen::RowVectorXd mu = (l.bn_sum / l.bn_count).transpose();
      Eigen::RowVectorXd var =
          ((l.bn_sumsq / l.bn_count).transpose().array() - mu.array().square())
              .matrix();
      Eigen::RowVectorXd is =
          (var.array().max(0.0) + kBnEpsilon).sqrt().inverse().matrix();
      y = ((r.rowwise() - mu).array().rowwise() * is.array()).matrix();
    } else {
      y = r;
    }
    if (acts)
      acts->layers.push_back(
          {std::move(spliced), std::move(lin), y, inv_std,
           static_cast<int>(x.rows())});
    x = std::move(y);
  }
  Mat logits = x * net.out_w.transpose();
  logits.rowwise() += net.out_b.transpose();
  if (acts) {
    acts->hidden = x;
    acts->xent_logits = x * net.xent_w.transpose();
    acts->xent_logits.rowwise() += net.xent_b.transpose();
    acts->logits = logits;
  }
  return logits;
}

struct TdnnGrads {
  std::vector<Mat> conv_w;
  std::vector<Vec> conv_b;
  std::vector<Mat> w;
  std::vector<Vec> b;
  Mat out_w;
  Vec out_b;
  Mat xent_w;
  Vec xent_b;

  void init(const TdnnNet& net) {
    conv_w.clear();
    conv_b.clear();
    w.clear();
    b.clear();
    for (const auto& c : net.conv) {
      conv_w.push_back(Mat::Zero(c.w.rows(), c.w.cols()));
      conv_b.push_back(Vec::Zero(c.b.size()));
    }
    for (const auto& l : net.layers) {
      w.push_back(Mat::Zero(l.w.rows(), l.w.cols()));
      b.push_back(Vec::Zero(l.b.size()));
    }
    out_w = Mat::Zero(net.out_w.rows(), net.out_w.cols());
    out_b = Vec::Zero(net.out_b.size());
    xent_w = Mat::Zero(net.xent_w.rows(), net.xent_w.cols());
    xent_b = Vec::Zero(net.xent_b.size());
  }
  void add(const TdnnGrads& o) {
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      conv_w[i] += o.conv_w[i];
      conv_b[i] += o.conv_b[i];
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] += o.w[i];
      b[i] += o.b[i];
    }
    out_w += o.out_w;
    out_b += o.out_b;
    xent_w += o.xent_w;
    xent_b += o.xent_b;
  }
  void scale(double a) {
    for (auto& m : conv_w) m *= a;
    for (auto& v : conv_b) v *= a;
    for (auto& m : w) m *= a;
    for (auto& v : b) v *= a;
    out_w *= a;
    out_b *= a;
    xent_w *= a;
    xent_b *= a;
  }
  double squared_norm() const {
    double s = 0.0;
    for (const auto& m : conv_w) s += m.squaredNorm();
    for (const auto& v : conv_b) s += v.squaredNorm();
    for (const auto& m : w) s += m.squaredNorm();
    for (const auto& v : b) s += v.squaredNorm();
    s += out_w.squaredNorm() + out_b.squaredNorm();
    s += xent_w.squaredNorm() + xent_b.squaredNorm();
    return s;
  }
};

// Exact gradients of the train-mode forward map; accumulates into *g.
inline void tdnn_backward(const TdnnNet& net, const TdnnActivations& acts,
                          const Mat& dlogits, const Mat& dxent, TdnnGrads* g) {
  g->out_w += dlogits.transpose() * acts.hidden;
  g->out_b += dlogits.colwise().sum().transpose();
  Mat dx = dlogits * net.out_w;
  if (dxent.size() > 0) {
    g->xent_w += dxent.transpose() * acts.hidden;
    g->xent_b += dxent.colwise().sum().transpose();
    dx += dxent * net.xent_w;
  }
  for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
    const TdnnLayer& l = net.layers[static_cast<std::size_t>(li)];
    const LayerCache& cache = acts.layers[static_cast<std::size_t>(li)];
    // batch-norm backward through the chunk statistics
    Eigen::RowVectorXd m_dy = dx.colwise().mean();
    Eigen::RowVectorXd m_dyx =
        (dx.array() * cache.xhat.array()).colwise().mean().matrix();
    Mat dr = (((dx.rowwise() - m_dy).array() -
               cache.xhat.array().rowwise() * m_dyx.array())
                  .rowwise() *
              cache.inv_std.array())
                 .matrix();
    Mat dlin = ((cache.lin.array() > 0.0).cast<double>() * dr.array()).matrix();
    g->w[static_cast<std::size_t>(li)] += dlin.transpose() * cache.spliced;
    g->b[static_cast<std::size_t>(li)] += dlin.colwise().sum().transpose();
    Mat dspliced = dlin * l.w;
    int d = static_cast<int>(l.w.cols()) / static_cast<int>(l.offsets.size());
    Mat prev = Mat::Zero(cache.in_rows, d);
    for (int j = 0; j < static_cast<int>(dspliced.rows()); ++j)
      for (std::size_t k = 0; k < l.offsets.size(); ++k)
        prev.row(j * l.stride + l.offsets[k] - l.offsets.front()) +=
            dspliced.block(j, static_cast<int>(k) * d, 1, d);
    dx = std::move(prev);
  }
  int bins = net.in_dim;
  std::vector<int> bin_hist;  // input bins of each conv layer
  for (const auto& cl : net.conv) {
    bin_hist.push_back(bins);
    bins = bins - cl.kf + 1;
  }
  for (int ci = static_cast<int>(net.conv.size()) - 1; ci >= 0; --ci) {
    const ConvLayer& cl = net.conv[static_cast<std::size_t>(ci)];
    const ConvCache& cache = acts.conv[static_cast<std::size_t>(ci)];
    int ibins = bin_hist[static_cast<std::size_t>(ci)];
    int obins = ibins - cl.kf + 1;
    Mat dlin = ((cache.lin.array() > 0.0).cast<double>() * dx.array()).matrix();
    Mat dprev = Mat::Zero(cache.input.rows(), cache.input.cols());
    Mat& dw = g->conv_w[static_cast<std::size_t>(ci)];
    Vec& db = g->conv_b[static_cast<std::size_t>(ci)];
    for (int t = 0; t < static_cast<int>(dlin.rows()); ++t)
      for (int oc = 0; oc < cl.out_c; ++oc)
        for (int of = 0; of < obins; ++of) {
          double gval = dlin(t, oc * obins + of);
          if (gval == 0.0) continue;
          db[oc] += gval;
          for (int ic = 0; ic < cl.in_c; ++ic)
            for (int dt = 0; dt < cl.kt; ++dt)
              for (int df = 0; df < cl.kf; ++df) {
                dw(oc, (ic * cl.kt + dt) * cl.kf + df) +=
                    gval * cache.input(t + dt, ic * ibins + of + df);
                dprev(t + dt, ic * ibins + of + df) +=
                    gval * cl.w(oc, (ic * cl.kt + dt) * cl.kf + df);
              }
        }
    dx = std::move(dprev);
  }
}

inline void apply_update(TdnnNet* net, const TdnnGrads& g, double factor) {
  for (std::size_t i = 0; i < net->conv.size(); ++i) {
    net->conv[i].w -= factor * g.conv_w[i];
    net->conv[i].b -= factor * g.conv_b[i];
  }
  for (std::size_t i = 0; i < net->layers.size(); ++i) {
    net->layers[i].w -= factor * g.w[i];
    net->layers[i].b -= factor * g.b[i];
  }
  net->out_w -= factor * g.out_w;
  net->out_b -= factor * g.out_b;
  net->xent_w -= factor * g.xent_w;
  net->xent_b -= factor * g.xent_b;
}

// ---------------------------------------------------------------------------
// Network serialization: parameters as 32-bit floats, batch-norm statistics
// as doubles.

namespace detail {

inline void write_f32_mat(std::ostream& os, const Mat& m) {
  write_pod<std::int32_t>(os, static_cast<std::int32_t>(m.rows()));
  write_pod<std::int32_t>(os, static_cast<std::int32_t>(m.cols()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      write_pod<float>(os, static_cast<float>(m(i, j)));
}
inline Mat read_f32_mat(std::istream& is) {
  auto r = read_pod<std::int32_t>(is);
  auto c = read_pod<std::int32_t>(is);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = read_pod<float>(is);
  return m;
}
inline void write_f32_vec(std::ostream& os, const Vec& v) {
  write_pod<std::int32_t>(os, static_cast<std::int32_t>(v.size()));
  for (int i = 0; i < v.size(); ++i) write_pod<float>(os, static_cast<float>(v[i]));
}
inline Vec read_f32_vec(std::istream& is) {
  auto n = read_pod<std::int32_t>(is);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = read_pod<float>(is);
  return v;
}
inline void write_f64_vec(std::ostream& os, const Vec& v) {
  write_pod<std::int32_t>(os, static_cast<std::int32_t>(v.size()));
  for (int i = 0; i < v.size(); ++i) write_pod<double>(os, v[i]);
}
inline Vec read_f64_vec(std::istream& is) {
  auto n = read_pod<std::int32_t>(is);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = read_pod<double>(is);
  return v;
}

}  // namespace detail

inline void write_tdnn(const TdnnNet& net, std::ostream& os) {
  os.write("TDNN", 4);
  write_pod<std::uint8_t>(os, 1);
  write_pod<std::int32_t>(os, net.in_dim);
  write_pod<std::int32_t>(os, net.num_pdfs);
  write_pod<std::int32_t>(os, static_cast<std::int32_t>(net.conv.size()));
  for (const auto& c : net.conv) {
    write_pod<std::int32_t>(os, c.in_c);
    write_pod<std::int32_t>(os, c.out_c);
    write_pod<std::int32_t>(os, c.kt);
    write_pod<std::int32_t>(os, c.kf);
    detail::write_f32_mat(os, c.w);
    detail::write_f32_vec(os, c.b);
  }
  write_pod<std::int32_t>(os, static_cast<std::int32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    write_pod<std::int32_t>(os, static_cast<std::int32_t>(l.offsets.size()));
    for (int o : l.offsets) write_pod<std::int32_t>(os, o);
    write_pod<std::int32_t>(os, l.stride);
    detail::write_f32_mat(os, l.w);
    detail::write_f32_vec(os, l.b);
    write_pod<double>(os, l.bn_count);
    detail::write_f64_vec(os, l.bn_sum);
    detail::write_f64_vec(os, l.bn_sumsq);
  }
  detail::write_f32_mat(os, net.out_w);
  detail::write_f32_vec(os, net.out_b);
  detail::write_f32_mat(os, net.xent_w);
  detail::write_f32_vec(os, net.xent_b);
}

inline TdnnNet read_tdnn(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (std::string(magic, 4) != "TDNN") throw IoError("bad network file");
  if (read_pod<std::uint8_t>(is) != 1) throw IoError("bad network version");
  TdnnNet net;
  net.in_dim = read_pod<std::int32_t>(is);
  net.num_pdfs = read_pod<std::int32_t>(is);
  auto nc = read_pod<std::int32_t>(is);
  for (int i = 0; i < nc; ++i) {
    ConvLayer c;
    c.in_c = read_pod<std::int32_t>(is);
    c.out_c = read_pod<std::int32_t>(is);
    c.kt = read_pod<std::int32_t>(is);
    c.kf = read_pod<std::int32_t>(is);
    c.w = detail::read_f32_mat(is);
    c.b = detail::read_f32_vec(is);
    net.conv.push_back(std::move(c));
  }
  auto nl = read_pod<std::int32_t>(is);
  for (int i = 0; i < nl; ++i) {
    TdnnLayer l;
    auto k = read_pod<std::int32_t>(is);
    l.offsets.resize(static_cast<std::size_t>(k));
    for (auto& o : l.offsets) o = read_pod<std::int32_t>(is);
    l.stride = read_pod<std::int32_t>(is);
    l.w = detail::read_f32_mat(is);
    l.b = detail::read_f32_vec(is);
    l.bn_count = read_pod<double>(is);
    l.bn_sum = detail::read_f64_vec(is);
    l.bn_sumsq = detail::read_f64_vec(is);
    net.layers.push_back(std::move(l));
  }
  net.out_w = detail::read_f32_mat(is);
  net.out_b = detail::read_f32_vec(is);
  net.xent_w = detail::read_f32_mat(is);
  net.xent_b = detail::read_f32_vec(is);
  if (!is) throw IoError("truncated network file");
  return net;
}

// ---------------------------------------------------------------------------
// Training.

struct ChainConfig {
  int frame_subsample = 3;
  int chunk_frames = 50;  // output frames per primary chunk
  std::vector<int> alt_chunks = {40, 60};
  int tolerance = 2;  // ~0.05 s at the subsampled rate
  double leaky = 1e-5;
  double l2_out = 5e-4;
  double xent_scale = 0.1;
  int minibatch = 64;
  int epochs = 10;
  double lr_init = 0.00015;
  double lr_final = 0.00015;
  double max_change = 2.0;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct EpochStats {
  int epoch = 0;
  double objf = 0.0;
  double xent = 0.0;
  double clamp_rate = 0.0;
};

struct ChainTrainResult {
  TdnnNet net;
  std::vector<EpochStats> log;
};

inline void write_train_log(const std::filesystem::path& path,
                            const std::vector<EpochStats>& log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& e : log)
    os << "epoch " << e.epoch << " objf " << e.objf << " xent " << e.xent
       << " clamp_rate " << e.clamp_rate << "\n";
}

// Extract the input rows feeding a chunk's network outputs, replicating edge
// frames where the context reaches past the utterance.
inline Mat chunk_input(const Mat& utt, int first_frame, int num_frames,
                       int left, int right, int subsample = 3) {
  if (utt.rows() < 1) throw InputTooShort("empty utterance");
  int need = subsample * (num_frames - 1) + left + right + 1;
  int base = subsample * first_frame - left;
  Mat out(need, utt.cols());
  for (int i = 0; i < need; ++i) {
    int r = std::clamp<int>(base + i, 0, static_cast<int>(utt.rows()) - 1);
    out.row(i) = utt.row(r);
  }
  return out;
}

// Pool batch-norm input statistics over the training inputs so inference can
// normalize without a batch.
inline void accumulate_bn_stats(TdnnNet* net, const std::vector<Mat>& inputs) {
  for (auto& l : net->layers) {
    l.bn_sum.setZero();
    l.bn_sumsq.setZero();
    l.bn_count = 0.0;
  }
  TdnnActivations acts;
  for (const auto& x : inputs) {
    tdnn_forward(*net, x, /*train=*/true, &acts);
    for (std::size_t i = 0; i < net->layers.size(); ++i) {
      Mat r = acts.layers[i].lin.cwiseMax(0.0);
      net->layers[i].bn_sum += r.colwise().sum().transpose();
      net->layers[i].bn_sumsq +=
          r.array().square().colwise().sum().matrix().transpose();
      net->layers[i].bn_count += static_cast<double>(r.rows());
    }
  }
}

inline ChainTrainResult train_chain(const std::vector<Mat>& inputs,
                                    const DenominatorGraph& den,
                                    const std::vector<ChainSupervision>& sups,
                                    const TdnnNet& net0,
                                    const ChainConfig& cfg = {}) {
  if (sups.empty()) throw EmptyData("train_chain: no supervision chunks");
  if (inputs.size() != sups.size())
    throw BadConfig("train_chain: input/supervision count mismatch");
  ChainTrainResult res;
  res.net = net0;
  const std::size_t n = sups.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr_init;
    if (cfg.epochs > 1 && cfg.lr_final != cfg.lr_init)
      lr = cfg.lr_init * std::pow(cfg.lr_final / cfg.lr_init,
                                  static_cast<double>(epoch) / (cfg.epochs - 1));
    Rng shuffle_rng(cfg.seed, "chain-epoch-" + std::to_string(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

    double sum_objf = 0.0, sum_xent = 0.0;
    std::size_t clamped_chunks = 0, clamped_batches = 0, batches = 0;
    for (std::size_t mb = 0; mb < n; mb += static_cast<std::size_t>(cfg.minibatch)) {
      std::size_t bsz = std::min<std::size_t>(static_cast<std::size_t>(cfg.minibatch),
                                              n - mb);
      // one accumulator per residue class: parallel_for assigns index i to
      // thread i % nthreads, so each slot stays single-writer
      int nsl = (cfg.jobs <= 1 || bsz <= 1)
                    ? 1
                    : static_cast<int>(std::min<std::size_t>(
                          static_cast<std::size_t>(cfg.jobs), bsz));
      std::vector<TdnnGrads> grads(static_cast<std::size_t>(nsl));
      for (auto& g : grads) g.init(res.net);
      std::vector<double> s_objf(static_cast<std::size_t>(nsl), 0.0);
      std::vector<double> s_xent(static_cast<std::size_t>(nsl), 0.0);
      std::vector<std::size_t> s_clamp(static_cast<std::size_t>(nsl), 0);
      parallel_for(bsz, cfg.jobs, [&](std::size_t bi) {
        std::size_t slot = bi % static_cast<std::size_t>(nsl);
        std::size_t ci = order[mb + bi];
        const ChainSupervision& sup = sups[ci];
        TdnnActivations acts;
        Mat logits = tdnn_forward(res.net, inputs[ci], /*train=*/true, &acts);
        if (static_cast<int>(logits.rows()) != sup.num_frames)
          throw BadConfig("train_chain: chunk " + sup.utt_id + "." +
                          std::to_string(sup.index) + " produced " +
                          std::to_string(logits.rows()) + " frames, expected " +
                          std::to_string(sup.num_frames));
        auto obj = chain_objective_and_grad(sup, den, logits, cfg.leaky);
        const double tp = static_cast<double>(logits.rows()) *
                          static_cast<double>(logits.cols());
        Mat dlogits =
            sup.weight * (-obj.grad + (2.0 * cfg.l2_out / tp) * logits);
        // softmax over the auxiliary head; targets come from the numerator
        Mat sm = acts.xent_logits;
        double xent = 0.0;
        for (int t = 0; t < sm.rows(); ++t) {
          double mx = sm.row(t).maxCoeff();
          Eigen::RowVectorXd e = (sm.row(t).array() - mx).exp().matrix();
          double z = e.sum();
          sm.row(t) = e / z;
          for (int p = 0; p < sm.cols(); ++p)
            if (obj.xent_targets(t, p) > 0.0)
              xent += obj.xent_targets(t, p) *
                      (acts.xent_logits(t, p) - mx - std::log(z));
        }
        xent /= static_cast<double>(sm.rows());
        Mat dxent = sup.weight * (-cfg.xent_scale / sm.rows()) *
                    (obj.xent_targets - sm);
        tdnn_backward(res.net, acts, dlogits, dxent, &grads[slot]);
        s_objf[slot] += obj.objf;
        s_xent[slot] += xent;
        if (obj.clamped) ++s_clamp[slot];
      });
      TdnnGrads& total = grads[0];
      for (int s = 1; s < nsl; ++s) total.add(grads[static_cast<std::size_t>(s)]);
      std::size_t batch_clamps = 0;
      for (int s = 0; s < nsl; ++s) {
        sum_objf += s_objf[static_cast<std::size_t>(s)];
        sum_xent += s_xent[static_cast<std::size_t>(s)];
        batch_clamps += s_clamp[static_cast<std::size_t>(s)];
      }
      clamped_chunks += batch_clamps;
      ++batches;
      if (batch_clamps > 0) ++clamped_batches;
      total.scale(1.0 / static_cast<double>(bsz));
      double step = lr * std::sqrt(total.squared_norm());
      double factor = lr;
      if (step > cfg.max_change) factor = lr * (cfg.max_change / step);
      apply_update(&res.net, total, factor);
    }
    EpochStats st;
    st.epoch = epoch;
    st.objf = sum_objf / static_cast<double>(n);
    st.xent = sum_xent / static_cast<double>(n);
    st.clamp_rate = static_cast<double>(clamped_chunks) / static_cast<double>(n);
    res.log.push_back(st);
    log_info("chain epoch " + std::to_string(epoch) + " objf " +
             std::to_string(st.objf) + " xent " + std::to_string(st.xent) +
             " clamp_rate " + std::to_string(st.clamp_rate));
    if (batches > 0 && clamped_batches * 2 > batches)
      throw Diverged("chain objective clamped in " +
                     std::to_string(clamped_batches) + " of " +
                     std::to_string(batches) + " minibatches");
  }
  accumulate_bn_stats(&res.net, inputs);
  return res;
}

}  // namespace asrkit
