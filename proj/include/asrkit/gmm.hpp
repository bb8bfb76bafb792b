// asrkit/gmm.hpp
//
// Copyright 2026 The asrkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Diagonal-covariance GMM acoustic models and Viterbi training: flat start,
// forced alignment, hard-count EM, mixture growth, phonetic decision trees
// and the monophone -> delta-triphone training ladder.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "asrkit/common.hpp"
#include "asrkit/feats.hpp"
#include "asrkit/graph.hpp"
#include "asrkit/lexlm.hpp"

namespace asrkit {

ASRKIT_ERROR(EmptyData);
ASRKIT_ERROR(AlignmentFailed);
ASRKIT_ERROR(InsufficientData);

// ---------------------------------------------------------------------------
// Diagonal-covariance Gaussian mixture.

class DiagGmm {
 public:
  DiagGmm() = default;
  DiagGmm(int num_comp, int dim)
      : weights(Vec::Constant(num_comp, 1.0 / num_comp)),
        means(Mat::Zero(num_comp, dim)),
        inv_vars(Mat::Ones(num_comp, dim)) {
    compute_gconsts();
  }

  Vec weights;   // K, simplex
  Mat means;     // K x D
  Mat inv_vars;  // K x D, strictly positive

  int num_comp() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }

  // call after mutating any parameter
  void compute_gconsts() {
    const int k = num_comp(), d = dim();
    gconsts_.resize(k);
    for (int i = 0; i < k; ++i) {
      double lw = weights[i] > 0.0 ? std::log(weights[i])
                                   : -std::numeric_limits<double>::infinity();
      gconsts_[i] = lw - 0.5 * (d * std::log(2.0 * M_PI) -
                                inv_vars.row(i).array().log().sum());
    }
  }

  // per-component log w_k N(x; mu_k, sigma_k)
  Vec component_log_likes(const Eigen::RowVectorXd& x) const {
    Vec out(num_comp());
    for (int i = 0; i < num_comp(); ++i) {
      double q =
          ((x - means.row(i)).array().square() * inv_vars.row(i).array()).sum();
      out[i] = gconsts_[i] - 0.5 * q;
    }
    return out;
  }

  double log_likelihood(const Eigen::RowVectorXd& x) const {
    Vec ll = component_log_likes(x);
    double total = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < num_comp(); ++i) total = log_add(total, ll[i]);
    return total;
  }

  // softmax of the component log-likes; returns the total log-like
  double component_posteriors(const Eigen::RowVectorXd& x, Vec* post) const {
    Vec ll = component_log_likes(x);
    double total = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < num_comp(); ++i) total = log_add(total, ll[i]);
    post->resize(num_comp());
    for (int i = 0; i < num_comp(); ++i) (*post)[i] = std::exp(ll[i] - total);
    return total;
  }

  void validate() const {
    if (num_comp() == 0) throw BadConfig("gmm: no components");
    if (std::abs(weights.sum() - 1.0) > 1e-9)
      throw BadConfig("gmm: weights sum to " + std::to_string(weights.sum()));
    if ((inv_vars.array() <= 0.0).any())
      throw BadConfig("gmm: non-positive inverse variance");
  }

  void write(std::ostream& os) const {
    write_pod<std::int32_t>(os, num_comp());
    write_pod<std::int32_t>(os, dim());
    for (int i = 0; i < num_comp(); ++i) write_pod<double>(os, weights[i]);
    for (int i = 0; i < num_comp(); ++i)
      for (int j = 0; j < dim(); ++j) write_pod<double>(os, means(i, j));
    for (int i = 0; i < num_comp(); ++i)
      for (int j = 0; j < dim(); ++j) write_pod<double>(os, inv_vars(i, j));
  }

  static DiagGmm read(std::istream& is) {
    auto k = read_pod<std::int32_t>(is);
    auto d = read_pod<std::int32_t>(is);
    DiagGmm g(k, d);
    for (int i = 0; i < k; ++i) g.weights[i] = read_pod<double>(is);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < d; ++j) g.means(i, j) = read_pod<double>(is);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < d; ++j) g.inv_vars(i, j) = read_pod<double>(is);
    g.compute_gconsts();
    return g;
  }

 private:
  Vec gconsts_;
};

// ---------------------------------------------------------------------------
// Acoustic model: one DiagGmm per pdf.

struct AmGmm {
  int dim = 0;
  Vec var_floor;  // per dimension, fixed at flat start
  std::vector<DiagGmm> pdfs;
  // per-pdf per-component soft counts from the latest update; drives mixture
  // splitting, not serialized
  std::vector<Vec> occupancy;

  int num_pdfs() const { return static_cast<int>(pdfs.size()); }
  int total_gauss() const {
    int n = 0;
    for (const auto& g : pdfs) n += g.num_comp();
    return n;
  }
  double log_like(int pdf, const Eigen::RowVectorXd& x) const {
    return pdfs.at(static_cast<std::size_t>(pdf)).log_likelihood(x);
  }

  void write(std::ostream& os) const {
    os.write("GMDL", 4);
    write_pod<std::uint8_t>(os, 1);
    write_pod<std::int32_t>(os, dim);
    for (int j = 0; j < dim; ++j) write_pod<double>(os, var_floor[j]);
    write_pod<std::int32_t>(os, num_pdfs());
    for (const auto& g : pdfs) g.write(os);
  }

  static AmGmm read(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "GMDL")
      throw BadConfig("am-gmm: bad magic");
    if (read_pod<std::uint8_t>(is) != 1) throw BadConfig("am-gmm: bad version");
    AmGmm am;
    am.dim = read_pod<std::int32_t>(is);
    am.var_floor.resize(am.dim);
    for (int j = 0; j < am.dim; ++j) am.var_floor[j] = read_pod<double>(is);
    auto n = read_pod<std::int32_t>(is);
    am.pdfs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) am.pdfs.push_back(DiagGmm::read(is));
    am.occupancy.assign(am.pdfs.size(), Vec());
    for (std::size_t i = 0; i < am.pdfs.size(); ++i)
      am.occupancy[i] = Vec::Ones(am.pdfs[i].num_comp());
    return am;
  }
};

// ---------------------------------------------------------------------------
// Flat start: every pdf gets one Gaussian with the global data mean and
// variance.  The per-dimension variance floor (1e-4 of the global variance,
// with a small absolute guard) is fixed here and reused by later updates.

inline AmGmm flat_start(const std::vector<FeatureMatrix>& feats,
                        const TransitionModel& tm) {
  std::int64_t frames = 0;
  int dim = -1;
  for (const auto& f : feats) {
    if (f.frames.rows() == 0) continue;
    if (dim < 0) dim = static_cast<int>(f.frames.cols());
    if (static_cast<int>(f.frames.cols()) != dim)
      throw BadConfig("flat_start: inconsistent feature dimension");
    frames += f.frames.rows();
  }
  if (frames == 0) throw EmptyData("flat_start: no frames");

  Vec s1 = Vec::Zero(dim), s2 = Vec::Zero(dim);
  for (const auto& f : feats) {
    s1 += f.frames.colwise().sum().transpose();
    s2 += f.frames.array().square().colwise().sum().matrix().transpose();
  }
  Vec mean = s1 / static_cast<double>(frames);
  Vec var = s2 / static_cast<double>(frames) - mean.array().square().matrix();

  AmGmm am;
  am.dim = dim;
  am.var_floor = (var * 1e-4).cwiseMax(1e-10);
  var = var.cwiseMax(am.var_floor);

  DiagGmm proto(1, dim);
  proto.means.row(0) = mean.transpose();
  proto.inv_vars.row(0) = var.cwiseInverse().transpose();
  proto.compute_gconsts();
  am.pdfs.assign(static_cast<std::size_t>(tm.num_pdfs()), proto);
  am.occupancy.assign(am.pdfs.size(), Vec::Ones(1));
  return am;
}

// ---------------------------------------------------------------------------
// Per-utterance training graphs: a linear word acceptor composed through the
// usual H . C . L chain.

inline Fst make_linear_g(const std::vector<std::int32_t>& words,
                         SymTabPtr word_table) {
  Fst g(Semiring::kTropical);
  g.isyms = word_table;
  g.osyms = word_table;
  int cur = g.add_state();
  g.set_start(cur);
  for (std::int32_t w : words) {
    int nxt = g.add_state();
    g.add_arc(cur, {w, w, sr_one(), nxt});
    cur = nxt;
  }
  g.set_final(cur, sr_one());
  return g;
}

inline Fst make_training_graph(const Fst& h, const Fst& c, const Fst& l,
                               const std::vector<std::int32_t>& words,
                               SymTabPtr word_table) {
  return compile_hclg(h, c, l, make_linear_g(words, word_table));
}

// ---------------------------------------------------------------------------
// Equal-split alignment: the skeleton path with the fewest emitted frames,
// stretched to T frames by distributing self-loops evenly.  Used to bootstrap
// the first EM pass when every pdf is still identical.

inline std::vector<std::int32_t> equal_align(const Fst& graph,
                                             const TransitionModel& tm, int t_count) {
  if (t_count < 1) throw AlignmentFailed("equal_align: no frames");
  Fst skel = graph;
  for (int s = 0; s < skel.num_states(); ++s)
    for (auto& a : skel.mutable_arcs(s)) a.weight = a.ilabel != 0 ? 1.0 : 0.0;
  for (int s = 0; s < skel.num_states(); ++s)
    if (skel.final_weight(s) != sr_zero()) skel.set_final(s, sr_one());
  auto sp = shortest_path(skel);
  if (sp.weight >= kInf) throw AlignmentFailed("equal_align: empty graph");

  std::vector<std::int32_t> emit;
  for (const auto& a : sp.arcs)
    if (a.ilabel != 0) emit.push_back(a.ilabel);
  int m = static_cast<int>(emit.size());
  if (m == 0 || t_count < m)
    throw AlignmentFailed("equal_align: " + std::to_string(t_count) +
                          " frames for " + std::to_string(m) + " states");

  // self-loop twin of each emitting arc, -1 where the state has none
  std::vector<std::int32_t> loop(emit.size(), -1);
  std::vector<char> can(emit.size(), 0);
  for (std::size_t i = 0; i < emit.size(); ++i) {
    auto [tup, tr] = tm.decompose(emit[i]);
    auto trans = tm.topo().transitions(tm.tuple(tup).hmm_state);
    for (std::size_t j = 0; j < trans.size(); ++j)
      if (trans[j].self_loop) {
        loop[i] = tm.tid(tup, static_cast<int>(j));
        can[i] = 1;
      }
    (void)tr;
  }
  int slots = static_cast<int>(std::count(can.begin(), can.end(), char(1)));
  int extra = t_count - m;
  if (extra > 0 && slots == 0)
    throw AlignmentFailed("equal_align: no self-loops to absorb extra frames");

  std::vector<int> hold(emit.size(), 0);
  if (extra > 0) {
    int base = extra / slots, rem = extra % slots, seen = 0;
    for (std::size_t i = 0; i < emit.size(); ++i)
      if (can[i]) {
        hold[i] = base + (seen < rem ? 1 : 0);
        ++seen;
      }
  }
  std::vector<std::int32_t> out;
  out.reserve(static_cast<std::size_t>(t_count));
  for (std::size_t i = 0; i < emit.size(); ++i) {
    for (int j = 0; j < hold[i]; ++j) out.push_back(loop[i]);
    out.push_back(emit[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Viterbi forced alignment: token passing with beam pruning, epsilon arcs
// followed within the frame, one automatic retry at 4x the beam.

namespace detail {

struct AlignTrace {
  int prev = -1;        // state in the previous frame (tid > 0) or this frame
  std::int32_t tid = 0;  // 0 for an epsilon hop
};

inline bool viterbi_pass(const AmGmm& am, const TransitionModel& tm,
                         const Fst& graph, const FeatureMatrix& feats,
                         double beam, double acoustic_scale,
                         std::vector<std::int32_t>* out) {
  const int t_count = static_cast<int>(feats.frames.rows());
  const int n = graph.num_states();
  if (t_count < 1 || n == 0 || graph.start() < 0) return false;

  std::vector<std::vector<AlignTrace>> trace(
      static_cast<std::size_t>(t_count) + 1,
      std::vector<AlignTrace>(static_cast<std::size_t>(n)));
  std::vector<double> cur(static_cast<std::size_t>(n), kInf);
  cur[static_cast<std::size_t>(graph.start())] = 0.0;

  auto eps_expand = [&](std::vector<double>& cost, int frame) {
    std::deque<int> q;
    for (int s = 0; s < n; ++s)
      if (cost[static_cast<std::size_t>(s)] < kInf) q.push_back(s);
    while (!q.empty()) {
      int s = q.front();
      q.pop_front();
      double c = cost[static_cast<std::size_t>(s)];
      for (const auto& a : graph.arcs(s)) {
        if (a.ilabel != 0) continue;
        double nc = c + a.weight;
        if (nc < cost[static_cast<std::size_t>(a.next)] - 1e-12) {
          cost[static_cast<std::size_t>(a.next)] = nc;
          trace[static_cast<std::size_t>(frame)][static_cast<std::size_t>(a.next)] =
              {s, 0};
          q.push_back(a.next);
        }
      }
    }
  };

  eps_expand(cur, 0);

  std::vector<double> loglike(static_cast<std::size_t>(am.num_pdfs()));
  std::vector<char> have(static_cast<std::size_t>(am.num_pdfs()));
  for (int t = 0; t < t_count; ++t) {
    std::fill(have.begin(), have.end(), char(0));
    auto ll = [&](int pdf) {
      if (!have[static_cast<std::size_t>(pdf)]) {
        loglike[static_cast<std::size_t>(pdf)] =
            am.log_like(pdf, feats.frames.row(t));
        have[static_cast<std::size_t>(pdf)] = 1;
      }
      return loglike[static_cast<std::size_t>(pdf)];
    };

    double best = kInf;
    for (double c : cur) best = std::min(best, c);
    if (best >= kInf) return false;
    std::vector<double> nxt(static_cast<std::size_t>(n), kInf);
    for (int s = 0; s < n; ++s) {
      double c = cur[static_cast<std::size_t>(s)];
      if (c >= kInf || c > best + beam) continue;
      for (const auto& a : graph.arcs(s)) {
        if (a.ilabel == 0) continue;
        double nc =
            c + a.weight - acoustic_scale * ll(tm.pdf_of(a.ilabel));
        if (nc < nxt[static_cast<std::size_t>(a.next)] - 1e-12) {
          nxt[static_cast<std::size_t>(a.next)] = nc;
          trace[static_cast<std::size_t>(t) + 1][static_cast<std::size_t>(a.next)] =
              {s, a.ilabel};
        }
      }
    }
    eps_expand(nxt, t + 1);
    cur.swap(nxt);
  }

  int best_state = -1;
  double best_cost = kInf;
  for (int s = 0; s < n; ++s) {
    double fw = graph.final_weight(s);
    if (fw == sr_zero() || cur[static_cast<std::size_t>(s)] >= kInf) continue;
    double c = cur[static_cast<std::size_t>(s)] + fw;
    if (c < best_cost) {
      best_cost = c;
      best_state = s;
    }
  }
  if (best_state < 0) return false;

  std::vector<std::int32_t> rev;
  int frame = t_count, state = best_state;
  while (frame > 0 || state != graph.start()) {
    const AlignTrace& e =
        trace[static_cast<std::size_t>(frame)][static_cast<std::size_t>(state)];
    if (e.tid > 0) {
      rev.push_back(e.tid);
      --frame;
    } else if (e.prev < 0) {
      break;  // reached the start state of frame 0
    }
    state = e.prev;
  }
  if (static_cast<int>(rev.size()) != t_count) return false;
  out->assign(rev.rbegin(), rev.rend());
  return true;
}

}  // namespace detail

inline std::vector<std::int32_t> align_utterance(const AmGmm& am,
                                                 const TransitionModel& tm,
                                                 const Fst& graph,
                                                 const FeatureMatrix& feats,
                                                 double beam = 10.0,
                                                 double acoustic_scale = 1.0) {
  std::vector<std::int32_t> out;
  if (detail::viterbi_pass(am, tm, graph, feats, beam, acoustic_scale, &out))
    return out;
  if (detail::viterbi_pass(am, tm, graph, feats, beam * 4.0, acoustic_scale,
                           &out))
    return out;
  throw AlignmentFailed("no surviving token at beam " +
                        std::to_string(beam * 4.0) + " (" +
                        std::to_string(feats.frames.rows()) + " frames)");
}

// ---------------------------------------------------------------------------
// One Viterbi-EM step: hard frame-to-pdf counts from the alignments, soft
// component responsibilities inside each pdf, closed-form ML update with
// variance flooring.  Returns the updated model and the pre-update acoustic
// log-likelihood of all aligned frames.

inline std::pair<AmGmm, double> accumulate_and_update(
    const AmGmm& am, const TransitionModel& tm,
    const std::vector<std::vector<std::int32_t>>& alignments,
    const std::vector<FeatureMatrix>& feats) {
  if (alignments.size() != feats.size())
    throw BadConfig("accumulate: alignment/feature count mismatch");
  const int d = am.dim;
  std::vector<Vec> count(am.pdfs.size());
  std::vector<Mat> s1(am.pdfs.size()), s2(am.pdfs.size());
  for (std::size_t p = 0; p < am.pdfs.size(); ++p) {
    int k = am.pdfs[p].num_comp();
    count[p] = Vec::Zero(k);
    s1[p] = Mat::Zero(k, d);
    s2[p] = Mat::Zero(k, d);
  }

  double total_ll = 0.0;
  Vec post;
  for (std::size_t u = 0; u < alignments.size(); ++u) {
    const auto& ali = alignments[u];
    if (static_cast<std::int64_t>(ali.size()) != feats[u].frames.rows())
      throw BadConfig("accumulate: alignment length mismatch in utterance " +
                      std::to_string(u));
    for (std::size_t t = 0; t < ali.size(); ++t) {
      int pdf = tm.pdf_of(ali[t]);
      Eigen::RowVectorXd x = feats[u].frames.row(static_cast<int>(t));
      total_ll += am.pdfs[static_cast<std::size_t>(pdf)].component_posteriors(
          x, &post);
      auto& c = count[static_cast<std::size_t>(pdf)];
      auto& a1 = s1[static_cast<std::size_t>(pdf)];
      auto& a2 = s2[static_cast<std::size_t>(pdf)];
      for (int k = 0; k < post.size(); ++k) {
        c[k] += post[k];
        a1.row(k) += post[k] * x;
        a2.row(k) += post[k] * x.array().square().matrix();
      }
    }
  }

  constexpr double kMinComponentCount = 1e-2;
  constexpr double kMinWeight = 1e-5;
  AmGmm out = am;
  for (std::size_t p = 0; p < out.pdfs.size(); ++p) {
    double tot = count[p].sum();
    out.occupancy[p] = count[p];
    if (tot <= 0.0) continue;  // pdf saw no frames: keep previous parameters
    DiagGmm& g = out.pdfs[p];
    for (int k = 0; k < g.num_comp(); ++k) {
      g.weights[k] = std::max(count[p][k] / tot, kMinWeight);
      if (count[p][k] > kMinComponentCount) {
        Eigen::RowVectorXd mu = s1[p].row(k) / count[p][k];
        Eigen::RowVectorXd var =
            (s2[p].row(k) / count[p][k] - mu.array().square().matrix())
                .cwiseMax(am.var_floor.transpose());
        g.means.row(k) = mu;
        g.inv_vars.row(k) = var.cwiseInverse();
      }
    }
    g.weights /= g.weights.sum();
    g.compute_gconsts();
  }
  return {std::move(out), total_ll};
}

// ---------------------------------------------------------------------------
// Mixture growth: split the largest-occupancy component until the global
// target (capped at 32 per pdf) is reached.  Means move +-perturb sigma,
// weights and occupancies halve.

inline AmGmm split_mixtures(const AmGmm& am, int target_total,
                            double perturb = 0.01) {
  constexpr int kMaxPerPdf = 32;
  AmGmm out = am;
  int cap = static_cast<int>(out.pdfs.size()) * kMaxPerPdf;
  int target = std::min(target_total, cap);
  while (out.total_gauss() < target) {
    int bp = -1, bk = -1;
    double bo = -1.0;
    for (std::size_t p = 0; p < out.pdfs.size(); ++p) {
      if (out.pdfs[p].num_comp() >= kMaxPerPdf) continue;
      for (int k = 0; k < out.pdfs[p].num_comp(); ++k)
        if (out.occupancy[p][k] > bo) {
          bo = out.occupancy[p][k];
          bp = static_cast<int>(p);
          bk = k;
        }
    }
    if (bp < 0) break;
    DiagGmm& g = out.pdfs[static_cast<std::size_t>(bp)];
    int k = g.num_comp();
    DiagGmm ng(k + 1, out.dim);
    ng.weights.head(k) = g.weights;
    ng.means.topRows(k) = g.means;
    ng.inv_vars.topRows(k) = g.inv_vars;
    Eigen::RowVectorXd sigma = g.inv_vars.row(bk).array().sqrt().inverse();
    ng.weights[bk] = g.weights[bk] / 2.0;
    ng.weights[k] = ng.weights[bk];
    ng.means.row(k) = g.means.row(bk) - perturb * sigma;
    ng.means.row(bk) = g.means.row(bk) + perturb * sigma;
    ng.inv_vars.row(k) = g.inv_vars.row(bk);
    ng.compute_gconsts();
    g = std::move(ng);
    Vec no(k + 1);
    no.head(k) = out.occupancy[static_cast<std::size_t>(bp)];
    no[bk] /= 2.0;
    no[k] = no[bk];
    out.occupancy[static_cast<std::size_t>(bp)] = no;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phonetic decision tree with data-driven questions.

class DecisionTree {
 public:
  struct Node {
    bool leaf = true;
    int pdf = -1;
    int position = 0;            // 0 = left context, 1 = right context
    std::vector<int> question;   // sorted phone ids; membership answers yes
    int yes = -1, no = -1;
  };

  std::vector<Node> nodes;
  // (phone, pdf_class) -> root node index
  std::map<std::pair<int, int>, int> roots;
  int num_leaves_ = 0;

  int num_leaves() const { return num_leaves_; }

  int map(int left, int center, int right, int pdf_class) const {
    auto it = roots.find({center, pdf_class});
    if (it == roots.end())
      throw BadConfig("tree: no root for phone " + std::to_string(center) +
                      " state " + std::to_string(pdf_class));
    int n = it->second;
    while (!nodes[static_cast<std::size_t>(n)].leaf) {
      const Node& nd = nodes[static_cast<std::size_t>(n)];
      int ctx = nd.position == 0 ? left : right;
      bool yes = std::binary_search(nd.question.begin(), nd.question.end(), ctx);
      n = yes ? nd.yes : nd.no;
    }
    return nodes[static_cast<std::size_t>(n)].pdf;
  }

  void write(std::ostream& os) const {
    os.write("TREE", 4);
    write_pod<std::uint8_t>(os, 1);
    write_pod<std::int32_t>(os, num_leaves_);
    write_pod<std::int32_t>(os, static_cast<std::int32_t>(roots.size()));
    for (const auto& [key, idx] : roots) {
      write_pod<std::int32_t>(os, key.first);
      write_pod<std::int32_t>(os, key.second);
      write_pod<std::int32_t>(os, idx);
    }
    write_pod<std::int32_t>(os, static_cast<std::int32_t>(nodes.size()));
    for (const auto& nd : nodes) {
      write_pod<std::uint8_t>(os, nd.leaf ? 1 : 0);
      if (nd.leaf) {
        write_pod<std::int32_t>(os, nd.pdf);
      } else {
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(nd.position));
        write_pod<std::int32_t>(os, static_cast<std::int32_t>(nd.question.size()));
        for (int p : nd.question) write_pod<std::int32_t>(os, p);
        write_pod<std::int32_t>(os, nd.yes);
        write_pod<std::int32_t>(os, nd.no);
      }
    }
  }

  static DecisionTree read(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "TREE")
      throw BadConfig("tree: bad magic");
    if (read_pod<std::uint8_t>(is) != 1) throw BadConfig("tree: bad version");
    DecisionTree t;
    t.num_leaves_ = read_pod<std::int32_t>(is);
    auto nroots = read_pod<std::int32_t>(is);
    for (int i = 0; i < nroots; ++i) {
      int phone = read_pod<std::int32_t>(is);
      int cls = read_pod<std::int32_t>(is);
      t.roots[{phone, cls}] = read_pod<std::int32_t>(is);
    }
    auto nnodes = read_pod<std::int32_t>(is);
    t.nodes.resize(static_cast<std::size_t>(nnodes));
    for (auto& nd : t.nodes) {
      nd.leaf = read_pod<std::uint8_t>(is) != 0;
      if (nd.leaf) {
        nd.pdf = read_pod<std::int32_t>(is);
      } else {
        nd.position = read_pod<std::uint8_t>(is);
        auto qs = read_pod<std::int32_t>(is);
        nd.question.resize(static_cast<std::size_t>(qs));
        for (auto& p : nd.question) p = read_pod<std::int32_t>(is);
        nd.yes = read_pod<std::int32_t>(is);
        nd.no = read_pod<std::int32_t>(is);
      }
    }
    return t;
  }
};

namespace detail {

// single-Gaussian sufficient statistics
struct GaussStats {
  double n = 0.0;
  Vec s1, s2;
  void init(int d) {
    n = 0.0;
    s1 = Vec::Zero(d);
    s2 = Vec::Zero(d);
  }
  void add(const Eigen::RowVectorXd& x) {
    n += 1.0;
    s1 += x.transpose();
    s2 += x.array().square().matrix().transpose();
  }
  void merge(const GaussStats& o) {
    n += o.n;
    if (s1.size() == 0) {
      s1 = o.s1;
      s2 = o.s2;
    } else if (o.s1.size() != 0) {
      s1 += o.s1;
      s2 += o.s2;
    }
  }
};

// ML log-likelihood of the stats under their own single diagonal Gaussian
inline double gauss_objf(const GaussStats& g) {
  if (g.n < 1e-6) return 0.0;
  Vec mu = g.s1 / g.n;
  Vec var = (g.s2 / g.n - mu.array().square().matrix()).cwiseMax(1e-10);
  double acc = 0.0;
  for (int j = 0; j < var.size(); ++j)
    acc += std::log(2.0 * M_PI * var[j]) + 1.0;
  return -0.5 * g.n * acc;
}

// bottom-up agglomerative clustering of the per-phone stats; returns every
// cluster that arises (singletons plus merges) as a sorted phone set
inline std::vector<std::vector<int>> cluster_phone_questions(
    std::map<int, GaussStats> phone_stats) {
  struct Cluster {
    std::vector<int> phones;
    GaussStats stats;
  };
  std::vector<Cluster> live;
  for (auto& [phone, st] : phone_stats)
    live.push_back({{phone}, std::move(st)});
  std::vector<std::vector<int>> questions;
  for (const auto& c : live) questions.push_back(c.phones);
  while (live.size() > 1) {
    std::size_t bi = 0, bj = 1;
    double best = kInf;
    for (std::size_t i = 0; i < live.size(); ++i)
      for (std::size_t j = i + 1; j < live.size(); ++j) {
        GaussStats m = live[i].stats;
        m.merge(live[j].stats);
        double loss = gauss_objf(live[i].stats) + gauss_objf(live[j].stats) -
                      gauss_objf(m);
        if (loss < best - 1e-12) {
          best = loss;
          bi = i;
          bj = j;
        }
      }
    Cluster merged;
    merged.phones = live[bi].phones;
    merged.phones.insert(merged.phones.end(), live[bj].phones.begin(),
                         live[bj].phones.end());
    std::sort(merged.phones.begin(), merged.phones.end());
    merged.stats = live[bi].stats;
    merged.stats.merge(live[bj].stats);
    questions.push_back(merged.phones);
    live.erase(live.begin() + static_cast<std::ptrdiff_t>(bj));
    live[bi] = std::move(merged);
  }
  std::sort(questions.begin(), questions.end());
  questions.erase(std::unique(questions.begin(), questions.end()),
                  questions.end());
  return questions;
}

}  // namespace detail

// Walks a monophone alignment and reports each frame's full triphone context.
// leaves_phone is true on transitions whose target exits the phone.
inline bool leaves_phone(const TransitionModel& tm, std::int32_t tid) {
  auto [tup, tr] = tm.decompose(tid);
  return tm.topo()
             .transitions(tm.tuple(tup).hmm_state)
             .at(static_cast<std::size_t>(tr))
             .target == -1;
}

struct FrameContext {
  int phone = 0, left = 0, right = 0;  // 0 = utterance boundary
  int hmm_state = 0;
  int trans_idx = 0;
};

inline std::vector<FrameContext> alignment_contexts(
    const TransitionModel& tm, const std::vector<std::int32_t>& ali) {
  // split into phone instances: an instance ends when its transition leaves
  std::vector<std::pair<int, std::vector<std::size_t>>> instances;
  for (std::size_t t = 0; t < ali.size(); ++t) {
    if (instances.empty() || leaves_phone(tm, ali[instances.back().second.back()]))
      instances.push_back({tm.phone_of(ali[t]), {}});
    instances.back().second.push_back(t);
  }
  std::vector<FrameContext> out(ali.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    int left = i == 0 ? 0 : instances[i - 1].first;
    int right = i + 1 == instances.size() ? 0 : instances[i + 1].first;
    for (std::size_t t : instances[i].second) {
      auto [tup, tr] = tm.decompose(ali[t]);
      out[t] = {instances[i].first, left, right, tm.tuple(tup).hmm_state, tr};
    }
  }
  return out;
}

namespace detail {

// splits tree node `n` on (position, question); fills the two child indices
inline void split_node(DecisionTree& tree, int n, int position,
                       const std::vector<int>& question, int* yes, int* no) {
  *yes = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back({});
  *no = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back({});
  auto& nd = tree.nodes[static_cast<std::size_t>(n)];
  nd.leaf = false;
  nd.position = position;
  nd.question = question;
  nd.yes = *yes;
  nd.no = *no;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Decision-tree building: one root per (phone, pdf class), greedy splitting
// on left/right context questions by single-Gaussian likelihood gain.

inline DecisionTree build_tree(
    const std::vector<std::vector<std::int32_t>>& alignments,
    const std::vector<FeatureMatrix>& feats, const TransitionModel& tm,
    const SymbolTable& phone_table, int max_leaves,
    double gain_threshold = 150.0,
    const std::vector<int>& positions = {0, 1}) {
  if (alignments.size() != feats.size())
    throw BadConfig("build_tree: alignment/feature count mismatch");
  int dim = -1;
  std::int64_t frames = 0;
  for (const auto& f : feats)
    if (f.frames.rows() > 0) {
      dim = static_cast<int>(f.frames.cols());
      frames += f.frames.rows();
    }
  if (frames == 0) throw InsufficientData("build_tree: no aligned frames");

  const int ncls = tm.topo().num_pdf_classes();
  // stats grouped by (phone, class) root, keyed by (left, right) inside
  std::map<std::pair<int, int>, std::map<std::pair<int, int>, detail::GaussStats>>
      by_root;
  std::map<int, detail::GaussStats> phone_stats;
  for (std::size_t u = 0; u < alignments.size(); ++u) {
    auto ctx = alignment_contexts(tm, alignments[u]);
    if (static_cast<std::int64_t>(ctx.size()) != feats[u].frames.rows())
      throw BadConfig("build_tree: alignment length mismatch in utterance " +
                      std::to_string(u));
    for (std::size_t t = 0; t < ctx.size(); ++t) {
      Eigen::RowVectorXd x = feats[u].frames.row(static_cast<int>(t));
      int cls = tm.topo()
                    .states.at(static_cast<std::size_t>(ctx[t].hmm_state))
                    .pdf_class;
      auto& cell = by_root[{ctx[t].phone, cls}][{ctx[t].left, ctx[t].right}];
      if (cell.n == 0.0) cell.init(dim);
      cell.add(x);
      auto& ps = phone_stats[ctx[t].phone];
      if (ps.n == 0.0) ps.init(dim);
      ps.add(x);
    }
  }

  auto questions = detail::cluster_phone_questions(phone_stats);

  DecisionTree tree;
  struct Leaf {
    int node = -1;
    std::map<std::pair<int, int>, detail::GaussStats> stats;
    double objf = 0.0;
  };
  std::vector<Leaf> open;

  for (int p = 1; p <= phone_table.size(); ++p)
    for (int cls = 0; cls < ncls; ++cls) {
      int idx = static_cast<int>(tree.nodes.size());
      tree.nodes.push_back({});
      tree.roots[{p, cls}] = idx;
      auto it = by_root.find({p, cls});
      if (it != by_root.end()) {
        Leaf lf;
        lf.node = idx;
        lf.stats = it->second;
        detail::GaussStats all;
        for (const auto& [k, st] : lf.stats) all.merge(st);
        lf.objf = detail::gauss_objf(all);
        open.push_back(std::move(lf));
      }
    }
  int leaves = static_cast<int>(tree.nodes.size());

  auto answer = [](const std::pair<int, int>& ctx, int position,
                   const std::vector<int>& q) {
    int phone = position == 0 ? ctx.first : ctx.second;
    return std::binary_search(q.begin(), q.end(), phone);
  };

  while (leaves < max_leaves) {
    double best_gain = -kInf;
    std::size_t best_leaf = 0;
    int best_pos = 0;
    const std::vector<int>* best_q = nullptr;
    for (std::size_t li = 0; li < open.size(); ++li) {
      const Leaf& lf = open[li];
      if (lf.stats.size() < 2) continue;  // a single context cannot split
      for (int pos : positions)
        for (const auto& q : questions) {
          detail::GaussStats yes, no;
          for (const auto& [ctx, st] : lf.stats)
            (answer(ctx, pos, q) ? yes : no).merge(st);
          if (yes.n < 1e-6 || no.n < 1e-6) continue;
          double gain =
              detail::gauss_objf(yes) + detail::gauss_objf(no) - lf.objf;
          if (gain > best_gain + 1e-9) {
            best_gain = gain;
            best_leaf = li;
            best_pos = pos;
            best_q = &q;
          }
        }
    }
    if (!best_q || best_gain < gain_threshold) break;

    Leaf& lf = open[best_leaf];
    Leaf yes_leaf, no_leaf;
    detail::GaussStats ys, ns;
    for (auto& [ctx, st] : lf.stats) {
      if (answer(ctx, best_pos, *best_q)) {
        yes_leaf.stats[ctx] = st;
        ys.merge(st);
      } else {
        no_leaf.stats[ctx] = st;
        ns.merge(st);
      }
    }
    yes_leaf.objf = detail::gauss_objf(ys);
    no_leaf.objf = detail::gauss_objf(ns);

    detail::split_node(tree, lf.node, best_pos, *best_q, &yes_leaf.node,
                       &no_leaf.node);
    open.push_back(std::move(yes_leaf));
    open.push_back(std::move(no_leaf));
    open.erase(open.begin() + static_cast<std::ptrdiff_t>(best_leaf));
    ++leaves;
  }

  // number the leaves in preorder from each root, in root key order
  int next_pdf = 0;
  for (auto& [key, root] : tree.roots) {
    std::vector<int> stack = {root};
    while (!stack.empty()) {
      int n = stack.back();
      stack.pop_back();
      auto& nd = tree.nodes[static_cast<std::size_t>(n)];
      if (nd.leaf) {
        nd.pdf = next_pdf++;
      } else {
        stack.push_back(nd.no);
        stack.push_back(nd.yes);
      }
    }
  }
  tree.num_leaves_ = next_pdf;
  return tree;
}

// ---------------------------------------------------------------------------
// Alignment conversion: keep the mono timing, remap each frame's pdf through
// the tree and re-issue transition ids against the triphone model.

inline std::vector<std::int32_t> convert_alignment(
    const std::vector<std::int32_t>& ali, const TransitionModel& tm_from,
    const TransitionModel& tm_to, const DecisionTree& tree) {
  auto ctx = alignment_contexts(tm_from, ali);
  std::vector<std::int32_t> out(ali.size());
  const auto& topo = tm_to.topo();
  for (std::size_t t = 0; t < ali.size(); ++t) {
    int cls =
        topo.states.at(static_cast<std::size_t>(ctx[t].hmm_state)).pdf_class;
    int pdf = tree.map(ctx[t].left, ctx[t].phone, ctx[t].right, cls);
    int tup = tm_to.tuple_index(ctx[t].phone, ctx[t].hmm_state, pdf);
    if (tup < 0)
      throw BadConfig("convert_alignment: missing tuple for phone " +
                      std::to_string(ctx[t].phone));
    out[t] = tm_to.tid(tup, ctx[t].trans_idx);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alignment archives: text, one line per utterance.

inline void write_alignments(
    const std::filesystem::path& path,
    const std::vector<std::pair<std::string, std::vector<std::int32_t>>>& alis) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& [utt, ali] : alis) {
    os << utt;
    for (auto t : ali) os << ' ' << t;
    os << '\n';
  }
}

inline std::vector<std::pair<std::string, std::vector<std::int32_t>>>
read_alignments(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::vector<std::pair<std::string, std::vector<std::int32_t>>> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string utt;
    if (!(ls >> utt)) continue;
    std::vector<std::int32_t> ali;
    std::int32_t t;
    while (ls >> t) ali.push_back(t);
    out.push_back({utt, std::move(ali)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training ladder: monophone then delta-feature triphone.

struct GmmLadderConfig {
  int mono_iters = 40;
  int tri_iters = 35;
  std::vector<int> realign_iters = {1, 2,  3,  4,  5,  6,  8,
                                    10, 12, 15, 20, 25, 30, 35};
  int mono_target_gauss = 1000;
  int tri_target_gauss = 2500;
  int max_leaves = 500;
  double tree_gain_threshold = 150.0;
  double beam = 10.0;
  double acoustic_scale = 1.0;
  double sil_prob = 0.5;
  int jobs = 1;
};

struct GmmStage {
  AmGmm am;
  TransitionModel tm;
  ContextDep cd;
  std::vector<std::vector<std::int32_t>> ali;  // parallel to kept utterances
  double last_loglike = 0.0;
};

struct GmmLadderResult {
  GmmStage mono, tri;
  DecisionTree tree;
  std::vector<std::string> utt_ids;  // utterances that survived graph building
  int failures = 0;
};

namespace detail {

// linear interpolation from the starting component count to the target
inline int gauss_target(int initial, int final_total, int iter, int iters) {
  double f = static_cast<double>(iter) / static_cast<double>(iters);
  return initial + static_cast<int>(std::lround((final_total - initial) * f));
}

inline void train_stage(GmmStage* stage, const std::vector<Fst>& graphs,
                        const std::vector<FeatureMatrix>& feats, int iters,
                        const std::vector<int>& realign_iters, int target_gauss,
                        const GmmLadderConfig& cfg, int* failures) {
  std::set<int> realign(realign_iters.begin(), realign_iters.end());
  int last_realign = 0;
  for (int i : realign)
    if (i <= iters) last_realign = std::max(last_realign, i);
  int initial = stage->am.total_gauss();
  for (int iter = 1; iter <= iters; ++iter) {
    auto [am2, ll] =
        accumulate_and_update(stage->am, stage->tm, stage->ali, feats);
    stage->last_loglike = ll;
    stage->am = split_mixtures(
        am2, gauss_target(initial, target_gauss, iter, iters), 0.01);
    if (realign.count(iter)) {
      std::vector<std::vector<std::int32_t>> next(stage->ali.size());
      std::vector<char> ok(stage->ali.size(), 1);
      parallel_for(stage->ali.size(), cfg.jobs, [&](std::size_t u) {
        try {
          next[u] = align_utterance(stage->am, stage->tm, graphs[u], feats[u],
                                    cfg.beam, cfg.acoustic_scale);
        } catch (const AlignmentFailed&) {
          ok[u] = 0;
        }
      });
      for (std::size_t u = 0; u < next.size(); ++u) {
        if (ok[u])
          stage->ali[u] = std::move(next[u]);
        else if (iter == last_realign)
          ++*failures;  // kept the stale alignment through the final realign
      }
    }
  }
}

}  // namespace detail

// feats_mono: the monophone stage features (13-dim MFCC+CMVN); feats_tri: the
// triphone stage features (39-dim with deltas).  transcripts are word id
// sequences against lex.word_table.
inline GmmLadderResult train_gmm_ladder(
    const std::vector<std::string>& utt_ids,
    const std::vector<FeatureMatrix>& feats_mono,
    const std::vector<FeatureMatrix>& feats_tri,
    const std::vector<std::vector<std::int32_t>>& transcripts,
    const Lexicon& lex, const GmmLadderConfig& cfg = {}) {
  if (utt_ids.size() != feats_mono.size() ||
      utt_ids.size() != feats_tri.size() ||
      utt_ids.size() != transcripts.size())
    throw BadConfig("train_gmm_ladder: per-utterance inputs disagree");
  if (utt_ids.empty()) throw EmptyData("train_gmm_ladder: no utterances");

  auto topo = make_topology(TopoKind::kThreeState);
  GmmLadderResult res;

  // ---- monophone stage
  res.mono.cd = make_mono_context(lex.phone_table, topo);
  res.mono.tm = make_transition_model(topo, res.mono.cd);
  Fst l = make_lexicon_fst(lex, cfg.sil_prob);
  Fst c1 = make_context_fst(res.mono.cd);
  Fst h1 = make_h_fst(topo, res.mono.tm, res.mono.cd);

  std::vector<Fst> graphs;
  std::vector<FeatureMatrix> fm, ft;
  std::vector<std::size_t> kept;
  for (std::size_t u = 0; u < utt_ids.size(); ++u) {
    Fst g = make_training_graph(h1, c1, l, transcripts[u], lex.word_table);
    if (g.num_states() == 0 || feats_mono[u].frames.rows() == 0) {
      log_warn("skipping utterance " + utt_ids[u] +
               ": empty training graph or no frames");
      ++res.failures;
      continue;
    }
    graphs.push_back(std::move(g));
    fm.push_back(feats_mono[u]);
    ft.push_back(feats_tri[u]);
    kept.push_back(u);
    res.utt_ids.push_back(utt_ids[u]);
  }
  if (graphs.empty()) throw EmptyData("train_gmm_ladder: no usable utterances");

  res.mono.am = flat_start(fm, res.mono.tm);
  res.mono.ali.resize(graphs.size());
  for (std::size_t u = 0; u < graphs.size(); ++u) {
    try {
      res.mono.ali[u] = equal_align(graphs[u], res.mono.tm,
                                    static_cast<int>(fm[u].frames.rows()));
    } catch (const AlignmentFailed&) {
      // fall back to a Viterbi pass at a wide beam; flat-start ties are
      // broken deterministically
      res.mono.ali[u] = align_utterance(res.mono.am, res.mono.tm, graphs[u],
                                        fm[u], cfg.beam * 4.0,
                                        cfg.acoustic_scale);
    }
  }
  detail::train_stage(&res.mono, graphs, fm, cfg.mono_iters, cfg.realign_iters,
                      cfg.mono_target_gauss, cfg, &res.failures);

  // ---- triphone stage: tree from mono alignments on the delta features
  res.tree = build_tree(res.mono.ali, ft, res.mono.tm, *lex.phone_table,
                        cfg.max_leaves, cfg.tree_gain_threshold);
  res.tri.cd = make_context_dep(
      lex.phone_table, 3, topo,
      [&](int lft, int ctr, int rgt, int cls) {
        return res.tree.map(lft, ctr, rgt, cls);
      });
  res.tri.tm = make_transition_model(topo, res.tri.cd);

  res.tri.ali.resize(res.mono.ali.size());
  for (std::size_t u = 0; u < res.mono.ali.size(); ++u)
    res.tri.ali[u] =
        convert_alignment(res.mono.ali[u], res.mono.tm, res.tri.tm, res.tree);

  Fst c3 = make_context_fst(res.tri.cd);
  Fst h3 = make_h_fst(topo, res.tri.tm, res.tri.cd);
  std::vector<Fst> graphs3(graphs.size());
  for (std::size_t i = 0; i < kept.size(); ++i)
    graphs3[i] =
        make_training_graph(h3, c3, l, transcripts[kept[i]], lex.word_table);

  res.tri.am = flat_start(ft, res.tri.tm);
  detail::train_stage(&res.tri, graphs3, ft, cfg.tri_iters, cfg.realign_iters,
                      cfg.tri_target_gauss, cfg, &res.failures);
  return res;
}

}  // namespace asrkit
