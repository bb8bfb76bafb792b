// asrkit/score.hpp
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
// Edit-distance alignment and the WER / CER / SER / MER / WIL / PER metric
// family.  Corpus metrics pool counts across utterances; they are not means
// of per-utterance rates.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asrkit/common.hpp"

namespace asrkit {

ASRKIT_ERROR(EmptyReference);
ASRKIT_ERROR(EmptyCorpus);

struct AlignmentCounts {
  std::int64_t hits = 0;
  std::int64_t subs = 0;
  std::int64_t dels = 0;
  std::int64_t ins = 0;
  std::int64_t n_ref = 0;
  std::int64_t n_hyp = 0;

  std::int64_t errors() const { return subs + dels + ins; }
  AlignmentCounts& operator+=(const AlignmentCounts& o) {
    hits += o.hits;
    subs += o.subs;
    dels += o.dels;
    ins += o.ins;
    n_ref += o.n_ref;
    n_hyp += o.n_hyp;
    return *this;
  }
};

enum class EditOp : std::uint8_t { kHit, kSub, kDel, kIns };

// Levenshtein with unit costs.  Ties are broken preferring substitution, then
// deletion, then insertion, so counts are deterministic.
template <class Tok>
AlignmentCounts align_tokens(const std::vector<Tok>& ref, const std::vector<Tok>& hyp,
                             std::vector<EditOp>* ops = nullptr) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::int32_t> cost((n + 1) * (m + 1), 0);
  std::vector<std::uint8_t> back((n + 1) * (m + 1), 0);
  auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  for (std::size_t i = 1; i <= n; ++i) {
    cost[at(i, 0)] = static_cast<std::int32_t>(i);
    back[at(i, 0)] = static_cast<std::uint8_t>(EditOp::kDel);
  }
  for (std::size_t j = 1; j <= m; ++j) {
    cost[at(0, j)] = static_cast<std::int32_t>(j);
    back[at(0, j)] = static_cast<std::uint8_t>(EditOp::kIns);
  }
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      bool eq = ref[i - 1] == hyp[j - 1];
      std::int32_t diag = cost[at(i - 1, j - 1)] + (eq ? 0 : 1);
      std::int32_t del = cost[at(i - 1, j)] + 1;
      std::int32_t inser = cost[at(i, j - 1)] + 1;
      // preference order on ties: hit/sub, then del, then ins
      std::int32_t best = diag;
      EditOp op = eq ? EditOp::kHit : EditOp::kSub;
      if (del < best) {
        best = del;
        op = EditOp::kDel;
      }
      if (inser < best) {
        best = inser;
        op = EditOp::kIns;
      }
      cost[at(i, j)] = best;
      back[at(i, j)] = static_cast<std::uint8_t>(op);
    }
  }
  AlignmentCounts c;
  c.n_ref = static_cast<std::int64_t>(n);
  c.n_hyp = static_cast<std::int64_t>(m);
  std::vector<EditOp> path;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    EditOp op = static_cast<EditOp>(back[at(i, j)]);
    path.push_back(op);
    switch (op) {
      case EditOp::kHit:
        ++c.hits;
        --i;
        --j;
        break;
      case EditOp::kSub:
        ++c.subs;
        --i;
        --j;
        break;
      case EditOp::kDel:
        ++c.dels;
        --i;
        break;
      case EditOp::kIns:
        ++c.ins;
        --j;
        break;
    }
  }
  if (ops) {
    ops->assign(path.rbegin(), path.rend());
  }
  return c;
}

inline double wer(const AlignmentCounts& c) {
  if (c.n_ref < 1) throw EmptyReference("wer: empty reference");
  return static_cast<double>(c.errors()) / static_cast<double>(c.n_ref);
}

inline std::vector<char> chars_of(const std::string& s) {
  return std::vector<char>(s.begin(), s.end());
}

// Character error rate; characters (spaces included) are the tokens.
inline double cer(const std::string& ref, const std::string& hyp) {
  if (ref.empty()) throw EmptyReference("cer: empty reference");
  AlignmentCounts c = align_tokens(chars_of(ref), chars_of(hyp));
  return static_cast<double>(c.errors()) / static_cast<double>(c.n_ref);
}

inline double ser(const std::vector<AlignmentCounts>& per_utt) {
  if (per_utt.empty()) throw EmptyCorpus("ser: no utterances");
  std::int64_t bad = 0;
  for (const auto& c : per_utt)
    if (c.errors() > 0) ++bad;
  return static_cast<double>(bad) / static_cast<double>(per_utt.size());
}

inline double mer(const AlignmentCounts& c) {
  std::int64_t total = c.hits + c.subs + c.dels + c.ins;
  if (total < 1) throw EmptyReference("mer: no aligned tokens");
  return static_cast<double>(c.errors()) / static_cast<double>(total);
}

inline double wil(const AlignmentCounts& c) {
  if (c.n_ref < 1) throw EmptyReference("wil: empty reference");
  if (c.n_hyp < 1 || c.hits == 0) return 1.0;
  double h = static_cast<double>(c.hits);
  return 1.0 - (h / static_cast<double>(c.n_ref)) * (h / static_cast<double>(c.n_hyp));
}

// Position-independent error: bag-of-words difference count.
template <class Tok>
std::int64_t per_numerator(const std::vector<Tok>& ref, const std::vector<Tok>& hyp) {
  std::map<Tok, std::int64_t> cr, ch;
  for (const Tok& t : ref) ++cr[t];
  for (const Tok& t : hyp) ++ch[t];
  std::int64_t overlap = 0;
  for (const auto& [t, n] : cr) {
    auto it = ch.find(t);
    if (it != ch.end()) overlap += std::min(n, it->second);
  }
  return std::max<std::int64_t>(static_cast<std::int64_t>(ref.size()),
                                static_cast<std::int64_t>(hyp.size())) -
         overlap;
}

template <class Tok>
double per_metric(const std::vector<Tok>& ref, const std::vector<Tok>& hyp) {
  if (ref.empty()) throw EmptyReference("per: empty reference");
  return static_cast<double>(per_numerator(ref, hyp)) /
         static_cast<double>(ref.size());
}

// ---------------------------------------------------------------------------
// Corpus scoring.

struct UttScore {
  std::string id;
  AlignmentCounts words;
  AlignmentCounts chars;
  double wer = 0.0, cer = 0.0, mer = 0.0, wil = 0.0, per = 0.0;
};

struct ScoreReport {
  std::vector<UttScore> utts;
  AlignmentCounts words;        // pooled
  AlignmentCounts chars;        // pooled
  std::int64_t per_numerator = 0;  // pooled bag-difference counts
  double wer = 0.0, cer = 0.0, ser = 0.0, mer = 0.0, wil = 0.0, per = 0.0;
};

// ref/hyp: utt_id -> token sequence.  Every reference utterance is scored; a
// missing hypothesis counts as empty (all deletions).
inline ScoreReport score_corpus(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& ref,
    const std::map<std::string, std::vector<std::string>>& hyp) {
  if (ref.empty()) throw EmptyCorpus("score_corpus: no reference utterances");
  ScoreReport rep;
  std::vector<AlignmentCounts> word_counts;
  for (const auto& [id, rtoks] : ref) {
    if (rtoks.empty()) throw EmptyReference("score_corpus: empty reference for " + id);
    static const std::vector<std::string> kNone;
    auto it = hyp.find(id);
    const std::vector<std::string>& htoks = (it == hyp.end()) ? kNone : it->second;
    UttScore u;
    u.id = id;
    u.words = align_tokens(rtoks, htoks);
    std::string rline, hline;
    for (std::size_t i = 0; i < rtoks.size(); ++i) rline += (i ? " " : "") + rtoks[i];
    for (std::size_t i = 0; i < htoks.size(); ++i) hline += (i ? " " : "") + htoks[i];
    u.chars = align_tokens(chars_of(rline), chars_of(hline));
    u.wer = wer(u.words);
    u.cer = static_cast<double>(u.chars.errors()) / static_cast<double>(u.chars.n_ref);
    u.mer = mer(u.words);
    u.wil = wil(u.words);
    u.per = per_metric(rtoks, htoks);
    rep.words += u.words;
    rep.chars += u.chars;
    rep.per_numerator += per_numerator(rtoks, htoks);
    word_counts.push_back(u.words);
    rep.utts.push_back(std::move(u));
  }
  rep.wer = wer(rep.words);
  rep.cer = static_cast<double>(rep.chars.errors()) / static_cast<double>(rep.chars.n_ref);
  rep.ser = ser(word_counts);
  rep.mer = mer(rep.words);
  rep.wil = wil(rep.words);
  rep.per = static_cast<double>(rep.per_numerator) / static_cast<double>(rep.words.n_ref);
  return rep;
}

inline void write_score_report_text(const ScoreReport& r, std::ostream& os) {
  os.precision(4);
  os << std::fixed;
  for (const auto& u : r.utts) {
    os << u.id << " wer " << u.wer << " cer " << u.cer << " mer " << u.mer << " wil "
       << u.wil << " per " << u.per << " [H " << u.words.hits << " S " << u.words.subs
       << " D " << u.words.dels << " I " << u.words.ins << "]\n";
  }
  os << "SUMMARY utts " << r.utts.size() << " WER " << r.wer << " SER " << r.ser
     << " CER " << r.cer << " MER " << r.mer << " WIL " << r.wil << " PER " << r.per
     << " [H " << r.words.hits << " S " << r.words.subs << " D " << r.words.dels
     << " I " << r.words.ins << " Nref " << r.words.n_ref << " Nhyp " << r.words.n_hyp
     << "]\n";
}

inline void write_score_report_json(const ScoreReport& r, std::ostream& os) {
  nlohmann::json j;
  auto counts_json = [](const AlignmentCounts& c) {
    return nlohmann::json{{"hits", c.hits}, {"subs", c.subs},   {"dels", c.dels},
                          {"ins", c.ins},   {"n_ref", c.n_ref}, {"n_hyp", c.n_hyp}};
  };
  j["utts"] = nlohmann::json::array();
  for (const auto& u : r.utts) {
    j["utts"].push_back({{"id", u.id},
                         {"wer", u.wer},
                         {"cer", u.cer},
                         {"mer", u.mer},
                         {"wil", u.wil},
                         {"per", u.per},
                         {"words", counts_json(u.words)}});
  }
  j["summary"] = {{"utts", r.utts.size()}, {"wer", r.wer}, {"ser", r.ser},
                  {"cer", r.cer},          {"mer", r.mer}, {"wil", r.wil},
                  {"per", r.per},          {"words", counts_json(r.words)},
                  {"chars", counts_json(r.chars)}};
  os << j.dump(2) << "\n";
}

}  // namespace asrkit
