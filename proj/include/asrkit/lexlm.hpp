// asrkit/lexlm.hpp
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
// Corpus cleaning, lexicon handling and n-gram language modeling with
// Witten-Bell smoothing, plus ARPA serialization and perplexity.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "asrkit/common.hpp"
#include "asrkit/fst.hpp"

namespace asrkit {

ASRKIT_ERROR(DuplicateUttId);
ASRKIT_ERROR(MalformedLine);
ASRKIT_ERROR(EmptyPronunciation);
ASRKIT_ERROR(BadOrder);
ASRKIT_ERROR(MalformedArpa);

inline const std::string kBos = "<s>";
inline const std::string kEos = "</s>";
inline const std::string kUnk = "<unk>";

// ---------------------------------------------------------------------------
// Corpus cleaning: lowercase, collapse whitespace, strip punctuation except
// intra-word hyphen/apostrophe.  Digit strings survive as tokens.

inline std::vector<std::string> clean_tokens(const std::string& transcript) {
  std::vector<std::string> out;
  for (const std::string& raw : split_ws(lowercase(transcript))) {
    std::string tok;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      unsigned char c = static_cast<unsigned char>(raw[i]);
      if (std::isalnum(c)) {
        tok.push_back(static_cast<char>(c));
      } else if ((c == '-' || c == '\'') && i > 0 && i + 1 < raw.size() &&
                 std::isalnum(static_cast<unsigned char>(raw[i - 1])) &&
                 std::isalnum(static_cast<unsigned char>(raw[i + 1]))) {
        tok.push_back(static_cast<char>(c));
      }
    }
    if (!tok.empty()) out.push_back(std::move(tok));
  }
  return out;
}

struct CleanCorpus {
  std::vector<std::pair<std::string, std::vector<std::string>>> text;  // utt order kept
  std::vector<std::string> vocab;                                      // sorted unique
};

inline CleanCorpus clean_corpus(const std::vector<std::string>& lines) {
  CleanCorpus out;
  std::set<std::string> seen_ids, vocab;
  for (const std::string& line : lines) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto [id, rest] = split_key_rest(t);
    if (!seen_ids.insert(id).second) throw DuplicateUttId("duplicate utterance id " + id);
    std::vector<std::string> words = clean_tokens(rest);
    if (words.empty()) {
      log_warn("dropping empty transcript for utterance " + id);
      continue;
    }
    for (const auto& w : words) vocab.insert(w);
    out.text.emplace_back(id, std::move(words));
  }
  out.vocab.assign(vocab.begin(), vocab.end());
  return out;
}

// ---------------------------------------------------------------------------
// Lexicon.

struct LexEntry {
  std::string word;
  std::vector<std::string> phones;
  double pron_prob = 1.0;
};

struct Lexicon {
  std::vector<LexEntry> entries;
  std::shared_ptr<SymbolTable> word_table;   // ids dense from 1; 0 = eps
  std::shared_ptr<SymbolTable> phone_table;  // "sil" is id 1
  std::vector<std::string> oov_report;       // vocab words with no pronunciation
};

// Lines "word phone..." or "word pron_prob phone...".  The probability field
// must contain a '.' so phone names that look like integers stay phones.
inline Lexicon load_lexicon(const std::filesystem::path& path,
                            const std::vector<std::string>& vocab) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  Lexicon lex;
  std::set<std::pair<std::string, std::vector<std::string>>> uniq;
  std::set<std::string> phones, words;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto fields = split_ws(t);
    if (fields.size() < 2)
      throw MalformedLine(path.string() + ":" + std::to_string(lineno) +
                          ": need word and pronunciation");
    LexEntry e;
    e.word = fields[0];
    std::size_t first_phone = 1;
    if (fields[1].find('.') != std::string::npos) {
      try {
        e.pron_prob = std::stod(fields[1]);
      } catch (const std::exception&) {
        throw MalformedLine(path.string() + ":" + std::to_string(lineno) +
                            ": bad pronunciation probability " + fields[1]);
      }
      if (!(e.pron_prob > 0.0 && e.pron_prob <= 1.0))
        throw MalformedLine(path.string() + ":" + std::to_string(lineno) +
                            ": pronunciation probability outside (0,1]");
      first_phone = 2;
    }
    if (first_phone >= fields.size())
      throw EmptyPronunciation(path.string() + ":" + std::to_string(lineno) + ": " +
                               e.word);
    e.phones.assign(fields.begin() + static_cast<std::ptrdiff_t>(first_phone),
                    fields.end());
    if (!uniq.insert({e.word, e.phones}).second)
      throw MalformedLine(path.string() + ":" + std::to_string(lineno) +
                          ": duplicate pronunciation for " + e.word);
    for (const auto& p : e.phones) phones.insert(p);
    words.insert(e.word);
    lex.entries.push_back(std::move(e));
  }
  for (const auto& w : vocab) {
    if (!words.count(w)) lex.oov_report.push_back(w);
    words.insert(w);
  }
  auto wt = std::make_shared<SymbolTable>();
  wt->name = "words";
  for (const auto& w : words) wt->add(w);
  lex.word_table = wt;
  auto pt = std::make_shared<SymbolTable>();
  pt->name = "phones";
  pt->add("sil");
  phones.erase("sil");
  for (const auto& p : phones) pt->add(p);
  lex.phone_table = pt;
  return lex;
}

// ---------------------------------------------------------------------------
// N-gram counting.  Utterances are padded <s> ... </s>; every k-gram window
// of the padded sequence is counted for k = 1..order.

using NgramCounts = std::vector<std::map<std::vector<std::string>, std::int64_t>>;

inline NgramCounts count_ngrams(
    const std::vector<std::vector<std::string>>& sequences, int order) {
  if (order < 1) throw BadOrder("count_ngrams: order >= 1 required");
  NgramCounts counts(static_cast<std::size_t>(order));
  for (const auto& seq : sequences) {
    std::vector<std::string> padded;
    padded.reserve(seq.size() + 2);
    padded.push_back(kBos);
    padded.insert(padded.end(), seq.begin(), seq.end());
    padded.push_back(kEos);
    for (int k = 1; k <= order; ++k)
      for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= padded.size(); ++i)
        ++counts[static_cast<std::size_t>(k - 1)][std::vector<std::string>(
            padded.begin() + static_cast<std::ptrdiff_t>(i),
            padded.begin() + static_cast<std::ptrdiff_t>(i + static_cast<std::size_t>(k)))];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// ArpaLm.

enum class Smoothing { kWittenBell, kNone };

struct ArpaLm {
  struct Entry {
    double log10_prob = 0.0;
    double log10_backoff = 0.0;
    bool has_backoff = false;
  };
  int order = 0;
  std::vector<std::map<std::vector<std::string>, Entry>> tables;  // [k-1] = k-grams
  std::vector<std::string> vocab;  // predicted words plus <s>

  bool in_vocab(const std::string& w) const {
    return tables.at(0).count({w}) > 0;
  }
  std::string map_oov(const std::string& w) const { return in_vocab(w) ? w : kUnk; }

  // log10 P(w | h).  Explicit entries always win; otherwise back off with the
  // history's weight.  A history that exists but carries no back-off weight is
  // a dead end (relative-frequency models assign unseen n-grams zero mass).
  // Callers map OOVs to <unk> first; a word absent from the unigram table
  // scores -inf.
  double log10_cond(std::vector<std::string> h, const std::string& w) const {
    if (static_cast<int>(h.size()) > order - 1)
      h.erase(h.begin(), h.end() - (order - 1));
    double acc = 0.0;
    while (true) {
      std::vector<std::string> key = h;
      key.push_back(w);
      const auto& table = tables.at(key.size() - 1);
      auto it = table.find(key);
      if (it != table.end()) return acc + it->second.log10_prob;
      if (h.empty()) return -std::numeric_limits<double>::infinity();
      const auto& htable = tables.at(h.size() - 1);
      auto hit = htable.find(h);
      if (hit != htable.end()) {
        if (!hit->second.has_backoff)
          return -std::numeric_limits<double>::infinity();
        acc += hit->second.log10_backoff;
      }
      h.erase(h.begin());
    }
  }

  // log10 probability of a full sentence (without <s>/</s> in `words`).
  double log10_sentence(const std::vector<std::string>& words) const {
    std::vector<std::string> h = {kBos};
    double total = 0.0;
    for (const auto& raw : words) {
      std::string w = map_oov(raw);
      total += log10_cond(h, w);
      h.push_back(w);
    }
    total += log10_cond(h, kEos);
    return total;
  }
};

inline ArpaLm estimate_lm(const NgramCounts& counts, int order, Smoothing smoothing) {
  if (order < 1 || static_cast<int>(counts.size()) < order)
    throw BadOrder("estimate_lm: counts do not cover order " + std::to_string(order));
  ArpaLm lm;
  lm.order = order;
  lm.tables.resize(static_cast<std::size_t>(order));

  // predicted vocabulary: everything seen except <s>, plus </s> and <unk>
  std::set<std::string> vocab;
  for (const auto& [key, c] : counts[0])
    if (key[0] != kBos) vocab.insert(key[0]);
  vocab.insert(kEos);
  if (smoothing == Smoothing::kWittenBell) vocab.insert(kUnk);
  lm.vocab.assign(vocab.begin(), vocab.end());
  lm.vocab.push_back(kBos);

  // unigram counts over predicted tokens
  std::int64_t c_tot = 0, types = 0;
  for (const auto& [key, c] : counts[0]) {
    if (key[0] == kBos) continue;
    c_tot += c;
    ++types;
  }
  if (c_tot == 0) throw BadConfig("estimate_lm: no n-gram counts");
  std::map<std::string, double> p_uni;
  if (smoothing == Smoothing::kWittenBell) {
    double base = 1.0 / static_cast<double>(vocab.size());
    double denom = static_cast<double>(c_tot + types);
    for (const auto& w : vocab) {
      auto it = counts[0].find({w});
      double c = (it == counts[0].end()) ? 0.0 : static_cast<double>(it->second);
      p_uni[w] = (c + static_cast<double>(types) * base) / denom;
    }
  } else {
    for (const auto& [key, c] : counts[0]) {
      if (key[0] == kBos) continue;
      p_uni[key[0]] = static_cast<double>(c) / static_cast<double>(c_tot);
    }
  }
  for (const auto& [w, p] : p_uni) lm.tables[0][{w}] = {std::log10(p), 0.0, false};
  lm.tables[0][{kBos}] = {-99.0, 0.0, false};

  // conditional distributions, built from P(w | shorter history) upward
  std::map<std::vector<std::string>, double> p_lower;
  for (const auto& [w, p] : p_uni) p_lower[{w}] = p;
  for (int k = 2; k <= order; ++k) {
    // group k-grams by history
    std::map<std::vector<std::string>, std::vector<std::pair<std::string, std::int64_t>>>
        by_hist;
    for (const auto& [key, c] : counts[static_cast<std::size_t>(k - 1)]) {
      std::vector<std::string> h(key.begin(), key.end() - 1);
      by_hist[h].emplace_back(key.back(), c);
    }
    std::map<std::vector<std::string>, double> p_this;
    for (const auto& [h, conts] : by_hist) {
      std::int64_t ch = 0;
      for (const auto& [w, c] : conts) ch += c;
      std::int64_t t_h = static_cast<std::int64_t>(conts.size());
      if (smoothing == Smoothing::kWittenBell) {
        double denom = static_cast<double>(ch + t_h);
        for (const auto& [w, c] : conts) {
          // lower-order conditional of the suffix; always seen because every
          // k-gram window contains its own suffix window
          std::vector<std::string> lkey(h.begin() + 1, h.end());
          lkey.push_back(w);
          double p = (static_cast<double>(c) +
                      static_cast<double>(t_h) * p_lower.at(lkey)) /
                     denom;
          std::vector<std::string> key = h;
          key.push_back(w);
          lm.tables[static_cast<std::size_t>(k - 1)][key] = {std::log10(p), 0.0, false};
          p_this[key] = p;
        }
        double gamma = static_cast<double>(t_h) / static_cast<double>(ch + t_h);
        auto hit = lm.tables[static_cast<std::size_t>(k - 2)].find(h);
        if (hit == lm.tables[static_cast<std::size_t>(k - 2)].end())
          throw Error("estimate_lm: history missing from lower-order table");
        hit->second.log10_backoff = std::log10(gamma);
        hit->second.has_backoff = true;
      } else {
        for (const auto& [w, c] : conts) {
          double p = static_cast<double>(c) / static_cast<double>(ch);
          std::vector<std::string> key = h;
          key.push_back(w);
          lm.tables[static_cast<std::size_t>(k - 1)][key] = {std::log10(p), 0.0, false};
          p_this[key] = p;
        }
      }
    }
    p_lower = std::move(p_this);
  }
  if (smoothing == Smoothing::kWittenBell) {
    // entries below the top order that never served as a history back off
    // freely (gamma = 1); making that explicit keeps the semantics in the
    // ARPA file across round trips
    for (int k = 1; k < order; ++k)
      for (auto& [key, e] : lm.tables[static_cast<std::size_t>(k - 1)])
        if (!e.has_backoff) {
          e.has_backoff = true;
          e.log10_backoff = 0.0;
        }
  }
  return lm;
}

// ---------------------------------------------------------------------------
// ARPA serialization.

inline void write_arpa(const ArpaLm& lm, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "\\data\\\n";
  for (int k = 1; k <= lm.order; ++k)
    os << "ngram " << k << "=" << lm.tables[static_cast<std::size_t>(k - 1)].size()
       << "\n";
  os << "\n";
  char buf[64];
  for (int k = 1; k <= lm.order; ++k) {
    os << "\\" << k << "-grams:\n";
    for (const auto& [key, e] : lm.tables[static_cast<std::size_t>(k - 1)]) {
      std::snprintf(buf, sizeof(buf), "%.6f", e.log10_prob);
      os << buf;
      for (const auto& w : key) os << "\t" << w;
      if (e.has_backoff) {
        std::snprintf(buf, sizeof(buf), "%.6f", e.log10_backoff);
        os << "\t" << buf;
      }
      os << "\n";
    }
    os << "\n";
  }
  os << "\\end\\\n";
}

inline ArpaLm read_arpa(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  // find \data\ section
  bool in_data = false;
  std::vector<std::size_t> declared;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line == "\\data\\") {
      in_data = true;
      break;
    }
  }
  if (!in_data) throw MalformedArpa(path.string() + ": missing \\data\\ section");
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty()) break;
    auto fields = split_ws(line);
    if (fields.size() != 2 || fields[0] != "ngram" ||
        fields[1].find('=') == std::string::npos)
      throw MalformedArpa(path.string() + ": bad ngram count line: " + line);
    declared.push_back(std::stoull(fields[1].substr(fields[1].find('=') + 1)));
  }
  if (declared.empty()) throw MalformedArpa(path.string() + ": no ngram counts");
  ArpaLm lm;
  lm.order = static_cast<int>(declared.size());
  lm.tables.resize(declared.size());
  int current = 0;
  bool saw_end = false;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty()) continue;
    if (line == "\\end\\") {
      saw_end = true;
      break;
    }
    if (line.size() > 2 && line[0] == '\\' && line.back() == ':') {
      current = std::stoi(line.substr(1));
      if (current < 1 || current > lm.order)
        throw MalformedArpa(path.string() + ": unexpected section " + line);
      continue;
    }
    if (current == 0) throw MalformedArpa(path.string() + ": entry outside any section");
    auto fields = split_ws(line);
    // prob + n words [+ backoff]
    if (static_cast<int>(fields.size()) < current + 1)
      throw MalformedArpa(path.string() + ": short entry: " + line);
    ArpaLm::Entry e;
    try {
      e.log10_prob = std::stod(fields[0]);
    } catch (const std::exception&) {
      throw MalformedArpa(path.string() + ": bad probability: " + line);
    }
    std::vector<std::string> key(fields.begin() + 1,
                                 fields.begin() + 1 + current);
    if (static_cast<int>(fields.size()) == current + 2) {
      e.log10_backoff = std::stod(fields[current + 1]);
      e.has_backoff = true;
    } else if (static_cast<int>(fields.size()) != current + 1) {
      throw MalformedArpa(path.string() + ": bad field count: " + line);
    }
    lm.tables[static_cast<std::size_t>(current - 1)][key] = e;
  }
  if (!saw_end) throw MalformedArpa(path.string() + ": missing \\end\\");
  for (int k = 1; k <= lm.order; ++k)
    if (lm.tables[static_cast<std::size_t>(k - 1)].size() != declared[static_cast<std::size_t>(k - 1)])
      throw MalformedArpa(path.string() + ": ngram " + std::to_string(k) +
                          " count mismatch: declared " +
                          std::to_string(declared[static_cast<std::size_t>(k - 1)]) + " got " +
                          std::to_string(lm.tables[static_cast<std::size_t>(k - 1)].size()));
  std::set<std::string> vocab;
  for (const auto& [key, e] : lm.tables[0]) vocab.insert(key[0]);
  lm.vocab.assign(vocab.begin(), vocab.end());
  return lm;
}

// ---------------------------------------------------------------------------
// Perplexity: 10^(-sum log10 P / N) over all predicted tokens (including
// </s>), OOVs mapped to <unk>.

inline double perplexity(const ArpaLm& lm,
                         const std::vector<std::vector<std::string>>& sequences) {
  double total = 0.0;
  std::int64_t n = 0;
  for (const auto& seq : sequences) {
    total += lm.log10_sentence(seq);
    n += static_cast<std::int64_t>(seq.size()) + 1;
  }
  if (n == 0) return 1.0;
  return std::pow(10.0, -total / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Speaker maps.

inline std::map<std::string, std::string> read_utt2spk(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty()) continue;
    auto [utt, spk] = split_key_rest(line);
    if (spk.empty()) throw MalformedLine("bad utt2spk line: " + line);
    if (!out.emplace(utt, spk).second) throw DuplicateUttId("utt2spk: duplicate " + utt);
  }
  return out;
}

inline std::map<std::string, std::vector<std::string>> spk2utt_from(
    const std::map<std::string, std::string>& utt2spk) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [utt, spk] : utt2spk) out[spk].push_back(utt);
  return out;
}

inline void write_utt2spk(const std::map<std::string, std::string>& utt2spk,
                          const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& [utt, spk] : utt2spk) os << utt << " " << spk << "\n";
}

inline void write_spk2utt(const std::map<std::string, std::vector<std::string>>& spk2utt,
                          const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& [spk, utts] : spk2utt) {
    os << spk;
    for (const auto& u : utts) os << " " << u;
    os << "\n";
  }
}

// Raw "utt_id transcript" reader (no normalization).
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

}  // namespace asrkit
