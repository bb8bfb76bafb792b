// tests/lexlm_test.cpp
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
#include <fstream>

#include "asrkit/lexlm.hpp"
#include "testutil.hpp"

using namespace asrkit;

namespace {

std::vector<std::vector<std::string>> seqs(std::initializer_list<const char*> ss) {
  std::vector<std::vector<std::string>> out;
  for (const char* s : ss) out.push_back(split_ws(s));
  return out;
}

// predicted vocabulary = every unigram entry except <s>
std::vector<std::string> predicted_vocab(const ArpaLm& lm) {
  std::vector<std::string> v;
  for (const auto& [key, e] : lm.tables[0])
    if (key[0] != kBos) v.push_back(key[0]);
  return v;
}

double cond_prob(const ArpaLm& lm, std::vector<std::string> h, const std::string& w) {
  return std::pow(10.0, lm.log10_cond(std::move(h), w));
}

}  // namespace

TEST_CASE("clean_corpus normalizes case, whitespace and punctuation", "[lexlm]") {
  auto cc = clean_corpus({"utt1 Salaam,  SALAAM"});
  REQUIRE(cc.text.size() == 1);
  CHECK(cc.text[0].first == "utt1");
  CHECK(cc.text[0].second == std::vector<std::string>{"salaam", "salaam"});
  CHECK(cc.vocab == std::vector<std::string>{"salaam"});

  auto cc2 = clean_corpus({"u1 Don't stop the well-known (noise)! End."});
  CHECK(cc2.text[0].second ==
        std::vector<std::string>{"don't", "stop", "the", "well-known", "noise", "end"});

  auto cc3 = clean_corpus({"u1 call 911 now - yes"});
  CHECK(cc3.text[0].second == std::vector<std::string>{"call", "911", "now", "yes"});

  // leading/trailing hyphen and apostrophe are punctuation, not word chars
  auto cc4 = clean_corpus({"u1 -dash 'quote' rock'n'roll-"});
  CHECK(cc4.text[0].second ==
        std::vector<std::string>{"dash", "quote", "rock'n'roll"});
}

TEST_CASE("clean_corpus drops empty transcripts and rejects duplicates", "[lexlm]") {
  auto cc = clean_corpus({"u1 hello", "u2 ...", "u3 world"});
  REQUIRE(cc.text.size() == 2);
  CHECK(cc.text[0].first == "u1");
  CHECK(cc.text[1].first == "u3");
  CHECK(cc.vocab == std::vector<std::string>{"hello", "world"});

  CHECK_THROWS_AS(clean_corpus({"u1 a", "u1 b"}), DuplicateUttId);
}

TEST_CASE("load_lexicon parses entries and reports OOVs", "[lexlm]") {
  test::TempDir tmp("lexlm");
  auto path = tmp.path() / "lexicon.txt";
  {
    std::ofstream os(path);
    os << "# comment\n";
    os << "salaam s aa l aa m\n";
    os << "salaam 0.5 s a l a m\n";
    os << "dunya d u n y aa\n";
  }
  auto lex = load_lexicon(path, {"salaam", "dunya", "shukria"});
  REQUIRE(lex.entries.size() == 3);
  CHECK(lex.entries[0].word == "salaam");
  CHECK(lex.entries[0].pron_prob == 1.0);
  CHECK(lex.entries[0].phones.size() == 5);
  CHECK(lex.entries[1].pron_prob == 0.5);
  CHECK(lex.entries[1].phones == std::vector<std::string>{"s", "a", "l", "a", "m"});
  CHECK(lex.oov_report == std::vector<std::string>{"shukria"});

  // silence phone always id 1; other ids dense
  CHECK(lex.phone_table->find("sil") == 1);
  CHECK(lex.phone_table->size() >= 9);
  CHECK(lex.word_table->find("dunya") > 0);
  CHECK(lex.word_table->find("shukria") > 0);  // vocab words always in the table
}

TEST_CASE("load_lexicon error cases", "[lexlm]") {
  test::TempDir tmp("lexlm");
  auto write = [&](const char* body) {
    auto p = tmp.path() / "lex.txt";
    std::ofstream os(p);
    os << body;
    return p;
  };
  CHECK_THROWS_AS(load_lexicon(write("word\n"), {}), MalformedLine);
  CHECK_THROWS_AS(load_lexicon(write("word 0.5\n"), {}), EmptyPronunciation);
  CHECK_THROWS_AS(load_lexicon(write("word 1.5 p\n"), {}), MalformedLine);
  CHECK_THROWS_AS(load_lexicon(write("word 0.0 p\n"), {}), MalformedLine);
  CHECK_THROWS_AS(load_lexicon(write("a p q\na p q\n"), {}), MalformedLine);
  CHECK_THROWS_AS(load_lexicon(tmp.path() / "missing.txt", {}), IoError);
}

TEST_CASE("count_ngrams pads with sentence markers", "[lexlm]") {
  auto c = count_ngrams(seqs({"a b"}), 2);
  REQUIRE(c.size() == 2);
  CHECK(c[1].at({"<s>", "a"}) == 1);
  CHECK(c[1].at({"a", "b"}) == 1);
  CHECK(c[1].at({"b", "</s>"}) == 1);
  CHECK(c[1].size() == 3);
  CHECK(c[0].at({"a"}) == 1);
  CHECK(c[0].at({"<s>"}) == 1);
  CHECK(c[0].at({"</s>"}) == 1);

  auto c2 = count_ngrams(seqs({"a a", "a a", "a a"}), 1);
  CHECK(c2[0].at({"a"}) == 6);

  auto c3 = count_ngrams(seqs({"x y z"}), 3);
  CHECK(c3[2].at({"<s>", "x", "y"}) == 1);
  CHECK(c3[2].at({"y", "z", "</s>"}) == 1);
  CHECK(c3[2].size() == 3);

  CHECK_THROWS_AS(count_ngrams(seqs({"a"}), 0), BadOrder);
}

TEST_CASE("witten-bell bigram matches hand computation", "[lexlm]") {
  // corpus: "a b" twice, "a c" once
  auto counts = count_ngrams(seqs({"a b", "a b", "a c"}), 2);
  auto lm = estimate_lm(counts, 2, Smoothing::kWittenBell);

  // unigrams: c(a)=3 c(b)=2 c(c)=1 c(</s>)=3, total 9, 4 types,
  // vocab {a,b,c,</s>,<unk>} so the uniform base is 1/5
  double pb = (2.0 + 4.0 * 0.2) / 13.0;
  double pa = (3.0 + 4.0 * 0.2) / 13.0;
  CHECK(cond_prob(lm, {}, "b") == Catch::Approx(pb).epsilon(1e-12));
  CHECK(cond_prob(lm, {}, "<unk>") == Catch::Approx(0.8 / 13.0).epsilon(1e-12));

  // P(b|a) = (c(a,b) + T(a) P(b)) / (c(a) + T(a)), T(a) = 2
  CHECK(cond_prob(lm, {"a"}, "b") == Catch::Approx((2.0 + 2.0 * pb) / 5.0).epsilon(1e-12));
  // P(a|<s>) = (3 + 1*P(a)) / 4
  CHECK(cond_prob(lm, {"<s>"}, "a") ==
        Catch::Approx((3.0 + pa) / 4.0).epsilon(1e-12));
  // back-off route: b unseen after <s>, gamma(<s>) = T/(c+T) = 1/4
  CHECK(cond_prob(lm, {"<s>"}, "b") == Catch::Approx(0.25 * pb).epsilon(1e-12));
}

TEST_CASE("relative-frequency model has no back-off and dead-ends on unseen", "[lexlm]") {
  auto counts = count_ngrams(seqs({"a b", "a c", "b a"}), 2);
  auto lm = estimate_lm(counts, 2, Smoothing::kNone);

  // continuations of "a": b, c and </s> (from "b a"), once each
  CHECK(cond_prob(lm, {"a"}, "b") == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(cond_prob(lm, {"a"}, "c") == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(cond_prob(lm, {"a"}, "</s>") == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  for (const auto& table : lm.tables)
    for (const auto& [key, e] : table) CHECK_FALSE(e.has_backoff);
  // unseen bigram of seen words gets zero mass, not a back-off estimate
  CHECK(lm.log10_cond({"b"}, "b") == -std::numeric_limits<double>::infinity());
  // explicit distributions still sum to one
  double s = 0.0;
  for (const auto& w : predicted_vocab(lm)) s += cond_prob(lm, {"a"}, w);
  CHECK(s == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("explicit entries beat the back-off route", "[lexlm]") {
  ArpaLm lm;
  lm.order = 2;
  lm.tables.resize(2);
  lm.tables[0][{"a"}] = {-0.1, 0.0, true};
  lm.tables[1][{"a", "a"}] = {-2.0, 0.0, false};
  // back-off route would give 10^(0 - 0.1), far larger than 10^-2
  CHECK(lm.log10_cond({"a"}, "a") == Catch::Approx(-2.0));
}

TEST_CASE("per-history distributions sum to one", "[lexlm]") {
  Rng rng(derive_seed(77, "lexlm-sums"));
  const std::vector<std::string> alphabet = {"aa", "bb", "cc", "dd", "ee"};
  for (int trial = 0; trial < 6; ++trial) {
    std::vector<std::vector<std::string>> text;
    int nsent = rng.uniform_int(3, 10);
    for (int s = 0; s < nsent; ++s) {
      std::vector<std::string> sent;
      int len = rng.uniform_int(1, 6);
      for (int i = 0; i < len; ++i)
        sent.push_back(alphabet[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(alphabet.size()) - 1))]);
      text.push_back(std::move(sent));
    }
    int order = rng.uniform_int(1, 3);
    auto lm = estimate_lm(count_ngrams(text, order), order, Smoothing::kWittenBell);
    auto vocab = predicted_vocab(lm);

    // every entry of every sub-top table acts as a history
    for (int k = 0; k + 1 < order; ++k) {
      for (const auto& [h, e] : lm.tables[static_cast<std::size_t>(k)]) {
        double sum = 0.0;
        for (const auto& w : vocab) sum += cond_prob(lm, h, w);
        INFO("order " << order << " history size " << h.size());
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
      }
    }
    // and the empty history (unigram distribution)
    double sum = 0.0;
    for (const auto& w : vocab) sum += cond_prob(lm, {}, w);
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("sentence probability factorizes into conditionals", "[lexlm]") {
  auto text = seqs({"one two three", "two three", "three one one two"});
  auto lm = estimate_lm(count_ngrams(text, 3), 3, Smoothing::kWittenBell);

  for (const auto& sent : text) {
    double direct = 1.0;
    std::vector<std::string> h = {"<s>"};
    for (const auto& w : sent) {
      direct *= cond_prob(lm, h, w);
      h.push_back(w);
    }
    direct *= cond_prob(lm, h, "</s>");
    CHECK(lm.log10_sentence(sent) ==
          Catch::Approx(std::log10(direct)).margin(1e-10));
  }
}

TEST_CASE("arpa round trip is the identity", "[lexlm]") {
  test::TempDir tmp("lexlm");
  auto text = seqs({"red green blue", "green blue", "blue red", "red red green"});
  for (auto smoothing : {Smoothing::kWittenBell, Smoothing::kNone}) {
    auto lm = estimate_lm(count_ngrams(text, 3), 3, smoothing);
    auto path = tmp.path() / "lm.arpa";
    write_arpa(lm, path);
    auto rt = read_arpa(path);
    REQUIRE(rt.order == lm.order);
    for (std::size_t k = 0; k < lm.tables.size(); ++k) {
      REQUIRE(rt.tables[k].size() == lm.tables[k].size());
      for (const auto& [key, e] : lm.tables[k]) {
        auto it = rt.tables[k].find(key);
        REQUIRE(it != rt.tables[k].end());
        CHECK(it->second.log10_prob == Catch::Approx(e.log10_prob).margin(1e-6));
        CHECK(it->second.has_backoff == e.has_backoff);
        if (e.has_backoff)
          CHECK(it->second.log10_backoff ==
                Catch::Approx(e.log10_backoff).margin(1e-6));
      }
    }
    // scoring agrees after the round trip
    for (const auto& sent : text)
      CHECK(rt.log10_sentence(sent) ==
            Catch::Approx(lm.log10_sentence(sent)).margin(1e-5));
  }
}

TEST_CASE("hand-written unigram arpa parses", "[lexlm]") {
  test::TempDir tmp("lexlm");
  auto path = tmp.path() / "uni.arpa";
  {
    std::ofstream os(path);
    os << "\\data\\\n"
       << "ngram 1=2\n"
       << "\n"
       << "\\1-grams:\n"
       << "-0.301030 yes\n"
       << "-0.301030 no\n"
       << "\n"
       << "\\end\\\n";
  }
  auto lm = read_arpa(path);
  REQUIRE(lm.order == 1);
  REQUIRE(lm.tables[0].size() == 2);
  CHECK(std::pow(10.0, lm.tables[0].at({"yes"}).log10_prob) ==
        Catch::Approx(0.5).margin(1e-6));
  CHECK(std::pow(10.0, lm.log10_cond({}, "no")) == Catch::Approx(0.5).margin(1e-6));
}

TEST_CASE("malformed arpa files are rejected", "[lexlm]") {
  test::TempDir tmp("lexlm");
  auto write = [&](const char* body) {
    auto p = tmp.path() / "bad.arpa";
    std::ofstream os(p);
    os << body;
    return p;
  };
  // no \data\ at all
  CHECK_THROWS_AS(read_arpa(write("\\1-grams:\n-0.3 a\n\\end\\\n")), MalformedArpa);
  // declared two unigrams, provided one
  CHECK_THROWS_AS(
      read_arpa(write("\\data\\\nngram 1=2\n\n\\1-grams:\n-0.3 a\n\n\\end\\\n")),
      MalformedArpa);
  // missing the end marker
  CHECK_THROWS_AS(read_arpa(write("\\data\\\nngram 1=1\n\n\\1-grams:\n-0.3 a\n")),
                  MalformedArpa);
  // entry with too few fields for its section
  CHECK_THROWS_AS(
      read_arpa(write("\\data\\\nngram 2=1\nngram 1=1\n")), MalformedArpa);
  CHECK_THROWS_AS(
      read_arpa(
          write("\\data\\\nngram 1=1\nngram 2=1\n\n\\1-grams:\n-0.3 a\n\n"
                "\\2-grams:\n-0.2\n\n\\end\\\n")),
      MalformedArpa);
}

TEST_CASE("perplexity fixtures", "[lexlm]") {
  // memorized corpus, no smoothing: every conditional is 1
  auto lm = estimate_lm(count_ngrams(seqs({"a b"}), 2), 2, Smoothing::kNone);
  CHECK(perplexity(lm, seqs({"a b"})) == Catch::Approx(1.0).margin(1e-9));

  // uniform unigram model over 4 symbols (</s> being one of them)
  ArpaLm uni;
  uni.order = 1;
  uni.tables.resize(1);
  for (const char* w : {"p", "q", "r", "</s>"})
    uni.tables[0][{w}] = {std::log10(0.25), 0.0, false};
  CHECK(perplexity(uni, seqs({"p q r", "q p"})) == Catch::Approx(4.0).margin(1e-9));

  // direct product-of-probabilities on a 3-utterance fixture
  auto text = seqs({"cat sat", "cat ran", "dog sat"});
  auto wb = estimate_lm(count_ngrams(text, 2), 2, Smoothing::kWittenBell);
  auto eval = seqs({"cat sat", "dog ran", "cat cat"});
  double logp = 0.0;
  std::int64_t n = 0;
  for (const auto& sent : eval) {
    logp += wb.log10_sentence(sent);
    n += static_cast<std::int64_t>(sent.size()) + 1;
  }
  CHECK(perplexity(wb, eval) ==
        Catch::Approx(std::pow(10.0, -logp / static_cast<double>(n))).margin(1e-9));

  // OOVs score as <unk>: finite perplexity under witten-bell
  CHECK(std::isfinite(perplexity(wb, seqs({"zebra sat"}))));
  CHECK(perplexity(wb, seqs({"zebra sat"})) ==
        Catch::Approx(perplexity(wb, seqs({"<unk> sat"}))).margin(1e-9));
}

TEST_CASE("estimate_lm rejects bad orders", "[lexlm]") {
  auto counts = count_ngrams(seqs({"a b"}), 2);
  CHECK_THROWS_AS(estimate_lm(counts, 3, Smoothing::kWittenBell), BadOrder);
  CHECK_THROWS_AS(estimate_lm(counts, 0, Smoothing::kWittenBell), BadOrder);
}

TEST_CASE("speaker maps round trip", "[lexlm]") {
  test::TempDir tmp("lexlm");
  std::map<std::string, std::string> utt2spk = {
      {"u1", "spkA"}, {"u2", "spkA"}, {"u3", "spkB"}};
  write_utt2spk(utt2spk, tmp.path() / "utt2spk");
  auto rt = read_utt2spk(tmp.path() / "utt2spk");
  CHECK(rt == utt2spk);

  auto spk2utt = spk2utt_from(utt2spk);
  REQUIRE(spk2utt.size() == 2);
  CHECK(spk2utt.at("spkA") == std::vector<std::string>{"u1", "u2"});
  CHECK(spk2utt.at("spkB") == std::vector<std::string>{"u3"});
  write_spk2utt(spk2utt, tmp.path() / "spk2utt");

  {
    std::ofstream os(tmp.path() / "dup");
    os << "u1 a\nu1 b\n";
  }
  CHECK_THROWS_AS(read_utt2spk(tmp.path() / "dup"), DuplicateUttId);
}
