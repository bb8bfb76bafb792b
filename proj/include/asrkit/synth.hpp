// asrkit/synth.hpp
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
// Deterministic synthetic speech corpus for desk-scale experiments.  Each
// phone is a fixed two-formant waveform; words are 2-4 phones, utterances
// 1-8 words with silence gaps.  Utterances come in clean/noisy pairs, the
// noisy copy carrying additive white noise at an exact SNR.  Everything
// derives from one seed: rerunning produces byte-identical wavs and
// manifests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "asrkit/audio.hpp"
#include "asrkit/common.hpp"
#include "asrkit/lexlm.hpp"

namespace asrkit {

struct SynthConfig {
  int vocab = 20;
  int utterances = 100;  // total wav count, clean + noisy copies together
  double noise_snr_db = 20.0;
  int sample_rate_hz = 8000;
  int num_speakers = 8;
  int num_phones = 10;
  std::uint64_t seed = 0;
  std::string tag = "train";  // utterance stream; the language ignores it

  void validate() const {
    if (vocab < 2) throw BadConfig("synth: vocab must be >= 2");
    if (utterances < 10) throw BadConfig("synth: utterances must be >= 10");
    if (sample_rate_hz < 4000) throw BadConfig("synth: sample rate too low");
    if (num_speakers < 1) throw BadConfig("synth: need at least one speaker");
    if (num_phones < 2 || num_phones > 12)
      throw BadConfig("synth: num_phones must be in [2,12]");
    if (!(noise_snr_db > 0.0) || !std::isfinite(noise_snr_db))
      throw BadConfig("synth: noise_snr_db must be positive and finite");
    if (tag.empty()) throw BadConfig("synth: tag must be nonempty");
  }
};

struct SynthPhone {
  std::string name;
  double f1 = 0.0, f2 = 0.0;  // Hz
};

struct SynthLanguage {
  std::vector<SynthPhone> phones;
  std::vector<std::string> words;           // sorted, unique
  std::vector<std::vector<int>> prons;      // parallel: phone indices
};

namespace detail {

// fixed inventory: well-separated (F1, F2) pairs below a 4 kHz Nyquist
inline const std::vector<SynthPhone>& synth_phone_table() {
  static const std::vector<SynthPhone> table = {
      {"aa", 700.0, 1200.0}, {"ee", 400.0, 2200.0}, {"ii", 300.0, 2700.0},
      {"oo", 500.0, 900.0},  {"uu", 350.0, 700.0},  {"ka", 850.0, 1700.0},
      {"ta", 600.0, 2500.0}, {"pa", 900.0, 2100.0}, {"sa", 450.0, 1500.0},
      {"ma", 750.0, 2700.0}, {"na", 550.0, 1900.0}, {"la", 320.0, 1100.0}};
  return table;
}

}  // namespace detail

// The language depends only on (seed, vocab, num_phones): two corpora built
// with the same seed share words, pronunciations and phone waveforms.
inline SynthLanguage synth_language(const SynthConfig& cfg) {
  cfg.validate();
  SynthLanguage lang;
  const auto& table = detail::synth_phone_table();
  lang.phones.assign(table.begin(), table.begin() + cfg.num_phones);

  Rng rng(derive_seed(cfg.seed, "synth-lang"));
  std::map<std::string, std::vector<int>> made;
  int guard = 0;
  while (static_cast<int>(made.size()) < cfg.vocab) {
    if (++guard > 100000)
      throw BadConfig("synth: vocab too large for the phone inventory");
    int len = rng.uniform_int(2, 4);
    std::vector<int> pron;
    std::string name;
    for (int i = 0; i < len; ++i) {
      int p = rng.uniform_int(0, cfg.num_phones - 1);
      pron.push_back(p);
      name += lang.phones[static_cast<std::size_t>(p)].name;
    }
    made.emplace(std::move(name), std::move(pron));  // duplicates collapse
  }
  for (auto& [name, pron] : made) {
    lang.words.push_back(name);
    lang.prons.push_back(pron);
  }
  return lang;
}

namespace detail {

inline void append_tone(std::vector<double>* x, double f1, double f2,
                        double seconds, int rate) {
  const int n = static_cast<int>(std::lround(seconds * rate));
  const int ramp = std::min(n / 2, rate / 200);  // 5 ms attack/decay
  const double amp = 0.25;
  for (int i = 0; i < n; ++i) {
    double env = 1.0;
    if (i < ramp) env = 0.5 - 0.5 * std::cos(M_PI * i / ramp);
    int tail = n - 1 - i;
    if (tail < ramp) env = std::min(env, 0.5 - 0.5 * std::cos(M_PI * tail / ramp));
    double t = static_cast<double>(i) / rate;
    x->push_back(amp * env *
                 (0.6 * std::sin(2.0 * M_PI * f1 * t) +
                  0.4 * std::sin(2.0 * M_PI * f2 * t)));
  }
}

inline void append_silence(std::vector<double>* x, double seconds, int rate) {
  x->insert(x->end(), static_cast<std::size_t>(std::lround(seconds * rate)),
            0.0);
}

inline double mean_power(const std::vector<double>& x) {
  double p = 0.0;
  for (double v : x) p += v * v;
  return p / static_cast<double>(x.size());
}

}  // namespace detail

// One utterance's clean waveform.  spk_factor scales both formants, a cheap
// stand-in for vocal-tract length differences across speakers.
inline std::vector<double> render_sentence(const SynthLanguage& lang,
                                           const std::vector<int>& word_ids,
                                           double spk_factor, int rate,
                                           Rng* rng) {
  std::vector<double> x;
  detail::append_silence(&x, rng->uniform(0.10, 0.20), rate);
  for (std::size_t w = 0; w < word_ids.size(); ++w) {
    if (w > 0) detail::append_silence(&x, rng->uniform(0.05, 0.15), rate);
    for (int p : lang.prons[static_cast<std::size_t>(word_ids[w])]) {
      const SynthPhone& ph = lang.phones[static_cast<std::size_t>(p)];
      detail::append_tone(&x, ph.f1 * spk_factor, ph.f2 * spk_factor,
                          rng->uniform(0.08, 0.16), rate);
    }
  }
  detail::append_silence(&x, rng->uniform(0.10, 0.20), rate);
  // acoustic floor ~32 dB under the tones: keeps silence non-constant and
  // steady-tone frames from collapsing to near-zero variance
  for (double& v : x) v += rng->gauss(0.0, 3e-3);
  return x;
}

// Additive white noise scaled so the measured signal/noise power ratio hits
// snr_db exactly (before 16-bit quantization).
inline std::vector<double> add_noise_at_snr(const std::vector<double>& clean,
                                            double snr_db, Rng* rng) {
  std::vector<double> noise(clean.size());
  for (double& v : noise) v = rng->gauss(0.0, 1.0);
  double target = detail::mean_power(clean) / std::pow(10.0, snr_db / 10.0);
  double alpha = std::sqrt(target / detail::mean_power(noise));
  std::vector<double> out(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i)
    out[i] = clean[i] + alpha * noise[i];
  return out;
}

// Writes wav/, wav.scp (paths relative to dir), text, utt2spk, spk2utt and
// lexicon.txt.  Bases pair up as <id>c (clean) and <id>n (noisy) until the
// utterance budget is spent; an odd budget leaves the last base clean-only.
inline void synth_corpus(const SynthConfig& cfg,
                         const std::filesystem::path& dir) {
  cfg.validate();
  SynthLanguage lang = synth_language(cfg);
  std::filesystem::create_directories(dir / "wav");

  const int bases = (cfg.utterances + 1) / 2;
  const int noisy = cfg.utterances - bases;
  std::vector<std::pair<std::string, std::string>> scp;
  std::map<std::string, std::vector<std::string>> text;
  std::map<std::string, std::string> utt2spk;

  for (int b = 0; b < bases; ++b) {
    Rng rng(derive_seed(cfg.seed,
                        "synth-utt-" + cfg.tag + "-" + std::to_string(b)));
    int spk = b % cfg.num_speakers;
    double spk_factor =
        cfg.num_speakers == 1
            ? 1.0
            : 1.0 + 0.04 * (static_cast<double>(spk) / (cfg.num_speakers - 1) -
                            0.5);
    int nwords = rng.uniform_int(1, 8);
    std::vector<int> word_ids;
    std::vector<std::string> tokens;
    for (int w = 0; w < nwords; ++w) {
      int id = rng.uniform_int(0, cfg.vocab - 1);
      word_ids.push_back(id);
      tokens.push_back(lang.words[static_cast<std::size_t>(id)]);
    }
    std::vector<double> clean =
        render_sentence(lang, word_ids, spk_factor, cfg.sample_rate_hz, &rng);

    char base_id[64];
    std::snprintf(base_id, sizeof(base_id), "%s%04d", cfg.tag.c_str(), b);
    char spk_id[16];
    std::snprintf(spk_id, sizeof(spk_id), "spk%02d", spk);

    auto emit = [&](const std::string& utt, const std::vector<double>& x) {
      AudioBuffer buf;
      buf.sample_rate_hz = cfg.sample_rate_hz;
      buf.source_id = utt;
      buf.channels.push_back(x);
      write_wav(buf, dir / "wav" / (utt + ".wav"));
      scp.emplace_back(utt, "wav/" + utt + ".wav");
      text[utt] = tokens;
      utt2spk[utt] = spk_id;
    };
    emit(std::string(base_id) + "c", clean);
    if (b < noisy)
      emit(std::string(base_id) + "n",
           add_noise_at_snr(clean, cfg.noise_snr_db, &rng));
  }

  {
    std::ofstream os(dir / "wav.scp");
    if (!os) throw IoError("cannot write " + (dir / "wav.scp").string());
    for (const auto& [utt, path] : scp) os << utt << ' ' << path << '\n';
  }
  {
    std::ofstream os(dir / "text");
    if (!os) throw IoError("cannot write " + (dir / "text").string());
    for (const auto& [utt, toks] : text) {
      os << utt;
      for (const auto& t : toks) os << ' ' << t;
      os << '\n';
    }
  }
  write_utt2spk(utt2spk, dir / "utt2spk");
  write_spk2utt(spk2utt_from(utt2spk), dir / "spk2utt");
  {
    std::ofstream os(dir / "lexicon.txt");
    if (!os) throw IoError("cannot write " + (dir / "lexicon.txt").string());
    for (std::size_t w = 0; w < lang.words.size(); ++w) {
      os << lang.words[w];
      for (int p : lang.prons[w])
        os << ' ' << lang.phones[static_cast<std::size_t>(p)].name;
      os << '\n';
    }
  }
}

}  // namespace asrkit
