// asrkit/pipeline.hpp
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
// Stage orchestration.  Validated data directories, content-hash stamps for
// idempotent reruns, and the end-to-end recipe: features -> LM -> GMM ladder
// -> chain training -> graphs -> decoding -> scoring.  Every stage hashes its
// actual inputs (file bytes plus the config keys it reads), so a rerun with
// nothing changed is a no-op and a downstream stage refuses to run on top of
// stale upstream artifacts.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "asrkit/audio.hpp"
#include "asrkit/chain.hpp"
#include "asrkit/common.hpp"
#include "asrkit/decode.hpp"
#include "asrkit/feats.hpp"
#include "asrkit/fst.hpp"
#include "asrkit/gmm.hpp"
#include "asrkit/graph.hpp"
#include "asrkit/lexlm.hpp"
#include "asrkit/score.hpp"
#include "asrkit/synth.hpp"

namespace asrkit {

ASRKIT_ERROR(ValidationFailed);
ASRKIT_ERROR(MissingArtifact);

// ---------------------------------------------------------------------------
// Data directories.  The Kaldi-style quartet: wav.scp, text, utt2spk,
// spk2utt, all keyed by utterance id.  Loading validates cross-file
// consistency and names the first offender.

struct DataDir {
  std::filesystem::path root;
  std::string tag;  // basename of root; keys per-set artifacts in the work dir
  std::vector<std::pair<std::string, std::filesystem::path>> wav;  // scp order
  std::map<std::string, std::vector<std::string>> text;
  std::map<std::string, std::string> utt2spk;
  std::map<std::string, std::vector<std::string>> spk2utt;

  std::vector<std::string> utt_ids() const {
    std::vector<std::string> out;
    out.reserve(wav.size());
    for (const auto& [utt, path] : wav) out.push_back(utt);
    return out;
  }
};

namespace detail {

inline std::map<std::string, std::vector<std::string>> read_spk2utt(
    const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::map<std::string, std::vector<std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(trim(line));
    std::string spk;
    if (!(ls >> spk)) continue;
    if (out.count(spk))
      throw ValidationFailed("duplicate speaker " + spk + " in " + path.string());
    std::vector<std::string> utts;
    std::string u;
    while (ls >> u) utts.push_back(u);
    out[spk] = std::move(utts);
  }
  return out;
}

}  // namespace detail

inline DataDir load_data_dir(const std::filesystem::path& root) {
  DataDir d;
  d.root = root;
  d.tag = root.filename().string();
  if (d.tag.empty()) d.tag = root.parent_path().filename().string();
  for (const char* f : {"wav.scp", "text", "utt2spk", "spk2utt"})
    if (!std::filesystem::exists(root / f))
      throw MissingArtifact((root / f).string() + " does not exist");

  for (auto& [utt, path] : read_wav_scp(root / "wav.scp")) {
    std::filesystem::path p(path);
    auto resolved = p.is_absolute() ? p : root / p;
    for (const auto& [seen, p] : d.wav)
      if (seen == utt)
        throw ValidationFailed("duplicate utterance " + utt + " in wav.scp");
    if (!std::filesystem::exists(resolved))
      throw ValidationFailed("utterance " + utt + ": wav file not found: " +
                             resolved.string());
    d.wav.emplace_back(utt, resolved);
  }
  if (d.wav.empty()) throw ValidationFailed("empty wav.scp in " + root.string());

  {
    std::ifstream is(root / "text");
    if (!is) throw IoError("cannot open " + (root / "text").string());
    std::string line;
    while (std::getline(is, line)) {
      line = trim(line);
      if (line.empty()) continue;
      auto sp = line.find_first_of(" \t");
      std::string utt = line.substr(0, sp);
      std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
      if (d.text.count(utt))
        throw ValidationFailed("duplicate utterance " + utt + " in text");
      d.text[utt] = clean_tokens(rest);
    }
  }

  try {
    d.utt2spk = read_utt2spk(root / "utt2spk");
  } catch (const Error& e) {
    throw ValidationFailed(std::string("bad utt2spk: ") + e.what());
  }
  d.spk2utt = detail::read_spk2utt(root / "spk2utt");

  // every utterance appears in all three manifests
  for (const auto& [utt, path] : d.wav) {
    if (!d.text.count(utt))
      throw ValidationFailed("utterance " + utt + " missing from text");
    if (!d.utt2spk.count(utt))
      throw ValidationFailed("utterance " + utt + " missing from utt2spk");
  }
  std::set<std::string> in_scp;
  for (const auto& [utt, path] : d.wav) in_scp.insert(utt);
  for (const auto& [utt, toks] : d.text)
    if (!in_scp.count(utt))
      throw ValidationFailed("utterance " + utt + " in text but not wav.scp");
  for (const auto& [utt, spk] : d.utt2spk)
    if (!in_scp.count(utt))
      throw ValidationFailed("utterance " + utt + " in utt2spk but not wav.scp");

  // spk2utt must be the exact inverse of utt2spk
  auto expect = spk2utt_from(d.utt2spk);
  for (const auto& [spk, utts] : d.spk2utt) {
    auto it = expect.find(spk);
    if (it == expect.end())
      throw ValidationFailed("speaker " + spk + " in spk2utt has no utterances");
    auto sorted = utts;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != it->second) {
      for (const auto& u : utts)
        if (!d.utt2spk.count(u) || d.utt2spk.at(u) != spk)
          throw ValidationFailed("utterance " + u +
                                 " listed under speaker " + spk +
                                 " but utt2spk disagrees");
      throw ValidationFailed("spk2utt entry for " + spk +
                             " does not match utt2spk");
    }
  }
  for (const auto& [spk, utts] : expect)
    if (!d.spk2utt.count(spk))
      throw ValidationFailed("speaker " + spk + " missing from spk2utt");
  return d;
}

// ---------------------------------------------------------------------------
// Pipeline configuration.  One flat key=value namespace covering every stage;
// the same strings work in a config file and as command-line overrides.

struct PipelineConfig {
  SynthConfig synth;   // tag and seed are filled in per invocation
  FeatureConfig mfcc;  // the 13-dim MFCC front end; fbank shares the framing
  int fbank_bins = 40;
  int delta_window = 2;
  int lm_order = 2;
  Smoothing lm_smoothing = Smoothing::kWittenBell;
  GmmLadderConfig gmm;
  int chain_max_leaves = 250;
  double chain_tree_gain = 100.0;
  int phone_lm_order = 4;
  TdnnSpec tdnn;
  ChainConfig chain;
  double decode_beam = 16.0;
  int decode_max_active = 7000;
  double gmm_acoustic_scale = 0.1;
  double chain_acoustic_scale = 1.0;
  std::uint64_t seed = 0;
  int jobs = 1;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline int cfg_int(const std::string& key, const std::string& val) {
  try {
    std::size_t pos = 0;
    int v = std::stoi(val, &pos);
    if (pos != val.size()) throw std::invalid_argument(val);
    return v;
  } catch (const std::exception&) {
    throw BadConfig("config key " + key + ": not an integer: '" + val + "'");
  }
}

inline double cfg_double(const std::string& key, const std::string& val) {
  try {
    std::size_t pos = 0;
    double v = std::stod(val, &pos);
    if (pos != val.size()) throw std::invalid_argument(val);
    return v;
  } catch (const std::exception&) {
    throw BadConfig("config key " + key + ": not a number: '" + val + "'");
  }
}

inline std::uint64_t cfg_u64(const std::string& key, const std::string& val) {
  try {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(val, &pos);
    if (pos != val.size()) throw std::invalid_argument(val);
    return v;
  } catch (const std::exception&) {
    throw BadConfig("config key " + key + ": not an unsigned integer: '" +
                    val + "'");
  }
}

inline std::vector<int> cfg_int_list(const std::string& key,
                                     const std::string& val) {
  std::vector<int> out;
  std::string item;
  std::istringstream is(val);
  while (std::getline(is, item, ','))
    if (!trim(item).empty()) out.push_back(cfg_int(key, trim(item)));
  return out;
}

struct ConfigKey {
  std::string key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  auto ikey = [](const char* k, auto field) {
    return ConfigKey{
        k,
        [field](const PipelineConfig& c) { return std::to_string(c.*field); },
        [k, field](PipelineConfig& c, const std::string& v) {
          c.*field = cfg_int(k, v);
        }};
  };
  auto dkey = [](const char* k, auto field) {
    return ConfigKey{
        k, [field](const PipelineConfig& c) { return fmt_double(c.*field); },
        [k, field](PipelineConfig& c, const std::string& v) {
          c.*field = cfg_double(k, v);
        }};
  };
  // nested sub-struct members need a two-step pointer
  auto nikey = [](const char* k, auto outer, auto inner) {
    return ConfigKey{
        k,
        [outer, inner](const PipelineConfig& c) {
          return std::to_string(c.*outer.*inner);
        },
        [k, outer, inner](PipelineConfig& c, const std::string& v) {
          c.*outer.*inner = cfg_int(k, v);
        }};
  };
  auto ndkey = [](const char* k, auto outer, auto inner) {
    return ConfigKey{
        k,
        [outer, inner](const PipelineConfig& c) {
          return fmt_double(c.*outer.*inner);
        },
        [k, outer, inner](PipelineConfig& c, const std::string& v) {
          c.*outer.*inner = cfg_double(k, v);
        }};
  };
  auto nlkey = [](const char* k, auto outer, auto inner) {
    return ConfigKey{
        k,
        [outer, inner](const PipelineConfig& c) {
          return fmt_int_list(c.*outer.*inner);
        },
        [k, outer, inner](PipelineConfig& c, const std::string& v) {
          c.*outer.*inner = cfg_int_list(k, v);
        }};
  };

  static const std::vector<ConfigKey> keys = {
      nikey("synth.vocab", &PipelineConfig::synth, &SynthConfig::vocab),
      nikey("synth.utterances", &PipelineConfig::synth,
            &SynthConfig::utterances),
      ndkey("synth.noise_snr_db", &PipelineConfig::synth,
            &SynthConfig::noise_snr_db),
      nikey("synth.sample_rate_hz", &PipelineConfig::synth,
            &SynthConfig::sample_rate_hz),
      nikey("synth.num_speakers", &PipelineConfig::synth,
            &SynthConfig::num_speakers),
      nikey("synth.num_phones", &PipelineConfig::synth,
            &SynthConfig::num_phones),

      ndkey("feats.window_ms", &PipelineConfig::mfcc,
            &FeatureConfig::window_ms),
      ndkey("feats.shift_ms", &PipelineConfig::mfcc, &FeatureConfig::shift_ms),
      nikey("feats.num_mel_bins", &PipelineConfig::mfcc,
            &FeatureConfig::num_mel_bins),
      nikey("feats.num_cepstra", &PipelineConfig::mfcc,
            &FeatureConfig::num_cepstra),
      ndkey("feats.preemph", &PipelineConfig::mfcc, &FeatureConfig::preemph),
      ndkey("feats.dither", &PipelineConfig::mfcc, &FeatureConfig::dither),
      ikey("feats.fbank_bins", &PipelineConfig::fbank_bins),
      ikey("feats.delta_window", &PipelineConfig::delta_window),

      ikey("lm.order", &PipelineConfig::lm_order),
      ConfigKey{"lm.smoothing",
                [](const PipelineConfig& c) {
                  return std::string(c.lm_smoothing == Smoothing::kWittenBell
                                         ? "witten_bell"
                                         : "none");
                },
                [](PipelineConfig& c, const std::string& v) {
                  if (v == "witten_bell")
                    c.lm_smoothing = Smoothing::kWittenBell;
                  else if (v == "none")
                    c.lm_smoothing = Smoothing::kNone;
                  else
                    throw BadConfig("lm.smoothing: unknown value '" + v + "'");
                }},

      nikey("gmm.mono_iters", &PipelineConfig::gmm,
            &GmmLadderConfig::mono_iters),
      nikey("gmm.tri_iters", &PipelineConfig::gmm, &GmmLadderConfig::tri_iters),
      nlkey("gmm.realign_iters", &PipelineConfig::gmm,
            &GmmLadderConfig::realign_iters),
      nikey("gmm.mono_target_gauss", &PipelineConfig::gmm,
            &GmmLadderConfig::mono_target_gauss),
      nikey("gmm.tri_target_gauss", &PipelineConfig::gmm,
            &GmmLadderConfig::tri_target_gauss),
      nikey("gmm.max_leaves", &PipelineConfig::gmm,
            &GmmLadderConfig::max_leaves),
      ndkey("gmm.tree_gain_threshold", &PipelineConfig::gmm,
            &GmmLadderConfig::tree_gain_threshold),
      ndkey("gmm.beam", &PipelineConfig::gmm, &GmmLadderConfig::beam),
      ndkey("gmm.acoustic_scale", &PipelineConfig::gmm,
            &GmmLadderConfig::acoustic_scale),
      ndkey("gmm.sil_prob", &PipelineConfig::gmm, &GmmLadderConfig::sil_prob),

      ikey("chain.max_leaves", &PipelineConfig::chain_max_leaves),
      dkey("chain.tree_gain", &PipelineConfig::chain_tree_gain),
      ikey("chain.phone_lm_order", &PipelineConfig::phone_lm_order),
      nikey("chain.conv_layers", &PipelineConfig::tdnn, &TdnnSpec::conv_layers),
      nikey("chain.conv_filters", &PipelineConfig::tdnn,
            &TdnnSpec::conv_filters),
      nikey("chain.hidden_dim", &PipelineConfig::tdnn, &TdnnSpec::hidden_dim),
      nikey("chain.tdnn_layers", &PipelineConfig::tdnn, &TdnnSpec::tdnn_layers),
      nikey("chain.subsample_layer", &PipelineConfig::tdnn,
            &TdnnSpec::subsample_layer),
      nikey("chain.chunk_frames", &PipelineConfig::chain,
            &ChainConfig::chunk_frames),
      nlkey("chain.alt_chunks", &PipelineConfig::chain,
            &ChainConfig::alt_chunks),
      nikey("chain.tolerance", &PipelineConfig::chain, &ChainConfig::tolerance),
      ndkey("chain.leaky", &PipelineConfig::chain, &ChainConfig::leaky),
      ndkey("chain.l2_out", &PipelineConfig::chain, &ChainConfig::l2_out),
      ndkey("chain.xent_scale", &PipelineConfig::chain,
            &ChainConfig::xent_scale),
      nikey("chain.minibatch", &PipelineConfig::chain, &ChainConfig::minibatch),
      nikey("chain.epochs", &PipelineConfig::chain, &ChainConfig::epochs),
      ndkey("chain.lr_init", &PipelineConfig::chain, &ChainConfig::lr_init),
      ndkey("chain.lr_final", &PipelineConfig::chain, &ChainConfig::lr_final),
      ndkey("chain.max_change", &PipelineConfig::chain,
            &ChainConfig::max_change),

      dkey("decode.beam", &PipelineConfig::decode_beam),
      ikey("decode.max_active", &PipelineConfig::decode_max_active),
      dkey("decode.gmm_acoustic_scale", &PipelineConfig::gmm_acoustic_scale),
      dkey("decode.chain_acoustic_scale",
           &PipelineConfig::chain_acoustic_scale),

      ConfigKey{"seed",
                [](const PipelineConfig& c) { return std::to_string(c.seed); },
                [](PipelineConfig& c, const std::string& v) {
                  c.seed = cfg_u64("seed", v);
                }},
      ikey("jobs", &PipelineConfig::jobs),
  };
  return keys;
}

}  // namespace detail

inline void apply_config(PipelineConfig* cfg,
                         const std::map<std::string, std::string>& kv) {
  for (const auto& [key, val] : kv) {
    bool found = false;
    for (const auto& ck : detail::config_keys()) {
      if (ck.key == key) {
        ck.set(*cfg, val);
        found = true;
        break;
      }
    }
    if (!found) throw BadConfig("unknown config key '" + key + "'");
  }
}

// key=value per line; '#' starts a comment; blank lines ignored
inline std::map<std::string, std::string> read_config_file(
    const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw BadConfig(path.string() + ":" + std::to_string(lineno) +
                      ": expected key=value, got '" + line + "'");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

inline std::string dump_config(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& ck : detail::config_keys())
    out += ck.key + "=" + ck.get(cfg) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Content hashing (FNV-1a over file bytes and config strings).

namespace detail {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv_bytes(const void* data, std::size_t n,
                               std::uint64_t h) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv_str(const std::string& s, std::uint64_t h) {
  h = fnv_bytes(s.data(), s.size(), h);
  h ^= 0xff;  // separator so "ab"+"c" != "a"+"bc"
  return h * kFnvPrime;
}

inline std::uint64_t fnv_u64(std::uint64_t v, std::uint64_t h) {
  return fnv_bytes(&v, sizeof v, h);
}

inline std::uint64_t fnv_file(const std::filesystem::path& p,
                              std::uint64_t h) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw MissingArtifact("cannot read " + p.string());
  char buf[65536];
  while (is.read(buf, sizeof buf) || is.gcount() > 0)
    h = fnv_bytes(buf, static_cast<std::size_t>(is.gcount()), h);
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Context-dependency serialization (the tables the tree resolved into).

inline void write_context_dep(const ContextDep& cd, std::ostream& os) {
  os.write("CDEP", 4);
  write_pod<std::uint32_t>(os, 1);
  write_pod<std::int32_t>(os, cd.width);
  write_pod<std::int32_t>(os, cd.num_pdfs);
  auto write_tab = [&os](const SymbolTable& t) {
    std::ostringstream ss;
    write_symtab(t, ss);
    auto s = ss.str();
    write_pod<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
  };
  write_tab(*cd.phone_table);
  bool shared = cd.cd_table == cd.phone_table;
  write_pod<std::uint8_t>(os, shared ? 1 : 0);
  if (!shared) write_tab(*cd.cd_table);
  write_pod<std::uint64_t>(os, cd.center.size());
  for (int v : cd.center) write_pod<std::int32_t>(os, v);
  write_pod<std::uint64_t>(os, cd.pdfs.size());
  for (const auto& row : cd.pdfs) {
    write_pod<std::uint64_t>(os, row.size());
    for (int v : row) write_pod<std::int32_t>(os, v);
  }
}

inline ContextDep read_context_dep(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CDEP")
    throw IoError("not a context-dependency blob");
  if (read_pod<std::uint32_t>(is) != 1)
    throw IoError("unsupported context-dependency version");
  ContextDep cd;
  cd.width = read_pod<std::int32_t>(is);
  cd.num_pdfs = read_pod<std::int32_t>(is);
  auto read_tab = [&is](const std::string& name) {
    auto n = read_pod<std::uint64_t>(is);
    std::string s(static_cast<std::size_t>(n), '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    std::istringstream ss(s);
    return std::make_shared<const SymbolTable>(read_symtab(ss, name));
  };
  cd.phone_table = read_tab("phones");
  bool shared = read_pod<std::uint8_t>(is) != 0;
  cd.cd_table = shared ? cd.phone_table : read_tab("cd");
  cd.center.resize(static_cast<std::size_t>(read_pod<std::uint64_t>(is)));
  for (auto& v : cd.center) v = read_pod<std::int32_t>(is);
  cd.pdfs.resize(static_cast<std::size_t>(read_pod<std::uint64_t>(is)));
  for (auto& row : cd.pdfs) {
    row.resize(static_cast<std::size_t>(read_pod<std::uint64_t>(is)));
    for (auto& v : row) v = read_pod<std::int32_t>(is);
  }
  if (!is) throw IoError("truncated context-dependency blob");
  return cd;
}

// ---------------------------------------------------------------------------
// Model bundles.  A GMM acoustic model is (transitions, GMMs, context); a
// chain model is (transitions, context, network).

struct AmBundle {
  TransitionModel tm;
  AmGmm am;
  ContextDep cd;
};

struct ChainBundle {
  TransitionModel tm;
  ContextDep cd;
  TdnnNet net;
};

inline void write_am_bundle(const AmBundle& b,
                            const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write("AMDL", 4);
  write_pod<std::uint32_t>(os, 1);
  b.tm.write(os);
  b.am.write(os);
  write_context_dep(b.cd, os);
}

inline AmBundle read_am_bundle(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot open model " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "AMDL")
    throw IoError(path.string() + " is not a GMM model file");
  if (read_pod<std::uint32_t>(is) != 1)
    throw IoError("unsupported model version in " + path.string());
  AmBundle b;
  b.tm = TransitionModel::read(is);
  b.am = AmGmm::read(is);
  b.cd = read_context_dep(is);
  return b;
}

inline void write_chain_bundle(const ChainBundle& b,
                               const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write("CMDL", 4);
  write_pod<std::uint32_t>(os, 1);
  b.tm.write(os);
  write_context_dep(b.cd, os);
  write_tdnn(b.net, os);
}

inline ChainBundle read_chain_bundle(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot open model " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CMDL")
    throw IoError(path.string() + " is not a chain model file");
  if (read_pod<std::uint32_t>(is) != 1)
    throw IoError("unsupported model version in " + path.string());
  ChainBundle b;
  b.tm = TransitionModel::read(is);
  b.cd = read_context_dep(is);
  b.net = read_tdnn(is);
  return b;
}

// ---------------------------------------------------------------------------
// The pipeline.  Each stage: compute the hash of everything it reads, skip
// if the stamp matches and the outputs exist, refuse if an upstream stamp is
// missing (MissingArtifact) or disagrees with its recomputed hash
// (ValidationFailed), otherwise run and stamp.

class Pipeline {
 public:
  explicit Pipeline(std::filesystem::path work_dir, PipelineConfig cfg = {})
      : work_(std::move(work_dir)), cfg_(std::move(cfg)) {
    std::filesystem::create_directories(work_ / ".stamps");
  }

  const PipelineConfig& config() const { return cfg_; }
  const std::filesystem::path& work_dir() const { return work_; }

  // --- synth ---------------------------------------------------------------
  DataDir synth_data(const std::string& tag,
                     const std::filesystem::path& dir) {
    SynthConfig sc = cfg_.synth;
    sc.tag = tag;
    sc.seed = cfg_.seed;
    sc.validate();
    std::uint64_t h = h_synth(tag, dir);
    std::vector<std::filesystem::path> outs = {
        dir / "wav.scp", dir / "text", dir / "utt2spk", dir / "spk2utt",
        dir / "lexicon.txt"};
    std::string name = "synth-" + tag;
    if (fresh(name, h, outs)) {
      log_info("synth-" + tag + ": up to date");
      return load_data_dir(dir);
    }
    synth_corpus(sc, dir);
    stamp(name, h);
    return load_data_dir(dir);
  }

  // --- prep ----------------------------------------------------------------
  DataDir prep(const std::filesystem::path& dir) {
    DataDir d = load_data_dir(dir);
    std::uint64_t h = h_prep(d);
    std::string name = "prep-" + d.tag;
    if (fresh(name, h, {}))
      log_info(name + ": up to date");
    else
      stamp(name, h);
    return d;
  }

  // --- feats ---------------------------------------------------------------
  void feats(const DataDir& d) {
    std::uint64_t h = h_feats(d);
    auto dir = feats_dir(d.tag);
    std::vector<std::filesystem::path> outs = {
        dir / "mfcc.ark",  dir / "mfcc.idx",      dir / "fbank.ark",
        dir / "fbank.idx", dir / "cmvn_mfcc.txt", dir / "cmvn_fbank.txt"};
    std::string name = "feats-" + d.tag;
    if (fresh(name, h, outs)) {
      log_info(name + ": up to date");
      return;
    }
    require("prep-" + d.tag, h_prep(d), "data dir " + d.tag);
    std::filesystem::create_directories(dir);

    FeatureConfig mcfg = cfg_.mfcc;
    mcfg.kind = FeatKind::kMfcc;
    FeatureConfig fcfg = cfg_.mfcc;
    fcfg.kind = FeatKind::kFbank;
    fcfg.num_mel_bins = cfg_.fbank_bins;

    const int n = static_cast<int>(d.wav.size());
    std::vector<FeatureMatrix> mf(static_cast<std::size_t>(n));
    std::vector<FeatureMatrix> fb(static_cast<std::size_t>(n));
    std::vector<std::string> errs(static_cast<std::size_t>(n));
    parallel_for(n, cfg_.jobs, [&](int i) {
      const auto& [utt, path] = d.wav[static_cast<std::size_t>(i)];
      try {
        AudioBuffer a = read_wav(path);
        a.source_id = utt;
        std::uint64_t us = derive_seed(cfg_.seed, "dither-" + utt);
        Rng rng(us);
        Rng* dr = mcfg.dither > 0.0 ? &rng : nullptr;
        mf[static_cast<std::size_t>(i)] = compute_features(a, mcfg, dr);
        fb[static_cast<std::size_t>(i)] = compute_features(a, fcfg, dr);
      } catch (const std::exception& e) {
        errs[static_cast<std::size_t>(i)] = e.what();
      }
    });
    for (int i = 0; i < n; ++i)
      if (!errs[static_cast<std::size_t>(i)].empty())
        throw ValidationFailed("feature extraction failed for utterance " +
                               d.wav[static_cast<std::size_t>(i)].first +
                               ": " + errs[static_cast<std::size_t>(i)]);

    std::map<std::string, CmvnStats> cm_m, cm_f;
    for (int i = 0; i < n; ++i) {
      const auto& spk = d.utt2spk.at(d.wav[static_cast<std::size_t>(i)].first);
      cm_m[spk].accumulate(mf[static_cast<std::size_t>(i)].frames);
      cm_f[spk].accumulate(fb[static_cast<std::size_t>(i)].frames);
    }
    {
      FeatWriter wm(dir / "mfcc.ark", dir / "mfcc.idx", FeatKind::kMfcc);
      for (const auto& f : mf) wm.add(f);
      FeatWriter wf(dir / "fbank.ark", dir / "fbank.idx", FeatKind::kFbank);
      for (const auto& f : fb) wf.add(f);
    }
    write_cmvn_stats(cm_m, dir / "cmvn_mfcc.txt");
    write_cmvn_stats(cm_f, dir / "cmvn_fbank.txt");
    stamp(name, h);
  }

  // --- lm ------------------------------------------------------------------
  void lm(const DataDir& train) {
    std::uint64_t h = h_lm(train);
    auto path = work_ / "lm" / "lm.arpa";
    if (fresh("lm", h, {path})) {
      log_info("lm: up to date");
      return;
    }
    require("prep-" + train.tag, h_prep(train), "data dir " + train.tag);
    set_train_dir(train);
    std::vector<std::vector<std::string>> corpus;
    for (const auto& [utt, toks] : train.text)
      if (!toks.empty()) corpus.push_back(toks);
    auto counts = count_ngrams(corpus, cfg_.lm_order);
    ArpaLm g = estimate_lm(counts, cfg_.lm_order, cfg_.lm_smoothing);
    std::filesystem::create_directories(path.parent_path());
    write_arpa(g, path);
    stamp("lm", h);
  }

  // --- train-gmm -----------------------------------------------------------
  void train_gmm(const DataDir& train) {
    std::uint64_t h = h_gmm(train);
    auto dir = work_ / "gmm";
    std::vector<std::filesystem::path> outs = {
        dir / "mono.mdl", dir / "tri.mdl", dir / "tri_ali.txt"};
    if (fresh("gmm", h, outs)) {
      log_info("gmm: up to date");
      return;
    }
    require("feats-" + train.tag, h_feats(train), "features for " + train.tag);
    set_train_dir(train);

    Lexicon lex = load_lexicon_checked(train);
    auto fdir = feats_dir(train.tag);
    FeatReader rd(fdir / "mfcc.ark", fdir / "mfcc.idx");
    auto cmvn = read_cmvn_stats(fdir / "cmvn_mfcc.txt");

    std::vector<std::string> utts;
    std::vector<FeatureMatrix> f13, f39;
    std::vector<std::vector<std::int32_t>> trans;
    for (const auto& [utt, path] : train.wav) {
      FeatureMatrix f = apply_cmvn(rd.read(utt), cmvn.at(train.utt2spk.at(utt)));
      std::vector<std::int32_t> ids;
      for (const auto& tok : train.text.at(utt)) {
        std::int32_t id = lex.word_table->find(tok);
        if (id <= 0)
          throw ValidationFailed("utterance " + utt + ": word '" + tok +
                                 "' has no pronunciation in the lexicon");
        ids.push_back(id);
      }
      f39.push_back(append_deltas(f, cfg_.delta_window, 2));
      f13.push_back(std::move(f));
      trans.push_back(std::move(ids));
      utts.push_back(utt);
    }

    GmmLadderConfig gc = cfg_.gmm;
    gc.jobs = cfg_.jobs;
    GmmLadderResult res = train_gmm_ladder(utts, f13, f39, trans, lex, gc);
    if (res.failures > 0)
      log_warn("gmm: " + std::to_string(res.failures) +
               " utterance(s) had no training graph or failed their last "
               "realignment");

    std::filesystem::create_directories(dir);
    write_am_bundle({res.mono.tm, res.mono.am, res.mono.cd}, dir / "mono.mdl");
    write_am_bundle({res.tri.tm, res.tri.am, res.tri.cd}, dir / "tri.mdl");
    std::vector<std::pair<std::string, std::vector<std::int32_t>>> alis;
    for (std::size_t i = 0; i < res.utt_ids.size(); ++i)
      alis.emplace_back(res.utt_ids[i], res.tri.ali[i]);
    write_alignments(dir / "tri_ali.txt", alis);
    stamp("gmm", h);
  }

  // --- train-chain ---------------------------------------------------------
  void train_chain_stage(const DataDir& train) {
    std::uint64_t h = h_chain(train);
    auto dir = work_ / "chain";
    std::vector<std::filesystem::path> outs = {
        dir / "chain.mdl", dir / "phone_lm.arpa", dir / "train.log"};
    if (fresh("chain", h, outs)) {
      log_info("chain: up to date");
      return;
    }
    require("gmm", h_gmm(train), "GMM models");
    set_train_dir(train);

    AmBundle tri = read_am_bundle(work_ / "gmm" / "tri.mdl");
    auto alis = read_alignments(work_ / "gmm" / "tri_ali.txt");
    auto fdir = feats_dir(train.tag);
    FeatReader rd(fdir / "fbank.ark", fdir / "fbank.idx");
    auto cmvn = read_cmvn_stats(fdir / "cmvn_fbank.txt");

    HmmTopology topo_c = make_topology(TopoKind::kChainTwoState);
    SymTabPtr phones = tri.cd.phone_table;
    ContextDep cd_mono = make_mono_context(phones, topo_c);
    TransitionModel tm_mono = make_transition_model(topo_c, cd_mono);

    // per-utterance fbank features, chain-frame alignments, and the
    // subsampled feature rows the tree builder clusters on
    std::vector<Mat> f40;
    std::vector<std::vector<std::int32_t>> chain_alis;
    std::vector<FeatureMatrix> sub40;
    std::vector<std::vector<std::string>> phone_seqs;
    std::vector<std::pair<std::string, std::vector<std::int32_t>>> kept;
    for (const auto& [utt, ali] : alis) {
      FeatureMatrix f = apply_cmvn(rd.read(utt), cmvn.at(train.utt2spk.at(utt)));
      auto cali =
          chain_alignment(ali, tri.tm, tm_mono, cd_mono, kSubsample);
      FeatureMatrix sub;
      sub.kind = f.kind;
      sub.frame_shift_ms = f.frame_shift_ms * kSubsample;
      sub.utt_id = utt;
      sub.frames.resize(static_cast<Eigen::Index>(cali.size()), f.frames.cols());
      for (std::size_t t = 0; t < cali.size(); ++t) {
        auto src = std::min<Eigen::Index>(
            static_cast<Eigen::Index>(kSubsample * t + 1),
            f.frames.rows() - 1);
        sub.frames.row(static_cast<Eigen::Index>(t)) = f.frames.row(src);
      }
      std::vector<std::string> names;
      for (const auto& [ph, len] : detail::phone_segments(tri.tm, ali))
        names.push_back(phones->str(ph));
      f40.push_back(std::move(f.frames));
      chain_alis.push_back(std::move(cali));
      sub40.push_back(std::move(sub));
      phone_seqs.push_back(std::move(names));
      kept.emplace_back(utt, ali);
    }
    if (kept.empty()) throw ValidationFailed("chain: no alignments to train on");

    DecisionTree tree =
        build_tree(chain_alis, sub40, tm_mono, *phones, cfg_.chain_max_leaves,
                   cfg_.chain_tree_gain, {0});  // left-context questions only
    ContextDep cd_bi = make_context_dep(
        phones, 2, topo_c,
        [&tree](int l, int c, int r, int cls) { return tree.map(l, c, r, cls); });
    TransitionModel tm_c = make_transition_model(topo_c, cd_bi);

    ArpaLm plm = train_phone_lm(phone_seqs, cfg_.phone_lm_order);
    std::filesystem::create_directories(dir);
    write_arpa(plm, dir / "phone_lm.arpa");

    DenominatorGraph den = compile_denominator_graph(plm, topo_c, tm_c, cd_bi);
    Fst norm = make_normalization_fst(den);

    TdnnSpec spec = cfg_.tdnn;
    spec.subsample = kSubsample;
    TdnnNet net0 = make_tdnn(cfg_.fbank_bins, den.num_pdfs, spec, cfg_.seed);

    std::vector<Mat> inputs;
    std::vector<ChainSupervision> sups;
    int dropped = 0;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      ChainSupervision full;
      full.utt_id = kept[i].first;
      full.num_frames = static_cast<int>(chain_alis[i].size());
      full.fst = make_numerator_fst(kept[i].second, tri.tm, cd_bi, topo_c,
                                    kSubsample, cfg_.chain.tolerance);
      for (auto& ch : split_supervision(full, cfg_.chain.chunk_frames,
                                        cfg_.chain.alt_chunks)) {
        if (!compose_with_normalization(&ch, norm)) {
          ++dropped;
          continue;
        }
        inputs.push_back(chunk_input(f40[i], ch.first_frame, ch.num_frames,
                                     net0.left_context(), net0.right_context(),
                                     kSubsample));
        sups.push_back(std::move(ch));
      }
    }
    if (dropped > 0)
      log_warn("chain: dropped " + std::to_string(dropped) +
               " chunk(s) outside the denominator language");

    ChainConfig cc = cfg_.chain;
    cc.frame_subsample = kSubsample;
    cc.seed = derive_seed(cfg_.seed, "chain-train");
    cc.jobs = cfg_.jobs;
    ChainTrainResult res = train_chain(inputs, den, sups, net0, cc);

    write_chain_bundle({tm_c, cd_bi, res.net}, dir / "chain.mdl");
    write_train_log(dir / "train.log", res.log);
    stamp("chain", h);
  }

  // --- mkgraph -------------------------------------------------------------
  void mkgraph(const std::string& stage, const DataDir& train) {
    check_stage(stage);
    std::uint64_t h = h_graph(stage, train);
    auto dir = work_ / "graph";
    std::vector<std::filesystem::path> outs = {dir / (stage + ".fst"),
                                               dir / "words.tbl"};
    std::string name = "graph-" + stage;
    if (fresh(name, h, outs)) {
      log_info(name + ": up to date");
      return;
    }
    require("lm", h_lm(train), "language model");
    if (stage == "chain")
      require("chain", h_chain(train), "chain model");
    else
      require("gmm", h_gmm(train), "GMM models");

    Lexicon lex = load_lexicon_checked(train);
    ArpaLm g_lm = read_arpa(work_ / "lm" / "lm.arpa");
    Fst g = make_grammar_fst(g_lm, lex.word_table);
    Fst l = make_lexicon_fst(lex, cfg_.gmm.sil_prob);

    Fst hclg{Semiring::kTropical};
    GraphMeta meta;
    if (stage == "chain") {
      ChainBundle b = read_chain_bundle(work_ / "chain" / "chain.mdl");
      HmmTopology topo = make_topology(TopoKind::kChainTwoState);
      Fst hf = make_h_fst(topo, b.tm, b.cd, Semiring::kTropical,
                          /*pdf_labels=*/true);
      Fst c = make_context_fst(b.cd, Semiring::kTropical);
      hclg = compile_hclg(hf, c, l, g);
      meta.topo = TopoKind::kChainTwoState;
      meta.num_pdfs = b.tm.num_pdfs();
      meta.context_width = b.cd.width;
    } else {
      AmBundle b = read_am_bundle(work_ / "gmm" / (stage + ".mdl"));
      Fst hf = make_h_fst(b.tm.topo(), b.tm, b.cd, Semiring::kTropical,
                          /*pdf_labels=*/false);
      Fst c = make_context_fst(b.cd, Semiring::kTropical);
      hclg = compile_hclg(hf, c, l, g);
      meta.topo = TopoKind::kThreeState;
      meta.num_pdfs = b.tm.num_pdfs();
      meta.context_width = b.cd.width;
    }
    std::filesystem::create_directories(dir);
    save_fst(hclg, dir / (stage + ".fst"));
    write_graph_meta(meta, dir / (stage + ".meta.json"));
    {
      std::ofstream os(dir / "words.tbl");
      if (!os) throw IoError("cannot write " + (dir / "words.tbl").string());
      write_symtab(*lex.word_table, os);
    }
    stamp(name, h);
  }

  // mkgraph using the recorded training dir (CLI convenience)
  void mkgraph(const std::string& stage) {
    check_stage(stage);
    mkgraph(stage, train_dir());
  }

  // --- decode --------------------------------------------------------------
  void decode(const std::string& stage, const DataDir& test) {
    check_stage(stage);
    DataDir train = train_dir();
    std::uint64_t h = h_decode(stage, test, train);
    auto dir = work_ / "decode" / (stage + "-" + test.tag);
    std::vector<std::filesystem::path> outs = {dir / "hyp.txt",
                                               dir / "diag.txt"};
    std::string name = "decode-" + stage + "-" + test.tag;
    if (fresh(name, h, outs)) {
      log_info(name + ": up to date");
      return;
    }
    require("graph-" + stage, h_graph(stage, train), "decoding graph");
    require("feats-" + test.tag, h_feats(test), "features for " + test.tag);

    Fst graph = load_fst(work_ / "graph" / (stage + ".fst"));
    SymTabPtr words;
    {
      std::ifstream is(work_ / "graph" / "words.tbl");
      if (!is) throw MissingArtifact("cannot open graph/words.tbl");
      words = std::make_shared<const SymbolTable>(read_symtab(is, "words"));
    }
    DecodeOptions opts;
    opts.beam = cfg_.decode_beam;
    opts.max_active = cfg_.decode_max_active;
    opts.acoustic_scale =
        stage == "chain" ? cfg_.chain_acoustic_scale : cfg_.gmm_acoustic_scale;
    opts.word_table = words;

    auto fdir = feats_dir(test.tag);
    const bool is_chain = stage == "chain";
    FeatReader rd(fdir / (is_chain ? "fbank.ark" : "mfcc.ark"),
                  fdir / (is_chain ? "fbank.idx" : "mfcc.idx"));
    auto cmvn =
        read_cmvn_stats(fdir / (is_chain ? "cmvn_fbank.txt" : "cmvn_mfcc.txt"));

    AmBundle am;
    ChainBundle cb;
    if (is_chain)
      cb = read_chain_bundle(work_ / "chain" / "chain.mdl");
    else
      am = read_am_bundle(work_ / "gmm" / (stage + ".mdl"));

    // features are pre-loaded serially (FeatReader seeks one stream), then
    // utterances decode independently
    const int n = static_cast<int>(test.wav.size());
    std::vector<Mat> feats(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const auto& utt = test.wav[static_cast<std::size_t>(i)].first;
      FeatureMatrix f = apply_cmvn(rd.read(utt), cmvn.at(test.utt2spk.at(utt)));
      if (!is_chain && stage == "tri")
        f = append_deltas(f, cfg_.delta_window, 2);
      feats[static_cast<std::size_t>(i)] = std::move(f.frames);
    }
    std::vector<DecodeResult> results(static_cast<std::size_t>(n));
    std::vector<std::string> fails(static_cast<std::size_t>(n));
    parallel_for(n, cfg_.jobs, [&](int i) {
      const auto& utt = test.wav[static_cast<std::size_t>(i)].first;
      try {
        if (is_chain) {
          ChainScorer sc(cb.net, feats[static_cast<std::size_t>(i)]);
          results[static_cast<std::size_t>(i)] =
              decode_utterance(graph, sc, opts);
        } else {
          GmmScorer sc(am.am, am.tm, feats[static_cast<std::size_t>(i)]);
          results[static_cast<std::size_t>(i)] =
              decode_utterance(graph, sc, opts);
        }
      } catch (const std::exception& e) {
        fails[static_cast<std::size_t>(i)] = e.what();
      }
    });

    std::map<std::string, std::vector<std::string>> hyp;
    std::map<std::string, DecodeResult> diag;
    for (int i = 0; i < n; ++i) {
      const auto& utt = test.wav[static_cast<std::size_t>(i)].first;
      if (!fails[static_cast<std::size_t>(i)].empty()) {
        log_warn("decode " + utt + ": " + fails[static_cast<std::size_t>(i)]);
        hyp[utt] = {};
        DecodeResult dead;
        dead.total_cost = dead.acoustic_cost = dead.graph_cost = kInf;
        diag[utt] = dead;
        continue;
      }
      const auto& r = results[static_cast<std::size_t>(i)];
      hyp[utt] = spell_words(r.words, *words);
      diag[utt] = r;
    }
    std::filesystem::create_directories(dir);
    write_hypotheses(hyp, dir / "hyp.txt");
    write_decode_diagnostics(diag, dir / "diag.txt");
    stamp(name, h);
  }

  // --- score ---------------------------------------------------------------
  ScoreReport score(const std::string& stage, const DataDir& test) {
    check_stage(stage);
    DataDir train = train_dir();
    std::uint64_t h = h_score(stage, test, train);
    auto dir = work_ / "score" / (stage + "-" + test.tag);
    std::string name = "score-" + stage + "-" + test.tag;
    bool up_to_date =
        fresh(name, h, {dir / "report.txt", dir / "report.json"});
    if (!up_to_date)
      require("decode-" + stage + "-" + test.tag,
              h_decode(stage, test, train), "decoding output");

    auto hyp = read_hypotheses(work_ / "decode" / (stage + "-" + test.tag) /
                               "hyp.txt");
    std::vector<std::pair<std::string, std::vector<std::string>>> ref;
    for (const auto& [utt, path] : test.wav) ref.emplace_back(utt, test.text.at(utt));
    ScoreReport rep = score_corpus(ref, hyp);
    if (up_to_date) {
      log_info(name + ": up to date");
      return rep;
    }
    std::filesystem::create_directories(dir);
    {
      std::ofstream os(dir / "report.txt");
      write_score_report_text(rep, os);
      std::ofstream oj(dir / "report.json");
      write_score_report_json(rep, oj);
    }
    stamp(name, h);
    return rep;
  }

  // the training dir recorded by lm/train_gmm/train_chain
  DataDir train_dir() const {
    std::ifstream is(work_ / "train_dir.txt");
    std::string path;
    if (!is || !std::getline(is, path) || path.empty())
      throw MissingArtifact(
          "no training stage has recorded its data dir in this work dir");
    return load_data_dir(path);
  }

 private:
  static constexpr int kSubsample = 3;

  std::filesystem::path feats_dir(const std::string& tag) const {
    return work_ / "feats" / tag;
  }

  static void check_stage(const std::string& stage) {
    if (stage != "mono" && stage != "tri" && stage != "chain")
      throw BadConfig("unknown stage '" + stage +
                      "' (expected mono, tri, or chain)");
  }

  void set_train_dir(const DataDir& d) const {
    auto abs = std::filesystem::absolute(d.root).lexically_normal();
    auto path = work_ / "train_dir.txt";
    std::ifstream is(path);
    std::string prev;
    if (is && std::getline(is, prev) && prev == abs.string()) return;
    std::ofstream os(path);
    os << abs.string() << "\n";
  }

  Lexicon load_lexicon_checked(const DataDir& train) const {
    std::vector<std::string> vocab;
    std::set<std::string> seen;
    for (const auto& [utt, toks] : train.text)
      for (const auto& t : toks)
        if (seen.insert(t).second) vocab.push_back(t);
    std::sort(vocab.begin(), vocab.end());
    Lexicon lex = load_lexicon(train.root / "lexicon.txt", vocab);
    if (!lex.oov_report.empty())
      throw ValidationFailed("word '" + lex.oov_report.front() +
                             "' appears in text but not in the lexicon");
    return lex;
  }

  // ---- config subsets (hashed alongside file inputs) ----
  std::string keys_with_prefix(const std::string& prefix) const {
    std::string out;
    for (const auto& ck : detail::config_keys())
      if (ck.key.rfind(prefix, 0) == 0)
        out += ck.key + "=" + ck.get(cfg_) + ";";
    return out;
  }

  // ---- stage hashes; each chains its upstream hash so staleness is
  // detected transitively ----
  std::uint64_t h_synth(const std::string& tag,
                        const std::filesystem::path& dir) const {
    std::uint64_t h = detail::kFnvOffset;
    h = detail::fnv_str("synth-v1", h);
    h = detail::fnv_str(keys_with_prefix("synth."), h);
    h = detail::fnv_u64(cfg_.seed, h);
    h = detail::fnv_str(tag, h);
    h = detail::fnv_str(dir.string(), h);
    return h;
  }

  std::uint64_t h_prep(const DataDir& d) const {
    std::uint64_t h = detail::kFnvOffset;
    h = detail::fnv_str("prep-v1", h);
    for (const char* f : {"wav.scp", "text", "utt2spk", "spk2utt"})
      h = detail::fnv_file(d.root / f, h);
    auto lexicon = d.root / "lexicon.txt";
    h = std::filesystem::exists(lexicon) ? detail::fnv_file(lexicon, h)
                                         : detail::fnv_str("no-lexicon", h);
    for (const auto& [utt, path] : d.wav) {
      h = detail::fnv_str(utt, h);
      h = detail::fnv_file(path, h);
    }
    return h;
  }

  std::uint64_t h_feats(const DataDir& d) const {
    std::uint64_t h = h_prep(d);
    h = detail::fnv_str("feats-v1", h);
    h = detail::fnv_str(keys_with_prefix("feats."), h);
    h = detail::fnv_u64(cfg_.seed, h);  // dither stream
    return h;
  }

  std::uint64_t h_lm(const DataDir& train) const {
    std::uint64_t h = h_prep(train);
    h = detail::fnv_str("lm-v1", h);
    h = detail::fnv_str(keys_with_prefix("lm."), h);
    return h;
  }

  std::uint64_t h_gmm(const DataDir& train) const {
    std::uint64_t h = h_feats(train);
    h = detail::fnv_str("gmm-v1", h);
    h = detail::fnv_str(keys_with_prefix("gmm."), h);
    return h;
  }

  std::uint64_t h_chain(const DataDir& train) const {
    std::uint64_t h = h_gmm(train);
    h = detail::fnv_str("chain-v1", h);
    h = detail::fnv_str(keys_with_prefix("chain."), h);
    h = detail::fnv_u64(cfg_.seed, h);
    h = detail::fnv_u64(static_cast<std::uint64_t>(cfg_.jobs), h);
    return h;
  }

  std::uint64_t h_graph(const std::string& stage, const DataDir& train) const {
    std::uint64_t h = stage == "chain" ? h_chain(train) : h_gmm(train);
    h = detail::fnv_u64(h_lm(train), h);
    h = detail::fnv_str("graph-v1", h);
    h = detail::fnv_str(stage, h);
    return h;
  }

  std::uint64_t h_decode(const std::string& stage, const DataDir& test,
                         const DataDir& train) const {
    std::uint64_t h = h_graph(stage, train);
    h = detail::fnv_u64(h_feats(test), h);
    h = detail::fnv_str("decode-v1", h);
    h = detail::fnv_str(keys_with_prefix("decode."), h);
    return h;
  }

  std::uint64_t h_score(const std::string& stage, const DataDir& test,
                        const DataDir& train) const {
    std::uint64_t h = h_decode(stage, test, train);
    h = detail::fnv_str("score-v1", h);
    return h;
  }

  // ---- stamps ----
  std::filesystem::path stamp_path(const std::string& name) const {
    return work_ / ".stamps" / (name + ".stamp");
  }

  bool fresh(const std::string& name, std::uint64_t h,
             const std::vector<std::filesystem::path>& outputs) const {
    std::ifstream is(stamp_path(name));
    std::string line;
    if (!is || !std::getline(is, line)) return false;
    if (line != detail::hash_hex(h)) return false;
    for (const auto& o : outputs)
      if (!std::filesystem::exists(o)) return false;
    return true;
  }

  void require(const std::string& name, std::uint64_t h,
               const std::string& what) const {
    std::ifstream is(stamp_path(name));
    std::string line;
    if (!is || !std::getline(is, line))
      throw MissingArtifact(what + " not built yet; run the " + name +
                            " stage first");
    if (line != detail::hash_hex(h))
      throw ValidationFailed(what + " is stale: the " + name +
                             " stage must be rerun before this one");
  }

  void stamp(const std::string& name, std::uint64_t h) const {
    std::filesystem::create_directories(work_ / ".stamps");
    std::ofstream os(stamp_path(name));
    if (!os) throw IoError("cannot write " + stamp_path(name).string());
    os << detail::hash_hex(h) << "\n";
  }

  std::filesystem::path work_;
  PipelineConfig cfg_;
};

// ---------------------------------------------------------------------------
// File-level scoring, for hypothesis/reference pairs produced elsewhere.

inline ScoreReport score_files(const std::filesystem::path& hyp_path,
                               const std::filesystem::path& ref_path) {
  auto hyp_raw = read_hypotheses(hyp_path);
  auto ref_raw = read_hypotheses(ref_path);
  std::map<std::string, std::vector<std::string>> hyp;
  for (auto& [utt, toks] : hyp_raw) {
    std::string line;
    for (const auto& t : toks) line += t + " ";
    hyp[utt] = clean_tokens(line);
  }
  std::vector<std::pair<std::string, std::vector<std::string>>> ref;
  for (auto& [utt, toks] : ref_raw) {
    std::string line;
    for (const auto& t : toks) line += t + " ";
    ref.emplace_back(utt, clean_tokens(line));
  }
  return score_corpus(ref, hyp);
}

}  // namespace asrkit
