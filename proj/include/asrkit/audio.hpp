// asrkit/audio.hpp
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
// WAV reading/writing, downmix, rational resampling and slicing into the
// canonical pipeline format: mono 16 kHz PCM, at most 30 s per utterance.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "asrkit/common.hpp"

namespace asrkit {

ASRKIT_ERROR(NotWav);
ASRKIT_ERROR(UnsupportedEncoding);
ASRKIT_ERROR(TruncatedFile);
ASRKIT_ERROR(UnsupportedRate);

struct AudioBuffer {
  std::vector<std::vector<double>> channels;  // 1 or 2, equal lengths
  int sample_rate_hz = 16000;
  std::string source_id;

  std::size_t num_samples() const { return channels.empty() ? 0 : channels[0].size(); }
  double duration_seconds() const {
    return static_cast<double>(num_samples()) / sample_rate_hz;
  }
  const std::vector<double>& mono() const {
    if (channels.size() != 1)
      throw Error("mono(): buffer has " + std::to_string(channels.size()) + " channels");
    return channels[0];
  }
};

// ---------------------------------------------------------------------------
// RIFF/WAVE PCM reader.  8/16-bit integer PCM only; chunks other than fmt
// and data are skipped (with even-byte chunk alignment).

inline AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "RIFF") throw NotWav("no RIFF magic: " + path.string());
  is.seekg(4, std::ios::cur);  // riff size
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "WAVE") throw NotWav("no WAVE tag: " + path.string());

  bool have_fmt = false;
  std::uint16_t format = 0, nchan = 0, bits = 0;
  std::uint32_t rate = 0;
  AudioBuffer out;
  bool have_data = false;
  while (is.read(magic, 4)) {
    std::uint32_t chunk_size = read_pod<std::uint32_t>(is);
    std::string id(magic, 4);
    if (id == "fmt ") {
      if (chunk_size < 16) throw NotWav("short fmt chunk");
      format = read_pod<std::uint16_t>(is);
      nchan = read_pod<std::uint16_t>(is);
      rate = read_pod<std::uint32_t>(is);
      read_pod<std::uint32_t>(is);  // byte rate
      read_pod<std::uint16_t>(is);  // block align
      bits = read_pod<std::uint16_t>(is);
      is.seekg(chunk_size - 16 + (chunk_size & 1), std::ios::cur);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw NotWav("data chunk before fmt");
      if (format != 1)
        throw UnsupportedEncoding("WAV format tag " + std::to_string(format) +
                                  " (PCM required): " + path.string());
      if (bits != 8 && bits != 16)
        throw UnsupportedEncoding(std::to_string(bits) + "-bit WAV (8/16 required): " +
                                  path.string());
      if (nchan != 1 && nchan != 2)
        throw UnsupportedEncoding(std::to_string(nchan) + " channels (1/2 required)");
      std::vector<char> raw(chunk_size);
      is.read(raw.data(), chunk_size);
      if (static_cast<std::uint32_t>(is.gcount()) != chunk_size)
        throw TruncatedFile("data chunk truncated: " + path.string());
      std::size_t bytes_per = bits / 8;
      std::size_t frames = chunk_size / (bytes_per * nchan);
      out.channels.assign(nchan, std::vector<double>(frames));
      const unsigned char* p = reinterpret_cast<const unsigned char*>(raw.data());
      for (std::size_t t = 0; t < frames; ++t)
        for (std::uint16_t ch = 0; ch < nchan; ++ch) {
          double v;
          if (bits == 16) {
            std::int16_t s = static_cast<std::int16_t>(
                static_cast<std::uint16_t>(p[0]) | (static_cast<std::uint16_t>(p[1]) << 8));
            v = s / 32768.0;
            p += 2;
          } else {
            v = (static_cast<int>(*p) - 128) / 128.0;
            p += 1;
          }
          out.channels[ch][t] = v;
        }
      have_data = true;
      if (chunk_size & 1) is.seekg(1, std::ios::cur);
    } else {
      is.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  if (!have_fmt || !have_data) throw TruncatedFile("missing fmt or data chunk: " + path.string());
  out.sample_rate_hz = static_cast<int>(rate);
  out.source_id = path.stem().string();
  if (out.channels.empty()) out.channels.assign(nchan ? nchan : 1, {});
  return out;
}

// 16-bit PCM writer (mono or stereo).
inline void write_wav(const AudioBuffer& audio, const std::filesystem::path& path) {
  if (audio.channels.empty() || audio.channels.size() > 2)
    throw Error("write_wav: need 1 or 2 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  std::uint16_t nchan = static_cast<std::uint16_t>(audio.channels.size());
  std::uint32_t frames = static_cast<std::uint32_t>(audio.num_samples());
  std::uint32_t data_bytes = frames * nchan * 2;
  os.write("RIFF", 4);
  write_pod<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  write_pod<std::uint32_t>(os, 16);
  write_pod<std::uint16_t>(os, 1);  // PCM
  write_pod<std::uint16_t>(os, nchan);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(audio.sample_rate_hz));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(audio.sample_rate_hz) * nchan * 2);
  write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(nchan * 2));
  write_pod<std::uint16_t>(os, 16);
  os.write("data", 4);
  write_pod<std::uint32_t>(os, data_bytes);
  for (std::uint32_t t = 0; t < frames; ++t)
    for (std::uint16_t ch = 0; ch < nchan; ++ch) {
      double x = std::clamp(audio.channels[ch][t], -1.0, 1.0);
      long long q = llround(x * 32768.0);
      q = std::clamp<long long>(q, -32768, 32767);
      write_pod<std::int16_t>(os, static_cast<std::int16_t>(q));
    }
}

// ---------------------------------------------------------------------------
// Downmix by per-sample arithmetic mean.  Idempotent on mono input.

inline AudioBuffer to_mono(const AudioBuffer& audio) {
  if (audio.channels.size() == 1) return audio;
  if (audio.channels.size() != 2) throw Error("to_mono: need 1 or 2 channels");
  AudioBuffer out;
  out.sample_rate_hz = audio.sample_rate_hz;
  out.source_id = audio.source_id;
  std::size_t n = audio.num_samples();
  out.channels.assign(1, std::vector<double>(n));
  for (std::size_t t = 0; t < n; ++t)
    out.channels[0][t] = 0.5 * (audio.channels[0][t] + audio.channels[1][t]);
  return out;
}

// ---------------------------------------------------------------------------
// Windowed-sinc resampler: 16 taps around each output point, Kaiser window
// (beta 8), kernel normalized to unit DC gain at every output sample so a
// constant signal passes through exactly.

namespace detail {

inline double bessel_i0(double x) {
  // power series; converges fast for |x| <= ~20
  double sum = 1.0, term = 1.0;
  for (int k = 1; k < 64; ++k) {
    term *= (x / (2.0 * k)) * (x / (2.0 * k));
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return sum;
}

inline double kaiser(double x, double beta) {
  // x in [-1, 1]
  double t = 1.0 - x * x;
  if (t < 0.0) return 0.0;
  return bessel_i0(beta * std::sqrt(t)) / bessel_i0(beta);
}

inline double sinc(double x) {
  if (std::fabs(x) < 1e-12) return 1.0;
  double px = M_PI * x;
  return std::sin(px) / px;
}

}  // namespace detail

inline AudioBuffer resample(const AudioBuffer& audio, int target_hz) {
  static const int kSourceRates[] = {8000, 16000, 22050, 44100, 48000};
  if (target_hz != 8000 && target_hz != 16000)
    throw UnsupportedRate("resample target " + std::to_string(target_hz));
  bool ok = false;
  for (int r : kSourceRates) ok = ok || (r == audio.sample_rate_hz);
  if (!ok) throw UnsupportedRate("resample source " + std::to_string(audio.sample_rate_hz));
  if (audio.sample_rate_hz == target_hz) return audio;

  const double ratio = static_cast<double>(target_hz) / audio.sample_rate_hz;
  const double cutoff = std::min(1.0, ratio);  // anti-alias when decimating
  const int half = 8;                          // 16 taps total
  const double beta = 8.0;
  AudioBuffer out;
  out.sample_rate_hz = target_hz;
  out.source_id = audio.source_id;
  out.channels.resize(audio.channels.size());
  for (std::size_t ch = 0; ch < audio.channels.size(); ++ch) {
    const std::vector<double>& x = audio.channels[ch];
    std::size_t n_out = static_cast<std::size_t>(
        llround(static_cast<double>(x.size()) * ratio));
    std::vector<double>& y = out.channels[ch];
    y.assign(n_out, 0.0);
    for (std::size_t n = 0; n < n_out; ++n) {
      double t = static_cast<double>(n) / ratio;  // position in source samples
      long long k0 = static_cast<long long>(std::floor(t));
      double acc = 0.0, norm = 0.0;
      for (long long k = k0 - half + 1; k <= k0 + half; ++k) {
        if (k < 0 || k >= static_cast<long long>(x.size())) continue;
        double d = static_cast<double>(k) - t;
        double h = cutoff * detail::sinc(cutoff * d) * detail::kaiser(d / half, beta);
        norm += h;
        acc += h * x[static_cast<std::size_t>(k)];
      }
      y[n] = (norm != 0.0) ? acc / norm : 0.0;
      y[n] = std::clamp(y[n], -1.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// slice_and_pad: consecutive payload chunks sized so that payload plus the
// two silence pads stays within max_seconds; every slice gets pad_seconds of
// zeros on both ends.  IDs take a 4-digit suffix.

inline std::vector<AudioBuffer> slice_and_pad(const AudioBuffer& audio, double max_seconds,
                                              double pad_seconds) {
  if (!(max_seconds > 2.0 * pad_seconds) || pad_seconds < 0.0)
    throw BadConfig("slice_and_pad: need max_seconds > 2*pad_seconds >= 0");
  if (audio.channels.size() != 1) throw Error("slice_and_pad: mono input required");
  const int rate = audio.sample_rate_hz;
  const std::size_t pad = static_cast<std::size_t>(llround(pad_seconds * rate));
  const std::size_t payload_max =
      static_cast<std::size_t>(std::floor(max_seconds * rate)) - 2 * pad;
  const std::vector<double>& x = audio.mono();

  std::vector<AudioBuffer> out;
  std::size_t pos = 0;
  int index = 1;
  do {
    std::size_t len = std::min(payload_max, x.size() - pos);
    AudioBuffer slice;
    slice.sample_rate_hz = rate;
    char suffix[8];
    std::snprintf(suffix, sizeof(suffix), "-%04d", index++);
    slice.source_id = audio.source_id + suffix;
    std::vector<double> s;
    s.reserve(len + 2 * pad);
    s.insert(s.end(), pad, 0.0);
    s.insert(s.end(), x.begin() + static_cast<std::ptrdiff_t>(pos),
             x.begin() + static_cast<std::ptrdiff_t>(pos + len));
    s.insert(s.end(), pad, 0.0);
    slice.channels.push_back(std::move(s));
    out.push_back(std::move(slice));
    pos += len;
  } while (pos < x.size());
  return out;
}

// ---------------------------------------------------------------------------
// wav.scp manifest: "utt_id path" per line.

inline std::vector<std::pair<std::string, std::string>> read_wav_scp(
    const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto [id, rest] = split_key_rest(line);
    if (rest.empty()) throw IoError("bad wav.scp line: " + line);
    out.emplace_back(id, rest);
  }
  return out;
}

}  // namespace asrkit
