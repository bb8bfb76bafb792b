// asrkit/feats.hpp
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
// MFCC / log-Mel-filterbank extraction with deltas and per-speaker CMVN.
// Snip-edges framing, per-frame pre-emphasis, Hamming window, radix-2 FFT,
// HTK-style Mel triangles, orthonormal DCT-II, no liftering.

#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "asrkit/audio.hpp"
#include "asrkit/common.hpp"

namespace asrkit {

enum class FeatKind : std::uint8_t { kMfcc = 0, kFbank = 1 };

struct FeatureConfig {
  double window_ms = 25.0;
  double shift_ms = 10.0;
  int num_mel_bins = 23;  // 40 for the fbank path
  int num_cepstra = 13;
  double preemph = 0.97;
  FeatKind kind = FeatKind::kMfcc;
  int delta_order = 0;  // 0, 1 or 2
  int delta_window = 2;
  double dither = 0.0;
  double log_floor = 1e-10;

  void validate() const {
    if (!(window_ms > shift_ms && shift_ms > 0))
      throw BadConfig("features: need window_ms > shift_ms > 0");
    if (num_cepstra > num_mel_bins)
      throw BadConfig("features: num_cepstra > num_mel_bins");
    if (preemph < 0.0 || preemph >= 1.0) throw BadConfig("features: preemph outside [0,1)");
    if (delta_order < 0 || delta_order > 2) throw BadConfig("features: delta_order in {0,1,2}");
    if (delta_window < 1) throw BadConfig("features: delta_window >= 1");
    if (log_floor <= 0.0) throw BadConfig("features: log_floor must be positive");
  }
};

struct FeatureMatrix {
  Mat frames;  // T x D
  double frame_shift_ms = 10.0;
  FeatKind kind = FeatKind::kMfcc;
  std::string utt_id;
};

// ---------------------------------------------------------------------------
// Framing + pre-emphasis + Hamming window.  Snip-edges: only frames fully
// inside the signal, T = 1 + floor((n - W)/S); T = 0 for short input.

inline int window_samples(const FeatureConfig& cfg, int rate) {
  return static_cast<int>(llround(cfg.window_ms * rate / 1000.0));
}
inline int shift_samples(const FeatureConfig& cfg, int rate) {
  return static_cast<int>(llround(cfg.shift_ms * rate / 1000.0));
}
inline int num_frames(std::size_t num_samples, const FeatureConfig& cfg, int rate) {
  int w = window_samples(cfg, rate), s = shift_samples(cfg, rate);
  if (num_samples < static_cast<std::size_t>(w)) return 0;
  return 1 + static_cast<int>((num_samples - static_cast<std::size_t>(w)) /
                              static_cast<std::size_t>(s));
}

inline Mat frame_and_window(const AudioBuffer& audio, const FeatureConfig& cfg,
                            Rng* dither_rng = nullptr) {
  cfg.validate();
  const int rate = audio.sample_rate_hz;
  const int w = window_samples(cfg, rate), s = shift_samples(cfg, rate);
  const std::vector<double>& x = audio.mono();
  const int t_count = num_frames(x.size(), cfg, rate);
  Mat out(t_count, w);
  std::vector<double> hamming(static_cast<std::size_t>(w));
  for (int i = 0; i < w; ++i)
    hamming[static_cast<std::size_t>(i)] =
        0.54 - 0.46 * std::cos(2.0 * M_PI * i / (w - 1));
  std::vector<double> frame(static_cast<std::size_t>(w));
  for (int t = 0; t < t_count; ++t) {
    const std::size_t base = static_cast<std::size_t>(t) * static_cast<std::size_t>(s);
    for (int i = 0; i < w; ++i) frame[static_cast<std::size_t>(i)] = x[base + static_cast<std::size_t>(i)];
    if (cfg.dither > 0.0 && dither_rng)
      for (int i = 0; i < w; ++i) frame[static_cast<std::size_t>(i)] += cfg.dither * dither_rng->gauss();
    // per-frame pre-emphasis; the frame's first sample references itself
    for (int i = w - 1; i > 0; --i)
      frame[static_cast<std::size_t>(i)] -= cfg.preemph * frame[static_cast<std::size_t>(i - 1)];
    frame[0] -= cfg.preemph * frame[0];
    for (int i = 0; i < w; ++i)
      out(t, i) = frame[static_cast<std::size_t>(i)] * hamming[static_cast<std::size_t>(i)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Radix-2 FFT and the power spectrum (bins 0..N/2 of the zero-padded frame).

namespace detail {

inline void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * M_PI / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k], v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace detail

inline Mat power_spectrum(const Mat& frames) {
  const std::size_t w = static_cast<std::size_t>(frames.cols());
  const std::size_t n = detail::next_pow2(std::max<std::size_t>(w, 2));
  const std::size_t bins = n / 2 + 1;
  Mat out(frames.rows(), static_cast<Eigen::Index>(bins));
  std::vector<std::complex<double>> buf(n);
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    for (std::size_t i = 0; i < n; ++i)
      buf[i] = (i < w) ? std::complex<double>(frames(t, static_cast<Eigen::Index>(i)), 0.0)
                       : 0.0;
    detail::fft_inplace(buf);
    for (std::size_t k = 0; k < bins; ++k) out(t, static_cast<Eigen::Index>(k)) = std::norm(buf[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mel filterbank: triangles equally spaced on m = 1127 ln(1 + f/700) between
// 20 Hz and Nyquist, applied to the power spectrum; natural-log output with
// flooring.

inline double hz_to_mel(double f) { return 1127.0 * std::log1p(f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::exp(m / 1127.0) - 1.0); }

// weights[b][k]: triangle b's weight on FFT bin k
inline std::vector<std::vector<double>> mel_filter_weights(int num_bins, int fft_bins,
                                                           int rate) {
  if (num_bins < 3) throw BadConfig("mel filterbank: need at least 3 bins");
  const int n = 2 * (fft_bins - 1);  // FFT size
  const double mel_lo = hz_to_mel(20.0), mel_hi = hz_to_mel(rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(num_bins) + 2);
  for (int j = 0; j < num_bins + 2; ++j)
    edges[static_cast<std::size_t>(j)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * j / (num_bins + 1));
  std::vector<std::vector<double>> weights(
      static_cast<std::size_t>(num_bins), std::vector<double>(static_cast<std::size_t>(fft_bins), 0.0));
  for (int b = 0; b < num_bins; ++b) {
    double left = edges[static_cast<std::size_t>(b)], center = edges[static_cast<std::size_t>(b) + 1],
           right = edges[static_cast<std::size_t>(b) + 2];
    bool any = false;
    for (int k = 0; k < fft_bins; ++k) {
      double f = static_cast<double>(k) * rate / n;
      double w = 0.0;
      if (f > left && f < center)
        w = (f - left) / (center - left);
      else if (f >= center && f < right)
        w = (right - f) / (right - center);
      weights[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)] = w;
      any = any || w > 0.0;
    }
    if (!any)
      throw BadConfig("mel filterbank: bin " + std::to_string(b) +
                      " catches no FFT bins (too many mel bins for this resolution)");
  }
  return weights;
}

inline Mat mel_log_energies(const Mat& spec, const FeatureConfig& cfg, int rate) {
  auto weights = mel_filter_weights(cfg.num_mel_bins, static_cast<int>(spec.cols()), rate);
  Mat out(spec.rows(), cfg.num_mel_bins);
  for (Eigen::Index t = 0; t < spec.rows(); ++t)
    for (int b = 0; b < cfg.num_mel_bins; ++b) {
      double e = 0.0;
      for (Eigen::Index k = 0; k < spec.cols(); ++k)
        e += weights[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)] * spec(t, k);
      out(t, b) = std::log(std::max(e, cfg.log_floor));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Orthonormal DCT-II, keeping the first num_cepstra coefficients.

inline Mat dct_matrix(int rows, int cols) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      double scale = (i == 0) ? std::sqrt(1.0 / cols) : std::sqrt(2.0 / cols);
      m(i, j) = scale * std::cos(M_PI * i * (2.0 * j + 1.0) / (2.0 * cols));
    }
  return m;
}

inline Mat mfcc_from_fbank(const Mat& fbank, const FeatureConfig& cfg) {
  if (cfg.num_cepstra > fbank.cols()) throw BadConfig("mfcc: num_cepstra > mel bins");
  Mat dct = dct_matrix(cfg.num_cepstra, static_cast<int>(fbank.cols()));
  return fbank * dct.transpose();
}

// ---------------------------------------------------------------------------
// Deltas: d_t = sum_k k (c_{t+k} - c_{t-k}) / (2 sum_k k^2), edge frames
// replicated.  order 2 repeats the operator on the deltas and concatenates.

inline Mat delta_of(const Mat& c, int n) {
  const Eigen::Index t_count = c.rows();
  double denom = 0.0;
  for (int k = 1; k <= n; ++k) denom += static_cast<double>(k) * k;
  denom *= 2.0;
  Mat d(t_count, c.cols());
  d.setZero();
  auto clamp_row = [&](Eigen::Index t) {
    return std::min(std::max<Eigen::Index>(t, 0), t_count - 1);
  };
  for (Eigen::Index t = 0; t < t_count; ++t)
    for (int k = 1; k <= n; ++k)
      d.row(t) += static_cast<double>(k) * (c.row(clamp_row(t + k)) - c.row(clamp_row(t - k)));
  d /= denom;
  return d;
}

inline FeatureMatrix append_deltas(const FeatureMatrix& feat, int n, int order) {
  if (order < 1 || order > 2) throw BadConfig("append_deltas: order in {1,2}");
  if (n < 1) throw BadConfig("append_deltas: n >= 1");
  if (feat.frames.rows() < 1) throw BadConfig("append_deltas: empty feature matrix");
  Mat d1 = delta_of(feat.frames, n);
  FeatureMatrix out;
  out.frame_shift_ms = feat.frame_shift_ms;
  out.kind = feat.kind;
  out.utt_id = feat.utt_id;
  const Eigen::Index dim = feat.frames.cols();
  out.frames.resize(feat.frames.rows(), dim * (order + 1));
  out.frames.leftCols(dim) = feat.frames;
  out.frames.middleCols(dim, dim) = d1;
  if (order == 2) out.frames.rightCols(dim) = delta_of(d1, n);
  return out;
}

// ---------------------------------------------------------------------------
// CMVN: per-speaker (count, sum x, sum x^2) accumulation; mean subtraction
// always, variance normalization only with two or more frames, sigma floored
// at 1e-5.

struct CmvnStats {
  std::int64_t count = 0;
  Vec sum;
  Vec sumsq;

  void accumulate(const Mat& frames) {
    if (count == 0) {
      sum = Vec::Zero(frames.cols());
      sumsq = Vec::Zero(frames.cols());
    }
    if (sum.size() != frames.cols())
      throw DimensionMismatch("cmvn accumulate: dim " + std::to_string(frames.cols()) +
                              " vs " + std::to_string(sum.size()));
    for (Eigen::Index t = 0; t < frames.rows(); ++t) {
      sum += frames.row(t).transpose();
      sumsq += frames.row(t).array().square().matrix().transpose();
    }
    count += frames.rows();
  }
  CmvnStats& operator+=(const CmvnStats& o) {
    if (o.count == 0) return *this;
    if (count == 0) {
      *this = o;
      return *this;
    }
    if (sum.size() != o.sum.size()) throw DimensionMismatch("cmvn merge: dim mismatch");
    count += o.count;
    sum += o.sum;
    sumsq += o.sumsq;
    return *this;
  }
};

inline FeatureMatrix apply_cmvn(const FeatureMatrix& feat, const CmvnStats& stats) {
  if (stats.count < 1) throw Error("apply_cmvn: empty stats");
  if (stats.sum.size() != feat.frames.cols())
    throw DimensionMismatch("apply_cmvn: stats dim " + std::to_string(stats.sum.size()) +
                            " vs feature dim " + std::to_string(feat.frames.cols()));
  FeatureMatrix out = feat;
  Vec mean = stats.sum / static_cast<double>(stats.count);
  out.frames.rowwise() -= mean.transpose();
  if (stats.count >= 2) {
    Vec var = stats.sumsq / static_cast<double>(stats.count) -
              mean.array().square().matrix();
    for (Eigen::Index d = 0; d < var.size(); ++d) {
      double sigma = std::sqrt(std::max(var(d), 0.0));
      out.frames.col(d) /= std::max(sigma, 1e-5);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whole pipeline for one utterance.

inline FeatureMatrix compute_features(const AudioBuffer& audio, const FeatureConfig& cfg,
                                      Rng* dither_rng = nullptr) {
  cfg.validate();
  FeatureMatrix out;
  out.frame_shift_ms = cfg.shift_ms;
  out.kind = cfg.kind;
  out.utt_id = audio.source_id;
  Mat windowed = frame_and_window(audio, cfg, dither_rng);
  if (windowed.rows() == 0) {
    int dim = (cfg.kind == FeatKind::kMfcc) ? cfg.num_cepstra : cfg.num_mel_bins;
    out.frames.resize(0, dim * (cfg.delta_order + 1));
    return out;
  }
  Mat spec = power_spectrum(windowed);
  Mat fbank = mel_log_energies(spec, cfg, audio.sample_rate_hz);
  out.frames = (cfg.kind == FeatKind::kMfcc) ? mfcc_from_fbank(fbank, cfg) : fbank;
  if (cfg.delta_order > 0) out = append_deltas(out, cfg.delta_window, cfg.delta_order);
  return out;
}

// ---------------------------------------------------------------------------
// Feature archive: {magic "FEAT", version u32, kind u8} then per utterance
// {utt_id, T u32, D u32, row-major f32}, with a text byte-offset index.

class FeatWriter {
 public:
  FeatWriter(const std::filesystem::path& archive, const std::filesystem::path& index,
             FeatKind kind)
      : os_(archive, std::ios::binary), index_os_(index) {
    if (!os_) throw IoError("cannot write " + archive.string());
    if (!index_os_) throw IoError("cannot write " + index.string());
    os_.write("FEAT", 4);
    write_pod<std::uint32_t>(os_, 1);
    write_pod<std::uint8_t>(os_, static_cast<std::uint8_t>(kind));
  }

  void add(const FeatureMatrix& feat) {
    std::int64_t offset = os_.tellp();
    index_os_ << feat.utt_id << " " << offset << "\n";
    write_string(os_, feat.utt_id);
    write_pod<std::uint32_t>(os_, static_cast<std::uint32_t>(feat.frames.rows()));
    write_pod<std::uint32_t>(os_, static_cast<std::uint32_t>(feat.frames.cols()));
    for (Eigen::Index t = 0; t < feat.frames.rows(); ++t)
      for (Eigen::Index d = 0; d < feat.frames.cols(); ++d)
        write_pod<float>(os_, static_cast<float>(feat.frames(t, d)));
  }

 private:
  std::ofstream os_;
  std::ofstream index_os_;
};

class FeatReader {
 public:
  FeatReader(const std::filesystem::path& archive, const std::filesystem::path& index)
      : is_(archive, std::ios::binary) {
    if (!is_) throw IoError("cannot open " + archive.string());
    char magic[4];
    is_.read(magic, 4);
    if (!is_ || std::string(magic, 4) != "FEAT") throw IoError("bad feature archive magic");
    auto version = read_pod<std::uint32_t>(is_);
    if (version != 1) throw IoError("unsupported feature archive version");
    kind_ = static_cast<FeatKind>(read_pod<std::uint8_t>(is_));
    std::ifstream idx(index);
    if (!idx) throw IoError("cannot open " + index.string());
    std::string line;
    while (std::getline(idx, line)) {
      line = trim(line);
      if (line.empty()) continue;
      auto [id, off] = split_key_rest(line);
      offsets_[id] = std::stoll(off);
      order_.push_back(id);
    }
  }

  FeatKind kind() const { return kind_; }
  const std::vector<std::string>& utt_ids() const { return order_; }
  bool has(const std::string& utt_id) const { return offsets_.count(utt_id) > 0; }

  FeatureMatrix read(const std::string& utt_id) {
    auto it = offsets_.find(utt_id);
    if (it == offsets_.end()) throw IoError("feature archive: no utterance " + utt_id);
    is_.clear();
    is_.seekg(it->second);
    FeatureMatrix out;
    out.utt_id = read_string(is_);
    if (out.utt_id != utt_id) throw IoError("feature archive: index/payload id mismatch");
    auto t_count = read_pod<std::uint32_t>(is_);
    auto dim = read_pod<std::uint32_t>(is_);
    out.kind = kind_;
    out.frames.resize(t_count, dim);
    for (std::uint32_t t = 0; t < t_count; ++t)
      for (std::uint32_t d = 0; d < dim; ++d)
        out.frames(t, d) = static_cast<double>(read_pod<float>(is_));
    return out;
  }

 private:
  std::ifstream is_;
  FeatKind kind_ = FeatKind::kMfcc;
  std::map<std::string, std::int64_t> offsets_;
  std::vector<std::string> order_;
};

// cmvn.stats text file: per speaker "spk count D sum... sumsq...".
inline void write_cmvn_stats(const std::map<std::string, CmvnStats>& stats,
                             const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  for (const auto& [spk, st] : stats) {
    os << spk << " " << st.count << " " << st.sum.size();
    for (Eigen::Index d = 0; d < st.sum.size(); ++d) os << " " << st.sum(d);
    for (Eigen::Index d = 0; d < st.sumsq.size(); ++d) os << " " << st.sumsq(d);
    os << "\n";
  }
}

inline std::map<std::string, CmvnStats> read_cmvn_stats(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::map<std::string, CmvnStats> out;
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string spk;
    std::int64_t count;
    Eigen::Index dim;
    ls >> spk >> count >> dim;
    CmvnStats st;
    st.count = count;
    st.sum.resize(dim);
    st.sumsq.resize(dim);
    for (Eigen::Index d = 0; d < dim; ++d) ls >> st.sum(d);
    for (Eigen::Index d = 0; d < dim; ++d) ls >> st.sumsq(d);
    if (!ls) throw IoError("bad cmvn.stats line: " + line);
    out.emplace(spk, std::move(st));
  }
  return out;
}

}  // namespace asrkit
