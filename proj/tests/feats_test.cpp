// tests/feats_test.cpp
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

#include "asrkit/feats.hpp"

#include <catch2/catch_amalgamated.hpp>

#include "testutil.hpp"

using namespace asrkit;

namespace {

AudioBuffer make_audio(const std::vector<double>& samples, int rate = 16000,
                       const std::string& id = "utt") {
  AudioBuffer b;
  b.sample_rate_hz = rate;
  b.source_id = id;
  b.channels = {samples};
  return b;
}

AudioBuffer random_audio(std::mt19937_64& rng, double seconds, int rate = 16000) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<double> x(static_cast<std::size_t>(seconds * rate));
  for (double& v : x) v = u(rng);
  return make_audio(x, rate);
}

// Straight-line reference pipeline: direct O(N^2) DFT, explicit filter sums,
// direct DCT-II formula.  Everything written out longhand, no FFT.
Mat reference_mfcc(const AudioBuffer& audio, const FeatureConfig& cfg) {
  const int rate = audio.sample_rate_hz;
  const int w = static_cast<int>(llround(cfg.window_ms * rate / 1000.0));
  const int s = static_cast<int>(llround(cfg.shift_ms * rate / 1000.0));
  const std::vector<double>& x = audio.mono();
  const int t_count =
      x.size() < static_cast<std::size_t>(w)
          ? 0
          : 1 + static_cast<int>((x.size() - static_cast<std::size_t>(w)) / s);
  std::size_t n = 1;
  while (n < static_cast<std::size_t>(w)) n <<= 1;
  const int bins = static_cast<int>(n / 2 + 1);

  // mel filterbank, rebuilt from the definition
  const double mlo = 1127.0 * std::log1p(20.0 / 700.0);
  const double mhi = 1127.0 * std::log1p((rate / 2.0) / 700.0);
  std::vector<double> edge(static_cast<std::size_t>(cfg.num_mel_bins) + 2);
  for (int j = 0; j < cfg.num_mel_bins + 2; ++j)
    edge[static_cast<std::size_t>(j)] =
        700.0 * (std::exp((mlo + (mhi - mlo) * j / (cfg.num_mel_bins + 1)) / 1127.0) - 1.0);

  Mat out(t_count, cfg.num_cepstra);
  for (int t = 0; t < t_count; ++t) {
    // frame, pre-emphasis, Hamming
    std::vector<double> y(static_cast<std::size_t>(w));
    for (int i = 0; i < w; ++i) y[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(t) * s + i];
    std::vector<double> pre(static_cast<std::size_t>(w));
    for (int i = 0; i < w; ++i) {
      double prev = (i == 0) ? y[0] : y[static_cast<std::size_t>(i - 1)];
      pre[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] - cfg.preemph * prev;
    }
    for (int i = 0; i < w; ++i)
      pre[static_cast<std::size_t>(i)] *= 0.54 - 0.46 * std::cos(2.0 * M_PI * i / (w - 1));
    // direct DFT power
    std::vector<double> power(static_cast<std::size_t>(bins));
    for (int k = 0; k < bins; ++k) {
      double re = 0.0, im = 0.0;
      for (int i = 0; i < w; ++i) {
        double ang = -2.0 * M_PI * k * i / static_cast<double>(n);
        re += pre[static_cast<std::size_t>(i)] * std::cos(ang);
        im += pre[static_cast<std::size_t>(i)] * std::sin(ang);
      }
      power[static_cast<std::size_t>(k)] = re * re + im * im;
    }
    // filter sums and log
    std::vector<double> fbank(static_cast<std::size_t>(cfg.num_mel_bins));
    for (int b = 0; b < cfg.num_mel_bins; ++b) {
      double e = 0.0;
      for (int k = 0; k < bins; ++k) {
        double f = static_cast<double>(k) * rate / static_cast<double>(n);
        double l = edge[static_cast<std::size_t>(b)], c = edge[static_cast<std::size_t>(b) + 1],
               r = edge[static_cast<std::size_t>(b) + 2];
        double wt = 0.0;
        if (f > l && f < c)
          wt = (f - l) / (c - l);
        else if (f >= c && f < r)
          wt = (r - f) / (r - c);
        e += wt * power[static_cast<std::size_t>(k)];
      }
      fbank[static_cast<std::size_t>(b)] = std::log(std::max(e, cfg.log_floor));
    }
    // direct DCT-II
    for (int i = 0; i < cfg.num_cepstra; ++i) {
      double scale = (i == 0) ? std::sqrt(1.0 / cfg.num_mel_bins)
                              : std::sqrt(2.0 / cfg.num_mel_bins);
      double acc = 0.0;
      for (int j = 0; j < cfg.num_mel_bins; ++j)
        acc += fbank[static_cast<std::size_t>(j)] *
               std::cos(M_PI * i * (2.0 * j + 1.0) / (2.0 * cfg.num_mel_bins));
      out(t, i) = scale * acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("framing arithmetic") {
  FeatureConfig cfg;
  CHECK(window_samples(cfg, 16000) == 400);
  CHECK(shift_samples(cfg, 16000) == 160);
  CHECK(num_frames(16000, cfg, 16000) == 98);
  CHECK(num_frames(399, cfg, 16000) == 0);
  CHECK(num_frames(400, cfg, 16000) == 1);
  AudioBuffer b = make_audio(std::vector<double>(300, 0.1));
  CHECK(frame_and_window(b, cfg).rows() == 0);
}

TEST_CASE("pre-emphasis and Hamming on a constant signal") {
  FeatureConfig cfg;
  AudioBuffer b = make_audio(std::vector<double>(800, 1.0));
  Mat frames = frame_and_window(b, cfg);
  REQUIRE(frames.rows() >= 1);
  const int w = 400;
  for (int i = 0; i < w; ++i) {
    double window = 0.54 - 0.46 * std::cos(2.0 * M_PI * i / (w - 1));
    CHECK_THAT(frames(0, i), Catch::Matchers::WithinAbs(0.03 * window, 1e-12));
  }
}

TEST_CASE("bad feature configs are rejected") {
  FeatureConfig cfg;
  cfg.shift_ms = 30.0;  // > window
  AudioBuffer b = make_audio(std::vector<double>(800, 0.0));
  CHECK_THROWS_AS(frame_and_window(b, cfg), BadConfig);
  FeatureConfig cfg2;
  cfg2.num_cepstra = 50;
  CHECK_THROWS_AS(cfg2.validate(), BadConfig);
}

TEST_CASE("power spectrum basics") {
  Mat zero(2, 400);
  zero.setZero();
  Mat spec = power_spectrum(zero);
  CHECK(spec.cols() == 257);
  CHECK(spec.maxCoeff() == 0.0);

  // 1 kHz sine, no window distortion: feed the raw frame directly
  Mat frame(1, 400);
  for (int i = 0; i < 400; ++i) frame(0, i) = std::sin(2.0 * M_PI * 1000.0 * i / 16000.0);
  Mat p = power_spectrum(frame);
  Eigen::Index argmax = 0;
  p.row(0).maxCoeff(&argmax);
  CHECK(argmax == 32);  // round(1000 * 512 / 16000)

  // Parseval with symmetry weights
  double energy = frame.row(0).array().square().sum();
  double spectral = p(0, 0) + p(0, 256);
  for (int k = 1; k < 256; ++k) spectral += 2.0 * p(0, k);
  CHECK_THAT(spectral / (512.0 * energy), Catch::Matchers::WithinAbs(1.0, 1e-6));
}

TEST_CASE("power spectrum matches the direct DFT oracle") {
  std::mt19937_64 rng(9);
  Mat frames(3, 200);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Eigen::Index t = 0; t < 3; ++t)
    for (Eigen::Index i = 0; i < 200; ++i) frames(t, i) = u(rng);
  Mat p = power_spectrum(frames);  // N = 256
  for (Eigen::Index t = 0; t < 3; ++t)
    for (int k = 0; k <= 128; ++k) {
      double re = 0.0, im = 0.0;
      for (int i = 0; i < 200; ++i) {
        double ang = -2.0 * M_PI * k * i / 256.0;
        re += frames(t, i) * std::cos(ang);
        im += frames(t, i) * std::sin(ang);
      }
      CHECK_THAT(p(t, k), Catch::Matchers::WithinAbs(re * re + im * im, 1e-6));
    }
}

TEST_CASE("mel filterbank construction properties") {
  auto weights = mel_filter_weights(23, 257, 16000);
  REQUIRE(weights.size() == 23);
  // interior FFT bins are covered with total weight in (0, 2]
  for (int k = 4; k < 250; ++k) {
    double total = 0.0;
    for (const auto& w : weights) total += w[static_cast<std::size_t>(k)];
    CHECK(total > 0.0);
    CHECK(total <= 2.0 + 1e-12);
  }
  CHECK_THROWS_AS(mel_filter_weights(2, 257, 16000), BadConfig);
  // far more bins than spectral resolution: some triangle catches nothing
  CHECK_THROWS_AS(mel_filter_weights(200, 33, 16000), BadConfig);
}

TEST_CASE("mel log energies: floor and gain behaviour") {
  FeatureConfig cfg;
  Mat zero(1, 257);
  zero.setZero();
  Mat logmel = mel_log_energies(zero, cfg, 16000);
  for (int b = 0; b < cfg.num_mel_bins; ++b)
    CHECK_THAT(logmel(0, b), Catch::Matchers::WithinAbs(std::log(1e-10), 1e-12));

  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  Mat spec(1, 257);
  for (int k = 0; k < 257; ++k) spec(0, k) = u(rng);
  Mat a = mel_log_energies(spec, cfg, 16000);
  Mat b4 = mel_log_energies(Mat(4.0 * spec), cfg, 16000);
  for (int b = 0; b < cfg.num_mel_bins; ++b)
    CHECK_THAT(b4(0, b) - a(0, b), Catch::Matchers::WithinAbs(std::log(4.0), 1e-9));
}

TEST_CASE("dct-II is orthonormal and matches the direct formula") {
  FeatureConfig cfg;
  // constant row: c0 = v * sqrt(M), rest 0
  Mat fbank(1, 23);
  fbank.setConstant(0.7);
  Mat c = mfcc_from_fbank(fbank, cfg);
  CHECK_THAT(c(0, 0), Catch::Matchers::WithinAbs(0.7 * std::sqrt(23.0), 1e-12));
  for (int i = 1; i < 13; ++i) CHECK_THAT(c(0, i), Catch::Matchers::WithinAbs(0.0, 1e-12));

  // random row vs direct formula
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Mat row(1, 23);
  for (int j = 0; j < 23; ++j) row(0, j) = u(rng);
  Mat cc = mfcc_from_fbank(row, cfg);
  for (int i = 0; i < 13; ++i) {
    double scale = (i == 0) ? std::sqrt(1.0 / 23.0) : std::sqrt(2.0 / 23.0);
    double acc = 0.0;
    for (int j = 0; j < 23; ++j)
      acc += row(0, j) * std::cos(M_PI * i * (2.0 * j + 1.0) / 46.0);
    CHECK_THAT(cc(0, i), Catch::Matchers::WithinAbs(scale * acc, 1e-10));
  }

  // full square DCT is orthonormal: D D^T = I
  Mat d = dct_matrix(23, 23);
  Mat eye = d * d.transpose();
  CHECK_THAT((eye - Mat::Identity(23, 23)).cwiseAbs().maxCoeff(),
             Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("deltas: shape, constants and the ramp value") {
  FeatureMatrix f;
  f.frames.resize(10, 13);
  f.frames.setConstant(0.5);
  FeatureMatrix out = append_deltas(f, 2, 2);
  CHECK(out.frames.cols() == 39);
  CHECK(out.frames.rows() == 10);
  CHECK_THAT(out.frames.rightCols(26).cwiseAbs().maxCoeff(),
             Catch::Matchers::WithinAbs(0.0, 1e-15));

  // scalar ramp: interior delta = (1*2 + 2*4) / (2*5) = 1
  FeatureMatrix ramp;
  ramp.frames.resize(9, 1);
  for (int t = 0; t < 9; ++t) ramp.frames(t, 0) = static_cast<double>(t);
  FeatureMatrix rd = append_deltas(ramp, 2, 1);
  CHECK_THAT(rd.frames(4, 1), Catch::Matchers::WithinAbs(1.0, 1e-14));

  CHECK_THROWS_AS(append_deltas(f, 2, 3), BadConfig);
  CHECK_THROWS_AS(append_deltas(f, 0, 1), BadConfig);
}

TEST_CASE("cmvn: normalization, degenerate count, idempotence") {
  // two frames [1], [3] -> [-1], [+1]
  FeatureMatrix f;
  f.frames.resize(2, 1);
  f.frames << 1.0, 3.0;
  CmvnStats st;
  st.accumulate(f.frames);
  FeatureMatrix out = apply_cmvn(f, st);
  CHECK_THAT(out.frames(0, 0), Catch::Matchers::WithinAbs(-1.0, 1e-12));
  CHECK_THAT(out.frames(1, 0), Catch::Matchers::WithinAbs(1.0, 1e-12));

  // self-stats on random features: mean ~0, var ~1
  std::mt19937_64 rng(21);
  FeatureMatrix g;
  g.frames.resize(50, 5);
  std::normal_distribution<double> nd(3.0, 2.0);
  for (Eigen::Index t = 0; t < 50; ++t)
    for (Eigen::Index d = 0; d < 5; ++d) g.frames(t, d) = nd(rng);
  CmvnStats gs;
  gs.accumulate(g.frames);
  FeatureMatrix gn = apply_cmvn(g, gs);
  for (Eigen::Index d = 0; d < 5; ++d) {
    double mean = gn.frames.col(d).mean();
    double var = gn.frames.col(d).array().square().mean() - mean * mean;
    CHECK_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-10));
    CHECK_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-8));
  }
  // idempotence with recomputed stats
  CmvnStats gs2;
  gs2.accumulate(gn.frames);
  FeatureMatrix gn2 = apply_cmvn(gn, gs2);
  CHECK_THAT((gn2.frames - gn.frames).cwiseAbs().maxCoeff(),
             Catch::Matchers::WithinAbs(0.0, 1e-8));

  // single frame: mean removed, variance untouched
  FeatureMatrix one;
  one.frames.resize(1, 2);
  one.frames << 4.0, -2.0;
  CmvnStats os;
  os.accumulate(one.frames);
  FeatureMatrix on = apply_cmvn(one, os);
  CHECK_THAT(on.frames.cwiseAbs().maxCoeff(), Catch::Matchers::WithinAbs(0.0, 1e-12));

  // dimension mismatch
  CmvnStats wrong;
  Mat w(1, 3);
  w.setZero();
  wrong.accumulate(w);
  CHECK_THROWS_AS(apply_cmvn(one, wrong), DimensionMismatch);

  // stats merge is the same as joint accumulation
  CmvnStats a, b, joint;
  a.accumulate(g.frames.topRows(20));
  b.accumulate(g.frames.bottomRows(30));
  joint.accumulate(g.frames);
  a += b;
  CHECK(a.count == joint.count);
  CHECK_THAT((a.sum - joint.sum).cwiseAbs().maxCoeff(),
             Catch::Matchers::WithinAbs(0.0, 1e-9));
}

TEST_CASE("full mfcc pipeline matches the straight-line reference") {
  std::mt19937_64 rng(1234);
  FeatureConfig cfg;
  AudioBuffer audio = random_audio(rng, 0.2);
  FeatureMatrix got = compute_features(audio, cfg);
  Mat want = reference_mfcc(audio, cfg);
  REQUIRE(got.frames.rows() == want.rows());
  REQUIRE(got.frames.cols() == want.cols());
  for (Eigen::Index t = 0; t < want.rows(); ++t)
    for (Eigen::Index d = 0; d < want.cols(); ++d)
      CHECK_THAT(got.frames(t, d), Catch::Matchers::WithinAbs(want(t, d), 1e-6));
}

TEST_CASE("fbank path yields 40-dim features") {
  std::mt19937_64 rng(99);
  FeatureConfig cfg;
  cfg.kind = FeatKind::kFbank;
  cfg.num_mel_bins = 40;
  AudioBuffer audio = random_audio(rng, 0.1);
  FeatureMatrix f = compute_features(audio, cfg);
  CHECK(f.frames.cols() == 40);
  CHECK(f.kind == FeatKind::kFbank);
  CHECK(f.frames.allFinite());
}

TEST_CASE("feature extraction is deterministic without dither") {
  std::mt19937_64 rng(5);
  AudioBuffer audio = random_audio(rng, 0.1);
  FeatureConfig cfg;
  FeatureMatrix a = compute_features(audio, cfg);
  FeatureMatrix b = compute_features(audio, cfg);
  CHECK(a.frames == b.frames);
}

TEST_CASE("feature archive round trip with index") {
  test::TempDir tmp("feats_archive");
  std::mt19937_64 rng(6);
  FeatureConfig cfg;
  cfg.delta_order = 2;
  std::vector<FeatureMatrix> feats;
  for (int i = 0; i < 3; ++i) {
    AudioBuffer a = random_audio(rng, 0.05 + 0.02 * i);
    a.source_id = "utt" + std::to_string(i);
    feats.push_back(compute_features(a, cfg));
  }
  auto bin = tmp.path() / "feats.bin";
  auto idx = tmp.path() / "feats.idx";
  {
    FeatWriter writer(bin, idx, FeatKind::kMfcc);
    for (const auto& f : feats) writer.add(f);
  }
  FeatReader reader(bin, idx);
  CHECK(reader.kind() == FeatKind::kMfcc);
  REQUIRE(reader.utt_ids().size() == 3);
  // random access out of order
  for (int i = 2; i >= 0; --i) {
    FeatureMatrix f = reader.read("utt" + std::to_string(i));
    REQUIRE(f.frames.rows() == feats[static_cast<std::size_t>(i)].frames.rows());
    REQUIRE(f.frames.cols() == 39);
    // float32 on disk
    for (Eigen::Index t = 0; t < f.frames.rows(); ++t)
      for (Eigen::Index d = 0; d < f.frames.cols(); ++d)
        CHECK(f.frames(t, d) ==
              static_cast<double>(
                  static_cast<float>(feats[static_cast<std::size_t>(i)].frames(t, d))));
  }
  CHECK_THROWS_AS(reader.read("nope"), IoError);
}

TEST_CASE("cmvn stats file round trip") {
  test::TempDir tmp("feats_cmvn");
  std::map<std::string, CmvnStats> stats;
  Mat m(3, 4);
  m << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
  stats["spkA"].accumulate(m);
  stats["spkB"].accumulate(m.topRows(1));
  auto p = tmp.path() / "cmvn.stats";
  write_cmvn_stats(stats, p);
  auto back = read_cmvn_stats(p);
  REQUIRE(back.size() == 2);
  CHECK(back["spkA"].count == 3);
  CHECK(back["spkB"].count == 1);
  CHECK_THAT((back["spkA"].sum - stats["spkA"].sum).cwiseAbs().maxCoeff(),
             Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_THAT((back["spkA"].sumsq - stats["spkA"].sumsq).cwiseAbs().maxCoeff(),
             Catch::Matchers::WithinAbs(0.0, 1e-12));
}
