// Copyright (c) 2026 The cdf-speech Authors
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

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cdf/dsp.h"
#include "cdf/io.h"
#include "cdf/rng.h"
#include "oracles.h"

using namespace cdf;
namespace fs = std::filesystem;

namespace {

dsp::FrameConfig test_cfg() {
  dsp::FrameConfig cfg;
  return cfg;  // 25ms/10ms, fft 256, 40 mels, floor 1e-10
}

dsp::AudioBuffer make_audio(std::vector<double> samples, int rate = 8000) {
  dsp::AudioBuffer a;
  a.samples = std::move(samples);
  a.sample_rate = rate;
  return a;
}

fs::path temp_dir() {
  const fs::path dir =
      fs::temp_directory_path() / "cdf_test_dsp";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("wav round trip is byte identical") {
  const fs::path dir = temp_dir();
  Rng rng(7);
  dsp::AudioBuffer a;
  a.sample_rate = 8000;
  for (int i = 0; i < 4000; ++i)
    a.samples.push_back(std::floor(rng.uniform(-32768, 32768)) / 32768.0);
  const fs::path f1 = dir / "a.wav", f2 = dir / "b.wav";
  dsp::write_wav(a, f1);
  dsp::write_wav(dsp::read_wav(f1), f2);
  CHECK(files_identical(f1, f2));
}

TEST_CASE("wav normalization constant") {
  const fs::path dir = temp_dir();
  dsp::AudioBuffer a = make_audio({16384.0 / 32768.0});
  const fs::path f = dir / "one.wav";
  dsp::write_wav(a, f);
  const dsp::AudioBuffer b = dsp::read_wav(f);
  REQUIRE(b.samples.size() == 1);
  CHECK(b.samples[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(b.sample_rate == 8000);
}

TEST_CASE("wav zero signal stays zero") {
  const fs::path dir = temp_dir();
  dsp::AudioBuffer a = make_audio(std::vector<double>(1600, 0.0));
  dsp::write_wav(a, dir / "zero.wav");
  const dsp::AudioBuffer b = dsp::read_wav(dir / "zero.wav");
  CHECK(b.samples.size() == 1600);
  for (double s : b.samples) CHECK(s == 0.0);
}

TEST_CASE("wav reader rejects bad input") {
  const fs::path dir = temp_dir();
  CHECK_THROWS_AS(dsp::read_wav(dir / "missing.wav"), Error);
  std::ofstream os(dir / "junk.wav", std::ios::binary);
  os << "this is not a riff file at all";
  os.close();
  CHECK_THROWS_AS(dsp::read_wav(dir / "junk.wav"), Error);
}

TEST_CASE("power spectrogram of zero audio is zero") {
  const auto audio = make_audio(std::vector<double>(1600, 0.0));
  const Matrix<double> p = dsp::power_spectrogram(audio, test_cfg());
  CHECK(p.rows() == 1 + (1600 - 200) / 80);
  CHECK(p.cols() == 129);
  for (size_t i = 0; i < p.size(); ++i) CHECK(p.data()[i] == 0.0);
}

TEST_CASE("power spectrogram rejects short audio") {
  const auto audio = make_audio(std::vector<double>(100, 0.1));
  CHECK_THROWS_AS(dsp::power_spectrogram(audio, test_cfg()), Error);
}

TEST_CASE("sine at a bin center peaks at that bin") {
  dsp::FrameConfig cfg = test_cfg();
  const int rate = 8000;
  // Bin k of a 256-point FFT at 8 kHz sits at k * 31.25 Hz.
  for (int k : {8, 32, 100}) {
    const double freq = static_cast<double>(k) * rate / cfg.fft_size;
    std::vector<double> samples(2000);
    for (size_t i = 0; i < samples.size(); ++i)
      samples[i] = 0.7 * std::sin(2.0 * 3.14159265358979323846 * freq * i /
                                  rate);
    const Matrix<double> p =
        dsp::power_spectrogram(make_audio(std::move(samples)), cfg);
    for (int t = 0; t < p.rows(); ++t) {
      int argmax = 0;
      for (int b = 1; b < p.cols(); ++b)
        if (p(t, b) > p(t, argmax)) argmax = b;
      CHECK(argmax == k);
    }
  }
}

TEST_CASE("fft path matches the naive DFT oracle") {
  Rng rng(123);
  dsp::FrameConfig cfg = test_cfg();
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 300 + static_cast<int>(rng.uniform_int(4096 - 300 + 1));
    std::vector<double> samples(n);
    for (auto& s : samples) s = rng.uniform(-1.0, 1.0);
    const auto audio = make_audio(std::move(samples));
    const Matrix<double> p = dsp::power_spectrogram(audio, cfg);

    // Oracle recomputes one frame per trial (cycling over frames).
    const int t = trial % p.rows();
    const int frame_len = cfg.frame_length_samples(8000);
    std::vector<double> frame(cfg.fft_size, 0.0);
    for (int i = 0; i < frame_len; ++i)
      frame[i] = audio.samples[t * 80 + i] *
                 (0.54 - 0.46 * std::cos(2.0 * 3.14159265358979323846 * i /
                                         (frame_len - 1)));
    const auto oracle = oracles::naive_power_spectrum(frame);
    for (int b = 0; b < p.cols(); ++b)
      CHECK(std::abs(p(t, b) - oracle[b]) <= 1e-6 * (1.0 + oracle[b]));
  }
}

TEST_CASE("log fbank dimensions and zero-audio floor") {
  dsp::FrameConfig cfg = test_cfg();
  const auto audio = make_audio(std::vector<double>(1600, 0.0));
  const dsp::FeatureMatrix f = dsp::log_fbank(audio, cfg);
  CHECK(f.kind == dsp::FeatureKind::kLogFbank);
  CHECK(f.dim() == 40);
  for (size_t i = 0; i < f.data.size(); ++i)
    CHECK(f.data.data()[i] == doctest::Approx(std::log(1e-10)));
}

TEST_CASE("mel filterbank matches the triangular oracle") {
  const Matrix<double> fb = dsp::mel_filterbank(40, 256, 8000, 20.0, 4000.0);
  const Matrix<double> oracle =
      oracles::naive_mel_filterbank(40, 256, 8000, 20.0, 4000.0);
  REQUIRE(fb.rows() == oracle.rows());
  REQUIRE(fb.cols() == oracle.cols());
  for (int m = 0; m < fb.rows(); ++m) {
    double row_sum = 0.0;
    int support_start = -1, support_end = -1;
    for (int k = 0; k < fb.cols(); ++k) {
      CHECK(fb(m, k) == doctest::Approx(oracle(m, k)).epsilon(1e-12));
      row_sum += fb(m, k);
      if (fb(m, k) > 0.0) {
        if (support_start < 0) support_start = k;
        support_end = k;
      }
    }
    CHECK(row_sum > 0.0);
    // Triangular support is contiguous.
    for (int k = support_start; k <= support_end; ++k)
      if (k > support_start && k < support_end) CHECK(fb(m, k) > 0.0);
  }
}

TEST_CASE("log spectrum is definitionally exp-invertible") {
  Rng rng(5);
  std::vector<double> samples(2000);
  for (auto& s : samples) s = rng.uniform(-0.5, 0.5);
  const auto audio = make_audio(std::move(samples));
  dsp::FrameConfig cfg = test_cfg();
  const Matrix<double> power = dsp::power_spectrogram(audio, cfg);
  const dsp::FeatureMatrix ls = dsp::log_spectrum(audio, cfg);
  CHECK(ls.kind == dsp::FeatureKind::kLogSpectrum);
  for (int t = 0; t < power.rows(); ++t)
    for (int b = 0; b < power.cols(); ++b)
      if (power(t, b) > 1e-20)
        CHECK(std::abs(std::exp(ls.data(t, b)) - std::sqrt(power(t, b))) <=
              1e-9 * std::sqrt(power(t, b)));
}

TEST_CASE("log spectrum of zero audio is the log floor") {
  const auto audio = make_audio(std::vector<double>(800, 0.0));
  const dsp::FeatureMatrix ls = dsp::log_spectrum(audio, test_cfg());
  for (size_t i = 0; i < ls.data.size(); ++i)
    CHECK(ls.data.data()[i] == doctest::Approx(std::log(1e-10)));
}

TEST_CASE("splice dimensions, identity and edge replication") {
  dsp::FeatureMatrix f;
  f.kind = dsp::FeatureKind::kLogFbank;
  f.data = Matrix<double>(6, 40);
  Rng rng(9);
  for (size_t i = 0; i < f.data.size(); ++i)
    f.data.data()[i] = rng.uniform(-1, 1);

  const dsp::FeatureMatrix s44 = dsp::splice(f, 4, 4);
  CHECK(s44.kind == dsp::FeatureKind::kSpliced);
  CHECK(s44.dim() == 360);
  CHECK(s44.num_frames() == 6);
  // Center block equals the input row.
  for (int t = 0; t < 6; ++t)
    for (int d = 0; d < 40; ++d)
      CHECK(s44.data(t, 4 * 40 + d) == f.data(t, d));
  // Row 0's left context replicates row 0.
  for (int c = 0; c < 4; ++c)
    for (int d = 0; d < 40; ++d)
      CHECK(s44.data(0, c * 40 + d) == f.data(0, d));

  const dsp::FeatureMatrix s00 = dsp::splice(f, 0, 0);
  CHECK(s00.data == f.data);

  dsp::FeatureMatrix one;
  one.data = Matrix<double>(1, 3);
  one.data(0, 0) = 1;
  one.data(0, 1) = 2;
  one.data(0, 2) = 3;
  const dsp::FeatureMatrix s = dsp::splice(one, 2, 2);
  CHECK(s.dim() == 15);
  for (int c = 0; c < 5; ++c)
    for (int d = 0; d < 3; ++d) CHECK(s.data(0, c * 3 + d) == one.data(0, d));
}

TEST_CASE("cmvn normalizes columns and is idempotent") {
  Rng rng(11);
  dsp::FeatureMatrix f;
  f.data = Matrix<double>(50, 8);
  for (int t = 0; t < 50; ++t)
    for (int d = 0; d < 8; ++d) f.data(t, d) = rng.normal() * (d + 1) + d;
  for (int t = 0; t < 50; ++t) f.data(t, 7) = 3.25;  // constant column

  const dsp::FeatureMatrix n = dsp::cmvn(f);
  for (int d = 0; d < 8; ++d) {
    double mean = 0.0, var = 0.0;
    for (int t = 0; t < 50; ++t) mean += n.data(t, d);
    mean /= 50;
    for (int t = 0; t < 50; ++t) {
      const double x = n.data(t, d) - mean;
      var += x * x;
    }
    var /= 50;
    CHECK(std::abs(mean) < 1e-9);
    if (d < 7) CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
  for (int t = 0; t < 50; ++t) CHECK(n.data(t, 7) == 0.0);

  const dsp::FeatureMatrix nn2 = dsp::cmvn(n);
  for (size_t i = 0; i < n.data.size(); ++i)
    CHECK(std::abs(nn2.data.data()[i] - n.data.data()[i]) < 1e-9);
}

TEST_CASE("feature file round trip is bit exact") {
  const fs::path dir = temp_dir();
  Rng rng(13);
  dsp::FeatureMatrix f;
  f.kind = dsp::FeatureKind::kLogSpectrum;
  f.frame_shift_ms = 10.0;
  f.data = Matrix<double>(17, 129);
  for (size_t i = 0; i < f.data.size(); ++i)
    f.data.data()[i] = static_cast<float>(rng.normal());
  const fs::path p1 = dir / "f1.cdfm", p2 = dir / "f2.cdfm";
  dsp::save_feature(f, p1);
  const dsp::FeatureMatrix g = dsp::load_feature(p1);
  CHECK(g.kind == f.kind);
  CHECK(g.data == f.data);
  dsp::save_feature(g, p2);
  CHECK(files_identical(p1, p2));
}

TEST_CASE("all dsp outputs stay finite on noisy input") {
  Rng rng(17);
  std::vector<double> samples(3000);
  for (auto& s : samples) s = rng.uniform(-1.0, 1.0);
  const auto audio = make_audio(std::move(samples));
  dsp::FrameConfig cfg = test_cfg();
  CHECK(dsp::log_fbank(audio, cfg).data.all_finite());
  CHECK(dsp::log_spectrum(audio, cfg).data.all_finite());
  CHECK(dsp::splice(dsp::log_fbank(audio, cfg), 5, 5).data.all_finite());
  CHECK(dsp::cmvn(dsp::log_fbank(audio, cfg)).data.all_finite());
}
