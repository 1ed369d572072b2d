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

#ifndef CDF_DSP_H_
#define CDF_DSP_H_

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cdf/matrix.h"

namespace cdf {
namespace dsp {

struct AudioBuffer {
  std::vector<double> samples;  // normalized to [-1, 1]
  int sample_rate = 0;
};

struct FrameConfig {
  double frame_length_ms = 25.0;
  double frame_shift_ms = 10.0;
  int fft_size = 256;   // power of two, >= samples per frame
  int n_mels = 40;
  double log_floor = 1e-10;
  // Neither is applied by default; kept as switches so the front end can
  // be matched against other toolchains.
  bool preemphasis = false;
  double preemphasis_coeff = 0.97;
  bool dither = false;

  int frame_length_samples(int sample_rate) const;
  int frame_shift_samples(int sample_rate) const;
  int num_bins() const { return fft_size / 2 + 1; }
  void validate(int sample_rate) const;
};

enum class FeatureKind : uint8_t {
  kLogFbank = 0,
  kLogSpectrum = 1,
  kSpliced = 2,
  kConditioned = 3,
};

struct FeatureMatrix {
  Matrix<double> data;  // T x D
  double frame_shift_ms = 10.0;
  FeatureKind kind = FeatureKind::kLogFbank;

  int num_frames() const { return data.rows(); }
  int dim() const { return data.cols(); }
};

// RIFF PCM 16-bit mono only; samples divided by 32768.
AudioBuffer read_wav(const std::filesystem::path& path);
void write_wav(const AudioBuffer& audio, const std::filesystem::path& path);

// In-place radix-2 FFT; re/im sizes must be equal powers of two.
void fft_radix2(std::vector<double>* re, std::vector<double>* im);

// |FFT|^2 of each Hamming-windowed frame; T x (fft_size/2 + 1).
// Power spectra are an internal intermediate, so this returns a bare
// matrix rather than a kind-tagged FeatureMatrix.
Matrix<double> power_spectrogram(const AudioBuffer& audio,
                                 const FrameConfig& cfg);

FeatureMatrix log_fbank(const AudioBuffer& audio, const FrameConfig& cfg);
FeatureMatrix log_spectrum(const AudioBuffer& audio, const FrameConfig& cfg);

// Concatenates [t-left, t+right] rows per frame; boundary frames are
// replicated so T is unchanged.
FeatureMatrix splice(const FeatureMatrix& feat, int left, int right);

// Per-utterance mean/variance normalization per column. Zero-variance
// columns are mean-centered only.
FeatureMatrix cmvn(const FeatureMatrix& feat);

// HTK-style triangular mel filters, rows n_mels x (fft_size/2 + 1),
// spanning low_hz .. high_hz. mel(f) = 1127 ln(1 + f/700).
Matrix<double> mel_filterbank(int n_mels, int fft_size, int sample_rate,
                              double low_hz, double high_hz);
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// CDFM container (f32 payload).
void save_feature(const FeatureMatrix& feat, const std::filesystem::path& p);
FeatureMatrix load_feature(const std::filesystem::path& p);

}  // namespace dsp
}  // namespace cdf

#endif  // CDF_DSP_H_
