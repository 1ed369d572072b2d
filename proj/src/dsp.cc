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

#include "cdf/dsp.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cdf/common.h"
#include "cdf/io.h"

namespace cdf {
namespace dsp {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

int FrameConfig::frame_length_samples(int sample_rate) const {
  return static_cast<int>(frame_length_ms * sample_rate / 1000.0 + 0.5);
}

int FrameConfig::frame_shift_samples(int sample_rate) const {
  return static_cast<int>(frame_shift_ms * sample_rate / 1000.0 + 0.5);
}

void FrameConfig::validate(int sample_rate) const {
  if (sample_rate <= 0) throw Error("sample rate must be positive");
  if (frame_shift_ms > frame_length_ms)
    throw Error("frame shift must not exceed frame length");
  if (fft_size <= 0 || (fft_size & (fft_size - 1)) != 0)
    throw Error("fft_size must be a positive power of two");
  if (fft_size < frame_length_samples(sample_rate))
    throw Error(strprintf("fft_size %d < frame length %d samples", fft_size,
                          frame_length_samples(sample_rate)));
  if (n_mels <= 0 || n_mels > fft_size / 2)
    throw Error("n_mels must be in [1, fft_size/2]");
  if (log_floor <= 0.0) throw Error("log_floor must be positive");
}

// ---------------------------------------------------------------------------
// WAV

AudioBuffer read_wav(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw Error("wav file not found: " + path.string());
  std::ifstream is = open_in(path);

  char riff[4];
  is.read(riff, 4);
  if (is.gcount() != 4 || std::memcmp(riff, "RIFF", 4) != 0)
    throw Error("not a RIFF file: " + path.string());
  read_u32(is);  // chunk size
  char wave[4];
  is.read(wave, 4);
  if (std::memcmp(wave, "WAVE", 4) != 0)
    throw Error("not a WAVE file: " + path.string());

  int sample_rate = 0;
  uint16_t channels = 0, bits = 0, format = 0;
  std::vector<int16_t> pcm;
  bool have_fmt = false, have_data = false;
  while (!have_data) {
    char id[4];
    is.read(id, 4);
    if (is.gcount() != 4) break;
    const uint32_t size = read_u32(is);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      format = read_u16(is);
      channels = read_u16(is);
      sample_rate = static_cast<int>(read_u32(is));
      read_u32(is);  // byte rate
      read_u16(is);  // block align
      bits = read_u16(is);
      if (size > 16) is.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw Error("wav data chunk before fmt: " + path.string());
      pcm.resize(size / 2);
      is.read(reinterpret_cast<char*>(pcm.data()), size);
      if (static_cast<uint32_t>(is.gcount()) != size)
        throw Error("truncated wav data: " + path.string());
      have_data = true;
    } else {
      is.seekg(size + (size & 1), std::ios::cur);
    }
  }
  if (!have_fmt || !have_data)
    throw Error("missing fmt/data chunk: " + path.string());
  if (format != 1)
    throw Error(strprintf("unsupported wav format %u (PCM only): %s", format,
                          path.c_str()));
  if (channels != 1)
    throw Error(strprintf("unsupported channel count %u (mono only): %s",
                          channels, path.c_str()));
  if (bits != 16)
    throw Error(strprintf("unsupported bit depth %u (16-bit only): %s", bits,
                          path.c_str()));

  AudioBuffer out;
  out.sample_rate = sample_rate;
  out.samples.resize(pcm.size());
  for (size_t i = 0; i < pcm.size(); ++i) out.samples[i] = pcm[i] / 32768.0;
  return out;
}

void write_wav(const AudioBuffer& audio, const std::filesystem::path& path) {
  std::ofstream os = open_out(path);
  const uint32_t n = static_cast<uint32_t>(audio.samples.size());
  const uint32_t data_bytes = n * 2;
  os.write("RIFF", 4);
  write_u32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  write_u32(os, 16);
  write_u16(os, 1);  // PCM
  write_u16(os, 1);  // mono
  write_u32(os, static_cast<uint32_t>(audio.sample_rate));
  write_u32(os, static_cast<uint32_t>(audio.sample_rate) * 2);
  write_u16(os, 2);
  write_u16(os, 16);
  os.write("data", 4);
  write_u32(os, data_bytes);
  for (double s : audio.samples) {
    double v = s * 32768.0;
    v = std::min(32767.0, std::max(-32768.0, v));
    const int16_t q = static_cast<int16_t>(std::lrint(v));
    os.write(reinterpret_cast<const char*>(&q), 2);
  }
  if (!os) throw Error("failed writing wav: " + path.string());
}

// ---------------------------------------------------------------------------
// FFT and framing

void fft_radix2(std::vector<double>* re, std::vector<double>* im) {
  const size_t n = re->size();
  CDF_CHECK(im->size() == n && n > 0 && (n & (n - 1)) == 0,
            "fft needs power-of-two size");
  double* xr = re->data();
  double* xi = im->data();
  // bit reversal
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(xr[i], xr[j]);
      std::swap(xi[i], xi[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        const size_t a = i + k, b = i + k + len / 2;
        const double tr = xr[b] * cr - xi[b] * ci;
        const double ti = xr[b] * ci + xi[b] * cr;
        xr[b] = xr[a] - tr;
        xi[b] = xi[a] - ti;
        xr[a] += tr;
        xi[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

Matrix<double> power_spectrogram(const AudioBuffer& audio,
                                 const FrameConfig& cfg) {
  cfg.validate(audio.sample_rate);
  const int frame_len = cfg.frame_length_samples(audio.sample_rate);
  const int frame_shift = cfg.frame_shift_samples(audio.sample_rate);
  const int64_t n = static_cast<int64_t>(audio.samples.size());
  if (n < frame_len)
    throw Error(strprintf("audio too short: %lld samples < one frame (%d)",
                          static_cast<long long>(n), frame_len));
  const int num_frames =
      1 + static_cast<int>((n - frame_len) / frame_shift);
  const int bins = cfg.num_bins();

  std::vector<double> window(frame_len);
  for (int i = 0; i < frame_len; ++i)
    window[i] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (frame_len - 1));

  Matrix<double> out(num_frames, bins);
  std::vector<double> re(cfg.fft_size), im(cfg.fft_size);
  for (int t = 0; t < num_frames; ++t) {
    const double* src = audio.samples.data() +
                        static_cast<size_t>(t) * frame_shift;
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    if (cfg.preemphasis) {
      re[0] = (src[0] - cfg.preemphasis_coeff * src[0]) * window[0];
      for (int i = 1; i < frame_len; ++i)
        re[i] = (src[i] - cfg.preemphasis_coeff * src[i - 1]) * window[i];
    } else {
      for (int i = 0; i < frame_len; ++i) re[i] = src[i] * window[i];
    }
    fft_radix2(&re, &im);
    double* row = out.row(t);
    for (int k = 0; k < bins; ++k) row[k] = re[k] * re[k] + im[k] * im[k];
  }
  return out;
}

double hz_to_mel(double hz) { return 1127.0 * std::log(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::exp(mel / 1127.0) - 1.0); }

Matrix<double> mel_filterbank(int n_mels, int fft_size, int sample_rate,
                              double low_hz, double high_hz) {
  const int bins = fft_size / 2 + 1;
  const double mel_low = hz_to_mel(low_hz);
  const double mel_high = hz_to_mel(high_hz);
  // n_mels triangles with centers evenly spaced on the mel scale.
  std::vector<double> centers(n_mels + 2);
  for (int m = 0; m < n_mels + 2; ++m)
    centers[m] = mel_low + (mel_high - mel_low) * m / (n_mels + 1);

  Matrix<double> fb(n_mels, bins);
  for (int k = 0; k < bins; ++k) {
    const double mel_k =
        hz_to_mel(static_cast<double>(k) * sample_rate / fft_size);
    for (int m = 0; m < n_mels; ++m) {
      const double left = centers[m], center = centers[m + 1],
                   right = centers[m + 2];
      double w = 0.0;
      if (mel_k > left && mel_k < right) {
        w = (mel_k <= center) ? (mel_k - left) / (center - left)
                              : (right - mel_k) / (right - center);
      }
      fb(m, k) = w;
    }
  }
  return fb;
}

FeatureMatrix log_fbank(const AudioBuffer& audio, const FrameConfig& cfg) {
  Matrix<double> power = power_spectrogram(audio, cfg);
  Matrix<double> fb = mel_filterbank(cfg.n_mels, cfg.fft_size,
                                     audio.sample_rate, 20.0,
                                     audio.sample_rate / 2.0);
  FeatureMatrix out;
  out.kind = FeatureKind::kLogFbank;
  out.frame_shift_ms = cfg.frame_shift_ms;
  out.data = Matrix<double>(power.rows(), cfg.n_mels);
  for (int t = 0; t < power.rows(); ++t) {
    const double* p = power.row(t);
    double* o = out.data.row(t);
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* w = fb.row(m);
      double acc = 0.0;
      for (int k = 0; k < power.cols(); ++k) acc += w[k] * p[k];
      o[m] = std::log(std::max(acc, cfg.log_floor));
    }
  }
  return out;
}

FeatureMatrix log_spectrum(const AudioBuffer& audio, const FrameConfig& cfg) {
  Matrix<double> power = power_spectrogram(audio, cfg);
  FeatureMatrix out;
  out.kind = FeatureKind::kLogSpectrum;
  out.frame_shift_ms = cfg.frame_shift_ms;
  out.data = Matrix<double>(power.rows(), power.cols());
  const double floor2 = cfg.log_floor * cfg.log_floor;
  for (int t = 0; t < power.rows(); ++t) {
    const double* p = power.row(t);
    double* o = out.data.row(t);
    for (int k = 0; k < power.cols(); ++k)
      o[k] = 0.5 * std::log(std::max(p[k], floor2));
  }
  return out;
}

FeatureMatrix splice(const FeatureMatrix& feat, int left, int right) {
  CDF_CHECK(left >= 0 && right >= 0, "splice context must be nonnegative");
  const int t_count = feat.data.rows();
  const int d = feat.data.cols();
  CDF_CHECK(t_count >= 1, "splice needs at least one frame");
  const int width = left + right + 1;
  FeatureMatrix out;
  out.kind = FeatureKind::kSpliced;
  out.frame_shift_ms = feat.frame_shift_ms;
  out.data = Matrix<double>(t_count, d * width);
  for (int t = 0; t < t_count; ++t) {
    double* o = out.data.row(t);
    for (int c = -left; c <= right; ++c) {
      const int src = std::clamp(t + c, 0, t_count - 1);
      std::memcpy(o + static_cast<size_t>(c + left) * d, feat.data.row(src),
                  sizeof(double) * d);
    }
  }
  return out;
}

FeatureMatrix cmvn(const FeatureMatrix& feat) {
  const int t_count = feat.data.rows();
  const int d = feat.data.cols();
  FeatureMatrix out = feat;
  for (int c = 0; c < d; ++c) {
    double mean = 0.0;
    for (int t = 0; t < t_count; ++t) mean += feat.data(t, c);
    mean /= t_count;
    double var = 0.0;
    for (int t = 0; t < t_count; ++t) {
      const double x = feat.data(t, c) - mean;
      var += x * x;
    }
    var /= t_count;
    const double scale = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
    for (int t = 0; t < t_count; ++t)
      out.data(t, c) = (feat.data(t, c) - mean) * scale;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CDFM file format: magic "CDFM", u8 version, u8 kind, u16 reserved,
// u32 T, u32 D, f32 frame_shift_ms, T*D f32 row-major.

void save_feature(const FeatureMatrix& feat, const std::filesystem::path& p) {
  std::ofstream os = open_out(p);
  write_magic(os, "CDFM");
  write_u8(os, 1);
  write_u8(os, static_cast<uint8_t>(feat.kind));
  write_u16(os, 0);
  write_u32(os, static_cast<uint32_t>(feat.data.rows()));
  write_u32(os, static_cast<uint32_t>(feat.data.cols()));
  write_f32(os, static_cast<float>(feat.frame_shift_ms));
  std::vector<float> row(feat.data.cols());
  for (int t = 0; t < feat.data.rows(); ++t) {
    const double* src = feat.data.row(t);
    for (int c = 0; c < feat.data.cols(); ++c)
      row[c] = static_cast<float>(src[c]);
    write_f32_array(os, row.data(), row.size());
  }
  if (!os) throw Error("failed writing feature file: " + p.string());
}

FeatureMatrix load_feature(const std::filesystem::path& p) {
  std::ifstream is = open_in(p);
  expect_magic(is, "CDFM", "feature");
  const uint8_t version = read_u8(is);
  if (version != 1)
    throw Error(strprintf("unsupported CDFM version %u", version));
  const uint8_t kind = read_u8(is);
  if (kind > 3) throw Error(strprintf("bad feature kind %u", kind));
  read_u16(is);
  const uint32_t t_count = read_u32(is);
  const uint32_t d = read_u32(is);
  FeatureMatrix out;
  out.kind = static_cast<FeatureKind>(kind);
  out.frame_shift_ms = read_f32(is);
  out.data = Matrix<double>(static_cast<int>(t_count), static_cast<int>(d));
  std::vector<float> row(d);
  for (uint32_t t = 0; t < t_count; ++t) {
    read_f32_array(is, row.data(), d);
    double* dst = out.data.row(static_cast<int>(t));
    for (uint32_t c = 0; c < d; ++c) dst[c] = row[c];
  }
  return out;
}

}  // namespace dsp
}  // namespace cdf
