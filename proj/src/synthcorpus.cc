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

#include "cdf/synthcorpus.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

#include "cdf/common.h"
#include "cdf/io.h"

namespace cdf {
namespace synth {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

void GenConfig::validate() const {
  if (phones < 2 || speakers < 2 || emotions < 2)
    throw Error("corpus needs >= 2 phones, speakers, emotions");
  if (spectrum_bins < 2 || ((spectrum_bins - 1) & (spectrum_bins - 2)) != 0)
    throw Error("spectrum_bins must be 2^k + 1");
  if (utts_per_pair < 1) throw Error("utts_per_pair must be positive");
  if (min_frames < 1 || max_frames < min_frames)
    throw Error("bad frame count range");
  if (noise_std < 0.0) throw Error("noise_std must be >= 0");
  if (phone_scale < 0.0 || speaker_scale < 0.0 || emotion_scale < 0.0)
    throw Error("template scales must be >= 0");
  if (min_phone_frames < 1) throw Error("min_phone_frames must be positive");
  if (min_phone_frames > min_frames)
    throw Error("min_phone_frames exceeds min_frames");
  if (n_mels < 1 || n_mels > spectrum_bins - 1) throw Error("bad n_mels");
}

namespace {

// Smooth random spectral envelope: low-order cosine series over the bin
// axis, coefficients U(-1, 1).
void add_cosine_series(double* row, int dim, int terms, double scale,
                       Rng* rng) {
  for (int j = 0; j < terms; ++j) {
    const double c = rng->uniform(-1.0, 1.0);
    for (int k = 0; k < dim; ++k)
      row[k] += scale * c * std::cos(kPi * j * k / (dim - 1));
  }
}

void add_tilt_and_bumps(double* row, int dim, double scale, Rng* rng) {
  const double tilt = rng->uniform(-1.0, 1.0);
  for (int k = 0; k < dim; ++k)
    row[k] += scale * tilt * (2.0 * k / (dim - 1) - 1.0);
  for (int b = 0; b < 3; ++b) {  // formant-like bumps
    const double center = rng->uniform(0.05, 0.95) * (dim - 1);
    const double width = rng->uniform(0.02, 0.08) * dim;
    const double height = rng->uniform(-1.0, 1.0);
    for (int k = 0; k < dim; ++k) {
      const double z = (k - center) / width;
      row[k] += scale * height * std::exp(-0.5 * z * z);
    }
  }
}

}  // namespace

Templates gen_templates(const GenConfig& cfg) {
  cfg.validate();
  Templates out;
  const int d = cfg.spectrum_bins;
  Rng rng_phone = Rng(cfg.seed).split(hash64("templates.phone"));
  Rng rng_spk = Rng(cfg.seed).split(hash64("templates.speaker"));
  Rng rng_emo = Rng(cfg.seed).split(hash64("templates.emotion"));

  out.phone = Matrix<double>(cfg.phones, d);
  for (int p = 0; p < cfg.phones; ++p)
    add_cosine_series(out.phone.row(p), d, 8, cfg.phone_scale, &rng_phone);

  out.speaker = Matrix<double>(cfg.speakers, d);
  for (int s = 0; s < cfg.speakers; ++s)
    add_tilt_and_bumps(out.speaker.row(s), d, cfg.speaker_scale, &rng_spk);

  out.emotion = Matrix<double>(cfg.emotions, d);
  for (int e = 0; e < cfg.emotions; ++e)
    add_cosine_series(out.emotion.row(e), d, 2, cfg.emotion_scale, &rng_emo);

  if (cfg.speaker_emotion_interaction) {
    Rng rng_int = Rng(cfg.seed).split(hash64("templates.interaction"));
    out.interaction = Matrix<double>(cfg.speakers * cfg.emotions, d);
    for (int i = 0; i < out.interaction.rows(); ++i)
      add_cosine_series(out.interaction.row(i), d, 2,
                        0.5 * cfg.emotion_scale, &rng_int);
  }
  return out;
}

Utterance gen_utterance(const GenConfig& cfg, const Templates& templates,
                        int speaker, int emotion, Rng* rng) {
  CDF_CHECK(speaker >= 0 && speaker < cfg.speakers, "speaker out of range");
  CDF_CHECK(emotion >= 0 && emotion < cfg.emotions, "emotion out of range");
  const int d = cfg.spectrum_bins;
  const int t_count =
      cfg.min_frames +
      static_cast<int>(rng->uniform_int(cfg.max_frames - cfg.min_frames + 1));

  // Uniform chain over the other phones; each segment holds for
  // min_phone_frames .. 2*min_phone_frames. A tail that would fall short
  // of the minimum is absorbed into the preceding segment.
  Utterance out;
  out.phones.resize(t_count);
  int t = 0;
  int prev = -1;
  while (t < t_count) {
    int phone =
        static_cast<int>(rng->uniform_int(cfg.phones - (prev >= 0 ? 1 : 0)));
    if (prev >= 0 && phone >= prev) ++phone;
    int dur = cfg.min_phone_frames +
              static_cast<int>(rng->uniform_int(cfg.min_phone_frames + 1));
    if (t_count - t - dur < cfg.min_phone_frames) dur = t_count - t;
    for (int i = 0; i < dur; ++i)
      out.phones[t++] = static_cast<uint16_t>(phone);
    prev = phone;
  }

  out.log_spectrum.kind = dsp::FeatureKind::kLogSpectrum;
  out.log_spectrum.frame_shift_ms = cfg.frame_shift_ms;
  out.log_spectrum.data = Matrix<double>(t_count, d);
  const double* spk_row = templates.speaker.row(speaker);
  const double* emo_row = templates.emotion.row(emotion);
  const double* inter_row =
      cfg.speaker_emotion_interaction
          ? templates.interaction.row(speaker * cfg.emotions + emotion)
          : nullptr;
  for (int i = 0; i < t_count; ++i) {
    double* row = out.log_spectrum.data.row(i);
    const double* phn_row = templates.phone.row(out.phones[i]);
    for (int k = 0; k < d; ++k) {
      row[k] = phn_row[k] + spk_row[k] + emo_row[k];
      if (inter_row) row[k] += inter_row[k];
      if (cfg.noise_std > 0.0) row[k] += cfg.noise_std * rng->normal();
    }
  }

  // Fbank = mel-weighted pooling of the magnitude spectrum, then log.
  Matrix<double> fb = dsp::mel_filterbank(cfg.n_mels, cfg.fft_size(),
                                          cfg.sample_rate, 20.0,
                                          cfg.sample_rate / 2.0);
  out.log_fbank.kind = dsp::FeatureKind::kLogFbank;
  out.log_fbank.frame_shift_ms = cfg.frame_shift_ms;
  out.log_fbank.data = Matrix<double>(t_count, cfg.n_mels);
  std::vector<double> mag(d);
  for (int i = 0; i < t_count; ++i) {
    const double* row = out.log_spectrum.data.row(i);
    for (int k = 0; k < d; ++k) mag[k] = std::exp(row[k]);
    double* o = out.log_fbank.data.row(i);
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* w = fb.row(m);
      double acc = 0.0;
      for (int k = 0; k < d; ++k) acc += w[k] * mag[k];
      o[m] = std::log(std::max(acc, cfg.log_floor));
    }
  }
  return out;
}

namespace {

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

void save_templates(const Matrix<double>& m, const std::filesystem::path& p,
                    double frame_shift_ms) {
  dsp::FeatureMatrix f;
  f.kind = dsp::FeatureKind::kLogSpectrum;
  f.frame_shift_ms = frame_shift_ms;
  f.data = m;
  dsp::save_feature(f, p);
}

}  // namespace

CorpusManifest gen_corpus(const GenConfig& cfg,
                          const std::filesystem::path& out_dir, int threads) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "feats");
  fs::create_directories(out_dir / "labels");

  Templates templates = gen_templates(cfg);
  const int total = cfg.speakers * cfg.emotions * cfg.utts_per_pair;
  std::vector<UttRecord> records(total);
  Rng master(cfg.seed);

  parallel_for(total, threads, [&](int idx) {
    const int speaker = idx / (cfg.emotions * cfg.utts_per_pair);
    const int emotion = (idx / cfg.utts_per_pair) % cfg.emotions;
    Rng rng = master.split(0x100000 + static_cast<uint64_t>(idx));
    Utterance utt = gen_utterance(cfg, templates, speaker, emotion, &rng);
    UttRecord rec;
    rec.id = strprintf("u%04d_s%02d_e%d", idx, speaker, emotion);
    rec.speaker = speaker;
    rec.emotion = emotion;
    rec.frames = static_cast<int>(utt.phones.size());
    rec.fbank_rel = "feats/" + rec.id + ".fbank.cdfm";
    rec.spec_rel = "feats/" + rec.id + ".spec.cdfm";
    rec.phone_rel = "labels/" + rec.id + ".phn";
    dsp::save_feature(utt.log_fbank, out_dir / rec.fbank_rel);
    dsp::save_feature(utt.log_spectrum, out_dir / rec.spec_rel);
    std::ofstream os = open_out(out_dir / rec.phone_rel);
    for (uint16_t p : utt.phones) write_u16(os, p);
    records[idx] = std::move(rec);
  });

  save_templates(templates.phone, out_dir / "templates_phone.cdfm",
                 cfg.frame_shift_ms);
  save_templates(templates.speaker, out_dir / "templates_speaker.cdfm",
                 cfg.frame_shift_ms);
  save_templates(templates.emotion, out_dir / "templates_emotion.cdfm",
                 cfg.frame_shift_ms);

  std::ofstream os = open_out(out_dir / "manifest.tsv");
  for (const auto& rec : records) {
    os << rec.id << '\t' << rec.speaker << '\t' << rec.emotion << '\t'
       << rec.frames << '\t' << rec.fbank_rel << '\t' << rec.spec_rel << '\t'
       << rec.phone_rel << '\n';
  }
  if (!os) throw Error("failed writing manifest");
  os.close();

  CorpusManifest manifest;
  manifest.root = out_dir;
  manifest.utts = std::move(records);
  manifest.templates = std::move(templates);
  return manifest;
}

CorpusManifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw Error("cannot open manifest: " + manifest_path.string());
  CorpusManifest out;
  out.root = manifest_path.parent_path();
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    UttRecord rec;
    std::string speaker, emotion, frames;
    if (!std::getline(ss, rec.id, '\t') || !std::getline(ss, speaker, '\t') ||
        !std::getline(ss, emotion, '\t') || !std::getline(ss, frames, '\t') ||
        !std::getline(ss, rec.fbank_rel, '\t') ||
        !std::getline(ss, rec.spec_rel, '\t') ||
        !std::getline(ss, rec.phone_rel, '\t'))
      throw Error(strprintf("malformed manifest line %d in %s", line_no,
                            manifest_path.c_str()));
    rec.speaker = std::stoi(speaker);
    rec.emotion = std::stoi(emotion);
    rec.frames = std::stoi(frames);
    out.utts.push_back(std::move(rec));
  }
  const auto tpl = out.root / "templates_phone.cdfm";
  if (std::filesystem::exists(tpl)) {
    out.templates.phone = dsp::load_feature(tpl).data;
    out.templates.speaker =
        dsp::load_feature(out.root / "templates_speaker.cdfm").data;
    out.templates.emotion =
        dsp::load_feature(out.root / "templates_emotion.cdfm").data;
  }
  return out;
}

int CorpusManifest::num_speakers() const {
  int n = 0;
  for (const auto& u : utts) n = std::max(n, u.speaker + 1);
  return n;
}

int CorpusManifest::num_emotions() const {
  int n = 0;
  for (const auto& u : utts) n = std::max(n, u.emotion + 1);
  return n;
}

int CorpusManifest::num_phones() const {
  if (templates.phone.rows() > 0) return templates.phone.rows();
  throw Error("corpus has no phone templates; phone count unavailable");
}

std::filesystem::path CorpusManifest::fbank_path(size_t i) const {
  return root / utts[i].fbank_rel;
}
std::filesystem::path CorpusManifest::spec_path(size_t i) const {
  return root / utts[i].spec_rel;
}
std::filesystem::path CorpusManifest::phone_path(size_t i) const {
  return root / utts[i].phone_rel;
}

int CorpusManifest::find_utt(const std::string& id) const {
  for (size_t i = 0; i < utts.size(); ++i)
    if (utts[i].id == id) return static_cast<int>(i);
  return -1;
}

std::vector<uint16_t> load_phone_labels(const std::filesystem::path& p,
                                        int expected_frames) {
  std::vector<uint8_t> bytes = read_file_bytes(p);
  if (bytes.size() != static_cast<size_t>(expected_frames) * 2)
    throw Error(strprintf("phone label file %s has %zu bytes, expected %d",
                          p.c_str(), bytes.size(), expected_frames * 2));
  std::vector<uint16_t> out(expected_frames);
  for (int i = 0; i < expected_frames; ++i)
    out[i] = static_cast<uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
  return out;
}

FactorDiagnostics oracle_factor_distance(
    const CorpusManifest& manifest,
    const std::vector<models::FactorStream>& streams, uint64_t seed,
    int max_frames_sampled) {
  CDF_CHECK(!streams.empty(), "no factor streams");
  const models::FactorKind kind = streams[0].kind;

  // Gather (frame vector, class label) pairs.
  std::vector<const float*> frames;
  std::vector<int> labels;
  int dim = streams[0].dim();
  std::vector<std::vector<uint16_t>> phone_cache;
  for (const auto& st : streams) {
    CDF_CHECK(st.dim() == dim, "factor dim mismatch across streams");
    const int idx = manifest.find_utt(st.utterance_id);
    if (idx < 0) throw Error("unknown utterance: " + st.utterance_id);
    const UttRecord& rec = manifest.utts[idx];
    if (st.num_frames() != rec.frames)
      throw Error("factor stream frame count differs from manifest: " +
                  st.utterance_id);
    std::vector<uint16_t> phones;
    if (kind == models::FactorKind::kLinguistic)
      phones = load_phone_labels(manifest.root / rec.phone_rel, rec.frames);
    for (int t = 0; t < st.num_frames(); ++t) {
      frames.push_back(st.data.row(t));
      switch (kind) {
        case models::FactorKind::kLinguistic:
          labels.push_back(phones[t]);
          break;
        case models::FactorKind::kSpeaker:
          labels.push_back(rec.speaker);
          break;
        case models::FactorKind::kEmotion:
          labels.push_back(rec.emotion);
          break;
      }
    }
  }

  // Seeded subsample, then all pairs.
  std::vector<size_t> order(frames.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const size_t n =
      std::min(order.size(), static_cast<size_t>(max_frames_sampled));

  auto cosine = [dim](const float* a, const float* b) {
    double dot = 0, na = 0, nb = 0;
    for (int k = 0; k < dim; ++k) {
      dot += static_cast<double>(a[k]) * b[k];
      na += static_cast<double>(a[k]) * a[k];
      nb += static_cast<double>(b[k]) * b[k];
    }
    const double denom = std::sqrt(na * nb);
    return denom > 0 ? dot / denom : 0.0;
  };

  double within = 0, between = 0;
  int64_t n_within = 0, n_between = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const double c = cosine(frames[order[i]], frames[order[j]]);
      if (labels[order[i]] == labels[order[j]]) {
        within += c;
        ++n_within;
      } else {
        between += c;
        ++n_between;
      }
    }
  }
  FactorDiagnostics out;
  out.within_class_cosine = n_within > 0 ? within / n_within : 0.0;
  out.between_class_cosine = n_between > 0 ? between / n_between : 0.0;
  return out;
}

}  // namespace synth
}  // namespace cdf
