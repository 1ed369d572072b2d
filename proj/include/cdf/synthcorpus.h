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
//
// Labeled synthetic corpus whose per-frame log-spectrum is, by
// construction, phone template + speaker template + emotion template +
// Gaussian noise. The templates are the ground truth every downstream
// check is scored against.

#ifndef CDF_SYNTHCORPUS_H_
#define CDF_SYNTHCORPUS_H_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdf/dsp.h"
#include "cdf/matrix.h"
#include "cdf/models.h"
#include "cdf/rng.h"

namespace cdf {
namespace synth {

struct GenConfig {
  int phones = 10;
  int speakers = 20;
  int emotions = 4;
  int spectrum_bins = 129;
  int utts_per_pair = 8;  // utterances per (speaker, emotion)
  int min_frames = 200;
  int max_frames = 400;
  double noise_std = 0.1;        // sigma, log units
  double phone_scale = 1.0;      // alpha_q
  double speaker_scale = 0.5;    // alpha_s
  double emotion_scale = 0.3;    // alpha_e
  int min_phone_frames = 10;
  // Adds a per-(speaker, emotion) component so emotion expression differs
  // across speakers. Off by default; the template-sum ground truth is only
  // exact with this off.
  bool speaker_emotion_interaction = false;
  uint64_t seed = 1;
  double frame_shift_ms = 10.0;
  int sample_rate = 8000;  // with spectrum_bins fixes the mel filterbank
  int n_mels = 40;
  double log_floor = 1e-10;

  void validate() const;
  int fft_size() const { return 2 * (spectrum_bins - 1); }
};

struct Templates {
  Matrix<double> phone;    // P x D
  Matrix<double> speaker;  // S x D
  Matrix<double> emotion;  // E x D
  // (S*E) x D, only populated when speaker_emotion_interaction is set.
  Matrix<double> interaction;
};

Templates gen_templates(const GenConfig& cfg);

struct Utterance {
  std::vector<uint16_t> phones;  // per-frame labels
  dsp::FeatureMatrix log_spectrum;
  dsp::FeatureMatrix log_fbank;
};

Utterance gen_utterance(const GenConfig& cfg, const Templates& templates,
                        int speaker, int emotion, Rng* rng);

struct UttRecord {
  std::string id;
  int speaker = 0;
  int emotion = 0;
  int frames = 0;
  std::string fbank_rel, spec_rel, phone_rel;  // relative to manifest dir
};

struct CorpusManifest {
  std::filesystem::path root;
  std::vector<UttRecord> utts;
  Templates templates;  // empty matrices when not stored

  int num_speakers() const;
  int num_emotions() const;
  int num_phones() const;  // from the phone template file
  std::filesystem::path fbank_path(size_t i) const;
  std::filesystem::path spec_path(size_t i) const;
  std::filesystem::path phone_path(size_t i) const;
  int find_utt(const std::string& id) const;  // -1 if absent
};

// Writes feature/label files plus manifest.tsv and the ground-truth
// template files; deterministic per seed, utterances generated from
// independent split streams.
CorpusManifest gen_corpus(const GenConfig& cfg,
                          const std::filesystem::path& out_dir,
                          int threads = 1);

CorpusManifest load_manifest(const std::filesystem::path& manifest_path);

std::vector<uint16_t> load_phone_labels(const std::filesystem::path& p,
                                        int expected_frames);

// Clustering quality of extracted factors against ground-truth labels:
// mean cosine within class vs across classes over a seeded frame sample.
// Labels come from the manifest (phone labels for linguistic streams,
// utterance speaker/emotion otherwise).
struct FactorDiagnostics {
  double within_class_cosine = 0.0;
  double between_class_cosine = 0.0;
};

FactorDiagnostics oracle_factor_distance(
    const CorpusManifest& manifest,
    const std::vector<models::FactorStream>& streams, uint64_t seed,
    int max_frames_sampled = 4000);

}  // namespace synth
}  // namespace cdf

#endif  // CDF_SYNTHCORPUS_H_
