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
// Sequential training of the factor networks: the linguistic stage is
// trained first, its cached posteriors condition the speaker stage, and
// both cached factors condition the emotion stage. Conditioning always
// comes from disk caches so every stage is restartable and stages can be
// retrained independently.

#ifndef CDF_CASCADE_H_
#define CDF_CASCADE_H_

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cdf/models.h"
#include "cdf/nn.h"
#include "cdf/synthcorpus.h"

namespace cdf {
namespace cascade {

enum class StageKind { kLinguistic, kSpeaker, kEmotion, kRecon };

struct StageDef {
  std::string name;
  StageKind kind = StageKind::kLinguistic;
  bool condition_on_linguistic = false;
  bool condition_on_speaker = false;
};

// Stage names: ling, spk-idf, spk-cdf, emo-baseline, emo-ling, emo-spk,
// emo-ling-spk, recon. Throws UsageError otherwise.
StageDef stage_by_name(const std::string& name);
const std::vector<std::string>& all_stage_names();

struct StagePlan {
  StageDef stage;
  const synth::CorpusManifest* corpus = nullptr;
  nn::TrainConfig train_cfg;
  std::filesystem::path cache_dir;
  // Which speaker stage supplies conditioning/reconstruction factors.
  std::string speaker_factor_source = "spk-cdf";
  // Which emotion stage supplies reconstruction factors.
  std::string emotion_factor_source = "emo-ling-spk";
  int threads = 1;
};

// 90/10 train/validation split by utterance, derived from the run seed
// only, so every stage sees the same held-out set.
struct Split {
  std::vector<int> train, val;  // indices into manifest.utts
};
Split split_utterances(const synth::CorpusManifest& corpus, uint64_t seed);

// Corpus-level per-dimension mean/variance, used to standardize Fbank
// inputs. Per-utterance CMVN is deliberately not applied here: on this
// corpus speaker and emotion enter as utterance-constant additive
// offsets, which per-utterance mean subtraction would delete.
struct FeatureStats {
  std::vector<double> mean, inv_std;
};
FeatureStats compute_feature_stats(const synth::CorpusManifest& corpus);

Matrix<float> prepare_fbank(const dsp::FeatureMatrix& fbank,
                            const FeatureStats& stats);

// Builds the network this stage trains (dims from the corpus).
nn::NetworkSpec stage_spec(const StageDef& stage,
                           const synth::CorpusManifest& corpus);
int stage_splice_context(StageKind kind);

// Trains the stage and writes cache_dir/<stage>/model.cdfn plus
// train_log.csv. Conditioning caches must exist for every utterance;
// a missing cache raises UsageError naming the absent stage.
nn::TrainLog train_stage(const StagePlan& plan);

// Runs the trained stage over every utterance and writes
// cache_dir/<stage>/<utterance_id>.cdff.
void extract_stage(const StagePlan& plan);

void cache_factors(const models::FactorStream& stream,
                   const std::filesystem::path& stage_dir);
models::FactorStream load_factors(const std::filesystem::path& cache_dir,
                                  const std::string& stage,
                                  const std::string& utterance_id,
                                  models::FactorKind expected_kind);

std::filesystem::path stage_dir(const std::filesystem::path& cache_dir,
                                const std::string& stage);
std::filesystem::path model_path(const std::filesystem::path& cache_dir,
                                 const std::string& stage);
// Throws UsageError naming the stage when the model or a factor file is
// missing.
void require_stage_model(const std::filesystem::path& cache_dir,
                         const std::string& stage);
void require_factor_cache(const std::filesystem::path& cache_dir,
                          const std::string& stage,
                          const synth::CorpusManifest& corpus);

// The trained cascade: linguistic + conditioned speaker + conditioned
// emotion networks (reconstruction generators live in the recon module).
struct CascadeModelSet {
  nn::NetworkSpec ling_spec, spk_spec, emo_spec;
  nn::ParamStore<float> ling, spk, emo;
  FeatureStats stats;
  int phones = 0, speakers = 0, emotions = 0;
  bool emo_uses_linguistic = true;
  bool emo_uses_speaker = true;
};

CascadeModelSet load_cascade_models(const std::filesystem::path& cache_dir,
                                    const synth::CorpusManifest& corpus,
                                    const std::string& spk_stage = "spk-cdf",
                                    const std::string& emo_stage =
                                        "emo-ling-spk");

struct CascadeFactors {
  models::FactorStream q, s, e;
};

// q from the linguistic net, s from the speaker net fed (features, q),
// e from the emotion net fed (features, q, s); all frame-aligned.
CascadeFactors run_cascade(const CascadeModelSet& models,
                           const dsp::FeatureMatrix& fbank,
                           const std::string& utterance_id);

void write_train_log_csv(const nn::TrainLog& log,
                         const std::filesystem::path& path);

}  // namespace cascade
}  // namespace cdf

#endif  // CDF_CASCADE_H_
