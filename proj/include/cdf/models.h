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
// Builders for the factor networks and frame-level factor extraction.
//
// Three frame-synchronous classifiers are used:
//   linguistic: 11-frame spliced Fbank -> 4x1024 FC/ReLU -> softmax phones
//   speaker:    9-frame spliced Fbank as a 9x40 patch -> conv/pool x2 ->
//               512 bottleneck (+ linguistic posteriors when conditioned) ->
//               TD/PNorm x2 -> 40-unit feature layer -> softmax speakers
//   emotion:    9-frame spliced Fbank (+ conditioning factors) ->
//               6x (TD 200 -> PNorm 40) -> softmax emotions
//
// The speaker and emotion networks both see 21 input frames per output
// frame (+-10 around the center): splice +-4 plus time-delay offsets
// totalling +-6.

#ifndef CDF_MODELS_H_
#define CDF_MODELS_H_

#include <filesystem>
#include <string>
#include <vector>

#include "cdf/nn.h"

namespace cdf {
namespace models {

inline constexpr int kLinguisticSpliceContext = 5;  // 11 frames
inline constexpr int kSpeakerSpliceContext = 4;     // 9 frames
inline constexpr int kEmotionSpliceContext = 4;     // 9 frames
inline constexpr int kSpeakerFactorDim = 40;
inline constexpr int kEmotionFactorDim = 40;
inline constexpr int kBottleneckDim = 512;

// Conditioning streams are multiplied by this before the concat. Factor
// rows are near-one-hot posteriors or unit-norm vectors, tiny next to
// the hundreds of unit-RMS dims they join; plain SGD (unlike the
// natural-gradient optimizer this toolkit substitutes for) never
// rebalances per-input scales, so underscaled conditioning goes unused.
inline constexpr float kConditioningScale = 6.0f;

enum class FactorKind : uint8_t {
  kLinguistic = 0,
  kSpeaker = 1,
  kEmotion = 2,
};

const char* factor_kind_name(FactorKind kind);

struct FactorStream {
  std::string utterance_id;
  FactorKind kind = FactorKind::kLinguistic;
  Matrix<float> data;  // T x D

  int num_frames() const { return data.rows(); }
  int dim() const { return data.cols(); }
};

// input_dim must equal n_mels * 11 for the default front end.
nn::NetworkSpec build_linguistic_net(int phone_classes, int input_dim);

// cond_dim = 0 builds the unconditioned variant; otherwise cond_dim
// linguistic posteriors are concatenated at the bottleneck (side input 0).
nn::NetworkSpec build_speaker_net(int num_speakers, int cond_dim);

// Conditioning is concatenated at the input: side 0 carries ling_dim
// posteriors and/or side carries spk_dim speaker factors; sides are
// numbered in the order (linguistic, speaker) among those present.
nn::NetworkSpec build_emotion_net(int num_emotions, int ling_dim, int spk_dim);

// v / ||v||2. A vector with norm < 1e-8 maps to e1 and logs a warning so
// downstream cosine scoring never divides by zero.
template <typename Real>
void length_normalize(Real* v, int dim);
std::vector<double> length_normalize(std::vector<double> v);

// Runs the network over spliced features (plus frame-aligned conditioning
// streams) and reads the activation at the named tap. Speaker factors are
// length-normalized per frame, linguistic factors are the softmax output.
FactorStream extract_factors(const nn::NetworkSpec& spec,
                             const nn::ParamStore<float>& params,
                             const Matrix<float>& spliced_features,
                             std::span<const Matrix<float>* const> conditioning,
                             const std::string& read_layer, FactorKind kind,
                             const std::string& utterance_id);

// CDFF container (f32 payload); save/load is bit-exact.
void save_factor(const FactorStream& stream, const std::filesystem::path& p);
FactorStream load_factor(const std::filesystem::path& p);

}  // namespace models
}  // namespace cdf

#endif  // CDF_MODELS_H_
