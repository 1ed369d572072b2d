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

#include "cdf/models.h"

#include <cmath>
#include <fstream>

#include "cdf/io.h"

namespace cdf {
namespace models {

using nn::LayerSpec;
using nn::NetworkSpec;

const char* factor_kind_name(FactorKind kind) {
  switch (kind) {
    case FactorKind::kLinguistic: return "linguistic";
    case FactorKind::kSpeaker: return "speaker";
    case FactorKind::kEmotion: return "emotion";
  }
  return "?";
}

NetworkSpec build_linguistic_net(int phone_classes, int input_dim) {
  if (phone_classes < 2) throw Error("linguistic net needs >= 2 classes");
  NetworkSpec spec;
  spec.input_dim = input_dim;
  int d = input_dim;
  for (int i = 0; i < 4; ++i) {
    spec.layers.push_back(LayerSpec::FullyConnected(d, 1024));
    spec.layers.push_back(LayerSpec::ReLU(1024));
    d = 1024;
  }
  spec.layers.push_back(LayerSpec::FullyConnected(1024, phone_classes));
  spec.layers.push_back(LayerSpec::Softmax(phone_classes));
  spec.taps["posteriors"] = static_cast<int>(spec.layers.size()) - 1;
  spec.validate();
  return spec;
}

NetworkSpec build_speaker_net(int num_speakers, int cond_dim) {
  if (num_speakers < 2) throw Error("speaker net needs >= 2 speakers");
  NetworkSpec spec;
  const int n_mels = 40;
  const int patch = 2 * kSpeakerSpliceContext + 1;  // 9-frame patch
  spec.input_dim = patch * n_mels;

  spec.layers.push_back(LayerSpec::Conv2D(1, patch, n_mels, 32, 4, 8));
  spec.layers.push_back(LayerSpec::ReLU(32 * 6 * 33));
  spec.layers.push_back(LayerSpec::MaxPool2D(32, 6, 33, 2, 2, 2, 2));
  spec.layers.push_back(LayerSpec::Conv2D(32, 3, 16, 64, 2, 4));
  spec.layers.push_back(LayerSpec::ReLU(64 * 2 * 13));
  spec.layers.push_back(LayerSpec::MaxPool2D(64, 2, 13, 2, 2, 2, 2));
  spec.layers.push_back(LayerSpec::FullyConnected(64 * 1 * 6, kBottleneckDim));
  spec.layers.push_back(LayerSpec::ReLU(kBottleneckDim));
  int d = kBottleneckDim;
  if (cond_dim > 0) {
    spec.layers.push_back(LayerSpec::Concat(d, 0, cond_dim));
    d += cond_dim;
  }
  // Each p-norm is followed by a renormalization layer; without it the
  // stacked norms grow activations until the softmax saturates.
  spec.layers.push_back(LayerSpec::TimeDelay(d, 400, {-4, 0, 4}));
  spec.layers.push_back(LayerSpec::PNorm(400, 5));
  spec.layers.push_back(LayerSpec::LengthNorm(80));
  spec.layers.push_back(LayerSpec::TimeDelay(80, 400, {-2, 0, 2}));
  spec.layers.push_back(LayerSpec::PNorm(400, 5));
  spec.layers.push_back(LayerSpec::LengthNorm(80));
  spec.layers.push_back(LayerSpec::FullyConnected(80, kSpeakerFactorDim));
  spec.taps["feature"] = static_cast<int>(spec.layers.size()) - 1;
  spec.layers.push_back(
      LayerSpec::FullyConnected(kSpeakerFactorDim, num_speakers));
  spec.layers.push_back(LayerSpec::Softmax(num_speakers));
  spec.validate();
  return spec;
}

NetworkSpec build_emotion_net(int num_emotions, int ling_dim, int spk_dim) {
  if (num_emotions < 2) throw Error("emotion net needs >= 2 emotions");
  NetworkSpec spec;
  const int n_mels = 40;
  spec.input_dim = (2 * kEmotionSpliceContext + 1) * n_mels;
  int d = spec.input_dim;
  int side = 0;
  if (ling_dim > 0) {
    spec.layers.push_back(LayerSpec::Concat(d, side++, ling_dim));
    d += ling_dim;
  }
  if (spk_dim > 0) {
    spec.layers.push_back(LayerSpec::Concat(d, side++, spk_dim));
    d += spk_dim;
  }
  for (int i = 0; i < 6; ++i) {
    spec.layers.push_back(LayerSpec::TimeDelay(d, 200, {-1, 0, 1}));
    spec.layers.push_back(LayerSpec::PNorm(200, 5));
    spec.layers.push_back(LayerSpec::LengthNorm(kEmotionFactorDim));
    d = kEmotionFactorDim;
  }
  spec.taps["emotion"] = static_cast<int>(spec.layers.size()) - 1;
  spec.layers.push_back(
      LayerSpec::FullyConnected(kEmotionFactorDim, num_emotions));
  spec.layers.push_back(LayerSpec::Softmax(num_emotions));
  spec.validate();
  return spec;
}

template <typename Real>
void length_normalize(Real* v, int dim) {
  double norm = 0.0;
  for (int i = 0; i < dim; ++i)
    norm += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  norm = std::sqrt(norm);
  if (norm < 1e-8) {
    log_warn("length_normalize: near-zero vector, substituting e1");
    for (int i = 0; i < dim; ++i) v[i] = Real(0);
    v[0] = Real(1);
    return;
  }
  const Real inv = static_cast<Real>(1.0 / norm);
  for (int i = 0; i < dim; ++i) v[i] *= inv;
}

template void length_normalize<float>(float*, int);
template void length_normalize<double>(double*, int);

std::vector<double> length_normalize(std::vector<double> v) {
  length_normalize(v.data(), static_cast<int>(v.size()));
  return v;
}

FactorStream extract_factors(const nn::NetworkSpec& spec,
                             const nn::ParamStore<float>& params,
                             const Matrix<float>& spliced_features,
                             std::span<const Matrix<float>* const> conditioning,
                             const std::string& read_layer, FactorKind kind,
                             const std::string& utterance_id) {
  for (const auto* side : conditioning) {
    if (side->rows() != spliced_features.rows())
      throw Error(strprintf(
          "conditioning stream has %d frames, features have %d (utterance %s)",
          side->rows(), spliced_features.rows(), utterance_id.c_str()));
  }
  const int tap = spec.tap(read_layer);
  nn::ForwardTrace<float> trace;
  nn::network_forward(spec, params, spliced_features, conditioning, &trace);
  FactorStream out;
  out.utterance_id = utterance_id;
  out.kind = kind;
  out.data = trace.acts[tap];
  if (kind == FactorKind::kSpeaker) {
    for (int t = 0; t < out.data.rows(); ++t)
      length_normalize(out.data.row(t), out.data.cols());
  }
  return out;
}

// CDFF: magic, u8 version, u8 kind, u32 T, u32 D, u16 id length, id bytes,
// T*D f32 row-major.

void save_factor(const FactorStream& stream, const std::filesystem::path& p) {
  std::ofstream os = open_out(p);
  write_magic(os, "CDFF");
  write_u8(os, 1);
  write_u8(os, static_cast<uint8_t>(stream.kind));
  write_u32(os, static_cast<uint32_t>(stream.data.rows()));
  write_u32(os, static_cast<uint32_t>(stream.data.cols()));
  write_u16(os, static_cast<uint16_t>(stream.utterance_id.size()));
  os.write(stream.utterance_id.data(),
           static_cast<std::streamsize>(stream.utterance_id.size()));
  write_f32_array(os, stream.data.data(), stream.data.size());
  if (!os) throw Error("failed writing factor file: " + p.string());
}

FactorStream load_factor(const std::filesystem::path& p) {
  std::ifstream is = open_in(p);
  expect_magic(is, "CDFF", "factor");
  const uint8_t version = read_u8(is);
  if (version != 1)
    throw Error(strprintf("unsupported CDFF version %u", version));
  FactorStream out;
  const uint8_t kind = read_u8(is);
  if (kind > 2) throw Error(strprintf("bad factor kind %u", kind));
  out.kind = static_cast<FactorKind>(kind);
  const uint32_t t_count = read_u32(is);
  const uint32_t d = read_u32(is);
  const uint16_t id_len = read_u16(is);
  out.utterance_id.resize(id_len);
  is.read(out.utterance_id.data(), id_len);
  out.data = Matrix<float>(static_cast<int>(t_count), static_cast<int>(d));
  read_f32_array(is, out.data.data(), out.data.size());
  return out;
}

}  // namespace models
}  // namespace cdf
