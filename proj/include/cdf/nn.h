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
// Minimal layer engine with reverse-mode gradients. Activations are
// T x D matrices where rows are frames; TimeDelay is the only layer that
// mixes rows (with edge clamping), Conv2D/MaxPool2D treat each row as a
// C x H x W image. float is the training precision, double is used by
// the finite-difference gradient checker.

#ifndef CDF_NN_H_
#define CDF_NN_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdf/matrix.h"
#include "cdf/rng.h"

namespace cdf {
namespace nn {

enum class LayerKind : uint8_t {
  kFullyConnected = 0,
  kConv2D = 1,
  kMaxPool2D = 2,
  kTimeDelay = 3,
  kPNorm = 4,
  kReLU = 5,
  kSoftmax = 6,
  kConcat = 7,
  kLengthNorm = 8,
};

const char* layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::kFullyConnected;
  int in_dim = 0;   // flattened input dim (FC/TD/PNorm/elementwise/Concat)
  int out_dim = 0;  // FC/TD output units
  std::vector<int> offsets;  // TimeDelay frame offsets
  int in_c = 0, in_h = 0, in_w = 0;  // Conv2D/MaxPool2D input geometry
  int out_c = 0;                     // Conv2D output maps
  int kern_h = 0, kern_w = 0;        // kernel (Conv2D) or window (MaxPool2D)
  int stride_h = 1, stride_w = 1;
  int group = 0;     // PNorm group size
  double p = 2.0;    // PNorm exponent
  int side_index = -1, side_dim = 0;  // Concat side-input reference

  static LayerSpec FullyConnected(int in, int out);
  static LayerSpec Conv2D(int in_c, int in_h, int in_w, int out_c, int kern_h,
                          int kern_w, int stride_h = 1, int stride_w = 1);
  static LayerSpec MaxPool2D(int channels, int in_h, int in_w, int pool_h,
                             int pool_w, int stride_h, int stride_w);
  static LayerSpec TimeDelay(int in, int out, std::vector<int> offsets);
  static LayerSpec PNorm(int in, int group, double p = 2.0);
  static LayerSpec ReLU(int dim);
  static LayerSpec Softmax(int dim);
  static LayerSpec Concat(int in, int side_index, int side_dim);
  static LayerSpec LengthNorm(int dim);

  int out_h() const { return (in_h - kern_h) / stride_h + 1; }
  int out_w() const { return (in_w - kern_w) / stride_w + 1; }
  int input_dim() const;   // flattened per-frame input dim (without side)
  int output_dim() const;  // flattened per-frame output dim
  bool has_params() const {
    return kind == LayerKind::kFullyConnected || kind == LayerKind::kConv2D ||
           kind == LayerKind::kTimeDelay;
  }
  bool operator==(const LayerSpec& o) const;
};

struct NetworkSpec {
  int input_dim = 0;
  std::vector<LayerSpec> layers;
  // Named read points: tap name -> index of the layer whose output is read.
  // Taps are reconstructed by the builders, not serialized.
  std::map<std::string, int> taps;

  void validate() const;  // throws on dimension-chain violations
  int output_dim() const;
  int num_side_inputs() const;
  // Receptive-field extent contributed by TimeDelay offsets.
  int context_left() const;
  int context_right() const;
  int tap(const std::string& name) const;
  bool same_topology(const NetworkSpec& o) const;
};

template <typename Real>
struct ParamStore {
  struct Entry {
    Matrix<Real> w;
    std::vector<Real> b;
  };
  std::vector<Entry> layers;  // one entry per layer; empty for param-free

  size_t num_params() const {
    size_t n = 0;
    for (const auto& e : layers) n += e.w.size() + e.b.size();
    return n;
  }
};

template <typename Real>
ParamStore<Real> init_params(const NetworkSpec& spec, Rng* rng);

template <typename Real>
ParamStore<Real> zero_params(const NetworkSpec& spec);

template <typename To, typename From>
ParamStore<To> convert_params(const ParamStore<From>& p) {
  ParamStore<To> out;
  out.layers.resize(p.layers.size());
  for (size_t i = 0; i < p.layers.size(); ++i) {
    out.layers[i].w = convert_matrix<To>(p.layers[i].w);
    out.layers[i].b.assign(p.layers[i].b.begin(), p.layers[i].b.end());
  }
  return out;
}

template <typename Real>
struct ForwardTrace {
  Matrix<Real> input;
  std::vector<Matrix<Real>> acts;              // output of each layer
  std::vector<std::vector<int32_t>> pool_idx;  // per layer; MaxPool2D argmax
  std::vector<Matrix<Real>> td_gather;         // per layer; TimeDelay gather
  const Matrix<Real>& output() const { return acts.back(); }
};

// ---------------------------------------------------------------------------
// Per-layer primitives (unit-tested against naive oracles).

template <typename Real>
Matrix<Real> fc_forward(const Matrix<Real>& x, const Matrix<Real>& w,
                        std::span<const Real> b);

template <typename Real>
Matrix<Real> conv2d_forward(const Matrix<Real>& x, const LayerSpec& spec,
                            const Matrix<Real>& w, std::span<const Real> b);

template <typename Real>
Matrix<Real> maxpool2d_forward(const Matrix<Real>& x, const LayerSpec& spec,
                               std::vector<int32_t>* argmax = nullptr);

template <typename Real>
Matrix<Real> timedelay_forward(const Matrix<Real>& x, const LayerSpec& spec,
                               const Matrix<Real>& w, std::span<const Real> b,
                               Matrix<Real>* gathered = nullptr);

template <typename Real>
Matrix<Real> pnorm_forward(const Matrix<Real>& x, int group, double p);

// Row-wise softmax with max subtraction.
template <typename Real>
Matrix<Real> softmax(const Matrix<Real>& x);

// Mean cross entropy over rows whose label is >= 0; returns the gradient
// at the logits, (probs - onehot) / B, zero on ignored rows.
template <typename Real>
std::pair<Real, Matrix<Real>> cross_entropy_loss(const Matrix<Real>& probs,
                                                 std::span<const int> labels);

template <typename Real>
std::pair<Real, Matrix<Real>> mse_loss(const Matrix<Real>& pred,
                                       const Matrix<Real>& target);

// ---------------------------------------------------------------------------
// Whole-network passes.

// Adapter for passing a vector of side inputs where a span is expected
// (vectors do not take part in template argument deduction).
template <typename Real>
std::span<const Matrix<Real>* const> side_span(
    const std::vector<const Matrix<Real>*>& v) {
  return std::span<const Matrix<Real>* const>(v.data(), v.size());
}

template <typename Real>
void network_forward(const NetworkSpec& spec, const ParamStore<Real>& params,
                     const Matrix<Real>& x,
                     std::span<const Matrix<Real>* const> sides,
                     ForwardTrace<Real>* trace);

// Accumulates parameter gradients into *grads (must be zero_params-shaped).
// If grad_at_logits is true and the final layer is Softmax, out_grad is
// taken to be the gradient at the logits (the cross-entropy shortcut).
template <typename Real>
void network_backward(const NetworkSpec& spec, const ParamStore<Real>& params,
                      const ForwardTrace<Real>& trace,
                      const Matrix<Real>& out_grad, bool grad_at_logits,
                      ParamStore<Real>* grads);

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  int minibatch_size = 128;
  int epochs = 20;
  uint64_t seed = 1;
  double lr_halving_threshold = 1e-4;
  // Training frames sampled per epoch; 0 means the full training split.
  int64_t frames_per_epoch = 0;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double frame_accuracy = 0.0;
  double learning_rate = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  bool final_worse_than_first = false;
};

// v <- momentum * v - lr * g;  theta <- theta + v.
template <typename Real>
void sgd_step(ParamStore<Real>* params, const ParamStore<Real>& grads,
              ParamStore<Real>* velocity, double lr, double momentum);

// Central finite differences (eps = 1e-5) on a random parameter subset
// against the analytic gradient. labels drive a cross-entropy loss unless
// mse_target is given. Returns the maximum relative error.
double gradient_check(const NetworkSpec& spec, const ParamStore<double>& params,
                      const Matrix<double>& x,
                      std::span<const Matrix<double>* const> sides,
                      std::span<const int> labels,
                      const Matrix<double>* mse_target, int samples_per_layer,
                      uint64_t seed);

// CDFN container: spec header plus f32 parameter tensors. Load/save is
// bit-exact.
void save_model(const NetworkSpec& spec, const ParamStore<float>& params,
                const std::filesystem::path& path);
void save_model(std::ostream& os, const NetworkSpec& spec,
                const ParamStore<float>& params);
std::pair<NetworkSpec, ParamStore<float>> load_model(
    const std::filesystem::path& path);
std::pair<NetworkSpec, ParamStore<float>> load_model(std::istream& is);

}  // namespace nn
}  // namespace cdf

#endif  // CDF_NN_H_
