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

#include "cdf/nn.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "cdf/io.h"

namespace cdf {
namespace nn {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kFullyConnected: return "FullyConnected";
    case LayerKind::kConv2D: return "Conv2D";
    case LayerKind::kMaxPool2D: return "MaxPool2D";
    case LayerKind::kTimeDelay: return "TimeDelay";
    case LayerKind::kPNorm: return "PNorm";
    case LayerKind::kReLU: return "ReLU";
    case LayerKind::kSoftmax: return "Softmax";
    case LayerKind::kConcat: return "Concat";
    case LayerKind::kLengthNorm: return "LengthNorm";
  }
  return "?";
}

LayerSpec LayerSpec::FullyConnected(int in, int out) {
  LayerSpec s;
  s.kind = LayerKind::kFullyConnected;
  s.in_dim = in;
  s.out_dim = out;
  return s;
}

LayerSpec LayerSpec::Conv2D(int in_c, int in_h, int in_w, int out_c,
                            int kern_h, int kern_w, int stride_h,
                            int stride_w) {
  LayerSpec s;
  s.kind = LayerKind::kConv2D;
  s.in_c = in_c;
  s.in_h = in_h;
  s.in_w = in_w;
  s.out_c = out_c;
  s.kern_h = kern_h;
  s.kern_w = kern_w;
  s.stride_h = stride_h;
  s.stride_w = stride_w;
  return s;
}

LayerSpec LayerSpec::MaxPool2D(int channels, int in_h, int in_w, int pool_h,
                               int pool_w, int stride_h, int stride_w) {
  LayerSpec s;
  s.kind = LayerKind::kMaxPool2D;
  s.in_c = channels;
  s.in_h = in_h;
  s.in_w = in_w;
  s.kern_h = pool_h;
  s.kern_w = pool_w;
  s.stride_h = stride_h;
  s.stride_w = stride_w;
  return s;
}

LayerSpec LayerSpec::TimeDelay(int in, int out, std::vector<int> offsets) {
  LayerSpec s;
  s.kind = LayerKind::kTimeDelay;
  s.in_dim = in;
  s.out_dim = out;
  s.offsets = std::move(offsets);
  return s;
}

LayerSpec LayerSpec::PNorm(int in, int group, double p) {
  LayerSpec s;
  s.kind = LayerKind::kPNorm;
  s.in_dim = in;
  s.group = group;
  s.p = p;
  return s;
}

LayerSpec LayerSpec::ReLU(int dim) {
  LayerSpec s;
  s.kind = LayerKind::kReLU;
  s.in_dim = dim;
  return s;
}

LayerSpec LayerSpec::Softmax(int dim) {
  LayerSpec s;
  s.kind = LayerKind::kSoftmax;
  s.in_dim = dim;
  return s;
}

LayerSpec LayerSpec::Concat(int in, int side_index, int side_dim) {
  LayerSpec s;
  s.kind = LayerKind::kConcat;
  s.in_dim = in;
  s.side_index = side_index;
  s.side_dim = side_dim;
  return s;
}

LayerSpec LayerSpec::LengthNorm(int dim) {
  LayerSpec s;
  s.kind = LayerKind::kLengthNorm;
  s.in_dim = dim;
  return s;
}

int LayerSpec::input_dim() const {
  switch (kind) {
    case LayerKind::kConv2D:
    case LayerKind::kMaxPool2D:
      return in_c * in_h * in_w;
    default:
      return in_dim;
  }
}

int LayerSpec::output_dim() const {
  switch (kind) {
    case LayerKind::kFullyConnected:
    case LayerKind::kTimeDelay:
      return out_dim;
    case LayerKind::kConv2D:
      return out_c * out_h() * out_w();
    case LayerKind::kMaxPool2D:
      return in_c * out_h() * out_w();
    case LayerKind::kPNorm:
      return in_dim / group;
    case LayerKind::kReLU:
    case LayerKind::kSoftmax:
    case LayerKind::kLengthNorm:
      return in_dim;
    case LayerKind::kConcat:
      return in_dim + side_dim;
  }
  return 0;
}

bool LayerSpec::operator==(const LayerSpec& o) const {
  return kind == o.kind && in_dim == o.in_dim && out_dim == o.out_dim &&
         offsets == o.offsets && in_c == o.in_c && in_h == o.in_h &&
         in_w == o.in_w && out_c == o.out_c && kern_h == o.kern_h &&
         kern_w == o.kern_w && stride_h == o.stride_h &&
         stride_w == o.stride_w && group == o.group && p == o.p &&
         side_index == o.side_index && side_dim == o.side_dim;
}

void NetworkSpec::validate() const {
  if (input_dim <= 0) throw Error("network input_dim must be positive");
  if (layers.empty()) throw Error("network has no layers");
  int prev = input_dim;
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where =
        strprintf("layer %zu (%s)", i, layer_kind_name(l.kind));
    if (l.input_dim() != prev)
      throw Error(strprintf("%s: input dim %d != previous output %d",
                            where.c_str(), l.input_dim(), prev));
    switch (l.kind) {
      case LayerKind::kFullyConnected:
        if (l.out_dim <= 0) throw Error(where + ": out_dim must be positive");
        break;
      case LayerKind::kConv2D:
        if (l.kern_h > l.in_h || l.kern_w > l.in_w)
          throw Error(where + ": kernel larger than input");
        if (l.out_c <= 0 || l.stride_h <= 0 || l.stride_w <= 0)
          throw Error(where + ": bad conv hyperparameters");
        break;
      case LayerKind::kMaxPool2D:
        if (l.kern_h > l.in_h || l.kern_w > l.in_w)
          throw Error(where + ": pool window exceeds input");
        if (l.stride_h <= 0 || l.stride_w <= 0)
          throw Error(where + ": bad pool stride");
        break;
      case LayerKind::kTimeDelay:
        if (l.offsets.empty()) throw Error(where + ": empty offsets");
        if (l.out_dim <= 0) throw Error(where + ": out_dim must be positive");
        break;
      case LayerKind::kPNorm:
        if (l.group <= 0 || l.in_dim % l.group != 0)
          throw Error(strprintf("%s: dim %d not divisible by group %d",
                                where.c_str(), l.in_dim, l.group));
        break;
      case LayerKind::kConcat:
        if (l.side_index < 0 || l.side_dim <= 0)
          throw Error(where + ": bad side input reference");
        break;
      default:
        break;
    }
    prev = l.output_dim();
    if (prev <= 0) throw Error(where + ": nonpositive output dim");
  }
  for (const auto& [name, idx] : taps) {
    if (idx < 0 || idx >= static_cast<int>(layers.size()))
      throw Error("tap '" + name + "' out of range");
  }
}

int NetworkSpec::output_dim() const {
  return layers.empty() ? input_dim : layers.back().output_dim();
}

int NetworkSpec::num_side_inputs() const {
  int n = 0;
  for (const auto& l : layers)
    if (l.kind == LayerKind::kConcat) n = std::max(n, l.side_index + 1);
  return n;
}

int NetworkSpec::context_left() const {
  int total = 0;
  for (const auto& l : layers)
    if (l.kind == LayerKind::kTimeDelay)
      total += std::max(0, -*std::min_element(l.offsets.begin(),
                                              l.offsets.end()));
  return total;
}

int NetworkSpec::context_right() const {
  int total = 0;
  for (const auto& l : layers)
    if (l.kind == LayerKind::kTimeDelay)
      total += std::max(0, *std::max_element(l.offsets.begin(),
                                             l.offsets.end()));
  return total;
}

int NetworkSpec::tap(const std::string& name) const {
  auto it = taps.find(name);
  if (it == taps.end()) throw Error("unknown tap: " + name);
  return it->second;
}

bool NetworkSpec::same_topology(const NetworkSpec& o) const {
  return input_dim == o.input_dim && layers == o.layers;
}

// ---------------------------------------------------------------------------
// Initialization

template <typename Real>
ParamStore<Real> init_params(const NetworkSpec& spec, Rng* rng) {
  spec.validate();
  ParamStore<Real> out;
  out.layers.resize(spec.layers.size());
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (!l.has_params()) continue;
    int rows = 0, cols = 0, fan_in = 0, fan_out = 0;
    switch (l.kind) {
      case LayerKind::kFullyConnected:
        rows = l.in_dim;
        cols = l.out_dim;
        fan_in = l.in_dim;
        fan_out = l.out_dim;
        break;
      case LayerKind::kTimeDelay:
        rows = l.in_dim * static_cast<int>(l.offsets.size());
        cols = l.out_dim;
        fan_in = rows;
        fan_out = l.out_dim;
        break;
      case LayerKind::kConv2D:
        rows = l.out_c;
        cols = l.in_c * l.kern_h * l.kern_w;
        // Per output position: fan_in inputs, out_c outputs. Counting the
        // kernel area into fan_out starves the forward scale when
        // out_c * kh * kw >> fan_in.
        fan_in = cols;
        fan_out = l.out_c;
        break;
      default:
        break;
    }
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    auto& e = out.layers[i];
    e.w = Matrix<Real>(rows, cols);
    for (size_t k = 0; k < e.w.size(); ++k)
      e.w.data()[k] = static_cast<Real>(rng->uniform(-bound, bound));
    e.b.assign(static_cast<size_t>(l.kind == LayerKind::kConv2D ? l.out_c
                                                                : l.out_dim),
               Real(0));
  }
  return out;
}

template <typename Real>
ParamStore<Real> zero_params(const NetworkSpec& spec) {
  ParamStore<Real> out;
  out.layers.resize(spec.layers.size());
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (!l.has_params()) continue;
    auto& e = out.layers[i];
    switch (l.kind) {
      case LayerKind::kFullyConnected:
        e.w = Matrix<Real>(l.in_dim, l.out_dim);
        e.b.assign(l.out_dim, Real(0));
        break;
      case LayerKind::kTimeDelay:
        e.w = Matrix<Real>(l.in_dim * static_cast<int>(l.offsets.size()),
                           l.out_dim);
        e.b.assign(l.out_dim, Real(0));
        break;
      case LayerKind::kConv2D:
        e.w = Matrix<Real>(l.out_c, l.in_c * l.kern_h * l.kern_w);
        e.b.assign(l.out_c, Real(0));
        break;
      default:
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer primitives

template <typename Real>
Matrix<Real> fc_forward(const Matrix<Real>& x, const Matrix<Real>& w,
                        std::span<const Real> b) {
  CDF_CHECK(x.cols() == w.rows(), "fc input dim mismatch");
  CDF_CHECK(static_cast<int>(b.size()) == w.cols(), "fc bias dim mismatch");
  Matrix<Real> y;
  matmul(x, w, &y);
  for (int t = 0; t < y.rows(); ++t) {
    Real* row = y.row(t);
    for (int j = 0; j < y.cols(); ++j) row[j] += b[j];
  }
  return y;
}

namespace {

// Gathers convolution patches of every frame into one (T*oh*ow) x
// (in_c*kh*kw) matrix so the convolution becomes a single GEMM.
template <typename Real>
Matrix<Real> im2col(const Matrix<Real>& x, const LayerSpec& l) {
  const int oh = l.out_h(), ow = l.out_w();
  const int k = l.in_c * l.kern_h * l.kern_w;
  Matrix<Real> col(x.rows() * oh * ow, k);
  for (int t = 0; t < x.rows(); ++t) {
    const Real* img = x.row(t);
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        Real* dst = col.row((t * oh + i) * ow + j);
        int idx = 0;
        for (int c = 0; c < l.in_c; ++c) {
          const Real* plane = img + static_cast<size_t>(c) * l.in_h * l.in_w;
          for (int dh = 0; dh < l.kern_h; ++dh) {
            const Real* src =
                plane + static_cast<size_t>(i * l.stride_h + dh) * l.in_w +
                j * l.stride_w;
            for (int dw = 0; dw < l.kern_w; ++dw) dst[idx++] = src[dw];
          }
        }
      }
    }
  }
  return col;
}

template <typename Real>
void col2im_add(const Matrix<Real>& col, const LayerSpec& l,
                Matrix<Real>* dx) {
  const int oh = l.out_h(), ow = l.out_w();
  for (int t = 0; t < dx->rows(); ++t) {
    Real* img = dx->row(t);
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const Real* src = col.row((t * oh + i) * ow + j);
        int idx = 0;
        for (int c = 0; c < l.in_c; ++c) {
          Real* plane = img + static_cast<size_t>(c) * l.in_h * l.in_w;
          for (int dh = 0; dh < l.kern_h; ++dh) {
            Real* dst =
                plane + static_cast<size_t>(i * l.stride_h + dh) * l.in_w +
                j * l.stride_w;
            for (int dw = 0; dw < l.kern_w; ++dw) dst[dw] += src[idx++];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Real>
Matrix<Real> conv2d_forward(const Matrix<Real>& x, const LayerSpec& spec,
                            const Matrix<Real>& w, std::span<const Real> b) {
  CDF_CHECK(x.cols() == spec.input_dim(), "conv input dim mismatch");
  CDF_CHECK(spec.kern_h <= spec.in_h && spec.kern_w <= spec.in_w,
            "conv kernel larger than input");
  const int oh = spec.out_h(), ow = spec.out_w();
  Matrix<Real> col = im2col(x, spec);
  Matrix<Real> prod;  // (T*oh*ow) x out_c
  matmul_nt(col, w, &prod);
  Matrix<Real> y(x.rows(), spec.out_c * oh * ow);
  for (int t = 0; t < x.rows(); ++t) {
    Real* dst = y.row(t);
    for (int i = 0; i < oh * ow; ++i) {
      const Real* src = prod.row(t * oh * ow + i);
      for (int c = 0; c < spec.out_c; ++c)
        dst[c * oh * ow + i] = src[c] + b[c];
    }
  }
  return y;
}

template <typename Real>
Matrix<Real> maxpool2d_forward(const Matrix<Real>& x, const LayerSpec& spec,
                               std::vector<int32_t>* argmax) {
  CDF_CHECK(x.cols() == spec.input_dim(), "pool input dim mismatch");
  CDF_CHECK(spec.kern_h <= spec.in_h && spec.kern_w <= spec.in_w,
            "pool window exceeds input");
  const int oh = spec.out_h(), ow = spec.out_w();
  Matrix<Real> y(x.rows(), spec.in_c * oh * ow);
  if (argmax) argmax->assign(y.size(), 0);
  for (int t = 0; t < x.rows(); ++t) {
    const Real* img = x.row(t);
    Real* dst = y.row(t);
    for (int c = 0; c < spec.in_c; ++c) {
      const Real* plane = img + static_cast<size_t>(c) * spec.in_h * spec.in_w;
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          Real best = -std::numeric_limits<Real>::infinity();
          int32_t best_idx = 0;
          for (int dh = 0; dh < spec.kern_h; ++dh) {
            for (int dw = 0; dw < spec.kern_w; ++dw) {
              const int32_t idx =
                  c * spec.in_h * spec.in_w +
                  (i * spec.stride_h + dh) * spec.in_w + j * spec.stride_w +
                  dw;
              if (img[idx] > best) {  // ties keep the lowest flat index
                best = img[idx];
                best_idx = idx;
              }
            }
          }
          const size_t out_idx = static_cast<size_t>(c) * oh * ow +
                                 static_cast<size_t>(i) * ow + j;
          dst[out_idx] = best;
          if (argmax)
            (*argmax)[static_cast<size_t>(t) * y.cols() + out_idx] = best_idx;
        }
      }
      (void)plane;
    }
  }
  return y;
}

template <typename Real>
Matrix<Real> timedelay_forward(const Matrix<Real>& x, const LayerSpec& spec,
                               const Matrix<Real>& w, std::span<const Real> b,
                               Matrix<Real>* gathered) {
  CDF_CHECK(!spec.offsets.empty(), "timedelay needs offsets");
  CDF_CHECK(x.cols() == spec.in_dim, "timedelay input dim mismatch");
  const int n_off = static_cast<int>(spec.offsets.size());
  const int t_count = x.rows();
  Matrix<Real> g(t_count, spec.in_dim * n_off);
  for (int t = 0; t < t_count; ++t) {
    Real* dst = g.row(t);
    for (int o = 0; o < n_off; ++o) {
      const int src = std::clamp(t + spec.offsets[o], 0, t_count - 1);
      std::memcpy(dst + static_cast<size_t>(o) * spec.in_dim, x.row(src),
                  sizeof(Real) * spec.in_dim);
    }
  }
  Matrix<Real> y = fc_forward(g, w, b);
  if (gathered) *gathered = std::move(g);
  return y;
}

template <typename Real>
Matrix<Real> pnorm_forward(const Matrix<Real>& x, int group, double p) {
  CDF_CHECK(group > 0 && x.cols() % group == 0,
            "pnorm dim not divisible by group");
  const int out_dim = x.cols() / group;
  Matrix<Real> y(x.rows(), out_dim);
  for (int t = 0; t < x.rows(); ++t) {
    const Real* src = x.row(t);
    Real* dst = y.row(t);
    if (p == 2.0) {
      for (int j = 0; j < out_dim; ++j) {
        Real acc(0);
        for (int i = 0; i < group; ++i) {
          const Real v = src[j * group + i];
          acc += v * v;
        }
        dst[j] = std::sqrt(acc);
      }
    } else {
      for (int j = 0; j < out_dim; ++j) {
        double acc = 0;
        for (int i = 0; i < group; ++i)
          acc += std::pow(std::abs(static_cast<double>(src[j * group + i])),
                          p);
        dst[j] = static_cast<Real>(std::pow(acc, 1.0 / p));
      }
    }
  }
  return y;
}

template <typename Real>
Matrix<Real> softmax(const Matrix<Real>& x) {
  Matrix<Real> y(x.rows(), x.cols());
  for (int t = 0; t < x.rows(); ++t) {
    const Real* src = x.row(t);
    Real* dst = y.row(t);
    Real max_v = src[0];
    for (int j = 1; j < x.cols(); ++j) max_v = std::max(max_v, src[j]);
    Real sum(0);
    for (int j = 0; j < x.cols(); ++j) {
      dst[j] = std::exp(src[j] - max_v);
      sum += dst[j];
    }
    const Real inv = Real(1) / sum;
    for (int j = 0; j < x.cols(); ++j) dst[j] *= inv;
  }
  return y;
}

template <typename Real>
std::pair<Real, Matrix<Real>> cross_entropy_loss(const Matrix<Real>& probs,
                                                 std::span<const int> labels) {
  CDF_CHECK(static_cast<int>(labels.size()) == probs.rows(),
            "label count mismatch");
  int active = 0;
  for (int label : labels)
    if (label >= 0) ++active;
  CDF_CHECK(active > 0, "cross entropy needs at least one labeled row");
  Matrix<Real> grad(probs.rows(), probs.cols());
  double loss = 0.0;
  const Real inv_b = Real(1) / static_cast<Real>(active);
  for (int t = 0; t < probs.rows(); ++t) {
    if (labels[t] < 0) continue;
    CDF_CHECK(labels[t] < probs.cols(), "label out of range");
    const Real* p = probs.row(t);
    Real* g = grad.row(t);
    loss -= std::log(std::max(static_cast<double>(p[labels[t]]), 1e-12));
    for (int j = 0; j < probs.cols(); ++j) g[j] = p[j] * inv_b;
    g[labels[t]] -= inv_b;
  }
  return {static_cast<Real>(loss / active), std::move(grad)};
}

template <typename Real>
std::pair<Real, Matrix<Real>> mse_loss(const Matrix<Real>& pred,
                                       const Matrix<Real>& target) {
  CDF_CHECK(pred.rows() == target.rows() && pred.cols() == target.cols(),
            "mse shape mismatch");
  Matrix<Real> grad(pred.rows(), pred.cols());
  const size_t n = pred.size();
  CDF_CHECK(n > 0, "mse on empty matrix");
  double loss = 0.0;
  const Real scale = Real(2) / static_cast<Real>(n);
  for (size_t i = 0; i < n; ++i) {
    const Real d = pred.data()[i] - target.data()[i];
    loss += static_cast<double>(d) * static_cast<double>(d);
    grad.data()[i] = scale * d;
  }
  return {static_cast<Real>(loss / static_cast<double>(n)), std::move(grad)};
}

// ---------------------------------------------------------------------------
// Whole-network forward/backward

template <typename Real>
void network_forward(const NetworkSpec& spec, const ParamStore<Real>& params,
                     const Matrix<Real>& x,
                     std::span<const Matrix<Real>* const> sides,
                     ForwardTrace<Real>* trace) {
  CDF_CHECK(x.cols() == spec.input_dim, "network input dim mismatch");
  CDF_CHECK(params.layers.size() == spec.layers.size(),
            "param store does not match spec");
  const size_t n = spec.layers.size();
  trace->input = x;
  trace->acts.assign(n, Matrix<Real>());
  trace->pool_idx.assign(n, {});
  trace->td_gather.assign(n, Matrix<Real>());
  const Matrix<Real>* cur = &trace->input;
  for (size_t i = 0; i < n; ++i) {
    const LayerSpec& l = spec.layers[i];
    const auto& pe = params.layers[i];
    switch (l.kind) {
      case LayerKind::kFullyConnected:
        trace->acts[i] = fc_forward(*cur, pe.w, std::span<const Real>(pe.b));
        break;
      case LayerKind::kConv2D:
        trace->acts[i] =
            conv2d_forward(*cur, l, pe.w, std::span<const Real>(pe.b));
        break;
      case LayerKind::kMaxPool2D:
        trace->acts[i] = maxpool2d_forward(*cur, l, &trace->pool_idx[i]);
        break;
      case LayerKind::kTimeDelay:
        trace->acts[i] = timedelay_forward(*cur, l, pe.w,
                                           std::span<const Real>(pe.b),
                                           &trace->td_gather[i]);
        break;
      case LayerKind::kPNorm:
        trace->acts[i] = pnorm_forward(*cur, l.group, l.p);
        break;
      case LayerKind::kReLU: {
        Matrix<Real> y = *cur;
        for (size_t k = 0; k < y.size(); ++k)
          if (y.data()[k] < Real(0)) y.data()[k] = Real(0);
        trace->acts[i] = std::move(y);
        break;
      }
      case LayerKind::kSoftmax:
        trace->acts[i] = softmax(*cur);
        break;
      case LayerKind::kConcat: {
        CDF_CHECK(l.side_index < static_cast<int>(sides.size()),
                  "missing side input");
        const Matrix<Real>& side = *sides[l.side_index];
        CDF_CHECK(side.rows() == cur->rows(),
                  "side input frame count mismatch");
        CDF_CHECK(side.cols() == l.side_dim, "side input dim mismatch");
        Matrix<Real> y(cur->rows(), l.in_dim + l.side_dim);
        for (int t = 0; t < y.rows(); ++t) {
          std::memcpy(y.row(t), cur->row(t), sizeof(Real) * l.in_dim);
          std::memcpy(y.row(t) + l.in_dim, side.row(t),
                      sizeof(Real) * l.side_dim);
        }
        trace->acts[i] = std::move(y);
        break;
      }
      case LayerKind::kLengthNorm: {
        // Unit-RMS renormalization: y = x * sqrt(D) / ||x||. Keeps the
        // activation scale of stacked p-norm layers near one.
        Matrix<Real> y(cur->rows(), cur->cols());
        const Real target = std::sqrt(static_cast<Real>(cur->cols()));
        for (int t = 0; t < cur->rows(); ++t) {
          const Real* src = cur->row(t);
          Real* dst = y.row(t);
          Real norm(0);
          for (int j = 0; j < cur->cols(); ++j) norm += src[j] * src[j];
          const Real scale = target / std::max(std::sqrt(norm), Real(1e-8));
          for (int j = 0; j < cur->cols(); ++j) dst[j] = src[j] * scale;
        }
        trace->acts[i] = std::move(y);
        break;
      }
    }
    cur = &trace->acts[i];
  }
}

template <typename Real>
void network_backward(const NetworkSpec& spec, const ParamStore<Real>& params,
                      const ForwardTrace<Real>& trace,
                      const Matrix<Real>& out_grad, bool grad_at_logits,
                      ParamStore<Real>* grads) {
  const int n = static_cast<int>(spec.layers.size());
  CDF_CHECK(static_cast<int>(trace.acts.size()) == n, "trace does not match");
  int start = n - 1;
  Matrix<Real> cur = out_grad;
  if (grad_at_logits && spec.layers.back().kind == LayerKind::kSoftmax)
    start = n - 2;  // cross-entropy shortcut: grad already at the logits
  for (int i = start; i >= 0; --i) {
    const LayerSpec& l = spec.layers[i];
    const Matrix<Real>& input = (i == 0) ? trace.input : trace.acts[i - 1];
    const auto& pe = params.layers[i];
    auto& ge = grads->layers[i];
    Matrix<Real> next;
    switch (l.kind) {
      case LayerKind::kFullyConnected: {
        matmul_tn_acc(input, cur, &ge.w);
        for (int t = 0; t < cur.rows(); ++t) {
          const Real* g = cur.row(t);
          for (int j = 0; j < cur.cols(); ++j) ge.b[j] += g[j];
        }
        matmul_nt(cur, pe.w, &next);
        break;
      }
      case LayerKind::kConv2D: {
        const int oh = l.out_h(), ow = l.out_w();
        // d_prod: (T*oh*ow) x out_c, regathered from the row layout.
        Matrix<Real> d_prod(cur.rows() * oh * ow, l.out_c);
        for (int t = 0; t < cur.rows(); ++t) {
          const Real* g = cur.row(t);
          for (int i2 = 0; i2 < oh * ow; ++i2) {
            Real* dst = d_prod.row(t * oh * ow + i2);
            for (int c = 0; c < l.out_c; ++c) dst[c] = g[c * oh * ow + i2];
          }
        }
        Matrix<Real> col = im2col(input, l);
        // dW (out_c x k) += d_prod^T * col
        matmul_tn_acc(d_prod, col, &ge.w);
        for (int r = 0; r < d_prod.rows(); ++r) {
          const Real* g = d_prod.row(r);
          for (int c = 0; c < l.out_c; ++c) ge.b[c] += g[c];
        }
        Matrix<Real> d_col;
        matmul(d_prod, pe.w, &d_col);
        next = Matrix<Real>(input.rows(), input.cols());
        col2im_add(d_col, l, &next);
        break;
      }
      case LayerKind::kMaxPool2D: {
        next = Matrix<Real>(input.rows(), input.cols());
        const auto& idx = trace.pool_idx[i];
        for (int t = 0; t < cur.rows(); ++t) {
          const Real* g = cur.row(t);
          Real* dst = next.row(t);
          for (int j = 0; j < cur.cols(); ++j)
            dst[idx[static_cast<size_t>(t) * cur.cols() + j]] += g[j];
        }
        break;
      }
      case LayerKind::kTimeDelay: {
        const Matrix<Real>& g = trace.td_gather[i];
        matmul_tn_acc(g, cur, &ge.w);
        for (int t = 0; t < cur.rows(); ++t) {
          const Real* gr = cur.row(t);
          for (int j = 0; j < cur.cols(); ++j) ge.b[j] += gr[j];
        }
        Matrix<Real> d_gather;
        matmul_nt(cur, pe.w, &d_gather);
        next = Matrix<Real>(input.rows(), input.cols());
        const int n_off = static_cast<int>(l.offsets.size());
        const int t_count = input.rows();
        for (int t = 0; t < t_count; ++t) {
          const Real* src = d_gather.row(t);
          for (int o = 0; o < n_off; ++o) {
            const int tgt = std::clamp(t + l.offsets[o], 0, t_count - 1);
            Real* dst = next.row(tgt);
            const Real* blk = src + static_cast<size_t>(o) * l.in_dim;
            for (int j = 0; j < l.in_dim; ++j) dst[j] += blk[j];
          }
        }
        break;
      }
      case LayerKind::kPNorm: {
        next = Matrix<Real>(input.rows(), input.cols());
        const Matrix<Real>& y = trace.acts[i];
        const int out_dim = y.cols();
        for (int t = 0; t < input.rows(); ++t) {
          const Real* xr = input.row(t);
          const Real* yr = y.row(t);
          const Real* gr = cur.row(t);
          Real* dst = next.row(t);
          for (int j = 0; j < out_dim; ++j) {
            if (yr[j] <= Real(0)) continue;
            if (l.p == 2.0) {
              // x_i / y <= 1, so divide first to avoid overflow when the
              // group norm is tiny.
              for (int k = 0; k < l.group; ++k)
                dst[j * l.group + k] =
                    gr[j] * (xr[j * l.group + k] / yr[j]);
            } else {
              for (int k = 0; k < l.group; ++k) {
                const double v = xr[j * l.group + k];
                const double ratio =
                    std::pow(std::abs(v) / static_cast<double>(yr[j]),
                             l.p - 1.0);
                dst[j * l.group + k] = static_cast<Real>(
                    gr[j] * ratio * (v < 0 ? -1.0 : 1.0));
              }
            }
          }
        }
        break;
      }
      case LayerKind::kReLU: {
        next = cur;
        const Matrix<Real>& y = trace.acts[i];
        for (size_t k = 0; k < next.size(); ++k)
          if (y.data()[k] <= Real(0)) next.data()[k] = Real(0);
        break;
      }
      case LayerKind::kSoftmax: {
        const Matrix<Real>& y = trace.acts[i];
        next = Matrix<Real>(cur.rows(), cur.cols());
        for (int t = 0; t < cur.rows(); ++t) {
          const Real* p = y.row(t);
          const Real* g = cur.row(t);
          Real dot(0);
          for (int j = 0; j < cur.cols(); ++j) dot += p[j] * g[j];
          Real* dst = next.row(t);
          for (int j = 0; j < cur.cols(); ++j) dst[j] = p[j] * (g[j] - dot);
        }
        break;
      }
      case LayerKind::kConcat: {
        next = Matrix<Real>(cur.rows(), l.in_dim);
        // Side inputs are conditioning variables; no gradient flows to them.
        for (int t = 0; t < cur.rows(); ++t)
          std::memcpy(next.row(t), cur.row(t), sizeof(Real) * l.in_dim);
        break;
      }
      case LayerKind::kLengthNorm: {
        next = Matrix<Real>(cur.rows(), cur.cols());
        const Real target = std::sqrt(static_cast<Real>(cur.cols()));
        for (int t = 0; t < cur.rows(); ++t) {
          const Real* xr = input.row(t);
          Real norm(0);
          for (int j = 0; j < cur.cols(); ++j) norm += xr[j] * xr[j];
          norm = std::sqrt(norm);
          const Real* g = cur.row(t);
          Real* dst = next.row(t);
          if (norm <= Real(1e-8)) {
            // clamped: y = x * target / 1e-8, a constant scale
            for (int j = 0; j < cur.cols(); ++j)
              dst[j] = g[j] * (target / Real(1e-8));
          } else {
            Real dot(0);
            for (int j = 0; j < cur.cols(); ++j) dot += xr[j] * g[j];
            const Real s = target / norm;
            const Real proj = dot / (norm * norm);
            for (int j = 0; j < cur.cols(); ++j)
              dst[j] = s * (g[j] - xr[j] * proj);
          }
        }
        break;
      }
    }
    cur = std::move(next);
  }
}

template <typename Real>
void sgd_step(ParamStore<Real>* params, const ParamStore<Real>& grads,
              ParamStore<Real>* velocity, double lr, double momentum) {
  const Real m = static_cast<Real>(momentum);
  const Real step = static_cast<Real>(lr);
  for (size_t i = 0; i < params->layers.size(); ++i) {
    auto& p = params->layers[i];
    const auto& g = grads.layers[i];
    auto& v = velocity->layers[i];
    for (size_t k = 0; k < p.w.size(); ++k) {
      v.w.data()[k] = m * v.w.data()[k] - step * g.w.data()[k];
      p.w.data()[k] += v.w.data()[k];
    }
    for (size_t k = 0; k < p.b.size(); ++k) {
      v.b[k] = m * v.b[k] - step * g.b[k];
      p.b[k] += v.b[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double eval_loss(const NetworkSpec& spec, const ParamStore<double>& params,
                 const Matrix<double>& x,
                 std::span<const Matrix<double>* const> sides,
                 std::span<const int> labels, const Matrix<double>* mse_target,
                 ForwardTrace<double>* scratch) {
  network_forward(spec, params, x, sides, scratch);
  if (mse_target != nullptr)
    return mse_loss(scratch->output(), *mse_target).first;
  return cross_entropy_loss(scratch->output(), labels).first;
}

}  // namespace

double gradient_check(const NetworkSpec& spec, const ParamStore<double>& params,
                      const Matrix<double>& x,
                      std::span<const Matrix<double>* const> sides,
                      std::span<const int> labels,
                      const Matrix<double>* mse_target, int samples_per_layer,
                      uint64_t seed) {
  constexpr double kEps = 1e-5;
  ForwardTrace<double> trace;
  network_forward(spec, params, x, sides, &trace);
  ParamStore<double> grads = zero_params<double>(spec);
  if (mse_target != nullptr) {
    auto [loss, grad] = mse_loss(trace.output(), *mse_target);
    (void)loss;
    network_backward(spec, params, trace, grad, false, &grads);
  } else {
    auto [loss, grad] = cross_entropy_loss(trace.output(), labels);
    (void)loss;
    network_backward(spec, params, trace, grad, true, &grads);
  }

  Rng rng(seed);
  ParamStore<double> probe = params;  // mutated in place per coordinate
  ForwardTrace<double> scratch;
  double max_rel = 0.0;
  for (size_t li = 0; li < spec.layers.size(); ++li) {
    if (!spec.layers[li].has_params()) continue;
    auto& pw = probe.layers[li];
    const size_t w_count = pw.w.size();
    const size_t total = w_count + pw.b.size();
    for (int s = 0; s < samples_per_layer; ++s) {
      const size_t pick = static_cast<size_t>(rng.uniform_int(total));
      double* slot = pick < w_count ? pw.w.data() + pick
                                    : pw.b.data() + (pick - w_count);
      const double analytic = pick < w_count
                                  ? grads.layers[li].w.data()[pick]
                                  : grads.layers[li].b[pick - w_count];
      const double saved = *slot;
      *slot = saved + kEps;
      const double lp =
          eval_loss(spec, probe, x, sides, labels, mse_target, &scratch);
      *slot = saved - kEps;
      const double lm =
          eval_loss(spec, probe, x, sides, labels, mse_target, &scratch);
      *slot = saved;
      const double numeric = (lp - lm) / (2.0 * kEps);
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric),
                                   1e-3});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// CDFN serialization

namespace {

void write_layer(std::ostream& os, const LayerSpec& l) {
  write_u8(os, static_cast<uint8_t>(l.kind));
  switch (l.kind) {
    case LayerKind::kFullyConnected:
      write_u32(os, static_cast<uint32_t>(l.in_dim));
      write_u32(os, static_cast<uint32_t>(l.out_dim));
      break;
    case LayerKind::kConv2D:
      write_u32(os, static_cast<uint32_t>(l.in_c));
      write_u32(os, static_cast<uint32_t>(l.in_h));
      write_u32(os, static_cast<uint32_t>(l.in_w));
      write_u32(os, static_cast<uint32_t>(l.out_c));
      write_u32(os, static_cast<uint32_t>(l.kern_h));
      write_u32(os, static_cast<uint32_t>(l.kern_w));
      write_u32(os, static_cast<uint32_t>(l.stride_h));
      write_u32(os, static_cast<uint32_t>(l.stride_w));
      break;
    case LayerKind::kMaxPool2D:
      write_u32(os, static_cast<uint32_t>(l.in_c));
      write_u32(os, static_cast<uint32_t>(l.in_h));
      write_u32(os, static_cast<uint32_t>(l.in_w));
      write_u32(os, static_cast<uint32_t>(l.kern_h));
      write_u32(os, static_cast<uint32_t>(l.kern_w));
      write_u32(os, static_cast<uint32_t>(l.stride_h));
      write_u32(os, static_cast<uint32_t>(l.stride_w));
      break;
    case LayerKind::kTimeDelay:
      write_u32(os, static_cast<uint32_t>(l.in_dim));
      write_u32(os, static_cast<uint32_t>(l.out_dim));
      write_u32(os, static_cast<uint32_t>(l.offsets.size()));
      for (int o : l.offsets) write_i32(os, o);
      break;
    case LayerKind::kPNorm:
      write_u32(os, static_cast<uint32_t>(l.in_dim));
      write_u32(os, static_cast<uint32_t>(l.group));
      write_f32(os, static_cast<float>(l.p));
      break;
    case LayerKind::kReLU:
    case LayerKind::kSoftmax:
    case LayerKind::kLengthNorm:
      write_u32(os, static_cast<uint32_t>(l.in_dim));
      break;
    case LayerKind::kConcat:
      write_u32(os, static_cast<uint32_t>(l.in_dim));
      write_u32(os, static_cast<uint32_t>(l.side_index));
      write_u32(os, static_cast<uint32_t>(l.side_dim));
      break;
  }
}

LayerSpec read_layer(std::istream& is) {
  const uint8_t tag = read_u8(is);
  if (tag > 8) throw Error(strprintf("bad layer tag %u", tag));
  LayerSpec l;
  l.kind = static_cast<LayerKind>(tag);
  switch (l.kind) {
    case LayerKind::kFullyConnected:
      l.in_dim = static_cast<int>(read_u32(is));
      l.out_dim = static_cast<int>(read_u32(is));
      break;
    case LayerKind::kConv2D:
      l.in_c = static_cast<int>(read_u32(is));
      l.in_h = static_cast<int>(read_u32(is));
      l.in_w = static_cast<int>(read_u32(is));
      l.out_c = static_cast<int>(read_u32(is));
      l.kern_h = static_cast<int>(read_u32(is));
      l.kern_w = static_cast<int>(read_u32(is));
      l.stride_h = static_cast<int>(read_u32(is));
      l.stride_w = static_cast<int>(read_u32(is));
      break;
    case LayerKind::kMaxPool2D:
      l.in_c = static_cast<int>(read_u32(is));
      l.in_h = static_cast<int>(read_u32(is));
      l.in_w = static_cast<int>(read_u32(is));
      l.kern_h = static_cast<int>(read_u32(is));
      l.kern_w = static_cast<int>(read_u32(is));
      l.stride_h = static_cast<int>(read_u32(is));
      l.stride_w = static_cast<int>(read_u32(is));
      break;
    case LayerKind::kTimeDelay: {
      l.in_dim = static_cast<int>(read_u32(is));
      l.out_dim = static_cast<int>(read_u32(is));
      const uint32_t n = read_u32(is);
      l.offsets.resize(n);
      for (uint32_t i = 0; i < n; ++i) l.offsets[i] = read_i32(is);
      break;
    }
    case LayerKind::kPNorm:
      l.in_dim = static_cast<int>(read_u32(is));
      l.group = static_cast<int>(read_u32(is));
      l.p = read_f32(is);
      break;
    case LayerKind::kReLU:
    case LayerKind::kSoftmax:
    case LayerKind::kLengthNorm:
      l.in_dim = static_cast<int>(read_u32(is));
      break;
    case LayerKind::kConcat:
      l.in_dim = static_cast<int>(read_u32(is));
      l.side_index = static_cast<int>(read_u32(is));
      l.side_dim = static_cast<int>(read_u32(is));
      break;
  }
  return l;
}

void write_tensor(std::ostream& os, const Matrix<float>& m) {
  write_u32(os, 2);
  write_u32(os, static_cast<uint32_t>(m.rows()));
  write_u32(os, static_cast<uint32_t>(m.cols()));
  write_f32_array(os, m.data(), m.size());
}

void write_tensor(std::ostream& os, const std::vector<float>& v) {
  write_u32(os, 1);
  write_u32(os, static_cast<uint32_t>(v.size()));
  write_f32_array(os, v.data(), v.size());
}

}  // namespace

void save_model(std::ostream& os, const NetworkSpec& spec,
                const ParamStore<float>& params) {
  write_magic(os, "CDFN");
  write_u8(os, 1);
  write_u32(os, static_cast<uint32_t>(spec.input_dim));
  write_u32(os, static_cast<uint32_t>(spec.layers.size()));
  for (const auto& l : spec.layers) write_layer(os, l);
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    if (!spec.layers[i].has_params()) continue;
    write_tensor(os, params.layers[i].w);
    write_tensor(os, params.layers[i].b);
  }
}

void save_model(const NetworkSpec& spec, const ParamStore<float>& params,
                const std::filesystem::path& path) {
  std::ofstream os = open_out(path);
  save_model(os, spec, params);
  if (!os) throw Error("failed writing model: " + path.string());
}

std::pair<NetworkSpec, ParamStore<float>> load_model(std::istream& is) {
  expect_magic(is, "CDFN", "model");
  const uint8_t version = read_u8(is);
  if (version != 1)
    throw Error(strprintf("unsupported CDFN version %u", version));
  NetworkSpec spec;
  spec.input_dim = static_cast<int>(read_u32(is));
  const uint32_t n_layers = read_u32(is);
  spec.layers.reserve(n_layers);
  for (uint32_t i = 0; i < n_layers; ++i) spec.layers.push_back(read_layer(is));
  spec.validate();
  ParamStore<float> params = zero_params<float>(spec);
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    if (!spec.layers[i].has_params()) continue;
    auto& e = params.layers[i];
    uint32_t ndim = read_u32(is);
    if (ndim != 2) throw Error("expected rank-2 weight tensor");
    const uint32_t rows = read_u32(is), cols = read_u32(is);
    if (static_cast<int>(rows) != e.w.rows() ||
        static_cast<int>(cols) != e.w.cols())
      throw Error("weight tensor shape does not match spec");
    read_f32_array(is, e.w.data(), e.w.size());
    ndim = read_u32(is);
    if (ndim != 1) throw Error("expected rank-1 bias tensor");
    const uint32_t bn = read_u32(is);
    if (bn != e.b.size()) throw Error("bias tensor shape does not match spec");
    read_f32_array(is, e.b.data(), e.b.size());
  }
  return {std::move(spec), std::move(params)};
}

std::pair<NetworkSpec, ParamStore<float>> load_model(
    const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  return load_model(is);
}

// ---------------------------------------------------------------------------
// Explicit instantiations: float for training, double for checking.

#define CDF_NN_INSTANTIATE(Real)                                              \
  template ParamStore<Real> init_params<Real>(const NetworkSpec&, Rng*);      \
  template ParamStore<Real> zero_params<Real>(const NetworkSpec&);            \
  template Matrix<Real> fc_forward<Real>(const Matrix<Real>&,                 \
                                         const Matrix<Real>&,                 \
                                         std::span<const Real>);              \
  template Matrix<Real> conv2d_forward<Real>(                                 \
      const Matrix<Real>&, const LayerSpec&, const Matrix<Real>&,             \
      std::span<const Real>);                                                 \
  template Matrix<Real> maxpool2d_forward<Real>(                              \
      const Matrix<Real>&, const LayerSpec&, std::vector<int32_t>*);          \
  template Matrix<Real> timedelay_forward<Real>(                              \
      const Matrix<Real>&, const LayerSpec&, const Matrix<Real>&,             \
      std::span<const Real>, Matrix<Real>*);                                  \
  template Matrix<Real> pnorm_forward<Real>(const Matrix<Real>&, int,         \
                                            double);                          \
  template Matrix<Real> softmax<Real>(const Matrix<Real>&);                   \
  template std::pair<Real, Matrix<Real>> cross_entropy_loss<Real>(            \
      const Matrix<Real>&, std::span<const int>);                             \
  template std::pair<Real, Matrix<Real>> mse_loss<Real>(                      \
      const Matrix<Real>&, const Matrix<Real>&);                              \
  template void network_forward<Real>(                                        \
      const NetworkSpec&, const ParamStore<Real>&, const Matrix<Real>&,       \
      std::span<const Matrix<Real>* const>, ForwardTrace<Real>*);             \
  template void network_backward<Real>(                                       \
      const NetworkSpec&, const ParamStore<Real>&, const ForwardTrace<Real>&, \
      const Matrix<Real>&, bool, ParamStore<Real>*);                          \
  template void sgd_step<Real>(ParamStore<Real>*, const ParamStore<Real>&,    \
                               ParamStore<Real>*, double, double);

CDF_NN_INSTANTIATE(float)
CDF_NN_INSTANTIATE(double)

#undef CDF_NN_INSTANTIATE

}  // namespace nn
}  // namespace cdf
