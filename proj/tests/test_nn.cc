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

#include "cdf/dsp.h"
#include "cdf/io.h"
#include "cdf/nn.h"
#include "cdf/rng.h"
#include "oracles.h"

using namespace cdf;
using nn::LayerSpec;
using nn::NetworkSpec;

namespace {

Matrix<double> random_matrix(int rows, int cols, Rng* rng, double scale = 1.0) {
  Matrix<double> m(rows, cols);
  for (size_t i = 0; i < m.size(); ++i)
    m.data()[i] = rng->uniform(-scale, scale);
  return m;
}

std::vector<double> random_vector(int n, Rng* rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng->uniform(-1.0, 1.0);
  return v;
}

}  // namespace

TEST_CASE("fc identity and hand-computed case") {
  Matrix<double> eye(3, 3);
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  Rng rng(1);
  const Matrix<double> x = random_matrix(5, 3, &rng);
  const std::vector<double> zero(3, 0.0);
  CHECK(nn::fc_forward(x, eye, std::span<const double>(zero)) == x);

  Matrix<double> w(2, 1);
  w(0, 0) = 1.0;
  w(1, 0) = 1.0;
  Matrix<double> xin(1, 2);
  xin(0, 0) = 1.0;
  xin(0, 1) = 2.0;
  const std::vector<double> b = {0.5};
  const auto y = nn::fc_forward(xin, w, std::span<const double>(b));
  CHECK(y(0, 0) == doctest::Approx(3.5));
}

TEST_CASE("fc matches the naive matmul oracle on random shapes") {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const int b = 1 + static_cast<int>(rng.uniform_int(8));
    const int din = 1 + static_cast<int>(rng.uniform_int(32));
    const int dout = 1 + static_cast<int>(rng.uniform_int(32));
    const auto x = random_matrix(b, din, &rng);
    const auto w = random_matrix(din, dout, &rng);
    const auto bias = random_vector(dout, &rng);
    const auto got = nn::fc_forward(x, w, std::span<const double>(bias));
    const auto want = oracles::naive_fc(x, w, bias);
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-10);
  }
}

TEST_CASE("conv identity and hand-computed case") {
  // 1x1 kernel with weight 1 is the identity per channel.
  LayerSpec spec = LayerSpec::Conv2D(1, 3, 3, 1, 1, 1);
  Matrix<double> w(1, 1);
  w(0, 0) = 1.0;
  std::vector<double> b = {0.0};
  Rng rng(2);
  const auto x = random_matrix(2, 9, &rng);
  CHECK(nn::conv2d_forward(x, spec, w, std::span<const double>(b)) == x);

  // all-ones 2x2 kernel over [[1,2],[3,4]] -> [[10]]
  LayerSpec spec2 = LayerSpec::Conv2D(1, 2, 2, 1, 2, 2);
  Matrix<double> w2(1, 4);
  w2.fill(1.0);
  Matrix<double> x2(1, 4);
  x2(0, 0) = 1;
  x2(0, 1) = 2;
  x2(0, 2) = 3;
  x2(0, 3) = 4;
  const auto y2 = nn::conv2d_forward(x2, spec2, w2, std::span<const double>(b));
  CHECK(y2.rows() == 1);
  CHECK(y2.cols() == 1);
  CHECK(y2(0, 0) == doctest::Approx(10.0));
}

TEST_CASE("conv matches the six-loop oracle on random shapes") {
  Rng rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    const int in_c = 1 + static_cast<int>(rng.uniform_int(3));
    const int kh = 1 + static_cast<int>(rng.uniform_int(3));
    const int kw = 1 + static_cast<int>(rng.uniform_int(3));
    const int in_h = kh + static_cast<int>(rng.uniform_int(5));
    const int in_w = kw + static_cast<int>(rng.uniform_int(5));
    const int out_c = 1 + static_cast<int>(rng.uniform_int(4));
    const int sh = 1 + static_cast<int>(rng.uniform_int(2));
    const int sw = 1 + static_cast<int>(rng.uniform_int(2));
    const int batch = 1 + static_cast<int>(rng.uniform_int(3));
    LayerSpec spec = LayerSpec::Conv2D(in_c, in_h, in_w, out_c, kh, kw, sh, sw);
    const auto x = random_matrix(batch, in_c * in_h * in_w, &rng);
    const auto w = random_matrix(out_c, in_c * kh * kw, &rng);
    const auto bias = random_vector(out_c, &rng);
    const auto got = nn::conv2d_forward(x, spec, w, std::span<const double>(bias));
    const auto want = oracles::naive_conv2d(x, in_c, in_h, in_w, out_c, kh,
                                            kw, sh, sw, w, bias);
    REQUIRE(got.cols() == want.cols());
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-10);
  }
}

TEST_CASE("conv rejects kernels larger than the input") {
  LayerSpec spec = LayerSpec::Conv2D(1, 2, 2, 1, 3, 3);
  Matrix<double> w(1, 9);
  std::vector<double> b = {0.0};
  Matrix<double> x(1, 4);
  CHECK_THROWS_AS(nn::conv2d_forward(x, spec, w, std::span<const double>(b)),
                  Error);
}

TEST_CASE("maxpool identity, hand case and oracle") {
  LayerSpec ident = LayerSpec::MaxPool2D(2, 3, 3, 1, 1, 1, 1);
  Rng rng(3);
  const auto x = random_matrix(2, 18, &rng);
  CHECK(nn::maxpool2d_forward(x, ident) == x);

  LayerSpec p22 = LayerSpec::MaxPool2D(1, 2, 2, 2, 2, 2, 2);
  Matrix<double> x2(1, 4);
  x2(0, 0) = 1;
  x2(0, 1) = 2;
  x2(0, 2) = 3;
  x2(0, 3) = 4;
  const auto y = nn::maxpool2d_forward(x2, p22);
  CHECK(y.cols() == 1);
  CHECK(y(0, 0) == 4.0);

  for (int trial = 0; trial < 100; ++trial) {
    const int c = 1 + static_cast<int>(rng.uniform_int(3));
    const int ph = 1 + static_cast<int>(rng.uniform_int(3));
    const int pw = 1 + static_cast<int>(rng.uniform_int(3));
    const int in_h = ph + static_cast<int>(rng.uniform_int(5));
    const int in_w = pw + static_cast<int>(rng.uniform_int(5));
    const int sh = 1 + static_cast<int>(rng.uniform_int(2));
    const int sw = 1 + static_cast<int>(rng.uniform_int(2));
    LayerSpec spec = LayerSpec::MaxPool2D(c, in_h, in_w, ph, pw, sh, sw);
    const auto xin = random_matrix(2, c * in_h * in_w, &rng);
    const auto got = nn::maxpool2d_forward(xin, spec);
    const auto want = oracles::naive_maxpool2d(xin, c, in_h, in_w, ph, pw,
                                               sh, sw);
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(got.data()[i] == want.data()[i]);
  }
}

TEST_CASE("timedelay identity, edge clamping and splice oracle") {
  Rng rng(4);
  Matrix<double> eye(4, 4);
  for (int i = 0; i < 4; ++i) eye(i, i) = 1.0;
  const std::vector<double> zero4(4, 0.0);
  LayerSpec td0 = LayerSpec::TimeDelay(4, 4, {0});
  const auto x = random_matrix(6, 4, &rng);
  CHECK(nn::timedelay_forward(x, td0, eye, std::span<const double>(zero4)) ==
        x);

  // T = 1 with offsets {-1, 0, 1}: all three slots see the single row.
  LayerSpec td1 = LayerSpec::TimeDelay(2, 6, {-1, 0, 1});
  Matrix<double> eye6(6, 6);
  for (int i = 0; i < 6; ++i) eye6(i, i) = 1.0;
  const std::vector<double> zero6(6, 0.0);
  Matrix<double> single(1, 2);
  single(0, 0) = 3.0;
  single(0, 1) = -1.0;
  const auto y =
      nn::timedelay_forward(single, td1, eye6, std::span<const double>(zero6));
  for (int o = 0; o < 3; ++o) {
    CHECK(y(0, o * 2) == 3.0);
    CHECK(y(0, o * 2 + 1) == -1.0);
  }

  // Contiguous offsets equal dsp::splice followed by fc_forward.
  for (int trial = 0; trial < 20; ++trial) {
    const int t_count = 2 + static_cast<int>(rng.uniform_int(8));
    const int d = 1 + static_cast<int>(rng.uniform_int(6));
    const int dout = 1 + static_cast<int>(rng.uniform_int(6));
    const auto feats = random_matrix(t_count, d, &rng);
    const auto w = random_matrix(3 * d, dout, &rng);
    const auto b = random_vector(dout, &rng);
    LayerSpec td = LayerSpec::TimeDelay(d, dout, {-1, 0, 1});
    const auto got =
        nn::timedelay_forward(feats, td, w, std::span<const double>(b));

    dsp::FeatureMatrix fm;
    fm.data = feats;
    const dsp::FeatureMatrix spliced = dsp::splice(fm, 1, 1);
    const auto want =
        nn::fc_forward(spliced.data, w, std::span<const double>(b));
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-12);
  }
}

TEST_CASE("pnorm dimensions, one-hot and formula oracle") {
  Rng rng(5);
  const auto x200 = random_matrix(3, 200, &rng);
  const auto y = nn::pnorm_forward(x200, 5, 2.0);
  CHECK(y.cols() == 40);

  Matrix<double> onehot(1, 6);
  onehot(0, 2) = -7.5;
  const auto y2 = nn::pnorm_forward(onehot, 3, 2.0);
  CHECK(y2(0, 0) == doctest::Approx(7.5));
  CHECK(y2(0, 1) == 0.0);

  for (int trial = 0; trial < 100; ++trial) {
    const int group = 1 + static_cast<int>(rng.uniform_int(6));
    const int groups = 1 + static_cast<int>(rng.uniform_int(8));
    const auto x = random_matrix(2, group * groups, &rng);
    const auto got = nn::pnorm_forward(x, group, 2.0);
    const auto want = oracles::naive_pnorm(x, group, 2.0);
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got.data()[i] - want.data()[i]) < 1e-12);
  }

  CHECK_THROWS_AS(nn::pnorm_forward(x200, 3, 2.0), Error);
}

TEST_CASE("softmax properties and hand case") {
  Matrix<double> uniform(2, 5);
  uniform.fill(3.7);
  const auto u = nn::softmax(uniform);
  for (size_t i = 0; i < u.size(); ++i)
    CHECK(u.data()[i] == doctest::Approx(0.2).epsilon(1e-12));

  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix<double> x(1, 1 + static_cast<int>(rng.uniform_int(10)));
    for (size_t i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-100, 100);
    const auto p = nn::softmax(x);
    double sum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) sum += p.data()[i];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

    Matrix<double> shifted = x;
    for (size_t i = 0; i < x.size(); ++i) shifted.data()[i] += 13.25;
    const auto p2 = nn::softmax(shifted);
    for (size_t i = 0; i < p.size(); ++i)
      CHECK(p2.data()[i] == doctest::Approx(p.data()[i]).epsilon(1e-9));
  }

  Matrix<double> two(1, 2);
  two(0, 0) = 0.0;
  two(0, 1) = std::log(3.0);
  const auto p = nn::softmax(two);
  CHECK(p(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("cross entropy values and finite-difference gradient") {
  Matrix<double> sure(1, 3);
  sure(0, 0) = 1.0 - 2e-13;
  sure(0, 1) = 1e-13;
  sure(0, 2) = 1e-13;
  const std::vector<int> label0 = {0};
  CHECK(nn::cross_entropy_loss(sure, std::span<const int>(label0)).first ==
        doctest::Approx(0.0).epsilon(1e-9));

  Matrix<double> uniform(1, 4);
  uniform.fill(0.25);
  CHECK(nn::cross_entropy_loss(uniform, std::span<const int>(label0)).first ==
        doctest::Approx(std::log(4.0)));

  // Gradient at the logits vs central differences through softmax + CE.
  Rng rng(7);
  Matrix<double> logits(3, 5);
  for (size_t i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal();
  const std::vector<int> labels = {1, 4, 2};
  const auto grad =
      nn::cross_entropy_loss(nn::softmax(logits), std::span<const int>(labels))
          .second;
  const double eps = 1e-6;
  for (int t = 0; t < 3; ++t)
    for (int j = 0; j < 5; ++j) {
      Matrix<double> lp = logits, lm = logits;
      lp(t, j) += eps;
      lm(t, j) -= eps;
      const double fp =
          nn::cross_entropy_loss(nn::softmax(lp), std::span<const int>(labels))
              .first;
      const double fm =
          nn::cross_entropy_loss(nn::softmax(lm), std::span<const int>(labels))
              .first;
      const double numeric = (fp - fm) / (2 * eps);
      CHECK(std::abs(grad(t, j) - numeric) /
                std::max({std::abs(numeric), std::abs(grad(t, j)), 1e-3}) <
            1e-4);
    }
}

TEST_CASE("mse values and finite-difference gradient") {
  Matrix<double> a(2, 3), b(2, 3);
  a.fill(1.5);
  b.fill(1.5);
  CHECK(nn::mse_loss(a, b).first == 0.0);
  a.fill(3.5);
  CHECK(nn::mse_loss(a, b).first == doctest::Approx(4.0));

  Rng rng(8);
  Matrix<double> pred = a, target = b;
  for (size_t i = 0; i < pred.size(); ++i) {
    pred.data()[i] = rng.normal();
    target.data()[i] = rng.normal();
  }
  const auto grad = nn::mse_loss(pred, target).second;
  const double eps = 1e-6;
  for (int t = 0; t < 2; ++t)
    for (int j = 0; j < 3; ++j) {
      Matrix<double> pp = pred, pm = pred;
      pp(t, j) += eps;
      pm(t, j) -= eps;
      const double numeric =
          (nn::mse_loss(pp, target).first - nn::mse_loss(pm, target).first) /
          (2 * eps);
      CHECK(std::abs(grad(t, j) - numeric) /
                std::max({std::abs(numeric), std::abs(grad(t, j)), 1e-3}) <
            1e-4);
    }
}

TEST_CASE("sgd step semantics") {
  NetworkSpec spec;
  spec.input_dim = 2;
  spec.layers.push_back(LayerSpec::FullyConnected(2, 2));
  Rng rng(9);
  auto params = nn::init_params<double>(spec, &rng);
  auto grads = nn::zero_params<double>(spec);
  auto velocity = nn::zero_params<double>(spec);
  const auto before = params;

  // Zero gradient leaves parameters unchanged.
  nn::sgd_step(&params, grads, &velocity, 0.1, 0.9);
  CHECK(params.layers[0].w == before.layers[0].w);

  // Momentum 0 is a plain gradient step.
  grads.layers[0].w(0, 0) = 2.0;
  nn::sgd_step(&params, grads, &velocity, 0.1, 0.0);
  CHECK(params.layers[0].w(0, 0) ==
        doctest::Approx(before.layers[0].w(0, 0) - 0.2));
}

TEST_CASE("plain sgd strictly decreases a convex quadratic below 2/lambda_max") {
  // f(theta) = 0.5 sum_i lambda_i theta_i^2, grad_i = lambda_i theta_i.
  Rng rng(10);
  std::vector<double> lambda = {0.3, 1.2, 4.0};
  std::vector<double> theta = {1.0, -2.0, 0.7};
  const double lr = 1.5 / 4.0;  // below the analytic threshold 2/4.0
  auto f = [&] {
    double v = 0.0;
    for (size_t i = 0; i < theta.size(); ++i)
      v += 0.5 * lambda[i] * theta[i] * theta[i];
    return v;
  };
  double prev = f();
  for (int step = 0; step < 50; ++step) {
    for (size_t i = 0; i < theta.size(); ++i)
      theta[i] -= lr * lambda[i] * theta[i];
    const double cur = f();
    CHECK(cur < prev);
    prev = cur;
  }

  // With momentum the iterate still converges to the minimum.
  NetworkSpec spec;
  spec.input_dim = 3;
  spec.layers.push_back(LayerSpec::FullyConnected(3, 1));
  auto params = nn::zero_params<double>(spec);
  params.layers[0].w(0, 0) = 1.0;
  params.layers[0].w(1, 0) = -2.0;
  params.layers[0].w(2, 0) = 0.7;
  auto grads = nn::zero_params<double>(spec);
  auto velocity = nn::zero_params<double>(spec);
  for (int step = 0; step < 400; ++step) {
    for (int i = 0; i < 3; ++i)
      grads.layers[0].w(i, 0) = lambda[i] * params.layers[0].w(i, 0);
    nn::sgd_step(&params, grads, &velocity, 0.05, 0.9);
  }
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(params.layers[0].w(i, 0)) < 1e-4);
}

namespace {

double check_net(const NetworkSpec& spec, const Matrix<double>& x,
                 std::span<const Matrix<double>* const> sides,
                 std::span<const int> labels, const Matrix<double>* target,
                 uint64_t seed) {
  Rng rng(seed);
  auto params = nn::init_params<double>(spec, &rng);
  return nn::gradient_check(spec, params, x, sides, labels, target, 25, seed);
}

}  // namespace

TEST_CASE("gradient check: fc + softmax + cross entropy") {
  NetworkSpec spec;
  spec.input_dim = 7;
  spec.layers.push_back(LayerSpec::FullyConnected(7, 9));
  spec.layers.push_back(LayerSpec::ReLU(9));
  spec.layers.push_back(LayerSpec::FullyConnected(9, 4));
  spec.layers.push_back(LayerSpec::Softmax(4));
  Rng rng(11);
  const auto x = random_matrix(6, 7, &rng);
  const std::vector<int> labels = {0, 1, 2, 3, 1, 2};
  CHECK(check_net(spec, x, {}, labels, nullptr, 101) < 1e-4);
}

TEST_CASE("gradient check: conv + pool net") {
  NetworkSpec spec;
  spec.input_dim = 2 * 6 * 6;
  spec.layers.push_back(LayerSpec::Conv2D(2, 6, 6, 3, 3, 3));
  spec.layers.push_back(LayerSpec::ReLU(3 * 4 * 4));
  spec.layers.push_back(LayerSpec::MaxPool2D(3, 4, 4, 2, 2, 2, 2));
  spec.layers.push_back(LayerSpec::FullyConnected(3 * 2 * 2, 3));
  spec.layers.push_back(LayerSpec::Softmax(3));
  Rng rng(12);
  const auto x = random_matrix(4, 72, &rng);
  const std::vector<int> labels = {0, 2, 1, 0};
  CHECK(check_net(spec, x, {}, labels, nullptr, 102) < 1e-4);
}

TEST_CASE("gradient check: pnorm with inputs away from zero") {
  NetworkSpec spec;
  spec.input_dim = 12;
  spec.layers.push_back(LayerSpec::FullyConnected(12, 20));
  spec.layers.push_back(LayerSpec::PNorm(20, 5));
  spec.layers.push_back(LayerSpec::FullyConnected(4, 3));
  spec.layers.push_back(LayerSpec::Softmax(3));
  Rng rng(13);
  Matrix<double> x(5, 12);
  for (size_t i = 0; i < x.size(); ++i)
    x.data()[i] = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1 : 1);
  const std::vector<int> labels = {0, 1, 2, 1, 0};
  CHECK(check_net(spec, x, {}, labels, nullptr, 103) < 1e-4);
}

TEST_CASE("gradient check: timedelay + pnorm sequence net") {
  NetworkSpec spec;
  spec.input_dim = 6;
  spec.layers.push_back(LayerSpec::TimeDelay(6, 10, {-2, 0, 2}));
  spec.layers.push_back(LayerSpec::PNorm(10, 2));
  spec.layers.push_back(LayerSpec::TimeDelay(5, 8, {-1, 0, 1}));
  spec.layers.push_back(LayerSpec::FullyConnected(8, 3));
  spec.layers.push_back(LayerSpec::Softmax(3));
  Rng rng(14);
  const auto x = random_matrix(9, 6, &rng);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2};
  CHECK(check_net(spec, x, {}, labels, nullptr, 104) < 1e-4);
}

TEST_CASE("gradient check: concat conditioning and length norm, mse loss") {
  NetworkSpec spec;
  spec.input_dim = 5;
  spec.layers.push_back(LayerSpec::FullyConnected(5, 6));
  spec.layers.push_back(LayerSpec::Concat(6, 0, 3));
  spec.layers.push_back(LayerSpec::FullyConnected(9, 7));
  spec.layers.push_back(LayerSpec::LengthNorm(7));
  spec.layers.push_back(LayerSpec::FullyConnected(7, 4));
  Rng rng(15);
  const auto x = random_matrix(6, 5, &rng);
  const auto side = random_matrix(6, 3, &rng);
  const auto target = random_matrix(6, 4, &rng);
  const Matrix<double>* sides[] = {&side};
  CHECK(check_net(spec, x, std::span<const Matrix<double>* const>(sides, 1),
                  {}, &target, 105) < 1e-4);
}

TEST_CASE("network spec validation catches dimension breaks") {
  NetworkSpec spec;
  spec.input_dim = 10;
  spec.layers.push_back(LayerSpec::FullyConnected(10, 8));
  spec.layers.push_back(LayerSpec::FullyConnected(9, 4));  // mismatched
  CHECK_THROWS_AS(spec.validate(), Error);

  NetworkSpec ok;
  ok.input_dim = 10;
  ok.layers.push_back(LayerSpec::FullyConnected(10, 8));
  ok.layers.push_back(LayerSpec::PNorm(8, 3));  // 8 % 3 != 0
  CHECK_THROWS_AS(ok.validate(), Error);
}

TEST_CASE("model file round trip is bit exact") {
  NetworkSpec spec;
  spec.input_dim = 12;
  spec.layers.push_back(LayerSpec::Conv2D(1, 3, 4, 2, 2, 2));
  spec.layers.push_back(LayerSpec::ReLU(2 * 2 * 3));
  spec.layers.push_back(LayerSpec::FullyConnected(12, 6));
  spec.layers.push_back(LayerSpec::TimeDelay(6, 5, {-4, 0, 4}));
  spec.layers.push_back(LayerSpec::PNorm(5, 5));
  spec.layers.push_back(LayerSpec::Concat(1, 0, 2));
  spec.layers.push_back(LayerSpec::FullyConnected(3, 3));
  spec.layers.push_back(LayerSpec::Softmax(3));
  spec.validate();
  Rng rng(16);
  const auto params = nn::init_params<float>(spec, &rng);

  const auto dir = std::filesystem::temp_directory_path() / "cdf_test_nn";
  std::filesystem::create_directories(dir);
  const auto p1 = dir / "m1.cdfn", p2 = dir / "m2.cdfn";
  nn::save_model(spec, params, p1);
  auto [spec2, params2] = nn::load_model(p1);
  CHECK(spec2.same_topology(spec));
  nn::save_model(spec2, params2, p2);
  CHECK(files_identical(p1, p2));
  for (size_t li = 0; li < params.layers.size(); ++li) {
    CHECK(params2.layers[li].w == params.layers[li].w);
    CHECK(params2.layers[li].b == params.layers[li].b);
  }
}

TEST_CASE("forward pass is deterministic and finite") {
  NetworkSpec spec;
  spec.input_dim = 8;
  spec.layers.push_back(LayerSpec::FullyConnected(8, 16));
  spec.layers.push_back(LayerSpec::ReLU(16));
  spec.layers.push_back(LayerSpec::FullyConnected(16, 5));
  spec.layers.push_back(LayerSpec::Softmax(5));
  Rng rng(17);
  const auto params = nn::init_params<float>(spec, &rng);
  Matrix<float> x(10, 8);
  for (size_t i = 0; i < x.size(); ++i)
    x.data()[i] = static_cast<float>(rng.normal());
  nn::ForwardTrace<float> t1, t2;
  nn::network_forward(spec, params, x, {}, &t1);
  nn::network_forward(spec, params, x, {}, &t2);
  CHECK(t1.output() == t2.output());
  CHECK(t1.output().all_finite());
}
