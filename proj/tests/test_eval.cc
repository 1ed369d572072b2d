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

#include "cdf/eval.h"
#include "cdf/rng.h"
#include "oracles.h"

using namespace cdf;

namespace {

models::FactorStream unit_stream(const Matrix<float>& rows,
                                 const std::string& id) {
  models::FactorStream f;
  f.utterance_id = id;
  f.kind = models::FactorKind::kSpeaker;
  f.data = rows;
  for (int t = 0; t < f.data.rows(); ++t)
    models::length_normalize(f.data.row(t), f.data.cols());
  return f;
}

}  // namespace

TEST_CASE("dvector basics and naive oracle") {
  // Single frame: the d-vector is that (unit) frame.
  Matrix<float> one(1, 4);
  one(0, 0) = 0.6f;
  one(0, 1) = 0.8f;
  const auto d1 = eval::dvector(unit_stream(one, "u1"));
  CHECK(d1.v[0] == doctest::Approx(0.6));
  CHECK(d1.v[1] == doctest::Approx(0.8));

  // Two antipodal rows average to zero; documented e1 fallback.
  Matrix<float> anti(2, 3);
  anti(0, 0) = 1.0f;
  anti(1, 0) = -1.0f;
  models::FactorStream f;
  f.data = anti;
  f.utterance_id = "u2";
  f.kind = models::FactorKind::kSpeaker;
  const auto d2 = eval::dvector(f);
  CHECK(d2.v[0] == 1.0);
  CHECK(d2.v[1] == 0.0);

  // Random stream matches mean + normalize done from scratch.
  Rng rng(3);
  Matrix<float> rows(17, 6);
  for (size_t i = 0; i < rows.size(); ++i)
    rows.data()[i] = static_cast<float>(rng.normal());
  models::FactorStream fr;
  fr.data = rows;
  fr.utterance_id = "u3";
  const auto d3 = eval::dvector(fr);
  std::vector<double> mean(6, 0.0);
  for (int t = 0; t < 17; ++t)
    for (int j = 0; j < 6; ++j) mean[j] += rows(t, j);
  double norm = 0.0;
  for (auto& x : mean) {
    x /= 17.0;
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (int j = 0; j < 6; ++j)
    CHECK(d3.v[j] == doctest::Approx(mean[j] / norm).epsilon(1e-12));

  models::FactorStream empty;
  empty.data = Matrix<float>(0, 4);
  CHECK_THROWS_AS(eval::dvector(empty), Error);
}

TEST_CASE("cosine properties") {
  eval::DVector a{"a", {1.0, 0.0}}, b{"b", {0.0, 1.0}};
  CHECK(eval::cosine(a, a) == doctest::Approx(1.0));
  CHECK(eval::cosine(a, b) == doctest::Approx(0.0));
  eval::DVector c{"c", {0.6, 0.8}};
  CHECK(eval::cosine(a, c) == doctest::Approx(eval::cosine(c, a)));
  CHECK(eval::cosine(a, c) >= -1.0);
  CHECK(eval::cosine(a, c) <= 1.0);
}

TEST_CASE("top1 identification with brute-force oracle and tie rule") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const int s = 2 + static_cast<int>(rng.uniform_int(8));
    std::vector<eval::DVector> enroll(s);
    for (int i = 0; i < s; ++i) {
      enroll[i].id = strprintf("spk%d", i);
      enroll[i].v.resize(8);
      for (auto& x : enroll[i].v) x = rng.normal();
      enroll[i].v = models::length_normalize(std::move(enroll[i].v));
    }
    eval::DVector test;
    test.v.resize(8);
    for (auto& x : test.v) x = rng.normal();
    test.v = models::length_normalize(std::move(test.v));

    int want = 0;
    double best = -2.0;
    for (int i = 0; i < s; ++i) {
      double dot = 0.0;
      for (int j = 0; j < 8; ++j) dot += enroll[i].v[j] * test.v[j];
      if (dot > best) {
        best = dot;
        want = i;
      }
    }
    CHECK(eval::top1_identify(enroll, test) == want);
  }

  // Exact duplicate enrollments tie; lowest index wins.
  std::vector<eval::DVector> dup = {{"a", {1.0, 0.0}}, {"b", {1.0, 0.0}}};
  CHECK(eval::top1_identify(dup, {"t", {1.0, 0.0}}) == 0);
}

TEST_CASE("random-vector factors score at chance IDR") {
  // Synthetic manifest with in-memory factor streams only.
  synth::CorpusManifest manifest;
  const int speakers = 5, utts_per_spk = 12, frames = 300;
  std::vector<models::FactorStream> factors;
  Rng rng(6);
  for (int s = 0; s < speakers; ++s) {
    for (int u = 0; u < utts_per_spk; ++u) {
      synth::UttRecord rec;
      rec.id = strprintf("u%04d_s%02d_e0", s * utts_per_spk + u, s);
      rec.speaker = s;
      rec.emotion = 0;
      rec.frames = frames;
      manifest.utts.push_back(rec);
      Matrix<float> rows(frames, 16);
      for (size_t i = 0; i < rows.size(); ++i)
        rows.data()[i] = static_cast<float>(rng.normal());
      factors.push_back(unit_stream(rows, rec.id));
    }
  }
  eval::TrialCondition cond;
  cond.enroll_seconds = 5.0;  // 500 frames at 10 ms
  cond.test_frames = 20;
  const auto res = eval::run_sid_eval(manifest, factors, {cond}, 99, 50, 10.0);
  REQUIRE(res.size() == 1);
  CHECK(res[0].trials > 100);
  const double p = 1.0 / speakers;
  const double sigma =
      std::sqrt(p * (1 - p) / static_cast<double>(res[0].trials));
  CHECK(std::abs(res[0].idr - p) <= 3.0 * sigma);

  // Deterministic given the seed.
  const auto res2 = eval::run_sid_eval(manifest, factors, {cond}, 99, 50, 10.0);
  CHECK(res2[0].correct == res[0].correct);
  CHECK(res2[0].trials == res[0].trials);

  // Insufficient enrollment speech is a named error.
  eval::TrialCondition too_long;
  too_long.enroll_seconds = 1e5;
  too_long.test_frames = 20;
  CHECK_THROWS_AS(eval::run_sid_eval(manifest, factors, {too_long}, 99, 50,
                                     10.0),
                  UsageError);
}

TEST_CASE("acc and map reproduce the hand-evaluated equations") {
  // cm = [[3,1],[2,2]]: TP = (3,2), FP = (2,1).
  eval::ConfusionMatrix cm(2);
  cm.at(0, 0) = 3;
  cm.at(0, 1) = 1;
  cm.at(1, 0) = 2;
  cm.at(1, 1) = 2;
  CHECK(eval::acc(cm) == 0.625);
  CHECK(eval::map(cm) == doctest::Approx((3.0 / 5.0 + 2.0 / 3.0) / 2.0)
                             .epsilon(1e-15));

  eval::ConfusionMatrix diag(3);
  diag.at(0, 0) = 4;
  diag.at(1, 1) = 9;
  diag.at(2, 2) = 1;
  CHECK(eval::acc(diag) == 1.0);
  CHECK(eval::map(diag) == 1.0);

  // A class never predicted contributes precision 0.
  eval::ConfusionMatrix never(2);
  never.at(0, 0) = 5;
  never.at(1, 0) = 5;  // class 1 never predicted
  CHECK(eval::map(never) == doctest::Approx(0.25));

  eval::ConfusionMatrix empty(2);
  CHECK_THROWS_AS(eval::acc(empty), Error);
  CHECK_THROWS_AS(eval::map(empty), Error);

  // Random case matches an independent evaluation of the equations.
  Rng rng(8);
  const int k = 4;
  std::vector<int> truth, pred;
  for (int i = 0; i < 500; ++i) {
    truth.push_back(static_cast<int>(rng.uniform_int(k)));
    pred.push_back(static_cast<int>(rng.uniform_int(k)));
  }
  const auto c = eval::confusion(truth, pred, k);
  int64_t tp_sum = 0, all = 0;
  double map_sum = 0.0;
  for (int i = 0; i < k; ++i) {
    int64_t tp = 0, predicted_i = 0;
    for (size_t n = 0; n < truth.size(); ++n) {
      if (pred[n] == i) {
        ++predicted_i;
        if (truth[n] == i) ++tp;
      }
    }
    tp_sum += tp;
    if (predicted_i > 0)
      map_sum += static_cast<double>(tp) / predicted_i;
  }
  all = static_cast<int64_t>(truth.size());
  CHECK(eval::acc(c) == doctest::Approx(static_cast<double>(tp_sum) / all)
                            .epsilon(1e-15));
  CHECK(eval::map(c) == doctest::Approx(map_sum / k).epsilon(1e-15));
}

TEST_CASE("utterance emotion decision") {
  Matrix<float> agree(3, 2);
  for (int t = 0; t < 3; ++t) {
    agree(t, 0) = 0.9f;
    agree(t, 1) = 0.1f;
  }
  CHECK(eval::utterance_emotion(agree) == 0);

  Matrix<float> two(2, 2);
  two(0, 0) = 0.6f;
  two(0, 1) = 0.4f;
  two(1, 0) = 0.2f;
  two(1, 1) = 0.8f;
  CHECK(eval::utterance_emotion(two) == 1);  // mean (0.4, 0.6)

  // Permutation invariance and brute-force agreement.
  Rng rng(9);
  Matrix<float> rows(20, 5);
  for (size_t i = 0; i < rows.size(); ++i)
    rows.data()[i] = static_cast<float>(rng.uniform());
  const int got = eval::utterance_emotion(rows);
  std::vector<double> sum(5, 0.0);
  for (int t = 0; t < 20; ++t)
    for (int j = 0; j < 5; ++j) sum[j] += rows(t, j);
  int want = 0;
  for (int j = 1; j < 5; ++j)
    if (sum[j] > sum[want]) want = j;
  CHECK(got == want);

  Matrix<float> reversed(20, 5);
  for (int t = 0; t < 20; ++t)
    for (int j = 0; j < 5; ++j) reversed(t, j) = rows(19 - t, j);
  CHECK(eval::utterance_emotion(reversed) == got);
}

TEST_CASE("pca recovers axis-aligned structure and preserves planar data") {
  // Axis-aligned 2-D data embedded in 2-D: recovered up to sign.
  Rng rng(10);
  Matrix<double> flat(200, 2);
  for (int t = 0; t < 200; ++t) {
    flat(t, 0) = 5.0 * rng.normal();
    flat(t, 1) = 0.5 * rng.normal();
  }
  const auto proj = eval::pca_project(flat, 2);
  // First component captures the high-variance axis.
  double var0 = 0.0, var1 = 0.0;
  for (int t = 0; t < 200; ++t) {
    var0 += proj(t, 0) * proj(t, 0);
    var1 += proj(t, 1) * proj(t, 1);
  }
  CHECK(var0 > var1);

  // Planar data in 6-D: pairwise distances preserved by the projection.
  Matrix<double> basis(2, 6);
  for (int j = 0; j < 6; ++j) {
    basis(0, j) = rng.normal();
    basis(1, j) = rng.normal();
  }
  // Gram-Schmidt to an orthonormal pair.
  double n0 = 0.0;
  for (int j = 0; j < 6; ++j) n0 += basis(0, j) * basis(0, j);
  n0 = std::sqrt(n0);
  for (int j = 0; j < 6; ++j) basis(0, j) /= n0;
  double dot = 0.0;
  for (int j = 0; j < 6; ++j) dot += basis(0, j) * basis(1, j);
  for (int j = 0; j < 6; ++j) basis(1, j) -= dot * basis(0, j);
  double n1 = 0.0;
  for (int j = 0; j < 6; ++j) n1 += basis(1, j) * basis(1, j);
  n1 = std::sqrt(n1);
  for (int j = 0; j < 6; ++j) basis(1, j) /= n1;

  Matrix<double> planar(80, 6);
  Matrix<double> coords(80, 2);
  for (int t = 0; t < 80; ++t) {
    coords(t, 0) = 3.0 * rng.normal();
    coords(t, 1) = 1.0 * rng.normal();
    for (int j = 0; j < 6; ++j)
      planar(t, j) = coords(t, 0) * basis(0, j) + coords(t, 1) * basis(1, j);
  }
  const auto p2 = eval::pca_project(planar, 2);
  for (int a = 0; a < 80; a += 7)
    for (int b = a + 1; b < 80; b += 11) {
      double d_orig = 0.0, d_proj = 0.0;
      for (int j = 0; j < 6; ++j) {
        const double d = planar(a, j) - planar(b, j);
        d_orig += d * d;
      }
      for (int j = 0; j < 2; ++j) {
        const double d = p2(a, j) - p2(b, j);
        d_proj += d * d;
      }
      CHECK(std::abs(std::sqrt(d_orig) - std::sqrt(d_proj)) < 1e-8);
    }
}

TEST_CASE("pca agrees with the Jacobi eigendecomposition oracle") {
  Rng rng(12);
  const int n = 150, d = 7;
  Matrix<double> data(n, d);
  for (int t = 0; t < n; ++t)
    for (int j = 0; j < d; ++j)
      data(t, j) = rng.normal() * (j + 1) + 0.3 * rng.normal();
  const auto proj = eval::pca_project(data, 2);

  // Oracle: covariance eigenvectors via cyclic Jacobi rotations.
  std::vector<double> mean(d, 0.0);
  for (int t = 0; t < n; ++t)
    for (int j = 0; j < d; ++j) mean[j] += data(t, j);
  for (auto& x : mean) x /= n;
  Matrix<double> cov(d, d);
  for (int t = 0; t < n; ++t)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        cov(i, j) += (data(t, i) - mean[i]) * (data(t, j) - mean[j]) / n;
  Matrix<double> vecs;
  oracles::jacobi_eigen(cov, &vecs);
  for (int k = 0; k < 2; ++k) {
    // Fix the oracle's sign the same way.
    int arg = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(vecs(k, j)) > std::abs(vecs(k, arg))) arg = j;
    const double flip = vecs(k, arg) < 0 ? -1.0 : 1.0;
    for (int t = 0; t < n; ++t) {
      double want = 0.0;
      for (int j = 0; j < d; ++j)
        want += (data(t, j) - mean[j]) * vecs(k, j) * flip;
      CHECK(std::abs(proj(t, k) - want) < 1e-8);
    }
  }
}
