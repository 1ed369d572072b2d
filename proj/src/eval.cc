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

#include "cdf/eval.h"

#include <algorithm>
#include <cmath>
#include <map>

namespace cdf {
namespace eval {

DVector dvector_from_rows(const Matrix<float>& rows, int begin, int end,
                          const std::string& id) {
  if (end <= begin) throw Error("d-vector over an empty frame range");
  DVector out;
  out.id = id;
  out.v.assign(rows.cols(), 0.0);
  for (int t = begin; t < end; ++t) {
    const float* r = rows.row(t);
    for (int j = 0; j < rows.cols(); ++j) out.v[j] += r[j];
  }
  const double inv = 1.0 / (end - begin);
  for (auto& x : out.v) x *= inv;
  out.v = models::length_normalize(std::move(out.v));
  return out;
}

DVector dvector(const models::FactorStream& stream) {
  return dvector_from_rows(stream.data, 0, stream.num_frames(),
                           stream.utterance_id);
}

double cosine(const DVector& a, const DVector& b) {
  CDF_CHECK(a.v.size() == b.v.size(), "d-vector dim mismatch");
  double dot = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) dot += a.v[i] * b.v[i];
  return dot;
}

int top1_identify(const std::vector<DVector>& enrollments,
                  const DVector& test) {
  CDF_CHECK(!enrollments.empty(), "no enrollments");
  int best = 0;
  double best_score = cosine(enrollments[0], test);
  for (size_t i = 1; i < enrollments.size(); ++i) {
    const double score = cosine(enrollments[i], test);
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(i);
    }
  }
  return best;
}

std::string TrialCondition::label() const {
  return strprintf("S(%g-%df)", enroll_seconds, test_frames);
}

std::vector<SidConditionResult> run_sid_eval(
    const synth::CorpusManifest& corpus,
    const std::vector<models::FactorStream>& factors,
    const std::vector<TrialCondition>& conditions, uint64_t seed,
    int max_segments_per_speaker, double frame_shift_ms) {
  CDF_CHECK(factors.size() == corpus.utts.size(),
            "one factor stream per utterance expected");
  const int num_speakers = corpus.num_speakers();
  std::vector<std::vector<int>> by_speaker(num_speakers);
  for (size_t i = 0; i < corpus.utts.size(); ++i) {
    CDF_CHECK(factors[i].utterance_id == corpus.utts[i].id,
              "factor stream order must match the manifest");
    by_speaker[corpus.utts[i].speaker].push_back(static_cast<int>(i));
  }

  std::vector<SidConditionResult> results;
  for (const TrialCondition& cond : conditions) {
    if (cond.enroll_seconds <= 0 || cond.test_frames <= 0)
      throw UsageError("trial condition durations must be positive");
    const int enroll_frames = static_cast<int>(
        std::lround(cond.enroll_seconds * 1000.0 / frame_shift_ms));
    Rng cond_rng = Rng(seed).split(hash64(cond.label().c_str()));

    std::vector<DVector> enrollments;
    std::vector<std::vector<std::pair<int, int>>> test_windows(num_speakers);
    for (int spk = 0; spk < num_speakers; ++spk) {
      std::vector<int> utts = by_speaker[spk];
      if (utts.empty())
        throw UsageError(strprintf("speaker %d has no utterances", spk));
      Rng spk_rng = cond_rng.split(static_cast<uint64_t>(spk));
      spk_rng.shuffle(utts);

      // Enrollment consumes whole utterances (prefix of the last one)
      // until enroll_seconds is covered; later utterances are test pool.
      std::vector<double> mean(factors[utts[0]].dim(), 0.0);
      int covered = 0;
      size_t next_utt = 0;
      while (covered < enroll_frames && next_utt < utts.size()) {
        const Matrix<float>& rows = factors[utts[next_utt]].data;
        const int take =
            std::min(rows.rows(), enroll_frames - covered);
        for (int t = 0; t < take; ++t) {
          const float* r = rows.row(t);
          for (size_t j = 0; j < mean.size(); ++j) mean[j] += r[j];
        }
        covered += take;
        ++next_utt;
      }
      if (covered < enroll_frames)
        throw UsageError(strprintf(
            "speaker %d has only %.1f s of speech, condition %s needs %.1f s "
            "of enrollment",
            spk, covered * frame_shift_ms / 1000.0, cond.label().c_str(),
            cond.enroll_seconds));
      for (auto& x : mean) x /= covered;
      DVector enr;
      enr.id = strprintf("spk%02d", spk);
      enr.v = models::length_normalize(std::move(mean));
      enrollments.push_back(std::move(enr));

      // Non-overlapping consecutive windows from the remaining utterances.
      std::vector<std::pair<int, int>> windows;
      for (size_t k = next_utt; k < utts.size(); ++k) {
        const int t_count = factors[utts[k]].num_frames();
        for (int start = 0; start + cond.test_frames <= t_count;
             start += cond.test_frames)
          windows.emplace_back(utts[k], start);
      }
      if (windows.empty())
        throw UsageError(strprintf(
            "speaker %d has no speech left for %d-frame test segments under "
            "condition %s",
            spk, cond.test_frames, cond.label().c_str()));
      spk_rng.shuffle(windows);
      if (static_cast<int>(windows.size()) > max_segments_per_speaker)
        windows.resize(max_segments_per_speaker);
      test_windows[spk] = std::move(windows);
    }

    SidConditionResult res;
    res.cond = cond;
    for (int spk = 0; spk < num_speakers; ++spk) {
      for (const auto& [utt, start] : test_windows[spk]) {
        const DVector test = dvector_from_rows(
            factors[utt].data, start, start + cond.test_frames,
            corpus.utts[utt].id);
        const int hyp = top1_identify(enrollments, test);
        ++res.trials;
        if (hyp == spk) ++res.correct;
      }
    }
    res.idr = res.trials > 0
                  ? static_cast<double>(res.correct) / res.trials
                  : 0.0;
    results.push_back(res);
  }
  return results;
}

int64_t ConfusionMatrix::false_positives(int i) const {
  int64_t fp = 0;
  for (int t = 0; t < k_; ++t)
    if (t != i) fp += at(t, i);
  return fp;
}

int64_t ConfusionMatrix::total() const {
  int64_t n = 0;
  for (int64_t c : counts_) n += c;
  return n;
}

ConfusionMatrix confusion(std::span<const int> truth,
                          std::span<const int> predicted, int k) {
  CDF_CHECK(truth.size() == predicted.size(), "label count mismatch");
  ConfusionMatrix cm(k);
  for (size_t i = 0; i < truth.size(); ++i) {
    CDF_CHECK(truth[i] >= 0 && truth[i] < k, "true label out of range");
    CDF_CHECK(predicted[i] >= 0 && predicted[i] < k,
              "predicted label out of range");
    ++cm.at(truth[i], predicted[i]);
  }
  return cm;
}

double acc(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total == 0) throw Error("accuracy of an empty confusion matrix");
  int64_t tp = 0;
  for (int i = 0; i < cm.num_classes(); ++i) tp += cm.true_positives(i);
  return static_cast<double>(tp) / total;
}

double map(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw Error("MAP of an empty confusion matrix");
  double sum = 0.0;
  for (int i = 0; i < cm.num_classes(); ++i) {
    const int64_t tp = cm.true_positives(i);
    const int64_t fp = cm.false_positives(i);
    // Precision is undefined for classes never predicted; they count 0.
    if (tp + fp > 0) sum += static_cast<double>(tp) / (tp + fp);
  }
  return sum / cm.num_classes();
}

int utterance_emotion(const Matrix<float>& frame_posteriors) {
  CDF_CHECK(frame_posteriors.rows() > 0, "no frames");
  std::vector<double> mean(frame_posteriors.cols(), 0.0);
  for (int t = 0; t < frame_posteriors.rows(); ++t) {
    const float* r = frame_posteriors.row(t);
    for (int j = 0; j < frame_posteriors.cols(); ++j) mean[j] += r[j];
  }
  int best = 0;
  for (int j = 1; j < frame_posteriors.cols(); ++j)
    if (mean[j] > mean[best]) best = j;
  return best;
}

namespace {

// Leading eigenvector by power iteration; start vector is the largest
// column of the matrix, which is deterministic.
std::vector<double> leading_eigenvector(const Matrix<double>& m,
                                        double* eigenvalue) {
  const int d = m.rows();
  std::vector<double> v(d, 0.0);
  int start_col = 0;
  double best_norm = -1.0;
  for (int c = 0; c < d; ++c) {
    double norm = 0.0;
    for (int r = 0; r < d; ++r) norm += m(r, c) * m(r, c);
    if (norm > best_norm) {
      best_norm = norm;
      start_col = c;
    }
  }
  for (int r = 0; r < d; ++r) v[r] = m(r, start_col);
  if (best_norm <= 0.0) v[0] = 1.0;

  std::vector<double> next(d);
  double lambda = 0.0;
  for (int iter = 0; iter < 1000; ++iter) {
    double norm = 0.0;
    for (int r = 0; r < d; ++r) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += m(r, c) * v[c];
      next[r] = acc;
      norm += acc * acc;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-300) {
      v.assign(d, 0.0);
      v[0] = 1.0;
      lambda = 0.0;
      break;
    }
    double diff = 0.0;
    for (int r = 0; r < d; ++r) {
      next[r] /= norm;
      diff += std::abs(next[r] - v[r]);
    }
    const double flipped = [&] {
      double s = 0.0;
      for (int r = 0; r < d; ++r) s += std::abs(next[r] + v[r]);
      return s;
    }();
    v = next;
    lambda = norm;
    if (std::min(diff, flipped) < 1e-13) break;
  }
  *eigenvalue = lambda;
  return v;
}

}  // namespace

Matrix<double> pca_project(const Matrix<double>& vectors, int dim) {
  CDF_CHECK(vectors.rows() > 0 && dim > 0, "pca needs data");
  CDF_CHECK(dim <= vectors.cols(), "projection dim exceeds data dim");
  const int n = vectors.rows(), d = vectors.cols();
  std::vector<double> mean(d, 0.0);
  for (int t = 0; t < n; ++t)
    for (int j = 0; j < d; ++j) mean[j] += vectors(t, j);
  for (auto& x : mean) x /= n;

  Matrix<double> centered(n, d);
  for (int t = 0; t < n; ++t)
    for (int j = 0; j < d; ++j) centered(t, j) = vectors(t, j) - mean[j];

  Matrix<double> cov(d, d);
  for (int t = 0; t < n; ++t) {
    const double* r = centered.row(t);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) cov(i, j) += r[i] * r[j];
  }
  for (size_t i = 0; i < cov.size(); ++i) cov.data()[i] /= n;

  Matrix<double> basis(dim, d);
  for (int k = 0; k < dim; ++k) {
    double lambda = 0.0;
    std::vector<double> v = leading_eigenvector(cov, &lambda);
    // Sign convention: largest-magnitude component positive.
    int arg = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
    if (v[arg] < 0.0)
      for (auto& x : v) x = -x;
    for (int j = 0; j < d; ++j) basis(k, j) = v[j];
    // Deflate.
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) cov(i, j) -= lambda * v[i] * v[j];
  }

  Matrix<double> out(n, dim);
  for (int t = 0; t < n; ++t)
    for (int k = 0; k < dim; ++k) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += centered(t, j) * basis(k, j);
      out(t, k) = acc;
    }
  return out;
}

}  // namespace eval
}  // namespace cdf
