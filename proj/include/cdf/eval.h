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

#ifndef CDF_EVAL_H_
#define CDF_EVAL_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdf/matrix.h"
#include "cdf/models.h"
#include "cdf/synthcorpus.h"

namespace cdf {
namespace eval {

struct DVector {
  std::string id;
  std::vector<double> v;  // unit norm
};

// Mean of the frame-level speaker factors, length-normalized.
DVector dvector(const models::FactorStream& stream);
DVector dvector_from_rows(const Matrix<float>& rows, int begin, int end,
                          const std::string& id);

double cosine(const DVector& a, const DVector& b);

// Index of the nearest enrollment by cosine; ties keep the lowest index.
int top1_identify(const std::vector<DVector>& enrollments,
                  const DVector& test);

struct TrialCondition {
  double enroll_seconds = 30.0;
  int test_frames = 20;
  std::string label() const;  // "S(30-20f)"
};

struct SidConditionResult {
  TrialCondition cond;
  int64_t trials = 0;
  int64_t correct = 0;
  double idr = 0.0;
};

// Speaker identification over cached per-utterance speaker factors
// (aligned with manifest order). Per speaker, utterances are consumed in
// seeded shuffled order: enrollment takes frames until enroll_seconds is
// covered, the remaining utterances provide non-overlapping test windows
// (up to max_segments per speaker, seeded selection).
std::vector<SidConditionResult> run_sid_eval(
    const synth::CorpusManifest& corpus,
    const std::vector<models::FactorStream>& factors,
    const std::vector<TrialCondition>& conditions, uint64_t seed,
    int max_segments_per_speaker, double frame_shift_ms);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int k) : k_(k), counts_(k * k, 0) {}
  int num_classes() const { return k_; }
  int64_t& at(int truth, int predicted) {
    return counts_[static_cast<size_t>(truth) * k_ + predicted];
  }
  int64_t at(int truth, int predicted) const {
    return counts_[static_cast<size_t>(truth) * k_ + predicted];
  }
  int64_t true_positives(int i) const { return at(i, i); }
  int64_t false_positives(int i) const;  // off-diagonal of column i
  int64_t total() const;

 private:
  int k_;
  std::vector<int64_t> counts_;
};

ConfusionMatrix confusion(std::span<const int> truth,
                          std::span<const int> predicted, int k);

// Overall accuracy, sum TP_i / sum (TP_i + FP_i) == trace / total.
double acc(const ConfusionMatrix& cm);

// Macro average precision; classes never predicted contribute 0.
double map(const ConfusionMatrix& cm);

// argmax of the mean frame posterior; ties keep the lowest class.
int utterance_emotion(const Matrix<float>& frame_posteriors);

// Mean-centered projection onto the top principal components (power
// iteration with deflation); eigenvector signs are fixed by making the
// largest-magnitude component positive.
Matrix<double> pca_project(const Matrix<double>& vectors, int dim = 2);

}  // namespace eval
}  // namespace cdf

#endif  // CDF_EVAL_H_
